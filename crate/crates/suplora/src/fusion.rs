//! Closed-form merge of several adapters on one layer into a single weight.
//!
//! The fused weight minimizes
//!
//! ```text
//! Σ_{targets e} ‖W*e − (W + A_g(e) B_g(e)) e‖²  +  γ Σ_{general e} ‖W*e − W e‖²  +  ρ ‖W* − W‖_F²
//! ```
//!
//! whose normal equations give
//! `W* = [Σ_t (W + A B) e eᵀ + γ Σ_g W e eᵀ + ρ W] · [Σ_t e eᵀ + γ Σ_g e eᵀ + ρ I]⁻¹`.

use serde::{Deserialize, Serialize};

use crate::adapter::{delta, SuploraAdapter};
use crate::error::{Error, Result};
use crate::numerics::{norm, Matrix};

#[derive(Clone, Debug)]
pub struct FusionProblem {
    /// `d_out × d_in` base weight.
    pub w: Matrix,
    pub adapters: Vec<SuploraAdapter>,
    /// `d_in × n_t` target embeddings.
    pub targets: Matrix,
    /// Group id of the adapter owning each target column.
    pub target_groups: Vec<usize>,
    /// `d_in × n_g` general embeddings.
    pub general: Matrix,
    /// Weight γ of the generality term.
    pub general_weight: f64,
    /// Proximal ridge ρ toward `W`.
    pub ridge: f64,
}

impl FusionProblem {
    fn adapter_for(&self, group: usize) -> Result<&SuploraAdapter> {
        self.adapters
            .iter()
            .find(|a| a.group_id == group)
            .ok_or_else(|| Error::Config(format!("no adapter for target group {group}")))
    }

    pub fn validate(&self) -> Result<()> {
        let (d_out, d_in) = self.w.shape();
        if self.targets.rows() != d_in || self.general.rows() != d_in {
            return Err(Error::Shape(format!(
                "embeddings must have dimension {d_in} (targets {}, general {})",
                self.targets.rows(),
                self.general.rows()
            )));
        }
        if self.target_groups.len() != self.targets.cols() {
            return Err(Error::Shape("one group label per target column".into()));
        }
        if self.general.cols() == 0 {
            return Err(Error::Config(
                "fusion needs at least one general embedding".into(),
            ));
        }
        for a in &self.adapters {
            if (a.d_out(), a.d_in()) != (d_out, d_in) {
                return Err(Error::Shape(format!(
                    "adapter for group {} does not fit W",
                    a.group_id
                )));
            }
        }
        let mut groups: Vec<usize> = self.adapters.iter().map(|a| a.group_id).collect();
        groups.sort_unstable();
        if groups.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("two adapters share a group id".into()));
        }
        for g in &self.target_groups {
            self.adapter_for(*g)?;
        }
        if !(self.ridge >= 0.0) || !(self.general_weight > 0.0) {
            return Err(Error::Config(
                "ridge must be >= 0 and the general weight > 0".into(),
            ));
        }
        Ok(())
    }

    /// `(N, G)` of the normal equations `W*·G = N`.
    pub fn normal_equations(&self) -> Result<(Matrix, Matrix)> {
        self.validate()?;
        let d_in = self.w.cols();
        let mut gram = Matrix::identity(d_in).scale(self.ridge);
        let mut rhs = self.w.scale(self.ridge);
        let deltas: Vec<(usize, Matrix)> = self
            .adapters
            .iter()
            .map(|a| (a.group_id, delta(a)))
            .collect();
        for j in 0..self.targets.cols() {
            let e = self.targets.col(j);
            let d = &deltas
                .iter()
                .find(|(g, _)| *g == self.target_groups[j])
                .expect("validated")
                .1;
            let y: Vec<f64> = self
                .w
                .matvec(&e)
                .iter()
                .zip(d.matvec(&e))
                .map(|(a, b)| a + b)
                .collect();
            gram.add_outer(1.0, &e, &e);
            rhs.add_outer(1.0, &y, &e);
        }
        for j in 0..self.general.cols() {
            let e = self.general.col(j);
            gram.add_outer(self.general_weight, &e, &e);
            rhs.add_outer(self.general_weight, &self.w.matvec(&e), &e);
        }
        Ok((rhs, gram))
    }

    /// Value of the objective at `w_star`.
    pub fn objective(&self, w_star: &Matrix) -> Result<f64> {
        self.validate()?;
        let mut total = self.ridge * w_star.sub(&self.w).frobenius().powi(2);
        for j in 0..self.targets.cols() {
            let e = self.targets.col(j);
            let merged = self.w.add(&delta(self.adapter_for(self.target_groups[j])?));
            let r: Vec<f64> = w_star
                .matvec(&e)
                .iter()
                .zip(merged.matvec(&e))
                .map(|(a, b)| a - b)
                .collect();
            total += norm(&r).powi(2);
        }
        for j in 0..self.general.cols() {
            let e = self.general.col(j);
            let r: Vec<f64> = w_star
                .matvec(&e)
                .iter()
                .zip(self.w.matvec(&e))
                .map(|(a, b)| a - b)
                .collect();
            total += self.general_weight * norm(&r).powi(2);
        }
        Ok(total)
    }

    /// `‖W*·G − N‖_F / ‖N‖_F`
    pub fn normal_residual(&self, w_star: &Matrix) -> Result<f64> {
        let (n, g) = self.normal_equations()?;
        Ok(w_star.matmul(&g).sub(&n).frobenius() / n.frobenius().max(f64::MIN_POSITIVE))
    }
}

/// Solves the normal equations by Cholesky factorization.
pub fn fuse(problem: &FusionProblem) -> Result<Matrix> {
    let (n, g) = problem.normal_equations()?;
    Matrix::solve_spd_right(&n, &g).ok_or_else(|| {
        Error::Singular(if problem.ridge == 0.0 {
            "the embeddings do not span the input space; set fusion.ridge > 0".into()
        } else {
            "normal matrix is not positive definite".into()
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAlignment {
    pub group_id: usize,
    /// Mean `‖W*e − (W + AB)e‖ / ‖(W + AB)e‖` over the group's targets.
    pub target_alignment: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub groups: Vec<GroupAlignment>,
    /// Mean `‖W*e − We‖ / ‖We‖` over the general embeddings.
    pub general_consistency: f64,
    /// `‖W* − W‖_F`
    pub update_norm: f64,
    pub normal_residual: f64,
}

impl FusionReport {
    pub fn mean_target_alignment(&self) -> f64 {
        if self.groups.is_empty() {
            return 0.0;
        }
        self.groups.iter().map(|g| g.target_alignment).sum::<f64>() / self.groups.len() as f64
    }
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(b).max(f64::MIN_POSITIVE)
}

pub fn fusion_report(problem: &FusionProblem, w_star: &Matrix) -> Result<FusionReport> {
    problem.validate()?;
    let mut ids: Vec<usize> = problem.target_groups.clone();
    ids.sort_unstable();
    ids.dedup();
    let mut groups = Vec::new();
    for gid in ids {
        let merged = problem.w.add(&delta(problem.adapter_for(gid)?));
        let cols: Vec<usize> = (0..problem.targets.cols())
            .filter(|j| problem.target_groups[*j] == gid)
            .collect();
        let total: f64 = cols
            .iter()
            .map(|&j| {
                let e = problem.targets.col(j);
                rel(&w_star.matvec(&e), &merged.matvec(&e))
            })
            .sum();
        groups.push(GroupAlignment {
            group_id: gid,
            target_alignment: total / cols.len() as f64,
        });
    }
    let general_consistency = (0..problem.general.cols())
        .map(|j| {
            let e = problem.general.col(j);
            rel(&w_star.matvec(&e), &problem.w.matvec(&e))
        })
        .sum::<f64>()
        / problem.general.cols() as f64;
    Ok(FusionReport {
        groups,
        general_consistency,
        update_norm: w_star.sub(&problem.w).frobenius(),
        normal_residual: problem.normal_residual(w_star)?,
    })
}

/// Embeddings the fused weight should keep unchanged: supertype and
/// retained centroids, general concepts, and the null token.
pub fn general_embeddings(world: &crate::world::World) -> Result<Matrix> {
    use crate::hierarchy::ConceptKind;
    let mut cols = Vec::new();
    for c in &world.registry.concepts {
        if matches!(
            c.kind,
            ConceptKind::Supertype | ConceptKind::Retained | ConceptKind::General
        ) {
            cols.push(world.assets(&c.id)?.centroid.clone());
        }
    }
    cols.push(world.null_embedding.clone());
    Matrix::from_cols(&cols)
}

/// The fusion problem of one layer: targets are the description columns of
/// every group's erased concepts. Both terms of the objective are taken as
/// means, so the generality weight is `term_scale · n_t / n_g`.
pub fn layer_problem(
    w: &Matrix,
    adapters: Vec<SuploraAdapter>,
    world: &crate::world::World,
    groups: &[crate::hierarchy::ConceptGroup],
    cfg: &crate::config::FusionConfig,
) -> Result<FusionProblem> {
    let mut parts = Vec::new();
    let mut labels = Vec::new();
    for g in groups {
        let m = world.stacked_descriptions(&g.members)?;
        labels.extend(std::iter::repeat(g.group_id).take(m.cols()));
        parts.push(m);
    }
    let refs: Vec<&Matrix> = parts.iter().collect();
    let targets = if refs.is_empty() {
        Matrix::zeros(w.cols(), 0)
    } else {
        Matrix::hcat(&refs)?
    };
    let general = general_embeddings(world)?;
    let general_weight = if targets.cols() == 0 {
        cfg.term_scale
    } else {
        cfg.term_scale * targets.cols() as f64 / general.cols() as f64
    };
    Ok(FusionProblem {
        w: w.clone(),
        adapters,
        targets,
        target_groups: labels,
        general,
        general_weight,
        ridge: cfg.ridge,
    })
}

/// Fuses key and value adapters of all groups into a copy of `params`.
pub fn fuse_model(
    params: &crate::denoiser::DenoiserParams,
    adapters: &[[SuploraAdapter; 2]],
    world: &crate::world::World,
    groups: &[crate::hierarchy::ConceptGroup],
    cfg: &crate::config::FusionConfig,
) -> Result<(crate::denoiser::DenoiserParams, [FusionReport; 2])> {
    let mut out = params.clone();
    let mut reports = Vec::new();
    for (slot, w) in [(0usize, &params.w_k), (1, &params.w_v)] {
        let ads: Vec<SuploraAdapter> = adapters.iter().map(|pair| pair[slot].clone()).collect();
        let problem = layer_problem(w, ads, world, groups, cfg)?;
        let fused = fuse(&problem)?;
        reports.push(fusion_report(&problem, &fused)?);
        if slot == 0 {
            out.w_k = fused;
        } else {
            out.w_v = fused;
        }
    }
    let [k, v]: [FusionReport; 2] = reports.try_into().expect("two layers");
    Ok((out, [k, v]))
}
