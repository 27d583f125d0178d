//! Group-wise suppression training.
//!
//! One key adapter and one value adapter per group are trained jointly on
//! every erased concept of the group. The loss for a sample is
//! `L = L_attn + λ · L_diff`: the squared attention of the concept token on
//! the concept's mask, plus the denoising error outside the mask.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{SuploraAdapter, Variant};
use crate::config::ErasureConfig;
use crate::denoiser::{backward, forward, DenoiserParams, ForwardTrace, OutputGrads};
use crate::error::{Error, Result};
use crate::hierarchy::ConceptGroup;
use crate::numerics::{Matrix, SubspaceBasis};
use crate::optim::Adam;
use crate::rng::{gaussian_vec, stream};
use crate::world::{noise_image, World};

/// Position of the concept token in every prompt.
pub const CONCEPT_TOKEN: usize = 0;

/// A loss value with its gradient with respect to the loss input.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Set when the mask leaves nothing to measure.
    pub degenerate: bool,
}

/// `Σ_{p ∈ mask} attn[p, token]² / |mask|`, with its gradient on the
/// attention matrix (row-major, `n_pixels × n_tokens`).
pub fn attention_loss(trace: &ForwardTrace, mask: &[f64], token_index: usize) -> Result<LossTerm> {
    let (np, nt) = trace.attn.shape();
    if mask.len() != np {
        return Err(Error::Shape(format!(
            "mask has {} pixels, attention {np}",
            mask.len()
        )));
    }
    if token_index >= nt {
        return Err(Error::Shape(format!(
            "token {token_index} outside {nt} tokens"
        )));
    }
    let count: f64 = mask.iter().sum();
    let mut grad = vec![0.0; np * nt];
    if count == 0.0 {
        return Ok(LossTerm {
            value: 0.0,
            grad,
            degenerate: true,
        });
    }
    let mut value = 0.0;
    for p in 0..np {
        if mask[p] != 0.0 {
            let a = trace.attn[(p, token_index)];
            value += mask[p] * a * a;
            grad[p * nt + token_index] = 2.0 * mask[p] * a / count;
        }
    }
    Ok(LossTerm {
        value: value / count,
        grad,
        degenerate: false,
    })
}

/// Mean squared error over the pixels outside the mask, with its gradient
/// on `pred`. An empty mask gives the plain mean squared error.
pub fn diffusion_loss(truth: &[f64], pred: &[f64], mask: &[f64]) -> Result<LossTerm> {
    if truth.len() != pred.len() || truth.len() != mask.len() {
        return Err(Error::Shape(format!(
            "truth {}, prediction {}, mask {}",
            truth.len(),
            pred.len(),
            mask.len()
        )));
    }
    let keep: f64 = mask.iter().map(|m| 1.0 - m).sum();
    let mut grad = vec![0.0; pred.len()];
    if keep == 0.0 {
        return Ok(LossTerm {
            value: 0.0,
            grad,
            degenerate: true,
        });
    }
    let mut value = 0.0;
    for i in 0..pred.len() {
        let w = 1.0 - mask[i];
        let d = pred[i] - truth[i];
        value += w * d * d;
        grad[i] = 2.0 * w * d / keep;
    }
    Ok(LossTerm {
        value: value / keep,
        grad,
        degenerate: false,
    })
}

/// One CSV row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub l_attn: f64,
    pub l_diff: f64,
    /// Mean concept-token attention on the mask for this step's samples.
    pub masked_mass: f64,
    /// `max_h ‖A‖₂ · ‖(I − P_S)·h‖` over supertype samples and both layers.
    pub drift_bound: f64,
}

pub const LOG_HEADER: &str = "step,L,L_attn,L_Diff,masked_mass,drift_bound";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.loss, self.l_attn, self.l_diff, self.masked_mass, self.drift_bound
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupErasureReport {
    pub group_id: usize,
    pub supertype: String,
    pub variant: Variant,
    pub steps: usize,
    /// Mean masked attention mass over the group's concepts at t = T/2.
    pub masked_mass_before: f64,
    pub masked_mass_after: f64,
    /// Logged steps where `max_h ‖A·B·h‖` exceeded the drift bound.
    pub bound_violations: usize,
    /// Largest `‖A·B·h‖ − bound` seen (negative when the bound held).
    pub max_bound_gap: f64,
    /// Step at which a non-finite loss stopped training; the adapters then
    /// hold the last finite values.
    pub diverged_at: Option<usize>,
    #[serde(skip)]
    pub log: Vec<LogRow>,
}

impl GroupErasureReport {
    pub fn csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for r in &self.log {
            out.push_str(&r.csv());
            out.push('\n');
        }
        out
    }
}

/// Mean concept-token attention over the concept's mask when the denoiser
/// sees the noised target at t = T/2 with the concept's centroid prompt.
pub fn masked_attention(
    params: &DenoiserParams,
    adapters: &[&SuploraAdapter],
    world: &World,
    concept_id: &str,
    probe_seed: u64,
) -> Result<f64> {
    let a = world.assets(concept_id)?;
    let (Some(target), Some(mask)) = (&a.target, &a.mask) else {
        return Err(Error::Config(format!("concept `{concept_id}` has no mask")));
    };
    let count: f64 = mask.as_slice().iter().sum();
    if count == 0.0 {
        return Ok(0.0);
    }
    let t = (params.schedule.steps() / 2).max(1);
    let eps = gaussian_vec(&mut stream(probe_seed, "eval/probe"), params.n_pixels());
    let z = noise_image(target.as_slice(), t, &eps, &params.schedule)?;
    let tr = forward(params, adapters, &z, t, &world.prompt(&a.centroid), false)?;
    let mass: f64 = mask
        .as_slice()
        .iter()
        .enumerate()
        .map(|(p, m)| m * tr.attn[(p, CONCEPT_TOKEN)])
        .sum();
    Ok(mass / count)
}

fn mean_masked_attention(
    params: &DenoiserParams,
    adapters: &[&SuploraAdapter],
    world: &World,
    members: &[String],
    probe_seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for id in members {
        total += masked_attention(params, adapters, world, id, probe_seed)?;
    }
    Ok(total / members.len().max(1) as f64)
}

/// `(max_h ‖A·B·h‖, max_h ‖A‖₂·‖(I − P_S)·h‖)` over the columns of `samples`
/// and both adapters.
pub fn drift_and_bound(
    adapters: &[SuploraAdapter; 2],
    basis: &SubspaceBasis,
    samples: &Matrix,
) -> (f64, f64) {
    let mut drift: f64 = 0.0;
    let mut bound: f64 = 0.0;
    let residual_max = (0..samples.cols())
        .map(|j| crate::numerics::norm(&basis.residual(&samples.col(j))))
        .fold(0.0, f64::max);
    for ad in adapters {
        let ab = ad.a.matmul(&ad.b);
        for j in 0..samples.cols() {
            drift = drift.max(crate::numerics::norm(&ab.matvec(&samples.col(j))));
        }
        bound = bound.max(ad.a.spectral_norm() * residual_max);
    }
    (drift, bound)
}

/// Trains the key and value adapters of one group.
///
/// `supertype_basis` and `supertype_samples` feed the logged drift bound;
/// for SuPLoRA adapters they should be the subspace the adapters were built
/// from and the matrix it came from.
#[allow(clippy::too_many_arguments)]
pub fn erase_group(
    params: &DenoiserParams,
    adapters: [SuploraAdapter; 2],
    group: &ConceptGroup,
    world: &World,
    cfg: &ErasureConfig,
    seed: u64,
    probe_seed: u64,
    supertype_basis: &SubspaceBasis,
    supertype_samples: &Matrix,
) -> Result<([SuploraAdapter; 2], GroupErasureReport)> {
    if group.members.is_empty() {
        return Err(Error::Config(format!(
            "group {} has no members",
            group.group_id
        )));
    }
    if !(cfg.lambda >= 0.0) {
        return Err(Error::Config("lambda must be >= 0".into()));
    }
    let variant = adapters[0].variant;
    let mut ads = adapters;
    let before = {
        let refs: Vec<&SuploraAdapter> = ads.iter().collect();
        mean_masked_attention(params, &refs, world, &group.members, probe_seed)?
    };

    let mut items = Vec::new();
    for id in &group.members {
        let a = world.assets(id)?;
        if a.target.is_none() {
            return Err(Error::Config(format!("`{id}` has no target image")));
        }
        for k in 0..a.descriptions.cols() {
            for _ in 0..cfg.timesteps_per_description {
                items.push((a, k));
            }
        }
    }

    let mut rng = stream(
        seed,
        &format!("erasure/group/{}/{}", group.group_id, variant.name()),
    );
    let trains_b = variant.trains_b();
    let lens: Vec<usize> = if trains_b {
        vec![
            ads[0].a.as_slice().len(),
            ads[1].a.as_slice().len(),
            ads[0].b.as_slice().len(),
            ads[1].b.as_slice().len(),
        ]
    } else {
        vec![ads[0].a.as_slice().len(), ads[1].a.as_slice().len()]
    };
    let mut opt = Adam::new(&lens);
    let np = params.n_pixels();
    let steps_t = params.schedule.steps();
    let mut report = GroupErasureReport {
        group_id: group.group_id,
        supertype: group.supertype.clone(),
        variant,
        steps: 0,
        masked_mass_before: before,
        masked_mass_after: before,
        bound_violations: 0,
        max_bound_gap: f64::NEG_INFINITY,
        diverged_at: None,
        log: Vec::new(),
    };

    let mut step = 0;
    'epochs: for _ in 0..cfg.epochs {
        items.shuffle(&mut rng);
        for chunk in items.chunks(cfg.batch) {
            let last_good = ads.clone();
            let mut ga: Vec<Matrix> = ads
                .iter()
                .map(|a| Matrix::zeros(a.a.rows(), a.a.cols()))
                .collect();
            let mut gb: Vec<Matrix> = ads
                .iter()
                .map(|a| Matrix::zeros(a.b.rows(), a.b.cols()))
                .collect();
            let (mut l_sum, mut la_sum, mut ld_sum, mut mass_sum) = (0.0, 0.0, 0.0, 0.0);
            let w = 1.0 / chunk.len() as f64;
            for (asset, k) in chunk {
                let target = asset.target.as_ref().expect("checked above").as_slice();
                let mask = asset
                    .mask
                    .as_ref()
                    .expect("targets come with masks")
                    .as_slice();
                let t = rng.gen_range(1..=steps_t);
                let eps = gaussian_vec(&mut rng, np);
                let z = noise_image(target, t, &eps, &params.schedule)?;
                let text = world.prompt(&asset.descriptions.col(*k));
                let refs: Vec<&SuploraAdapter> = ads.iter().collect();
                let tr = forward(params, &refs, &z, t, &text, true)?;
                let la = attention_loss(&tr, mask, CONCEPT_TOKEN)?;
                let ld = diffusion_loss(target, &tr.x0_pred, mask)?;
                l_sum += la.value + cfg.lambda * ld.value;
                la_sum += la.value;
                ld_sum += ld.value;
                let count: f64 = mask.iter().sum();
                if count > 0.0 {
                    mass_sum += (0..np)
                        .map(|p| mask[p] * tr.attn[(p, CONCEPT_TOKEN)])
                        .sum::<f64>()
                        / count;
                }
                let attn_grad =
                    Matrix::from_vec(np, tr.attn.cols(), la.grad.iter().map(|g| g * w).collect())?;
                let x0_grad: Vec<f64> = ld.grad.iter().map(|g| g * cfg.lambda * w).collect();
                let grads = backward(
                    params,
                    &refs,
                    &tr,
                    &OutputGrads {
                        attn: Some(attn_grad),
                        x0_pred: Some(x0_grad),
                        eps_pred: None,
                    },
                )?;
                for (i, g) in grads.adapters.iter().enumerate() {
                    ga[i].add_assign(&g.a);
                    if let Some(b) = &g.b {
                        gb[i].add_assign(b);
                    }
                }
            }
            if !l_sum.is_finite() {
                ads = last_good;
                report.diverged_at = Some(step);
                break 'epochs;
            }
            {
                let [k_ad, v_ad] = &mut ads;
                let mut tensors: Vec<&mut [f64]> =
                    vec![k_ad.a.as_mut_slice(), v_ad.a.as_mut_slice()];
                let mut grads: Vec<&[f64]> = vec![ga[0].as_slice(), ga[1].as_slice()];
                if trains_b {
                    tensors.push(k_ad.b.as_mut_slice());
                    tensors.push(v_ad.b.as_mut_slice());
                    grads.push(gb[0].as_slice());
                    grads.push(gb[1].as_slice());
                }
                opt.step(cfg.lr, &mut tensors, &grads);
            }
            if ads.iter().any(|a| !a.a.is_finite() || !a.b.is_finite()) {
                ads = last_good;
                report.diverged_at = Some(step);
                break 'epochs;
            }
            step += 1;
            if step % cfg.log_every == 0 {
                let (drift, bound) = drift_and_bound(&ads, supertype_basis, supertype_samples);
                report.max_bound_gap = report.max_bound_gap.max(drift - bound);
                if drift > bound + 1e-9 {
                    report.bound_violations += 1;
                }
                report.log.push(LogRow {
                    step,
                    loss: l_sum * w,
                    l_attn: la_sum * w,
                    l_diff: ld_sum * w,
                    masked_mass: mass_sum * w,
                    drift_bound: bound,
                });
            }
        }
    }
    report.steps = step;
    let (drift, bound) = drift_and_bound(&ads, supertype_basis, supertype_samples);
    report.max_bound_gap = report.max_bound_gap.max(drift - bound);
    let refs: Vec<&SuploraAdapter> = ads.iter().collect();
    report.masked_mass_after =
        mean_masked_attention(params, &refs, world, &group.members, probe_seed)?;
    Ok((ads, report))
}

/// Key and value adapters for one group, plus the supertype subspace and
/// samples used for the drift bound.
pub struct GroupInit {
    pub adapters: [SuploraAdapter; 2],
    pub basis: SubspaceBasis,
    pub samples: Matrix,
}

/// Builds the group's adapters with `A = 0`. Baseline variants draw `B`
/// from the seed; the supertype subspace is computed for all variants so
/// their drift can be compared against the same bound.
pub fn init_group(
    world: &World,
    group: &ConceptGroup,
    variant: Variant,
    r: usize,
    r_s: usize,
    d_model: usize,
    seed: u64,
) -> Result<GroupInit> {
    let samples = world.supertype_samples(&group.supertype)?;
    let basis = crate::numerics::principal_subspace(&samples, r_s)?;
    let mut key = match variant {
        Variant::Suplora => {
            let h_g = world.stacked_descriptions(&group.members)?;
            let mut a = crate::adapter::init_adapter(&samples, &h_g, r_s, r, d_model)?;
            if let Some(m) = a.subspace.as_mut() {
                m.supertype_id = group.supertype.clone();
            }
            a
        }
        _ => crate::adapter::init_baseline(
            variant,
            world.embed_dim(),
            d_model,
            r,
            seed,
            &format!("group/{}", group.group_id),
        )?,
    };
    key.group_id = group.group_id;
    let value = key.for_layer(crate::adapter::Layer::Value);
    Ok(GroupInit {
        adapters: [key, value],
        basis,
        samples,
    })
}

/// Initializes and trains every group's adapters in group order.
pub fn erase_all(
    params: &DenoiserParams,
    world: &World,
    groups: &[ConceptGroup],
    variant: Variant,
    run: &crate::config::RunConfig,
) -> Result<Vec<([SuploraAdapter; 2], GroupErasureReport)>> {
    let seed = run.erasure_seed();
    groups
        .iter()
        .map(|g| {
            let init = init_group(
                world,
                g,
                variant,
                run.suplora.r,
                run.suplora.r_s,
                params.d_model(),
                seed,
            )?;
            erase_group(
                params,
                init.adapters,
                g,
                world,
                &run.erasure,
                seed,
                run.eval.probe_seed,
                &init.basis,
                &init.samples,
            )
        })
        .collect()
}
