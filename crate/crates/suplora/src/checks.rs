//! Self-check suites: the adapter update identity, finite-difference
//! gradients, and projector and subspace properties.

use serde::{Deserialize, Serialize};

use crate::adapter::{
    check_projection_identity, init_adapter, init_baseline, Layer, SuploraAdapter, Variant,
};
use crate::denoiser::{backward, forward, DenoiserParams, OutputGrads};
use crate::error::Result;
use crate::numerics::{complement_basis, norm, principal_subspace, projector, Matrix};
use crate::rng::{gaussian_vec, stream, Stream};
use crate::world::NoiseSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: usize,
    pub total: usize,
    /// Largest measured error against the suite's tolerance.
    pub worst: f64,
    pub tolerance: f64,
    pub failures: Vec<String>,
}

impl SuiteResult {
    fn new(name: &str, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            passed: 0,
            total: 0,
            worst: 0.0,
            tolerance,
            failures: Vec::new(),
        }
    }

    fn record(&mut self, label: impl FnOnce() -> String, err: f64) {
        self.total += 1;
        self.worst = self.worst.max(err);
        if err < self.tolerance {
            self.passed += 1;
        } else {
            self.failures.push(format!("{}: {err:.3e}", label()));
        }
    }

    pub fn ok(&self) -> bool {
        self.passed == self.total
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {}/{} (worst {:.3e}, tolerance {:.0e})",
            if self.ok() { "PASS" } else { "FAIL" },
            self.name,
            self.passed,
            self.total,
            self.worst,
            self.tolerance
        )
    }
}

fn gaussian_matrix(rng: &mut Stream, rows: usize, cols: usize, scale: f64) -> Matrix {
    let v = gaussian_vec(rng, rows * cols)
        .into_iter()
        .map(|x| x * scale)
        .collect();
    Matrix::from_vec(rows, cols, v).expect("finite draw")
}

/// A SuPLoRA adapter on random data with a random nonzero `A`.
fn random_adapter(
    rng: &mut Stream,
    d_in: usize,
    d_out: usize,
    r_s: usize,
    r: usize,
) -> Result<SuploraAdapter> {
    let h_s = gaussian_matrix(rng, d_in, 3 * r_s + 2, 1.0);
    let h_g = gaussian_matrix(rng, d_in, 3 * r + 2, 1.0);
    let mut ad = init_adapter(&h_s, &h_g, r_s, r, d_out)?;
    ad.a = gaussian_matrix(rng, d_out, r, 1.0);
    Ok(ad)
}

/// `instances` random cases of the update identity, cycling `r` over 1, 3, 5.
pub fn identity_suite(instances: usize, seed: u64) -> Result<SuiteResult> {
    let mut suite = SuiteResult::new("update identity", 1e-9);
    let (d_in, d_out, r_s) = (32, 16, 5);
    for i in 0..instances {
        let mut rng = stream(seed, &format!("checks/identity/{i}"));
        let r = [1, 3, 5][i % 3];
        let ad = random_adapter(&mut rng, d_in, d_out, r_s, r)?;
        let w = gaussian_matrix(&mut rng, d_out, d_in, 1.0);
        let h = gaussian_vec(&mut rng, d_in);
        let g = gaussian_vec(&mut rng, d_out);
        let alpha = 10f64.powf(-3.0 + 2.0 * (i as f64 / instances.max(1) as f64));
        let rep = check_projection_identity(&w, &ad, &h, &g, alpha)?;
        suite.record(|| format!("instance {i} (r = {r})"), rep.rel_err);
    }
    Ok(suite)
}

/// A small denoiser with every kind of adapter attached.
pub struct GradientCase {
    pub params: DenoiserParams,
    pub adapters: Vec<SuploraAdapter>,
    pub z: Vec<f64>,
    pub t: usize,
    pub text: Matrix,
    pub grads: OutputGrads,
}

pub fn gradient_case(seed: u64) -> Result<GradientCase> {
    let (dm, dt, np, steps) = (4, 7, 6, 10);
    let schedule = NoiseSchedule::linear(1e-4, 0.2, steps);
    let mut params = DenoiserParams::init(dm, dt, np, schedule, seed);
    let mut rng = stream(seed, "checks/gradient");
    // Larger weights than the default init so the softmax is far from uniform.
    for m in params.tensors_mut() {
        let noise = gaussian_matrix(&mut rng, m.rows(), m.cols(), 0.5);
        m.add_assign(&noise);
    }
    let mut key = random_adapter(&mut rng, dt, dm, 2, 2)?;
    key.a = key.a.scale(0.5);
    let mut value = random_adapter(&mut rng, dt, dm, 2, 2)?;
    value.layer = Layer::Value;
    value.a = value.a.scale(0.5);
    let mut vanilla = init_baseline(Variant::VanillaLora, dt, dm, 2, seed, "checks")?;
    vanilla.layer = if seed % 2 == 0 {
        Layer::Key
    } else {
        Layer::Value
    };
    vanilla.a = gaussian_matrix(&mut rng, dm, 2, 0.5);
    let n_tokens = 2 + (seed as usize % 2);
    let text = gaussian_matrix(&mut rng, dt, n_tokens, 1.0 / (dt as f64).sqrt());
    let t = 1 + (seed as usize * 7) % steps;
    let z = gaussian_vec(&mut rng, np);
    let grads = OutputGrads {
        eps_pred: Some(gaussian_vec(&mut rng, np)),
        x0_pred: Some(gaussian_vec(&mut rng, np)),
        attn: Some(gaussian_matrix(&mut rng, np, n_tokens, 1.0)),
    };
    Ok(GradientCase {
        params,
        adapters: vec![key, value, vanilla],
        z,
        t,
        text,
        grads,
    })
}

impl GradientCase {
    /// The scalar whose gradient `backward` computes: the upstream
    /// gradients dotted with the forward outputs.
    pub fn objective(&self, params: &DenoiserParams, adapters: &[SuploraAdapter]) -> Result<f64> {
        let refs: Vec<&SuploraAdapter> = adapters.iter().collect();
        let tr = forward(params, &refs, &self.z, self.t, &self.text, false)?;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let g = &self.grads;
        Ok(dot(g.eps_pred.as_deref().unwrap_or(&[]), &tr.eps_pred)
            + dot(g.x0_pred.as_deref().unwrap_or(&[]), &tr.x0_pred)
            + g.attn
                .as_ref()
                .map_or(0.0, |a| dot(a.as_slice(), tr.attn.as_slice())))
    }
}

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn nudge(ad: &mut SuploraAdapter, in_b: bool, i: usize, by: f64) {
    let m = if in_b { &mut ad.b } else { &mut ad.a };
    m.as_mut_slice()[i] += by;
}

/// Largest relative error between analytic gradients and central
/// differences over every parameter and every trainable adapter entry.
pub fn gradient_error(case: &GradientCase, step: f64) -> Result<f64> {
    let refs: Vec<&SuploraAdapter> = case.adapters.iter().collect();
    let tr = forward(&case.params, &refs, &case.z, case.t, &case.text, true)?;
    let grads = backward(&case.params, &refs, &tr, &case.grads)?;
    let floor = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..7 {
        for i in 0..grads.params[k].as_slice().len() {
            let mut p = case.params.clone();
            p.tensors_mut()[k].as_mut_slice()[i] += step;
            let up = case.objective(&p, &case.adapters)?;
            p.tensors_mut()[k].as_mut_slice()[i] -= 2.0 * step;
            let down = case.objective(&p, &case.adapters)?;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(
                grads.params[k].as_slice()[i],
                numeric,
                floor,
            ));
        }
    }
    for (j, g) in grads.adapters.iter().enumerate() {
        let mut targets: Vec<(bool, &Matrix)> = vec![(false, &g.a)];
        if let Some(b) = &g.b {
            targets.push((true, b));
        }
        for (is_b, analytic) in targets {
            for i in 0..analytic.as_slice().len() {
                let mut ads = case.adapters.clone();
                nudge(&mut ads[j], is_b, i, step);
                let up = case.objective(&case.params, &ads)?;
                nudge(&mut ads[j], is_b, i, -2.0 * step);
                let down = case.objective(&case.params, &ads)?;
                let numeric = (up - down) / (2.0 * step);
                worst = worst.max(relative_error(analytic.as_slice()[i], numeric, floor));
            }
        }
    }
    Ok(worst)
}

pub fn gradient_suite(configs: usize, seed: u64) -> Result<SuiteResult> {
    let mut suite = SuiteResult::new("finite-difference gradients", 1e-4);
    for i in 0..configs {
        let case = gradient_case(seed.wrapping_add(i as u64))?;
        let err = gradient_error(&case, 1e-5)?;
        suite.record(|| format!("configuration {i}"), err);
    }
    Ok(suite)
}

/// Projector algebra, complement orthogonality, and the exact-zero action
/// of SuPLoRA adapters on the supertype subspace.
pub fn projector_suite(instances: usize, seed: u64) -> Result<SuiteResult> {
    let mut suite = SuiteResult::new("projector and subspace", 1e-10);
    for i in 0..instances {
        let mut rng = stream(seed, &format!("checks/projector/{i}"));
        let d = 8 + i % 25;
        let r_s = 1 + i % 5;
        let h = gaussian_matrix(&mut rng, d, r_s + 3 + i % 4, 1.0);
        let s = principal_subspace(&h, r_s)?;
        let p = projector(&s);
        suite.record(
            || format!("instance {i}: P² = P"),
            p.matmul(&p).sub(&p).max_abs(),
        );
        suite.record(
            || format!("instance {i}: Pᵀ = P"),
            p.transpose().sub(&p).max_abs(),
        );
        suite.record(
            || format!("instance {i}: trace P = r_s"),
            (p.trace() - r_s as f64).abs(),
        );
        let c = complement_basis(&s, d)?;
        suite.record(
            || format!("instance {i}: complement ⟂ S"),
            c.vectors.matmul(&s.vectors.transpose()).max_abs(),
        );
        suite.record(
            || format!("instance {i}: P + P_c = I"),
            p.add(&projector(&c)).sub(&Matrix::identity(d)).max_abs(),
        );
        let r = 1 + i % 3;
        if r_s + r <= d {
            let mut ad = random_adapter(&mut rng, d, 6, r_s, r)?;
            ad.a = gaussian_matrix(&mut rng, 6, r, 3.0);
            let basis = &ad
                .subspace
                .as_ref()
                .expect("SuPLoRA adapters carry S")
                .basis;
            let inside = basis.tr_matvec(&gaussian_vec(&mut rng, r_s));
            let out = ad.a.matvec(&ad.b.matvec(&inside));
            suite.record(
                || format!("instance {i}: ‖ABh‖ for h in S"),
                norm(&out) / norm(&inside),
            );
            suite.record(
                || format!("instance {i}: B ⟂ S"),
                ad.b_subspace_leak().unwrap_or(f64::INFINITY),
            );
        }
    }
    Ok(suite)
}

/// All suites as run by the `checks` command.
pub fn run_all(seed: u64) -> Result<Vec<SuiteResult>> {
    Ok(vec![
        identity_suite(100, seed)?,
        gradient_suite(20, seed)?,
        projector_suite(50, seed)?,
    ])
}
