//! Toy conditional denoiser with a single cross-attention block.
//!
//! For pixel `p` with noisy value `z_p` at timestep `t`:
//!
//! ```text
//! x_p = lift · z_p + pos_p + time_t              (d_model)
//! q_p = W_q · x_p
//! k_n = (W_k + Σ A·B) · e_n,  v_n = (W_v + Σ A·B) · e_n   for prompt tokens e_n
//! a_p = softmax_n(q_p · k_n / √d_model)
//! x̂0_p = w_out · (Σ_n a_pn v_n + x_p)
//! ε̂_p = (z_p − √ᾱ_t · x̂0_p) / √(1 − ᾱ_t)
//! ```
//!
//! The read-out predicts the clean pixel; the noise prediction is derived
//! from it, so both parameterizations share one set of weights.

use rand::Rng;

use crate::adapter::{Layer, SuploraAdapter};
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, Matrix};
use crate::optim::Adam;
use crate::rng::{gaussian, gaussian_vec, stream};
use crate::world::{NoiseSchedule, World};

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    /// `d_model × 1` per-pixel lift of the noisy value.
    pub lift: Matrix,
    /// `d_model × n_pixels` positional table.
    pub pos: Matrix,
    /// `d_model × T` timestep table.
    pub time_embed: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    /// `1 × d_model` read-out.
    pub w_out: Matrix,
    pub schedule: NoiseSchedule,
}

/// Names in checkpoint order.
pub const TENSOR_NAMES: [&str; 7] = ["lift", "pos", "time_embed", "w_q", "w_k", "w_v", "w_out"];

impl DenoiserParams {
    pub fn init(
        d_model: usize,
        d_text: usize,
        n_pixels: usize,
        schedule: NoiseSchedule,
        seed: u64,
    ) -> Self {
        let mut rng = stream(seed, "denoiser/init");
        let t = schedule.steps();
        let mut draw = |rows: usize, cols: usize, scale: f64| {
            let v = gaussian_vec(&mut rng, rows * cols)
                .into_iter()
                .map(|x| x * scale)
                .collect();
            Matrix::from_vec(rows, cols, v).expect("finite draw")
        };
        let dm = d_model as f64;
        let dt = d_text as f64;
        Self {
            lift: draw(d_model, 1, 0.1),
            pos: draw(d_model, n_pixels, 0.5),
            time_embed: draw(d_model, t, 0.1),
            w_q: draw(d_model, d_model, 1.0 / dm.sqrt()),
            w_k: draw(d_model, d_text, 1.0 / dt.sqrt()),
            w_v: draw(d_model, d_text, 1.0 / dt.sqrt()),
            w_out: draw(1, d_model, 1.0 / dm.sqrt()),
            schedule,
        }
    }

    pub fn for_world(world: &World, d_model: usize, seed: u64) -> Self {
        Self::init(
            d_model,
            world.embed_dim(),
            world.n_pixels(),
            world.schedule.clone(),
            seed,
        )
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_text(&self) -> usize {
        self.w_k.cols()
    }

    pub fn n_pixels(&self) -> usize {
        self.pos.cols()
    }

    pub fn tensors(&self) -> [&Matrix; 7] {
        [
            &self.lift,
            &self.pos,
            &self.time_embed,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_out,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 7] {
        [
            &mut self.lift,
            &mut self.pos,
            &mut self.time_embed,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_out,
        ]
    }

    pub fn from_tensors(tensors: Vec<Matrix>, schedule: NoiseSchedule) -> Result<Self> {
        let [lift, pos, time_embed, w_q, w_k, w_v, w_out]: [Matrix; 7] =
            tensors.try_into().map_err(|v: Vec<Matrix>| {
                Error::Shape(format!("expected 7 tensors, got {}", v.len()))
            })?;
        let p = Self {
            lift,
            pos,
            time_embed,
            w_q,
            w_k,
            w_v,
            w_out,
            schedule,
        };
        p.check_shapes()?;
        Ok(p)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let dm = self.d_model();
        let ok = self.lift.shape() == (dm, 1)
            && self.pos.rows() == dm
            && self.time_embed.shape() == (dm, self.schedule.steps())
            && self.w_q.shape() == (dm, dm)
            && self.w_k.rows() == dm
            && self.w_v.shape() == self.w_k.shape()
            && self.w_out.shape() == (1, dm);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(
                "denoiser tensors are mutually inconsistent".into(),
            ))
        }
    }
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
struct Cache {
    z: Vec<f64>,
    t: usize,
    text: Matrix,
    /// `n_pixels × d_model`
    x: Matrix,
    q: Matrix,
    /// `n_tokens × d_model`
    keys: Matrix,
    values: Matrix,
    o: Matrix,
    /// `B·e_n` per adapter, `n_tokens × r`.
    down: Vec<Matrix>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub eps_pred: Vec<f64>,
    pub x0_pred: Vec<f64>,
    /// `n_pixels × n_tokens`, each row a probability distribution.
    pub attn: Matrix,
    cache: Option<Cache>,
}

impl ForwardTrace {
    /// A trace without backward cache, for evaluating losses on given outputs.
    pub fn from_outputs(eps_pred: Vec<f64>, x0_pred: Vec<f64>, attn: Matrix) -> Self {
        Self {
            eps_pred,
            x0_pred,
            attn,
            cache: None,
        }
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

/// Upstream gradients on the forward outputs. Absent entries count as zero.
#[derive(Clone, Debug, Default)]
pub struct OutputGrads {
    pub eps_pred: Option<Vec<f64>>,
    pub x0_pred: Option<Vec<f64>>,
    pub attn: Option<Matrix>,
}

#[derive(Clone, Debug)]
pub struct AdapterGrad {
    pub a: Matrix,
    /// Only for variants that train `B`.
    pub b: Option<Matrix>,
}

#[derive(Clone, Debug)]
pub struct Gradients {
    /// Same order and shapes as [`DenoiserParams::tensors`].
    pub params: [Matrix; 7],
    /// One entry per adapter passed to the forward pass.
    pub adapters: Vec<AdapterGrad>,
}

fn check_inputs(
    params: &DenoiserParams,
    adapters: &[&SuploraAdapter],
    z: &[f64],
    t: usize,
    text: &Matrix,
) -> Result<()> {
    if z.len() != params.n_pixels() {
        return Err(Error::Shape(format!(
            "z_t has {} pixels, model expects {}",
            z.len(),
            params.n_pixels()
        )));
    }
    if t == 0 || t > params.schedule.steps() {
        return Err(Error::Shape(format!(
            "timestep {t} outside 1..={}",
            params.schedule.steps()
        )));
    }
    if text.rows() != params.d_text() || text.cols() == 0 {
        return Err(Error::Shape(format!(
            "text is {}x{}, expected {} rows and at least one token",
            text.rows(),
            text.cols(),
            params.d_text()
        )));
    }
    for ad in adapters {
        if ad.d_in() != params.d_text()
            || ad.d_out() != params.d_model()
            || ad.a.cols() != ad.rank()
        {
            return Err(Error::Shape(format!(
                "adapter for group {} ({}) is {}x{}x{}, layer is {}x{}",
                ad.group_id,
                ad.layer.name(),
                ad.d_out(),
                ad.rank(),
                ad.d_in(),
                params.d_model(),
                params.d_text()
            )));
        }
    }
    Ok(())
}

/// Keys (or values) for every token, one row per token, plus each
/// adapter's down-projection of the tokens.
fn project_tokens(
    w: &Matrix,
    layer: Layer,
    adapters: &[&SuploraAdapter],
    text: &Matrix,
    down: &mut [Matrix],
) -> Matrix {
    let n = text.cols();
    let mut out = Matrix::zeros(n, w.rows());
    for tok in 0..n {
        let e = text.col(tok);
        let mut k = w.matvec(&e);
        for (i, ad) in adapters.iter().enumerate() {
            if ad.layer != layer {
                continue;
            }
            let h = ad.b.matvec(&e);
            axpy(&mut k, 1.0, &ad.a.matvec(&h));
            down[i].row_mut(tok).copy_from_slice(&h);
        }
        out.row_mut(tok).copy_from_slice(&k);
    }
    out
}

/// Runs the denoiser. Adapters are added to the layer they name; several
/// adapters on one layer add up.
pub fn forward(
    params: &DenoiserParams,
    adapters: &[&SuploraAdapter],
    z: &[f64],
    t: usize,
    text: &Matrix,
    keep_cache: bool,
) -> Result<ForwardTrace> {
    check_inputs(params, adapters, z, t, text)?;
    let dm = params.d_model();
    let np = params.n_pixels();
    let nt = text.cols();
    let inv_sqrt = 1.0 / (dm as f64).sqrt();

    let mut x = Matrix::zeros(np, dm);
    for i in 0..dm {
        let l = params.lift[(i, 0)];
        let te = params.time_embed[(i, t - 1)];
        let pos = params.pos.row(i);
        for p in 0..np {
            x[(p, i)] = l * z[p] + pos[p] + te;
        }
    }
    let mut q = Matrix::zeros(np, dm);
    for p in 0..np {
        let xp = x.row(p);
        let qp = q.row_mut(p);
        for (i, qi) in qp.iter_mut().enumerate() {
            *qi = dot(params.w_q.row(i), xp);
        }
    }
    let mut down: Vec<Matrix> = adapters
        .iter()
        .map(|a| Matrix::zeros(nt, a.rank()))
        .collect();
    let keys = project_tokens(&params.w_k, Layer::Key, adapters, text, &mut down);
    let values = project_tokens(&params.w_v, Layer::Value, adapters, text, &mut down);

    let mut attn = Matrix::zeros(np, nt);
    let mut o = Matrix::zeros(np, dm);
    let mut x0 = vec![0.0; np];
    let w_out = params.w_out.row(0);
    for p in 0..np {
        let qp = q.row(p);
        let row = attn.row_mut(p);
        let mut m = f64::NEG_INFINITY;
        for (n, r) in row.iter_mut().enumerate() {
            *r = dot(qp, keys.row(n)) * inv_sqrt;
            m = m.max(*r);
        }
        let mut s = 0.0;
        for r in row.iter_mut() {
            *r = (*r - m).exp();
            s += *r;
        }
        row.iter_mut().for_each(|r| *r /= s);
        let op = o.row_mut(p);
        for n in 0..nt {
            axpy(op, attn[(p, n)], values.row(n));
        }
        x0[p] = dot(w_out, o.row(p)) + dot(w_out, x.row(p));
    }

    let ab = params.schedule.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let eps_pred = z
        .iter()
        .zip(&x0)
        .map(|(zp, f)| (zp - sa * f) / sb)
        .collect();
    if !attn.is_finite() || x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(
            "denoiser forward produced NaN or infinity".into(),
        ));
    }
    let cache = keep_cache.then(|| Cache {
        z: z.to_vec(),
        t,
        text: text.clone(),
        x,
        q,
        keys,
        values,
        o,
        down,
    });
    Ok(ForwardTrace {
        eps_pred,
        x0_pred: x0,
        attn,
        cache,
    })
}

/// Exact gradients of a scalar loss with respect to every parameter and
/// every adapter passed to [`forward`], given the loss's gradients on the
/// forward outputs. `B` of a frozen variant gets no gradient.
pub fn backward(
    params: &DenoiserParams,
    adapters: &[&SuploraAdapter],
    trace: &ForwardTrace,
    grads: &OutputGrads,
) -> Result<Gradients> {
    let c = trace.cache.as_ref().ok_or_else(|| {
        Error::Config("backward needs a trace produced with keep_cache = true".into())
    })?;
    let dm = params.d_model();
    let np = params.n_pixels();
    let nt = c.text.cols();
    let inv_sqrt = 1.0 / (dm as f64).sqrt();
    let ab = params.schedule.alpha_bar(c.t);
    let eps_to_x0 = -(ab.sqrt()) / (1.0 - ab).sqrt();

    let mut d_x0 = grads.x0_pred.clone().unwrap_or_else(|| vec![0.0; np]);
    if let Some(de) = &grads.eps_pred {
        axpy(&mut d_x0, eps_to_x0, de);
    }
    for g in [&grads.eps_pred, &grads.x0_pred].into_iter().flatten() {
        if g.len() != np {
            return Err(Error::Shape("output gradient length".into()));
        }
    }

    let w_out = params.w_out.row(0);
    let mut g_wout = Matrix::zeros(1, dm);
    let mut dx = Matrix::zeros(np, dm);
    let mut dq = Matrix::zeros(np, dm);
    let mut dkeys = Matrix::zeros(nt, dm);
    let mut dvals = Matrix::zeros(nt, dm);
    let mut da = vec![0.0; nt];
    let mut ds = vec![0.0; nt];

    for p in 0..np {
        let g = d_x0[p];
        let a_p = trace.attn.row(p);
        // Read-out and residual.
        {
            let gw = g_wout.row_mut(0);
            axpy(gw, g, c.o.row(p));
            axpy(gw, g, c.x.row(p));
        }
        axpy(dx.row_mut(p), g, w_out);
        // do_p = g · w_out
        for n in 0..nt {
            da[n] = g * dot(w_out, c.values.row(n));
            axpy(dvals.row_mut(n), a_p[n] * g, w_out);
        }
        if let Some(gattn) = &grads.attn {
            for n in 0..nt {
                da[n] += gattn[(p, n)];
            }
        }
        let mean: f64 = (0..nt).map(|n| a_p[n] * da[n]).sum();
        for n in 0..nt {
            ds[n] = a_p[n] * (da[n] - mean) * inv_sqrt;
        }
        let qp = c.q.row(p);
        let dqp = dq.row_mut(p);
        for n in 0..nt {
            axpy(dqp, ds[n], c.keys.row(n));
            axpy(dkeys.row_mut(n), ds[n], qp);
        }
    }

    // Queries back to the pixel states.
    let mut g_wq = Matrix::zeros(dm, dm);
    for p in 0..np {
        let dqp = dq.row(p);
        let xp = c.x.row(p);
        for (i, d) in dqp.iter().enumerate() {
            if *d != 0.0 {
                axpy(g_wq.row_mut(i), *d, xp);
            }
        }
        let dxp = params.w_q.tr_matvec(dqp);
        axpy(dx.row_mut(p), 1.0, &dxp);
    }

    let mut g_lift = Matrix::zeros(dm, 1);
    let mut g_pos = Matrix::zeros(dm, np);
    let mut g_time = Matrix::zeros(dm, params.schedule.steps());
    for p in 0..np {
        let dxp = dx.row(p);
        for i in 0..dm {
            g_lift[(i, 0)] += dxp[i] * c.z[p];
            g_pos[(i, p)] = dxp[i];
            g_time[(i, c.t - 1)] += dxp[i];
        }
    }

    // Token projections: dW = Σ_n d(out_n) e_nᵀ.
    let mut g_wk = Matrix::zeros(dm, params.d_text());
    let mut g_wv = Matrix::zeros(dm, params.d_text());
    for n in 0..nt {
        let e = c.text.col(n);
        g_wk.add_outer(1.0, dkeys.row(n), &e);
        g_wv.add_outer(1.0, dvals.row(n), &e);
    }

    let mut adapter_grads = Vec::with_capacity(adapters.len());
    for (i, ad) in adapters.iter().enumerate() {
        let dout = match ad.layer {
            Layer::Key => &dkeys,
            Layer::Value => &dvals,
        };
        // ∂L/∂A = Σ_n (∂L/∂o_n) (B e_n)ᵀ
        let mut ga = Matrix::zeros(ad.d_out(), ad.rank());
        for n in 0..nt {
            ga.add_outer(1.0, dout.row(n), c.down[i].row(n));
        }
        let gb = ad.variant.trains_b().then(|| {
            let mut gb = Matrix::zeros(ad.rank(), ad.d_in());
            for n in 0..nt {
                gb.add_outer(1.0, &ad.a.tr_matvec(dout.row(n)), &c.text.col(n));
            }
            gb
        });
        adapter_grads.push(AdapterGrad { a: ga, b: gb });
    }

    Ok(Gradients {
        params: [g_lift, g_pos, g_time, g_wq, g_wk, g_wv, g_wout],
        adapters: adapter_grads,
    })
}

/// Mean squared error of the clean-image prediction and its gradient.
fn x0_mse(pred: &[f64], target: &[f64], scale: f64) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n * scale
        })
        .collect();
    (loss / n, grad)
}

#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default)]
pub struct PretrainReport {
    /// Mini-batch loss of every step.
    pub losses: Vec<f64>,
}

impl PretrainReport {
    /// Mean loss over the trailing `window` steps.
    pub fn trailing_mean(&self, window: usize) -> f64 {
        let n = self.losses.len();
        if n == 0 {
            return f64::NAN;
        }
        let w = window.min(n).max(1);
        self.losses[n - w..].iter().sum::<f64>() / w as f64
    }
}

/// Trains every denoiser parameter on the world's (concept, description,
/// timestep, noise) tuples with Adam and a cosine learning-rate decay.
///
/// The loss is the squared error of the clean-image prediction, which equals
/// the noise-prediction loss reweighted by `(1 − ᾱ_t) / ᾱ_t`.
pub fn pretrain(
    params: &mut DenoiserParams,
    world: &World,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    let items = world.trainable();
    if items.is_empty() {
        return Err(Error::Config("world has no concepts with targets".into()));
    }
    let mut rng = stream(cfg.seed, "denoiser/pretrain");
    let mut opt = Adam::new(&params.tensors().map(|m| m.as_slice().len()));
    let np = params.n_pixels();
    let steps_t = params.schedule.steps();
    let mut report = PretrainReport::default();
    for step in 0..cfg.steps {
        let mut acc: Option<[Matrix; 7]> = None;
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let item = items[rng.gen_range(0..items.len())];
            let k = rng.gen_range(0..item.descriptions.cols());
            let t = rng.gen_range(1..=steps_t);
            let eps: Vec<f64> = (0..np).map(|_| gaussian(&mut rng)).collect();
            let x0 = item
                .target
                .as_ref()
                .expect("trainable items have targets")
                .as_slice();
            let z = crate::world::noise_image(x0, t, &eps, &params.schedule)?;
            let text = world.prompt(&item.descriptions.col(k));
            let tr = forward(params, &[], &z, t, &text, true)?;
            let (l, g) = x0_mse(&tr.x0_pred, x0, 1.0 / cfg.batch as f64);
            loss += l / cfg.batch as f64;
            let grads = backward(
                params,
                &[],
                &tr,
                &OutputGrads {
                    x0_pred: Some(g),
                    ..Default::default()
                },
            )?;
            match acc.as_mut() {
                None => acc = Some(grads.params),
                Some(a) => {
                    for (s, d) in a.iter_mut().zip(&grads.params) {
                        s.add_assign(d);
                    }
                }
            }
        }
        if !loss.is_finite() || loss > 1e3 {
            return Err(Error::Diverged(format!(
                "pretraining loss {loss} at step {step}"
            )));
        }
        report.losses.push(loss);
        let lr =
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
        let acc = acc.expect("batch >= 1");
        let grads: Vec<&[f64]> = acc.iter().map(|m| m.as_slice()).collect();
        let mut tensors: Vec<&mut [f64]> = params
            .tensors_mut()
            .into_iter()
            .map(|m| m.as_mut_slice())
            .collect();
        opt.step(lr, &mut tensors, &grads);
    }
    Ok(report)
}

/// Mean clean-image squared error over `n` seeded draws from the world.
pub fn denoising_loss(params: &DenoiserParams, world: &World, n: usize, seed: u64) -> Result<f64> {
    let items = world.trainable();
    let mut rng = stream(seed, "denoiser/eval");
    let np = params.n_pixels();
    let mut total = 0.0;
    for _ in 0..n {
        let item = items[rng.gen_range(0..items.len())];
        let k = rng.gen_range(0..item.descriptions.cols());
        let t = rng.gen_range(1..=params.schedule.steps());
        let eps: Vec<f64> = (0..np).map(|_| gaussian(&mut rng)).collect();
        let x0 = item.target.as_ref().expect("trainable").as_slice();
        let z = crate::world::noise_image(x0, t, &eps, &params.schedule)?;
        let tr = forward(
            params,
            &[],
            &z,
            t,
            &world.prompt(&item.descriptions.col(k)),
            false,
        )?;
        total += x0_mse(&tr.x0_pred, x0, 1.0).0;
    }
    Ok(total / n as f64)
}

/// Deterministic DDIM (η = 0) over all T steps from seeded Gaussian noise;
/// the result is clamped to `[0, 1]`.
pub fn sample(
    params: &DenoiserParams,
    adapters: &[&SuploraAdapter],
    text: &Matrix,
    noise_seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = stream(noise_seed, "denoiser/sample");
    let mut x: Vec<f64> = (0..params.n_pixels()).map(|_| gaussian(&mut rng)).collect();
    for t in (1..=params.schedule.steps()).rev() {
        let tr = forward(params, adapters, &x, t, text, false)?;
        let prev = params.schedule.alpha_bar(t - 1);
        let (a, b) = (prev.sqrt(), (1.0 - prev).sqrt());
        for ((xp, f), e) in x.iter_mut().zip(&tr.x0_pred).zip(&tr.eps_pred) {
            *xp = a * f + b * e;
        }
    }
    Ok(x.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}
