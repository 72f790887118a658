//! Training: deterministic least squares and mean-field variational
//! inference over the same fit loop. VI keeps one (μ, ρ) pair per scalar
//! parameter with σ = log(1+e^ρ), draws θ = μ + σ·ε per window via the
//! reparameterization trick, and maximizes an ELBO whose KL term is scaled
//! by 1/(number of windows) so an epoch counts it once. The optimizer is
//! Adam with global-norm clipping and a linear warmup.

use crate::error::{Error, Result};
use crate::gating::EvalCtx;
use crate::model::{make_windows, PouModel, Window};
use crate::nn::Bound;
use crate::spectral::Field;
use crate::tape::{stable_softplus, NodeId, ParamStore, Tape};
use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const OBJECTIVES: &[&str] = &["least-squares", "elbo"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// One of `OBJECTIVES`.
    pub objective: String,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Steps of linear warmup from 0 to `lr`, then constant.
    pub warmup_steps: usize,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Prior std s₀ of the isotropic Gaussian prior (VI only).
    pub prior_std: f64,
    /// Initial posterior std when promoting deterministic parameters.
    pub init_sigma: f64,
    /// Autoregressive window length P.
    pub window: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps; 0 means no cap.
    pub max_steps: usize,
    /// Early stop once the smoothed batch R² reaches this value; 0 disables.
    pub stop_r2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: "least-squares".into(),
            lr: 1.25e-4,
            batch: 8,
            epochs: 10,
            warmup_steps: 100,
            clip_norm: 1.0,
            prior_std: 1.0,
            init_sigma: 0.01,
            window: 8,
            seed: 0,
            max_steps: 0,
            stop_r2: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !OBJECTIVES.contains(&self.objective.as_str()) {
            return Err(Error::invalid(format!(
                "unknown objective '{}', known: {OBJECTIVES:?}",
                self.objective
            )));
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) || !(self.prior_std > 0.0) || !(self.init_sigma > 0.0) {
            return Err(Error::invalid(
                "lr, clip_norm, prior_std and init_sigma must be positive",
            ));
        }
        if self.batch == 0 || self.epochs == 0 || self.window == 0 {
            return Err(Error::invalid("batch, epochs and window must be positive"));
        }
        Ok(())
    }
}

/// One supervised pair, with an optional loss mask over the grid and an
/// optional per-sample gate field.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub input: Field,
    pub target: Field,
    pub mask: Option<ArrayD<f64>>,
    pub gates: Option<ArrayD<f64>>,
}

impl PairSample {
    fn ctx(&self) -> EvalCtx<'_> {
        EvalCtx {
            sample_gates: self.gates.as_ref(),
        }
    }
}

/// Snapshot series for window training, with an optional shared loss mask.
#[derive(Debug, Clone)]
pub struct SeriesData {
    pub series: Vec<Vec<Field>>,
    pub mask: Option<ArrayD<f64>>,
}

pub enum Dataset {
    Pairs(Vec<PairSample>),
    Series(SeriesData),
}

impl Dataset {
    fn len(&self) -> usize {
        match self {
            Dataset::Pairs(p) => p.len(),
            Dataset::Series(s) => s.series.len(),
        }
    }
}

// ---------------------------------------------------------------------------
// losses

/// Sum of squared errors between `pred` (on the tape) and `target`,
/// restricted by the mask when present.
pub fn sse_node(
    tape: &mut Tape,
    pred: NodeId,
    target: &ArrayD<f64>,
    mask: Option<&ArrayD<f64>>,
) -> Result<NodeId> {
    let t = tape.constant_real(target.clone());
    let diff = tape.sub(pred, t)?;
    let sq = tape.square(diff)?;
    let masked = match mask {
        Some(m) => {
            let mnode = tape.constant_real(m.clone());
            tape.row_scale(sq, mnode)?
        }
        None => sq,
    };
    tape.sum_all(masked)
}

/// Masked squared-error loss of a batch, summed over samples; evaluation
/// only, no gradients.
pub fn loss_least_squares(model: &PouModel, store: &ParamStore, batch: &[PairSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in batch {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, store);
        let u = tape.constant_real(s.input.values.clone());
        let pred = model.apply_pou(&mut tape, &bound, u, &s.ctx())?;
        let loss = sse_node(&mut tape, pred, &s.target.values, s.mask.as_ref())?;
        total += tape.value(loss).scalar_value()?;
    }
    Ok(total)
}

/// Gaussian log likelihood Σ −½[log(2πσ²) + (ṽ−μ)²/σ²] over masked points.
/// σ² must be positive wherever the mask is.
pub fn gaussian_loglik_node(
    tape: &mut Tape,
    target: &ArrayD<f64>,
    mu: NodeId,
    var: NodeId,
    mask: Option<&ArrayD<f64>>,
) -> Result<NodeId> {
    let vv = tape.value(var).real()?;
    if vv.shape() != target.shape() {
        return Err(Error::Shape {
            op: "gaussian_loglik",
            lhs: vv.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let spatial = &target.shape()[..target.ndim() - 1];
    match mask {
        Some(m) => {
            if m.shape() != spatial {
                return Err(Error::Shape {
                    op: "gaussian_loglik mask",
                    lhs: m.shape().to_vec(),
                    rhs: spatial.to_vec(),
                });
            }
            let channels = target.shape()[target.ndim() - 1];
            let mflat: Vec<f64> = m.iter().copied().collect();
            for (k, v) in vv.iter().enumerate() {
                if mflat[k / channels] != 0.0 && *v <= 0.0 {
                    return Err(Error::numerical(format!(
                        "gaussian_loglik: nonpositive variance {v} at a masked point"
                    )));
                }
            }
        }
        None => {
            if let Some(v) = vv.iter().find(|v| **v <= 0.0) {
                return Err(Error::numerical(format!(
                    "gaussian_loglik: nonpositive variance {v}"
                )));
            }
        }
    }
    let t = tape.constant_real(target.clone());
    let r = tape.sub(mu, t)?;
    let r2 = tape.square(r)?;
    let q = tape.div(r2, var)?;
    let lv = tape.ln(var)?;
    let lv = tape.add_scalar(lv, (2.0 * PI).ln())?;
    let s = tape.add(lv, q)?;
    let s = tape.scale(s, -0.5);
    let masked = match mask {
        Some(m) => {
            let mnode = tape.constant_real(m.clone());
            tape.row_scale(s, mnode)?
        }
        None => s,
    };
    tape.sum_all(masked)
}

// ---------------------------------------------------------------------------
// variational parameters

/// Flat store of variational parameters: keys `mu.<p>` and `rho.<p>` for
/// every deterministic parameter `p`, in the deterministic order.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams(pub ParamStore);

impl VariationalParams {
    /// Promote deterministic parameters to Gaussians centered on them with
    /// std `init_sigma`.
    pub fn from_deterministic(params: &ParamStore, init_sigma: f64) -> Self {
        let rho0 = (init_sigma.exp() - 1.0).ln();
        let mut store = ParamStore::new();
        for (name, v) in params {
            store.insert(format!("mu.{name}"), v.clone());
            store.insert(format!("rho.{name}"), ArrayD::from_elem(v.raw_dim(), rho0));
        }
        VariationalParams(store)
    }

    pub fn from_flat(store: ParamStore) -> Result<Self> {
        for name in store.keys() {
            if !name.starts_with("mu.") && !name.starts_with("rho.") {
                return Err(Error::invalid(format!(
                    "variational store has unprefixed entry '{name}'"
                )));
            }
        }
        Ok(VariationalParams(store))
    }

    pub fn base_names(&self) -> Vec<String> {
        self.0
            .keys()
            .filter_map(|k| k.strip_prefix("mu.").map(str::to_string))
            .collect()
    }

    /// Posterior means as a deterministic parameter set.
    pub fn mean_params(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for name in self.base_names() {
            out.insert(name.clone(), self.0[&format!("mu.{name}")].clone());
        }
        out
    }
}

/// Draw θ = μ + σ·ε with ε ~ N(0,1) from a seeded generator.
pub fn sample_weights(vp: &VariationalParams, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ParamStore::new();
    for name in vp.base_names() {
        let mu = &vp.0[&format!("mu.{name}")];
        let rho = &vp.0[&format!("rho.{name}")];
        let mut theta = mu.clone();
        for (t, r) in theta.iter_mut().zip(rho.iter()) {
            let eps: f64 = StandardNormal.sample(&mut rng);
            *t += stable_softplus(*r) * eps;
        }
        out.insert(name, theta);
    }
    out
}

/// Closed-form KL(q ‖ N(0, s₀²I)) = Σ [log(s₀/σ) + (σ²+μ²)/(2s₀²) − ½].
pub fn kl_gaussian(vp: &VariationalParams, s0: f64) -> f64 {
    let mut total = 0.0;
    for name in vp.base_names() {
        let mu = &vp.0[&format!("mu.{name}")];
        let rho = &vp.0[&format!("rho.{name}")];
        for (m, r) in mu.iter().zip(rho.iter()) {
            let sigma = stable_softplus(*r);
            total += (s0 / sigma).ln() + (sigma * sigma + m * m) / (2.0 * s0 * s0) - 0.5;
        }
    }
    total
}

/// Variational binding: leaves for μ and ρ, θ = μ + softplus(ρ)·ε assembled
/// on the tape under the base parameter names.
pub struct VarBound {
    pub theta: Bound,
    pub mu_ids: Vec<NodeId>,
    pub rho_ids: Vec<NodeId>,
}

pub fn bind_variational(tape: &mut Tape, vp: &VariationalParams, eps: &ParamStore) -> Result<VarBound> {
    let mut theta = Bound::new();
    let mut mu_ids = Vec::new();
    let mut rho_ids = Vec::new();
    for name in vp.base_names() {
        let mu = tape.leaf(&format!("mu.{name}"), vp.0[&format!("mu.{name}")].clone());
        let rho = tape.leaf(&format!("rho.{name}"), vp.0[&format!("rho.{name}")].clone());
        let e = eps
            .get(&name)
            .ok_or_else(|| Error::invalid(format!("missing noise for '{name}'")))?;
        let en = tape.constant_real(e.clone());
        let sigma = tape.softplus(rho)?;
        let perturb = tape.mul(sigma, en)?;
        let t = tape.add(mu, perturb)?;
        theta.insert(name, t);
        mu_ids.push(mu);
        rho_ids.push(rho);
    }
    Ok(VarBound {
        theta,
        mu_ids,
        rho_ids,
    })
}

/// Standard-normal noise with the shapes of the base parameters.
pub fn draw_eps(vp: &VariationalParams, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut out = ParamStore::new();
    for name in vp.base_names() {
        let mu = &vp.0[&format!("mu.{name}")];
        let e = ArrayD::from_shape_fn(mu.raw_dim(), |_| StandardNormal.sample(rng));
        out.insert(name, e);
    }
    out
}

pub fn zero_eps(vp: &VariationalParams) -> ParamStore {
    let mut out = ParamStore::new();
    for name in vp.base_names() {
        out.insert(name.clone(), ArrayD::zeros(vp.0[&format!("mu.{name}")].raw_dim()));
    }
    out
}

/// KL on the tape from the bound (μ, ρ) leaves.
pub fn kl_gaussian_node(tape: &mut Tape, vb: &VarBound, s0: f64) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for (&mu, &rho) in vb.mu_ids.iter().zip(&vb.rho_ids) {
        let sigma = tape.softplus(rho)?;
        let s2 = tape.square(sigma)?;
        let m2 = tape.square(mu)?;
        let quad = tape.add(s2, m2)?;
        let quad = tape.scale(quad, 1.0 / (2.0 * s0 * s0));
        let ls = tape.ln(sigma)?;
        let term = tape.sub(quad, ls)?;
        let term = tape.add_scalar(term, s0.ln() - 0.5)?;
        let sum = tape.sum_all(term)?;
        acc = Some(match acc {
            None => sum,
            Some(a) => tape.add(a, sum)?,
        });
    }
    acc.ok_or_else(|| Error::invalid("kl of an empty parameter set"))
}

/// Pieces of one window's ELBO: elbo = loglik − kl/num_windows.
pub struct WindowElbo {
    pub elbo: NodeId,
    pub loglik: NodeId,
    pub kl: NodeId,
    /// (series index, mean node) for every window target, for metrics.
    pub mus: Vec<(usize, NodeId)>,
}

/// Probabilistic rollout over one window on the tape, Gaussian likelihood
/// against the stored snapshots, KL scaled by the window count.
pub fn elbo_window(
    model: &PouModel,
    tape: &mut Tape,
    vb: &VarBound,
    series: &[Field],
    window: Window,
    mask: Option<&ArrayD<f64>>,
    num_windows: usize,
    s0: f64,
    ctx: &EvalCtx,
) -> Result<WindowElbo> {
    let mut mu = tape.constant_real(series[window.start].values.clone());
    let zeros = ArrayD::zeros(series[window.start].values.raw_dim());
    let mut var = tape.constant_real(zeros);
    let mut loglik: Option<NodeId> = None;
    let mut mus = Vec::new();
    for k in window.targets() {
        let (nm, nv) = model.autoregressive_step_prob(tape, &vb.theta, mu, var, ctx)?;
        mu = nm;
        var = nv;
        mus.push((k, mu));
        let ll = gaussian_loglik_node(tape, &series[k].values, mu, var, mask)?;
        loglik = Some(match loglik {
            None => ll,
            Some(a) => tape.add(a, ll)?,
        });
    }
    let loglik = loglik.expect("window horizon is positive");
    let kl = kl_gaussian_node(tape, vb, s0)?;
    let scaled = tape.scale(kl, 1.0 / num_windows as f64);
    let elbo = tape.sub(loglik, scaled)?;
    Ok(WindowElbo {
        elbo,
        loglik,
        kl,
        mus,
    })
}

// ---------------------------------------------------------------------------
// metrics

/// Sufficient statistics for pooled R², wMAPE and relative RMSE.
#[derive(Debug, Clone, Copy, Default)]
pub struct MetricAccum {
    n: f64,
    sum_t: f64,
    sum_t2: f64,
    sse: f64,
    sum_abs_err: f64,
    sum_abs_t: f64,
}

impl MetricAccum {
    pub fn add(&mut self, pred: &ArrayD<f64>, target: &ArrayD<f64>, mask: Option<&ArrayD<f64>>) {
        let mflat: Option<Vec<f64>> = mask.map(|m| m.iter().copied().collect());
        let channels = match &mflat {
            Some(m) if !m.is_empty() => pred.len() / m.len(),
            _ => 1,
        };
        for (k, (p, t)) in pred.iter().zip(target.iter()).enumerate() {
            if let Some(m) = &mflat {
                if m[k / channels] == 0.0 {
                    continue;
                }
            }
            self.n += 1.0;
            self.sum_t += t;
            self.sum_t2 += t * t;
            self.sse += (p - t) * (p - t);
            self.sum_abs_err += (p - t).abs();
            self.sum_abs_t += t.abs();
        }
    }

    pub fn r2(&self) -> Option<f64> {
        let sst = self.sum_t2 - self.sum_t * self.sum_t / self.n;
        if self.n == 0.0 || sst <= 0.0 {
            None
        } else {
            Some(1.0 - self.sse / sst)
        }
    }

    pub fn wmape(&self) -> Option<f64> {
        if self.sum_abs_t == 0.0 {
            None
        } else {
            Some(self.sum_abs_err / self.sum_abs_t)
        }
    }

    pub fn rel_rmse(&self) -> Option<f64> {
        if self.sum_t2 == 0.0 {
            None
        } else {
            Some((self.sse / self.sum_t2).sqrt())
        }
    }
}

/// Pooled (R², wMAPE); None marks an undefined value (constant target or
/// zero-mass target).
pub fn metrics_r2_wmape(
    pred: &ArrayD<f64>,
    target: &ArrayD<f64>,
    mask: Option<&ArrayD<f64>>,
) -> (Option<f64>, Option<f64>) {
    let mut acc = MetricAccum::default();
    acc.add(pred, target, mask);
    (acc.r2(), acc.wmape())
}

// ---------------------------------------------------------------------------
// optimizer

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Parameters plus Adam moments and the step counter; `fit` mutates this in
/// place so the caller can checkpoint whatever state was last valid.
#[derive(Debug, Clone)]
pub struct FitState {
    pub params: ParamStore,
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: u64,
}

impl FitState {
    pub fn new(params: ParamStore) -> Self {
        let m = params
            .iter()
            .map(|(k, a)| (k.clone(), ArrayD::zeros(a.raw_dim())))
            .collect();
        let v = params
            .iter()
            .map(|(k, a)| (k.clone(), ArrayD::zeros(a.raw_dim())))
            .collect();
        FitState {
            params,
            m,
            v,
            step: 0,
        }
    }

    pub fn resume(params: ParamStore, m: ParamStore, v: ParamStore, step: u64) -> Result<Self> {
        if m.is_empty() && v.is_empty() {
            let mut s = FitState::new(params);
            s.step = step;
            return Ok(s);
        }
        for k in params.keys() {
            if !m.contains_key(k) || !v.contains_key(k) {
                return Err(Error::format(format!("optimizer state missing '{k}'")));
            }
        }
        Ok(FitState { params, m, v, step })
    }
}

/// Scale gradients so the global norm is at most `clip`; returns the
/// pre-clip norm.
pub fn clip_global(grads: &mut ParamStore, clip: f64) -> f64 {
    let norm = grads
        .values()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > clip {
        let s = clip / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

/// Linear warmup to the base rate over `warmup` steps, constant after.
pub fn warmup_lr(base: f64, step: u64, warmup: usize) -> f64 {
    if warmup == 0 {
        return base;
    }
    let f = ((step + 1) as f64 / warmup as f64).min(1.0);
    base * f
}

/// One Adam update at the state's (incremented) step count.
pub fn adam_step(state: &mut FitState, grads: &ParamStore, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - ADAM_BETA1.powi(t);
    let bias2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, g) in grads {
        let p = state.params.get_mut(name).expect("gradient for known param");
        let m = state.m.get_mut(name).expect("m state");
        let v = state.v.get_mut(name).expect("v state");
        for ((p, m), (v, g)) in p
            .iter_mut()
            .zip(m.iter_mut())
            .zip(v.iter_mut().zip(g.iter()))
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let mhat = *m / bias1;
            let vhat = *v / bias2;
            *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

// ---------------------------------------------------------------------------
// fit loop

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub r2: Option<f64>,
    pub wmape: Option<f64>,
    pub kl: Option<f64>,
    pub loglik: Option<f64>,
    pub lr: f64,
}

fn opt_num(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "nan".into(),
    }
}

pub fn metrics_header(objective: &str) -> &'static str {
    if objective == "elbo" {
        "step,epoch,loss,r2,wmape,kl,loglik,lr"
    } else {
        "step,epoch,loss,r2,wmape,lr"
    }
}

impl MetricsRow {
    pub fn csv_line(&self, objective: &str) -> String {
        if objective == "elbo" {
            format!(
                "{},{},{},{},{},{},{},{}",
                self.step,
                self.epoch,
                self.loss,
                opt_num(self.r2),
                opt_num(self.wmape),
                opt_num(self.kl),
                opt_num(self.loglik),
                self.lr
            )
        } else {
            format!(
                "{},{},{},{},{},{}",
                self.step,
                self.epoch,
                self.loss,
                opt_num(self.r2),
                opt_num(self.wmape),
                self.lr
            )
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitReport {
    pub rows: Vec<MetricsRow>,
    pub stopped_early: bool,
}

enum Item {
    Pair(usize),
    Win(usize, Window),
}

fn per_step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (step + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Minibatch training. The gradient of each step is the mean over the
/// batch; accumulation runs in fixed index order. `on_step` sees every
/// metrics row together with the updated state (for logging and
/// checkpointing). A non-finite loss aborts before touching the state, so
/// the caller still holds the last good parameters.
pub fn fit(
    model: &PouModel,
    data: &Dataset,
    cfg: &TrainConfig,
    state: &mut FitState,
    mut on_step: impl FnMut(&MetricsRow, &FitState) -> Result<()>,
) -> Result<FitReport> {
    cfg.validate()?;
    if data.len() == 0 {
        return Err(Error::invalid("empty dataset"));
    }
    let elbo = cfg.objective == "elbo";
    if elbo && !model.config.probabilistic {
        return Err(Error::invalid("elbo training needs a probabilistic model"));
    }

    // enumerate items and, for series data, the global window count
    let mut items = Vec::new();
    match data {
        Dataset::Pairs(pairs) => {
            if elbo {
                return Err(Error::invalid("elbo training needs snapshot series"));
            }
            items.extend((0..pairs.len()).map(Item::Pair));
        }
        Dataset::Series(sd) => {
            for (si, series) in sd.series.iter().enumerate() {
                for w in make_windows(series.len(), cfg.window)? {
                    items.push(Item::Win(si, w));
                }
            }
        }
    }
    let num_windows = items.len().max(1);

    let vp = if elbo {
        Some(VariationalParams::from_flat(state.params.clone())?)
    } else {
        None
    };

    let mut report = FitReport::default();
    let mut smoothed_r2: Option<f64> = None;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut shuffle_rng);

        for chunk in order.chunks(cfg.batch) {
            let bsz = chunk.len() as f64;
            let mut grads: ParamStore = state
                .params
                .iter()
                .map(|(k, a)| (k.clone(), ArrayD::zeros(a.raw_dim())))
                .collect();
            let mut loss_sum = 0.0;
            let mut kl_sum = 0.0;
            let mut ll_sum = 0.0;
            let mut acc = MetricAccum::default();
            let mut eps_rng = per_step_rng(cfg.seed, state.step);

            for &ix in chunk {
                let mut tape = Tape::new();
                let loss_node = match (&items[ix], data) {
                    (Item::Pair(i), Dataset::Pairs(pairs)) => {
                        let s = &pairs[*i];
                        let bound = model.bind(&mut tape, &state.params);
                        let u = tape.constant_real(s.input.values.clone());
                        let pred = model.apply_pou(&mut tape, &bound, u, &s.ctx())?;
                        acc.add(tape.value(pred).real()?, &s.target.values, s.mask.as_ref());
                        sse_node(&mut tape, pred, &s.target.values, s.mask.as_ref())?
                    }
                    (Item::Win(si, w), Dataset::Series(sd)) => {
                        let series = &sd.series[*si];
                        let mask = sd.mask.as_ref();
                        let ctx = EvalCtx::default();
                        if let Some(vp) = &vp {
                            let eps = draw_eps(vp, &mut eps_rng);
                            let vb = bind_variational(&mut tape, vp, &eps)?;
                            let parts = elbo_window(
                                model,
                                &mut tape,
                                &vb,
                                series,
                                *w,
                                mask,
                                num_windows,
                                cfg.prior_std,
                                &ctx,
                            )?;
                            for (k, mid) in &parts.mus {
                                acc.add(tape.value(*mid).real()?, &series[*k].values, mask);
                            }
                            kl_sum += tape.value(parts.kl).scalar_value()?;
                            ll_sum += tape.value(parts.loglik).scalar_value()?;
                            tape.neg(parts.elbo)
                        } else {
                            let bound = model.bind(&mut tape, &state.params);
                            let mut u = tape.constant_real(series[w.start].values.clone());
                            let mut loss: Option<NodeId> = None;
                            for k in w.targets() {
                                u = model.autoregressive_step(&mut tape, &bound, u, &ctx)?;
                                let l = sse_node(&mut tape, u, &series[k].values, mask)?;
                                loss = Some(match loss {
                                    None => l,
                                    Some(a) => tape.add(a, l)?,
                                });
                                acc.add(tape.value(u).real()?, &series[k].values, mask);
                            }
                            loss.unwrap()
                        }
                    }
                    _ => unreachable!("item kind matches dataset kind"),
                };
                let lv = tape.value(loss_node).scalar_value()?;
                if !lv.is_finite() {
                    return Err(Error::numerical(format!(
                        "non-finite loss {lv} at step {}",
                        state.step
                    )));
                }
                loss_sum += lv;
                let g = tape.backward(loss_node)?.for_leaves(&tape);
                for (name, ga) in g {
                    if let Some(slot) = grads.get_mut(&name) {
                        slot.zip_mut_with(&ga, |a, b| *a += b / bsz);
                    }
                }
            }

            if grads.values().any(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::numerical(format!(
                    "non-finite gradient at step {}",
                    state.step
                )));
            }
            clip_global(&mut grads, cfg.clip_norm);
            let lr = warmup_lr(cfg.lr, state.step, cfg.warmup_steps);
            adam_step(state, &grads, lr);

            let (r2, wmape) = (acc.r2(), acc.wmape());
            if let Some(r) = r2 {
                smoothed_r2 = Some(match smoothed_r2 {
                    None => r,
                    Some(s) => 0.9 * s + 0.1 * r,
                });
            }
            let row = MetricsRow {
                step: state.step,
                epoch,
                loss: loss_sum / bsz,
                r2,
                wmape,
                kl: if elbo { Some(kl_sum / bsz) } else { None },
                loglik: if elbo { Some(ll_sum / bsz) } else { None },
                lr,
            };
            on_step(&row, state)?;
            report.rows.push(row);

            if cfg.max_steps > 0 && state.step >= cfg.max_steps as u64 {
                break 'epochs;
            }
            if cfg.stop_r2 > 0.0 {
                if let Some(s) = smoothed_r2 {
                    if s >= cfg.stop_r2 && state.step >= cfg.warmup_steps as u64 {
                        report.stopped_early = true;
                        break 'epochs;
                    }
                }
            }
        }
    }
    Ok(report)
}
