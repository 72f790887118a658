//! The mixture operator: gate-weighted sum of expert outputs, optionally
//! composed with a known explicit solver step for autoregressive prediction.
//! Deterministic prediction maps a field to a field; probabilistic
//! prediction carries a per-point variance channel alongside the mean, with
//! σ² = softplus(ρ)² read off the second half of the output channels.

use crate::error::{Error, Result};
use crate::experts::{build_expert, Expert, ExpertConfig};
use crate::gating::{build_gate, EvalCtx, FixedGate, Gate, GatingConfig};
use crate::nn::{self, Bound};
use crate::spectral::{burgers_step_tape, chorin_step_tape, Field, GridSpec};
use crate::tape::{NodeId, ParamStore, Tape};
use ndarray::{ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const SOLVER_KINDS: &[&str] = &["burgers1d", "chorin2d"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// One of `SOLVER_KINDS`.
    pub kind: String,
    pub nu: f64,
    pub dt: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            kind: "burgers1d".into(),
            nu: 1e-3,
            dt: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Double the channels to carry (μ, ρ) pairs.
    pub probabilistic: bool,
    pub experts: Vec<ExpertConfig>,
    pub gating: GatingConfig,
    /// Known physics step composed before the mixture; None means the
    /// mixture acts on the state directly.
    pub solver: Option<SolverConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            out_channels: 1,
            probabilistic: false,
            experts: vec![ExpertConfig::default(), ExpertConfig::zero()],
            gating: GatingConfig::default(),
            solver: None,
        }
    }
}

pub struct PouModel {
    pub config: ModelConfig,
    pub grid: GridSpec,
    pub experts: Vec<Box<dyn Expert>>,
    pub gate: Box<dyn Gate>,
}

impl PouModel {
    pub fn build(config: ModelConfig, grid: GridSpec) -> Result<Self> {
        let experts = Self::build_experts(&config, &grid)?;
        let gate = build_gate(&config.gating, &grid, experts.len())?;
        let model = PouModel {
            config,
            grid,
            experts,
            gate,
        };
        model.validate_solver()?;
        Ok(model)
    }

    /// Same, but with the gate pinned to the given partition masks.
    pub fn build_with_fixed_gate(config: ModelConfig, grid: GridSpec, gate: FixedGate) -> Result<Self> {
        let experts = Self::build_experts(&config, &grid)?;
        if gate.expert_count() != experts.len() {
            return Err(Error::invalid(format!(
                "fixed gate has {} fields for {} experts",
                gate.expert_count(),
                experts.len()
            )));
        }
        let model = PouModel {
            config,
            grid,
            experts,
            gate: Box::new(gate),
        };
        model.validate_solver()?;
        Ok(model)
    }

    fn build_experts(config: &ModelConfig, grid: &GridSpec) -> Result<Vec<Box<dyn Expert>>> {
        if config.in_channels == 0 || config.out_channels == 0 {
            return Err(Error::invalid("model needs at least one channel"));
        }
        if config.experts.is_empty() {
            return Err(Error::invalid("model needs at least one expert"));
        }
        let (cin, cout) = (in_total(config), out_total(config));
        config
            .experts
            .iter()
            .enumerate()
            .map(|(i, cfg)| build_expert(cfg, &format!("expert{i}"), grid, cin, cout))
            .collect()
    }

    fn validate_solver(&self) -> Result<()> {
        let Some(s) = &self.config.solver else {
            return Ok(());
        };
        let want_d = match s.kind.as_str() {
            "burgers1d" => 1,
            "chorin2d" => 2,
            other => {
                return Err(Error::invalid(format!(
                    "unknown solver kind '{other}', known kinds: {SOLVER_KINDS:?}"
                )))
            }
        };
        if self.grid.dims() != want_d {
            return Err(Error::invalid(format!(
                "solver '{}' needs a {want_d}-dimensional grid, got {}",
                s.kind,
                self.grid.dims()
            )));
        }
        Ok(())
    }

    pub fn in_total(&self) -> usize {
        in_total(&self.config)
    }

    pub fn out_total(&self) -> usize {
        out_total(&self.config)
    }

    /// Fresh parameters for every expert, then the gate, in registry order.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in &self.experts {
            e.init_params(&mut store, &mut rng);
        }
        self.gate.init_params(&mut store, &mut rng);
        store
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Bound {
        nn::bind_store(tape, store)
    }

    /// Gate-weighted mixture of expert outputs. Experts whose gate field is
    /// identically zero are not evaluated; a single expert under an
    /// identically-one gate is returned as-is, without arithmetic on top.
    pub fn apply_pou(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        input: NodeId,
        ctx: &EvalCtx,
    ) -> Result<NodeId> {
        let gates = self.gate.weights(tape, bound, ctx)?;
        let gv = tape.value(gates).real()?.clone();
        let last = gv.ndim() - 1;
        if gv.shape()[last] != self.experts.len() {
            return Err(Error::Shape {
                op: "apply_pou",
                lhs: gv.shape().to_vec(),
                rhs: vec![self.experts.len()],
            });
        }
        let mut active = Vec::new();
        for i in 0..self.experts.len() {
            let col = gv.index_axis(Axis(last), i);
            if col.iter().any(|&g| g != 0.0) {
                active.push((i, col.iter().all(|&g| g == 1.0)));
            }
        }
        if let [(i, true)] = active[..] {
            return self.experts[i].forward(tape, bound, input);
        }
        let spatial = gv.shape()[..last].to_vec();
        let mut acc = None;
        for &(i, _) in &active {
            let out = self.experts[i].forward(tape, bound, input)?;
            let col = tape.slice_last(gates, i, 1)?;
            let col = tape.reshape(col, &spatial)?;
            let term = tape.row_scale(out, col)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        match acc {
            Some(a) => Ok(a),
            None => {
                let mut shape = tape.value(input).shape().to_vec();
                *shape.last_mut().unwrap() = self.out_total();
                Ok(tape.constant_real(ArrayD::zeros(IxDyn(&shape))))
            }
        }
    }

    /// Mixture output split into (mean, variance); the second half of the
    /// channels parameterizes σ = softplus(ρ).
    pub fn predict_probabilistic(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        input: NodeId,
        ctx: &EvalCtx,
    ) -> Result<(NodeId, NodeId)> {
        if !self.config.probabilistic {
            return Err(Error::invalid("model is not probabilistic"));
        }
        let c = self.config.out_channels;
        let out = self.apply_pou(tape, bound, input, ctx)?;
        let mu = tape.slice_last(out, 0, c)?;
        let rho = tape.slice_last(out, c, c)?;
        let sigma = tape.softplus(rho)?;
        let var = tape.square(sigma)?;
        Ok((mu, var))
    }

    /// One explicit step of the declared known physics, recorded on the
    /// tape; the identity when no solver is configured. States with
    /// max |u| > 1e6 are rejected as diverged.
    pub fn known_solver_step(&self, tape: &mut Tape, u: NodeId) -> Result<NodeId> {
        let Some(s) = &self.config.solver else {
            return Ok(u);
        };
        let v = tape.value(u).real()?;
        let mut amax = 0.0f64;
        for &x in v.iter() {
            if !x.is_finite() {
                return Err(Error::numerical("solver step: non-finite state"));
            }
            amax = amax.max(x.abs());
        }
        if amax > 1e6 {
            return Err(Error::numerical(format!(
                "solver step: state magnitude {amax:.3e} exceeds 1e6"
            )));
        }
        match s.kind.as_str() {
            "burgers1d" => burgers_step_tape(tape, u, &self.grid, s.nu, s.dt),
            "chorin2d" => chorin_step_tape(tape, u, &self.grid, s.nu, s.dt),
            other => Err(Error::invalid(format!("unknown solver kind '{other}'"))),
        }
    }

    /// u_{n+1} = P(S(u_n)).
    pub fn autoregressive_step(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        u: NodeId,
        ctx: &EvalCtx,
    ) -> Result<NodeId> {
        let half = self.known_solver_step(tape, u)?;
        self.apply_pou(tape, bound, half, ctx)
    }

    /// Probabilistic step: the solver advances the mean only, the mixture
    /// sees [S(μ), σ²] and emits the next (μ, σ²).
    pub fn autoregressive_step_prob(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        mu: NodeId,
        var: NodeId,
        ctx: &EvalCtx,
    ) -> Result<(NodeId, NodeId)> {
        let half = self.known_solver_step(tape, mu)?;
        let joint = tape.concat_last(&[half, var])?;
        self.predict_probabilistic(tape, bound, joint, ctx)
    }

    /// One-shot deterministic prediction on a plain field.
    pub fn predict(&self, store: &ParamStore, input: &Field, ctx: &EvalCtx) -> Result<Field> {
        self.check_state(input, self.in_total())?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, store);
        let u = tape.constant_real(input.values.clone());
        let out = self.apply_pou(&mut tape, &bound, u, ctx)?;
        Field::new(self.grid.clone(), tape.value(out).real()?.clone())
    }

    /// Gate weights as a field, for inspection dumps.
    pub fn gate_field(&self, store: &ParamStore, ctx: &EvalCtx) -> Result<Field> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, store);
        let w = self.gate.weights(&mut tape, &bound, ctx)?;
        Field::new(self.grid.clone(), tape.value(w).real()?.clone())
    }

    fn check_state(&self, u: &Field, channels: usize) -> Result<()> {
        if u.grid != self.grid {
            return Err(Error::invalid("state grid does not match the model grid"));
        }
        if u.channels() != channels {
            return Err(Error::Shape {
                op: "state channels",
                lhs: vec![u.channels()],
                rhs: vec![channels],
            });
        }
        Ok(())
    }

    /// Autoregressive trajectory of `steps` steps; returns steps+1 states
    /// including the initial one. Each step runs on a fresh tape, so memory
    /// stays bounded on long horizons.
    pub fn rollout(&self, store: &ParamStore, u0: &Field, steps: usize, ctx: &EvalCtx) -> Result<Vec<Field>> {
        if self.in_total() != self.out_total() {
            return Err(Error::invalid("rollout needs matching input/output channels"));
        }
        self.check_state(u0, self.in_total())?;
        let mut states = Vec::with_capacity(steps + 1);
        states.push(u0.clone());
        for _ in 0..steps {
            let prev = states.last().unwrap();
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, store);
            let u = tape.constant_real(prev.values.clone());
            let next = self.autoregressive_step(&mut tape, &bound, u, ctx)?;
            let v = tape.value(next).real()?.clone();
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::numerical("rollout: non-finite state"));
            }
            states.push(Field::new(self.grid.clone(), v)?);
        }
        Ok(states)
    }

    /// Probabilistic trajectory from (μ₀, σ²=0); returns steps+1 pairs.
    pub fn rollout_prob(
        &self,
        store: &ParamStore,
        mu0: &Field,
        steps: usize,
        ctx: &EvalCtx,
    ) -> Result<Vec<(Field, Field)>> {
        self.check_state(mu0, self.config.in_channels)?;
        let var0 = Field::zeros(self.grid.clone(), self.config.in_channels);
        let mut states = vec![(mu0.clone(), var0)];
        for _ in 0..steps {
            let (pm, pv) = states.last().unwrap();
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, store);
            let mu = tape.constant_real(pm.values.clone());
            let var = tape.constant_real(pv.values.clone());
            let (nm, nv) = self.autoregressive_step_prob(&mut tape, &bound, mu, var, ctx)?;
            let mv = tape.value(nm).real()?.clone();
            let vv = tape.value(nv).real()?.clone();
            if !mv.iter().all(|x| x.is_finite()) || !vv.iter().all(|x| x.is_finite()) {
                return Err(Error::numerical("rollout: non-finite state"));
            }
            states.push((
                Field::new(self.grid.clone(), mv)?,
                Field::new(self.grid.clone(), vv)?,
            ));
        }
        Ok(states)
    }
}

fn in_total(c: &ModelConfig) -> usize {
    c.in_channels * if c.probabilistic { 2 } else { 1 }
}

fn out_total(c: &ModelConfig) -> usize {
    c.out_channels * if c.probabilistic { 2 } else { 1 }
}

/// Training window over a snapshot series: predictions start from `start`
/// and are scored against the next `horizon` snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub horizon: usize,
}

impl Window {
    pub fn targets(&self) -> impl Iterator<Item = usize> {
        (self.start + 1)..=(self.start + self.horizon)
    }
}

/// Non-overlapping windows with stride equal to the horizon. Trailing
/// snapshots that do not fill a whole window are dropped.
pub fn make_windows(series_len: usize, horizon: usize) -> Result<Vec<Window>> {
    if horizon == 0 {
        return Err(Error::invalid("window horizon must be positive"));
    }
    if series_len < horizon + 1 {
        return Err(Error::invalid(format!(
            "series of length {series_len} cannot fit a window of horizon {horizon}"
        )));
    }
    let mut out = Vec::new();
    let mut m = 0;
    while m + horizon < series_len {
        out.push(Window { start: m, horizon });
        m += horizon;
    }
    Ok(out)
}
