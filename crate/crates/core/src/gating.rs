//! Gate fields that blend the experts. Gates are functions of position only:
//! periodic coordinates are embedded as [sin θ_1 … sin θ_d, cos θ_1 … cos θ_d]
//! with θ_i = 2π x_i / L_i, a small MLP maps the embedding to one logit per
//! expert, and a pointwise softmax makes the weights a partition of unity.
//! Fixed and per-sample gate fields are supported for problems where the
//! decomposition is known.

use crate::error::{Error, Result};
use crate::nn::{self, Bound};
use crate::spectral::GridSpec;
use crate::tape::{NodeId, ParamStore, Tape};
use ndarray::{ArrayD, Axis, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const GATE_KINDS: &[&str] = &["softmax", "fixed", "per-sample"];

/// A point belongs to the partition when the gate weights sum to one within
/// this slack.
pub const PARTITION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatingConfig {
    /// One of `GATE_KINDS`.
    pub kind: String,
    /// Width of the gate MLP.
    pub hidden: usize,
    /// Hidden tanh layers in the gate MLP.
    pub depth: usize,
}

impl Default for GatingConfig {
    fn default() -> Self {
        GatingConfig {
            kind: "softmax".into(),
            hidden: 64,
            depth: 2,
        }
    }
}

/// Per-evaluation context. `sample_gates` carries a gate field of shape
/// [n_1, …, n_d, experts] for the "per-sample" kind; the other kinds ignore
/// it.
#[derive(Default, Clone, Copy)]
pub struct EvalCtx<'a> {
    pub sample_gates: Option<&'a ArrayD<f64>>,
}

pub trait Gate {
    fn kind(&self) -> &'static str;
    fn expert_count(&self) -> usize;
    fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng);
    /// Gate weights on the tape, shape [n_1, …, n_d, experts].
    fn weights(&self, tape: &mut Tape, bound: &Bound, ctx: &EvalCtx) -> Result<NodeId>;
}

pub fn build_gate(cfg: &GatingConfig, grid: &GridSpec, experts: usize) -> Result<Box<dyn Gate>> {
    if experts == 0 {
        return Err(Error::invalid("gate needs at least one expert"));
    }
    match cfg.kind.as_str() {
        "softmax" => Ok(Box::new(SoftmaxGate {
            embedding: embed_coords(grid),
            hidden: cfg.hidden,
            depth: cfg.depth,
            experts,
            d: grid.dims(),
        })),
        "per-sample" => Ok(Box::new(PerSampleGate { experts })),
        "fixed" => Err(Error::invalid(
            "fixed gates are built from mask fields via fixed_gates",
        )),
        other => Err(Error::invalid(format!(
            "unknown gate kind '{other}', known kinds: {GATE_KINDS:?}"
        ))),
    }
}

/// Periodic coordinate features, shape [n_1, …, n_d, 2d].
pub fn embed_coords(grid: &GridSpec) -> ArrayD<f64> {
    let d = grid.dims();
    let mut shape = grid.n.clone();
    shape.push(2 * d);
    let theta: Vec<Vec<f64>> = (0..d)
        .map(|ax| {
            grid.coords(ax)
                .iter()
                .map(|x| 2.0 * std::f64::consts::PI * x / grid.len[ax])
                .collect()
        })
        .collect();
    ArrayD::from_shape_fn(IxDyn(&shape), |idx| {
        let f = idx[d];
        if f < d {
            theta[f][idx[f]].sin()
        } else {
            theta[f - d][idx[f - d]].cos()
        }
    })
}

pub struct SoftmaxGate {
    embedding: ArrayD<f64>,
    hidden: usize,
    depth: usize,
    experts: usize,
    d: usize,
}

impl Gate for SoftmaxGate {
    fn kind(&self) -> &'static str {
        "softmax"
    }

    fn expert_count(&self) -> usize {
        self.experts
    }

    fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let mut dims = vec![2 * self.d];
        dims.extend(std::iter::repeat(self.hidden).take(self.depth));
        dims.push(self.experts);
        nn::init_mlp(store, "gate", &dims, rng);
    }

    fn weights(&self, tape: &mut Tape, bound: &Bound, _ctx: &EvalCtx) -> Result<NodeId> {
        let emb = tape.constant_real(self.embedding.clone());
        let logits = nn::mlp_forward(tape, bound, "gate", emb, self.depth + 1)?;
        tape.softmax_last(logits)
    }
}

fn check_partition(stacked: &ArrayD<f64>) -> Result<()> {
    let last = stacked.ndim() - 1;
    for lane in stacked.lanes(Axis(last)) {
        let s: f64 = lane.iter().sum();
        if (s - 1.0).abs() > PARTITION_TOL {
            return Err(Error::invalid(format!(
                "gate weights must sum to 1 at every point, found {s}"
            )));
        }
    }
    Ok(())
}

/// Position-dependent but not learned: a stack of mask fields that already
/// forms a partition of unity.
pub struct FixedGate {
    weights: ArrayD<f64>,
}

/// Build a fixed gate from per-expert mask fields of shape [n_1, …, n_d].
/// The masks must sum to one at every point, within `PARTITION_TOL`.
pub fn fixed_gates(masks: &[ArrayD<f64>]) -> Result<FixedGate> {
    if masks.is_empty() {
        return Err(Error::invalid("fixed_gates needs at least one mask"));
    }
    let shape = masks[0].shape().to_vec();
    if masks.iter().any(|m| m.shape() != shape) {
        return Err(Error::invalid("fixed_gates: inconsistent mask shapes"));
    }
    let mut out_shape = shape.clone();
    out_shape.push(masks.len());
    let mut stacked = ArrayD::zeros(IxDyn(&out_shape));
    let last = stacked.ndim() - 1;
    for (i, m) in masks.iter().enumerate() {
        stacked.index_axis_mut(Axis(last), i).assign(m);
    }
    check_partition(&stacked)?;
    Ok(FixedGate { weights: stacked })
}

impl Gate for FixedGate {
    fn kind(&self) -> &'static str {
        "fixed"
    }

    fn expert_count(&self) -> usize {
        *self.weights.shape().last().unwrap()
    }

    fn init_params(&self, _store: &mut ParamStore, _rng: &mut ChaCha8Rng) {}

    fn weights(&self, tape: &mut Tape, _bound: &Bound, _ctx: &EvalCtx) -> Result<NodeId> {
        Ok(tape.constant_real(self.weights.clone()))
    }
}

/// Reads the gate field from the evaluation context; used when each sample
/// carries its own decomposition.
pub struct PerSampleGate {
    experts: usize,
}

impl Gate for PerSampleGate {
    fn kind(&self) -> &'static str {
        "per-sample"
    }

    fn expert_count(&self) -> usize {
        self.experts
    }

    fn init_params(&self, _store: &mut ParamStore, _rng: &mut ChaCha8Rng) {}

    fn weights(&self, tape: &mut Tape, _bound: &Bound, ctx: &EvalCtx) -> Result<NodeId> {
        let g = ctx
            .sample_gates
            .ok_or_else(|| Error::invalid("per-sample gate: no gate field in context"))?;
        if *g.shape().last().unwrap() != self.experts {
            return Err(Error::Shape {
                op: "per-sample gate",
                lhs: g.shape().to_vec(),
                rhs: vec![self.experts],
            });
        }
        check_partition(g)?;
        Ok(tape.constant_real(g.clone()))
    }
}
