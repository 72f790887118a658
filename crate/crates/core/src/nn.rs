//! Small building blocks shared by the experts and the gating network:
//! parameter initialization into a `ParamStore`, leaf binding, and pointwise
//! MLP forward passes on the tape. Weights are drawn N(0, 1/fan-in), biases
//! start at zero. Complex parameters live in the store as `.re`/`.im` real
//! pairs and are assembled on the tape.

use crate::error::{Error, Result};
use crate::tape::{NodeId, ParamStore, Tape};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Parameter name → bound node on the current tape. In deterministic
/// training these are the leaves themselves; in variational training they
/// are reparameterized samples μ + σ·ε.
pub type Bound = IndexMap<String, NodeId>;

pub fn normal_array(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

pub fn init_matrix(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
    let std = 1.0 / (fan_in as f64).sqrt();
    store.insert(name.to_string(), normal_array(&[fan_in, fan_out], std, rng));
}

pub fn init_zeros(store: &mut ParamStore, name: &str, shape: &[usize]) {
    store.insert(name.to_string(), ArrayD::zeros(IxDyn(shape)));
}

/// MLP parameters under `ns`: w0/b0 … w{L-1}/b{L-1} for dims
/// [in, h_1, …, out].
pub fn init_mlp(store: &mut ParamStore, ns: &str, dims: &[usize], rng: &mut ChaCha8Rng) {
    for i in 0..dims.len() - 1 {
        init_matrix(store, &format!("{ns}.w{i}"), dims[i], dims[i + 1], rng);
        init_zeros(store, &format!("{ns}.b{i}"), &[dims[i + 1]]);
    }
}

/// Complex parameter as two real leaves `<name>.re` / `<name>.im`.
pub fn init_complex(store: &mut ParamStore, name: &str, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) {
    store.insert(format!("{name}.re"), normal_array(shape, std, rng));
    store.insert(format!("{name}.im"), normal_array(shape, std, rng));
}

/// Bind every store entry as a leaf; the usual deterministic path.
pub fn bind_store(tape: &mut Tape, store: &ParamStore) -> Bound {
    let mut bound = Bound::new();
    for (name, value) in store {
        let id = tape.leaf(name, value.clone());
        bound.insert(name.clone(), id);
    }
    bound
}

pub fn get(bound: &Bound, name: &str) -> Result<NodeId> {
    bound
        .get(name)
        .copied()
        .ok_or_else(|| Error::invalid(format!("missing parameter '{name}'")))
}

/// Assemble the complex parameter `<name>` from its bound real pair.
pub fn bind_complex(tape: &mut Tape, bound: &Bound, name: &str) -> Result<NodeId> {
    let re = get(bound, &format!("{name}.re"))?;
    let im = get(bound, &format!("{name}.im"))?;
    tape.complex_from_pair(re, im)
}

/// Pointwise MLP with `depth` linear maps and tanh between them, applied at
/// every grid point of [..., c_in].
pub fn mlp_forward(
    tape: &mut Tape,
    bound: &Bound,
    ns: &str,
    input: NodeId,
    depth: usize,
) -> Result<NodeId> {
    let mut x = input;
    for i in 0..depth {
        let w = get(bound, &format!("{ns}.w{i}"))?;
        let b = get(bound, &format!("{ns}.b{i}"))?;
        x = tape.matmul(x, w)?;
        x = tape.add_bias(x, b)?;
        if i + 1 < depth {
            x = tape.tanh(x)?;
        }
    }
    Ok(x)
}

/// Random uniform in [lo, hi) — convenience for tests and generators.
pub fn uniform_array(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(lo..hi))
}
