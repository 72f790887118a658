//! Expert networks for the mixture operator. The main one stacks Fourier
//! mode-reduction layers:
//!
//!   v ↦ skip(v) + F⁻¹( g · gather(F(h(v))) )
//!
//! with h a pointwise MLP, the transform restricted to a retained set of
//! low half-spectrum modes, and g a per-mode complex matrix — either a free
//! tensor or the output of a small MLP over the mode's wavenumber vector.
//! A zero expert and an exact identity expert round out the registry.

use crate::error::{Error, Result};
use crate::nn::{self, Bound};
use crate::spectral::{retained_half_modes, GridSpec};
use crate::tape::{NodeId, ParamStore, Tape};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

pub const EXPERT_KINDS: &[&str] = &["mor", "zero", "identity"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertConfig {
    /// One of `EXPERT_KINDS`.
    pub kind: String,
    /// Number of mode-reduction layers.
    pub layers: usize,
    /// Channel count between layers.
    pub latent: usize,
    /// Width of the pointwise h-net.
    pub hidden: usize,
    /// Hidden tanh layers in the h-net; 0 leaves a single linear map.
    pub h_depth: usize,
    /// Per-axis mode cutoff; empty means n_i/4.
    pub modes: Vec<usize>,
    /// Parameterize g by an MLP over κ instead of a free tensor.
    pub g_mlp: bool,
    pub g_hidden: usize,
    /// Keep the skip connection on the final layer.
    pub final_skip: bool,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            kind: "mor".into(),
            layers: 1,
            latent: 8,
            hidden: 32,
            h_depth: 2,
            modes: Vec::new(),
            g_mlp: false,
            g_hidden: 16,
            final_skip: true,
        }
    }
}

impl ExpertConfig {
    pub fn zero() -> Self {
        ExpertConfig {
            kind: "zero".into(),
            ..ExpertConfig::default()
        }
    }
}

pub trait Expert {
    fn kind(&self) -> &'static str;
    fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng);
    fn forward(&self, tape: &mut Tape, bound: &Bound, input: NodeId) -> Result<NodeId>;
}

pub fn build_expert(
    cfg: &ExpertConfig,
    ns: &str,
    grid: &GridSpec,
    in_channels: usize,
    out_channels: usize,
) -> Result<Box<dyn Expert>> {
    match cfg.kind.as_str() {
        "mor" => Ok(Box::new(MorExpert::build(cfg, ns, grid, in_channels, out_channels)?)),
        "zero" => Ok(Box::new(ZeroExpert { out_channels })),
        "identity" => {
            if in_channels != out_channels {
                return Err(Error::invalid(format!(
                    "identity expert needs matching channels, got {in_channels} -> {out_channels}"
                )));
            }
            Ok(Box::new(IdentityExpert))
        }
        other => Err(Error::invalid(format!(
            "unknown expert kind '{other}', known kinds: {EXPERT_KINDS:?}"
        ))),
    }
}

/// Emits zeros with the expert's output channel count.
pub struct ZeroExpert {
    out_channels: usize,
}

impl Expert for ZeroExpert {
    fn kind(&self) -> &'static str {
        "zero"
    }

    fn init_params(&self, _store: &mut ParamStore, _rng: &mut ChaCha8Rng) {}

    fn forward(&self, tape: &mut Tape, _bound: &Bound, input: NodeId) -> Result<NodeId> {
        let mut shape = tape.value(input).shape().to_vec();
        *shape.last_mut().unwrap() = self.out_channels;
        Ok(tape.constant_real(ArrayD::zeros(IxDyn(&shape))))
    }
}

/// Passes the input node through untouched, bit for bit.
pub struct IdentityExpert;

impl Expert for IdentityExpert {
    fn kind(&self) -> &'static str {
        "identity"
    }

    fn init_params(&self, _store: &mut ParamStore, _rng: &mut ChaCha8Rng) {}

    fn forward(&self, _tape: &mut Tape, _bound: &Bound, input: NodeId) -> Result<NodeId> {
        Ok(input)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Skip {
    Identity,
    Learned,
    None,
}

#[derive(Debug)]
struct LayerPlan {
    m_in: usize,
    m_out: usize,
    skip: Skip,
}

pub struct MorExpert {
    ns: String,
    d: usize,
    n_last: usize,
    s_half: usize,
    half_shape: Vec<usize>,
    indices: Arc<Vec<usize>>,
    /// κ vectors of the retained modes, scaled per axis to [-1, 1]; input to
    /// the g-MLP when it is enabled.
    kappa_norm: ArrayD<f64>,
    layers: Vec<LayerPlan>,
    hidden: usize,
    h_depth: usize,
    g_mlp: bool,
    g_hidden: usize,
}

impl MorExpert {
    pub fn build(
        cfg: &ExpertConfig,
        ns: &str,
        grid: &GridSpec,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(Error::invalid("mor expert needs at least one layer"));
        }
        let d = grid.dims();
        let keep: Vec<usize> = if cfg.modes.is_empty() {
            grid.n.iter().map(|&n| (n / 4).max(1)).collect()
        } else if cfg.modes.len() == d {
            cfg.modes.clone()
        } else {
            return Err(Error::invalid(format!(
                "modes must list {d} cutoffs, got {:?}",
                cfg.modes
            )));
        };
        let (indices, kappa) = retained_half_modes(grid, &keep)?;
        let mut kappa_norm = kappa.clone();
        for ax in 0..d {
            let m = kappa.column(ax).iter().fold(0.0f64, |a, k| a.max(k.abs()));
            if m > 0.0 {
                kappa_norm.column_mut(ax).mapv_inplace(|k| k / m);
            }
        }

        let mut widths = vec![in_channels];
        widths.extend(std::iter::repeat(cfg.latent).take(cfg.layers - 1));
        widths.push(out_channels);
        let layers: Vec<LayerPlan> = (0..cfg.layers)
            .map(|l| {
                let (m_in, m_out) = (widths[l], widths[l + 1]);
                let last = l + 1 == cfg.layers;
                let skip = if last && !cfg.final_skip {
                    Skip::None
                } else if m_in == m_out {
                    Skip::Identity
                } else {
                    Skip::Learned
                };
                LayerPlan { m_in, m_out, skip }
            })
            .collect();

        let half_shape = grid.half_shape();
        Ok(MorExpert {
            ns: ns.to_string(),
            d,
            n_last: *grid.n.last().unwrap(),
            s_half: half_shape.iter().product(),
            half_shape,
            indices,
            kappa_norm: kappa_norm.into_dyn(),
            layers,
            hidden: cfg.hidden,
            h_depth: cfg.h_depth,
            g_mlp: cfg.g_mlp,
            g_hidden: cfg.g_hidden,
        })
    }

    pub fn retained(&self) -> usize {
        self.indices.len()
    }

    fn h_dims(&self, plan: &LayerPlan) -> Vec<usize> {
        let mut dims = vec![plan.m_in];
        dims.extend(std::iter::repeat(self.hidden).take(self.h_depth));
        dims.push(plan.m_out);
        dims
    }

    fn layer_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        l: usize,
        x: NodeId,
    ) -> Result<NodeId> {
        let plan = &self.layers[l];
        let lns = format!("{}.layer{l}", self.ns);
        let m = self.retained();

        let h = nn::mlp_forward(tape, bound, &format!("{lns}.h"), x, self.h_depth + 1)?;
        let hc = tape.rfft(h, self.d)?;
        let flat = tape.reshape(hc, &[self.s_half, plan.m_out])?;
        let gathered = tape.row_gather(flat, self.indices.clone())?;

        let g = if self.g_mlp {
            let sq = plan.m_out * plan.m_out;
            let kap = tape.constant_real(self.kappa_norm.clone());
            let z = nn::mlp_forward(tape, bound, &format!("{lns}.g"), kap, 3)?;
            let re = tape.slice_last(z, 0, sq)?;
            let im = tape.slice_last(z, sq, sq)?;
            let re = tape.reshape(re, &[m, plan.m_out, plan.m_out])?;
            let im = tape.reshape(im, &[m, plan.m_out, plan.m_out])?;
            tape.complex_from_pair(re, im)?
        } else {
            nn::bind_complex(tape, bound, &format!("{lns}.g"))?
        };

        let prod = tape.mode_matmul(g, gathered)?;
        let scattered = tape.row_scatter(prod, self.indices.clone(), self.s_half)?;
        let mut full_shape = self.half_shape.clone();
        full_shape.push(plan.m_out);
        let full = tape.reshape(scattered, &full_shape)?;
        let out = tape.irfft(full, self.d, self.n_last)?;

        match plan.skip {
            Skip::None => Ok(out),
            Skip::Identity => tape.add(out, x),
            Skip::Learned => {
                let w = nn::get(bound, &format!("{lns}.skip.w"))?;
                let sx = tape.matmul(x, w)?;
                tape.add(out, sx)
            }
        }
    }
}

impl Expert for MorExpert {
    fn kind(&self) -> &'static str {
        "mor"
    }

    fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let m = self.retained();
        for (l, plan) in self.layers.iter().enumerate() {
            let lns = format!("{}.layer{l}", self.ns);
            nn::init_mlp(store, &format!("{lns}.h"), &self.h_dims(plan), rng);
            if self.g_mlp {
                let dims = [
                    self.d,
                    self.g_hidden,
                    self.g_hidden,
                    2 * plan.m_out * plan.m_out,
                ];
                nn::init_mlp(store, &format!("{lns}.g"), &dims, rng);
            } else {
                let std = 1.0 / (m as f64).sqrt();
                nn::init_complex(
                    store,
                    &format!("{lns}.g"),
                    &[m, plan.m_out, plan.m_out],
                    std,
                    rng,
                );
            }
            if plan.skip == Skip::Learned {
                nn::init_matrix(store, &format!("{lns}.skip.w"), plan.m_in, plan.m_out, rng);
            }
        }
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, input: NodeId) -> Result<NodeId> {
        let mut x = input;
        for l in 0..self.layers.len() {
            x = self.layer_forward(tape, bound, l, x)?;
        }
        Ok(x)
    }
}
