//! Synthetic data generators: GP-driven Laplacian pairs on a disk, Poisson
//! pairs on rotated quarter disks, and a filtered 1D Burgers closure series
//! with an OOD companion. All generators are deterministic under the seed;
//! independent samples use derived seeds (seed + index).

use crate::error::{Error, Result};
use crate::fft::fftn;
use crate::spectral::{Field, GridSpec};
use crate::tensor::complexify;
use crate::training::PairSample;
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const GENERATOR_KINDS: &[&str] = &[
    "disk-laplacian",
    "quarter-disk-poisson",
    "burgers-closure",
    "ood-ic",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// One of `GENERATOR_KINDS`.
    pub kind: String,
    /// Points per axis of the produced (coarse) grid.
    pub n: usize,
    /// Box side length; 0 picks the kind default (2.5 for the disk and
    /// wedge boxes, 2π for the Burgers line).
    pub len: f64,
    pub count: usize,
    pub val_count: usize,
    pub seed: u64,
    /// GP squared-exponential length scale.
    pub lengthscale: f64,
    pub gp_variance: f64,
    /// Upper bound of the uniform frequency draw for the wedge cosines.
    pub freq_max: f64,
    /// Fine-grid multiplier for the wedge finite differences.
    pub fine_factor: usize,
    /// Fine grid size for the Burgers run.
    pub nf: usize,
    /// Spatial subsampling stride (time keeps full resolution).
    pub stride: usize,
    /// Box filter width b on the fine grid.
    pub filter_width: usize,
    pub nu: f64,
    pub dt: f64,
    /// Snapshots kept, including the initial condition.
    pub snapshots: usize,
    /// Band limit of the random Burgers initial condition.
    pub ic_modes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: "disk-laplacian".into(),
            n: 64,
            len: 0.0,
            count: 1000,
            val_count: 200,
            seed: 0,
            lengthscale: 0.25,
            gp_variance: 1.0,
            freq_max: 10.0,
            fine_factor: 4,
            nf: 1024,
            stride: 8,
            filter_width: 8,
            nu: 1e-3,
            dt: 1e-3,
            snapshots: 4000,
            ic_modes: 8,
        }
    }
}

impl DataConfig {
    pub fn resolved_len(&self) -> f64 {
        if self.len > 0.0 {
            return self.len;
        }
        match self.kind.as_str() {
            "burgers-closure" | "ood-ic" => 2.0 * PI,
            _ => 2.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !GENERATOR_KINDS.contains(&self.kind.as_str()) {
            return Err(Error::invalid(format!(
                "unknown generator '{}', known: {GENERATOR_KINDS:?}",
                self.kind
            )));
        }
        if self.n == 0 || self.count == 0 {
            return Err(Error::invalid("n and count must be positive"));
        }
        if !(self.lengthscale > 0.0) || !(self.gp_variance > 0.0) {
            return Err(Error::invalid("lengthscale and gp_variance must be positive"));
        }
        if matches!(self.kind.as_str(), "burgers-closure" | "ood-ic") {
            if self.stride == 0 || self.filter_width == 0 || self.nf == 0 {
                return Err(Error::invalid("nf, stride and filter_width must be positive"));
            }
            if self.nf % self.stride != 0 || self.nf % self.filter_width != 0 {
                return Err(Error::invalid(
                    "stride and filter_width must divide the fine grid size",
                ));
            }
            if self.snapshots < 2 {
                return Err(Error::invalid("need at least two snapshots"));
            }
            if !(self.dt > 0.0) || !(self.nu >= 0.0) {
                return Err(Error::invalid("dt must be positive, nu nonnegative"));
            }
        }
        Ok(())
    }
}

/// Everything one `generate` call can produce.
pub enum GenOutput {
    Pairs {
        train: Vec<PairSample>,
        val: Vec<PairSample>,
        /// Evaluation-time mask when training runs unmasked (disk).
        eval_mask: Option<ArrayD<f64>>,
    },
    Series {
        fine: Vec<Field>,
        filtered: Vec<Field>,
        coarse: Vec<Field>,
    },
    Ood(OodPair),
}

pub fn generate(cfg: &DataConfig) -> Result<GenOutput> {
    cfg.validate()?;
    match cfg.kind.as_str() {
        "disk-laplacian" => {
            let (train, val, mask) = gen_disk_pairs(cfg)?;
            Ok(GenOutput::Pairs {
                train,
                val,
                eval_mask: Some(mask),
            })
        }
        "quarter-disk-poisson" => {
            let (train, val) = gen_poisson_pairs(cfg)?;
            Ok(GenOutput::Pairs {
                train,
                val,
                eval_mask: None,
            })
        }
        "burgers-closure" => {
            let (fine, filtered, coarse) = gen_burgers_closure(cfg)?;
            Ok(GenOutput::Series {
                fine,
                filtered,
                coarse,
            })
        }
        "ood-ic" => Ok(GenOutput::Ood(gen_ood_pair(cfg)?)),
        _ => unreachable!("validated above"),
    }
}

// ---------------------------------------------------------------------------
// Gaussian process sampling

/// First row of the squared-exponential covariance on the torus: the plane
/// kernel summed over periodic images (|m| ≤ 3 per axis), which keeps it
/// positive-definite. Factorizes across axes.
pub fn se_kernel_row(grid: &GridSpec, lengthscale: f64, variance: f64) -> ArrayD<f64> {
    let d = grid.dims();
    let per_axis: Vec<Vec<f64>> = (0..d)
        .map(|axis| {
            let n = grid.n[axis];
            let l = grid.len[axis];
            let h = l / n as f64;
            (0..n)
                .map(|j| {
                    let x = j as f64 * h;
                    (-3..=3)
                        .map(|m| {
                            let dxm = x + m as f64 * l;
                            (-dxm * dxm / (2.0 * lengthscale * lengthscale)).exp()
                        })
                        .sum::<f64>()
                })
                .collect()
        })
        .collect();
    let mut row = ArrayD::from_elem(IxDyn(&grid.n), variance);
    for (idx, c) in row.indexed_iter_mut() {
        for (axis, r) in per_axis.iter().enumerate() {
            *c *= r[idx[axis]];
        }
    }
    row
}

/// Circulant eigenvalues of a stationary covariance row, jittered; an
/// eigenvalue still below zero means the row is not a valid covariance on
/// this grid.
fn covariance_eigenvalues(grid: &GridSpec, row: &ArrayD<f64>) -> Result<ArrayD<f64>> {
    let d = grid.dims();
    let total: usize = grid.n.iter().product();
    let hat = fftn(&complexify(row), d, false);
    let jitter = 1e-12 * row.iter().cloned().fold(0.0f64, f64::max).max(1e-300);
    let mut eigs = hat.mapv(|z| z.re * (total as f64).sqrt() + jitter);
    if let Some(min) = eigs.iter().cloned().reduce(f64::min) {
        if min < 0.0 {
            return Err(Error::numerical(format!(
                "GP covariance is not positive-definite on this grid (min eigenvalue {min:.3e})"
            )));
        }
    }
    eigs.mapv_inplace(|x| x.max(0.0));
    Ok(eigs)
}

/// Zero-mean GP draw with the stationary covariance given by its first row,
/// sampled by filtering white noise through the circulant square root.
pub fn sample_gp_row(grid: &GridSpec, row: &ArrayD<f64>, rng: &mut ChaCha8Rng) -> Result<Field> {
    if row.shape() != grid.n.as_slice() {
        return Err(Error::Shape {
            op: "sample_gp_row",
            lhs: row.shape().to_vec(),
            rhs: grid.n.clone(),
        });
    }
    let eigs = covariance_eigenvalues(grid, row)?;
    let d = grid.dims();
    let white = ArrayD::from_shape_fn(IxDyn(&grid.n), |_| StandardNormal.sample(rng));
    let mut hat = fftn(&complexify(&white), d, false);
    ndarray::Zip::from(&mut hat).and(&eigs).for_each(|z, &l| *z *= l.sqrt());
    let u = fftn(&hat, d, true).mapv(|z| z.re);
    let mut shape = grid.n.clone();
    shape.push(1);
    Field::new(grid.clone(), u.into_shape_clone(IxDyn(&shape)).unwrap())
}

/// GP draw with the default torus squared-exponential kernel.
pub fn sample_gp(
    grid: &GridSpec,
    lengthscale: f64,
    variance: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Field> {
    if !(lengthscale > 0.0) || !(variance > 0.0) {
        return Err(Error::invalid("lengthscale and variance must be positive"));
    }
    sample_gp_row(grid, &se_kernel_row(grid, lengthscale, variance), rng)
}

// ---------------------------------------------------------------------------
// finite differences on a periodic box (2D)

fn centered_coords(grid: &GridSpec, axis: usize) -> Vec<f64> {
    let half = grid.len[axis] / 2.0;
    grid.coords(axis).iter().map(|x| x - half).collect()
}

fn d_central(u: &Array2<f64>, axis: usize, h: f64) -> Array2<f64> {
    let (n0, n1) = u.dim();
    let mut out = Array2::zeros((n0, n1));
    for i in 0..n0 {
        for j in 0..n1 {
            let (p, m) = if axis == 0 {
                (u[((i + 1) % n0, j)], u[((i + n0 - 1) % n0, j)])
            } else {
                (u[(i, (j + 1) % n1)], u[(i, (j + n1 - 1) % n1)])
            };
            out[(i, j)] = (p - m) / (2.0 * h);
        }
    }
    out
}

fn lap5(u: &Array2<f64>, h: f64) -> Array2<f64> {
    let (n0, n1) = u.dim();
    let mut out = Array2::zeros((n0, n1));
    for i in 0..n0 {
        for j in 0..n1 {
            let s = u[((i + 1) % n0, j)]
                + u[((i + n0 - 1) % n0, j)]
                + u[(i, (j + 1) % n1)]
                + u[(i, (j + n1 - 1) % n1)]
                - 4.0 * u[(i, j)];
            out[(i, j)] = s / (h * h);
        }
    }
    out
}

fn spatial_field(grid: &GridSpec, u: Array2<f64>) -> Field {
    let (n0, n1) = u.dim();
    let values = u.into_shape_clone(IxDyn(&[n0, n1, 1])).unwrap();
    Field::new(grid.clone(), values).expect("shape by construction")
}

// ---------------------------------------------------------------------------
// disk Laplacian pairs

/// û = amplitude · (1−‖x‖²)₊ and v̂ = 5-point FD Laplacian of û², on the
/// full periodic box (û vanishes outside the disk).
pub fn disk_pair_from_amplitude(grid: &GridSpec, amplitude: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let cx = centered_coords(grid, 0);
    let cy = centered_coords(grid, 1);
    let h = grid.len[0] / grid.n[0] as f64;
    let mut u = amplitude.clone();
    for ((i, j), v) in u.indexed_iter_mut() {
        let r2 = cx[i] * cx[i] + cy[j] * cy[j];
        *v *= (1.0 - r2).max(0.0);
    }
    let v = lap5(&u.mapv(|x| x * x), h);
    (u, v)
}

/// Mask of the closed unit disk centered in the box.
pub fn disk_mask(grid: &GridSpec) -> ArrayD<f64> {
    let cx = centered_coords(grid, 0);
    let cy = centered_coords(grid, 1);
    let mut m = ArrayD::zeros(IxDyn(&grid.n));
    for (idx, v) in m.indexed_iter_mut() {
        let r2 = cx[idx[0]] * cx[idx[0]] + cy[idx[1]] * cy[idx[1]];
        if r2 <= 1.0 {
            *v = 1.0;
        }
    }
    m
}

/// (train, val, disk mask). Training pairs carry no loss mask: the targets
/// vanish outside the disk, and fitting the whole box is what pushes the
/// gating network onto the zero expert there. The returned mask restricts
/// evaluation metrics to the disk.
pub fn gen_disk_pairs(cfg: &DataConfig) -> Result<(Vec<PairSample>, Vec<PairSample>, ArrayD<f64>)> {
    let l = cfg.resolved_len();
    if l < 2.0 {
        return Err(Error::invalid("box must cover the unit disk (len >= 2)"));
    }
    let grid = GridSpec::new(&[cfg.n, cfg.n], &[l, l])?;
    let mask = disk_mask(&grid);
    let make = |index: u64| -> Result<PairSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(index));
        let gp = sample_gp(&grid, cfg.lengthscale, cfg.gp_variance, &mut rng)?;
        let amp = gp
            .values
            .index_axis(Axis(2), 0)
            .to_owned()
            .into_dimensionality()
            .expect("2d grid");
        let (u, v) = disk_pair_from_amplitude(&grid, &amp);
        Ok(PairSample {
            input: spatial_field(&grid, u),
            target: spatial_field(&grid, v),
            mask: None,
            gates: None,
        })
    };
    let mut train = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        train.push(make(i as u64)?);
    }
    let mut val = Vec::with_capacity(cfg.val_count);
    for i in 0..cfg.val_count {
        val.push(make((cfg.count + i) as u64)?);
    }
    Ok((train, val, mask))
}

// ---------------------------------------------------------------------------
// quarter-disk Poisson pairs

/// ψ(x) = (1−‖x‖²)₊ on centered coordinates.
fn psi(cx: &[f64], cy: &[f64], i: usize, j: usize) -> f64 {
    let r2 = cx[i] * cx[i] + cy[j] * cy[j];
    (1.0 - r2).max(0.0)
}

/// v̂ = ψ · Σ_m cos(f_{m,1} y₁) cos(f_{m,2} y₂) with y the coordinates
/// rotated by −angle, evaluated on the given grid.
pub fn poisson_potential(grid: &GridSpec, freqs: &[[f64; 2]], angle: f64) -> Array2<f64> {
    let cx = centered_coords(grid, 0);
    let cy = centered_coords(grid, 1);
    let (c, s) = (angle.cos(), angle.sin());
    let mut v = Array2::zeros((grid.n[0], grid.n[1]));
    for i in 0..grid.n[0] {
        for j in 0..grid.n[1] {
            // y = R(−angle) x
            let y1 = c * cx[i] + s * cy[j];
            let y2 = -s * cx[i] + c * cy[j];
            let mut sum = 0.0;
            for f in freqs {
                sum += (f[0] * y1).cos() * (f[1] * y2).cos();
            }
            v[(i, j)] = psi(&cx, &cy, i, j) * sum;
        }
    }
    v
}

/// û = ∇·tanh(∇v̂) by central differences.
pub fn poisson_source(v: &Array2<f64>, h: f64) -> Array2<f64> {
    let p0 = d_central(v, 0, h).mapv(f64::tanh);
    let p1 = d_central(v, 1, h).mapv(f64::tanh);
    &d_central(&p0, 0, h) + &d_central(&p1, 1, h)
}

/// Quarter-disk mask rotated by `angle`: ‖x‖ ≤ 1 and both rotated
/// coordinates nonnegative.
pub fn quarter_disk_mask(grid: &GridSpec, angle: f64) -> ArrayD<f64> {
    let cx = centered_coords(grid, 0);
    let cy = centered_coords(grid, 1);
    let (c, s) = (angle.cos(), angle.sin());
    let mut m = ArrayD::zeros(IxDyn(&grid.n));
    for (idx, v) in m.indexed_iter_mut() {
        let (x, y) = (cx[idx[0]], cy[idx[1]]);
        let y1 = c * x + s * y;
        let y2 = -s * x + c * y;
        if x * x + y * y <= 1.0 && y1 >= 0.0 && y2 >= 0.0 {
            *v = 1.0;
        }
    }
    m
}

fn restrict2(fine: &Array2<f64>, factor: usize) -> Array2<f64> {
    let (n0, n1) = (fine.dim().0 / factor, fine.dim().1 / factor);
    Array2::from_shape_fn((n0, n1), |(i, j)| fine[(i * factor, j * factor)])
}

/// One wedge sample on the fine grid: (û_fine, v̂_fine).
pub fn poisson_pair_fine(grid_fine: &GridSpec, freqs: &[[f64; 2]], angle: f64) -> (Array2<f64>, Array2<f64>) {
    let h = grid_fine.len[0] / grid_fine.n[0] as f64;
    let v = poisson_potential(grid_fine, freqs, angle);
    let u = poisson_source(&v, h);
    (u, v)
}

/// Rotated quarter-disk Poisson pairs: input û = ∇·tanh(∇v̂) computed by
/// finite differences on a `fine_factor`× finer grid, target v̂, per-sample
/// loss mask and gate field [wedge, complement].
pub fn gen_poisson_pairs(cfg: &DataConfig) -> Result<(Vec<PairSample>, Vec<PairSample>)> {
    let l = cfg.resolved_len();
    if l < 2.0 {
        return Err(Error::invalid("box must cover the unit disk (len >= 2)"));
    }
    if cfg.fine_factor == 0 {
        return Err(Error::invalid("fine_factor must be positive"));
    }
    let grid = GridSpec::new(&[cfg.n, cfg.n], &[l, l])?;
    let h = l / cfg.n as f64;
    if PI / h < cfg.freq_max {
        return Err(Error::invalid(format!(
            "grid cannot resolve frequency {}: Nyquist {:.2} rad per unit",
            cfg.freq_max,
            PI / h
        )));
    }
    let nf = cfg.n * cfg.fine_factor;
    let grid_fine = GridSpec::new(&[nf, nf], &[l, l])?;
    let make = |index: u64| -> Result<PairSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(index));
        let angle = rng.gen::<f64>() * 2.0 * PI;
        let mut freqs = [[0.0; 2]; 10];
        for f in &mut freqs {
            f[0] = rng.gen::<f64>() * cfg.freq_max;
            f[1] = rng.gen::<f64>() * cfg.freq_max;
        }
        let (uf, vf) = poisson_pair_fine(&grid_fine, &freqs, angle);
        let u = restrict2(&uf, cfg.fine_factor);
        let v = restrict2(&vf, cfg.fine_factor);
        let mask = quarter_disk_mask(&grid, angle);
        let mut gates = ArrayD::zeros(IxDyn(&[cfg.n, cfg.n, 2]));
        for (idx, m) in mask.indexed_iter() {
            gates[IxDyn(&[idx[0], idx[1], 0])] = *m;
            gates[IxDyn(&[idx[0], idx[1], 1])] = 1.0 - *m;
        }
        Ok(PairSample {
            input: spatial_field(&grid, u),
            target: spatial_field(&grid, v),
            mask: Some(mask),
            gates: Some(gates),
        })
    };
    let mut train = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        train.push(make(i as u64)?);
    }
    let mut val = Vec::with_capacity(cfg.val_count);
    for i in 0..cfg.val_count {
        val.push(make((cfg.count + i) as u64)?);
    }
    Ok((train, val))
}

// ---------------------------------------------------------------------------
// 1D Burgers closure series

/// Symmetric box filter of width b (trapezoidal end weights so the stencil
/// is centered); preserves the mean exactly.
pub fn box_filter(u: &Array1<f64>, b: usize) -> Result<Array1<f64>> {
    if b == 0 || b % 2 != 0 {
        return Err(Error::invalid("filter width must be positive and even"));
    }
    let n = u.len();
    if b >= n {
        return Err(Error::invalid("filter width must be smaller than the grid"));
    }
    let half = (b / 2) as isize;
    let mut out = Array1::zeros(n);
    for i in 0..n as isize {
        let mut acc = 0.0;
        for o in -half..=half {
            let w = if o == -half || o == half { 0.5 } else { 1.0 };
            let j = (i + o).rem_euclid(n as isize) as usize;
            acc += w * u[j];
        }
        out[i as usize] = acc / b as f64;
    }
    Ok(out)
}

pub fn restrict1(u: &Array1<f64>, stride: usize) -> Array1<f64> {
    Array1::from_iter(u.iter().step_by(stride).copied())
}

fn line_field(grid: &GridSpec, u: &Array1<f64>) -> Field {
    let values = u.clone().into_shape_clone(IxDyn(&[u.len(), 1])).unwrap();
    Field::new(grid.clone(), values).expect("shape by construction")
}

/// Band-limited random initial condition with unit RMS.
pub fn burgers_ic(n: usize, len: f64, modes: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let mut u = Array1::zeros(n);
    for k in 1..=modes {
        let a: f64 = StandardNormal.sample(rng);
        let phase: f64 = rng.gen::<f64>() * 2.0 * PI;
        let amp = a / k as f64;
        for (j, v) in u.iter_mut().enumerate() {
            let x = j as f64 / n as f64 * len;
            *v += amp * (2.0 * PI * k as f64 * x / len + phase).sin();
        }
    }
    let rms = (u.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        u.mapv_inplace(|x| x / rms);
    }
    u
}

/// Pseudo-spectral viscous Burgers with an integrating factor for the
/// diffusion and RK4 on the dealiased nonlinear term. Snapshots include the
/// initial condition. Blow-up beyond max|u| = 1e6 is an error.
pub fn burgers_dns(
    ic: &Array1<f64>,
    len: f64,
    nu: f64,
    dt: f64,
    snapshots: usize,
) -> Result<Vec<Array1<f64>>> {
    let n = ic.len();
    let k: Vec<f64> = (0..n)
        .map(|j| {
            let m = if j < n / 2 { j as isize } else { j as isize - n as isize };
            2.0 * PI * m as f64 / len
        })
        .collect();
    let cutoff = n as f64 / 3.0;
    let to_hat = |u: &Array1<f64>| -> Vec<Complex64> {
        let a = ArrayD::from_shape_vec(IxDyn(&[n]), u.to_vec()).unwrap();
        fftn(&complexify(&a), 1, false).into_raw_vec_and_offset().0
    };
    let to_phys = |hat: &[Complex64]| -> Array1<f64> {
        let a = ArrayD::from_shape_vec(IxDyn(&[n]), hat.to_vec()).unwrap();
        Array1::from_iter(fftn(&a, 1, true).iter().map(|z| z.re))
    };
    // nonlinear term −u·u_x in Fourier space, 2/3-rule dealiased
    let nonlin = |hat: &[Complex64]| -> Vec<Complex64> {
        let u = to_phys(hat);
        let dx: Vec<Complex64> = hat
            .iter()
            .zip(&k)
            .enumerate()
            .map(|(j, (z, &kj))| {
                // zero the unpaired Nyquist mode of the derivative
                let kj = if n % 2 == 0 && j == n / 2 { 0.0 } else { kj };
                Complex64::new(0.0, kj) * z
            })
            .collect();
        let ux = to_phys(&dx);
        let prod = Array1::from_iter(u.iter().zip(ux.iter()).map(|(a, b)| -a * b));
        let mut ph = to_hat(&prod);
        for (j, z) in ph.iter_mut().enumerate() {
            let m = if j < n / 2 { j as f64 } else { j as f64 - n as f64 };
            if m.abs() > cutoff {
                *z = Complex64::new(0.0, 0.0);
            }
        }
        ph
    };
    let e_half: Vec<f64> = k.iter().map(|&kj| (-nu * kj * kj * dt / 2.0).exp()).collect();
    let e_full: Vec<f64> = e_half.iter().map(|e| e * e).collect();

    let mut out = Vec::with_capacity(snapshots);
    out.push(ic.clone());
    let mut v = to_hat(ic);
    for _ in 1..snapshots {
        let a = nonlin(&v);
        let va: Vec<Complex64> = v
            .iter()
            .zip(&a)
            .zip(&e_half)
            .map(|((v, a), &e)| (v + a * dt / 2.0) * e)
            .collect();
        let b = nonlin(&va);
        let vb: Vec<Complex64> = v
            .iter()
            .zip(&b)
            .zip(&e_half)
            .map(|((v, b), &e)| v * e + b * dt / 2.0)
            .collect();
        let c = nonlin(&vb);
        let vc: Vec<Complex64> = v
            .iter()
            .zip(&c)
            .zip(e_full.iter().zip(&e_half))
            .map(|((v, c), (&e2, &e))| v * e2 + c * dt * e)
            .collect();
        let d = nonlin(&vc);
        v = v
            .iter()
            .zip(a.iter().zip(b.iter().zip(c.iter().zip(d.iter()))))
            .zip(e_full.iter().zip(&e_half))
            .map(|((v, (a, (b, (c, d)))), (&e2, &e))| {
                v * e2 + (a * e2 + (b + c) * 2.0 * e + d) * dt / 6.0
            })
            .collect();
        let u = to_phys(&v);
        let max = u.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if !max.is_finite() || max > 1e6 {
            return Err(Error::numerical(format!(
                "Burgers run blew up (max|u| = {max:.3e})"
            )));
        }
        out.push(u);
    }
    Ok(out)
}

/// (fine DNS, filtered fine, coarse) series. Filtering is spatial only; the
/// coarse series keeps every snapshot and subsamples space by the stride.
pub fn gen_burgers_closure(cfg: &DataConfig) -> Result<(Vec<Field>, Vec<Field>, Vec<Field>)> {
    let len = cfg.resolved_len();
    let fine_grid = GridSpec::new(&[cfg.nf], &[len])?;
    let coarse_grid = GridSpec::new(&[cfg.nf / cfg.stride], &[len])?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ic = burgers_ic(cfg.nf, len, cfg.ic_modes, &mut rng);
    let series = burgers_dns(&ic, len, cfg.nu, cfg.dt, cfg.snapshots)?;
    let mut fine = Vec::with_capacity(series.len());
    let mut filtered = Vec::with_capacity(series.len());
    let mut coarse = Vec::with_capacity(series.len());
    for u in &series {
        let f = box_filter(u, cfg.filter_width)?;
        coarse.push(line_field(&coarse_grid, &restrict1(&f, cfg.stride)));
        filtered.push(line_field(&fine_grid, &f));
        fine.push(line_field(&fine_grid, u));
    }
    Ok((fine, filtered, coarse))
}

// ---------------------------------------------------------------------------
// OOD initial conditions

pub struct OodPair {
    /// Filtered-then-subsampled coarse IC (in distribution).
    pub in_dist: Field,
    /// Unfiltered subsampled IC (out of distribution).
    pub ood: Field,
    /// Fine-grid parent of both.
    pub fine: Field,
    /// Box-filtered fine parent; restricting it gives `in_dist`.
    pub filtered_fine: Field,
}

/// Matched pair of coarse ICs from one fine draw: with and without the box
/// filter before subsampling.
pub fn gen_ood_pair(cfg: &DataConfig) -> Result<OodPair> {
    let len = cfg.resolved_len();
    let fine_grid = GridSpec::new(&[cfg.nf], &[len])?;
    let coarse_grid = GridSpec::new(&[cfg.nf / cfg.stride], &[len])?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let u = burgers_ic(cfg.nf, len, cfg.ic_modes, &mut rng);
    let f = box_filter(&u, cfg.filter_width)?;
    Ok(OodPair {
        in_dist: line_field(&coarse_grid, &restrict1(&f, cfg.stride)),
        ood: line_field(&coarse_grid, &restrict1(&u, cfg.stride)),
        fine: line_field(&fine_grid, &u),
        filtered_fine: line_field(&fine_grid, &f),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::energy_spectrum;

    #[test]
    fn gp_draws_are_seeded_and_distinct() {
        let grid = GridSpec::new(&[16], &[1.0]).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = sample_gp(&grid, 0.1, 1.0, &mut r1).unwrap();
        let b = sample_gp(&grid, 0.1, 1.0, &mut r2).unwrap();
        assert_eq!(a.values, b.values);
        let c = sample_gp(&grid, 0.1, 1.0, &mut r1).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn gp_variance_and_covariance_match_the_kernel() {
        let grid = GridSpec::new(&[8], &[1.0]).unwrap();
        let (l, var) = (0.12, 1.7);
        let row = se_kernel_row(&grid, l, var);
        let k0 = row[IxDyn(&[0])];
        let k1 = row[IxDyn(&[1])];
        let m = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut s0, mut s00, mut s01) = (0.0, 0.0, 0.0);
        let mut s1 = 0.0;
        for _ in 0..m {
            let f = sample_gp(&grid, l, var, &mut rng).unwrap();
            let a = f.values[IxDyn(&[0, 0])];
            let b = f.values[IxDyn(&[1, 0])];
            s0 += a;
            s1 += b;
            s00 += a * a;
            s01 += a * b;
        }
        let mf = m as f64;
        let v_hat = s00 / mf - (s0 / mf) * (s0 / mf);
        // sample variance of a Gaussian: stderr ≈ K(0)√(2/m)
        let tol = 4.0 * k0 * (2.0 / mf).sqrt();
        assert!((v_hat - k0).abs() < tol, "variance {v_hat} vs K(0) = {k0}");
        let c_hat = s01 / mf - (s0 / mf) * (s1 / mf);
        assert!((c_hat - k1).abs() < tol, "covariance {c_hat} vs K(h) = {k1}");
        // at this scale the torus kernel is the plane kernel
        assert!((k0 - var).abs() < 1e-10);
        let h = 1.0 / 8.0;
        assert!((k1 - var * (-h * h / (2.0 * l * l)).exp()).abs() < 1e-10);
    }

    #[test]
    fn gp_rejects_a_non_pd_covariance() {
        // row with dominant off-diagonal mass: eigenvalue 1 + 1.8cos(πk/2)
        // dips to −0.8
        let grid = GridSpec::new(&[8], &[1.0]).unwrap();
        let mut row = ArrayD::zeros(IxDyn(&[8]));
        row[IxDyn(&[0])] = 1.0;
        row[IxDyn(&[2])] = 0.9;
        row[IxDyn(&[6])] = 0.9;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_gp_row(&grid, &row, &mut rng);
        assert!(matches!(err, Err(Error::Numerical(_))), "{err:?}");
    }

    #[test]
    fn zero_amplitude_gives_zero_pair() {
        let grid = GridSpec::new(&[16, 16], &[2.5, 2.5]).unwrap();
        let amp = Array2::zeros((16, 16));
        let (u, v) = disk_pair_from_amplitude(&grid, &amp);
        assert!(u.iter().all(|x| *x == 0.0));
        assert!(v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn disk_laplacian_matches_the_polynomial_oracle() {
        // amplitude 1 → û = (1−r²)₊, û² = (1−r²)², Δ(û²) = −8 + 16r²
        // inside the disk; the 5-point stencil is O(h²) with constant
        // |u_xxxx + u_yyyy|/12 = 4
        let n = 64;
        let grid = GridSpec::new(&[n, n], &[2.5, 2.5]).unwrap();
        let h = 2.5 / n as f64;
        let amp = Array2::from_elem((n, n), 1.0);
        let (_, v) = disk_pair_from_amplitude(&grid, &amp);
        let cx = centered_coords(&grid, 0);
        let cy = centered_coords(&grid, 1);
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let r2 = cx[i] * cx[i] + cy[j] * cy[j];
                if r2 < 0.85 * 0.85 {
                    let analytic = -8.0 + 16.0 * r2;
                    worst = worst.max((v[(i, j)] - analytic).abs());
                }
            }
        }
        assert!(worst < 5.0 * h * h, "sup error {worst} at h {h}");
    }

    #[test]
    fn disk_pairs_vanish_on_the_boundary_band() {
        let cfg = DataConfig {
            count: 2,
            val_count: 1,
            n: 32,
            ..DataConfig::default()
        };
        let (train, val, mask) = gen_disk_pairs(&cfg).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(val.len(), 1);
        let grid = &train[0].input.grid;
        let cx = centered_coords(grid, 0);
        let cy = centered_coords(grid, 1);
        for s in train.iter().chain(val.iter()) {
            for i in 0..32 {
                for j in 0..32 {
                    let r2 = cx[i] * cx[i] + cy[j] * cy[j];
                    if r2 >= 1.0 {
                        assert!(s.input.values[IxDyn(&[i, j, 0])].abs() < 1e-8);
                    }
                }
            }
        }
        // mask area ≈ π (unit disk) in box units
        let h = grid.len[0] / 32.0;
        let area: f64 = mask.iter().sum::<f64>() * h * h;
        assert!((area - PI).abs() < 8.0 * h, "disk area {area}");
    }

    #[test]
    fn poisson_zero_frequencies_reduce_to_the_bump() {
        // f = 0 → every cosine is 1 → v̂ = 10ψ
        let grid = GridSpec::new(&[32, 32], &[2.5, 2.5]).unwrap();
        let freqs = [[0.0; 2]; 10];
        let v = poisson_potential(&grid, &freqs, 1.3);
        let cx = centered_coords(&grid, 0);
        let cy = centered_coords(&grid, 1);
        for i in 0..32 {
            for j in 0..32 {
                assert!((v[(i, j)] - 10.0 * psi(&cx, &cy, i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn poisson_source_matches_an_independent_stencil() {
        // independent re-implementation of ∇·tanh(∇v̂) with explicit
        // index arithmetic, compared at the generator's own resolution
        let n = 64;
        let grid = GridSpec::new(&[n, n], &[2.5, 2.5]).unwrap();
        let h = 2.5 / n as f64;
        let freqs = [[3.0, 1.0]; 10];
        let (u, v) = poisson_pair_fine(&grid, &freqs, 0.7);
        let wrap = |i: isize| -> usize { i.rem_euclid(n as isize) as usize };
        let mut worst = 0.0f64;
        for i in 0..n as isize {
            for j in 0..n as isize {
                let gx = |i: isize, j: isize| {
                    (v[(wrap(i + 1), wrap(j))] - v[(wrap(i - 1), wrap(j))]) / (2.0 * h)
                };
                let gy = |i: isize, j: isize| {
                    (v[(wrap(i), wrap(j + 1))] - v[(wrap(i), wrap(j - 1))]) / (2.0 * h)
                };
                let div = (gx(i + 1, j).tanh() - gx(i - 1, j).tanh()) / (2.0 * h)
                    + (gy(i, j + 1).tanh() - gy(i, j - 1).tanh()) / (2.0 * h);
                worst = worst.max((div - u[(wrap(i), wrap(j))]).abs());
            }
        }
        assert!(worst < 1e-4, "sup disagreement {worst}");
    }

    #[test]
    fn poisson_source_converges_to_the_analytic_limit() {
        // f = 0, no rotation: v̂ = 10ψ, ∇v̂ = −20x inside the disk, so
        // û → −20[sech²(20x₁) + sech²(20x₂)]; halving h must shrink the
        // interior error by about 4 (second order)
        let sech2 = |t: f64| {
            let c = t.cosh();
            1.0 / (c * c)
        };
        let err_at = |n: usize| -> f64 {
            let grid = GridSpec::new(&[n, n], &[2.5, 2.5]).unwrap();
            let freqs = [[0.0; 2]; 10];
            let (u, _) = poisson_pair_fine(&grid, &freqs, 0.0);
            let cx = centered_coords(&grid, 0);
            let cy = centered_coords(&grid, 1);
            let mut worst = 0.0f64;
            for i in 0..n {
                for j in 0..n {
                    let (x, y) = (cx[i], cy[j]);
                    if x * x + y * y < 0.8 * 0.8 {
                        let analytic = -20.0 * (sech2(20.0 * x) + sech2(20.0 * y));
                        worst = worst.max((u[(i, j)] - analytic).abs());
                    }
                }
            }
            worst
        };
        let e1 = err_at(128);
        let e2 = err_at(256);
        let ratio = e1 / e2;
        assert!(
            (2.5..6.0).contains(&ratio),
            "error ratio {ratio} (e1 {e1}, e2 {e2})"
        );
    }

    #[test]
    fn quarter_disk_mask_area_and_canonical_orientation() {
        let n = 128;
        let grid = GridSpec::new(&[n, n], &[2.5, 2.5]).unwrap();
        let h = 2.5 / n as f64;
        let m = quarter_disk_mask(&grid, 0.0);
        let area: f64 = m.iter().sum::<f64>() * h * h;
        assert!((area - PI / 4.0).abs() < 4.0 * h, "area {area}");
        // canonical quarter disk sits in the first quadrant
        let cx = centered_coords(&grid, 0);
        let cy = centered_coords(&grid, 1);
        for (idx, v) in m.indexed_iter() {
            if *v != 0.0 {
                assert!(cx[idx[0]] >= 0.0 && cy[idx[1]] >= 0.0);
            }
        }
        // rotation moves the mask
        let m2 = quarter_disk_mask(&grid, PI / 2.0);
        assert_ne!(m, m2);
        let area2: f64 = m2.iter().sum::<f64>() * h * h;
        assert!((area2 - PI / 4.0).abs() < 4.0 * h);
    }

    #[test]
    fn poisson_pairs_respect_nyquist_and_carry_gates() {
        let cfg = DataConfig {
            kind: "quarter-disk-poisson".into(),
            n: 4,
            count: 1,
            val_count: 0,
            ..DataConfig::default()
        };
        assert!(gen_poisson_pairs(&cfg).is_err(), "4 points cannot resolve f=10");
        let cfg = DataConfig {
            kind: "quarter-disk-poisson".into(),
            n: 16,
            fine_factor: 2,
            count: 2,
            val_count: 1,
            ..DataConfig::default()
        };
        let (train, val) = gen_poisson_pairs(&cfg).unwrap();
        assert_eq!((train.len(), val.len()), (2, 1));
        let s = &train[0];
        let g = s.gates.as_ref().unwrap();
        assert_eq!(g.shape(), &[16, 16, 2]);
        for (idx, m) in s.mask.as_ref().unwrap().indexed_iter() {
            let g0 = g[IxDyn(&[idx[0], idx[1], 0])];
            let g1 = g[IxDyn(&[idx[0], idx[1], 1])];
            assert_eq!(g0, *m);
            assert!((g0 + g1 - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn box_filter_preserves_the_mean_and_constants() {
        let n = 64;
        let u = Array1::from_shape_fn(n, |i| (i as f64 * 0.37).sin() + 0.2);
        let f = box_filter(&u, 8).unwrap();
        let mean_u = u.sum() / n as f64;
        let mean_f = f.sum() / n as f64;
        assert!((mean_u - mean_f).abs() < 1e-12);
        let c = Array1::from_elem(n, 3.25);
        let fc = box_filter(&c, 8).unwrap();
        for v in fc.iter() {
            assert!((v - 3.25).abs() < 1e-12);
        }
        assert!(box_filter(&u, 7).is_err(), "odd width");
        assert!(box_filter(&u, 0).is_err());
    }

    #[test]
    fn burgers_series_shapes_and_filtering() {
        let cfg = DataConfig {
            kind: "burgers-closure".into(),
            nf: 256,
            stride: 8,
            filter_width: 8,
            snapshots: 40,
            seed: 3,
            ..DataConfig::default()
        };
        let (fine, filtered, coarse) = gen_burgers_closure(&cfg).unwrap();
        assert_eq!(fine.len(), 40);
        assert_eq!(filtered.len(), 40, "full time resolution kept");
        assert_eq!(coarse.len(), 40);
        assert_eq!(coarse[0].grid.n, vec![32]);
        // filtering damps the high shells
        let spec_u = energy_spectrum(&fine[20]);
        let spec_f = energy_spectrum(&filtered[20]);
        let top = spec_u.len() / 2;
        let eu: f64 = spec_u[top..].iter().map(|(_, e)| e).sum();
        let ef: f64 = spec_f[top..].iter().map(|(_, e)| e).sum();
        assert!(ef <= eu + 1e-15, "filtered high-shell energy {ef} vs {eu}");
        // deterministic under seed
        let (fine2, _, _) = gen_burgers_closure(&cfg).unwrap();
        assert_eq!(fine[39].values, fine2[39].values);
    }

    #[test]
    fn burgers_instability_is_reported() {
        // inviscid with an enormous time step blows up
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ic = burgers_ic(64, 2.0 * PI, 4, &mut rng).mapv(|x| x * 100.0);
        let err = burgers_dns(&ic, 2.0 * PI, 0.0, 1.0, 50);
        assert!(matches!(err, Err(Error::Numerical(_))), "{err:?}");
    }

    #[test]
    fn ood_pair_is_consistent_with_its_fine_parents() {
        let cfg = DataConfig {
            kind: "ood-ic".into(),
            nf: 256,
            stride: 8,
            filter_width: 8,
            seed: 9,
            ..DataConfig::default()
        };
        let pair = gen_ood_pair(&cfg).unwrap();
        // the two ICs agree once the OOD parent goes through the filter
        let fine = pair.fine.channel(0).into_dimensionality::<ndarray::Ix1>().unwrap();
        let refiltered = box_filter(&fine, 8).unwrap();
        let ff = pair.filtered_fine.channel(0).into_dimensionality::<ndarray::Ix1>().unwrap();
        for (a, b) in refiltered.iter().zip(ff.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        for (i, v) in pair.in_dist.channel(0).iter().enumerate() {
            assert!((v - ff[i * 8]).abs() < 1e-15);
        }
        // spectra differ in the high shells: the unfiltered IC keeps more
        let si = energy_spectrum(&pair.in_dist);
        let so = energy_spectrum(&pair.ood);
        let top = si.len() / 2;
        let ei: f64 = si[top..].iter().map(|(_, e)| e).sum();
        let eo: f64 = so[top..].iter().map(|(_, e)| e).sum();
        assert!(eo > ei, "ood high-shell energy {eo} vs in-dist {ei}");
        // reproducible
        let pair2 = gen_ood_pair(&cfg).unwrap();
        assert_eq!(pair.ood.values, pair2.ood.values);
    }

    #[test]
    fn config_validation() {
        let bad = DataConfig {
            kind: "nope".into(),
            ..DataConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = DataConfig {
            kind: "burgers-closure".into(),
            nf: 100,
            stride: 8,
            ..DataConfig::default()
        };
        assert!(bad.validate().is_err(), "stride must divide nf");
        let cfg: DataConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.kind, "disk-laplacian");
        assert_eq!(cfg.n, 64);
        assert!(serde_json::from_str::<DataConfig>("{\"bogus\":1}").is_err());
    }
}
