//! Torus grids, wavenumber bookkeeping, mode truncation, spectral
//! differential operators, the pseudo-spectral Chorin–Euler update, and
//! spectral diagnostics.
//!
//! First-derivative operators use Nyquist-zeroed wavenumbers (the odd-order
//! derivative of the Nyquist mode is not representable on the grid), so
//! divergence∘gradient equals the Laplacian exactly; the viscous term in the
//! solvers uses the full |κ|² so the Nyquist mode is still damped.

use crate::error::{Error, Result};
use crate::fft;
use crate::tape::{NodeId, Tape};
use crate::tensor::complexify;
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;

/// Periodic grid: d axes (1..=3), points per axis, physical periods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: Vec<usize>,
    pub len: Vec<f64>,
}

impl GridSpec {
    pub fn new(n: &[usize], len: &[f64]) -> Result<Self> {
        if n.is_empty() || n.len() > 3 || n.len() != len.len() {
            return Err(Error::invalid(format!(
                "grid must have 1..=3 axes with matching periods, got n={n:?} len={len:?}"
            )));
        }
        if n.iter().any(|&ni| ni < 4 || ni % 2 != 0) {
            return Err(Error::invalid(format!(
                "points per axis must be even and >= 4, got {n:?}"
            )));
        }
        if len.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::invalid(format!("periods must be positive, got {len:?}")));
        }
        Ok(GridSpec {
            n: n.to_vec(),
            len: len.to_vec(),
        })
    }

    pub fn dims(&self) -> usize {
        self.n.len()
    }

    pub fn points(&self) -> usize {
        self.n.iter().product()
    }

    /// Grid coordinates along one axis: x_j = j L / n.
    pub fn coords(&self, axis: usize) -> Vec<f64> {
        let n = self.n[axis];
        let h = self.len[axis] / n as f64;
        (0..n).map(|j| j as f64 * h).collect()
    }

    /// FFT-ordered wavenumbers along one axis: integer multiples of 2π/L
    /// with κ=0 at index 0 and the (negative) Nyquist at n/2.
    pub fn wavenumbers(&self, axis: usize) -> Vec<f64> {
        let n = self.n[axis] as i64;
        let fund = 2.0 * PI / self.len[axis];
        (0..n)
            .map(|j| {
                let s = if j < n / 2 { j } else { j - n };
                s as f64 * fund
            })
            .collect()
    }

    /// Wavenumbers for first-derivative operators: Nyquist set to zero.
    pub fn derivative_wavenumbers(&self, axis: usize) -> Vec<f64> {
        let n = self.n[axis];
        let mut k = self.wavenumbers(axis);
        k[n / 2] = 0.0;
        k
    }

    /// κ along `axis` broadcast over the full spatial grid.
    pub fn kappa_field(&self, axis: usize, deriv: bool) -> ArrayD<f64> {
        let k = if deriv {
            self.derivative_wavenumbers(axis)
        } else {
            self.wavenumbers(axis)
        };
        ArrayD::from_shape_fn(IxDyn(&self.n), |idx| k[idx[axis]])
    }

    /// |κ|² over the full spatial grid.
    pub fn ksq_field(&self, deriv: bool) -> ArrayD<f64> {
        let per_axis: Vec<Vec<f64>> = (0..self.dims())
            .map(|ax| {
                if deriv {
                    self.derivative_wavenumbers(ax)
                } else {
                    self.wavenumbers(ax)
                }
            })
            .collect();
        ArrayD::from_shape_fn(IxDyn(&self.n), |idx| {
            (0..self.dims()).map(|ax| per_axis[ax][idx[ax]].powi(2)).sum()
        })
    }

    /// Spatial shape of the half spectrum (last axis shortened to n/2+1).
    pub fn half_shape(&self) -> Vec<usize> {
        let mut s = self.n.clone();
        *s.last_mut().unwrap() = s.last().unwrap() / 2 + 1;
        s
    }
}

/// Real field on a grid; values have shape n_1 × … × n_d × m.
#[derive(Debug, Clone)]
pub struct Field {
    pub grid: GridSpec,
    pub values: ArrayD<f64>,
}

impl Field {
    pub fn new(grid: GridSpec, values: ArrayD<f64>) -> Result<Self> {
        let want: Vec<usize> = grid.n.iter().cloned().collect();
        let got = values.shape();
        if got.len() != want.len() + 1 || got[..want.len()] != want[..] {
            return Err(Error::Shape {
                op: "field",
                lhs: got.to_vec(),
                rhs: want,
            });
        }
        Ok(Field { grid, values })
    }

    pub fn zeros(grid: GridSpec, channels: usize) -> Self {
        let mut shape = grid.n.clone();
        shape.push(channels);
        let values = ArrayD::zeros(IxDyn(&shape));
        Field { grid, values }
    }

    pub fn channels(&self) -> usize {
        *self.values.shape().last().unwrap()
    }

    /// One channel as a spatial-only array.
    pub fn channel(&self, c: usize) -> ArrayD<f64> {
        let last = self.values.ndim() - 1;
        let v = self.values.index_axis(Axis(last), c).to_owned();
        v
    }
}

/// Zero all modes whose signed integer index exceeds `keep` on any of the
/// leading `spatial_rank` axes. An orthogonal projection.
pub fn truncate_modes(
    spectrum: &ArrayD<Complex64>,
    spatial_rank: usize,
    keep: &[usize],
) -> Result<ArrayD<Complex64>> {
    if keep.len() != spatial_rank {
        return Err(Error::invalid(format!(
            "truncate: {} cutoffs for {} spatial axes",
            keep.len(),
            spatial_rank
        )));
    }
    for (ax, &k) in keep.iter().enumerate() {
        let n = spectrum.shape()[ax];
        if k == 0 {
            return Err(Error::invalid("truncate: cutoff must be positive"));
        }
        if k > n / 2 {
            return Err(Error::invalid(format!(
                "truncate: cutoff {k} exceeds n/2 = {} on axis {ax}",
                n / 2
            )));
        }
    }
    let mut out = spectrum.clone();
    let shape = spectrum.shape().to_vec();
    for (idx, v) in out.indexed_iter_mut() {
        for ax in 0..spatial_rank {
            let n = shape[ax] as i64;
            let j = idx[ax] as i64;
            let s = if j <= n / 2 { j } else { j - n };
            if s.unsigned_abs() as usize > keep[ax] {
                *v = Complex64::default();
                break;
            }
        }
    }
    Ok(out)
}

/// Flat row indices (row-major over the half-spectrum spatial block) and the
/// κ vectors of the modes retained under per-axis cutoffs. The index order is
/// the scan order, so gather/scatter round trips are deterministic.
pub fn retained_half_modes(grid: &GridSpec, keep: &[usize]) -> Result<(Arc<Vec<usize>>, Array2<f64>)> {
    let d = grid.dims();
    if keep.len() != d {
        return Err(Error::invalid(format!(
            "retained modes: {} cutoffs for {d} axes",
            keep.len()
        )));
    }
    for (ax, &k) in keep.iter().enumerate() {
        if k == 0 || k > grid.n[ax] / 2 {
            return Err(Error::invalid(format!(
                "retained modes: cutoff {k} out of range on axis {ax}"
            )));
        }
    }
    let half = grid.half_shape();
    let per_axis: Vec<Vec<f64>> = (0..d).map(|ax| grid.wavenumbers(ax)).collect();
    let mut indices = Vec::new();
    let mut kappas = Vec::new();
    let total: usize = half.iter().product();
    let mut idx = vec![0usize; d];
    for flat in 0..total {
        let mut keep_mode = true;
        for ax in 0..d {
            let n = grid.n[ax] as i64;
            let j = idx[ax] as i64;
            let s = if j <= n / 2 { j } else { j - n };
            if s.unsigned_abs() as usize > keep[ax] {
                keep_mode = false;
                break;
            }
        }
        if keep_mode {
            indices.push(flat);
            for ax in 0..d {
                kappas.push(per_axis[ax][idx[ax]]);
            }
        }
        // advance mixed-radix counter over the half shape
        for ax in (0..d).rev() {
            idx[ax] += 1;
            if idx[ax] < half[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    let m = indices.len();
    let kap = Array2::from_shape_vec((m, d), kappas).unwrap();
    Ok((Arc::new(indices), kap))
}

fn spectrum_of_channel(field: &Field, c: usize) -> ArrayD<Complex64> {
    fft::fftn(&complexify(&field.channel(c)), field.grid.dims(), false)
}

fn to_physical(spec: &ArrayD<Complex64>, d: usize) -> ArrayD<f64> {
    fft::fftn(spec, d, true).mapv(|z| z.re)
}

/// ∇u of a single-channel field; output has d channels.
pub fn spectral_gradient(field: &Field) -> Result<Field> {
    if field.channels() != 1 {
        return Err(Error::invalid(format!(
            "gradient expects a single-channel field, got {} channels",
            field.channels()
        )));
    }
    let grid = &field.grid;
    let d = grid.dims();
    let spec = spectrum_of_channel(field, 0);
    let mut out = Field::zeros(grid.clone(), d);
    let last = d; // channel axis of out.values
    for ax in 0..d {
        let ik = grid.kappa_field(ax, true).mapv(|k| Complex64::new(0.0, k));
        let dspec = &spec * &ik;
        out.values
            .index_axis_mut(Axis(last), ax)
            .assign(&to_physical(&dspec, d));
    }
    Ok(out)
}

/// ∇·w of a d-channel field; output has one channel.
pub fn spectral_divergence(field: &Field) -> Result<Field> {
    let grid = &field.grid;
    let d = grid.dims();
    if field.channels() != d {
        return Err(Error::invalid(format!(
            "divergence expects {d} channels, got {}",
            field.channels()
        )));
    }
    let mut acc = ArrayD::<Complex64>::zeros(IxDyn(&grid.n));
    for ax in 0..d {
        let spec = spectrum_of_channel(field, ax);
        let ik = grid.kappa_field(ax, true).mapv(|k| Complex64::new(0.0, k));
        acc = acc + spec * ik;
    }
    let mut out = Field::zeros(grid.clone(), 1);
    out.values.index_axis_mut(Axis(d), 0).assign(&to_physical(&acc, d));
    Ok(out)
}

/// Δu of a single-channel field.
pub fn spectral_laplacian(field: &Field) -> Result<Field> {
    if field.channels() != 1 {
        return Err(Error::invalid(format!(
            "laplacian expects a single-channel field, got {} channels",
            field.channels()
        )));
    }
    let grid = &field.grid;
    let d = grid.dims();
    let spec = spectrum_of_channel(field, 0);
    let mksq = grid.ksq_field(true).mapv(|k| Complex64::new(-k, 0.0));
    let out_spec = &spec * &mksq;
    let mut out = Field::zeros(grid.clone(), 1);
    out.values
        .index_axis_mut(Axis(d), 0)
        .assign(&to_physical(&out_spec, d));
    Ok(out)
}

fn const_complex_grid(tape: &mut Tape, values: ArrayD<Complex64>) -> NodeId {
    let mut shape = values.shape().to_vec();
    shape.push(1);
    let v = values.into_shape_with_order(IxDyn(&shape)).unwrap();
    tape.constant_complex(v)
}

/// One explicit-Euler step of 1D viscous Burgers, u - Δt(u u_x - ν u_xx),
/// recorded on the tape. `u` has shape [n, 1].
pub fn burgers_step_tape(
    tape: &mut Tape,
    u: NodeId,
    grid: &GridSpec,
    nu: f64,
    dt: f64,
) -> Result<NodeId> {
    if grid.dims() != 1 {
        return Err(Error::invalid("burgers step is one-dimensional"));
    }
    let ik = const_complex_grid(
        tape,
        grid.kappa_field(0, true).mapv(|k| Complex64::new(0.0, k)),
    );
    let mksq = const_complex_grid(tape, grid.ksq_field(false).mapv(|k| Complex64::new(-k, 0.0)));

    let uc = tape.complexify(u)?;
    let uhat = tape.fft(uc, 1)?;
    // advection u u_x in physical space
    let dspec = tape.mul(uhat, ik)?;
    let dspec_p = tape.ifft(dspec, 1)?;
    let ux = tape.real_part(dspec_p)?;
    let adv = tape.mul(u, ux)?;
    // viscous term in spectral space
    let lspec = tape.mul(uhat, mksq)?;
    let lspec_p = tape.ifft(lspec, 1)?;
    let lap = tape.real_part(lspec_p)?;

    let adv_dt = tape.scale(adv, dt);
    let lap_dt = tape.scale(lap, nu * dt);
    let a = tape.sub(u, adv_dt)?;
    tape.add(a, lap_dt)
}

/// One pseudo-spectral Chorin–Euler step for 2D incompressible flow,
/// recorded on the tape. `v` has shape [n1, n2, 2]. The full tentative
/// velocity is projected; the κ=0 mode (mean flow) is left unprojected.
pub fn chorin_step_tape(
    tape: &mut Tape,
    v: NodeId,
    grid: &GridSpec,
    nu: f64,
    dt: f64,
) -> Result<NodeId> {
    if grid.dims() != 2 {
        return Err(Error::invalid("chorin step is two-dimensional"));
    }
    let k1f = grid.kappa_field(0, true);
    let k2f = grid.kappa_field(1, true);
    let ksq_proj = &k1f * &k1f + &k2f * &k2f;
    let ik1 = const_complex_grid(tape, k1f.mapv(|k| Complex64::new(0.0, k)));
    let ik2 = const_complex_grid(tape, k2f.mapv(|k| Complex64::new(0.0, k)));
    // projection coefficients κ_i/|κ|², zero at κ=0
    let pk = |kf: &ArrayD<f64>| {
        ndarray::Zip::from(kf)
            .and(&ksq_proj)
            .map_collect(|&k, &s| {
                if s > 0.0 {
                    Complex64::new(k / s, 0.0)
                } else {
                    Complex64::default()
                }
            })
    };
    let p1 = const_complex_grid(tape, pk(&k1f));
    let p2 = const_complex_grid(tape, pk(&k2f));
    let k1c = const_complex_grid(tape, k1f.mapv(|k| Complex64::new(k, 0.0)));
    let k2c = const_complex_grid(tape, k2f.mapv(|k| Complex64::new(k, 0.0)));
    let mksq_full = const_complex_grid(tape, grid.ksq_field(false).mapv(|k| Complex64::new(-k, 0.0)));

    let v1 = tape.slice_last(v, 0, 1)?;
    let v2 = tape.slice_last(v, 1, 1)?;
    let w11 = tape.mul(v1, v1)?;
    let w12 = tape.mul(v1, v2)?;
    let w22 = tape.mul(v2, v2)?;
    let hat = |t: &mut Tape, x: NodeId| -> Result<NodeId> {
        let c = t.complexify(x)?;
        t.fft(c, 2)
    };
    let w11h = hat(tape, w11)?;
    let w12h = hat(tape, w12)?;
    let w22h = hat(tape, w22)?;
    let v1h = hat(tape, v1)?;
    let v2h = hat(tape, v2)?;

    // advection spectra a_i = iκ_j w_ij (sum over j)
    let a1a = tape.mul(w11h, ik1)?;
    let a1b = tape.mul(w12h, ik2)?;
    let a1 = tape.add(a1a, a1b)?;
    let a2a = tape.mul(w12h, ik1)?;
    let a2b = tape.mul(w22h, ik2)?;
    let a2 = tape.add(a2a, a2b)?;

    // tentative velocity v* = v + Δt(−a − ν|κ|² v)
    let tentative = |t: &mut Tape, vh: NodeId, ah: NodeId| -> Result<NodeId> {
        let visc = t.mul(vh, mksq_full)?;
        let visc = t.scale(visc, nu);
        let rhs = t.sub(visc, ah)?;
        let rhs = t.scale(rhs, dt);
        t.add(vh, rhs)
    };
    let s1 = tentative(tape, v1h, a1)?;
    let s2 = tentative(tape, v2h, a2)?;

    // projection: v̂ⁿ⁺¹_i = v*_i − (κ_i/|κ|²)(κ·v*)
    let d1 = tape.mul(s1, k1c)?;
    let d2 = tape.mul(s2, k2c)?;
    let div = tape.add(d1, d2)?;
    let c1 = tape.mul(p1, div)?;
    let c2 = tape.mul(p2, div)?;
    let o1 = tape.sub(s1, c1)?;
    let o2 = tape.sub(s2, c2)?;

    let back = |t: &mut Tape, x: NodeId| -> Result<NodeId> {
        let p = t.ifft(x, 2)?;
        t.real_part(p)
    };
    let r1 = back(tape, o1)?;
    let r2 = back(tape, o2)?;
    tape.concat_last(&[r1, r2])
}

/// One explicit-Euler step of the declared physics on a plain field. d=1 is
/// the degenerate Burgers form, d=2 the projected Navier–Stokes form.
pub fn chorin_euler_step(v: &Field, nu: f64, dt: f64) -> Result<Field> {
    if !v.values.iter().all(|x| x.is_finite()) {
        return Err(Error::numerical("solver step: non-finite input"));
    }
    let mut tape = Tape::new();
    let u = tape.constant_real(v.values.clone());
    let out = match v.grid.dims() {
        1 => burgers_step_tape(&mut tape, u, &v.grid, nu, dt)?,
        2 => chorin_step_tape(&mut tape, u, &v.grid, nu, dt)?,
        d => return Err(Error::invalid(format!("no solver for d={d}"))),
    };
    Field::new(v.grid.clone(), tape.value(out).real()?.clone())
}

/// Energy binned by integer |κ| shells (in units of the fundamental), summed
/// over channels, normalized so the shell total equals the mean square of
/// the field (Parseval).
pub fn energy_spectrum(field: &Field) -> Vec<(usize, f64)> {
    let grid = &field.grid;
    let d = grid.dims();
    let npts = grid.points() as f64;
    let shell_of = |idx: &IxDyn| -> usize {
        let mut sum = 0.0;
        for ax in 0..d {
            let n = grid.n[ax] as i64;
            let j = idx[ax] as i64;
            let s = if j <= n / 2 { j } else { j - n };
            sum += (s * s) as f64;
        }
        sum.sqrt().round() as usize
    };
    let mut shells: Vec<f64> = Vec::new();
    for c in 0..field.channels() {
        let spec = spectrum_of_channel(field, c);
        for (idx, v) in spec.indexed_iter() {
            let s = shell_of(&idx);
            if s >= shells.len() {
                shells.resize(s + 1, 0.0);
            }
            shells[s] += v.norm_sqr() / npts;
        }
    }
    shells.into_iter().enumerate().collect()
}

/// RMS of (value − time-mean) per channel and per bin along the last
/// spatial axis. Population variance over time, averaged over the points in
/// each bin, two-pass.
pub fn rms_fluctuations(series: &[Field]) -> Result<Vec<(usize, usize, f64)>> {
    if series.len() < 2 {
        return Err(Error::invalid("rms_fluctuations needs at least 2 snapshots"));
    }
    let grid = &series[0].grid;
    let channels = series[0].channels();
    for f in series {
        if f.grid != *grid || f.channels() != channels {
            return Err(Error::invalid("rms_fluctuations: inconsistent series"));
        }
    }
    let t = series.len() as f64;
    let d = grid.dims();
    let bins = grid.n[d - 1];
    let bin_axis = d - 1;
    let mut mean = series[0].values.clone();
    for f in &series[1..] {
        mean += &f.values;
    }
    mean /= t;
    // accumulate squared fluctuations per (bin, channel)
    let mut acc = vec![0.0f64; bins * channels];
    let mut cnt = vec![0usize; bins * channels];
    for f in series {
        for (idx, v) in f.values.indexed_iter() {
            let b = idx[bin_axis];
            let c = idx[d];
            let r = v - mean[&idx];
            acc[b * channels + c] += r * r;
            cnt[b * channels + c] += 1;
        }
    }
    let mut out = Vec::with_capacity(bins * channels);
    for b in 0..bins {
        for c in 0..channels {
            let n = cnt[b * channels + c] as f64;
            out.push((b, c, (acc[b * channels + c] / n).sqrt()));
        }
    }
    Ok(out)
}

pub fn spectrum_csv(table: &[(usize, f64)]) -> String {
    let mut s = String::from("shell,energy\n");
    for (shell, e) in table {
        s.push_str(&format!("{shell},{e}\n"));
    }
    s
}

pub fn rms_csv(table: &[(usize, usize, f64)]) -> String {
    let mut s = String::from("bin,channel,rms\n");
    for (bin, ch, rms) in table {
        s.push_str(&format!("{bin},{ch},{rms}\n"));
    }
    s
}
