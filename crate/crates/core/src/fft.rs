//! Unitary multi-dimensional FFTs over the leading `spatial_rank` axes of a
//! tensor; trailing axes are treated as per-point channels. The unitary
//! convention (1/sqrt(n) per axis in both directions) makes the transform's
//! adjoint equal to its inverse, which keeps every adjoint in the tape exact.
//!
//! Real fields are handled through the half-spectrum: `rfftn` keeps the last
//! spatial axis up to n/2+1 columns, `irfftn` rebuilds the full spectrum by
//! Hermitian symmetry and drops the imaginary residue.

use crate::tensor::complexify;
use ndarray::{ArrayD, Axis, IxDyn};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::cell::RefCell;
use std::sync::Arc;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// Unitary FFT (or inverse FFT) over axes `0..spatial_rank`.
pub fn fftn(input: &ArrayD<Complex64>, spatial_rank: usize, inverse: bool) -> ArrayD<Complex64> {
    assert!(spatial_rank >= 1 && spatial_rank <= input.ndim());
    let mut out = input.to_owned();
    for ax in 0..spatial_rank {
        let n = out.shape()[ax];
        let fft = plan(n, inverse);
        let scale = 1.0 / (n as f64).sqrt();
        let mut buf = vec![Complex64::default(); n];
        let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        for mut lane in out.lanes_mut(Axis(ax)) {
            for (b, v) in buf.iter_mut().zip(lane.iter()) {
                *b = *v;
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for (v, b) in lane.iter_mut().zip(buf.iter()) {
                *v = *b * scale;
            }
        }
    }
    out
}

/// Keep columns 0..=n/2 of the last spatial axis.
pub fn half_spectrum(full: &ArrayD<Complex64>, spatial_rank: usize) -> ArrayD<Complex64> {
    let last = spatial_rank - 1;
    let n = full.shape()[last];
    full.slice_axis(Axis(last), ndarray::Slice::from(0..=n / 2))
        .to_owned()
}

/// Rebuild a full spectrum from a half spectrum: columns j > n/2 of the last
/// spatial axis are conj-mirrored, negating every other spatial index mod n_i.
pub fn hermitian_expand(
    half: &ArrayD<Complex64>,
    spatial_rank: usize,
    n_last: usize,
) -> ArrayD<Complex64> {
    let last = spatial_rank - 1;
    assert_eq!(half.shape()[last], n_last / 2 + 1);
    let mut shape = half.shape().to_vec();
    shape[last] = n_last;
    ArrayD::from_shape_fn(IxDyn(&shape), |idx| {
        let j = idx[last];
        if j <= n_last / 2 {
            half[&idx]
        } else {
            let mut src = idx.clone();
            src[last] = n_last - j;
            for ax in 0..last {
                let n = half.shape()[ax];
                src[ax] = (n - idx[ax]) % n;
            }
            half[&src].conj()
        }
    })
}

/// Adjoint of `hermitian_expand`: fold a full-spectrum cotangent back onto the
/// half spectrum. Columns 0 and n/2 pass through; interior columns also
/// collect the conj of their mirrored partner.
pub fn hermitian_fold(full: &ArrayD<Complex64>, spatial_rank: usize) -> ArrayD<Complex64> {
    let last = spatial_rank - 1;
    let n = full.shape()[last];
    let mut shape = full.shape().to_vec();
    shape[last] = n / 2 + 1;
    ArrayD::from_shape_fn(IxDyn(&shape), |idx| {
        let j = idx[last];
        let direct = full[&idx];
        if j == 0 || j == n / 2 {
            direct
        } else {
            let mut src = idx.clone();
            src[last] = n - j;
            for ax in 0..last {
                let m = full.shape()[ax];
                src[ax] = (m - idx[ax]) % m;
            }
            direct + full[&src].conj()
        }
    })
}

/// Real-to-half-spectrum transform over the leading spatial axes.
pub fn rfftn(input: &ArrayD<f64>, spatial_rank: usize) -> ArrayD<Complex64> {
    half_spectrum(&fftn(&complexify(input), spatial_rank, false), spatial_rank)
}

/// Half-spectrum-to-real inverse; `n_last` is the full length of the last
/// spatial axis.
pub fn irfftn(half: &ArrayD<Complex64>, spatial_rank: usize, n_last: usize) -> ArrayD<f64> {
    let full = hermitian_expand(half, spatial_rank, n_last);
    fftn(&full, spatial_rank, true).mapv(|z| z.re)
}
