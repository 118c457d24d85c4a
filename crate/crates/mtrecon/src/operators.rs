//! Forward models: undersampled Fourier acquisition and the blur-plus-pool
//! downsampling that links the high-resolution image to each frame.
//!
//! K-space is indexed with DC at (0,0), so the low frequencies of row i sit
//! at small min(i, ny - i). Masks keep whole rows, mirroring Cartesian
//! phase-encode undersampling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::grid::{convolve_symmetric, fft2_real, gaussian_kernel, ifft2, ComplexField2D, Field2D};

/// Which k-space locations were measured. Whole rows are kept or dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    pub ny: usize,
    pub nx: usize,
    pub keep: Vec<bool>,
    pub acceleration: f64,
}

impl SamplingMask {
    /// Keeps everything; acceleration 1.
    pub fn full(ny: usize, nx: usize) -> Self {
        SamplingMask { ny, nx, keep: vec![true; ny * nx], acceleration: 1.0 }
    }

    #[inline]
    pub fn kept(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.nx + j]
    }

    pub fn kept_fraction(&self) -> f64 {
        let n = self.keep.iter().filter(|&&k| k).count();
        n as f64 / self.keep.len() as f64
    }

    pub fn kept_rows(&self) -> Vec<usize> {
        (0..self.ny).filter(|&i| self.keep[i * self.nx]).collect()
    }

    /// Zeroes all dropped locations.
    pub fn apply(&self, k: &ComplexField2D) -> ComplexField2D {
        assert!(k.ny == self.ny && k.nx == self.nx, "mask shape mismatch");
        let mut out = k.clone();
        for (c, &keep) in out.data.iter_mut().zip(&self.keep) {
            if !keep {
                *c = Default::default();
            }
        }
        out
    }

    /// Restriction to the central frequency band of half size, for
    /// coarse-level data. Keeps a row when its aliased frequency was kept.
    pub fn restrict_rows(&self) -> SamplingMask {
        let cny = self.ny / 2;
        let cnx = self.nx / 2;
        assert!(cny > 0 && cnx > 0, "mask too small to restrict");
        let mut keep = vec![false; cny * cnx];
        for i in 0..cny {
            // signed frequency of coarse row i
            let s = if i <= cny / 2 { i as isize } else { i as isize - cny as isize };
            let fine = s.rem_euclid(self.ny as isize) as usize;
            if self.keep[fine * self.nx] {
                for j in 0..cnx {
                    keep[i * cnx + j] = true;
                }
            }
        }
        let kept = keep.iter().filter(|&&k| k).count().max(1);
        let acceleration = (cny * cnx) as f64 / kept as f64;
        SamplingMask { ny: cny, nx: cnx, keep, acceleration }
    }
}

/// Builds a row mask that always keeps a central low-frequency band and
/// fills up with uniformly drawn rows until about ny / acceleration are
/// kept. The same seed always yields the same mask.
pub fn make_mask(
    ny: usize,
    nx: usize,
    acceleration: f64,
    center_fraction: f64,
    seed: u64,
) -> SamplingMask {
    assert!(acceleration >= 1.0, "acceleration must be at least 1");
    assert!((0.0..=1.0).contains(&center_fraction), "center fraction out of range");
    let target = ((ny as f64 / acceleration).round() as usize).clamp(1, ny);
    let center = (center_fraction * ny as f64).ceil() as usize;

    // rows sorted by frequency magnitude: 0, 1, ny-1, 2, ny-2, ...
    let mut by_freq: Vec<usize> = (0..ny).collect();
    by_freq.sort_by_key(|&i| (i.min(ny - i), i));
    let mut keep_row = vec![false; ny];
    for &r in by_freq.iter().take(center.min(ny)) {
        keep_row[r] = true;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rest: Vec<usize> = (0..ny).filter(|&i| !keep_row[i]).collect();
    rest.shuffle(&mut rng);
    let mut kept = keep_row.iter().filter(|&&k| k).count();
    for &r in &rest {
        if kept >= target {
            break;
        }
        keep_row[r] = true;
        kept += 1;
    }

    let mut keep = vec![false; ny * nx];
    for i in 0..ny {
        if keep_row[i] {
            for j in 0..nx {
                keep[i * nx + j] = true;
            }
        }
    }
    SamplingMask { ny, nx, keep, acceleration }
}

/// Measured k-space of a frame image: masked unitary Fourier transform.
pub fn apply_f(u: &Field2D, mask: &SamplingMask) -> ComplexField2D {
    assert!(u.ny == mask.ny && u.nx == mask.nx, "apply_f shape mismatch");
    mask.apply(&fft2_real(u))
}

/// Adjoint of [`apply_f`] under the real inner product; also the zero-filled
/// reconstruction of measured data.
pub fn apply_f_adjoint(x: &ComplexField2D, mask: &SamplingMask) -> Field2D {
    ifft2(&mask.apply(x)).re()
}

/// Parameters of the resolution-reduction operator: Gaussian blur of width
/// `blur_sigma` followed by d x d block averaging. `blur_sigma` of zero
/// means no blur, making the operator pure pooling (the identity when d=1).
#[derive(Debug, Clone, Copy)]
pub struct SystemOperatorSpec {
    pub blur_sigma: f64,
    pub d: usize,
}

impl SystemOperatorSpec {
    pub fn new(blur_sigma: f64, d: usize) -> Self {
        assert!(blur_sigma >= 0.0 && blur_sigma.is_finite(), "blur width must be finite and >= 0");
        assert!(d >= 1, "downsampling factor must be at least 1");
        SystemOperatorSpec { blur_sigma, d }
    }

    fn kernel(&self) -> Vec<f64> {
        gaussian_kernel(self.blur_sigma)
    }
}

/// High resolution to frame resolution: blur, then average d x d blocks.
pub fn apply_c(u: &Field2D, op: &SystemOperatorSpec) -> Field2D {
    assert!(
        u.ny % op.d == 0 && u.nx % op.d == 0,
        "high-resolution dims must be divisible by the pooling factor"
    );
    let blurred = convolve_symmetric(u, &op.kernel());
    if op.d == 1 {
        return blurred;
    }
    let (lny, lnx) = (u.ny / op.d, u.nx / op.d);
    let inv = 1.0 / (op.d * op.d) as f64;
    let mut out = Field2D::zeros(lny, lnx);
    for i in 0..lny {
        for j in 0..lnx {
            let mut s = 0.0;
            for di in 0..op.d {
                for dj in 0..op.d {
                    s += blurred.at(i * op.d + di, j * op.d + dj);
                }
            }
            *out.at_mut(i, j) = s * inv;
        }
    }
    out
}

/// Exact adjoint of [`apply_c`]: spread each frame pixel over its block with
/// weight 1/d^2, then blur again.
pub fn apply_c_adjoint(lr: &Field2D, op: &SystemOperatorSpec) -> Field2D {
    let (hny, hnx) = (lr.ny * op.d, lr.nx * op.d);
    let mut up = Field2D::zeros(hny, hnx);
    let inv = 1.0 / (op.d * op.d) as f64;
    for i in 0..lr.ny {
        for j in 0..lr.nx {
            let v = lr.at(i, j) * inv;
            for di in 0..op.d {
                for dj in 0..op.d {
                    *up.at_mut(i * op.d + di, j * op.d + dj) = v;
                }
            }
        }
    }
    convolve_symmetric(&up, &op.kernel())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rustfft::num_complex::Complex;

    fn rf(rng: &mut ChaCha8Rng, ny: usize, nx: usize) -> Field2D {
        Field2D::from_fn(ny, nx, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn full_acceleration_keeps_every_row() {
        let m = make_mask(32, 16, 1.0, 0.08, 1);
        assert_eq!(m.kept_rows().len(), 32);
        assert!((m.kept_fraction() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn kept_fraction_tracks_acceleration() {
        for &(ny, accel) in &[(64usize, 4.0f64), (64, 8.0), (48, 3.0)] {
            let m = make_mask(ny, ny, accel, 0.08, 7);
            let want = ny as f64 / accel;
            let got = m.kept_rows().len() as f64;
            assert!(
                (got - want).abs() <= 1.0,
                "{got} rows kept, wanted about {want}"
            );
        }
    }

    #[test]
    fn central_band_is_always_kept() {
        let m = make_mask(64, 64, 8.0, 0.08, 3);
        // ceil(0.08 * 64) = 6 lowest-frequency rows: 0, 1, 63, 2, 62, 3
        for &r in &[0usize, 1, 2, 3, 62, 63] {
            assert!(m.kept(r, 0), "row {r} missing from the central band");
        }
    }

    #[test]
    fn masks_are_deterministic_in_the_seed() {
        let a = make_mask(64, 64, 4.0, 0.08, 42);
        let b = make_mask(64, 64, 4.0, 0.08, 42);
        let c = make_mask(64, 64, 4.0, 0.08, 43);
        assert_eq!(a, b);
        assert_ne!(a.keep, c.keep);
    }

    #[test]
    fn forward_zeroes_dropped_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = rf(&mut rng, 32, 32);
        let m = make_mask(32, 32, 4.0, 0.08, 9);
        let k = apply_f(&u, &m);
        for i in 0..32 {
            for j in 0..32 {
                if !m.kept(i, j) {
                    assert_eq!(k.at(i, j), Complex::new(0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn fourier_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = make_mask(24, 24, 3.0, 0.1, 11);
        for _ in 0..20 {
            let u = rf(&mut rng, 24, 24);
            let mut x = ComplexField2D::zeros(24, 24);
            for c in &mut x.data {
                *c = Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            }
            let lhs = apply_f(&u, &m).dot(&x).re;
            let rhs = u.dot(&apply_f_adjoint(&x, &m));
            assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn system_operator_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let op = SystemOperatorSpec::new(0.7, 2);
        for _ in 0..20 {
            let u = rf(&mut rng, 16, 16);
            let w = rf(&mut rng, 8, 8);
            let lhs = apply_c(&u, &op).dot(&w);
            let rhs = u.dot(&apply_c_adjoint(&w, &op));
            assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn constants_survive_the_system_operator() {
        let op = SystemOperatorSpec::new(1.3, 2);
        let u = Field2D::constant(16, 16, 2.5);
        let l = apply_c(&u, &op);
        assert_eq!((l.ny, l.nx), (8, 8));
        for &v in &l.data {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_operator_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = rf(&mut rng, 8, 8);
        let op = SystemOperatorSpec::new(0.0, 1);
        assert_eq!(apply_c(&u, &op).data, u.data);
        assert_eq!(apply_c_adjoint(&u, &op).data, u.data);
    }

    #[test]
    fn pool_adjoint_spreads_uniformly() {
        let op = SystemOperatorSpec::new(0.0, 2);
        let lr = Field2D::constant(1, 1, 1.0);
        let hr = apply_c_adjoint(&lr, &op);
        assert_eq!(hr.data, vec![0.25; 4]);
    }

    #[test]
    fn restricted_mask_follows_aliased_rows() {
        let m = make_mask(64, 64, 4.0, 0.08, 21);
        let c = m.restrict_rows();
        assert_eq!((c.ny, c.nx), (32, 32));
        // DC row of the fine mask is always kept, so row 0 survives
        assert!(c.kept(0, 0));
        for i in 0..32usize {
            let s = if i <= 16 { i as isize } else { i as isize - 32 };
            let fine = s.rem_euclid(64) as usize;
            assert_eq!(c.kept(i, 0), m.kept(fine, 0), "row {i}");
        }
    }
}
