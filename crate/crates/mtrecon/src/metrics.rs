//! Reconstruction and registration quality measures.
//!
//! Everything here compares solver outputs against ground truth or against
//! each other; nothing feeds back into the optimisation.

use crate::grid::{convolve_symmetric, gaussian_kernel, warp, Field2D};
use crate::operators::apply_f_adjoint;
use crate::phantom::Frame;
use crate::registration::Deformation;

/// Peak signal-to-noise ratio against a reference whose maximum value sets
/// the peak. A zero-error comparison is reported through `exact` because the
/// ratio has no finite value there.
#[derive(Debug, Clone, Copy)]
pub struct Psnr {
    pub db: f64,
    pub exact: bool,
}

pub fn psnr(img: &Field2D, reference: &Field2D) -> Psnr {
    assert!(img.same_shape(reference), "psnr shape mismatch");
    let mse = img.sub(reference).norm_sq() / img.len() as f64;
    if mse == 0.0 {
        return Psnr { db: f64::INFINITY, exact: true };
    }
    let peak = reference.max();
    Psnr { db: 10.0 * (peak * peak / mse).log10(), exact: false }
}

/// Mean structural similarity with the usual 11-tap Gaussian window
/// (sigma 1.5) and constants K1 = 0.01, K2 = 0.03; the dynamic range is the
/// reference peak, matching the PSNR convention.
pub fn ssim(img: &Field2D, reference: &Field2D) -> f64 {
    assert!(img.same_shape(reference), "ssim shape mismatch");
    let k = gaussian_kernel(1.5);
    let l = reference.max();
    let c1 = (0.01 * l).powi(2);
    let c2 = (0.03 * l).powi(2);

    let mu_x = convolve_symmetric(img, &k);
    let mu_y = convolve_symmetric(reference, &k);
    let xx = convolve_symmetric(&img.mul(img), &k);
    let yy = convolve_symmetric(&reference.mul(reference), &k);
    let xy = convolve_symmetric(&img.mul(reference), &k);

    let mut acc = 0.0;
    for i in 0..xx.len() {
        let (mx, my) = (mu_x.data[i], mu_y.data[i]);
        let vx = xx.data[i] - mx * mx;
        let vy = yy.data[i] - my * my;
        let cxy = xy.data[i] - mx * my;
        acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2)
            / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    acc / xx.len() as f64
}

/// Pixelwise Euclidean distance between two displacement fields.
#[derive(Debug, Clone, Copy)]
pub struct EndpointError {
    pub mean: f64,
    pub max: f64,
}

pub fn endpoint_error(d: &Deformation, reference: &Deformation) -> EndpointError {
    assert!(
        d.ny() == reference.ny() && d.nx() == reference.nx(),
        "endpoint error shape mismatch"
    );
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for k in 0..d.v.y.len() {
        let dy = d.v.y.data[k] - reference.v.y.data[k];
        let dx = d.v.x.data[k] - reference.v.x.data[k];
        let e = (dy * dy + dx * dx).sqrt();
        sum += e;
        max = max.max(e);
    }
    EndpointError { mean: sum / d.v.y.len() as f64, max }
}

/// Mean absolute difference of the zero-filled frames against the first
/// frame: how much the raw sequence moves before any correction.
pub fn uncorrected_difference(frames: &[Frame]) -> Field2D {
    assert!(!frames.is_empty(), "no frames to compare");
    let reference = apply_f_adjoint(&frames[0].x, &frames[0].mask);
    let mut acc = Field2D::zeros(reference.ny, reference.nx);
    for fr in frames {
        let z = apply_f_adjoint(&fr.x, &fr.mask);
        for k in 0..acc.len() {
            acc.data[k] += (z.data[k] - reference.data[k]).abs();
        }
    }
    acc.scale(1.0 / frames.len() as f64);
    acc
}

/// Mean absolute difference between each corrected frame h_t o phi_t and the
/// pooled reconstruction: what remains of the motion after correction.
pub fn corrected_difference(hs: &[Field2D], maps: &[Deformation], c_u: &Field2D) -> Field2D {
    assert_eq!(hs.len(), maps.len(), "one map per frame required");
    assert!(!hs.is_empty(), "no frames to compare");
    let mut acc = Field2D::zeros(c_u.ny, c_u.nx);
    for (h, m) in hs.iter().zip(maps) {
        let w = warp(h, m);
        for k in 0..acc.len() {
            acc.data[k] += (w.data[k] - c_u.data[k]).abs();
        }
    }
    acc.scale(1.0 / hs.len() as f64);
    acc
}
