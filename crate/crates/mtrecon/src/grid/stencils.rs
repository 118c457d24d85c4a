//! Difference stencils and interpolation.
//!
//! The gradient uses forward differences with a homogeneous Neumann boundary
//! (the last difference along each axis is zero) and the divergence is its
//! exact negative adjoint, so `<gradient(f), v> = -<f, divergence(v)>` holds
//! to rounding for every pair of fields. The Laplacian is the literal
//! composition of the two; nothing else in the crate assumes a different
//! boundary rule.

use super::fields::{Field2D, MatrixField2D, VectorField2D};
use crate::registration::Deformation;

/// Forward-difference gradient with Neumann boundary.
pub fn gradient(f: &Field2D) -> VectorField2D {
    let (ny, nx) = (f.ny, f.nx);
    let mut gy = Field2D::zeros(ny, nx);
    let mut gx = Field2D::zeros(ny, nx);
    for i in 0..ny {
        for j in 0..nx {
            let v = f.at(i, j);
            if i + 1 < ny {
                *gy.at_mut(i, j) = f.at(i + 1, j) - v;
            }
            if j + 1 < nx {
                *gx.at_mut(i, j) = f.at(i, j + 1) - v;
            }
        }
    }
    VectorField2D { y: gy, x: gx }
}

/// Centered-difference gradient, one-sided at the borders. Forward
/// differences locate the derivative half a pixel off the sample, which turns
/// into a systematic half-pixel bias when the result drives a registration
/// force; this stencil is for sampling-type uses where that bias matters and
/// no adjoint identity is needed.
pub fn centered_gradient(f: &Field2D) -> VectorField2D {
    let (ny, nx) = (f.ny, f.nx);
    let mut gy = Field2D::zeros(ny, nx);
    let mut gx = Field2D::zeros(ny, nx);
    for i in 0..ny {
        for j in 0..nx {
            let (ia, ib, wy) = if i == 0 {
                (0, 1.min(ny - 1), 1.0)
            } else if i + 1 == ny {
                (i - 1, i, 1.0)
            } else {
                (i - 1, i + 1, 0.5)
            };
            *gy.at_mut(i, j) = wy * (f.at(ib, j) - f.at(ia, j));
            let (ja, jb, wx) = if j == 0 {
                (0, 1.min(nx - 1), 1.0)
            } else if j + 1 == nx {
                (j - 1, j, 1.0)
            } else {
                (j - 1, j + 1, 0.5)
            };
            *gx.at_mut(i, j) = wx * (f.at(i, jb) - f.at(i, ja));
        }
    }
    VectorField2D { y: gy, x: gx }
}

/// Negative adjoint of [`gradient`].
pub fn divergence(v: &VectorField2D) -> Field2D {
    let (ny, nx) = (v.ny(), v.nx());
    let mut out = Field2D::zeros(ny, nx);
    for i in 0..ny {
        for j in 0..nx {
            let mut d = 0.0;
            // y component: g_0, g_i - g_{i-1}, -g_{n-2}
            if i + 1 < ny {
                d += v.y.at(i, j);
            }
            if i > 0 {
                d -= v.y.at(i - 1, j);
            }
            if j + 1 < nx {
                d += v.x.at(i, j);
            }
            if j > 0 {
                d -= v.x.at(i, j - 1);
            }
            *out.at_mut(i, j) = d;
        }
    }
    out
}

/// Five-point Neumann Laplacian, defined as `divergence(gradient(f))`.
pub fn laplacian(f: &Field2D) -> Field2D {
    divergence(&gradient(f))
}

/// Bilinear interpolation with coordinates clamped to the grid.
#[inline]
pub fn bilinear(f: &Field2D, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (f.ny - 1) as f64);
    let x = x.clamp(0.0, (f.nx - 1) as f64);
    let i0 = y.floor() as usize;
    let j0 = x.floor() as usize;
    let i1 = (i0 + 1).min(f.ny - 1);
    let j1 = (j0 + 1).min(f.nx - 1);
    let fy = y - i0 as f64;
    let fx = x - j0 as f64;
    let a = f.at(i0, j0) * (1.0 - fx) + f.at(i0, j1) * fx;
    let b = f.at(i1, j0) * (1.0 - fx) + f.at(i1, j1) * fx;
    a * (1.0 - fy) + b * fy
}

/// Samples `f` at the deformed positions x + v(x).
///
/// Positions that land outside the grid clamp to the nearest boundary pixel,
/// so the output range never exceeds the input range.
pub fn warp(f: &Field2D, d: &Deformation) -> Field2D {
    let v = &d.v;
    assert!(f.ny == v.ny() && f.nx == v.nx(), "warp: field and deformation shapes differ");
    let mut out = Field2D::zeros(f.ny, f.nx);
    for i in 0..f.ny {
        for j in 0..f.nx {
            let y = i as f64 + v.y.at(i, j);
            let x = j as f64 + v.x.at(i, j);
            *out.at_mut(i, j) = bilinear(f, y, x);
        }
    }
    out
}

/// Normalised Gaussian taps out to a radius of ceil(3 sigma). A width of
/// zero gives the delta kernel.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    assert!(sigma >= 0.0 && sigma.is_finite(), "kernel width must be finite and >= 0");
    if sigma == 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut w: Vec<f64> = (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    for a in &mut w {
        *a /= s;
    }
    w
}

// half-sample mirror: ..., f1, f0 | f0, f1, ..., f_{n-1} | f_{n-1}, ...
pub(crate) fn reflect(mut i: i64, n: i64) -> usize {
    loop {
        if i < 0 {
            i = -1 - i;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable convolution with a symmetric kernel under half-sample
/// reflection. With a symmetric kernel this operator is self-adjoint, which
/// the downsampling adjoint relies on.
pub fn convolve_symmetric(f: &Field2D, kernel: &[f64]) -> Field2D {
    assert!(kernel.len() % 2 == 1, "kernel must have odd length");
    if kernel.len() == 1 {
        return f.scaled(kernel[0]);
    }
    let r = (kernel.len() / 2) as i64;
    let (ny, nx) = (f.ny as i64, f.nx as i64);
    let mut tmp = Field2D::zeros(f.ny, f.nx);
    for i in 0..ny {
        for j in 0..nx {
            let mut s = 0.0;
            for (ki, w) in kernel.iter().enumerate() {
                let jj = reflect(j + ki as i64 - r, nx);
                s += w * f.at(i as usize, jj);
            }
            *tmp.at_mut(i as usize, j as usize) = s;
        }
    }
    let mut out = Field2D::zeros(f.ny, f.nx);
    for i in 0..ny {
        for j in 0..nx {
            let mut s = 0.0;
            for (ki, w) in kernel.iter().enumerate() {
                let ii = reflect(i + ki as i64 - r, ny);
                s += w * tmp.at(ii, j as usize);
            }
            *out.at_mut(i as usize, j as usize) = s;
        }
    }
    out
}

/// Gaussian smoothing with reflective boundary handling.
pub fn gaussian_blur(f: &Field2D, sigma: f64) -> Field2D {
    convolve_symmetric(f, &gaussian_kernel(sigma))
}

/// Jacobian of the deformation x + v(x): identity plus the forward-difference
/// gradient of each displacement component.
pub fn jacobian(d: &Deformation) -> MatrixField2D {
    let gy = gradient(&d.v.y);
    let gx = gradient(&d.v.x);
    let (ny, nx) = (d.v.ny(), d.v.nx());
    let mut m = MatrixField2D {
        m11: gy.y,
        m12: gy.x,
        m21: gx.y,
        m22: gx.x,
    };
    for i in 0..ny {
        for j in 0..nx {
            *m.m11.at_mut(i, j) += 1.0;
            *m.m22.at_mut(i, j) += 1.0;
        }
    }
    m
}
