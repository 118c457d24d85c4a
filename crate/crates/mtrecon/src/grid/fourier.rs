//! Unitary Fourier transforms and a fast screened-Poisson solve.
//!
//! `fft2`/`ifft2` are scaled by 1/sqrt(N) each, so the pair is unitary: the
//! adjoint of the forward transform is its inverse and Parseval holds
//! exactly. The cosine transforms diagonalise the Neumann Laplacian from
//! [`super::stencils`], which gives a direct solver for (I - c Lap).

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::fields::{ComplexField2D, Field2D};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, forward: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if forward {
            p.plan_fft_forward(len)
        } else {
            p.plan_fft_inverse(len)
        }
    })
}

fn transform2(f: &ComplexField2D, forward: bool) -> ComplexField2D {
    let (ny, nx) = (f.ny, f.nx);
    let mut out = f.clone();
    let row_fft = plan(nx, forward);
    for row in out.data.chunks_exact_mut(nx) {
        row_fft.process(row);
    }
    let col_fft = plan(ny, forward);
    let mut col = vec![Complex::new(0.0, 0.0); ny];
    for j in 0..nx {
        for i in 0..ny {
            col[i] = out.data[i * nx + j];
        }
        col_fft.process(&mut col);
        for i in 0..ny {
            out.data[i * nx + j] = col[i];
        }
    }
    let s = 1.0 / ((ny * nx) as f64).sqrt();
    for c in &mut out.data {
        *c *= s;
    }
    out
}

/// Unitary 2-D Fourier transform.
pub fn fft2(f: &ComplexField2D) -> ComplexField2D {
    transform2(f, true)
}

/// Unitary 2-D inverse Fourier transform; exact inverse and adjoint of [`fft2`].
pub fn ifft2(f: &ComplexField2D) -> ComplexField2D {
    transform2(f, false)
}

/// [`fft2`] of a real field.
pub fn fft2_real(f: &Field2D) -> ComplexField2D {
    fft2(&ComplexField2D::from_real(f))
}

// Unnormalised DCT-II of one slice, computed through a length-2n FFT of the
// even extension [f_0 .. f_{n-1}, f_{n-1} .. f_0].
fn dct2_slice(v: &[f64], out: &mut [f64]) {
    let n = v.len();
    if n == 1 {
        out[0] = v[0];
        return;
    }
    let fft = plan(2 * n, true);
    let mut buf = vec![Complex::new(0.0, 0.0); 2 * n];
    for (j, &x) in v.iter().enumerate() {
        buf[j] = Complex::new(x, 0.0);
        buf[2 * n - 1 - j] = Complex::new(x, 0.0);
    }
    fft.process(&mut buf);
    for k in 0..n {
        let ang = PI * k as f64 / (2.0 * n as f64);
        out[k] = 0.5 * (ang.cos() * buf[k].re + ang.sin() * buf[k].im);
    }
}

// Inverse of dct2_slice: builds the Hermitian half-sample spectrum and runs a
// length-2n inverse FFT; the first n outputs divided by n recover the slice.
fn idct2_slice(coef: &[f64], out: &mut [f64]) {
    let n = coef.len();
    if n == 1 {
        out[0] = coef[0];
        return;
    }
    let fft = plan(2 * n, false);
    let mut buf = vec![Complex::new(0.0, 0.0); 2 * n];
    buf[0] = Complex::new(coef[0], 0.0);
    for k in 1..n {
        let ang = PI * k as f64 / (2.0 * n as f64);
        let w = Complex::new(ang.cos(), ang.sin()) * coef[k];
        buf[k] = w;
        buf[2 * n - k] = w.conj();
    }
    fft.process(&mut buf);
    let inv_n = 1.0 / n as f64;
    for j in 0..n {
        out[j] = buf[j].re * inv_n;
    }
}

fn dct_axis(f: &Field2D, along_rows: bool, inverse: bool) -> Field2D {
    let (ny, nx) = (f.ny, f.nx);
    let mut out = Field2D::zeros(ny, nx);
    if along_rows {
        let mut tmp = vec![0.0; nx];
        for i in 0..ny {
            let row = &f.data[i * nx..(i + 1) * nx];
            if inverse {
                idct2_slice(row, &mut tmp);
            } else {
                dct2_slice(row, &mut tmp);
            }
            out.data[i * nx..(i + 1) * nx].copy_from_slice(&tmp);
        }
    } else {
        let mut col = vec![0.0; ny];
        let mut tmp = vec![0.0; ny];
        for j in 0..nx {
            for i in 0..ny {
                col[i] = f.data[i * nx + j];
            }
            if inverse {
                idct2_slice(&col, &mut tmp);
            } else {
                dct2_slice(&col, &mut tmp);
            }
            for i in 0..ny {
                out.data[i * nx + j] = tmp[i];
            }
        }
    }
    out
}

/// Separable unnormalised DCT-II over both axes.
pub(crate) fn dct2_2d(f: &Field2D) -> Field2D {
    dct_axis(&dct_axis(f, true, false), false, false)
}

/// Exact inverse of [`dct2_2d`].
pub(crate) fn idct2_2d(f: &Field2D) -> Field2D {
    dct_axis(&dct_axis(f, false, true), true, true)
}

/// Direct solve of (I - c Lap) out = rhs with the Neumann Laplacian, c >= 0.
///
/// The Laplacian eigenvalues under this boundary are
/// -4 sin^2(pi k / 2n) per axis, so every mode divides by a number >= 1 and
/// the solve is unconditionally stable.
pub fn screened_poisson_neumann(rhs: &Field2D, c: f64) -> Field2D {
    assert!(c >= 0.0, "screening coefficient must be nonnegative");
    let (ny, nx) = (rhs.ny, rhs.nx);
    let mut coef = dct2_2d(rhs);
    for k1 in 0..ny {
        let sy = (PI * k1 as f64 / (2.0 * ny as f64)).sin();
        let my = 4.0 * sy * sy;
        for k2 in 0..nx {
            let sx = (PI * k2 as f64 / (2.0 * nx as f64)).sin();
            let mu = my + 4.0 * sx * sx;
            coef.data[k1 * nx + k2] /= 1.0 + c * mu;
        }
    }
    idct2_2d(&coef)
}
