//! Grid transfer between resolution levels.

use super::fields::Field2D;
use super::stencils::bilinear;

/// Coarsens by 2x2 block averaging. Odd sizes round up and the missing
/// samples replicate the last row or column.
pub fn restrict(f: &Field2D) -> Field2D {
    let cny = f.ny.div_ceil(2);
    let cnx = f.nx.div_ceil(2);
    let mut out = Field2D::zeros(cny, cnx);
    for i in 0..cny {
        for j in 0..cnx {
            let i1 = (2 * i + 1).min(f.ny - 1);
            let j1 = (2 * j + 1).min(f.nx - 1);
            let s = f.at(2 * i, 2 * j) + f.at(2 * i, j1) + f.at(i1, 2 * j) + f.at(i1, j1);
            *out.at_mut(i, j) = 0.25 * s;
        }
    }
    out
}

/// Bilinear upsampling to an arbitrary target shape with cell-centred
/// alignment. Constants map to constants.
pub fn prolong_to(f: &Field2D, tny: usize, tnx: usize) -> Field2D {
    assert!(tny > 0 && tnx > 0, "prolong target must be positive");
    let ry = f.ny as f64 / tny as f64;
    let rx = f.nx as f64 / tnx as f64;
    let mut out = Field2D::zeros(tny, tnx);
    for i in 0..tny {
        let sy = (i as f64 + 0.5) * ry - 0.5;
        for j in 0..tnx {
            let sx = (j as f64 + 0.5) * rx - 0.5;
            *out.at_mut(i, j) = bilinear(f, sy, sx);
        }
    }
    out
}

/// Doubles the resolution; inverse direction of [`restrict`] up to smoothing.
pub fn prolong(f: &Field2D) -> Field2D {
    prolong_to(f, 2 * f.ny, 2 * f.nx)
}
