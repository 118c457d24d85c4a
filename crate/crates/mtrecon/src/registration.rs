//! Hyperelastic registration of frames to a common reference.
//!
//! Deformations are stored as displacement fields, phi(x) = x + v(x), on the
//! frame grid. The regulariser is a polyconvex Ogden-type stored energy with
//! a determinant barrier that blows up as a deformation approaches folding,
//! and the flow splits it through an auxiliary matrix field `z` that tracks
//! the displacement gradient. Near-folding states are handled by regridding:
//! the accumulated map is banked, the moving image is rewarped, and the flow
//! restarts from the identity.

use thiserror::Error;

use crate::grid::{
    bilinear, centered_gradient, determinant, divergence, gradient, jacobian, prolong_to,
    restrict, screened_poisson_neumann, warp, Field2D, MatrixField2D, VectorField2D,
};

/// Stored-energy coefficients. `a1` scales the Frobenius (length) term and
/// `a2` the determinant barrier.
#[derive(Debug, Clone, Copy)]
pub struct OgdenParams {
    pub a1: f64,
    pub a2: f64,
}

impl Default for OgdenParams {
    fn default() -> Self {
        OgdenParams { a1: 1.0, a2: 50.0 }
    }
}

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("deformation gradient has non-positive determinant (min {min:.3e})")]
    NonPositiveDeterminant { min: f64 },
}

/// Displacement-based deformation phi(x) = x + v(x).
#[derive(Debug, Clone, PartialEq)]
pub struct Deformation {
    pub v: VectorField2D,
}

impl Deformation {
    pub fn identity(ny: usize, nx: usize) -> Self {
        Deformation { v: VectorField2D::zeros(ny, nx) }
    }

    pub fn ny(&self) -> usize {
        self.v.ny()
    }

    pub fn nx(&self) -> usize {
        self.v.nx()
    }

    pub fn jacobian(&self) -> MatrixField2D {
        jacobian(self)
    }

    pub fn min_det(&self) -> f64 {
        determinant(&self.jacobian()).min()
    }

    /// Resamples onto a finer grid, scaling displacements by the grid ratio
    /// so the deformation keeps its physical extent.
    pub fn prolong_to(&self, tny: usize, tnx: usize) -> Deformation {
        let sy = tny as f64 / self.ny() as f64;
        let sx = tnx as f64 / self.nx() as f64;
        let mut y = prolong_to(&self.v.y, tny, tnx);
        let mut x = prolong_to(&self.v.x, tny, tnx);
        y.scale(sy);
        x.scale(sx);
        Deformation { v: VectorField2D::new(y, x) }
    }
}

/// Total stored energy of a matrix field of deformation gradients: per pixel
/// a1 |F|^4 + a2 (det F - 1/det F)^4, and +inf as soon as any determinant is
/// not positive.
pub fn ogden_energy(f: &MatrixField2D, p: &OgdenParams) -> f64 {
    let mut total = 0.0;
    for k in 0..f.m11.len() {
        let (f11, f12, f21, f22) =
            (f.m11.data[k], f.m12.data[k], f.m21.data[k], f.m22.data[k]);
        let det = f11 * f22 - f12 * f21;
        if det <= 0.0 {
            return f64::INFINITY;
        }
        let frob2 = f11 * f11 + f12 * f12 + f21 * f21 + f22 * f22;
        let dev = det - 1.0 / det;
        total += p.a1 * frob2 * frob2 + p.a2 * dev * dev * dev * dev;
    }
    total
}

/// Pointwise derivative of the stored energy with respect to the deformation
/// gradient. Requires positive determinants.
pub fn ogden_gradient(f: &MatrixField2D, p: &OgdenParams) -> Result<MatrixField2D, RegistrationError> {
    let mut out = MatrixField2D::zeros(f.ny(), f.nx());
    let mut min_det = f64::INFINITY;
    for k in 0..f.m11.len() {
        let (f11, f12, f21, f22) =
            (f.m11.data[k], f.m12.data[k], f.m21.data[k], f.m22.data[k]);
        let det = f11 * f22 - f12 * f21;
        min_det = min_det.min(det);
        if det <= 0.0 {
            continue;
        }
        let frob2 = f11 * f11 + f12 * f12 + f21 * f21 + f22 * f22;
        let dev = det - 1.0 / det;
        let c0 = dev * dev * dev;
        let c1 = 1.0 + 1.0 / (det * det);
        let a = 4.0 * p.a1 * frob2;
        let b = 4.0 * p.a2 * c0 * c1;
        // cofactor of a 2x2 matrix: [[f22, -f21], [-f12, f11]]
        out.m11.data[k] = a * f11 + b * f22;
        out.m12.data[k] = a * f12 - b * f21;
        out.m21.data[k] = a * f21 - b * f12;
        out.m22.data[k] = a * f22 + b * f11;
    }
    if min_det <= 0.0 {
        return Err(RegistrationError::NonPositiveDeterminant { min: min_det });
    }
    Ok(out)
}

pub(crate) fn grad_planes(v: &VectorField2D) -> MatrixField2D {
    let gy = gradient(&v.y);
    let gx = gradient(&v.x);
    MatrixField2D { m11: gy.y, m12: gy.x, m21: gx.y, m22: gx.x }
}

/// Drift of the z flow: minus the gradient of
/// sum W(I + z) + (gamma1/2) |z - grad v|^2 with respect to z.
pub fn z_drift(
    z: &MatrixField2D,
    d: &Deformation,
    p: &OgdenParams,
    gamma1: f64,
) -> Result<MatrixField2D, RegistrationError> {
    let mut f = z.clone();
    for k in 0..f.m11.len() {
        f.m11.data[k] += 1.0;
        f.m22.data[k] += 1.0;
    }
    let w = ogden_gradient(&f, p)?;
    let gv = grad_planes(&d.v);
    let mut out = MatrixField2D::zeros(z.ny(), z.nx());
    for (o, ((wk, zk), gk)) in [
        (&mut out.m11, ((&w.m11, &z.m11), &gv.m11)),
        (&mut out.m12, ((&w.m12, &z.m12), &gv.m12)),
        (&mut out.m21, ((&w.m21, &z.m21), &gv.m21)),
        (&mut out.m22, ((&w.m22, &z.m22), &gv.m22)),
    ] {
        for k in 0..o.len() {
            o.data[k] = -wk.data[k] - gamma1 * (zk.data[k] - gk.data[k]);
        }
    }
    Ok(out)
}

/// One semi-implicit step of the z flow. The gamma1 relaxation is treated
/// implicitly, which keeps the step stable for any positive dt; the stored
/// energy drift stays explicit.
pub fn update_z(
    z: &MatrixField2D,
    d: &Deformation,
    p: &OgdenParams,
    gamma1: f64,
    dt: f64,
) -> Result<MatrixField2D, RegistrationError> {
    let drift = z_drift(z, d, p, gamma1)?;
    let denom = 1.0 + dt * gamma1;
    let mut out = z.clone();
    for (o, (zk, dk)) in [
        (&mut out.m11, (&z.m11, &drift.m11)),
        (&mut out.m12, (&z.m12, &drift.m12)),
        (&mut out.m21, (&z.m21, &drift.m21)),
        (&mut out.m22, (&z.m22, &drift.m22)),
    ] {
        for k in 0..o.len() {
            // drift already contains -gamma1 z; adding it back here makes
            // the division below the exact semi-implicit form
            o.data[k] = (zk.data[k] + dt * (dk.data[k] + gamma1 * zk.data[k])) / denom;
        }
    }
    Ok(out)
}

/// One semi-implicit step of the deformation flow.
///
/// The elastic coupling acts through div z, the image force through the
/// residual (moving o phi - target) times the warped image gradient, and the
/// Laplacian smoothing is implicit via a cosine-transform solve, so the step
/// never amplifies any mode.
pub fn update_phi(
    d: &Deformation,
    z: &MatrixField2D,
    moving: &Field2D,
    target: &Field2D,
    gamma1: f64,
    gamma2: f64,
    dt: f64,
) -> Deformation {
    let (ny, nx) = (d.ny(), d.nx());
    assert!(moving.ny == ny && moving.nx == nx, "update_phi: moving shape mismatch");
    assert!(target.ny == ny && target.nx == nx, "update_phi: target shape mismatch");

    let warped = warp(moving, d);
    // centered differences: the force samples the image gradient, and the
    // half-pixel offset of the one-sided stencil would bias the equilibrium
    let gm = centered_gradient(moving);
    let gy_w = warp(&gm.y, d);
    let gx_w = warp(&gm.x, d);

    let div_z1 = divergence(&VectorField2D::new(z.m11.clone(), z.m12.clone()));
    let div_z2 = divergence(&VectorField2D::new(z.m21.clone(), z.m22.clone()));

    let c = dt * gamma1;
    let mut rhs_y = d.v.y.clone();
    let mut rhs_x = d.v.x.clone();
    for k in 0..rhs_y.len() {
        let r = warped.data[k] - target.data[k];
        rhs_y.data[k] -= dt * (gamma1 * div_z1.data[k] + gamma2 * r * gy_w.data[k]);
        rhs_x.data[k] -= dt * (gamma1 * div_z2.data[k] + gamma2 * r * gx_w.data[k]);
    }
    let vy = screened_poisson_neumann(&rhs_y, c);
    let vx = screened_poisson_neumann(&rhs_x, c);
    Deformation { v: VectorField2D::new(vy, vx) }
}

/// Outcome of a fixed-point inversion.
#[derive(Debug, Clone, Copy)]
pub struct InversionReport {
    pub iterations: usize,
    /// Largest displacement change in the final sweep, in pixels.
    pub residual: f64,
    pub converged: bool,
}

/// Inverts phi(x) = x + v(x) by the fixed point w <- -v(x + w), which
/// contracts whenever the displacement gradient is below one.
pub fn invert_deformation(d: &Deformation, max_iter: usize, tol_px: f64) -> (Deformation, InversionReport) {
    let (ny, nx) = (d.ny(), d.nx());
    let mut w = VectorField2D::zeros(ny, nx);
    let mut report = InversionReport { iterations: 0, residual: f64::INFINITY, converged: false };
    for it in 0..max_iter {
        let mut max_delta = 0.0f64;
        for i in 0..ny {
            for j in 0..nx {
                let yy = i as f64 + w.y.at(i, j);
                let xx = j as f64 + w.x.at(i, j);
                let ny_new = -bilinear(&d.v.y, yy, xx);
                let nx_new = -bilinear(&d.v.x, yy, xx);
                let dy = ny_new - w.y.at(i, j);
                let dx = nx_new - w.x.at(i, j);
                max_delta = max_delta.max((dy * dy + dx * dx).sqrt());
                *w.y.at_mut(i, j) = ny_new;
                *w.x.at_mut(i, j) = nx_new;
            }
        }
        report.iterations = it + 1;
        report.residual = max_delta;
        if max_delta < tol_px {
            report.converged = true;
            break;
        }
    }
    (Deformation { v: w }, report)
}

/// Determinant of the inverse map's Jacobian, evaluated through the forward
/// map: det grad(phi^-1)(x) = 1 / det grad(phi) at phi^-1(x). The caller
/// must pass an invertible deformation; outputs are clamped away from zero.
pub fn det_inverse_jacobian(d: &Deformation, d_inv: &Deformation) -> Field2D {
    let det_fwd = determinant(&d.jacobian());
    debug_assert!(det_fwd.min() > 0.0, "det_inverse_jacobian needs an invertible map");
    let pulled = warp(&det_fwd, d_inv);
    let mut out = pulled;
    for a in &mut out.data {
        *a = 1.0 / a.max(1e-12);
    }
    out
}

/// Composition (a o b)(x) = a(b(x)) in displacement form.
pub fn compose_deformations(a: &Deformation, b: &Deformation) -> Deformation {
    let (ny, nx) = (b.ny(), b.nx());
    assert!(a.ny() == ny && a.nx() == nx, "compose: shape mismatch");
    let mut v = VectorField2D::zeros(ny, nx);
    for i in 0..ny {
        for j in 0..nx {
            let by = b.v.y.at(i, j);
            let bx = b.v.x.at(i, j);
            let yy = i as f64 + by;
            let xx = j as f64 + bx;
            *v.y.at_mut(i, j) = by + bilinear(&a.v.y, yy, xx);
            *v.x.at_mut(i, j) = bx + bilinear(&a.v.x, yy, xx);
        }
    }
    Deformation { v }
}

/// Bookkeeping for regridding. `saved_maps` holds the banked deformations in
/// application order; composing them (left to right) with the current map
/// reproduces the cumulative warp applied to the moving image.
#[derive(Debug, Clone)]
pub struct RegridState {
    pub tol: f64,
    pub count: usize,
    pub saved_maps: Vec<Deformation>,
}

impl RegridState {
    pub fn new(tol: f64) -> Self {
        assert!(tol > 0.0, "regrid tolerance must be positive");
        RegridState { tol, count: 0, saved_maps: Vec::new() }
    }

    /// Folds the banked maps and the current deformation into one total map.
    pub fn total_map(&self, current: &Deformation) -> Deformation {
        let mut maps = self.saved_maps.iter();
        let Some(first) = maps.next() else {
            return current.clone();
        };
        let mut acc = first.clone();
        for m in maps {
            acc = compose_deformations(&acc, m);
        }
        compose_deformations(&acc, current)
    }
}

/// Checks the current deformation against the folding tolerance and regrids
/// when needed: the moving image is rewarped by `prev`, `prev` is banked, and
/// the flow restarts from identity with z cleared. The crossing map itself is
/// discarded. `prev` must be the last map that was still above tolerance, so
/// the bank never holds a near-degenerate warp. Returns true when a regrid
/// happened.
pub fn regrid_step(
    state: &mut RegridState,
    d: &mut Deformation,
    z: &mut MatrixField2D,
    moving: &mut Field2D,
    prev: &Deformation,
) -> bool {
    let det = determinant(&d.jacobian());
    if det.min() >= state.tol {
        return false;
    }
    *moving = warp(moving, prev);
    state.saved_maps.push(prev.clone());
    state.count += 1;
    *d = Deformation::identity(d.ny(), d.nx());
    *z = MatrixField2D::zeros(z.ny(), z.nx());
    true
}

/// Settings for pairwise image registration.
#[derive(Debug, Clone)]
pub struct RegistrationConfig {
    pub ogden: OgdenParams,
    pub gamma1: f64,
    pub gamma2: f64,
    pub dt: f64,
    pub dt_floor: f64,
    pub levels: usize,
    pub sweeps_per_level: usize,
    pub regrid_tol: f64,
    /// Largest displacement change a single accepted step may make, in
    /// pixels. Keeps the discrete flow resolving the continuous one: with
    /// the image force scaled by gamma2 a full step can move the sharp parts
    /// of the field several pixels at once, which distorts the map faster
    /// than the stored-energy barrier can react.
    pub max_step_px: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            ogden: OgdenParams::default(),
            gamma1: 5.0,
            gamma2: 1.0e5,
            dt: 1.0e-3,
            dt_floor: 1.0e-6,
            levels: 2,
            sweeps_per_level: 200,
            regrid_tol: 0.05,
            max_step_px: 0.5,
        }
    }
}

/// Result of [`register_pair`].
#[derive(Debug, Clone)]
pub struct RegistrationOutcome {
    pub map: Deformation,
    pub energy: f64,
    pub regrids: usize,
}

fn registration_energy(
    z: &MatrixField2D,
    d: &Deformation,
    moving: &Field2D,
    fixed: &Field2D,
    cfg: &RegistrationConfig,
) -> f64 {
    let mut f = z.clone();
    for k in 0..f.m11.len() {
        f.m11.data[k] += 1.0;
        f.m22.data[k] += 1.0;
    }
    let ogden = ogden_energy(&f, &cfg.ogden);
    if !ogden.is_finite() {
        return f64::INFINITY;
    }
    let gv = grad_planes(&d.v);
    let pen = z.sub(&gv).norm_sq();
    let res = warp(moving, d).sub(fixed).norm_sq();
    ogden + 0.5 * cfg.gamma1 * pen + 0.5 * cfg.gamma2 * res
}

// One backtracked joint step of (z, phi). Halves the step until the combined
// registration energy stops increasing while the deformation stays
// injective, or the floor is reached; on total failure the state is left
// untouched. The injectivity check matters because the stored-energy barrier
// acts on I + z, which trails the actual displacement gradient, so a large
// step can fold the map while still lowering the energy.
fn descend_once(
    z: &mut MatrixField2D,
    d: &mut Deformation,
    moving: &Field2D,
    fixed: &Field2D,
    cfg: &RegistrationConfig,
    dt: &mut f64,
    energy: &mut f64,
) {
    loop {
        let stepped = update_z(z, d, &cfg.ogden, cfg.gamma1, *dt);
        let candidate = match stepped {
            Ok(zc) => {
                let dc = update_phi(d, &zc, moving, fixed, cfg.gamma1, cfg.gamma2, *dt);
                let small_enough = dc.v.sub(&d.v).max_len() <= cfg.max_step_px;
                let e = if small_enough && determinant(&dc.jacobian()).min() > 0.0 {
                    registration_energy(&zc, &dc, moving, fixed, cfg)
                } else {
                    f64::INFINITY
                };
                Some((zc, dc, e))
            }
            Err(_) => None,
        };
        match candidate {
            Some((zc, dc, e)) if e.is_finite() && e <= *energy => {
                *z = zc;
                *d = dc;
                *energy = e;
                *dt = (*dt * 1.5).min(cfg.dt);
                return;
            }
            _ => {
                *dt *= 0.5;
                if *dt < cfg.dt_floor {
                    *dt = cfg.dt_floor;
                    return;
                }
            }
        }
    }
}

/// Coarse-to-fine registration skeleton. Builds restriction pyramids of both
/// images, calls `level_driver(fixed, moving, init, level)` from the
/// coarsest level up, and prolongs each level's map to start the next.
pub fn multiscale_register<F>(
    fixed: &Field2D,
    moving: &Field2D,
    levels: usize,
    mut level_driver: F,
) -> Deformation
where
    F: FnMut(&Field2D, &Field2D, Deformation, usize) -> Deformation,
{
    assert!(levels >= 1, "at least one level required");
    let mut fixed_pyr = vec![fixed.clone()];
    let mut moving_pyr = vec![moving.clone()];
    for _ in 1..levels {
        let f = fixed_pyr.last().unwrap();
        if f.ny < 8 || f.nx < 8 {
            break;
        }
        fixed_pyr.push(restrict(f));
        moving_pyr.push(restrict(moving_pyr.last().unwrap()));
    }
    let mut d = {
        let c = fixed_pyr.last().unwrap();
        Deformation::identity(c.ny, c.nx)
    };
    for level in (0..fixed_pyr.len()).rev() {
        let f = &fixed_pyr[level];
        let m = &moving_pyr[level];
        if d.ny() != f.ny || d.nx() != f.nx {
            d = d.prolong_to(f.ny, f.nx);
        }
        d = level_driver(f, m, d, fixed_pyr.len() - 1 - level);
    }
    d
}

/// Full hyperelastic registration of `moving` onto `fixed`.
pub fn register_pair(fixed: &Field2D, moving: &Field2D, cfg: &RegistrationConfig) -> RegistrationOutcome {
    let mut regrids = 0usize;
    let mut final_energy = f64::INFINITY;
    let map = multiscale_register(fixed, moving, cfg.levels, |f, m, init, _level| {
        let (ny, nx) = (f.ny, f.nx);
        let mut d = init;
        let mut z = MatrixField2D::zeros(ny, nx);
        let mut moving_cur = m.clone();
        let mut state = RegridState::new(cfg.regrid_tol);
        // fold any prolonged deformation into the moving image so the level
        // starts consistent even if the init is already near folding
        let handed_in = d.clone();
        if !regrid_step(&mut state, &mut d, &mut z, &mut moving_cur, &handed_in) {
            z = grad_planes(&d.v);
        }
        let mut dt = cfg.dt;
        let mut energy = registration_energy(&z, &d, &moving_cur, f, cfg);
        for _ in 0..cfg.sweeps_per_level {
            let before = d.clone();
            descend_once(&mut z, &mut d, &moving_cur, f, cfg, &mut dt, &mut energy);
            if regrid_step(&mut state, &mut d, &mut z, &mut moving_cur, &before) {
                energy = registration_energy(&z, &d, &moving_cur, f, cfg);
                dt = cfg.dt;
            }
        }
        regrids += state.count;
        final_energy = energy;
        state.total_map(&d)
    });
    RegistrationOutcome { map, energy: final_energy, regrids }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ogden_energy_of_identity_grid() {
        let p = OgdenParams::default();
        let m = MatrixField2D::identity(8, 8);
        let e = ogden_energy(&m, &p);
        assert!((e - 4.0 * p.a1 * 64.0).abs() <= 1e-12 * e);
    }

    #[test]
    fn ogden_energy_of_anisotropic_stretch() {
        let p = OgdenParams { a1 : 1.0, a2: 50.0 };
        let mut m = MatrixField2D::identity(1, 1);
        m.m11.data[0] = 2.0;
        m.m22.data[0] = 0.5;
        // |F|^2 = 4.25 and det = 1, so only the Frobenius part contributes.
        let e = ogden_energy(&m, &p);
        assert!((e - 4.25f64 * 4.25).abs() < 1e-12);
    }

    #[test]
    fn ogden_energy_is_infinite_past_folding() {
        let p = OgdenParams::default();
        let mut m = MatrixField2D::identity(2, 2);
        m.m11.data[3] = -0.1;
        assert!(ogden_energy(&m, &p).is_infinite());
        assert!(ogden_gradient(&m, &p).is_err());
    }

    #[test]
    fn ogden_gradient_matches_finite_differences() {
        let p = OgdenParams { a1: 1.3, a2: 7.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = MatrixField2D::identity(3, 3);
        for pl in [&mut m.m11, &mut m.m12, &mut m.m21, &mut m.m22] {
            for a in &mut pl.data {
                *a += rng.gen_range(-0.2..0.2);
            }
        }
        let g = ogden_gradient(&m, &p).unwrap();
        let h = 1e-6;
        for (plane, gplane) in [(0usize, &g.m11), (1, &g.m12), (2, &g.m21), (3, &g.m22)] {
            for k in 0..9 {
                let mut mp = m.clone();
                let mut mm = m.clone();
                let (pp, pm) = match plane {
                    0 => (&mut mp.m11, &mut mm.m11),
                    1 => (&mut mp.m12, &mut mm.m12),
                    2 => (&mut mp.m21, &mut mm.m21),
                    _ => (&mut mp.m22, &mut mm.m22),
                };
                pp.data[k] += h;
                pm.data[k] -= h;
                let fd = (ogden_energy(&mp, &p) - ogden_energy(&mm, &p)) / (2.0 * h);
                let an = gplane.data[k];
                assert!(
                    (fd - an).abs() <= 1e-5 * (1.0 + an.abs()),
                    "plane {plane} pixel {k}: fd {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn z_step_from_rest_moves_the_diagonal_only() {
        let p = OgdenParams { a1: 1.0, a2: 50.0 };
        let d = Deformation::identity(4, 4);
        let z = MatrixField2D::zeros(4, 4);
        let out = update_z(&z, &d, &p, 5.0, 1e-3).unwrap();
        // drift at rest is -8 a1 on the diagonal, then the implicit division
        let expect = -8.0e-3 / (1.0 + 5.0e-3);
        for k in 0..16 {
            assert!((out.m11.data[k] - expect).abs() < 1e-12);
            assert!((out.m22.data[k] - expect).abs() < 1e-12);
            assert_eq!(out.m12.data[k], 0.0);
            assert_eq!(out.m21.data[k], 0.0);
        }
    }

    #[test]
    fn z_step_keeps_symmetry_for_potential_flows() {
        // displacements that are gradients of a potential have equal cross
        // derivatives, which must keep a symmetric z symmetric
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let psi = Field2D::from_fn(6, 6, |_, _| rng.gen_range(-0.1..0.1));
        let g = gradient(&psi);
        let d = Deformation { v: g };
        let mut z = MatrixField2D::zeros(6, 6);
        for k in 0..36 {
            let s = rng.gen_range(-0.05..0.05);
            z.m12.data[k] = s;
            z.m21.data[k] = s;
            z.m11.data[k] = rng.gen_range(-0.05..0.05);
            z.m22.data[k] = rng.gen_range(-0.05..0.05);
        }
        let out = update_z(&z, &d, &OgdenParams::default(), 5.0, 1e-3).unwrap();
        for k in 0..36 {
            assert!((out.m12.data[k] - out.m21.data[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn phi_step_is_stationary_without_forces() {
        let target = Field2D::from_fn(8, 8, |i, j| ((i * j) as f64 * 0.02).sin());
        let moving = target.clone();
        let d = Deformation::identity(8, 8);
        let z = MatrixField2D::zeros(8, 8);
        let out = update_phi(&d, &z, &moving, &target, 5.0, 1e5, 1e-3);
        assert!(out.v.max_len() < 1e-12);
    }

    #[test]
    fn inversion_of_translation_is_negation() {
        let mut d = Deformation::identity(16, 16);
        for a in &mut d.v.y.data {
            *a = 1.25;
        }
        for a in &mut d.v.x.data {
            *a = -0.75;
        }
        let (inv, rep) = invert_deformation(&d, 50, 1e-10);
        assert!(rep.converged);
        for i in 0..16 {
            for j in 0..16 {
                assert!((inv.v.y.at(i, j) + 1.25).abs() < 1e-9);
                assert!((inv.v.x.at(i, j) - 0.75).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn inversion_of_smooth_field_composes_to_identity() {
        use std::f64::consts::PI;
        let n = 32;
        let d = Deformation {
            v: VectorField2D::new(
                Field2D::from_fn(n, n, |i, j| {
                    1.5 * (PI * i as f64 / n as f64).sin() * (PI * j as f64 / n as f64).sin()
                }),
                Field2D::from_fn(n, n, |i, j| {
                    -1.0 * (PI * i as f64 / n as f64).sin() * (PI * j as f64 / n as f64).sin()
                }),
            ),
        };
        let (inv, rep) = invert_deformation(&d, 100, 1e-8);
        assert!(rep.converged, "residual {}", rep.residual);
        // phi(phi^-1(x)) should be x away from the boundary
        let comp = compose_deformations(&d, &inv);
        let mut worst = 0.0f64;
        for i in 2..n - 2 {
            for j in 2..n - 2 {
                let e = (comp.v.y.at(i, j).powi(2) + comp.v.x.at(i, j).powi(2)).sqrt();
                worst = worst.max(e);
            }
        }
        assert!(worst < 5e-3, "composition error {worst}");
    }

    #[test]
    fn inverse_jacobian_of_uniform_scaling() {
        let n = 12;
        let mut d = Deformation::identity(n, n);
        for i in 0..n {
            for j in 0..n {
                *d.v.y.at_mut(i, j) = 0.1 * i as f64;
                *d.v.x.at_mut(i, j) = 0.1 * j as f64;
            }
        }
        let (inv, _) = invert_deformation(&d, 200, 1e-10);
        let det = det_inverse_jacobian(&d, &inv);
        for i in 2..n - 4 {
            for j in 2..n - 4 {
                assert!(
                    (det.at(i, j) - 1.0 / 1.21).abs() < 2e-2,
                    "det at ({i},{j}) = {}",
                    det.at(i, j)
                );
            }
        }
    }

    #[test]
    fn regrid_fires_below_tolerance_and_resets() {
        let n = 8;
        let mut d = Deformation::identity(n, n);
        // compress one column strongly so a single pixel folds almost flat
        *d.v.y.at_mut(3, 3) = -0.98;
        let mut prev = Deformation::identity(n, n);
        *prev.v.y.at_mut(3, 3) = -0.5;
        let mut z = MatrixField2D::identity(n, n);
        let moving0 = Field2D::from_fn(n, n, |i, j| (i * j % 5) as f64);
        let mut moving = moving0.clone();
        let mut state = RegridState::new(0.05);
        assert!(determinant(&d.jacobian()).min() < 0.05);
        let fired = regrid_step(&mut state, &mut d, &mut z, &mut moving, &prev);
        assert!(fired);
        assert_eq!(state.count, 1);
        // the pre-step map is banked and applied; the crossing map is gone
        assert_eq!(state.saved_maps[0], prev);
        assert_eq!(moving.data, warp(&moving0, &prev).data);
        assert!(d.v.max_len() == 0.0);
        assert!(z.norm_sq() == 0.0);

        // well-conditioned map passes through untouched
        let mut d2 = Deformation::identity(n, n);
        let before = d2.clone();
        let mut z2 = MatrixField2D::zeros(n, n);
        let mut m2 = moving.clone();
        assert!(!regrid_step(&mut state, &mut d2, &mut z2, &mut m2, &before));
        assert_eq!(d2, before);
        assert_eq!(state.count, 1);
    }

    #[test]
    fn composition_of_integer_translations() {
        let n = 16;
        let f = Field2D::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 11) as f64);
        let mut a = Deformation::identity(n, n);
        for v in &mut a.v.y.data {
            *v = 1.0;
        }
        let mut b = Deformation::identity(n, n);
        for v in &mut b.v.x.data {
            *v = 1.0;
        }
        let ab = compose_deformations(&a, &b);
        let chained = warp(&warp(&f, &a), &b);
        let direct = warp(&f, &ab);
        for i in 0..n - 2 {
            for j in 0..n - 2 {
                assert_eq!(chained.at(i, j), direct.at(i, j));
            }
        }
    }

    #[test]
    fn total_map_reproduces_cumulative_rewarps() {
        let n = 24;
        let img = Field2D::from_fn(n, n, |i, j| {
            let dy = i as f64 - 11.0;
            let dx = j as f64 - 12.5;
            (-0.03 * (dy * dy + dx * dx)).exp()
        });
        let smooth = |ay: f64, ax: f64| {
            use std::f64::consts::PI;
            Deformation {
                v: VectorField2D::new(
                    Field2D::from_fn(n, n, |i, j| {
                        ay * (PI * i as f64 / n as f64).sin() * (PI * j as f64 / n as f64).sin()
                    }),
                    Field2D::from_fn(n, n, |i, j| {
                        ax * (2.0 * PI * i as f64 / n as f64).sin() * (PI * j as f64 / n as f64).sin()
                    }),
                ),
            }
        };
        let t1 = smooth(1.1, -0.7);
        let t2 = smooth(-0.6, 0.9);
        let current = smooth(0.4, 0.3);
        let state = RegridState { tol: 0.05, count: 2, saved_maps: vec![t1.clone(), t2.clone()] };
        let total = state.total_map(&current);
        let chained = warp(&warp(&warp(&img, &t1), &t2), &current);
        let direct = warp(&img, &total);
        let err = chained.sub(&direct).norm() / chained.norm();
        assert!(err < 2e-2, "relative rewarp error {err}");
    }

    #[test]
    fn registering_identical_images_stays_near_identity() {
        let n = 32;
        let img = Field2D::from_fn(n, n, |i, j| {
            let dy = (i as f64 - 15.0) / 6.0;
            let dx = (j as f64 - 16.0) / 8.0;
            (-(dy * dy + dx * dx)).exp()
        });
        let cfg = RegistrationConfig { sweeps_per_level: 40, ..Default::default() };
        let out = register_pair(&img, &img, &cfg);
        assert!(out.map.v.max_len() < 0.05, "drift {}", out.map.v.max_len());
        assert_eq!(out.regrids, 0);
    }

    #[test]
    fn recovers_a_small_translation() {
        let n = 32;
        let blob = |cy: f64, cx: f64| {
            Field2D::from_fn(n, n, |i, j| {
                let dy = (i as f64 - cy) / 4.0;
                let dx = (j as f64 - cx) / 4.0;
                (-(dy * dy + dx * dx)).exp()
            })
        };
        let fixed = blob(16.0, 16.0);
        // moving o phi must match fixed, so the blob sits shifted by the
        // displacement we expect to recover
        let moving = blob(18.0, 16.0);
        let cfg = RegistrationConfig { sweeps_per_level: 120, ..Default::default() };
        let out = register_pair(&fixed, &moving, &cfg);
        // near the blob centre the map should send x to x + (2, 0)
        let vy = out.map.v.y.at(16, 16);
        let vx = out.map.v.x.at(16, 16);
        assert!((vy - 2.0).abs() < 0.5, "vy {vy}");
        assert!(vx.abs() < 0.5, "vx {vx}");
    }
}
