//! Total-variation functionals and the two convex solvers built on them:
//! a dual-ascent proximal denoiser and a primal-dual solver for the
//! super-resolution data term.

use crate::grid::{
    divergence, gaussian_blur, gradient, Field2D, VectorField2D,
};

/// Dual variable of a TV problem: one vector per pixel.
pub type DualField = VectorField2D;

/// Edge-stopping weights in [floor, 1]. Ones mean plain TV; the floor keeps
/// the weighted seminorm equivalent to TV so existence arguments carry over.
#[derive(Debug, Clone)]
pub struct WeightField {
    pub g: Field2D,
    pub floor: f64,
}

impl WeightField {
    pub fn new(g: Field2D, floor: f64) -> Self {
        assert!(floor > 0.0 && floor < 1.0, "weight floor must lie in (0,1)");
        for &v in &g.data {
            assert!(
                v >= floor - 1e-12 && v <= 1.0 + 1e-12,
                "weight {v} outside [{floor}, 1]"
            );
        }
        WeightField { g, floor }
    }

    /// All-ones weights: plain TV.
    pub fn uniform(ny: usize, nx: usize) -> Self {
        WeightField { g: Field2D::constant(ny, nx, 1.0), floor: 0.01 }
    }
}

/// Isotropic total variation: sum of pointwise gradient lengths.
pub fn tv(f: &Field2D) -> f64 {
    let g = gradient(f);
    g.y.data
        .iter()
        .zip(&g.x.data)
        .map(|(a, b)| (a * a + b * b).sqrt())
        .sum()
}

/// Total variation weighted pointwise by `w`.
pub fn weighted_tv(f: &Field2D, w: &WeightField) -> f64 {
    assert!(f.same_shape(&w.g), "weighted_tv: shape mismatch");
    let g = gradient(f);
    let mut s = 0.0;
    for k in 0..f.len() {
        let gy = g.y.data[k];
        let gx = g.x.data[k];
        s += w.g.data[k] * (gy * gy + gx * gx).sqrt();
    }
    s
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];

fn sobel(f: &Field2D) -> (Field2D, Field2D) {
    let (ny, nx) = (f.ny as i64, f.nx as i64);
    let mut gx = Field2D::zeros(f.ny, f.nx);
    let mut gy = Field2D::zeros(f.ny, f.nx);
    for i in 0..ny {
        for j in 0..nx {
            let mut sx = 0.0;
            let mut sy = 0.0;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let v = f.at(
                        crate::grid::reflect_index(i + di, ny),
                        crate::grid::reflect_index(j + dj, nx),
                    );
                    sx += SOBEL_X[(di + 1) as usize][(dj + 1) as usize] * v;
                    // the y kernel is the transpose
                    sy += SOBEL_X[(dj + 1) as usize][(di + 1) as usize] * v;
                }
            }
            *gx.at_mut(i as usize, j as usize) = sx;
            *gy.at_mut(i as usize, j as usize) = sy;
        }
    }
    (gy, gx)
}

/// Edge-stopping weights from a Canny detection on `img`: Gaussian smoothing
/// of width `sigma`, Sobel gradients, non-maximum suppression, then double
/// thresholding with hysteresis at `low` and `high` fractions of the peak
/// magnitude. Edge pixels get the floor weight, everything else 1.
pub fn canny_weights(
    img: &Field2D,
    sigma: f64,
    low: f64,
    high: f64,
    floor: f64,
) -> WeightField {
    assert!(low > 0.0 && high > low && high < 1.0, "thresholds must satisfy 0 < low < high < 1");
    let (ny, nx) = (img.ny, img.nx);
    let smooth = gaussian_blur(img, sigma);
    let (gy, gx) = sobel(&smooth);
    let mut mag = Field2D::zeros(ny, nx);
    for k in 0..mag.len() {
        mag.data[k] = (gy.data[k] * gy.data[k] + gx.data[k] * gx.data[k]).sqrt();
    }
    let peak = mag.max();
    if peak <= 0.0 {
        return WeightField { g: Field2D::constant(ny, nx, 1.0), floor };
    }

    // non-maximum suppression along the quantised gradient direction
    let mut thin = Field2D::zeros(ny, nx);
    for i in 0..ny {
        for j in 0..nx {
            let m = mag.at(i, j);
            if m == 0.0 {
                continue;
            }
            let ang = gy.at(i, j).atan2(gx.at(i, j)).to_degrees();
            let ang = if ang < 0.0 { ang + 180.0 } else { ang };
            let (di, dj): (i64, i64) = if !(22.5..157.5).contains(&ang) {
                (0, 1)
            } else if ang < 67.5 {
                (1, 1)
            } else if ang < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let sample = |ii: i64, jj: i64| -> f64 {
                if ii < 0 || jj < 0 || ii >= ny as i64 || jj >= nx as i64 {
                    0.0
                } else {
                    mag.at(ii as usize, jj as usize)
                }
            };
            let a = sample(i as i64 + di, j as i64 + dj);
            let b = sample(i as i64 - di, j as i64 - dj);
            if m >= a && m >= b {
                *thin.at_mut(i, j) = m;
            }
        }
    }

    let high_t = high * peak;
    let low_t = low * peak;
    let mut label = vec![0u8; ny * nx]; // 0 none, 1 weak, 2 strong
    let mut stack = Vec::new();
    for k in 0..label.len() {
        if thin.data[k] >= high_t {
            label[k] = 2;
            stack.push(k);
        } else if thin.data[k] >= low_t {
            label[k] = 1;
        }
    }
    // hysteresis: weak pixels join if they touch a strong one
    while let Some(k) = stack.pop() {
        let (i, j) = (k / nx, k % nx);
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                let ii = i as i64 + di;
                let jj = j as i64 + dj;
                if ii < 0 || jj < 0 || ii >= ny as i64 || jj >= nx as i64 {
                    continue;
                }
                let kk = ii as usize * nx + jj as usize;
                if label[kk] == 1 {
                    label[kk] = 2;
                    stack.push(kk);
                }
            }
        }
    }

    let mut g = Field2D::constant(ny, nx, 1.0);
    for k in 0..label.len() {
        if label[k] == 2 {
            g.data[k] = floor;
        }
    }
    WeightField::new(g, floor)
}

/// Dual-ascent solve of min_f |f - h|^2 / (2 theta) + weighted TV of f.
///
/// The dual variable starts at zero; [`chambolle_prox_warm`] lets a caller
/// carry it across calls. Each projection step keeps |p| <= g exactly, so
/// the iterates are always dual feasible, and iteration stops early once the
/// largest pointwise dual update drops below 1e-6.
pub fn chambolle_prox(
    h: &Field2D,
    theta: f64,
    w: &WeightField,
    iters: usize,
    delta_t: f64,
) -> Field2D {
    let mut p = DualField::zeros(h.ny, h.nx);
    chambolle_prox_warm(h, theta, w, iters, delta_t, &mut p)
}

/// Same iteration as [`chambolle_prox`] but reusing a caller-held dual
/// variable, which makes repeated proxes of slowly moving inputs cheap.
pub fn chambolle_prox_warm(
    h: &Field2D,
    theta: f64,
    w: &WeightField,
    iters: usize,
    delta_t: f64,
    p: &mut DualField,
) -> Field2D {
    assert!(theta > 0.0 && delta_t > 0.0, "theta and the dual step must be positive");
    assert!(h.same_shape(&w.g), "chambolle_prox: shape mismatch");
    let inv_theta = 1.0 / theta;
    for _ in 0..iters {
        let mut s = divergence(p);
        for k in 0..s.len() {
            s.data[k] -= h.data[k] * inv_theta;
        }
        let gs = gradient(&s);
        let mut max_update = 0.0f64;
        for k in 0..s.len() {
            let gy = gs.y.data[k];
            let gx = gs.x.data[k];
            let norm = (gy * gy + gx * gx).sqrt();
            let denom = 1.0 + delta_t / w.g.data[k] * norm;
            let new_y = (p.y.data[k] + delta_t * gy) / denom;
            let new_x = (p.x.data[k] + delta_t * gx) / denom;
            let dy = new_y - p.y.data[k];
            let dx = new_x - p.x.data[k];
            max_update = max_update.max((dy * dy + dx * dx).sqrt());
            p.y.data[k] = new_y;
            p.x.data[k] = new_x;
        }
        if max_update < 1e-6 {
            break;
        }
    }
    let div_p = divergence(p);
    let mut f = h.clone();
    f.add_scaled(&div_p, -theta);
    f
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CgStats {
    pub iterations: usize,
    pub rel_residual: f64,
    pub converged: bool,
}

/// Plain conjugate gradients for a symmetric positive definite operator.
/// Residual tolerance is relative to |b|.
pub(crate) fn cg_solve(
    apply: impl Fn(&Field2D) -> Field2D,
    b: &Field2D,
    x0: Field2D,
    tol: f64,
    max_iter: usize,
) -> (Field2D, CgStats) {
    let b_norm = b.norm();
    if b_norm == 0.0 {
        let stats = CgStats { iterations: 0, rel_residual: 0.0, converged: true };
        return (Field2D::zeros(b.ny, b.nx), stats);
    }
    let mut x = x0;
    let mut r = b.sub(&apply(&x));
    let mut p = r.clone();
    let mut rs = r.norm_sq();
    let mut stats = CgStats { iterations: 0, rel_residual: rs.sqrt() / b_norm, converged: false };
    if stats.rel_residual <= tol {
        stats.converged = true;
        return (x, stats);
    }
    for it in 0..max_iter {
        let ap = apply(&p);
        let pap = p.dot(&ap);
        if pap <= 0.0 {
            break; // loss of positivity, bail with the current iterate
        }
        let alpha = rs / pap;
        x.add_scaled(&p, alpha);
        r.add_scaled(&ap, -alpha);
        let rs_new = r.norm_sq();
        stats.iterations = it + 1;
        stats.rel_residual = rs_new.sqrt() / b_norm;
        if stats.rel_residual <= tol {
            stats.converged = true;
            break;
        }
        let beta = rs_new / rs;
        rs = rs_new;
        let mut p_next = r.clone();
        p_next.add_scaled(&p, beta);
        p = p_next;
    }
    (x, stats)
}

/// Solver state for [`primal_dual_steps`]: the primal image and the TV dual.
#[derive(Debug, Clone)]
pub struct PrimalDualState {
    pub u: Field2D,
    pub y: DualField,
}

impl PrimalDualState {
    pub fn new(u: Field2D) -> Self {
        let y = DualField::zeros(u.ny, u.nx);
        PrimalDualState { u, y }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PrimalDualDiagnostics {
    pub steps: usize,
    pub cg_iterations: usize,
    pub worst_cg_residual: f64,
    pub cg_all_converged: bool,
}

/// Runs `steps` primal-dual iterations on
/// min_u (w/2) |C u - b|^2 + alpha TV(u).
///
/// Dual ascent projects onto the alpha ball; the primal update solves
/// (I + tau w C* C) u = u + tau div y + tau w C* b by conjugate gradients
/// warm-started at the current iterate, and the over-relaxed point 2u - u^-
/// feeds the next dual step. Step sizes must satisfy tau sigma |grad|^2 <= 1
/// with |grad|^2 = 8 for the gradient used here.
#[allow(clippy::too_many_arguments)]
pub fn primal_dual_steps(
    state: &mut PrimalDualState,
    data_weight: f64,
    b: &Field2D,
    alpha: f64,
    apply_c: &dyn Fn(&Field2D) -> Field2D,
    apply_c_adjoint: &dyn Fn(&Field2D) -> Field2D,
    steps: usize,
    tau: f64,
    sigma: f64,
    cg_tol: f64,
    cg_max: usize,
) -> PrimalDualDiagnostics {
    assert!(tau > 0.0 && sigma > 0.0, "step sizes must be positive");
    assert!(
        tau * sigma * 8.0 <= 1.0 + 1e-12,
        "step sizes violate the convergence bound tau*sigma*8 <= 1"
    );
    let ct_b = apply_c_adjoint(b);
    let mut diag = PrimalDualDiagnostics { cg_all_converged: true, ..Default::default() };
    let mut u_bar = state.u.clone();
    for _ in 0..steps {
        // dual ascent on the extrapolated point, then alpha-ball projection
        let gu = gradient(&u_bar);
        for k in 0..state.y.y.len() {
            let ty = state.y.y.data[k] + sigma * gu.y.data[k];
            let tx = state.y.x.data[k] + sigma * gu.x.data[k];
            let norm = (ty * ty + tx * tx).sqrt();
            let scale = if alpha > 0.0 {
                1.0 / (norm / alpha).max(1.0)
            } else {
                0.0
            };
            state.y.y.data[k] = ty * scale;
            state.y.x.data[k] = tx * scale;
        }

        // primal step: proximal solve of the quadratic data term
        let mut rhs = state.u.clone();
        rhs.add_scaled(&divergence(&state.y), tau);
        rhs.add_scaled(&ct_b, tau * data_weight);
        let u_old = state.u.clone();
        let apply = |v: &Field2D| {
            let mut out = apply_c_adjoint(&apply_c(v));
            out.scale(tau * data_weight);
            out.add_scaled(v, 1.0);
            out
        };
        let (u_new, stats) = cg_solve(apply, &rhs, state.u.clone(), cg_tol, cg_max);
        diag.cg_iterations += stats.iterations;
        diag.worst_cg_residual = diag.worst_cg_residual.max(stats.rel_residual);
        diag.cg_all_converged &= stats.converged;
        state.u = u_new;

        u_bar = state.u.clone();
        u_bar.scale(2.0);
        u_bar.add_scaled(&u_old, -1.0);
        diag.steps += 1;
    }
    diag
}

/// Cold-start wrapper around [`primal_dual_steps`]: starts from the adjoint
/// image rescaled to the data's intensity scale and runs a fixed number of
/// iterations.
#[allow(clippy::too_many_arguments)]
pub fn primal_dual_tv(
    data_weight: f64,
    b: &Field2D,
    alpha: f64,
    apply_c: &dyn Fn(&Field2D) -> Field2D,
    apply_c_adjoint: &dyn Fn(&Field2D) -> Field2D,
    iters: usize,
    tau: f64,
    sigma: f64,
    cg_tol: f64,
    cg_max: usize,
) -> (Field2D, PrimalDualDiagnostics) {
    let mut u0 = apply_c_adjoint(b);
    let cb = apply_c(&u0);
    let scale = if cb.norm() > 0.0 { b.norm() / cb.norm() } else { 1.0 };
    u0.scale(scale);
    let mut state = PrimalDualState::new(u0);
    let diag = primal_dual_steps(
        &mut state, data_weight, b, alpha, apply_c, apply_c_adjoint, iters, tau, sigma, cg_tol,
        cg_max,
    );
    (state.u, diag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tv_hand_case() {
        let f = Field2D::from_vec(2, 2, vec![0.0, 1.0, 0.0, 1.0]);
        assert!((tv(&f) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn weighted_tv_scales_with_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Field2D::from_fn(8, 8, |_, _| rng.gen_range(0.0..1.0));
        let ones = WeightField::uniform(8, 8);
        assert!((weighted_tv(&f, &ones) - tv(&f)).abs() < 1e-12);
        let half = WeightField::new(Field2D::constant(8, 8, 0.5), 0.3);
        assert!((weighted_tv(&f, &half) - 0.5 * tv(&f)).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "weight floor")]
    fn weight_floor_must_be_fractional() {
        WeightField::new(Field2D::constant(2, 2, 1.0), 1.5);
    }

    #[test]
    fn canny_of_constant_is_all_ones() {
        let w = canny_weights(&Field2D::constant(16, 16, 0.7), 1.5, 0.1, 0.2, 0.01);
        assert!(w.g.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn canny_marks_a_step_edge() {
        let img = Field2D::from_fn(32, 32, |_, j| if j < 16 { 0.0 } else { 1.0 });
        let w = canny_weights(&img, 1.0, 0.1, 0.2, 0.01);
        // some pixel on the edge columns carries the floor weight
        let edge_cols = 14..18usize;
        let mut found = false;
        for i in 0..32 {
            for j in edge_cols.clone() {
                if w.g.at(i, j) == 0.01 {
                    found = true;
                }
            }
        }
        assert!(found, "no edge response found");
        // far from the edge everything stays 1
        for i in 0..32 {
            for j in 0..8 {
                assert_eq!(w.g.at(i, j), 1.0);
            }
            for j in 24..32 {
                assert_eq!(w.g.at(i, j), 1.0);
            }
        }
        for &v in &w.g.data {
            assert!(v == 1.0 || v == 0.01);
        }
    }

    #[test]
    fn prox_of_a_constant_is_the_constant() {
        let h = Field2D::constant(12, 12, 3.7);
        let w = WeightField::uniform(12, 12);
        let f = chambolle_prox(&h, 5.0, &w, 200, 0.125);
        assert!(f.sub(&h).norm() < 1e-12);
    }

    #[test]
    fn prox_keeps_dual_feasible_and_descends() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = Field2D::from_fn(16, 16, |i, j| {
            let base = if (i / 4 + j / 4) % 2 == 0 { 1.0 } else { 0.0 };
            base + rng.gen_range(-0.1..0.1)
        });
        let w = WeightField::uniform(16, 16);
        let theta = 0.3;
        let mut p = DualField::zeros(16, 16);
        let mut prev = f64::INFINITY;
        for _ in 0..20 {
            let f = chambolle_prox_warm(&h, theta, &w, 10, 0.125, &mut p);
            // dual feasibility is maintained exactly
            for k in 0..p.y.len() {
                let n = (p.y.data[k].powi(2) + p.x.data[k].powi(2)).sqrt();
                assert!(n <= w.g.data[k] + 1e-12);
            }
            let energy = f.sub(&h).norm_sq() / (2.0 * theta) + weighted_tv(&f, &w);
            assert!(energy <= prev + 1e-10 * (1.0 + prev.abs()), "{energy} after {prev}");
            prev = energy;
        }
    }

    #[test]
    fn strong_denoising_flattens_a_noisy_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = Field2D::from_fn(16, 16, |_, _| 1.0 + rng.gen_range(-0.05..0.05));
        let w = WeightField::uniform(16, 16);
        let f = chambolle_prox(&h, 50.0, &w, 500, 0.125);
        // the prox with huge theta approaches the mean
        let spread = f.max() - f.min();
        assert!(spread < 0.01, "spread {spread}");
        assert!((f.mean() - h.mean()).abs() < 1e-6);
    }

    #[test]
    fn cg_solves_identity_like_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = Field2D::from_fn(8, 8, |_, _| rng.gen_range(-1.0..1.0));
        // A = I + 0.5 Lap^T Lap is SPD
        let apply = |v: &Field2D| {
            let l = crate::grid::laplacian(v);
            let ll = crate::grid::laplacian(&l);
            let mut out = v.clone();
            out.add_scaled(&ll, 0.5);
            out
        };
        let (x, stats) = cg_solve(apply, &b, Field2D::zeros(8, 8), 1e-12, 200);
        assert!(stats.converged);
        let r = b.sub(&apply(&x));
        assert!(r.norm() <= 1e-11 * b.norm());
    }

    #[test]
    fn zero_alpha_reproduces_the_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = Field2D::from_fn(12, 12, |_, _| rng.gen_range(0.0..1.0));
        let id = |v: &Field2D| v.clone();
        let (u, diag) = primal_dual_tv(
            1.0, &b, 0.0, &id, &id, 200, 0.35355339, 0.35355339, 1e-10, 200,
        );
        assert!(diag.cg_all_converged);
        assert!(u.sub(&b).norm() <= 1e-6 * b.norm());
    }

    #[test]
    fn primal_dual_agrees_with_the_denoising_prox() {
        // with C = Id the two solvers minimise the same objective
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = Field2D::from_fn(16, 16, |i, _| if i < 8 { 0.2 } else { 0.8 })
            .add(&Field2D::from_fn(16, 16, |_, _| rng.gen_range(-0.05..0.05)));
        let w_data = 4.0;
        let alpha = 0.1;
        let id = |v: &Field2D| v.clone();
        let (u, _) = primal_dual_tv(
            w_data, &b, alpha, &id, &id, 800, 0.35355339, 0.35355339, 1e-10, 400,
        );
        let theta = alpha / w_data;
        let ones = WeightField::uniform(16, 16);
        let f = chambolle_prox(&b, theta, &ones, 4000, 0.125);
        let obj = |v: &Field2D| 0.5 * w_data * v.sub(&b).norm_sq() + alpha * tv(v);
        let (eu, ef) = (obj(&u), obj(&f));
        assert!(
            (eu - ef).abs() <= 2e-3 * ef.abs().max(1e-12),
            "objectives differ: {eu} vs {ef}"
        );
    }
}
