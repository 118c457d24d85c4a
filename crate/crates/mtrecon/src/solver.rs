//! Alternating minimisation over the full joint model, plus the sequential
//! reconstruct-register-superresolve baseline it is measured against.
//!
//! One outer sweep touches every unknown once: per frame the elastic
//! variables (z, phi) take one accepted flow step, the frame image h is
//! re-solved from its linear system, and the denoised companion f is
//! refreshed through the weighted-TV prox; the shared image u then takes one
//! primal-dual step against the mean of the aligned frames. Every sub-step
//! is accepted only if its own share of the objective does not grow, which
//! is what keeps the energy trace non-increasing outside regridding events.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::grid::{
    bilinear, determinant, divergence, fft2_real, gaussian_blur, gradient, ifft2, prolong_to,
    warp, ComplexField2D, Field2D, MatrixField2D,
};
use crate::operators::{
    apply_c, apply_c_adjoint, apply_f, apply_f_adjoint, SystemOperatorSpec,
};
use crate::phantom::{Dataset, Frame};
use crate::registration::{
    grad_planes, invert_deformation, ogden_energy, register_pair, update_phi, update_z,
    Deformation, OgdenParams, RegistrationConfig, RegridState,
};
use crate::registration::det_inverse_jacobian;
use crate::tvsolvers::{
    canny_weights, cg_solve, chambolle_prox_warm, primal_dual_steps, primal_dual_tv, tv,
    weighted_tv, DualField, PrimalDualState, WeightField,
};

/// How the h sub-problem's linear system is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HMode {
    /// Conjugate gradients on the exact system; the spatially varying
    /// determinant weight is kept as is.
    Cg,
    /// The determinant weight is frozen at its spatial mean, which makes the
    /// system diagonal in k-space and the update a single transform pair.
    Diagonal,
}

/// Every knob of the joint solve. The numbered weights follow the model
/// terms; the rest is discretisation plumbing.
#[derive(Debug, Clone)]
pub struct SolverParams {
    pub a1: f64,
    pub a2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub theta: f64,
    /// Blur width of the system operator, also used for the edge detector.
    pub sigma: f64,
    pub levels_k: usize,
    /// Inner iteration budget (primal-dual and Chambolle loops).
    pub iters_nn: usize,
    pub alpha: f64,
    pub dt: f64,
    pub dt_floor: f64,
    /// Largest displacement change one accepted flow step may make.
    pub max_step_px: f64,
    pub regrid_tol: f64,
    /// Scale on the weighted-TV term of the f sub-problem; 1 is the model
    /// as written.
    pub delta_weight: f64,
    pub chambolle_step: f64,
    pub pd_tau: f64,
    pub pd_sigma: f64,
    pub cg_tol: f64,
    pub cg_max: usize,
    pub inv_max_iter: usize,
    pub inv_tol_px: f64,
    pub outer_iters: usize,
    /// How many times the finest level runs. Passes after the first re-seed
    /// the shared image from the data aligned by the previous pass's maps,
    /// which is how map refinement reaches u at all: within a pass the data
    /// weight is dwarfed by the coupling weight.
    pub fine_passes: usize,
    pub canny_low: f64,
    pub canny_high: f64,
    pub floor_c: f64,
    pub h_mode: HMode,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            a1: 1.0,
            a2: 50.0,
            gamma1: 5.0,
            gamma2: 1.0e5,
            gamma3: 15.0,
            theta: 5.0,
            sigma: 1.5,
            levels_k: 2,
            iters_nn: 500,
            alpha: 0.01,
            dt: 1.0e-3,
            dt_floor: 1.0e-6,
            max_step_px: 0.5,
            regrid_tol: 0.05,
            delta_weight: 1.0,
            chambolle_step: 0.125,
            pd_tau: std::f64::consts::FRAC_1_SQRT_2 * 0.5,
            pd_sigma: std::f64::consts::FRAC_1_SQRT_2 * 0.5,
            cg_tol: 1.0e-8,
            cg_max: 500,
            inv_max_iter: 50,
            inv_tol_px: 1.0e-3,
            outer_iters: 200,
            fine_passes: 2,
            canny_low: 0.1,
            canny_high: 0.2,
            floor_c: 0.01,
            h_mode: HMode::Cg,
        }
    }
}

impl SolverParams {
    /// Checks every invariant and names the offending field on failure.
    pub fn validate(&self) -> Result<(), String> {
        fn pos(name: &str, v: f64) -> Result<(), String> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(format!("{name} must be strictly positive, got {v}"))
            }
        }
        pos("a1", self.a1)?;
        pos("a2", self.a2)?;
        pos("gamma1", self.gamma1)?;
        pos("gamma2", self.gamma2)?;
        pos("gamma3", self.gamma3)?;
        pos("theta", self.theta)?;
        pos("sigma", self.sigma)?;
        pos("alpha", self.alpha)?;
        pos("dt", self.dt)?;
        pos("dt_floor", self.dt_floor)?;
        pos("max_step_px", self.max_step_px)?;
        pos("regrid_tol", self.regrid_tol)?;
        pos("delta_weight", self.delta_weight)?;
        pos("chambolle_step", self.chambolle_step)?;
        pos("pd_tau", self.pd_tau)?;
        pos("pd_sigma", self.pd_sigma)?;
        pos("cg_tol", self.cg_tol)?;
        pos("inv_tol_px", self.inv_tol_px)?;
        pos("canny_low", self.canny_low)?;
        pos("canny_high", self.canny_high)?;
        pos("floor_c", self.floor_c)?;
        if self.levels_k == 0 {
            return Err("levels_k must be at least 1".into());
        }
        if self.iters_nn == 0 {
            return Err("iters_nn must be at least 1".into());
        }
        if self.cg_max == 0 {
            return Err("cg_max must be at least 1".into());
        }
        if self.inv_max_iter == 0 {
            return Err("inv_max_iter must be at least 1".into());
        }
        if self.outer_iters == 0 {
            return Err("outer_iters must be at least 1".into());
        }
        if self.fine_passes == 0 {
            return Err("fine_passes must be at least 1".into());
        }
        if self.dt_floor > self.dt {
            return Err("dt_floor must not exceed dt".into());
        }
        if self.pd_tau * self.pd_sigma * 8.0 > 1.0 + 1e-12 {
            return Err(format!(
                "pd_tau * pd_sigma * 8 must not exceed 1, got {}",
                self.pd_tau * self.pd_sigma * 8.0
            ));
        }
        if self.chambolle_step > 0.125 + 1e-12 {
            return Err("chambolle_step must not exceed 1/8".into());
        }
        if self.canny_low >= self.canny_high || self.canny_high >= 1.0 {
            return Err("canny_low < canny_high < 1 is required (canny_low, canny_high)".into());
        }
        if self.floor_c >= 1.0 {
            return Err("floor_c must lie in (0,1)".into());
        }
        Ok(())
    }

    fn ogden(&self) -> OgdenParams {
        OgdenParams { a1: self.a1, a2: self.a2 }
    }
}

/// Value of each model term, frame terms averaged over the sequence.
#[derive(Debug, Clone, Copy, Default)]
pub struct EnergyBreakdown {
    pub ogden: f64,
    pub z_penalty: f64,
    pub data: f64,
    pub tv_u: f64,
    pub coupling: f64,
    pub f_penalty: f64,
    pub wtv_f: f64,
    pub total: f64,
}

/// Per-frame unknowns and their solver-side companions.
#[derive(Debug, Clone)]
pub struct FrameState {
    pub phi: Deformation,
    pub phi_inv: Deformation,
    /// det of the inverse map's Jacobian; the coupling weight as printed.
    pub det_inv: Field2D,
    pub z: MatrixField2D,
    pub h: Field2D,
    pub f: Field2D,
    pub g: WeightField,
    pub regrid: RegridState,
    /// Adaptive flow step, shared by the z and phi updates of this frame.
    pub dt: f64,
    pub rejected_steps: usize,
    pub cg_fallbacks: usize,
    dual_f: DualField,
}

/// Everything the joint solve evolves.
#[derive(Debug, Clone)]
pub struct JointState {
    pub u: Field2D,
    pub frames: Vec<FrameState>,
    pub energy_trace: Vec<f64>,
    pub rejected_u_steps: usize,
    u_dual: DualField,
}

fn plus_identity(z: &MatrixField2D) -> MatrixField2D {
    let mut f = z.clone();
    for k in 0..f.m11.len() {
        f.m11.data[k] += 1.0;
        f.m22.data[k] += 1.0;
    }
    f
}

// one super-resolving primal-dual step seeds u from an aligned mean frame
fn pd_init_u(b: &Field2D, params: &SolverParams, op: &SystemOperatorSpec) -> Field2D {
    let ac = |v: &Field2D| apply_c(v, op);
    let act = |v: &Field2D| apply_c_adjoint(v, op);
    let (u, _) = primal_dual_tv(
        params.gamma2,
        b,
        params.alpha,
        &ac,
        &act,
        1,
        params.pd_tau,
        params.pd_sigma,
        params.cg_tol,
        params.cg_max,
    );
    u
}

/// Zero-filled frames, identity maps, edge weights from the zero-filled
/// frames, and one super-resolving primal-dual step on the mean zero-filled
/// frame as the first u. The last part matters: the coupling weight
/// dominates the data weight, so the first h solve pulls every frame toward
/// the downsampled u, and a u that does not already reproduce the measured
/// frames would erase them.
pub fn init_state(dataset: &Dataset, params: &SolverParams) -> JointState {
    assert!(!dataset.frames.is_empty(), "dataset has no frames");
    let (lny, lnx) = (dataset.lr_ny(), dataset.lr_nx());
    let tinv = 1.0 / dataset.num_frames() as f64;
    let mut mean_h = Field2D::zeros(lny, lnx);
    let mut frames = Vec::with_capacity(dataset.num_frames());
    for fr in &dataset.frames {
        let h = apply_f_adjoint(&fr.x, &fr.mask);
        mean_h.add_scaled(&h, tinv);
        let g = canny_weights(&h, params.sigma, params.canny_low, params.canny_high, params.floor_c);
        frames.push(FrameState {
            phi: Deformation::identity(lny, lnx),
            phi_inv: Deformation::identity(lny, lnx),
            det_inv: Field2D::constant(lny, lnx, 1.0),
            z: MatrixField2D::zeros(lny, lnx),
            f: h.clone(),
            h,
            g,
            regrid: RegridState::new(params.regrid_tol),
            dt: params.dt,
            rejected_steps: 0,
            cg_fallbacks: 0,
            dual_f: DualField::zeros(lny, lnx),
        });
    }
    let op = SystemOperatorSpec::new(params.sigma, dataset.d);
    let u = pd_init_u(&mean_h, params, &op);
    JointState {
        u_dual: DualField::zeros(dataset.hr_ny, dataset.hr_nx),
        u,
        frames,
        energy_trace: Vec::new(),
        rejected_u_steps: 0,
    }
}

/// Evaluates the full objective term by term, exactly as the model is
/// written: frame terms carry the 1/T average and the coupling residual is
/// weighted by the determinant of the inverse map.
pub fn objective_value(state: &JointState, dataset: &Dataset, params: &SolverParams) -> EnergyBreakdown {
    let op = SystemOperatorSpec::new(params.sigma, dataset.d);
    let c = apply_c(&state.u, &op);
    let tinv = 1.0 / dataset.num_frames() as f64;
    let ogp = params.ogden();
    let mut b = EnergyBreakdown::default();
    for (fs, fr) in state.frames.iter().zip(&dataset.frames) {
        b.ogden += tinv * ogden_energy(&plus_identity(&fs.z), &ogp);
        b.z_penalty += tinv * 0.5 * params.gamma1 * fs.z.sub(&grad_planes(&fs.phi.v)).norm_sq();
        b.data += tinv * 0.5 * params.gamma3 * apply_f(&fs.h, &fr.mask).sub(&fr.x).norm_sq();
        let target = warp(&c, &fs.phi_inv);
        let mut cp = 0.0;
        for k in 0..fs.h.len() {
            let r = fs.h.data[k] - target.data[k];
            cp += fs.det_inv.data[k] * r * r;
        }
        b.coupling += tinv * 0.5 * params.gamma2 * cp;
        b.f_penalty += tinv * 0.5 / params.theta * fs.f.sub(&fs.h).norm_sq();
        b.wtv_f += tinv * params.delta_weight * weighted_tv(&fs.f, &fs.g);
    }
    b.tv_u = params.alpha * tv(&state.u);
    b.total = b.ogden + b.z_penalty + b.data + b.tv_u + b.coupling + b.f_penalty + b.wtv_f;
    b
}

/// Outcome of one h solve.
#[derive(Debug, Clone, Copy)]
pub struct HUpdateStats {
    pub cg_iterations: usize,
    pub rel_residual: f64,
    /// True when conjugate gradients failed to converge and the
    /// mean-determinant closed form stepped in.
    pub fallback: bool,
}

// the h-dependent share of the objective; used to arbitrate the CG fallback
fn h_quadratic(h: &Field2D, target: &Field2D, fs: &FrameState, fr: &Frame, params: &SolverParams) -> f64 {
    let data = apply_f(h, &fr.mask).sub(&fr.x).norm_sq();
    let mut cp = 0.0;
    for k in 0..h.len() {
        let r = h.data[k] - target.data[k];
        cp += fs.det_inv.data[k] * r * r;
    }
    0.5 * params.gamma3 * data + 0.5 * params.gamma2 * cp
        + 0.5 / params.theta * fs.f.sub(h).norm_sq()
}

fn diagonal_h(target: &Field2D, fs: &FrameState, fr: &Frame, params: &SolverParams) -> Field2D {
    let dbar = fs.det_inv.mean();
    let mut num = target.scaled(params.gamma2 * dbar);
    num.add_scaled(&fs.f, 1.0 / params.theta);
    let mut khat = fft2_real(&num);
    for i in 0..khat.ny {
        for j in 0..khat.nx {
            let idx = i * khat.nx + j;
            let met = if fr.mask.kept(i, j) { params.gamma3 } else { 0.0 };
            let v = khat.data[idx] + fr.x.data[idx] * params.gamma3;
            khat.data[idx] = v / (params.gamma2 * dbar + 1.0 / params.theta + met);
        }
    }
    ifft2(&khat).re()
}

fn solve_h(c_lr: &Field2D, fs: &FrameState, fr: &Frame, params: &SolverParams) -> (Field2D, HUpdateStats) {
    let target = warp(c_lr, &fs.phi_inv);
    match params.h_mode {
        HMode::Diagonal => (
            diagonal_h(&target, fs, fr, params),
            HUpdateStats { cg_iterations: 0, rel_residual: 0.0, fallback: false },
        ),
        HMode::Cg => {
            let apply = |h: &Field2D| {
                let mut out = apply_f_adjoint(&apply_f(h, &fr.mask), &fr.mask);
                out.scale(params.gamma3);
                for k in 0..out.len() {
                    out.data[k] +=
                        (params.gamma2 * fs.det_inv.data[k] + 1.0 / params.theta) * h.data[k];
                }
                out
            };
            let mut rhs = apply_f_adjoint(&fr.x, &fr.mask);
            rhs.scale(params.gamma3);
            for k in 0..rhs.len() {
                rhs.data[k] += params.gamma2 * fs.det_inv.data[k] * target.data[k]
                    + fs.f.data[k] / params.theta;
            }
            let (h, stats) = cg_solve(apply, &rhs, fs.h.clone(), params.cg_tol, params.cg_max);
            if stats.converged {
                let s = HUpdateStats {
                    cg_iterations: stats.iterations,
                    rel_residual: stats.rel_residual,
                    fallback: false,
                };
                return (h, s);
            }
            // keep whichever candidate leaves the objective lowest so a bad
            // solve can never push the energy up
            let hd = diagonal_h(&target, fs, fr, params);
            let mut best = fs.h.clone();
            let mut best_q = h_quadratic(&best, &target, fs, fr, params);
            for cand in [h, hd] {
                let q = h_quadratic(&cand, &target, fs, fr, params);
                if q < best_q {
                    best = cand;
                    best_q = q;
                }
            }
            let s = HUpdateStats {
                cg_iterations: stats.iterations,
                rel_residual: stats.rel_residual,
                fallback: true,
            };
            (best, s)
        }
    }
}

/// Re-solves frame `t`'s image from the current maps, the shared image and
/// the data, in the configured mode.
pub fn update_h(state: &JointState, dataset: &Dataset, t: usize, params: &SolverParams) -> (Field2D, HUpdateStats) {
    let op = SystemOperatorSpec::new(params.sigma, dataset.d);
    let c = apply_c(&state.u, &op);
    solve_h(&c, &state.frames[t], &dataset.frames[t], params)
}

// the (z, phi)-dependent share of the objective for one frame, with the
// coupling in its printed inverse-map form
fn zphi_energy(
    z: &MatrixField2D,
    phi: &Deformation,
    phi_inv: &Deformation,
    det_inv: &Field2D,
    h: &Field2D,
    c_lr: &Field2D,
    params: &SolverParams,
) -> f64 {
    let og = ogden_energy(&plus_identity(z), &params.ogden());
    if !og.is_finite() {
        return f64::INFINITY;
    }
    let pen = 0.5 * params.gamma1 * z.sub(&grad_planes(&phi.v)).norm_sq();
    let target = warp(c_lr, phi_inv);
    let mut cp = 0.0;
    for k in 0..h.len() {
        let r = h.data[k] - target.data[k];
        cp += det_inv.data[k] * r * r;
    }
    og + pen + 0.5 * params.gamma2 * cp
}

/// One accepted (or floored) flow step on a frame's elastic variables. A
/// candidate must keep the map unfolded, stay inside the trust step, and not
/// raise the frame's share of the objective; otherwise the step size halves
/// and the step is retried down to the floor.
fn joint_frame_step(fs: &mut FrameState, c_lr: &Field2D, params: &SolverParams) {
    let e0 = zphi_energy(&fs.z, &fs.phi, &fs.phi_inv, &fs.det_inv, &fs.h, c_lr, params);
    loop {
        let zc = match update_z(&fs.z, &fs.phi, &params.ogden(), params.gamma1, fs.dt) {
            Ok(zc) => zc,
            Err(_) => return, // current z is always admissible; defensive only
        };
        let pc = update_phi(&fs.phi, &zc, &fs.h, c_lr, params.gamma1, params.gamma2, fs.dt);
        let small_enough = pc.v.sub(&fs.phi.v).max_len() <= params.max_step_px;
        if small_enough && determinant(&pc.jacobian()).min() > 0.0 {
            let (pinv, _) = invert_deformation(&pc, params.inv_max_iter, params.inv_tol_px);
            let dinv = det_inverse_jacobian(&pc, &pinv);
            let e = zphi_energy(&zc, &pc, &pinv, &dinv, &fs.h, c_lr, params);
            if e.is_finite() && e <= e0 {
                fs.z = zc;
                fs.phi = pc;
                fs.phi_inv = pinv;
                fs.det_inv = dinv;
                fs.dt = (fs.dt * 1.5).min(params.dt);
                return;
            }
        }
        fs.rejected_steps += 1;
        fs.dt *= 0.5;
        if fs.dt < params.dt_floor {
            fs.dt = params.dt_floor;
            return;
        }
    }
}

/// Retires a residual map that has drifted under the folding tolerance: the
/// frame images follow the map, the map joins the bank, and the flow
/// restarts from identity. Because step acceptance keeps determinants
/// positive, the retired map itself is still invertible, so the hand-off is
/// an exact change of variables for the coupling term. The data term keeps
/// its original coordinates, which is the one approximation regridding
/// makes; the energy trace is allowed to jump on such sweeps.
fn regrid_frame(fs: &mut FrameState, params: &SolverParams) -> bool {
    if fs.phi.min_det() >= fs.regrid.tol {
        return false;
    }
    let banked = fs.phi.clone();
    fs.h = warp(&fs.h, &banked);
    fs.f = warp(&fs.f, &banked);
    fs.g = WeightField::new(warp(&fs.g.g, &banked), fs.g.floor);
    let (ny, nx) = (banked.ny(), banked.nx());
    fs.regrid.saved_maps.push(banked);
    fs.regrid.count += 1;
    fs.phi = Deformation::identity(ny, nx);
    fs.phi_inv = Deformation::identity(ny, nx);
    fs.det_inv = Field2D::constant(ny, nx, 1.0);
    fs.z = MatrixField2D::zeros(ny, nx);
    fs.dual_f = DualField::zeros(ny, nx);
    fs.dt = params.dt;
    true
}

// the f-dependent share of the objective for one frame
fn f_energy(f: &Field2D, fs: &FrameState, params: &SolverParams) -> f64 {
    0.5 / params.theta * f.sub(&fs.h).norm_sq()
        + params.delta_weight * weighted_tv(f, &fs.g)
}

/// Weighted-TV prox of the frame image, kept only when it does not raise the
/// frame's share of the objective. The TV scale folds into the prox
/// parameter, so the dual iteration itself never sees it.
fn update_f(fs: &mut FrameState, params: &SolverParams) {
    let theta_eff = params.theta * params.delta_weight;
    let cand = chambolle_prox_warm(
        &fs.h,
        theta_eff,
        &fs.g,
        params.iters_nn,
        params.chambolle_step,
        &mut fs.dual_f,
    );
    if f_energy(&cand, fs, params) <= f_energy(&fs.f, fs, params) {
        fs.f = cand;
    } else {
        fs.rejected_steps += 1;
    }
}

// the u-dependent share of the objective, with the coupling in its printed
// inverse-map form
fn u_partial(u: &Field2D, frames: &[FrameState], tinv: f64, params: &SolverParams, op: &SystemOperatorSpec) -> f64 {
    let c = apply_c(u, op);
    let mut acc = params.alpha * tv(u);
    for fs in frames {
        let target = warp(&c, &fs.phi_inv);
        let mut cp = 0.0;
        for k in 0..fs.h.len() {
            let r = fs.h.data[k] - target.data[k];
            cp += fs.det_inv.data[k] * r * r;
        }
        acc += tinv * 0.5 * params.gamma2 * cp;
    }
    acc
}

/// One primal-dual step on the shared image against the mean of the aligned
/// frames. The dual always advances; the primal candidate is backtracked
/// along its segment until the objective share does not grow, because a raw
/// primal-dual step is not monotone and the step target is the forward-warp
/// surrogate rather than the inverse-map quadrature the objective uses.
fn update_u(state: &mut JointState, dataset: &Dataset, params: &SolverParams, op: &SystemOperatorSpec) {
    let tinv = 1.0 / dataset.num_frames() as f64;
    let (lny, lnx) = (dataset.lr_ny(), dataset.lr_nx());
    let mut b = Field2D::zeros(lny, lnx);
    for fs in &state.frames {
        b.add_scaled(&warp(&fs.h, &fs.phi), tinv);
    }
    let before = u_partial(&state.u, &state.frames, tinv, params, op);
    let mut pd = PrimalDualState { u: state.u.clone(), y: state.u_dual.clone() };
    let ac = |v: &Field2D| apply_c(v, op);
    let act = |v: &Field2D| apply_c_adjoint(v, op);
    primal_dual_steps(
        &mut pd,
        params.gamma2,
        &b,
        params.alpha,
        &ac,
        &act,
        1,
        params.pd_tau,
        params.pd_sigma,
        params.cg_tol,
        params.cg_max,
    );
    state.u_dual = pd.y;
    let dir = pd.u.sub(&state.u);
    let mut s = 1.0;
    for _ in 0..6 {
        let mut cand = state.u.clone();
        cand.add_scaled(&dir, s);
        if u_partial(&cand, &state.frames, tinv, params, op) <= before {
            state.u = cand;
            return;
        }
        s *= 0.5;
    }
    state.rejected_u_steps += 1;
}

/// What one outer sweep did.
#[derive(Debug, Clone, Copy)]
pub struct SweepReport {
    pub breakdown: EnergyBreakdown,
    pub regrids: usize,
}

/// One sweep over all sub-problems: per frame (concurrently) the regrid
/// check, one elastic flow step, the h solve and the f prox; then the shared
/// u step and the objective snapshot.
pub fn outer_iterate(state: &mut JointState, dataset: &Dataset, params: &SolverParams) -> SweepReport {
    let op = SystemOperatorSpec::new(params.sigma, dataset.d);
    let c = apply_c(&state.u, &op);
    let before: usize = state.frames.iter().map(|f| f.regrid.count).sum();
    state
        .frames
        .par_iter_mut()
        .zip(dataset.frames.par_iter())
        .for_each(|(fs, fr)| {
            regrid_frame(fs, params);
            joint_frame_step(fs, &c, params);
            let (h, stats) = solve_h(&c, fs, fr, params);
            if stats.fallback {
                fs.cg_fallbacks += 1;
            }
            fs.h = h;
            update_f(fs, params);
        });
    let regrids = state.frames.iter().map(|f| f.regrid.count).sum::<usize>() - before;
    update_u(state, dataset, params, &op);
    let breakdown = objective_value(state, dataset, params);
    state.energy_trace.push(breakdown.total);
    SweepReport { breakdown, regrids }
}

// coarse row/column index -> fine index carrying the same signed frequency
fn coarse_to_fine_index(i: usize, cn: usize, n: usize) -> usize {
    let s = if i <= cn / 2 { i as isize } else { i as isize - cn as isize };
    s.rem_euclid(n as isize) as usize
}

/// Halves the frame grid by keeping the central frequency band. Spectra are
/// scaled to preserve image intensities under the unitary transforms; the
/// restricted mask keeps exactly the surviving rows. Ground truth does not
/// carry over.
fn restrict_dataset(ds: &Dataset) -> Dataset {
    let (lny, lnx) = (ds.lr_ny(), ds.lr_nx());
    assert!(lny % 2 == 0 && lnx % 2 == 0, "frame dims must be even to restrict");
    let (cny, cnx) = (lny / 2, lnx / 2);
    let scale = ((cny * cnx) as f64 / (lny * lnx) as f64).sqrt();
    let frames = ds
        .frames
        .iter()
        .map(|fr| {
            let mask = fr.mask.restrict_rows();
            let mut x = ComplexField2D::zeros(cny, cnx);
            for i in 0..cny {
                let fi = coarse_to_fine_index(i, cny, lny);
                for j in 0..cnx {
                    let fj = coarse_to_fine_index(j, cnx, lnx);
                    x.data[i * cnx + j] = fr.x.at(fi, fj) * scale;
                }
            }
            let x = mask.apply(&x);
            Frame { x, mask }
        })
        .collect();
    Dataset {
        d: ds.d,
        sigma_n: ds.sigma_n * scale,
        hr_ny: cny * ds.d,
        hr_nx: cnx * ds.d,
        frames,
        ground_truth: None,
        provenance: format!("{} [restricted]", ds.provenance),
    }
}

// worst distance between applying the banked maps point by point and the
// single composed map; measures how much interpolation the composition lost
fn compose_consistency_px(regrid: &RegridState, current: &Deformation) -> f64 {
    if regrid.saved_maps.is_empty() {
        return 0.0;
    }
    let total = regrid.total_map(current);
    let (ny, nx) = (current.ny(), current.nx());
    let mut worst = 0.0f64;
    for i in 0..ny {
        for j in 0..nx {
            let mut py = i as f64 + current.v.y.at(i, j);
            let mut px = j as f64 + current.v.x.at(i, j);
            for m in regrid.saved_maps.iter().rev() {
                let dy = bilinear(&m.v.y, py, px);
                let dx = bilinear(&m.v.x, py, px);
                py += dy;
                px += dx;
            }
            let ty = i as f64 + total.v.y.at(i, j);
            let tx = j as f64 + total.v.x.at(i, j);
            worst = worst.max(((py - ty).powi(2) + (px - tx).powi(2)).sqrt());
        }
    }
    worst
}

/// Counters and traces a full solve leaves behind.
#[derive(Debug, Clone, Default)]
pub struct SolveDiagnostics {
    pub breakdown_trace: Vec<EnergyBreakdown>,
    /// Regrid events per recorded sweep, aligned with the trace.
    pub sweep_regrids: Vec<usize>,
    pub regrid_counts: Vec<usize>,
    /// Smallest Jacobian determinant of each returned total map.
    pub min_dets: Vec<f64>,
    pub rejected_steps: usize,
    pub rejected_u_steps: usize,
    pub cg_fallbacks: usize,
    pub monotonicity_violations: usize,
    /// Start index of each level's segment in the concatenated traces; the
    /// energy may jump at these seams when the grid changes.
    pub level_bounds: Vec<usize>,
    /// Worst disagreement between banked maps applied in sequence and their
    /// single composition, in pixels.
    pub compose_error_px: f64,
    pub sweeps: usize,
    pub wall: Duration,
    /// Final per-frame images (h for the joint model, the stage-1
    /// reconstructions for the sequential pipeline).
    pub frame_recons: Vec<Field2D>,
}

fn run_level(state: &mut JointState, ds: &Dataset, params: &SolverParams, diag: &mut SolveDiagnostics) {
    for _ in 0..params.outer_iters {
        let rep = outer_iterate(state, ds, params);
        diag.breakdown_trace.push(rep.breakdown);
        diag.sweep_regrids.push(rep.regrids);
        diag.sweeps += 1;
        let n = state.energy_trace.len();
        if n >= 2 && rep.regrids == 0 {
            let (prev, cur) = (state.energy_trace[n - 2], state.energy_trace[n - 1]);
            if cur > prev + 1e-8 * prev.abs() {
                diag.monotonicity_violations += 1;
            }
        }
        // flat over the last five sweeps means done
        if n > 5 {
            let e5 = state.energy_trace[n - 6];
            let e0 = state.energy_trace[n - 1];
            if (e5 - e0).abs() <= 1e-7 * e5.abs().max(1e-30) {
                break;
            }
        }
    }
}

/// Full multiscale joint solve: coarse-to-fine over restricted datasets,
/// carrying the shared image and the total frame maps up the ladder. The
/// blur width shrinks with the grid so each level models exactly the
/// spectrum its data retains. Returns the finest shared image, one total
/// map per frame, and the run's diagnostics.
pub fn solve_joint(dataset: &Dataset, params: &SolverParams) -> (Field2D, Vec<Deformation>, SolveDiagnostics) {
    let start = Instant::now();
    let mut ladder = vec![dataset.clone()];
    while ladder.len() < params.levels_k {
        let last = ladder.last().unwrap();
        let (lny, lnx) = (last.lr_ny(), last.lr_nx());
        if lny % 2 != 0 || lnx % 2 != 0 || lny < 16 || lnx < 16 {
            break;
        }
        ladder.push(restrict_dataset(last));
    }
    ladder.reverse();
    for _ in 1..params.fine_passes {
        ladder.push(dataset.clone());
    }

    let mut diag = SolveDiagnostics::default();
    let mut carried: Option<(Field2D, Vec<Deformation>)> = None;
    let mut finest: Option<JointState> = None;
    for ds in &ladder {
        let mut params_l = params.clone();
        params_l.sigma = params.sigma * ds.hr_ny as f64 / dataset.hr_ny as f64;
        let params_l = &params_l;
        diag.level_bounds.push(diag.breakdown_trace.len());
        let mut state = init_state(ds, params_l);
        if let Some((u_c, maps_c)) = carried.take() {
            for (fs, mc) in state.frames.iter_mut().zip(&maps_c) {
                let mut phi: Deformation = mc.prolong_to(ds.lr_ny(), ds.lr_nx());
                // grid-scale wobble in a coarse map is registration noise
                // beyond the coarse band; smoothing keeps only the motion
                // the next level should start from
                phi.v.y = gaussian_blur(&phi.v.y, 1.0);
                phi.v.x = gaussian_blur(&phi.v.x, 1.0);
                // prolongation can push a tight map over the fold line;
                // damping toward identity is the conservative restart
                let mut guard = 0;
                while phi.min_det() <= 0.0 && guard < 60 {
                    phi.v.y.scale(0.9);
                    phi.v.x.scale(0.9);
                    guard += 1;
                }
                let (pinv, _) = invert_deformation(&phi, params_l.inv_max_iter, params_l.inv_tol_px);
                fs.det_inv = det_inverse_jacobian(&phi, &pinv);
                fs.phi_inv = pinv;
                fs.z = grad_planes(&phi.v);
                fs.phi = phi;
            }
            // a carried u would cap the level at the coarse band, because
            // the first h solve pins every frame to the downsampled u; what
            // carries over is the motion, so u restarts from this level's
            // own data. Aligning that data by the carried maps only helps
            // when they hold real motion, and the objective cannot tell
            // (wrong maps baked into u look consistent through those same
            // maps), so the test is whether alignment tightens the frames
            // around their mean.
            let tinv = 1.0 / ds.num_frames() as f64;
            let mut b_plain = Field2D::zeros(ds.lr_ny(), ds.lr_nx());
            let mut b_warp = Field2D::zeros(ds.lr_ny(), ds.lr_nx());
            let warped: Vec<Field2D> =
                state.frames.iter().map(|fs| warp(&fs.h, &fs.phi)).collect();
            for (fs, w) in state.frames.iter().zip(&warped) {
                b_plain.add_scaled(&fs.h, tinv);
                b_warp.add_scaled(w, tinv);
            }
            let mut d_plain = 0.0;
            let mut d_warp = 0.0;
            for (fs, w) in state.frames.iter().zip(&warped) {
                d_plain += fs.h.sub(&b_plain).norm_sq();
                d_warp += w.sub(&b_warp).norm_sq();
            }
            let op = SystemOperatorSpec::new(params_l.sigma, ds.d);
            if d_warp < d_plain {
                state.u = pd_init_u(&b_warp, params_l, &op);
            }
            // the previous level's image competes as a seed too; it shares
            // the carried maps' gauge, so here the objective is a fair judge
            let u_prev = prolong_to(&u_c, ds.hr_ny, ds.hr_nx);
            if u_partial(&u_prev, &state.frames, tinv, params_l, &op)
                < u_partial(&state.u, &state.frames, tinv, params_l, &op)
            {
                state.u = u_prev;
            }
        }
        run_level(&mut state, ds, params_l, &mut diag);

        if diag.regrid_counts.is_empty() {
            diag.regrid_counts = vec![0; state.frames.len()];
        }
        for (k, fs) in state.frames.iter().enumerate() {
            diag.regrid_counts[k] += fs.regrid.count;
            diag.rejected_steps += fs.rejected_steps;
            diag.cg_fallbacks += fs.cg_fallbacks;
            diag.compose_error_px =
                diag.compose_error_px.max(compose_consistency_px(&fs.regrid, &fs.phi));
        }
        diag.rejected_steps += state.rejected_u_steps;

        let totals: Vec<Deformation> =
            state.frames.iter().map(|fs| fs.regrid.total_map(&fs.phi)).collect();
        carried = Some((state.u.clone(), totals));
        finest = Some(state);
    }

    let state = finest.expect("at least one level");
    let (_, maps) = carried.expect("at least one level");
    diag.min_dets = maps.iter().map(|m| m.min_det()).collect();
    diag.frame_recons = state.frames.iter().map(|fs| fs.h.clone()).collect();
    diag.wall = start.elapsed();
    (state.u.clone(), maps, diag)
}

// frame-wise compressed-sensing reconstruction with plain TV: primal-dual
// with the exact k-space prox as the data step
fn cs_tv_reconstruct(fr: &Frame, params: &SolverParams) -> Field2D {
    let (ny, nx) = (fr.x.ny, fr.x.nx);
    let mut f = apply_f_adjoint(&fr.x, &fr.mask);
    let mut fbar = f.clone();
    let mut y = DualField::zeros(ny, nx);
    let (tau, sigma) = (params.pd_tau, params.pd_sigma);
    for _ in 0..params.iters_nn {
        let g = gradient(&fbar);
        y.add_scaled(&g, sigma);
        for k in 0..y.y.len() {
            let len = (y.y.data[k] * y.y.data[k] + y.x.data[k] * y.x.data[k]).sqrt();
            if len > 1.0 {
                y.y.data[k] /= len;
                y.x.data[k] /= len;
            }
        }
        let f_old = f.clone();
        let mut fp = f.clone();
        fp.add_scaled(&divergence(&y), tau);
        f = kspace_prox(&fp, fr, tau * params.gamma3);
        fbar = f.scaled(2.0);
        fbar.add_scaled(&f_old, -1.0);
    }
    f
}

// argmin_f |f - fp|^2 / 2 + (w/2) |M F f - x|^2, diagonal in k-space
fn kspace_prox(fp: &Field2D, fr: &Frame, w: f64) -> Field2D {
    let mut fhat = fft2_real(fp);
    for i in 0..fhat.ny {
        for j in 0..fhat.nx {
            if fr.mask.kept(i, j) {
                let idx = i * fhat.nx + j;
                fhat.data[idx] = (fhat.data[idx] + fr.x.data[idx] * w) / (1.0 + w);
            }
        }
    }
    ifft2(&fhat).re()
}

fn registration_config(params: &SolverParams) -> RegistrationConfig {
    RegistrationConfig {
        ogden: params.ogden(),
        gamma1: params.gamma1,
        gamma2: params.gamma2,
        dt: params.dt,
        dt_floor: params.dt_floor,
        levels: params.levels_k,
        sweeps_per_level: params.outer_iters,
        regrid_tol: params.regrid_tol,
        max_step_px: params.max_step_px,
    }
}

/// The baseline the joint model is measured against: reconstruct every frame
/// on its own, register everything to the first frame, then super-resolve
/// the mean of the aligned reconstructions. Same building blocks, no
/// coupling.
pub fn solve_sequential(dataset: &Dataset, params: &SolverParams) -> (Field2D, Vec<Deformation>, SolveDiagnostics) {
    assert!(!dataset.frames.is_empty(), "dataset has no frames");
    let start = Instant::now();
    let recons: Vec<Field2D> = dataset
        .frames
        .par_iter()
        .map(|fr| cs_tv_reconstruct(fr, params))
        .collect();

    let cfg = registration_config(params);
    let outcomes: Vec<_> = recons
        .par_iter()
        .map(|moving| register_pair(&recons[0], moving, &cfg))
        .collect();

    let tinv = 1.0 / dataset.num_frames() as f64;
    let mut b = Field2D::zeros(dataset.lr_ny(), dataset.lr_nx());
    for (r, o) in recons.iter().zip(&outcomes) {
        b.add_scaled(&warp(r, &o.map), tinv);
    }
    let op = SystemOperatorSpec::new(params.sigma, dataset.d);
    let ac = |v: &Field2D| apply_c(v, &op);
    let act = |v: &Field2D| apply_c_adjoint(v, &op);
    let (u, _) = primal_dual_tv(
        params.gamma2,
        &b,
        params.alpha,
        &ac,
        &act,
        params.iters_nn,
        params.pd_tau,
        params.pd_sigma,
        params.cg_tol,
        params.cg_max,
    );

    let maps: Vec<Deformation> = outcomes.iter().map(|o| o.map.clone()).collect();
    let diag = SolveDiagnostics {
        regrid_counts: outcomes.iter().map(|o| o.regrids).collect(),
        min_dets: maps.iter().map(|m| m.min_det()).collect(),
        frame_recons: recons,
        wall: start.elapsed(),
        ..SolveDiagnostics::default()
    };
    (u, maps, diag)
}
