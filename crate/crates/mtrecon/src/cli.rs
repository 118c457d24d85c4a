//! Command-line plumbing: simulate a phantom acquisition, reconstruct it,
//! evaluate the result against the stored ground truth.
//!
//! Everything on disk is either flat text (config, manifest, CSV), 8-bit PGM
//! previews, or raw little-endian f64 planes, so runs can be audited without
//! any tooling beyond a hex dump.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::grid::{determinant, Field2D, VectorField2D};
use crate::metrics::{
    corrected_difference, endpoint_error, psnr, ssim, uncorrected_difference,
};
use crate::operators::{apply_c, make_mask, SystemOperatorSpec};
use crate::phantom::{
    load_dataset, make_motion, make_phantom, save_dataset, simulate_acquisition, MotionSpec,
    PhantomSpec,
};
use crate::registration::{invert_deformation, Deformation};
use crate::solver::{solve_joint, solve_sequential, HMode, SolverParams};

/// Which pipeline the reconstruct command drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Joint,
    Sequential,
}

impl Mode {
    fn as_str(self) -> &'static str {
        match self {
            Mode::Joint => "joint",
            Mode::Sequential => "sequential",
        }
    }
}

/// Full run surface: solver parameters plus acquisition and plumbing knobs.
/// Config keys are exactly these field names (solver fields flattened).
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub params: SolverParams,
    pub mode: Mode,
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub export_previews: bool,
    pub export_fields: bool,
    // acquisition surface, used by the simulate command
    pub frames: usize,
    pub accel: f64,
    pub center_fraction: f64,
    pub sigma_n: f64,
    pub hr_size: usize,
    pub d: usize,
    pub motion_amplitude: f64,
    pub motion_period: f64,
    pub motion_smoothness: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            params: SolverParams::default(),
            mode: Mode::Joint,
            dataset: PathBuf::from("dataset.mtr"),
            out: PathBuf::from("out"),
            seed: 42,
            export_previews: true,
            export_fields: true,
            frames: 8,
            accel: 4.0,
            center_fraction: 0.08,
            sigma_n: 0.01,
            hr_size: 128,
            d: 2,
            motion_amplitude: 4.0,
            motion_period: 8.0,
            motion_smoothness: 1.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn parse_f64(key: &str, value: &str) -> Result<f64, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("{key}: expected a number, got '{value}'")))
}

fn parse_usize(key: &str, value: &str) -> Result<usize, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("{key}: expected a count, got '{value}'")))
}

fn parse_u64(key: &str, value: &str) -> Result<u64, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("{key}: expected an integer, got '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(CliError::Usage(format!("{key}: expected true or false, got '{value}'"))),
    }
}

fn set_key(cfg: &mut RunConfig, key: &str, value: &str) -> Result<(), CliError> {
    let p = &mut cfg.params;
    match key {
        "a1" => p.a1 = parse_f64(key, value)?,
        "a2" => p.a2 = parse_f64(key, value)?,
        "gamma1" => p.gamma1 = parse_f64(key, value)?,
        "gamma2" => p.gamma2 = parse_f64(key, value)?,
        "gamma3" => p.gamma3 = parse_f64(key, value)?,
        "theta" => p.theta = parse_f64(key, value)?,
        "sigma" => p.sigma = parse_f64(key, value)?,
        "levels_k" => p.levels_k = parse_usize(key, value)?,
        "iters_nn" => p.iters_nn = parse_usize(key, value)?,
        "alpha" => p.alpha = parse_f64(key, value)?,
        "dt" => p.dt = parse_f64(key, value)?,
        "dt_floor" => p.dt_floor = parse_f64(key, value)?,
        "max_step_px" => p.max_step_px = parse_f64(key, value)?,
        "regrid_tol" => p.regrid_tol = parse_f64(key, value)?,
        "delta_weight" => p.delta_weight = parse_f64(key, value)?,
        "chambolle_step" => p.chambolle_step = parse_f64(key, value)?,
        "pd_tau" => p.pd_tau = parse_f64(key, value)?,
        "pd_sigma" => p.pd_sigma = parse_f64(key, value)?,
        "cg_tol" => p.cg_tol = parse_f64(key, value)?,
        "cg_max" => p.cg_max = parse_usize(key, value)?,
        "inv_max_iter" => p.inv_max_iter = parse_usize(key, value)?,
        "inv_tol_px" => p.inv_tol_px = parse_f64(key, value)?,
        "outer_iters" => p.outer_iters = parse_usize(key, value)?,
        "fine_passes" => p.fine_passes = parse_usize(key, value)?,
        "canny_low" => p.canny_low = parse_f64(key, value)?,
        "canny_high" => p.canny_high = parse_f64(key, value)?,
        "floor_c" => p.floor_c = parse_f64(key, value)?,
        "h_mode" => {
            p.h_mode = match value {
                "cg" => HMode::Cg,
                "diagonal" => HMode::Diagonal,
                _ => {
                    return Err(CliError::Usage(format!(
                        "h_mode: expected cg or diagonal, got '{value}'"
                    )))
                }
            }
        }
        "mode" => {
            cfg.mode = match value {
                "joint" => Mode::Joint,
                "sequential" => Mode::Sequential,
                _ => {
                    return Err(CliError::Usage(format!(
                        "mode: expected joint or sequential, got '{value}'"
                    )))
                }
            }
        }
        "dataset" => cfg.dataset = PathBuf::from(value),
        "out" => cfg.out = PathBuf::from(value),
        "seed" => cfg.seed = parse_u64(key, value)?,
        "export_previews" => cfg.export_previews = parse_bool(key, value)?,
        "export_fields" => cfg.export_fields = parse_bool(key, value)?,
        "frames" => cfg.frames = parse_usize(key, value)?,
        "accel" => cfg.accel = parse_f64(key, value)?,
        "center_fraction" => cfg.center_fraction = parse_f64(key, value)?,
        "sigma_n" => cfg.sigma_n = parse_f64(key, value)?,
        "hr_size" => cfg.hr_size = parse_usize(key, value)?,
        "d" => cfg.d = parse_usize(key, value)?,
        "motion_amplitude" => cfg.motion_amplitude = parse_f64(key, value)?,
        "motion_period" => cfg.motion_period = parse_f64(key, value)?,
        "motion_smoothness" => cfg.motion_smoothness = parse_f64(key, value)?,
        _ => return Err(CliError::Usage(format!("unknown key: {key}"))),
    }
    Ok(())
}

fn validate_config(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.params.validate().map_err(CliError::Usage)?;
    fn bad(key: &str, why: &str) -> CliError {
        CliError::Usage(format!("{key}: {why}"))
    }
    if cfg.frames == 0 {
        return Err(bad("frames", "at least one frame is required"));
    }
    if !(cfg.accel >= 1.0) {
        return Err(bad("accel", "acceleration must be at least 1"));
    }
    if !(cfg.center_fraction > 0.0 && cfg.center_fraction <= 1.0) {
        return Err(bad("center_fraction", "must lie in (0, 1]"));
    }
    if !(cfg.sigma_n >= 0.0) {
        return Err(bad("sigma_n", "noise level must not be negative"));
    }
    if cfg.d == 0 {
        return Err(bad("d", "super-resolution factor must be at least 1"));
    }
    if cfg.hr_size % cfg.d != 0 {
        return Err(bad("hr_size", "must be divisible by d"));
    }
    if cfg.hr_size / cfg.d < 8 {
        return Err(bad("hr_size", "frame grid would be smaller than 8"));
    }
    if !(cfg.motion_amplitude >= 0.0) {
        return Err(bad("motion_amplitude", "must not be negative"));
    }
    if !(cfg.motion_period > 0.0) {
        return Err(bad("motion_period", "must be positive"));
    }
    if !(cfg.motion_smoothness >= 1.0) {
        return Err(bad("motion_smoothness", "exponent must be at least 1"));
    }
    Ok(())
}

/// Builds a config from a flat key=value file (# comments) and override
/// pairs, in that order; later assignments win.
pub fn parse_config(
    file: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("{}:{}: expected key=value", path.display(), ln + 1))
            })?;
            set_key(&mut cfg, k.trim(), v.trim())?;
        }
    }
    for (k, v) in overrides {
        set_key(&mut cfg, k, v)?;
    }
    validate_config(&cfg)?;
    Ok(cfg)
}

const USAGE: &str = "usage: mtrecon <simulate|reconstruct|evaluate> [--config=PATH] [--key=value ...]";

/// Entry point behind main: parses flags, dispatches, maps errors to exit
/// codes (1 usage, 2 io, 3 numerical).
pub fn run(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(args: &[String]) -> Result<(), CliError> {
    let cmd = args.first().ok_or_else(|| CliError::Usage(USAGE.into()))?;
    let mut config_path = None;
    let mut pairs = Vec::new();
    for a in &args[1..] {
        let body = a
            .strip_prefix("--")
            .ok_or_else(|| CliError::Usage(format!("unexpected argument: {a}")))?;
        let (k, v) = body
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("flag missing '=': {a}")))?;
        let k = k.replace('-', "_");
        if k == "config" {
            config_path = Some(PathBuf::from(v));
        } else {
            pairs.push((k, v.to_string()));
        }
    }
    let cfg = parse_config(config_path.as_deref(), &pairs)?;
    match cmd.as_str() {
        "simulate" => cmd_simulate(&cfg),
        "reconstruct" => cmd_reconstruct(&cfg),
        "evaluate" => cmd_evaluate(&cfg),
        _ => Err(CliError::Usage(format!(
            "unknown command: {cmd}; expected simulate, reconstruct, or evaluate"
        ))),
    }
}

/// Generates the default phantom acquisition at the configured size, motion,
/// acceleration, and noise, and writes it to the dataset path.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let mut spec = PhantomSpec::desk_default();
    spec.ny = cfg.hr_size;
    spec.nx = cfg.hr_size;
    let u_gt = make_phantom(&spec);
    let lr = cfg.hr_size / cfg.d;
    let ms = MotionSpec::new(
        lr,
        lr,
        cfg.motion_amplitude,
        cfg.motion_period,
        0.0,
        cfg.motion_smoothness,
    )
    .map_err(|e| CliError::Usage(format!("motion_amplitude: {e}")))?;
    let motions: Vec<Deformation> = (0..cfg.frames).map(|t| make_motion(&ms, t)).collect();
    let masks = (0..cfg.frames)
        .map(|t| make_mask(lr, lr, cfg.accel, cfg.center_fraction, cfg.seed.wrapping_add(t as u64)))
        .collect::<Vec<_>>();
    let op = SystemOperatorSpec::new(cfg.params.sigma, cfg.d);
    let ds = simulate_acquisition(&u_gt, &motions, &op, &masks, cfg.sigma_n, cfg.seed);
    save_dataset(&ds, &cfg.dataset).map_err(|e| io_err(&cfg.dataset, e))?;
    println!(
        "wrote {}: T={} hr={}x{} lr={}x{} d={} accel={} sigma_n={} seed={}",
        cfg.dataset.display(),
        cfg.frames,
        cfg.hr_size,
        cfg.hr_size,
        lr,
        lr,
        cfg.d,
        cfg.accel,
        cfg.sigma_n,
        cfg.seed
    );
    Ok(())
}

fn write_f64_raw(path: &Path, data: &[f64]) -> Result<(), CliError> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn read_f64_raw(path: &Path, expected: usize) -> Result<Vec<f64>, CliError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() != expected * 8 {
        return Err(CliError::Io(format!(
            "{}: expected {} bytes ({} f64 values), found {}",
            path.display(),
            expected * 8,
            expected,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// 8-bit min-max windowed preview; returns the window so the manifest can
/// record it.
fn write_pgm(path: &Path, f: &Field2D) -> Result<(f64, f64), CliError> {
    let lo = f.min();
    let hi = f.max();
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut bytes = format!("P5\n{} {}\n255\n", f.nx, f.ny).into_bytes();
    bytes.extend(f.data.iter().map(|&v| ((v - lo) * scale).round().clamp(0.0, 255.0) as u8));
    fs::write(path, bytes).map_err(|e| io_err(path, e))?;
    Ok((lo, hi))
}

fn echo_config(cfg: &RunConfig) -> String {
    let p = &cfg.params;
    let h_mode = match p.h_mode {
        HMode::Cg => "cg",
        HMode::Diagonal => "diagonal",
    };
    let mut s = String::new();
    let _ = writeln!(s, "a1={}", p.a1);
    let _ = writeln!(s, "a2={}", p.a2);
    let _ = writeln!(s, "gamma1={}", p.gamma1);
    let _ = writeln!(s, "gamma2={}", p.gamma2);
    let _ = writeln!(s, "gamma3={}", p.gamma3);
    let _ = writeln!(s, "theta={}", p.theta);
    let _ = writeln!(s, "sigma={}", p.sigma);
    let _ = writeln!(s, "levels_k={}", p.levels_k);
    let _ = writeln!(s, "iters_nn={}", p.iters_nn);
    let _ = writeln!(s, "alpha={}", p.alpha);
    let _ = writeln!(s, "dt={}", p.dt);
    let _ = writeln!(s, "dt_floor={}", p.dt_floor);
    let _ = writeln!(s, "max_step_px={}", p.max_step_px);
    let _ = writeln!(s, "regrid_tol={}", p.regrid_tol);
    let _ = writeln!(s, "delta_weight={}", p.delta_weight);
    let _ = writeln!(s, "chambolle_step={}", p.chambolle_step);
    let _ = writeln!(s, "pd_tau={}", p.pd_tau);
    let _ = writeln!(s, "pd_sigma={}", p.pd_sigma);
    let _ = writeln!(s, "cg_tol={}", p.cg_tol);
    let _ = writeln!(s, "cg_max={}", p.cg_max);
    let _ = writeln!(s, "inv_max_iter={}", p.inv_max_iter);
    let _ = writeln!(s, "inv_tol_px={}", p.inv_tol_px);
    let _ = writeln!(s, "outer_iters={}", p.outer_iters);
    let _ = writeln!(s, "fine_passes={}", p.fine_passes);
    let _ = writeln!(s, "canny_low={}", p.canny_low);
    let _ = writeln!(s, "canny_high={}", p.canny_high);
    let _ = writeln!(s, "floor_c={}", p.floor_c);
    let _ = writeln!(s, "h_mode={h_mode}");
    let _ = writeln!(s, "mode={}", cfg.mode.as_str());
    let _ = writeln!(s, "dataset={}", cfg.dataset.display());
    let _ = writeln!(s, "out={}", cfg.out.display());
    let _ = writeln!(s, "seed={}", cfg.seed);
    let _ = writeln!(s, "export_previews={}", cfg.export_previews);
    let _ = writeln!(s, "export_fields={}", cfg.export_fields);
    let _ = writeln!(s, "frames={}", cfg.frames);
    let _ = writeln!(s, "accel={}", cfg.accel);
    let _ = writeln!(s, "center_fraction={}", cfg.center_fraction);
    let _ = writeln!(s, "sigma_n={}", cfg.sigma_n);
    let _ = writeln!(s, "hr_size={}", cfg.hr_size);
    let _ = writeln!(s, "d={}", cfg.d);
    let _ = writeln!(s, "motion_amplitude={}", cfg.motion_amplitude);
    let _ = writeln!(s, "motion_period={}", cfg.motion_period);
    let _ = writeln!(s, "motion_smoothness={}", cfg.motion_smoothness);
    s
}

fn join_csv<T: std::fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Loads the dataset, runs the configured pipeline, persists image, maps,
/// per-frame reconstructions, energy trace, and manifest.
pub fn cmd_reconstruct(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = load_dataset(&cfg.dataset).map_err(|e| io_err(&cfg.dataset, e))?;
    let start = Instant::now();
    let (u, maps, diag) = match cfg.mode {
        Mode::Joint => solve_joint(&ds, &cfg.params),
        Mode::Sequential => solve_sequential(&ds, &cfg.params),
    };
    let wall = start.elapsed();

    if !u.data.iter().all(|v| v.is_finite()) {
        return Err(CliError::Numerical("reconstruction contains non-finite values".into()));
    }
    if let Some(b) = diag.breakdown_trace.last() {
        if !b.total.is_finite() {
            return Err(CliError::Numerical(format!("final energy is {}", b.total)));
        }
    }
    if let Some((t, d)) = diag
        .min_dets
        .iter()
        .enumerate()
        .find(|(_, d)| !(**d > 0.0))
    {
        return Err(CliError::Numerical(format!(
            "frame {t} deformation folds over (min det {d})"
        )));
    }

    let out = &cfg.out;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;

    let mut windows = Vec::new();
    if cfg.export_fields {
        write_f64_raw(&out.join("u.f64.raw"), &u.data)?;
        for (t, m) in maps.iter().enumerate() {
            let mut plane = m.v.y.data.clone();
            plane.extend_from_slice(&m.v.x.data);
            write_f64_raw(&out.join(format!("v_t_{t}.f64.raw")), &plane)?;
        }
        for (t, h) in diag.frame_recons.iter().enumerate() {
            write_f64_raw(&out.join(format!("h_t_{t}.f64.raw")), &h.data)?;
        }
    }
    if cfg.export_previews {
        let w = write_pgm(&out.join("u.pgm"), &u)?;
        windows.push(("u.pgm".to_string(), w));
        if cfg.mode == Mode::Sequential {
            for (t, h) in diag.frame_recons.iter().enumerate() {
                let name = format!("stage1_recon_{t}.pgm");
                let w = write_pgm(&out.join(&name), h)?;
                windows.push((name, w));
            }
        }
    }

    let mut csv = String::from("iteration,ogden,z_penalty,data,tv_u,coupling,f_penalty,wtv_f,total\n");
    for (i, b) in diag.breakdown_trace.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            i, b.ogden, b.z_penalty, b.data, b.tv_u, b.coupling, b.f_penalty, b.wtv_f, b.total
        );
    }
    let energy_path = out.join("energy.csv");
    fs::write(&energy_path, csv).map_err(|e| io_err(&energy_path, e))?;

    let mut man = String::new();
    let _ = writeln!(man, "generated_by=mtrecon {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(man, "command=reconstruct");
    man.push_str(&echo_config(cfg));
    let _ = writeln!(man, "u_ny={}", u.ny);
    let _ = writeln!(man, "u_nx={}", u.nx);
    let _ = writeln!(man, "v_ny={}", ds.lr_ny());
    let _ = writeln!(man, "v_nx={}", ds.lr_nx());
    let _ = writeln!(man, "num_frames={}", ds.num_frames());
    let _ = writeln!(man, "raw_format=little-endian f64, row major; v files hold the y plane then the x plane");
    for (name, (lo, hi)) in &windows {
        let _ = writeln!(man, "pgm_window_{name}={lo}..{hi}");
    }
    let _ = writeln!(man, "wall_seconds={}", wall.as_secs_f64());
    let _ = writeln!(man, "sweeps={}", diag.sweeps);
    let _ = writeln!(man, "regrid_counts={}", join_csv(&diag.regrid_counts));
    let _ = writeln!(man, "min_dets={}", join_csv(&diag.min_dets));
    let _ = writeln!(man, "level_bounds={}", join_csv(&diag.level_bounds));
    let _ = writeln!(man, "rejected_steps={}", diag.rejected_steps);
    let _ = writeln!(man, "rejected_u_steps={}", diag.rejected_u_steps);
    let _ = writeln!(man, "cg_fallbacks={}", diag.cg_fallbacks);
    let _ = writeln!(man, "monotonicity_violations={}", diag.monotonicity_violations);
    let _ = writeln!(man, "compose_error_px={}", diag.compose_error_px);
    let _ = writeln!(man, "ssim_constants=K1=0.01 K2=0.03 window_sigma=1.5");
    let man_path = out.join("manifest.txt");
    fs::write(&man_path, man).map_err(|e| io_err(&man_path, e))?;

    println!(
        "{} reconstruction: {} sweeps, {} regrids, wall {:.1}s, results in {}",
        cfg.mode.as_str(),
        diag.sweeps,
        diag.regrid_counts.iter().sum::<usize>(),
        wall.as_secs_f64(),
        out.display()
    );
    Ok(())
}

fn read_deformation(path: &Path, ny: usize, nx: usize) -> Result<Deformation, CliError> {
    let plane = read_f64_raw(path, 2 * ny * nx)?;
    let y = Field2D::from_vec(ny, nx, plane[..ny * nx].to_vec());
    let x = Field2D::from_vec(ny, nx, plane[ny * nx..].to_vec());
    Ok(Deformation { v: VectorField2D::new(y, x) })
}

fn manifest_value(text: &str, key: &str) -> Option<String> {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")).map(|v| v.to_string()))
}

/// Recomputes every reported metric from the persisted files plus the
/// dataset: difference maps, determinant maps, and, when ground truth is
/// stored, PSNR, SSIM, and endpoint errors.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = load_dataset(&cfg.dataset).map_err(|e| io_err(&cfg.dataset, e))?;
    let out = &cfg.out;
    let (ny, nx) = (ds.hr_ny, ds.hr_nx);
    let (lny, lnx) = (ds.lr_ny(), ds.lr_nx());
    let t_count = ds.num_frames();

    let u = Field2D::from_vec(ny, nx, read_f64_raw(&out.join("u.f64.raw"), ny * nx)?);
    let mut maps = Vec::with_capacity(t_count);
    let mut hs = Vec::with_capacity(t_count);
    for t in 0..t_count {
        maps.push(read_deformation(&out.join(format!("v_t_{t}.f64.raw")), lny, lnx)?);
        hs.push(Field2D::from_vec(
            lny,
            lnx,
            read_f64_raw(&out.join(format!("h_t_{t}.f64.raw")), lny * lnx)?,
        ));
    }
    let man_path = out.join("manifest.txt");
    let manifest = fs::read_to_string(&man_path).map_err(|e| io_err(&man_path, e))?;
    let energy_path = out.join("energy.csv");
    let energy = fs::read_to_string(&energy_path).map_err(|e| io_err(&energy_path, e))?;
    let energy_totals: Vec<f64> = energy
        .lines()
        .skip(1)
        .filter_map(|l| l.rsplit(',').next().and_then(|v| v.parse().ok()))
        .collect();

    let op = SystemOperatorSpec::new(cfg.params.sigma, ds.d);
    let c_u = apply_c(&u, &op);
    let unc = uncorrected_difference(&ds.frames);
    let cor = corrected_difference(&hs, &maps, &c_u);
    let unc_mean = unc.mean();
    let cor_mean = cor.mean();

    let mut windows = Vec::new();
    let w = write_pgm(&out.join("diffmap_uncorrected.pgm"), &unc)?;
    windows.push(("diffmap_uncorrected.pgm".to_string(), w));
    let w = write_pgm(&out.join("diffmap_corrected.pgm"), &cor)?;
    windows.push(("diffmap_corrected.pgm".to_string(), w));

    let mut min_dets = Vec::with_capacity(t_count);
    let mut min_dets_inv = Vec::with_capacity(t_count);
    for (t, m) in maps.iter().enumerate() {
        let det = determinant(&m.jacobian());
        min_dets.push(det.min());
        let name = format!("det_{t}.pgm");
        let w = write_pgm(&out.join(&name), &det)?;
        windows.push((name, w));
        let (inv, _) = invert_deformation(m, cfg.params.inv_max_iter, cfg.params.inv_tol_px);
        let det_inv = determinant(&inv.jacobian());
        min_dets_inv.push(det_inv.min());
        let name = format!("det_inv_{t}.pgm");
        let w = write_pgm(&out.join(&name), &det_inv)?;
        windows.push((name, w));
    }

    let mut csv = String::from("metric,value\n");
    let _ = writeln!(csv, "frames,{t_count}");
    match &ds.ground_truth {
        Some(gt) => {
            let _ = writeln!(csv, "ground_truth,1");
            let p = psnr(&u, &gt.u);
            let _ = writeln!(csv, "psnr_db,{}", p.db);
            let _ = writeln!(csv, "psnr_exact,{}", u8::from(p.exact));
            let _ = writeln!(csv, "ssim,{}", ssim(&u, &gt.u));
            let epes: Vec<_> =
                maps.iter().zip(&gt.motions).map(|(m, g)| endpoint_error(m, g)).collect();
            let mean = epes.iter().map(|e| e.mean).sum::<f64>() / t_count as f64;
            let max = epes.iter().map(|e| e.max).fold(0.0, f64::max);
            let _ = writeln!(csv, "epe_mean_px,{mean}");
            let _ = writeln!(csv, "epe_max_px,{max}");
            for (t, e) in epes.iter().enumerate() {
                let _ = writeln!(csv, "epe_t_{t}_mean_px,{}", e.mean);
                let _ = writeln!(csv, "epe_t_{t}_max_px,{}", e.max);
            }
        }
        None => {
            let _ = writeln!(csv, "ground_truth,0");
        }
    }
    for (t, d) in min_dets.iter().enumerate() {
        let _ = writeln!(csv, "min_det_{t},{d}");
    }
    for (t, d) in min_dets_inv.iter().enumerate() {
        let _ = writeln!(csv, "min_det_inv_{t},{d}");
    }
    let _ = writeln!(csv, "diff_uncorrected_mean,{unc_mean}");
    let _ = writeln!(csv, "diff_corrected_mean,{cor_mean}");
    if unc_mean > 0.0 {
        let _ = writeln!(csv, "diff_ratio,{}", cor_mean / unc_mean);
    }
    if let Some(r) = manifest_value(&manifest, "regrid_counts") {
        if !r.is_empty() {
            for (t, n) in r.split(',').enumerate() {
                let _ = writeln!(csv, "regrids_{t},{n}");
            }
        }
    }
    let _ = writeln!(csv, "energy_rows,{}", energy_totals.len());
    if let Some(last) = energy_totals.last() {
        let _ = writeln!(csv, "energy_final,{last}");
    }
    let metrics_path = out.join("metrics.csv");
    fs::write(&metrics_path, &csv).map_err(|e| io_err(&metrics_path, e))?;

    // window bounds for the evaluate previews live in the same manifest;
    // rerunning evaluate replaces its block instead of stacking them
    let marker = "# evaluate\n";
    let base = match manifest.find(marker) {
        Some(pos) => &manifest[..pos],
        None => manifest.as_str(),
    };
    let mut man = String::from(base);
    man.push_str(marker);
    for (name, (lo, hi)) in &windows {
        let _ = writeln!(man, "pgm_window_{name}={lo}..{hi}");
    }
    fs::write(&man_path, man).map_err(|e| io_err(&man_path, e))?;

    match ds.ground_truth {
        Some(_) => println!(
            "metrics in {}: see metrics.csv (psnr/ssim/epe), diff ratio {}",
            out.display(),
            if unc_mean > 0.0 { format!("{:.3}", cor_mean / unc_mean) } else { "n/a".into() }
        ),
        None => println!(
            "metrics in {}: no ground truth stored, difference and determinant maps only",
            out.display()
        ),
    }
    Ok(())
}
