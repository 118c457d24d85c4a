//! Synthetic ground truth and dataset persistence.
//!
//! An ellipse phantom stands in for patient anatomy, a separable bump profile
//! modulated by a sinusoid in time stands in for breathing, and the
//! acquisition model produces exactly what the joint solver assumes: each
//! frame is the blurred-and-pooled phantom warped by the inverse frame map,
//! Fourier transformed, row-undersampled, plus complex Gaussian noise.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use thiserror::Error;

use crate::grid::{fft2_real, gaussian_blur, warp, ComplexField2D, Field2D, MatrixField2D};
use crate::operators::{apply_c, SamplingMask, SystemOperatorSpec};
use crate::registration::{invert_deformation, Deformation};

/// One painted ellipse, all geometry in unit-square coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
    pub angle: f64,
    pub intensity: f64,
}

/// Phantom description: ellipses painted in order over a flat background.
#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub ny: usize,
    pub nx: usize,
    pub background: f64,
    pub ellipses: Vec<Ellipse>,
}

impl PhantomSpec {
    pub fn new(ny: usize, nx: usize, background: f64, ellipses: Vec<Ellipse>) -> Self {
        assert!(ny > 0 && nx > 0, "phantom dims must be positive");
        assert!((0.0..=1.0).contains(&background), "background out of [0, 1]");
        for e in &ellipses {
            assert!((0.0..=1.0).contains(&e.intensity), "ellipse intensity out of [0, 1]");
            assert!(e.ry > 0.0 && e.rx > 0.0, "ellipse semi-axes must be positive");
            // conservative rotation-safe bound
            let r = e.ry.max(e.rx);
            assert!(
                e.cy - r >= 0.0 && e.cy + r <= 1.0 && e.cx - r >= 0.0 && e.cx + r <= 1.0,
                "ellipse leaves the unit square"
            );
        }
        PhantomSpec { ny, nx, background, ellipses }
    }

    /// Torso-like phantom with interior structure at several scales, so that
    /// registration has gradients to work with away from the outer boundary.
    pub fn desk_default() -> Self {
        let e = |cy, cx, ry, rx, angle, intensity| Ellipse { cy, cx, ry, rx, angle, intensity };
        PhantomSpec::new(
            128,
            128,
            0.0,
            vec![
                e(0.50, 0.50, 0.44, 0.38, 0.0, 0.85),
                e(0.50, 0.50, 0.38, 0.32, 0.0, 0.40),
                e(0.60, 0.40, 0.16, 0.13, 0.35, 0.70),
                e(0.42, 0.60, 0.13, 0.10, -0.50, 0.55),
                e(0.60, 0.42, 0.045, 0.045, 0.0, 0.15),
                e(0.44, 0.58, 0.035, 0.035, 0.0, 0.95),
                e(0.78, 0.50, 0.07, 0.045, 0.0, 0.90),
                e(0.30, 0.44, 0.05, 0.07, 0.60, 0.65),
                e(0.68, 0.62, 0.06, 0.045, 1.10, 0.30),
            ],
        )
    }
}

/// Rasterizes the ellipses (later entries overwrite) and smooths with a half
/// pixel Gaussian so the k-space simulation does not alias hard edges.
pub fn make_phantom(spec: &PhantomSpec) -> Field2D {
    let raster = Field2D::from_fn(spec.ny, spec.nx, |i, j| {
        let y = (i as f64 + 0.5) / spec.ny as f64;
        let x = (j as f64 + 0.5) / spec.nx as f64;
        let mut v = spec.background;
        for e in &spec.ellipses {
            let dy = y - e.cy;
            let dx = x - e.cx;
            let (s, c) = e.angle.sin_cos();
            let py = c * dy + s * dx;
            let px = -s * dy + c * dx;
            if (py / e.ry).powi(2) + (px / e.rx).powi(2) <= 1.0 {
                v = e.intensity;
            }
        }
        v
    });
    gaussian_blur(&raster, 0.5)
}

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("amplitude {amplitude} px drives min det to {min_det:.3}, below the 0.2 bound")]
    AmplitudeTooLarge { amplitude: f64, min_det: f64 },
}

/// Breathing-type motion family on the frame grid:
/// v_t(x) = A sin(2 pi t / P + phase) b(x) along the head-foot (row) axis,
/// with b a smooth separable bump, zero on the boundary, strongest in the
/// lower third. Amplitudes that could push any frame's determinant to 0.2 or
/// below are rejected at construction, no matter the phase.
#[derive(Debug, Clone)]
pub struct MotionSpec {
    pub ny: usize,
    pub nx: usize,
    pub amplitude: f64,
    pub period: f64,
    pub phase: f64,
    /// Exponent sharpening the bump; 1 is the plain profile.
    pub smoothness: f64,
}

// row profile: peak 1 at s = 2/3, zero at both ends
fn profile_y(s: f64) -> (f64, f64) {
    let p = 6.75 * s * s * (1.0 - s);
    let dp = 6.75 * (2.0 * s - 3.0 * s * s);
    (p, dp)
}

// column profile: peak 1 at r = 1/2, zero slope at the lateral boundary
fn profile_x(r: f64) -> (f64, f64) {
    let q = (std::f64::consts::PI * r).sin().powi(2);
    let dq = std::f64::consts::PI * (2.0 * std::f64::consts::PI * r).sin();
    (q, dq)
}

impl MotionSpec {
    pub fn new(
        ny: usize,
        nx: usize,
        amplitude: f64,
        period: f64,
        phase: f64,
        smoothness: f64,
    ) -> Result<Self, MotionError> {
        assert!(ny > 0 && nx > 0, "motion grid dims must be positive");
        assert!(period > 0.0, "period must be positive");
        assert!(smoothness >= 1.0, "smoothness exponent must be at least 1");
        let spec = MotionSpec { ny, nx, amplitude, period, phase, smoothness };
        // worst case over time is |sin| = 1; det is triangular so only the
        // row derivative of the bump matters
        let mut min_det = f64::INFINITY;
        for i in 0..ny {
            for j in 0..nx {
                let (_, bs, _) = spec.bump_at(i, j);
                min_det = min_det.min(1.0 - amplitude.abs() * bs.abs() / ny as f64);
            }
        }
        if min_det <= 0.2 {
            return Err(MotionError::AmplitudeTooLarge { amplitude, min_det });
        }
        Ok(spec)
    }

    /// Default breathing motion for the desk phantom, on the frame grid.
    pub fn desk_default(ny: usize, nx: usize) -> Self {
        MotionSpec::new(ny, nx, 4.0, 8.0, 0.0, 1.0).expect("default amplitude is safe")
    }

    // bump value and its derivatives with respect to the unit coordinates
    fn bump_at(&self, i: usize, j: usize) -> (f64, f64, f64) {
        let s = (i as f64 + 0.5) / self.ny as f64;
        let r = (j as f64 + 0.5) / self.nx as f64;
        let (p, dp) = profile_y(s);
        let (q, dq) = profile_x(r);
        let m = self.smoothness;
        let base = (p * q).max(0.0);
        let b = base.powf(m);
        let chain = if m == 1.0 { 1.0 } else { m * base.powf(m - 1.0) };
        (b, chain * dp * q, chain * p * dq)
    }

    fn amplitude_at(&self, t: usize) -> f64 {
        self.amplitude
            * (2.0 * std::f64::consts::PI * t as f64 / self.period + self.phase).sin()
    }
}

/// Bump profile b on the frame grid; max displacement of frame t is
/// amplitude times sin(2 pi t / P + phase) times the max of this field.
pub fn motion_bump(spec: &MotionSpec) -> Field2D {
    Field2D::from_fn(spec.ny, spec.nx, |i, j| spec.bump_at(i, j).0)
}

/// Frame map phi_t = Id + v_t of the analytic family.
pub fn make_motion(spec: &MotionSpec, t: usize) -> Deformation {
    let a = spec.amplitude_at(t);
    let vy = Field2D::from_fn(spec.ny, spec.nx, |i, j| a * spec.bump_at(i, j).0);
    let vx = Field2D::zeros(spec.ny, spec.nx);
    Deformation { v: crate::grid::VectorField2D::new(vy, vx) }
}

/// Analytic Jacobian of [`make_motion`], exact (no finite differences).
pub fn motion_jacobian(spec: &MotionSpec, t: usize) -> MatrixField2D {
    let a = spec.amplitude_at(t);
    let mut m = MatrixField2D::identity(spec.ny, spec.nx);
    for i in 0..spec.ny {
        for j in 0..spec.nx {
            let (_, bs, br) = spec.bump_at(i, j);
            *m.m11.at_mut(i, j) = 1.0 + a * bs / spec.ny as f64;
            *m.m12.at_mut(i, j) = a * br / spec.nx as f64;
        }
    }
    m
}

/// One measured frame: masked k-space samples.
#[derive(Debug, Clone)]
pub struct Frame {
    pub x: ComplexField2D,
    pub mask: SamplingMask,
}

/// Ground truth carried by synthetic datasets.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub u: Field2D,
    /// Forward frame maps phi_t on the frame grid; the solver's registration
    /// estimates exactly these.
    pub motions: Vec<Deformation>,
}

/// A stack of undersampled k-space frames plus acquisition parameters.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub d: usize,
    pub sigma_n: f64,
    pub hr_ny: usize,
    pub hr_nx: usize,
    pub frames: Vec<Frame>,
    pub ground_truth: Option<GroundTruth>,
    /// Free-form origin note; not persisted.
    pub provenance: String,
}

impl Dataset {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn lr_ny(&self) -> usize {
        self.frames[0].x.ny
    }

    pub fn lr_nx(&self) -> usize {
        self.frames[0].x.nx
    }

    fn validate(&self) -> Result<(), DatasetError> {
        if self.frames.is_empty() {
            return Err(DatasetError::Header("dataset has no frames".into()));
        }
        let (lny, lnx) = (self.lr_ny(), self.lr_nx());
        if self.hr_ny != lny * self.d || self.hr_nx != lnx * self.d {
            return Err(DatasetError::Header(format!(
                "hr dims {}x{} are not d={} times lr dims {}x{}",
                self.hr_ny, self.hr_nx, self.d, lny, lnx
            )));
        }
        for f in &self.frames {
            if f.x.ny != lny || f.x.nx != lnx || f.mask.ny != lny || f.mask.nx != lnx {
                return Err(DatasetError::Header("frame dims differ".into()));
            }
        }
        if let Some(gt) = &self.ground_truth {
            if gt.u.ny != self.hr_ny || gt.u.nx != self.hr_nx {
                return Err(DatasetError::Header("ground-truth image dims differ".into()));
            }
            if gt.motions.len() != self.frames.len() {
                return Err(DatasetError::Header("ground-truth motion count differs".into()));
            }
            for m in &gt.motions {
                if m.ny() != lny || m.nx() != lnx {
                    return Err(DatasetError::Header("ground-truth motion dims differ".into()));
                }
            }
        }
        Ok(())
    }
}

/// Simulates the acquisition the joint model inverts: per frame, the pooled
/// phantom is warped by the numerically inverted frame map, Fourier
/// transformed, masked, and complex Gaussian noise of std `sigma_n` per
/// component is added on the kept samples only. The ground truth is stored.
pub fn simulate_acquisition(
    u_gt: &Field2D,
    motions: &[Deformation],
    system_op: &SystemOperatorSpec,
    masks: &[SamplingMask],
    sigma_n: f64,
    seed: u64,
) -> Dataset {
    assert_eq!(motions.len(), masks.len(), "one mask per motion frame");
    assert!(!motions.is_empty(), "at least one frame");
    assert!(sigma_n >= 0.0, "noise level must not be negative");
    let c = apply_c(u_gt, system_op);
    for (m, k) in motions.iter().zip(masks) {
        assert!(m.ny() == c.ny && m.nx() == c.nx, "motion dims must match the frame grid");
        assert!(k.ny == c.ny && k.nx == c.nx, "mask dims must match the frame grid");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(motions.len());
    for (phi, mask) in motions.iter().zip(masks) {
        let (phi_inv, _) = invert_deformation(phi, 64, 1e-4);
        let moved = warp(&c, &phi_inv);
        let mut x = mask.apply(&fft2_real(&moved));
        if sigma_n > 0.0 {
            for (v, &keep) in x.data.iter_mut().zip(&mask.keep) {
                if keep {
                    let re: f64 = StandardNormal.sample(&mut rng);
                    let im: f64 = StandardNormal.sample(&mut rng);
                    *v += Complex::new(sigma_n * re, sigma_n * im);
                }
            }
        }
        frames.push(Frame { x, mask: mask.clone() });
    }

    Dataset {
        d: system_op.d,
        sigma_n,
        hr_ny: u_gt.ny,
        hr_nx: u_gt.nx,
        frames,
        ground_truth: Some(GroundTruth { u: u_gt.clone(), motions: motions.to_vec() }),
        provenance: format!("simulated T={} seed={}", motions.len(), seed),
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    BadVersion(u32),
    #[error("dataset file truncated")]
    Truncated,
    #[error("dataset checksum mismatch")]
    Checksum,
    #[error("inconsistent dataset: {0}")]
    Header(String),
}

const MAGIC: &[u8; 4] = b"VMTD";
const VERSION: u32 = 1;
const FLAG_GROUND_TRUTH: u32 = 1;

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_plane(buf: &mut Vec<u8>, f: &Field2D) {
    for &v in &f.data {
        push_f64(buf, v);
    }
}

/// Serializes a dataset; layout documented on [`load_dataset`]. The trailing
/// CRC32 covers every preceding byte.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>, DatasetError> {
    ds.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, VERSION);
    let flags = if ds.ground_truth.is_some() { FLAG_GROUND_TRUTH } else { 0 };
    push_u32(&mut buf, flags);
    push_u32(&mut buf, ds.num_frames() as u32);
    push_u32(&mut buf, ds.hr_ny as u32);
    push_u32(&mut buf, ds.hr_nx as u32);
    push_u32(&mut buf, ds.lr_ny() as u32);
    push_u32(&mut buf, ds.lr_nx() as u32);
    push_u32(&mut buf, ds.d as u32);
    push_f64(&mut buf, ds.sigma_n);
    for f in &ds.frames {
        buf.extend(f.mask.keep.iter().map(|&k| k as u8));
        for c in &f.x.data {
            push_f64(&mut buf, c.re);
            push_f64(&mut buf, c.im);
        }
    }
    if let Some(gt) = &ds.ground_truth {
        push_plane(&mut buf, &gt.u);
        for m in &gt.motions {
            push_plane(&mut buf, &m.v.y);
            push_plane(&mut buf, &m.v.x);
        }
    }
    let mut h = crc32fast::Hasher::new();
    h.update(&buf);
    push_u32(&mut buf, h.finalize());
    Ok(buf)
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        if self.pos + n > self.b.len() {
            return Err(DatasetError::Truncated);
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, DatasetError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn plane(&mut self, ny: usize, nx: usize) -> Result<Field2D, DatasetError> {
        let mut data = Vec::with_capacity(ny * nx);
        for _ in 0..ny * nx {
            data.push(self.f64()?);
        }
        Ok(Field2D::from_vec(ny, nx, data))
    }
}

/// Parses [`encode_dataset`] bytes, verifying magic, version, structural
/// consistency, and the trailing checksum.
pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, DatasetError> {
    if bytes.len() < MAGIC.len() + 4 {
        return Err(DatasetError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let mut h = crc32fast::Hasher::new();
    h.update(body);
    if h.finalize() != stored {
        return Err(DatasetError::Checksum);
    }

    let mut r = Reader { b: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(DatasetError::BadVersion(version));
    }
    let flags = r.u32()?;
    if flags & !FLAG_GROUND_TRUTH != 0 {
        return Err(DatasetError::Header(format!("unknown flag bits {flags:#x}")));
    }
    let t = r.u32()? as usize;
    let hr_ny = r.u32()? as usize;
    let hr_nx = r.u32()? as usize;
    let lr_ny = r.u32()? as usize;
    let lr_nx = r.u32()? as usize;
    let d = r.u32()? as usize;
    let sigma_n = r.f64()?;
    if t == 0 || lr_ny == 0 || lr_nx == 0 || d == 0 {
        return Err(DatasetError::Header("zero frame count or dims".into()));
    }

    let mut frames = Vec::with_capacity(t);
    for _ in 0..t {
        let raw = r.take(lr_ny * lr_nx)?;
        if let Some(&bad) = raw.iter().find(|&&b| b > 1) {
            return Err(DatasetError::Header(format!("mask byte {bad} is not 0/1")));
        }
        let keep: Vec<bool> = raw.iter().map(|&b| b == 1).collect();
        let kept = keep.iter().filter(|&&k| k).count().max(1);
        let mask = SamplingMask {
            ny: lr_ny,
            nx: lr_nx,
            keep,
            acceleration: (lr_ny * lr_nx) as f64 / kept as f64,
        };
        let mut x = ComplexField2D::zeros(lr_ny, lr_nx);
        for c in &mut x.data {
            let re = r.f64()?;
            let im = r.f64()?;
            *c = Complex::new(re, im);
        }
        frames.push(Frame { x, mask });
    }

    let ground_truth = if flags & FLAG_GROUND_TRUTH != 0 {
        let u = r.plane(hr_ny, hr_nx)?;
        let mut motions = Vec::with_capacity(t);
        for _ in 0..t {
            let vy = r.plane(lr_ny, lr_nx)?;
            let vx = r.plane(lr_ny, lr_nx)?;
            motions.push(Deformation { v: crate::grid::VectorField2D::new(vy, vx) });
        }
        Some(GroundTruth { u, motions })
    } else {
        None
    };
    if r.pos != body.len() {
        return Err(DatasetError::Header(format!(
            "{} unexpected trailing bytes",
            body.len() - r.pos
        )));
    }

    let ds = Dataset {
        d,
        sigma_n,
        hr_ny,
        hr_nx,
        frames,
        ground_truth,
        provenance: String::new(),
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DatasetError> {
    fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let bytes = fs::read(path)?;
    let mut ds = decode_dataset(&bytes)?;
    ds.provenance = format!("loaded from {}", path.display());
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{determinant, jacobian};
    use crate::operators::make_mask;

    fn tiny_dataset(sigma_n: f64, seed: u64) -> Dataset {
        let spec = PhantomSpec::new(
            64,
            64,
            0.1,
            vec![Ellipse { cy: 0.5, cx: 0.5, ry: 0.3, rx: 0.25, angle: 0.2, intensity: 0.9 }],
        );
        let u = make_phantom(&spec);
        let motion = MotionSpec::desk_default(32, 32);
        let motions: Vec<Deformation> = (0..4).map(|t| make_motion(&motion, t)).collect();
        let masks: Vec<SamplingMask> =
            (0..4).map(|t| make_mask(32, 32, 4.0, 0.08, 100 + t)).collect();
        let op = SystemOperatorSpec::new(1.5, 2);
        simulate_acquisition(&u, &motions, &op, &masks, sigma_n, seed)
    }

    #[test]
    fn empty_spec_is_flat_background() {
        let spec = PhantomSpec::new(16, 16, 0.3, vec![]);
        let u = make_phantom(&spec);
        for &v in &u.data {
            assert!((v - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn disk_area_matches_pixel_count() {
        let spec = PhantomSpec::new(
            128,
            128,
            0.0,
            vec![Ellipse { cy: 0.5, cx: 0.5, ry: 0.3, rx: 0.3, angle: 0.0, intensity: 1.0 }],
        );
        let u = make_phantom(&spec);
        let count = u.data.iter().filter(|&&v| v >= 0.5).count() as f64;
        let expect = std::f64::consts::PI * (0.3 * 128.0) * (0.3 * 128.0);
        assert!(
            (count - expect).abs() <= 0.03 * expect,
            "{count} pixels vs pi r^2 = {expect:.1}"
        );
    }

    #[test]
    fn intensities_stay_in_range() {
        let u = make_phantom(&PhantomSpec::desk_default());
        assert!(u.min() >= 0.0);
        assert!(u.max() <= 0.95 + 1e-9);
    }

    #[test]
    fn zero_phase_frames_are_identity() {
        let spec = MotionSpec::desk_default(32, 32);
        // sin(2 pi t / 8) = 0 at t = 0 and t = 4
        for &t in &[0usize, 4] {
            let d = make_motion(&spec, t);
            assert!(d.v.max_len() < 1e-12, "frame {t} moved");
        }
    }

    #[test]
    fn peak_displacement_is_amplitude_times_bump_peak() {
        let spec = MotionSpec::desk_default(48, 40);
        let b = motion_bump(&spec);
        // quarter period: sin = 1
        let d = make_motion(&spec, 2);
        assert!((d.v.max_len() - spec.amplitude * b.max()).abs() < 1e-12);
        assert!(d.v.x.norm() == 0.0, "motion is head-foot only");
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let spec = MotionSpec::desk_default(64, 64);
        let t = 2;
        let exact = determinant(&motion_jacobian(&spec, t));
        let fd = determinant(&jacobian(&make_motion(&spec, t)));
        for i in 1..63 {
            for j in 1..63 {
                // forward differences live half a pixel off; compare against
                // the analytic value at the midpoint by averaging neighbours
                let e = 0.5 * (exact.at(i, j) + exact.at(i + 1, j));
                let g = fd.at(i, j);
                assert!(
                    (g - e).abs() <= 0.02 * e.abs(),
                    "det mismatch at ({i},{j}): fd {g} vs analytic {e}"
                );
            }
        }
    }

    #[test]
    fn excessive_amplitude_is_rejected() {
        let err = MotionSpec::new(32, 32, 40.0, 8.0, 0.0, 1.0);
        assert!(matches!(err, Err(MotionError::AmplitudeTooLarge { .. })));
    }

    #[test]
    fn noiseless_static_full_data_is_exact() {
        let u = make_phantom(&PhantomSpec::desk_default());
        let op = SystemOperatorSpec::new(1.5, 2);
        let motions = vec![Deformation::identity(64, 64); 3];
        let masks = vec![SamplingMask::full(64, 64); 3];
        let ds = simulate_acquisition(&u, &motions, &op, &masks, 0.0, 1);
        let c = apply_c(&u, &op);
        for f in &ds.frames {
            let back = crate::grid::ifft2(&f.x).re();
            let err = back.sub(&c).norm();
            assert!(err < 1e-12, "zero-filled recon off by {err}");
        }
    }

    #[test]
    fn noise_power_matches_two_sigma_squared() {
        let u = make_phantom(&PhantomSpec::desk_default());
        let op = SystemOperatorSpec::new(1.5, 2);
        let t = 8;
        let motions = vec![Deformation::identity(64, 64); t];
        let masks = vec![SamplingMask::full(64, 64); t];
        let sigma = 0.01;
        let ds = simulate_acquisition(&u, &motions, &op, &masks, sigma, 2);
        let clean = fft2_real(&apply_c(&u, &op));
        let mut power = 0.0;
        let mut n = 0usize;
        for f in &ds.frames {
            let eta = f.x.sub(&clean);
            power += eta.norm_sq();
            n += eta.data.len();
        }
        let mean = power / n as f64;
        let expect = 2.0 * sigma * sigma;
        assert!(
            (mean - expect).abs() <= 0.05 * expect,
            "mean |eta|^2 = {mean:.3e}, expected about {expect:.3e}"
        );
    }

    #[test]
    fn dropped_samples_are_exactly_zero() {
        let ds = tiny_dataset(0.05, 3);
        for f in &ds.frames {
            for (c, &keep) in f.x.data.iter().zip(&f.mask.keep) {
                if !keep {
                    assert_eq!(*c, Complex::new(0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn data_term_at_ground_truth_is_noise_only() {
        let ds = tiny_dataset(0.0, 4);
        let gt = ds.ground_truth.as_ref().unwrap();
        let op = SystemOperatorSpec::new(1.5, ds.d);
        let c = apply_c(&gt.u, &op);
        for (f, phi) in ds.frames.iter().zip(&gt.motions) {
            let (phi_inv, _) = invert_deformation(phi, 64, 1e-4);
            let h = warp(&c, &phi_inv);
            let res = f.mask.apply(&fft2_real(&h)).sub(&f.x).norm_sq().sqrt();
            assert!(res < 1e-12, "forward-model residual {res}");
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ds = tiny_dataset(0.01, 5);
        let a = encode_dataset(&ds).unwrap();
        let back = decode_dataset(&a).unwrap();
        let b = encode_dataset(&back).unwrap();
        assert_eq!(a, b);
        assert!(back.ground_truth.is_some());
    }

    #[test]
    fn round_trip_without_ground_truth() {
        let mut ds = tiny_dataset(0.01, 6);
        ds.ground_truth = None;
        let a = encode_dataset(&ds).unwrap();
        let back = decode_dataset(&a).unwrap();
        assert!(back.ground_truth.is_none());
        assert_eq!(a, encode_dataset(&back).unwrap());
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = encode_dataset(&tiny_dataset(0.01, 7)).unwrap();
        let b = encode_dataset(&tiny_dataset(0.01, 7)).unwrap();
        let c = encode_dataset(&tiny_dataset(0.01, 8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode_dataset(&tiny_dataset(0.0, 9)).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode_dataset(&bytes), Err(DatasetError::Checksum)));

        let mut magic = encode_dataset(&tiny_dataset(0.0, 9)).unwrap();
        magic[0] = b'X';
        assert!(matches!(decode_dataset(&magic), Err(DatasetError::BadMagic)));

        let whole = encode_dataset(&tiny_dataset(0.0, 9)).unwrap();
        assert!(matches!(
            decode_dataset(&whole[..whole.len() - 9]),
            Err(DatasetError::Checksum)
        ));
    }

    #[test]
    fn files_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vmtd");
        let ds = tiny_dataset(0.02, 11);
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(encode_dataset(&ds).unwrap(), encode_dataset(&back).unwrap());
    }
}
