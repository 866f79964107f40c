//! Data model of the dynamical mixing system and the synthetic scene generator.
//!
//! Frames follow the linear mixing model `X_k = S_k A_k + E_k`, endmembers
//! vary as `S_k = S_0 diag(psi_k) + V_k` and abundances drift as
//! `A_k = A_{k-1} + D_k` with sparse `D_k`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{dim_err, Result, UnmixError};
use crate::rng::{NoiseStream, Stream};

pub type Matrix = DMatrix<f64>;

/// Problem sizes: `frames` (K), `channels` (L), `pixels` (N), `sources` (P).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub frames: usize,
    pub channels: usize,
    pub pixels: usize,
    pub sources: usize,
}

impl Dims {
    pub fn new(frames: usize, channels: usize, pixels: usize, sources: usize) -> Result<Self> {
        let dims = Self { frames, channels, pixels, sources };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.channels == 0 || self.pixels == 0 || self.sources == 0 {
            return Err(UnmixError::Config(format!("all dimensions must be positive, got {self:?}")));
        }
        if self.sources > self.channels.min(self.pixels) {
            return Err(UnmixError::Config(format!(
                "source count {} exceeds min(channels, pixels) = {}",
                self.sources,
                self.channels.min(self.pixels)
            )));
        }
        Ok(())
    }
}

fn check_shape(m: &Matrix, rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(dim_err(format!(
            "{what}: expected {rows}x{cols}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn check_nonnegative(m: &Matrix, what: &str) -> Result<()> {
    if let Some(v) = m.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(UnmixError::Domain(format!("{what}: entry {v} is not a finite nonnegative number")));
    }
    Ok(())
}

/// Observed sequence: K frames of L x N, pixel spectra in columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Matrix>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Matrix>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| dim_err("frame sequence is empty"))?;
        let (l, n) = first.shape();
        if l == 0 || n == 0 {
            return Err(dim_err("frames must be non-empty"));
        }
        for (k, f) in frames.iter().enumerate() {
            check_shape(f, l, n, &format!("frame {k}"))?;
            if f.iter().any(|v| !v.is_finite()) {
                return Err(UnmixError::Numeric(format!("frame {k} holds a non-finite value")));
            }
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[Matrix] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Matrix> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.frames[0].nrows()
    }

    pub fn pixels(&self) -> usize {
        self.frames[0].ncols()
    }
}

/// Fixed reference endmembers `S_0` (L x P).
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSpectra(Matrix);

impl ReferenceSpectra {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.nrows() == 0 || m.ncols() == 0 {
            return Err(dim_err("reference spectra must be non-empty"));
        }
        check_nonnegative(&m, "reference spectra")?;
        if let Some(p) = (0..m.ncols()).find(|&p| m.column(p).iter().all(|v| *v == 0.0)) {
            return Err(UnmixError::Domain(format!("reference spectrum {p} is identically zero")));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn channels(&self) -> usize {
        self.0.nrows()
    }

    pub fn sources(&self) -> usize {
        self.0.ncols()
    }

    /// `S_0 diag(psi_k)` for one row of a scale series.
    pub fn scaled(&self, psi: &ScaleSeries, k: usize) -> Matrix {
        let mut out = self.0.clone();
        for (p, mut col) in out.column_iter_mut().enumerate() {
            col *= psi.get(k, p);
        }
        out
    }
}

macro_rules! trajectory {
    ($(#[$doc:meta])* $name:ident, $what:literal) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name(Vec<Matrix>);

        impl $name {
            /// Validates equal shapes and nonnegative entries.
            pub fn new(frames: Vec<Matrix>) -> Result<Self> {
                let first = frames.first().ok_or_else(|| dim_err(concat!($what, " is empty")))?;
                let (r, c) = first.shape();
                for (k, f) in frames.iter().enumerate() {
                    check_shape(f, r, c, &format!(concat!($what, " frame {}"), k))?;
                    check_nonnegative(f, &format!(concat!($what, " frame {}"), k))?;
                }
                Ok(Self(frames))
            }

            pub(crate) fn from_frames_unchecked(frames: Vec<Matrix>) -> Self {
                Self(frames)
            }

            pub fn frames(&self) -> &[Matrix] {
                &self.0
            }

            pub fn into_frames(self) -> Vec<Matrix> {
                self.0
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }
        }

        impl std::ops::Index<usize> for $name {
            type Output = Matrix;
            fn index(&self, k: usize) -> &Matrix {
                &self.0[k]
            }
        }
    };
}

trajectory!(
    /// Per-frame endmember matrices `S_k` (L x P).
    EndmemberTrajectory,
    "endmember trajectory"
);
trajectory!(
    /// Per-frame abundance matrices `A_k` (P x N). No sum-to-one constraint.
    AbundanceTrajectory,
    "abundance trajectory"
);

/// Scale factors `psi_k^p` stored as a K x P matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSeries(Matrix);

impl ScaleSeries {
    pub fn new(m: Matrix) -> Result<Self> {
        check_nonnegative(&m, "scale series")?;
        Ok(Self(m))
    }

    pub fn ones(frames: usize, sources: usize) -> Self {
        Self(Matrix::from_element(frames, sources, 1.0))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn frames(&self) -> usize {
        self.0.nrows()
    }

    pub fn sources(&self) -> usize {
        self.0.ncols()
    }

    pub fn get(&self, k: usize, p: usize) -> f64 {
        self.0[(k, p)]
    }
}

/// Noise levels of the generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma_e: f64,
    pub sigma_v: f64,
    pub b: f64,
    pub change_density: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { sigma_e: 5e-2, sigma_v: 5e-2, b: 1e-2, change_density: 0.05, seed: 0 }
    }
}

impl NoiseSpec {
    pub fn noiseless(seed: u64) -> Self {
        Self { sigma_e: 0.0, sigma_v: 0.0, b: 0.0, change_density: 0.0, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.sigma_e) && ok(self.sigma_v) && ok(self.b)) {
            return Err(UnmixError::Config(format!("noise levels must be finite and >= 0: {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.change_density) {
            return Err(UnmixError::Config(format!(
                "change density {} outside [0, 1]",
                self.change_density
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

/// Image grid plus one circle per source. Pixel `(x, y)` has index `y * width + x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircleGeometry {
    pub width: usize,
    pub height: usize,
    pub circles: Vec<Circle>,
}

impl CircleGeometry {
    /// The 50 x 50 three-circle layout, or a ring of overlapping circles for other sizes.
    pub fn default_for(width: usize, height: usize, sources: usize) -> Self {
        if width == 50 && height == 50 && sources == 3 {
            let c = |cx, cy| Circle { cx, cy, radius: 15.0 };
            return Self { width, height, circles: vec![c(17.0, 17.0), c(33.0, 17.0), c(25.0, 35.0)] };
        }
        let side = width.min(height) as f64;
        let (mx, my) = (((width - 1) / 2) as f64, ((height - 1) / 2) as f64);
        if sources == 1 {
            let circle = Circle { cx: mx, cy: my, radius: 0.3 * side };
            return Self { width, height, circles: vec![circle] };
        }
        let ring = 0.25 * side;
        let circles: Vec<Circle> = (0..sources)
            .map(|p| {
                let t = 2.0 * PI * p as f64 / sources as f64;
                Circle { cx: (mx + ring * t.cos()).round(), cy: (my + ring * t.sin()).round(), radius: 0.0 }
            })
            .collect();
        // Neighbouring circles overlap, yet no circle reaches another centre.
        let min_gap = circles
            .iter()
            .enumerate()
            .flat_map(|(i, a)| circles[i + 1..].iter().map(move |b| (a.cx - b.cx).hypot(a.cy - b.cy)))
            .fold(f64::INFINITY, f64::min);
        let radius = 0.75 * min_gap;
        Self { width, height, circles: circles.into_iter().map(|c| Circle { radius, ..c }).collect() }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    fn validate(&self, dims: &Dims) -> Result<()> {
        if self.pixels() != dims.pixels {
            return Err(UnmixError::Config(format!(
                "grid {}x{} does not match pixel count {}",
                self.width, self.height, dims.pixels
            )));
        }
        if self.circles.len() != dims.sources {
            return Err(UnmixError::Config(format!(
                "{} circles for {} sources",
                self.circles.len(),
                dims.sources
            )));
        }
        for (p, c) in self.circles.iter().enumerate() {
            let inside = c.cx >= 0.0
                && c.cy >= 0.0
                && c.cx <= (self.width - 1) as f64
                && c.cy <= (self.height - 1) as f64;
            if !inside || !(c.radius > 0.0) {
                return Err(UnmixError::Config(format!("circle {p} {c:?} lies outside the grid")));
            }
        }
        Ok(())
    }
}

/// First-frame abundances (P x N) built from overlapping discs.
///
/// A pixel covered by `m` discs gets `1/m` on each of them; uncovered pixels go
/// entirely to the source with the nearest centre (lowest index on ties).
pub fn make_circle_abundances(dims: &Dims, geometry: &CircleGeometry) -> Result<Matrix> {
    geometry.validate(dims)?;
    let mut a = Matrix::zeros(dims.sources, dims.pixels);
    let mut covering = Vec::with_capacity(dims.sources);
    for y in 0..geometry.height {
        for x in 0..geometry.width {
            let n = y * geometry.width + x;
            let dist2 = |c: &Circle| (x as f64 - c.cx).powi(2) + (y as f64 - c.cy).powi(2);
            covering.clear();
            covering.extend(
                geometry
                    .circles
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| dist2(c) <= c.radius * c.radius)
                    .map(|(p, _)| p),
            );
            if covering.is_empty() {
                let mut nearest = 0;
                for (p, c) in geometry.circles.iter().enumerate() {
                    if dist2(c) < dist2(&geometry.circles[nearest]) {
                        nearest = p;
                    }
                }
                a[(nearest, n)] = 1.0;
            } else {
                let share = 1.0 / covering.len() as f64;
                for &p in &covering {
                    a[(p, n)] = share;
                }
            }
        }
    }
    Ok(a)
}

/// `psi_k^p = 1 + amplitude * sin(2 pi k / K + 2 pi p / P)` with zero-based `k`, `p`.
pub fn make_sinusoid_scales(dims: &Dims, amplitude: f64) -> Result<ScaleSeries> {
    if !(0.0..1.0).contains(&amplitude) {
        return Err(UnmixError::Config(format!("sinusoid amplitude {amplitude} must lie in [0, 1)")));
    }
    let (k_total, p_total) = (dims.frames as f64, dims.sources as f64);
    let m = Matrix::from_fn(dims.frames, dims.sources, |k, p| {
        let phase = 2.0 * PI * p as f64 / p_total;
        1.0 + amplitude * (2.0 * PI * k as f64 / k_total + phase).sin()
    });
    Ok(ScaleSeries(m))
}

/// Smooth synthetic spectra: three Gaussian bumps per source, peak-normalized.
///
/// The 3P bump centres are drawn in distinct, interleaved segments of the
/// channel axis, so no two sources share a peak.
pub fn gaussian_bump_spectra(channels: usize, sources: usize, seed: u64) -> Result<ReferenceSpectra> {
    if channels == 0 || sources == 0 {
        return Err(UnmixError::Config("spectra need at least one channel and one source".into()));
    }
    const BUMPS: usize = 3;
    let mut rng = NoiseStream::new(seed, Stream::ReferenceSpectra);
    let segment = channels as f64 / (BUMPS * sources) as f64;
    let l = channels as f64;
    let mut m = Matrix::zeros(channels, sources);
    for p in 0..sources {
        for j in 0..BUMPS {
            let s = (j * sources + p) as f64;
            let center = rng.uniform_in(s * segment, (s + 1.0) * segment);
            let width = rng.uniform_in(l / 50.0, l / 15.0).max(0.5);
            let height = rng.uniform_in(0.5, 1.0);
            for c in 0..channels {
                let z = (c as f64 - center) / width;
                m[(c, p)] += height * (-0.5 * z * z).exp();
            }
        }
        let peak = m.column(p).max();
        m.column_mut(p).unscale_mut(peak);
    }
    ReferenceSpectra::new(m)
}

/// Where the generator takes `S_0` from.
#[derive(Debug, Clone, PartialEq)]
pub enum SpectraSource {
    Bumps { seed: u64 },
    Given(ReferenceSpectra),
}

/// Everything the generator needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub dims: Dims,
    pub geometry: CircleGeometry,
    pub noise: NoiseSpec,
    pub amplitude: f64,
    pub spectra: SpectraSource,
}

impl Scenario {
    /// Ten frames, 129 channels, a 50 x 50 grid and three sources with the
    /// default noise levels.
    pub fn benchmark(seed: u64) -> Self {
        let (width, height) = (50, 50);
        Self {
            dims: Dims { frames: 10, channels: 129, pixels: width * height, sources: 3 },
            geometry: CircleGeometry::default_for(width, height, 3),
            noise: NoiseSpec { seed, ..NoiseSpec::default() },
            amplitude: 0.2,
            spectra: SpectraSource::Bumps { seed: 0 },
        }
    }
}

/// Latent variables of a generated scene, plus the realized perturbations.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub s: EndmemberTrajectory,
    pub a: AbundanceTrajectory,
    pub psi: ScaleSeries,
    pub s0: ReferenceSpectra,
    /// `E_k = X_k - S_k A_k`.
    pub noise: Vec<Matrix>,
    /// `V_k = S_k - S_0 psi_k`, clamping included.
    pub distortions: Vec<Matrix>,
    /// `D_k = A_k - A_{k-1}` for k = 2..K, clamping included.
    pub changes: Vec<Matrix>,
}

/// `X_k = S_k A_k` for every frame.
pub fn forward_mix(s: &EndmemberTrajectory, a: &AbundanceTrajectory) -> Result<FrameSequence> {
    if s.len() != a.len() {
        return Err(dim_err(format!("{} endmember frames vs {} abundance frames", s.len(), a.len())));
    }
    let frames = s
        .frames()
        .iter()
        .zip(a.frames())
        .enumerate()
        .map(|(k, (sk, ak))| {
            if sk.ncols() != ak.nrows() {
                return Err(dim_err(format!(
                    "frame {k}: S is {}x{} but A is {}x{}",
                    sk.nrows(),
                    sk.ncols(),
                    ak.nrows(),
                    ak.ncols()
                )));
            }
            Ok(sk * ak)
        })
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames)
}

/// Bernoulli(`change_density`) mask times Laplacian(`b`) magnitudes, drawn in
/// column-major order; a magnitude is drawn only where the mask is set.
fn sparse_laplacian(
    rows: usize,
    cols: usize,
    noise: &NoiseSpec,
    mask: &mut NoiseStream,
    magnitude: &mut NoiseStream,
) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        if mask.bernoulli(noise.change_density) {
            magnitude.laplacian(noise.b)
        } else {
            0.0
        }
    })
}

/// Draws a scene from the simplified dynamical model.
pub fn generate_synthetic(scenario: &Scenario) -> Result<(FrameSequence, GroundTruth)> {
    generate(scenario, true)
}

/// Variant with `V_k = 0`, so `X_k = S_0 psi_k A_k + E_k`.
pub fn generate_ntf1(scenario: &Scenario) -> Result<(FrameSequence, GroundTruth)> {
    generate(scenario, false)
}

fn generate(scenario: &Scenario, with_distortion: bool) -> Result<(FrameSequence, GroundTruth)> {
    let dims = &scenario.dims;
    dims.validate()?;
    let noise = &scenario.noise;
    noise.validate()?;

    let s0 = match &scenario.spectra {
        SpectraSource::Bumps { seed } => gaussian_bump_spectra(dims.channels, dims.sources, *seed)?,
        SpectraSource::Given(s0) => {
            if s0.matrix().shape() != (dims.channels, dims.sources) {
                return Err(dim_err(format!(
                    "reference spectra are {}x{}, expected {}x{}",
                    s0.channels(),
                    s0.sources(),
                    dims.channels,
                    dims.sources
                )));
            }
            s0.clone()
        }
    };

    let a1 = make_circle_abundances(dims, &scenario.geometry)?;
    let psi = make_sinusoid_scales(dims, scenario.amplitude)?;

    let mut mask = NoiseStream::new(noise.seed, Stream::ChangeMask);
    let mut magnitude = NoiseStream::new(noise.seed, Stream::ChangeMagnitude);
    let mut abundances = Vec::with_capacity(dims.frames);
    let mut changes = Vec::with_capacity(dims.frames.saturating_sub(1));
    abundances.push(a1);
    for _ in 1..dims.frames {
        let prev = abundances.last().expect("first frame present");
        let draw = sparse_laplacian(dims.sources, dims.pixels, noise, &mut mask, &mut magnitude);
        let next = (prev + draw).map(|v| v.max(0.0));
        changes.push(&next - prev);
        abundances.push(next);
    }

    let mut distortion = NoiseStream::new(noise.seed, Stream::SpectralDistortion);
    let mut endmembers = Vec::with_capacity(dims.frames);
    let mut distortions = Vec::with_capacity(dims.frames);
    for k in 0..dims.frames {
        let nominal = s0.scaled(&psi, k);
        let sk = if with_distortion {
            nominal.map(|v| (v + distortion.normal(noise.sigma_v)).max(0.0))
        } else {
            nominal.clone()
        };
        distortions.push(&sk - &nominal);
        endmembers.push(sk);
    }

    let mut observation = NoiseStream::new(noise.seed, Stream::ObservationNoise);
    let mut frames = Vec::with_capacity(dims.frames);
    let mut residuals = Vec::with_capacity(dims.frames);
    for (sk, ak) in endmembers.iter().zip(&abundances) {
        let clean = sk * ak;
        let xk = clean.map(|v| v + observation.normal(noise.sigma_e));
        residuals.push(&xk - &clean);
        frames.push(xk);
    }

    let truth = GroundTruth {
        s: EndmemberTrajectory::from_frames_unchecked(endmembers),
        a: AbundanceTrajectory::from_frames_unchecked(abundances),
        psi,
        s0,
        noise: residuals,
        distortions,
        changes,
    };
    Ok((FrameSequence::new(frames)?, truth))
}
