use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use hsunmix::model::{CircleGeometry, SpectraSource};
use hsunmix::{io, Dims, Hyperparams, NoiseSpec, Scenario, SpectralWeight};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "hsunmix", version, about = "Joint spectral unmixing of hyperspectral image sequences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic scene and write the observations and ground truth.
    Generate(GenerateArgs),
    /// Unmix all frames jointly.
    UnmixJoint(JointArgs),
    /// Unmix each frame on its own and align sources to a reference.
    UnmixSeparate(SeparateArgs),
    /// Score an estimate directory against a truth directory.
    Evaluate(EvaluateArgs),
    /// Run both unmixers over several seeded scenes.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScenarioArgs {
    /// Frames.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Spectral channels.
    #[arg(long, default_value_t = 129)]
    pub l: usize,
    #[arg(long, default_value_t = 50)]
    pub width: usize,
    #[arg(long, default_value_t = 50)]
    pub height: usize,
    /// Sources.
    #[arg(long, default_value_t = 3)]
    pub p: usize,
    #[arg(long, default_value_t = 0.05)]
    pub sigma_e: f64,
    #[arg(long, default_value_t = 0.05)]
    pub sigma_v: f64,
    /// Laplacian scale of abundance changes.
    #[arg(long, default_value_t = 0.01)]
    pub b: f64,
    #[arg(long, default_value_t = 0.05)]
    pub change_density: f64,
    /// Relative amplitude of the sinusoidal scale factors.
    #[arg(long, default_value_t = 0.2)]
    pub amplitude: f64,
    /// Reference spectra (CSV, L x P) instead of generated ones.
    #[arg(long)]
    pub s0: Option<PathBuf>,
    /// Seed of the generated reference spectra.
    #[arg(long, default_value_t = 0)]
    pub spectra_seed: u64,
}

impl ScenarioArgs {
    pub fn scenario(&self, seed: u64) -> hsunmix::Result<Scenario> {
        let spectra = match &self.s0 {
            Some(path) => SpectraSource::Given(io::read_reference_csv(path)?),
            None => SpectraSource::Bumps { seed: self.spectra_seed },
        };
        let dims = Dims::new(self.k, self.l, self.width * self.height, self.p)?;
        Ok(Scenario {
            dims,
            geometry: CircleGeometry::default_for(self.width, self.height, self.p),
            noise: NoiseSpec {
                sigma_e: self.sigma_e,
                sigma_v: self.sigma_v,
                b: self.b,
                change_density: self.change_density,
                seed,
            },
            amplitude: self.amplitude,
            spectra,
        })
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Observation sequence (HSTS1).
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for S.hsts, A.hsts, psi.csv and s0.csv.
    #[arg(long)]
    pub truth_dir: Option<PathBuf>,
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Solver overrides; unset fields keep the base configuration.
#[derive(Debug, Clone, Args, Serialize)]
pub struct SolverArgs {
    /// One weight for all sources, or a comma-separated list with one per source.
    #[arg(long, value_parser = parse_weight)]
    pub lambda_s: Option<SpectralWeight>,
    #[arg(long)]
    pub lambda_a: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub eps_s: Option<f64>,
    #[arg(long)]
    pub eps_a: Option<f64>,
    #[arg(long)]
    pub max_outer: Option<usize>,
    #[arg(long)]
    pub max_inner: Option<usize>,
    #[arg(long)]
    pub admm_eps_abs: Option<f64>,
    #[arg(long)]
    pub admm_eps_rel: Option<f64>,
}

impl SolverArgs {
    pub fn apply(&self, mut h: Hyperparams) -> Hyperparams {
        if let Some(w) = &self.lambda_s {
            h.lambda_s = w.clone();
        }
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut h.lambda_a, self.lambda_a);
        set(&mut h.rho, self.rho);
        set(&mut h.eps_s, self.eps_s);
        set(&mut h.eps_a, self.eps_a);
        set(&mut h.admm_eps_abs, self.admm_eps_abs);
        set(&mut h.admm_eps_rel, self.admm_eps_rel);
        h.max_outer = self.max_outer.unwrap_or(h.max_outer);
        h.max_inner = self.max_inner.unwrap_or(h.max_inner);
        h
    }
}

fn parse_weight(s: &str) -> Result<SpectralWeight, String> {
    let values = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err("weights must be finite and >= 0".into());
    }
    Ok(match values.as_slice() {
        [w] => SpectralWeight::Uniform(*w),
        _ => SpectralWeight::PerSource(values),
    })
}

#[derive(Debug, Args)]
pub struct JointArgs {
    /// Observation sequence (HSTS1).
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Reference spectra (CSV, L x P).
    #[arg(long)]
    pub s0: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// `default`, or a directory holding S.hsts, A.hsts and psi.csv to start from.
    #[arg(long, default_value = "default")]
    pub init: String,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Image width for abundance graymaps (requires --height).
    #[arg(long, requires = "height")]
    pub width: Option<usize>,
    #[arg(long, requires = "width")]
    pub height: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SeparateArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub p: usize,
    /// Reference spectra used for source alignment (CSV, L x P).
    #[arg(long)]
    pub s_ref: PathBuf,
    /// Recorded in the report; the extraction itself is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, requires = "height")]
    pub width: Option<usize>,
    #[arg(long, requires = "width")]
    pub height: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub est_dir: PathBuf,
    #[arg(long)]
    pub truth_dir: PathBuf,
    /// JSON report path.
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    /// Seed of the first trial; trial t uses seed + t.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Joint solver overrides. Without them the weights follow from the noise levels.
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Per-trial metrics CSV.
    #[arg(long)]
    pub out: PathBuf,
}
