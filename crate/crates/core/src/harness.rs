//! End-to-end experiments: simulate on a fine mesh, add noise, reconstruct
//! on a distinct coarse mesh, score against the transferred truth, and write
//! artifacts.

use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forward::{
    default_wavenumber, write_measurements, ForwardModel, MeasurementMeta, MeasurementSet, SourceBank,
    FLATTENING_ORDER,
};
use crate::irgn::{run_irgn, IrgnConfig, IrgnReport, Termination, Tikhonov};
use crate::mcmc::{
    diagnostics, posterior_mean, run_pilot_metropolis, Chain, Covariance, Diagnostics, DotPosterior,
    SamplerConfig, Schedule,
};
use crate::mesh::{
    edge_adjacency, generate_disk_mesh, load_mesh, transfer_field, EdgeAdjacency, Mesh, TriangleLocator,
};
use crate::phantom::{rasterize, Bounds, OpticalValues, ParameterField, Phantom};
use crate::problem::{BoxBounds, DotProblem};
use crate::regularizers::{graph_laplacian, Regularizer, RegularizerSpec};

pub const CONFIG_VERSION: u32 = 1;

/// Environment variable naming the root directory for relative output paths.
pub const OUTPUT_ROOT_ENV: &str = "DOT_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum MeshSpec {
    File { path: PathBuf },
    Generate { radius: f64, triangles: usize, seed: u64 },
}

impl MeshSpec {
    /// Relative file paths resolve against `base_dir`.
    pub fn build(&self, base_dir: &Path) -> Result<Mesh> {
        match self {
            MeshSpec::File { path } => load_mesh(base_dir.join(path)),
            MeshSpec::Generate {
                radius,
                triangles,
                seed,
            } => generate_disk_mesh(*radius, *triangles, *seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Engine {
    Irgn,
    Mcmc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSpec {
    /// Number of trigonometric sources cos(jθ), sin(jθ), …
    pub count: usize,
    pub amplitude: f64,
}

impl Default for SourceSpec {
    fn default() -> Self {
        SourceSpec {
            count: 16,
            amplitude: 1.0,
        }
    }
}

impl SourceSpec {
    pub fn bank(&self, mesh: &Mesh) -> SourceBank {
        SourceBank::trigonometric(mesh, self.count, self.amplitude, [0.0, 0.0])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcSettings {
    pub schedule: Schedule,
    pub target_acceptance: f64,
    pub epsilon: f64,
    pub thin: usize,
    /// Prior strength α.
    pub prior_strength: f64,
    /// Initial proposal standard deviation as a fraction of the background.
    pub initial_scale: f64,
    /// IRGN iterations used to produce the starting state (0 = background).
    pub start_irgn_iterations: usize,
    /// When set, the start iterations use `α₀ = factor·ξ²` instead of the
    /// `[irgn]` value, so the Tikhonov term keeps pace with the noise energy.
    pub start_alpha_noise_factor: Option<f64>,
}

impl Default for McmcSettings {
    fn default() -> Self {
        McmcSettings {
            schedule: Schedule::FULL,
            target_acceptance: 0.234,
            epsilon: 0.05,
            thin: 10,
            prior_strength: 100.0,
            initial_scale: 0.01,
            start_irgn_iterations: 3,
            start_alpha_noise_factor: Some(0.016),
        }
    }
}

impl McmcSettings {
    pub fn sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            schedule: self.schedule,
            target_acceptance: self.target_acceptance,
            epsilon: self.epsilon,
            thin: self.thin,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizerSettings {
    pub inner: Regularizer,
    pub beta1: f64,
    pub beta2: f64,
    /// Expected backgrounds; default to the phantom background.
    pub mu_background: Option<f64>,
    pub mus_background: Option<f64>,
}

impl Default for RegularizerSettings {
    fn default() -> Self {
        RegularizerSettings {
            inner: Regularizer::Tv,
            beta1: 0.5,
            beta2: 0.5,
            mu_background: None,
            mus_background: None,
        }
    }
}

impl RegularizerSettings {
    pub fn spec(&self, background: OpticalValues) -> RegularizerSpec {
        RegularizerSpec {
            inner: self.inner.clone(),
            beta1: self.beta1,
            beta2: self.beta2,
            mu_background: self.mu_background.unwrap_or(background.mu),
            mus_background: self.mus_background.unwrap_or(background.reduced_scattering()),
            weights: None,
        }
    }
}

/// Grid of overrides explored by [`sweep`]; empty lists keep the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub alpha0: Vec<f64>,
    pub prior_strength: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub noise_level: f64,
    pub engine: Engine,
    /// Modulation wavenumber k in mm⁻¹; defaults to 100 MHz in tissue.
    pub wavenumber: Option<f64>,
    pub output_dir: PathBuf,
    pub fine_mesh: MeshSpec,
    pub coarse_mesh: MeshSpec,
    pub phantom: Phantom,
    pub sources: SourceSpec,
    pub bounds: Bounds,
    pub irgn: IrgnConfig,
    pub mcmc: McmcSettings,
    pub regularizer: RegularizerSettings,
    pub sweep: SweepSpec,
    /// Subtract the fine-vs-coarse model mismatch evaluated at the background
    /// from the data before reconstructing.
    pub model_error_correction: bool,
}

/// Radius of the default disk domain in mm.
pub const DEFAULT_RADIUS: f64 = 10.0;

impl Default for ExperimentConfig {
    fn default() -> Self {
        let bg = OpticalValues::default();
        ExperimentConfig {
            version: CONFIG_VERSION,
            seed: 1,
            noise_level: 0.01,
            engine: Engine::Mcmc,
            wavenumber: None,
            output_dir: PathBuf::from("dot-output"),
            fine_mesh: MeshSpec::Generate {
                radius: DEFAULT_RADIUS,
                triangles: 2000,
                seed: 11,
            },
            coarse_mesh: MeshSpec::Generate {
                radius: DEFAULT_RADIUS,
                triangles: 541,
                seed: 3,
            },
            phantom: Phantom::single_circle(bg, [4.5, 0.0], 2.5),
            sources: SourceSpec::default(),
            bounds: Bounds::default(),
            irgn: IrgnConfig::default(),
            mcmc: McmcSettings::default(),
            regularizer: RegularizerSettings::default(),
            sweep: SweepSpec::default(),
            model_error_correction: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::Config(format!("noise level must be ≥ 0, got {}", self.noise_level)));
        }
        if self.fine_mesh == self.coarse_mesh {
            return Err(Error::Config(
                "fine and coarse meshes must differ (simulating and reconstructing on one mesh is an inverse crime)"
                    .into(),
            ));
        }
        if let Some(k) = self.wavenumber {
            if !(k >= 0.0) {
                return Err(Error::Config(format!("wavenumber must be ≥ 0, got {k}")));
            }
        }
        if self.sources.count == 0 || !(self.sources.amplitude > 0.0) {
            return Err(Error::Config("need at least one source with positive amplitude".into()));
        }
        self.phantom.validate(&self.bounds).map_err(|e| Error::Config(e.to_string()))?;
        self.irgn.validate()?;
        if self.engine == Engine::Mcmc {
            self.mcmc.sampler(self.seed).validate()?;
            if !(self.mcmc.prior_strength > 0.0 && self.mcmc.initial_scale > 0.0) {
                return Err(Error::Config("prior strength and initial scale must be positive".into()));
            }
            if let Some(c) = self.mcmc.start_alpha_noise_factor {
                if !(c > 0.0 && c.is_finite()) {
                    return Err(Error::Config(format!("start_alpha_noise_factor must be positive, got {c}")));
                }
            }
            if self.noise_level == 0.0 {
                return Err(Error::Config("the statistical engine needs a positive noise level".into()));
            }
        }
        self.regularizer
            .spec(self.phantom.background)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn wavenumber(&self) -> f64 {
        self.wavenumber.unwrap_or_else(default_wavenumber)
    }

    /// Output directory, resolved against `$DOT_OUTPUT_ROOT` when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Meshes, truth fields and forward models of one experiment.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub fine: Mesh,
    pub truth_fine: ParameterField,
    pub fine_model: ForwardModel,
    /// Truth sampled onto the coarse mesh; all metrics use this.
    pub truth_coarse: ParameterField,
    pub problem: DotProblem,
    pub adjacency: EdgeAdjacency,
    /// Resampled fine-mesh data minus coarse-mesh data, both at the
    /// homogeneous background (flattened); `None` when correction is off.
    pub model_offset: Option<Vec<f64>>,
}

impl Scenario {
    pub fn coarse(&self) -> &Mesh {
        &self.problem.model.mesh
    }

    /// The data the reconstruction engines fit: `g − offset` when a model
    /// offset is present, `g` otherwise. The noise model is carried over.
    pub fn fitted_data(&self, g: &MeasurementSet) -> Result<MeasurementSet> {
        let Some(offset) = &self.model_offset else {
            return Ok(g.clone());
        };
        let flat = g.flatten();
        if flat.len() != offset.len() || g.boundary_nodes != self.coarse().boundary_nodes() {
            return Err(Error::Dimension {
                what: "measurements",
                expected: offset.len(),
                got: flat.len(),
            });
        }
        let shifted: Vec<f64> = flat.iter().zip(offset).map(|(a, b)| a - b).collect();
        let mut out = MeasurementSet::from_flat(g.boundary_nodes.clone(), &shifted)?;
        out.noise_sigma = g.noise_sigma.clone();
        Ok(out)
    }
}

pub fn build_scenario(cfg: &ExperimentConfig, base_dir: &Path) -> Result<Scenario> {
    let fine = cfg.fine_mesh.build(base_dir)?;
    let coarse = cfg.coarse_mesh.build(base_dir)?;
    if fine == coarse {
        return Err(Error::Config("fine and coarse meshes are identical".into()));
    }
    let truth_fine = rasterize(&cfg.phantom, &fine, &cfg.bounds)?;
    let bg = cfg.phantom.background;
    let truth_coarse = ParameterField {
        d: transfer_field(&fine, &truth_fine.d, &coarse)?,
        mu: transfer_field(&fine, &truth_fine.mu, &coarse)?,
        boundary_background: bg,
    };
    let k = cfg.wavenumber();
    let fine_model = ForwardModel::new(fine.clone(), k, cfg.sources.bank(&fine))?;
    let coarse_model = ForwardModel::new(coarse.clone(), k, cfg.sources.bank(&coarse))?;
    let adjacency = edge_adjacency(&coarse);
    let base = ParameterField::constant(coarse.triangle_count(), bg);
    let model_offset = if cfg.model_error_correction {
        let f = fine_model.forward_map(&ParameterField::constant(fine.triangle_count(), bg))?;
        let f = resample_boundary(&f, &fine, &coarse)?.flatten();
        let c = coarse_model.forward_map(&base)?.flatten();
        Some(f.iter().zip(&c).map(|(a, b)| a - b).collect())
    } else {
        None
    };
    let problem = DotProblem::new(coarse_model, base);
    Ok(Scenario {
        fine,
        truth_fine,
        fine_model,
        truth_coarse,
        problem,
        adjacency,
        model_offset,
    })
}

/// Interpolates fine-mesh boundary traces at the coarse boundary nodes with
/// periodic four-point cubic Lagrange interpolation in the polar angle.
pub fn resample_boundary(set: &MeasurementSet, fine: &Mesh, coarse: &Mesh) -> Result<MeasurementSet> {
    use std::f64::consts::TAU;
    if set.boundary_nodes != fine.boundary_nodes() {
        return Err(Error::InvalidArgument("measurements are not on the fine boundary".into()));
    }
    let angle = |p: [f64; 2]| p[1].atan2(p[0]).rem_euclid(TAU);
    let mut order: Vec<(f64, usize)> = fine
        .boundary_nodes()
        .iter()
        .enumerate()
        .map(|(i, &n)| (angle(fine.nodes()[n]), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let nb = order.len();
    if nb < 4 {
        return Err(Error::InvalidArgument("fine boundary needs at least 4 nodes".into()));
    }
    // Angle of the sorted node at (possibly wrapped) position i.
    let theta = |i: isize| {
        let wraps = i.div_euclid(nb as isize);
        order[i.rem_euclid(nb as isize) as usize].0 + wraps as f64 * TAU
    };
    let weights: Vec<[(usize, f64); 4]> = coarse
        .boundary_nodes()
        .iter()
        .map(|&n| {
            let t = angle(coarse.nodes()[n]);
            // Last sorted node with angle ≤ t (−1 wraps to the end).
            let j = order.partition_point(|&(a, _)| a <= t) as isize - 1;
            let stencil = [j - 1, j, j + 1, j + 2];
            let ts = stencil.map(theta);
            let mut w = [(0, 0.0); 4];
            for (a, &i) in stencil.iter().enumerate() {
                let mut l = 1.0;
                for b in 0..4 {
                    if b != a {
                        l *= (t - ts[b]) / (ts[a] - ts[b]);
                    }
                }
                w[a] = (order[i.rem_euclid(nb as isize) as usize].1, l);
            }
            w
        })
        .collect();
    Ok(MeasurementSet {
        boundary_nodes: coarse.boundary_nodes().to_vec(),
        traces: set
            .traces
            .iter()
            .map(|tr| {
                weights
                    .iter()
                    .map(|w| w.iter().map(|&(i, l)| tr[i] * l).sum())
                    .collect()
            })
            .collect(),
        noise_sigma: None,
    })
}

/// Noise-free data on the coarse boundary: solve on the fine mesh and resample.
pub fn simulate(scn: &Scenario) -> Result<MeasurementSet> {
    let fine = scn.fine_model.forward_map(&scn.truth_fine)?;
    resample_boundary(&fine, &scn.fine, scn.coarse())
}

/// Adds relative Gaussian noise `level·|gᵢ|·zᵢ` to every real component of
/// the flattened data. Returns the noisy set (with σᵢ = level·max(|gᵢ|,
/// mean|g|) recorded) and the realized noise norm ξ = ‖g − g^γ‖.
pub fn add_noise(g: &MeasurementSet, level: f64, seed: u64) -> Result<(MeasurementSet, f64)> {
    if !(level >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise level must be ≥ 0, got {level}")));
    }
    let clean = g.flatten();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let noisy: Vec<f64> = clean
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + level * v.abs() * z
        })
        .collect();
    let xi = clean
        .iter()
        .zip(&noisy)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let mean_abs = clean.iter().map(|v| v.abs()).sum::<f64>() / clean.len().max(1) as f64;
    let sigma = clean.iter().map(|v| level * v.abs().max(mean_abs)).collect();
    let mut out = MeasurementSet::from_flat(g.boundary_nodes.clone(), &noisy)?;
    out.noise_sigma = Some(sigma);
    Ok((out, xi))
}

/// Area-weighted `‖truth − recon‖_p / ‖truth‖_p` for p ∈ {1, 2}.
pub fn relative_error(truth: &[f64], recon: &[f64], areas: &[f64], p: u32) -> Result<f64> {
    if recon.len() != truth.len() || areas.len() != truth.len() {
        return Err(Error::Dimension {
            what: "field",
            expected: truth.len(),
            got: if recon.len() != truth.len() { recon.len() } else { areas.len() },
        });
    }
    let norm = |f: &dyn Fn(usize) -> f64| -> f64 {
        let s: f64 = (0..truth.len()).map(|i| areas[i] * f(i).abs().powi(p as i32)).sum();
        s.powf(1.0 / p as f64)
    };
    match p {
        1 | 2 => {}
        _ => return Err(Error::InvalidArgument(format!("p must be 1 or 2, got {p}"))),
    }
    let denom = norm(&|i| truth[i]);
    if denom == 0.0 {
        return Err(Error::InvalidArgument("truth has zero norm".into()));
    }
    Ok(norm(&|i| truth[i] - recon[i]) / denom)
}

/// ‖Θ(q) − g‖ on the reconstruction mesh.
pub fn residual_error(model: &ForwardModel, q: &ParameterField, g: &MeasurementSet) -> Result<f64> {
    let theta = model.forward_map(q)?.flatten();
    let data = g.flatten();
    if theta.len() != data.len() {
        return Err(Error::Dimension {
            what: "measurements",
            expected: theta.len(),
            got: data.len(),
        });
    }
    Ok(theta.iter().zip(&data).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
}

/// Fraction of elevated-absorption triangles whose centroid lies in an
/// inclusion. A triangle is elevated when `μ − μ_bg > ½ (max μ − μ_bg)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub elevated: usize,
    pub inside: usize,
}

impl Localization {
    pub fn fraction(&self) -> f64 {
        if self.elevated == 0 {
            0.0
        } else {
            self.inside as f64 / self.elevated as f64
        }
    }

    pub fn majority_inside(&self) -> bool {
        2 * self.inside > self.elevated
    }
}

pub fn localization(recon: &ParameterField, mesh: &Mesh, phantom: &Phantom) -> Localization {
    let bg = phantom.background.mu;
    let peak = recon.mu.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(peak > bg) {
        return Localization { elevated: 0, inside: 0 };
    }
    let cut = bg + 0.5 * (peak - bg);
    let elevated: Vec<usize> = (0..recon.len()).filter(|&t| recon.mu[t] > cut).collect();
    let inside = elevated
        .iter()
        .filter(|&&t| {
            let c = mesh.centroid(t);
            phantom.inclusions.iter().any(|inc| inc.shape.contains(c))
        })
        .count();
    Localization {
        elevated: elevated.len(),
        inside,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mu_l1: f64,
    pub mu_l2: f64,
    pub d_l1: f64,
    pub d_l2: f64,
    /// ‖Θ(q) − g^γ‖ against the data the engine fitted (model-error
    /// corrected when enabled).
    pub residual: f64,
    pub localization: Localization,
}

pub fn compute_metrics(scn: &Scenario, phantom: &Phantom, recon: &ParameterField, data: &MeasurementSet) -> Result<Metrics> {
    let areas = scn.coarse().areas();
    let t = &scn.truth_coarse;
    Ok(Metrics {
        mu_l1: relative_error(&t.mu, &recon.mu, &areas, 1)?,
        mu_l2: relative_error(&t.mu, &recon.mu, &areas, 2)?,
        d_l1: relative_error(&t.d, &recon.d, &areas, 1)?,
        d_l2: relative_error(&t.d, &recon.d, &areas, 2)?,
        residual: residual_error(&scn.problem.model, recon, data)?,
        localization: localization(recon, scn.coarse(), phantom),
    })
}

/// Engine-specific outcome.
#[derive(Debug, Clone)]
pub enum EngineOutput {
    Irgn(IrgnReport),
    Mcmc {
        start: Option<IrgnReport>,
        chain: Chain,
        diagnostics: Option<Diagnostics>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub engine: Engine,
    pub seed: u64,
    pub noise_level: f64,
    /// Realized noise norm ξ.
    pub xi: f64,
    pub metrics: Metrics,
    pub runtime_seconds: f64,
    pub iterations: Option<usize>,
    pub termination: Option<Termination>,
    pub schedule: Option<Schedule>,
    pub post_pilot_acceptance: Option<f64>,
    pub config_hash: String,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub scenario: Scenario,
    pub clean: MeasurementSet,
    pub data: MeasurementSet,
    pub recon: ParameterField,
    pub output: EngineOutput,
    pub report: ReconstructionReport,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.at_stage(name))
}

/// Scaled graph Laplacian, bounds and background reference for IRGN on `problem`.
fn irgn_inputs(problem: &DotProblem, adjacency: &EdgeAdjacency, bounds: &Bounds) -> (DMatrix<f64>, Vec<f64>, BoxBounds) {
    let l = graph_laplacian(&problem.model.mesh, adjacency, &problem.free).to_dense();
    (l, vec![1.0; problem.free.parameter_count()], problem.scaled_box(bounds))
}

/// Runs IRGN from the background. `xi = 0` (noise-free data) is replaced by a
/// negligible positive bound so the run ends at the iteration cap.
pub fn reconstruct_irgn(
    problem: &DotProblem,
    adjacency: &EdgeAdjacency,
    bounds: &Bounds,
    cfg: &IrgnConfig,
    data: &MeasurementSet,
    xi: f64,
) -> Result<(ParameterField, IrgnReport)> {
    let g = data.flatten();
    let (l, reference, boxb) = irgn_inputs(problem, adjacency, bounds);
    let xi = if xi > 0.0 {
        xi
    } else {
        let floor = f64::EPSILON * g.iter().map(|v| v * v).sum::<f64>().sqrt();
        warn!("noise bound ξ = {xi}; using {floor:e} so discrepancy stopping cannot fire early");
        floor.max(f64::MIN_POSITIVE)
    };
    let report = run_irgn(
        problem,
        &g,
        xi,
        cfg,
        &Tikhonov {
            operator: &l,
            reference: &reference,
        },
        &boxb,
        &reference,
    )?;
    Ok((problem.field(&report.x)?, report))
}

/// Physical box for sampling: D ∈ [d_min, d_max], μ ∈ (0, mu_max].
pub fn physical_box(problem: &DotProblem, bounds: &Bounds) -> BoxBounds {
    let n = problem.free.len();
    let mut lower = vec![bounds.d_min; n];
    lower.extend(std::iter::repeat_n(0.0, n));
    let mut upper = vec![bounds.d_max; n];
    upper.extend(std::iter::repeat_n(bounds.mu_max, n));
    BoxBounds { lower, upper }
}

#[allow(clippy::too_many_arguments)]
pub fn reconstruct_mcmc(
    problem: &DotProblem,
    adjacency: &EdgeAdjacency,
    bounds: &Bounds,
    irgn: &IrgnConfig,
    settings: &McmcSettings,
    regularizer: &RegularizerSpec,
    data: &MeasurementSet,
    xi: f64,
    seed: u64,
) -> Result<(ParameterField, EngineOutput)> {
    let sigma = data
        .noise_sigma
        .clone()
        .ok_or_else(|| Error::InvalidArgument("measurements carry no noise model".into()))?;
    let (x0, start) = if settings.start_irgn_iterations > 0 {
        let alpha0 = match settings.start_alpha_noise_factor {
            Some(c) if xi > 0.0 => c * xi * xi,
            _ => irgn.alpha0,
        };
        let cfg = IrgnConfig {
            max_iterations: settings.start_irgn_iterations,
            alpha0,
            ..irgn.clone()
        };
        let (_, rep) = reconstruct_irgn(problem, adjacency, bounds, &cfg, data, xi)?;
        (problem.to_physical(&rep.x), Some(rep))
    } else {
        (problem.to_physical(&vec![1.0; problem.free.parameter_count()]), None)
    };
    let g = data.flatten();
    let boxb = physical_box(problem, bounds);
    // A start on a face of the box would reject about half of all proposals
    // per active coordinate; keep it three initial proposal widths inside.
    let x0: Vec<f64> = x0
        .iter()
        .zip(&problem.scale)
        .zip(boxb.lower.iter().zip(&boxb.upper))
        .map(|((&x, &s), (&lo, &hi))| {
            let margin = (3.0 * settings.initial_scale * s).min(0.25 * (hi - lo));
            x.clamp(lo + margin, hi - margin)
        })
        .collect();
    let posterior = DotPosterior {
        problem,
        data: &g,
        sigma: &sigma,
        regularizer,
        adjacency,
        alpha: settings.prior_strength,
        bounds: &boxb,
    };
    posterior.validate()?;
    let c0 = Covariance::Diagonal(problem.scale.iter().map(|s| (settings.initial_scale * s).powi(2)).collect());
    let chain = run_pilot_metropolis(&posterior, &settings.sampler(seed), &x0, &c0)?;
    let mean = posterior_mean(&chain)?;
    let diag = match diagnostics(&chain) {
        Ok(d) => Some(d),
        Err(e) => {
            warn!("diagnostics skipped: {e}");
            None
        }
    };
    Ok((
        problem.field_physical(&mean)?,
        EngineOutput::Mcmc {
            start,
            chain,
            diagnostics: diag,
        },
    ))
}

/// simulate → noise → reconstruct → metrics. Nothing is written to disk.
pub fn run_experiment(cfg: &ExperimentConfig, base_dir: &Path) -> Result<Experiment> {
    stage("config", cfg.validate())?;
    let started = Instant::now();
    let scenario = stage("setup", build_scenario(cfg, base_dir))?;
    info!(
        "fine mesh {} triangles, coarse mesh {} triangles ({} free)",
        scenario.fine.triangle_count(),
        scenario.coarse().triangle_count(),
        scenario.problem.free.len()
    );
    let clean = stage("simulate", simulate(&scenario))?;
    let (data, xi) = stage("noise", add_noise(&clean, cfg.noise_level, cfg.seed))?;
    info!("noise level {} → ξ = {xi:.4e}", cfg.noise_level);
    let fitted = stage("noise", scenario.fitted_data(&data))?;
    let problem = &scenario.problem;
    let (recon, output) = stage(
        "reconstruct",
        match cfg.engine {
            Engine::Irgn => reconstruct_irgn(problem, &scenario.adjacency, &cfg.bounds, &cfg.irgn, &fitted, xi)
                .map(|(f, r)| (f, EngineOutput::Irgn(r))),
            Engine::Mcmc => reconstruct_mcmc(
                problem,
                &scenario.adjacency,
                &cfg.bounds,
                &cfg.irgn,
                &cfg.mcmc,
                &cfg.regularizer.spec(cfg.phantom.background),
                &fitted,
                xi,
                cfg.seed,
            ),
        },
    )?;
    let metrics = stage("metrics", compute_metrics(&scenario, &cfg.phantom, &recon, &fitted))?;
    let (iterations, termination, schedule, acceptance) = match &output {
        EngineOutput::Irgn(r) => (Some(r.iterations()), Some(r.termination), None, None),
        EngineOutput::Mcmc { chain, diagnostics, .. } => (
            None,
            None,
            Some(chain.schedule),
            diagnostics.as_ref().map(|d| d.post_pilot_acceptance),
        ),
    };
    let report = ReconstructionReport {
        engine: cfg.engine,
        seed: cfg.seed,
        noise_level: cfg.noise_level,
        xi,
        metrics,
        runtime_seconds: started.elapsed().as_secs_f64(),
        iterations,
        termination,
        schedule,
        post_pilot_acceptance: acceptance,
        config_hash: cfg.hash(),
        config: cfg.clone(),
    };
    info!(
        "μ L1 {:.4}, D L1 {:.4}, residual {:.4e}, {:.1}s",
        report.metrics.mu_l1, report.metrics.d_l1, report.metrics.residual, report.runtime_seconds
    );
    Ok(Experiment {
        scenario,
        clean,
        data,
        recon,
        output,
        report,
    })
}

/// CSV `triangle,D,mu`.
pub fn field_to_csv(field: &ParameterField) -> String {
    let mut s = String::from("triangle,D,mu\n");
    for t in 0..field.len() {
        s.push_str(&format!("{t},{},{}\n", field.d[t], field.mu[t]));
    }
    s
}

pub fn field_from_csv(text: &str, background: OpticalValues) -> Result<ParameterField> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: "field".into(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "triangle,D,mu" => {}
        _ => return Err(perr(1, "expected header `triangle,D,mu`".into())),
    }
    let (mut d, mut mu) = (Vec::new(), Vec::new());
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(perr(i + 1, "expected 3 fields".into()));
        }
        let t: usize = f[0].parse().map_err(|e| perr(i + 1, format!("{e}")))?;
        if t != d.len() {
            return Err(perr(i + 1, format!("triangle {t} out of order")));
        }
        d.push(f[1].parse().map_err(|e| perr(i + 1, format!("{e}")))?);
        mu.push(f[2].parse().map_err(|e| perr(i + 1, format!("{e}")))?);
    }
    Ok(ParameterField {
        d,
        mu,
        boundary_background: background,
    })
}

const COLORMAP: [[u8; 3]; 9] = [
    [68, 1, 84],
    [71, 44, 122],
    [59, 81, 139],
    [44, 113, 142],
    [33, 144, 141],
    [39, 173, 129],
    [92, 200, 99],
    [170, 220, 50],
    [253, 231, 37],
];

fn colormap(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * (COLORMAP.len() - 1) as f64;
    let i = (t.floor() as usize).min(COLORMAP.len() - 2);
    let f = t - i as f64;
    let (a, b) = (COLORMAP[i], COLORMAP[i + 1]);
    [0, 1, 2].map(|c| (a[c] as f64 + f * (b[c] as f64 - a[c] as f64)).round() as u8)
}

/// Image pixels rendered by [`render_field`]: the domain occupies the top
/// `size × size` square, a colour bar the bottom `LEGEND_ROWS` rows.
pub const LEGEND_ROWS: usize = 16;

/// RGB raster of a per-triangle field over the mesh bounding box. Pixels
/// outside the mesh are white; the colour bar spans the field's [min, max].
pub fn render_field(values: &[f64], mesh: &Mesh, size: usize) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let scale = |v: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in mesh.nodes() {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    let span = (x1 - x0).max(y1 - y0);
    let locator = TriangleLocator::new(mesh);
    let height = size + LEGEND_ROWS;
    let mut img = vec![255u8; size * height * 3];
    for row in 0..size {
        for col in 0..size {
            let p = [
                x0 + (col as f64 + 0.5) / size as f64 * span,
                y1 - (row as f64 + 0.5) / size as f64 * span,
            ];
            if let Some(t) = locator.locate(p) {
                let c = colormap(scale(values[t]));
                img[(row * size + col) * 3..][..3].copy_from_slice(&c);
            }
        }
    }
    for row in size + 4..height {
        for col in 0..size {
            let c = colormap(col as f64 / (size - 1).max(1) as f64);
            img[(row * size + col) * 3..][..3].copy_from_slice(&c);
        }
    }
    img
}

fn write_png(path: &Path, rgb: &[u8], width: usize, height: usize) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    enc.write_header()
        .map_err(to_io)?
        .write_image_data(rgb)
        .map_err(to_io)
}

pub const IMAGE_SIZE: usize = 256;

/// Writes `<stem>.csv`, `<stem>_D.png` and `<stem>_mu.png`.
pub fn export_field(field: &ParameterField, mesh: &Mesh, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let csv = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv, field_to_csv(field)).map_err(|e| Error::io(&csv, e))?;
    let mut out = vec![csv];
    for (name, values) in [("D", &field.d), ("mu", &field.mu)] {
        let path = dir.join(format!("{stem}_{name}.png"));
        write_png(&path, &render_field(values, mesh, IMAGE_SIZE), IMAGE_SIZE, IMAGE_SIZE + LEGEND_ROWS)?;
        out.push(path);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub files: Vec<String>,
}

/// Writes `manifest.json` listing `files` (relative to `dir`) with the
/// config hash.
pub fn write_manifest(dir: &Path, cfg: &ExperimentConfig, files: &[PathBuf]) -> Result<PathBuf> {
    let manifest = Manifest {
        config_version: cfg.version,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        files: files
            .iter()
            .map(|p| p.strip_prefix(dir).unwrap_or(p).display().to_string())
            .collect(),
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn write_text(path: PathBuf, text: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    files.push(path);
    Ok(())
}

pub fn measurement_meta(cfg: &ExperimentConfig, set: &MeasurementSet, xi: f64) -> MeasurementMeta {
    MeasurementMeta {
        wavenumber: cfg.wavenumber(),
        sources: format!("trigonometric, {} sources, amplitude {}", cfg.sources.count, cfg.sources.amplitude),
        source_count: set.source_count(),
        boundary_nodes: set.boundary_nodes.len(),
        flattening_order: FLATTENING_ORDER.into(),
        noise_model: "relative gaussian per real component".into(),
        noise_level: cfg.noise_level,
        noise_norm: xi,
    }
}

/// Writes every artifact of `exp` into `dir` and returns the file list.
pub fn write_experiment(exp: &Experiment, dir: &Path) -> Result<Vec<PathBuf>> {
    let cfg = &exp.report.config;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    write_text(dir.join("config.toml"), &cfg.to_toml(), &mut files)?;
    let meas = dir.join("measurements.csv");
    write_measurements(&exp.data, &measurement_meta(cfg, &exp.data, exp.report.xi), &meas)?;
    files.push(meas.clone());
    files.push(meas.with_extension("meta.json"));
    if exp.data.noise_sigma.is_some() {
        files.push(meas.with_extension("sigma.csv"));
    }
    let coarse = exp.scenario.coarse();
    files.extend(export_field(&exp.scenario.truth_coarse, coarse, dir, "truth")?);
    files.extend(export_field(&exp.recon, coarse, dir, "reconstruction")?);
    match &exp.output {
        EngineOutput::Irgn(r) => write_text(dir.join("irgn_history.csv"), &r.to_csv(), &mut files)?,
        EngineOutput::Mcmc {
            start,
            chain,
            diagnostics,
        } => {
            if let Some(r) = start {
                write_text(dir.join("irgn_start_history.csv"), &r.to_csv(), &mut files)?;
            }
            write_text(dir.join("chain.csv"), &chain.to_csv(), &mut files)?;
            write_text(dir.join("adaption.csv"), &snapshots_csv(chain), &mut files)?;
            if let Some(d) = diagnostics {
                write_text(dir.join("diagnostics.csv"), &d.to_csv(), &mut files)?;
                write_text(dir.join("diagnostics.txt"), &d.summary(), &mut files)?;
            }
        }
    }
    write_text(dir.join("metrics.csv"), &metrics_csv(&exp.report.metrics), &mut files)?;
    let json = serde_json::to_string_pretty(&exp.report).map_err(|e| Error::Config(e.to_string()))?;
    write_text(dir.join("report.json"), &json, &mut files)?;
    files.push(write_manifest(dir, cfg, &files)?);
    Ok(files)
}

pub fn snapshots_csv(chain: &Chain) -> String {
    let mut s = String::from("iteration,acceptance,factor\n");
    for snap in &chain.snapshots {
        s.push_str(&format!("{},{},{}\n", snap.iteration, snap.acceptance, snap.factor));
    }
    s
}

pub fn metrics_csv(m: &Metrics) -> String {
    format!(
        "metric,value\nmu_l1,{}\nmu_l2,{}\nd_l1,{}\nd_l2,{}\nresidual,{}\nelevated,{}\nelevated_inside,{}\n",
        m.mu_l1, m.mu_l2, m.d_l1, m.d_l2, m.residual, m.localization.elevated, m.localization.inside
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha0: f64,
    pub prior_strength: f64,
    pub metrics: Metrics,
}

/// Runs every grid point of `cfg.sweep` concurrently and returns the points
/// with the index of the one with the smallest μ relative L₂ error.
pub fn sweep(cfg: &ExperimentConfig, base_dir: &Path) -> Result<(Vec<SweepPoint>, usize)> {
    let alphas = if cfg.sweep.alpha0.is_empty() {
        vec![cfg.irgn.alpha0]
    } else {
        cfg.sweep.alpha0.clone()
    };
    let strengths = if cfg.sweep.prior_strength.is_empty() {
        vec![cfg.mcmc.prior_strength]
    } else {
        cfg.sweep.prior_strength.clone()
    };
    let grid: Vec<(f64, f64)> = alphas
        .iter()
        .flat_map(|&a| strengths.iter().map(move |&s| (a, s)))
        .collect();
    let points = grid
        .par_iter()
        .map(|&(alpha0, prior_strength)| {
            let mut c = cfg.clone();
            c.irgn.alpha0 = alpha0;
            c.mcmc.prior_strength = prior_strength;
            let exp = run_experiment(&c, base_dir)?;
            Ok(SweepPoint {
                alpha0,
                prior_strength,
                metrics: exp.report.metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = points
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.metrics.mu_l2.total_cmp(&b.1.metrics.mu_l2))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Config("empty sweep grid".into()))?;
    Ok((points, best))
}

pub fn sweep_csv(points: &[SweepPoint], best: usize) -> String {
    let mut s = String::from("point,alpha0,prior_strength,mu_l1,mu_l2,d_l1,d_l2,residual,best\n");
    for (i, p) in points.iter().enumerate() {
        let m = &p.metrics;
        s.push_str(&format!(
            "{i},{},{},{},{},{},{},{},{}\n",
            p.alpha0,
            p.prior_strength,
            m.mu_l1,
            m.mu_l2,
            m.d_l1,
            m.d_l2,
            m.residual,
            (i == best) as u8
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            fine_mesh: MeshSpec::Generate {
                radius: DEFAULT_RADIUS,
                triangles: 300,
                seed: 2,
            },
            coarse_mesh: MeshSpec::Generate {
                radius: DEFAULT_RADIUS,
                triangles: 120,
                seed: 3,
            },
            sources: SourceSpec {
                count: 4,
                amplitude: 1.0,
            },
            engine: Engine::Irgn,
            irgn: IrgnConfig {
                max_iterations: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        assert!(text.starts_with("version = 1"));
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.seed = 2;
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut cfg = ExperimentConfig::default();
        cfg.coarse_mesh = cfg.fine_mesh.clone();
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig {
            version: 2,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig {
            noise_level: -0.1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::from_toml("version = 1\nbogus = 3\n").is_err());
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "version = 1\nseed = 9\nengine = \"irgn\"\n\n[coarse_mesh]\nradius = 10.0\ntriangles = 300\nseed = 5\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.engine, Engine::Irgn);
        assert_eq!(
            cfg.coarse_mesh,
            MeshSpec::Generate {
                radius: 10.0,
                triangles: 300,
                seed: 5
            }
        );
        assert_eq!(cfg.irgn, IrgnConfig::default());
    }

    #[test]
    fn zero_noise_is_identity() {
        let mesh = generate_disk_mesh(10.0, 80, 1).unwrap();
        let bank = SourceBank::trigonometric(&mesh, 2, 1.0, [0.0, 0.0]);
        let g = crate::forward::forward_map(
            &mesh,
            &ParameterField::constant(mesh.triangle_count(), OpticalValues::default()),
            0.01,
            &bank,
        )
        .unwrap();
        let (n, xi) = add_noise(&g, 0.0, 4).unwrap();
        assert_eq!(n.flatten(), g.flatten());
        assert_eq!(xi, 0.0);
        let (a, xa) = add_noise(&g, 0.05, 4).unwrap();
        let (b, xb) = add_noise(&g, 0.05, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(xa, xb);
        assert!(xa > 0.0);
        let sigma = a.noise_sigma.unwrap();
        assert!(sigma.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn relative_error_examples() {
        let areas = [1.0, 2.0, 0.5];
        let t = [1.0, 3.0, 2.0];
        for p in [1, 2] {
            assert_eq!(relative_error(&t, &t, &areas, p).unwrap(), 0.0);
            let twice: Vec<f64> = t.iter().map(|v| 2.0 * v).collect();
            assert!((relative_error(&t, &twice, &areas, p).unwrap() - 1.0).abs() < 1e-15);
        }
        assert!(relative_error(&[0.0; 3], &t, &areas, 1).is_err());
        assert!(relative_error(&t, &t, &areas, 3).is_err());
    }

    #[test]
    fn resampling_onto_own_boundary_is_identity() {
        let mesh = generate_disk_mesh(10.0, 80, 1).unwrap();
        let bank = SourceBank::trigonometric(&mesh, 3, 1.0, [0.0, 0.0]);
        let g = crate::forward::forward_map(
            &mesh,
            &ParameterField::constant(mesh.triangle_count(), OpticalValues::default()),
            0.01,
            &bank,
        )
        .unwrap();
        let r = resample_boundary(&g, &mesh, &mesh).unwrap();
        assert_eq!(r.flatten(), g.flatten());
    }

    #[test]
    fn constant_field_renders_single_colour() {
        let mesh = generate_disk_mesh(10.0, 80, 1).unwrap();
        let img = render_field(&vec![0.3; mesh.triangle_count()], &mesh, 64);
        let centre = (32 * 64 + 32) * 3;
        let c = &img[centre..centre + 3];
        for row in 0..64 {
            for col in 0..64 {
                let px = &img[(row * 64 + col) * 3..][..3];
                assert!(px == c || px == [255, 255, 255]);
            }
        }
        assert_ne!(c, [255, 255, 255]);
    }

    #[test]
    fn field_csv_round_trip() {
        let f = ParameterField {
            d: vec![0.1, 1.0 / 3.0, 2.5e-7],
            mu: vec![0.025, 0.05, std::f64::consts::PI],
            boundary_background: OpticalValues::default(),
        };
        let back = field_from_csv(&field_to_csv(&f), f.boundary_background).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn localization_counts() {
        let mesh = generate_disk_mesh(10.0, 300, 1).unwrap();
        let bg = OpticalValues::default();
        let phantom = Phantom::single_circle(bg, [4.0, 0.0], 3.0);
        let truth = rasterize(&phantom, &mesh, &Bounds::default()).unwrap();
        let loc = localization(&truth, &mesh, &phantom);
        assert!(loc.elevated > 0);
        assert_eq!(loc.inside, loc.elevated);
        let flat = ParameterField::constant(mesh.triangle_count(), bg);
        assert_eq!(localization(&flat, &mesh, &phantom).elevated, 0);
    }

    #[test]
    fn small_irgn_experiment_runs() {
        // noise-free so the discrepancy rule cannot end the run before the cap
        let cfg = ExperimentConfig {
            noise_level: 0.0,
            ..small_cfg()
        };
        let exp = run_experiment(&cfg, Path::new(".")).unwrap();
        let m = &exp.report.metrics;
        for v in [m.mu_l1, m.mu_l2, m.d_l1, m.d_l2, m.residual] {
            assert!(v.is_finite() && v >= 0.0);
        }
        assert_eq!(exp.report.iterations, Some(2));
        let dir = tempfile::tempdir().unwrap();
        let files = write_experiment(&exp, dir.path()).unwrap();
        assert!(files.iter().all(|f| f.exists()));
        assert!(files.iter().any(|f| f.ends_with("manifest.json")));
    }

    #[test]
    fn stage_errors_are_tagged() {
        let mut cfg = small_cfg();
        cfg.fine_mesh = MeshSpec::File {
            path: "/nonexistent/mesh.txt".into(),
        };
        match run_experiment(&cfg, Path::new(".")) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "setup"),
            other => panic!("expected stage error, got {other:?}"),
        }
    }
}
