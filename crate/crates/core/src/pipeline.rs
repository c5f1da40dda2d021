//! Reproducible command runners behind the CLI.
//!
//! Every command reads a JSON config (unknown keys rejected), validates it before any compute,
//! and derives all randomness from the named seeds it contains. A simulation directory holds:
//!
//! ```text
//! truth.cube        ground truth, unit peak
//! y_hs.cube         HS shots, rows × cols × W_hs
//! y_ms.cube         MS shots
//! manifest.json     SimulationManifest: dims, both aperture manifests, noise settings
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cassi::{add_noise, shots_for_ratio, ApertureManifest, Arm, CassiOperator, ShotStack};
use crate::cs::{
    cs_adjoint_reconstruct, cs_measure, cs_reconstruct, cs_train_dir, matrix_spec_path,
    read_matrix_spec, write_matrix_spec, CsTrainConfig, GaussianMatrix,
};
use crate::cube_io::{
    ingest_cube, read_cube, rgb_composite, write_cube, write_rgb, GrayImage, SpectralCube,
};
use crate::error::{ensure_dims, Error, Result};
use crate::metrics::{format_db, MetricReport};
use crate::net::{
    init_params, load_checkpoint, load_checkpoint_for, net_forward, DEFAULT_FEATURE_MAPS,
};
use crate::operator::{Measurements, Operators};
use crate::solver::{Ladmm, SolverConfig};
use crate::synthetic::{synthetic_cube, SyntheticSpec};
use crate::training::{train, write_history_csv, CheckpointPolicy, Sample, TrainingConfig};

/// Environment variable capping the worker-thread count.
pub const THREADS_ENV: &str = "CASSI_FUSION_THREADS";

/// Applies [`THREADS_ENV`] to the global thread pool; call once before any parallel work.
pub fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().map_err(|_| {
            Error::InvalidArgument(format!("{THREADS_ENV} must be a positive integer"))
        })?;
        if n == 0 {
            return Err(Error::InvalidArgument(format!(
                "{THREADS_ENV} must be positive"
            )));
        }
        // a pool that is already initialized keeps its size
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

pub fn read_config<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn positive_finite(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "{name} must be positive and finite"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    /// SCUB cube to simulate; exclusive with `synthetic`
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    pub output_dir: PathBuf,
    /// spatial decimation of the HS arm
    pub p: usize,
    /// spectral decimation of the MS arm
    pub q: usize,
    /// compression ratio η; `W = round(η·bands)` per arm
    pub ratio: f64,
    #[serde(default)]
    pub shots_hs: Option<usize>,
    #[serde(default)]
    pub shots_ms: Option<usize>,
    /// omitted or `null` means noiseless
    #[serde(default)]
    pub snr_db: Option<f64>,
    pub aperture_seed: u64,
    #[serde(default)]
    pub noise_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationManifest {
    pub dims: (usize, usize, usize),
    pub hs: ApertureManifest,
    pub ms: ApertureManifest,
    pub snr_db: Option<f64>,
    pub noise_seed: u64,
}

impl SimulationManifest {
    pub fn operators(&self) -> Result<(CassiOperator, CassiOperator)> {
        Ok((self.hs.build(self.dims)?, self.ms.build(self.dims)?))
    }

    /// The HS and MS noise streams use `noise_seed` and `noise_seed + 1`.
    pub fn measure(&self, truth: &SpectralCube) -> Result<(ShotStack, ShotStack)> {
        let (hs, ms) = self.operators()?;
        let (mut yh, mut ym) = (hs.forward(truth)?, ms.forward(truth)?);
        if let Some(snr) = self.snr_db {
            yh = add_noise(&yh, snr, self.noise_seed)?;
            ym = add_noise(&ym, snr, self.noise_seed.wrapping_add(1))?;
        }
        Ok((yh, ym))
    }
}

impl SimulateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input.is_some() == self.synthetic.is_some() {
            return Err(Error::InvalidArgument(
                "exactly one of `input` and `synthetic` is required".into(),
            ));
        }
        if self.p == 0 || self.q == 0 {
            return Err(Error::InvalidArgument("p and q must be positive".into()));
        }
        positive_finite("ratio", self.ratio)?;
        if let Some(s) = self.snr_db {
            if s.is_nan() {
                return Err(Error::InvalidArgument("snr_db is NaN".into()));
            }
        }
        Ok(())
    }

    pub fn manifest(&self, dims: (usize, usize, usize)) -> Result<SimulationManifest> {
        let (m, n, l) = dims;
        if m % self.p != 0 || n % self.p != 0 || l % self.q != 0 {
            return Err(Error::InvalidArgument(format!(
                "cube {dims:?} is not divisible by p={} / q={}",
                self.p, self.q
            )));
        }
        let w_hs = match self.shots_hs {
            Some(w) => w,
            None => shots_for_ratio(self.ratio, l)?,
        };
        let w_ms = match self.shots_ms {
            Some(w) => w,
            None => shots_for_ratio(self.ratio, l / self.q)?,
        };
        Ok(SimulationManifest {
            dims,
            hs: ApertureManifest {
                arm: Arm::Hs,
                p: self.p,
                q: 1,
                shots: w_hs,
                seed: self.aperture_seed,
            },
            ms: ApertureManifest {
                arm: Arm::Ms,
                p: 1,
                q: self.q,
                shots: w_ms,
                seed: self.aperture_seed.wrapping_add(1),
            },
            snr_db: self.snr_db,
            noise_seed: self.noise_seed,
        })
    }
}

pub const TRUTH_FILE: &str = "truth.cube";
pub const Y_HS_FILE: &str = "y_hs.cube";
pub const Y_MS_FILE: &str = "y_ms.cube";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Dual-arm simulation: writes truth, both shot stacks and the manifest into `output_dir`.
pub fn cmd_simulate(cfg: &SimulateConfig) -> Result<SimulationManifest> {
    cfg.validate()?;
    let source = match (&cfg.input, &cfg.synthetic) {
        (Some(path), _) => ingest_cube(path)?,
        (_, Some(spec)) => synthetic_cube(spec)?,
        _ => unreachable!("validated"),
    };
    let manifest = cfg.manifest(source.dims())?;
    create_dir(&cfg.output_dir)?;
    // measure the cube exactly as stored, so the truth file and measurements agree
    let truth_path = cfg.output_dir.join(TRUTH_FILE);
    write_cube(&source, &truth_path)?;
    let truth = read_cube(&truth_path)?;
    let (yh, ym) = manifest.measure(&truth)?;
    write_cube(&yh.to_cube(), cfg.output_dir.join(Y_HS_FILE))?;
    write_cube(&ym.to_cube(), cfg.output_dir.join(Y_MS_FILE))?;
    write_json(&manifest, &cfg.output_dir.join(MANIFEST_FILE))?;
    log::info!(
        "simulated {:?}: W_hs={} W_ms={} into {}",
        manifest.dims,
        manifest.hs.shots,
        manifest.ms.shots,
        cfg.output_dir.display()
    );
    Ok(manifest)
}

/// A loaded simulation directory.
pub struct Scene {
    pub manifest: SimulationManifest,
    pub truth: Option<SpectralCube>,
    pub y: Measurements,
}

pub fn load_scene(dir: impl AsRef<Path>) -> Result<Scene> {
    let dir = dir.as_ref();
    let manifest: SimulationManifest = read_config(dir.join(MANIFEST_FILE))?;
    let yh = ShotStack::from_cube(&read_cube(dir.join(Y_HS_FILE))?);
    let ym = ShotStack::from_cube(&read_cube(dir.join(Y_MS_FILE))?);
    let (hs, ms) = manifest.operators()?;
    let expect_hs = hs.shot_dims();
    let expect_ms = ms.shot_dims();
    ensure_dims!(
        (yh.rows(), yh.cols(), yh.shots()) == expect_hs
            && (ym.rows(), ym.cols(), ym.shots()) == expect_ms,
        "measurements in {} do not match the manifest",
        dir.display()
    );
    let truth_path = dir.join(TRUTH_FILE);
    let truth = if truth_path.exists() {
        Some(read_cube(&truth_path)?)
    } else {
        None
    };
    Ok(Scene {
        manifest,
        truth,
        y: Measurements::dual(yh.into_vec(), ym.into_vec()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCommandConfig {
    /// simulation directories sharing one manifest (apart from noise seed)
    pub scenes: Vec<PathBuf>,
    pub depth: usize,
    #[serde(default = "default_feature_maps")]
    pub feature_maps: usize,
    pub init_seed: u64,
    pub training: TrainingConfig,
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub history_csv: Option<PathBuf>,
}

fn default_feature_maps() -> usize {
    DEFAULT_FEATURE_MAPS
}

fn same_geometry(a: &SimulationManifest, b: &SimulationManifest) -> bool {
    a.dims == b.dims && a.hs == b.hs && a.ms == b.ms
}

/// Trains a network on the listed scenes and writes the checkpoint (plus optional history).
pub fn cmd_train(cfg: &TrainCommandConfig) -> Result<Vec<crate::training::EpochLoss>> {
    cfg.training.validate()?;
    if cfg.scenes.is_empty() {
        return Err(Error::InvalidArgument("no training scenes".into()));
    }
    let scenes = cfg
        .scenes
        .iter()
        .map(load_scene)
        .collect::<Result<Vec<_>>>()?;
    let first = scenes[0].manifest;
    for (s, path) in scenes.iter().zip(&cfg.scenes) {
        ensure_dims!(
            same_geometry(&s.manifest, &first),
            "scene {} uses a different geometry than {}",
            path.display(),
            cfg.scenes[0].display()
        );
    }
    let samples = scenes
        .into_iter()
        .zip(&cfg.scenes)
        .map(|(s, path)| {
            let truth = s.truth.ok_or_else(|| {
                Error::InvalidArgument(format!("scene {} has no truth", path.display()))
            })?;
            Ok(Sample { truth, y: s.y })
        })
        .collect::<Result<Vec<_>>>()?;
    let (hs, ms) = first.operators()?;
    let ops = Operators::dual(&hs, &ms);
    let params = init_params(first.dims, cfg.feature_maps, cfg.depth, cfg.init_seed)?;
    create_parent(&cfg.checkpoint)?;
    let policy = CheckpointPolicy {
        path: cfg.checkpoint.clone(),
        every: cfg.checkpoint_every,
    };
    let out = train(params, &samples, &ops, &cfg.training, Some(&policy))?;
    if let Some(h) = &cfg.history_csv {
        create_parent(h)?;
        write_history_csv(&out.history, h)?;
    }
    Ok(out.history)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverOverrides {
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub lambda1: Option<f64>,
    #[serde(default)]
    pub lambda2: Option<f64>,
    #[serde(default)]
    pub max_iters: Option<usize>,
    #[serde(default)]
    pub tol: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuseConfig {
    pub scene: PathBuf,
    /// trained network; without one the classical solver runs
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub solver: Option<SolverOverrides>,
    pub output: PathBuf,
    #[serde(default)]
    pub rgb_png: Option<PathBuf>,
    /// (red, green, blue) band indices for `rgb_png`; defaults to (L−1, L/2, 0)
    #[serde(default)]
    pub rgb_bands: Option<[usize; 3]>,
}

/// Side file written next to a fused cube: `<output>.run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub method: String,
    pub runtime_s: f64,
}

pub fn run_record_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

fn solver_config(ops: &Operators, o: Option<&SolverOverrides>) -> Result<SolverConfig> {
    let o = o.copied().unwrap_or(SolverOverrides {
        alpha: None,
        rho: None,
        lambda1: None,
        lambda2: None,
        max_iters: None,
        tol: None,
    });
    let d = SolverConfig::defaults_for(ops)?;
    let mut cfg = SolverConfig::with_params(
        ops,
        o.rho.unwrap_or(d.rho),
        o.lambda1.unwrap_or(d.lambda1),
        o.lambda2.unwrap_or(d.lambda2),
    )?;
    if let Some(a) = o.alpha {
        cfg.alpha = a;
    }
    if let Some(k) = o.max_iters {
        cfg.max_iters = k;
    }
    if let Some(t) = o.tol {
        cfg.tol = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Fuses one scene with a trained network or the classical solver.
pub fn cmd_fuse(cfg: &FuseConfig) -> Result<SpectralCube> {
    if cfg.checkpoint.is_some() && cfg.solver.is_some() {
        return Err(Error::InvalidArgument(
            "`solver` settings only apply without a checkpoint".into(),
        ));
    }
    let scene = load_scene(&cfg.scene)?;
    let (hs, ms) = scene.manifest.operators()?;
    let ops = Operators::dual(&hs, &ms);
    let start = Instant::now();
    let (f, method) = match &cfg.checkpoint {
        Some(path) => {
            let params = load_checkpoint_for(path, scene.manifest.dims, None)?;
            let method = format!("ladmm-net K={}", params.depth());
            (net_forward(&params, &scene.y, &ops)?.f, method)
        }
        None => {
            let sc = solver_config(&ops, cfg.solver.as_ref())?;
            let report = Ladmm::new(ops, &scene.y, sc)?.solve()?;
            (report.f, format!("ladmm {} iterations", report.iterations))
        }
    };
    let runtime_s = start.elapsed().as_secs_f64();
    create_parent(&cfg.output)?;
    write_cube(&f, &cfg.output)?;
    write_json(
        &RunRecord { method, runtime_s },
        &run_record_path(&cfg.output),
    )?;
    if let Some(png) = &cfg.rgb_png {
        create_parent(png)?;
        let l = f.bands();
        let [r, g, b] = cfg.rgb_bands.unwrap_or([l - 1, l / 2, 0]);
        write_rgb(&rgb_composite(&f, r, g, b)?, png)?;
    }
    Ok(f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsTrainCommandConfig {
    pub dataset_dir: PathBuf,
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub history_csv: Option<PathBuf>,
    pub cs: CsTrainConfig,
}

/// Trains the CS network; the matrix spec is stored next to the checkpoint.
pub fn cmd_cs_train(cfg: &CsTrainCommandConfig) -> Result<()> {
    cfg.cs.training.validate()?;
    create_parent(&cfg.checkpoint)?;
    let policy = CheckpointPolicy {
        path: cfg.checkpoint.clone(),
        every: 0,
    };
    let out = cs_train_dir(&cfg.dataset_dir, &cfg.cs, Some(&policy))?;
    write_matrix_spec(&out.matrix.spec(), matrix_spec_path(&cfg.checkpoint))?;
    if let Some(h) = &cfg.history_csv {
        create_parent(h)?;
        write_history_csv(&out.history, h)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsReconRequest {
    pub ratio: f64,
    pub matrix_seed: u64,
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub output: PathBuf,
    /// optional `Hᵀy` baseline image
    pub baseline: Option<PathBuf>,
}

/// Samples `input` block-wise and reconstructs it; returns (network PSNR, baseline PSNR).
pub fn cmd_cs_recon(req: &CsReconRequest) -> Result<(f64, f64)> {
    let matrix = GaussianMatrix::for_ratio(req.ratio, req.matrix_seed)?;
    let spec_path = matrix_spec_path(&req.checkpoint);
    if spec_path.exists() {
        let stored = read_matrix_spec(&spec_path)?;
        ensure_dims!(
            stored == matrix.spec(),
            "checkpoint was trained with {:?}, requested {:?}",
            stored,
            matrix.spec()
        );
    }
    let params = load_checkpoint(&req.checkpoint)?;
    let image = GrayImage::read(&req.input)?;
    let meas = cs_measure(&image, &matrix)?;
    let rec = cs_reconstruct(&meas, &matrix, &params)?;
    let base = cs_adjoint_reconstruct(&meas, &matrix)?;
    create_parent(&req.output)?;
    rec.write(&req.output)?;
    if let Some(b) = &req.baseline {
        create_parent(b)?;
        base.write(b)?;
    }
    let truth = image.to_cube();
    Ok((
        crate::metrics::psnr(&truth, &rec.to_cube(), 1.0)?,
        crate::metrics::psnr(&truth, &base.to_cube(), 1.0)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateEntry {
    pub name: String,
    pub reference: PathBuf,
    pub estimate: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub entries: Vec<EvaluateEntry>,
    pub output_csv: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateRow {
    pub name: String,
    pub report: MetricReport,
    pub runtime_s: Option<f64>,
}

fn format_metric(v: f64, digits: usize) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.digits$}")
    }
}

/// Writes `name,psnr,ssim,sam,runtime_s`; runtime comes from the estimate's run record if any.
pub fn cmd_evaluate(cfg: &EvaluateConfig) -> Result<Vec<EvaluateRow>> {
    let mut rows = Vec::with_capacity(cfg.entries.len());
    for e in &cfg.entries {
        let reference = read_cube(&e.reference)?;
        let estimate = read_cube(&e.estimate)?;
        let report = MetricReport::compute(&reference, &estimate)?;
        let rec = run_record_path(&e.estimate);
        let runtime_s = if rec.exists() {
            Some(read_config::<RunRecord>(&rec)?.runtime_s)
        } else {
            None
        };
        rows.push(EvaluateRow {
            name: e.name.clone(),
            report,
            runtime_s,
        });
    }
    create_parent(&cfg.output_csv)?;
    let mut w = csv::Writer::from_path(&cfg.output_csv)?;
    w.write_record(["name", "psnr", "ssim", "sam", "runtime_s"])?;
    for r in &rows {
        w.write_record([
            r.name.clone(),
            format_db(r.report.psnr_db),
            format_metric(r.report.ssim, 4),
            format_metric(r.report.sam_rad, 4),
            r.runtime_s.map(|t| format!("{t:.3}")).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&cfg.output_csv, e))?;
    Ok(rows)
}
