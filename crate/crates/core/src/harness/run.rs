//! Command entry points: everything that touches the filesystem.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::checkpoint::Checkpoint;
use super::config::{Arch, Scale, TrainConfig};
use super::experiments::{
    end_to_end_gradcheck, eval_csv, evaluate, predictor, robustness, robustness_csv, sensitivity, sensitivity_csv,
    RobustnessRow,
};
use super::train::{
    background_baseline, extractor_params, pretrain_loop, train_loop, MetricsRow, StopReason, TrainState,
    TrainSummary, METRICS_HEADER,
};
use crate::arch::{build_segcaps2d, build_ucaps3d, ModelParams, NetworkSpec, SegCapsConfig, UCapsConfig};
use crate::data::{gen_blobs_3d, gen_shapes_2d, load_dataset, save_dataset, Axis, Dataset};
use crate::error::{Error, Result};
use crate::gradcheck::GradcheckReport;
use crate::metrics::{SegMetrics, SensitivityReport};

pub const CHECKPOINT_NAME: &str = "checkpoint.cpsc";
pub const EXTRACTOR_NAME: &str = "extractor.cpsc";
pub const METRICS_NAME: &str = "metrics.csv";
pub const LOG_NAME: &str = "run.log";
pub const DIAGNOSTIC_NAME: &str = "diagnostic.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Shapes2d,
    Blobs3d,
}

pub fn cmd_gen_data(kind: SynthKind, seed: u64, count: usize, size: usize, classes: usize, out: &Path) -> Result<Dataset> {
    let data = match kind {
        SynthKind::Shapes2d => gen_shapes_2d(seed, count, size, classes)?,
        SynthKind::Blobs3d => gen_blobs_3d(seed, count, size, classes)?,
    };
    save_dataset(out, &data)?;
    Ok(data)
}

/// The network `cfg` describes for inputs of `in_channels` channels and the given extents.
pub fn build_model(cfg: &TrainConfig, in_channels: usize, spatial: &[usize]) -> Result<NetworkSpec> {
    let square = spatial.windows(2).all(|w| w[0] == w[1]);
    match cfg.arch {
        Arch::SegCaps2d => {
            if spatial.len() != 2 || !square {
                return Err(Error::ShapeMismatch(format!("segcaps2d needs square 2D images, got {spatial:?}")));
            }
            let base = match cfg.scale {
                Scale::Toy => SegCapsConfig::toy(),
                Scale::Paper => SegCapsConfig::paper(),
            };
            let net = SegCapsConfig { in_channels, routing_iters: cfg.routing_iters, ..base };
            build_segcaps2d(spatial[0], cfg.classes, &net)
        }
        Arch::UCaps3d => {
            if spatial.len() != 3 || !square {
                return Err(Error::ShapeMismatch(format!("ucaps3d needs cubic 3D volumes, got {spatial:?}")));
            }
            let base = match cfg.scale {
                Scale::Toy => UCapsConfig::toy(),
                Scale::Paper => UCapsConfig::paper(),
            };
            let net = UCapsConfig { in_channels, routing_iters: cfg.routing_iters, ..base };
            build_ucaps3d(spatial[0], cfg.classes, &net)
        }
    }
}

/// Loads the dataset named by the config (or `override_path`) and builds the matching model.
pub fn load_experiment(cfg: &TrainConfig, override_path: Option<&Path>) -> Result<(Dataset, NetworkSpec, [u8; 8])> {
    let path = override_path
        .map(Path::to_path_buf)
        .or_else(|| cfg.dataset.clone())
        .ok_or_else(|| Error::Config("no dataset given (set `dataset` or pass one)".into()))?;
    let data = load_dataset(&path)?;
    let first = data
        .samples
        .first()
        .ok_or_else(|| Error::Config(format!("{}: dataset is empty", path.display())))?;
    if data.classes > cfg.classes {
        return Err(Error::ManifestMismatch(format!(
            "dataset has {} classes, config {}",
            data.classes, cfg.classes
        )));
    }
    let spec = build_model(cfg, first.channels(), first.spatial())?;
    let hash = cfg.model_hash(first.channels(), first.spatial()[0]);
    Ok((data, spec, hash))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct RunFiles {
    dir: PathBuf,
    metrics: fs::File,
    log: fs::File,
}

impl RunFiles {
    /// Opens the metrics CSV and log; a resumed run appends to existing files.
    fn open(dir: &Path, cfg: &TrainConfig, resume: bool) -> Result<RunFiles> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| -> Result<(fs::File, bool)> {
            let path = dir.join(name);
            let existed = resume && path.exists();
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(existed)
                .truncate(!existed)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Ok((f, existed))
        };
        let (mut metrics, existed) = open(METRICS_NAME)?;
        if !existed {
            writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(dir.join(METRICS_NAME), e))?;
        }
        let (log, _) = open(LOG_NAME)?;
        let mut files = RunFiles { dir: dir.to_path_buf(), metrics, log };
        files.log(&format!("resolved configuration:\n{}", cfg.render()))?;
        Ok(files)
    }

    fn row(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.metrics, "{}", row.to_csv()).map_err(|e| Error::io(self.dir.join(METRICS_NAME), e))
    }

    fn log(&mut self, line: &str) -> Result<()> {
        writeln!(self.log, "{line}").map_err(|e| Error::io(self.dir.join(LOG_NAME), e))
    }
}

fn param_norms(params: &ModelParams) -> String {
    params
        .params
        .iter()
        .map(|(k, t)| format!("{k}\t{}\n", t.data().iter().map(|v| v * v).sum::<f64>().sqrt()))
        .collect()
}

/// Writes the diagnostic dump for a non-finite loss and passes the error on.
fn dump_on_non_finite<T>(dir: &Path, cfg: &TrainConfig, state: &TrainState, r: Result<T>) -> Result<T> {
    if let Err(Error::NonFinite(msg)) = &r {
        let text = format!(
            "{msg}\niteration {}\nlearning rate {}\n\nparameter norms:\n{}\nconfiguration:\n{}",
            state.iteration,
            state.optimizer.lr,
            param_norms(&state.params),
            cfg.render()
        );
        write(&dir.join(DIAGNOSTIC_NAME), &text)?;
    }
    r
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub summary: TrainSummary,
    pub iteration: u64,
    pub baseline_dice: f64,
    pub checkpoint: PathBuf,
}

/// Supervised training. Writes `checkpoint.cpsc`, `metrics.csv` and `run.log` into `out`.
pub fn cmd_train(cfg: &TrainConfig, out: &Path, resume: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    let (data, spec, hash) = load_experiment(cfg, None)?;
    let (train, val) = data.split(1.0 - cfg.val_fraction, cfg.seed);
    let mut state = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            ck.verify(&spec, hash)?;
            TrainState { params: ck.params, optimizer: ck.optimizer, iteration: ck.iteration }
        }
        None => {
            let mut params = ModelParams::init(&spec, cfg.seed)?;
            if let Some(init) = &cfg.init_from {
                let ck = Checkpoint::load(init)?;
                if ck.config_hash != hash {
                    return Err(Error::ManifestMismatch(format!(
                        "{}: pretrained for a different model",
                        init.display()
                    )));
                }
                params.load_matching(&ck.params.params)?;
            }
            TrainState::fresh(params, cfg)
        }
    };
    let mut files = RunFiles::open(out, cfg, resume.is_some())?;
    let baseline = background_baseline(if val.is_empty() { &train } else { &val })?;
    files.log(&format!(
        "{} parameters; {} train / {} validation samples; all-background dice {baseline}; starting at iteration {}",
        state.params.params.values().map(|t| t.numel()).sum::<usize>(),
        train.len(),
        val.len(),
        state.iteration
    ))?;
    let result = train_loop(&spec, cfg, &train, &val, &mut state, |row| files.row(row));
    let summary = dump_on_non_finite(out, cfg, &state, result)?;
    files.log(&format!("stopped: {:?} at iteration {}", summary.stop, state.iteration))?;
    let checkpoint = out.join(CHECKPOINT_NAME);
    Checkpoint { params: state.params, optimizer: state.optimizer, iteration: state.iteration, config_hash: hash }
        .save(&checkpoint)?;
    Ok(TrainReport { summary, iteration: state.iteration, baseline_dice: baseline, checkpoint })
}

/// Pretext pretraining of the feature extractor. Writes `extractor.cpsc`,
/// `metrics.csv` and `run.log` into `out`.
pub fn cmd_pretrain(cfg: &TrainConfig, out: &Path, resume: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    let (data, spec, hash) = load_experiment(cfg, None)?;
    let (train, val) = data.split(1.0 - cfg.val_fraction, cfg.seed);
    let mut state = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.config_hash != hash {
                return Err(Error::ManifestMismatch(format!("{}: written for a different model", path.display())));
            }
            TrainState { params: ck.params, optimizer: ck.optimizer, iteration: ck.iteration }
        }
        None => TrainState::fresh(extractor_params(&spec, &ModelParams::init(&spec, cfg.seed)?), cfg),
    };
    let mut files = RunFiles::open(out, cfg, resume.is_some())?;
    let result = pretrain_loop(&spec, cfg, &train, &val, &mut state, |row| files.row(row));
    let summary = dump_on_non_finite(out, cfg, &state, result)?;
    files.log(&format!("stopped: {:?} at iteration {}", summary.stop, state.iteration))?;
    let checkpoint = out.join(EXTRACTOR_NAME);
    Checkpoint { params: state.params, optimizer: state.optimizer, iteration: state.iteration, config_hash: hash }
        .save(&checkpoint)?;
    Ok(TrainReport { summary, iteration: state.iteration, baseline_dice: f64::NAN, checkpoint })
}

/// Loads a checkpoint and the dataset it is evaluated on, refusing mismatches.
pub fn load_model(cfg: &TrainConfig, checkpoint: &Path, dataset: Option<&Path>) -> Result<(Dataset, NetworkSpec, ModelParams)> {
    let (data, spec, hash) = load_experiment(cfg, dataset)?;
    let ck = Checkpoint::load(checkpoint)?;
    ck.verify(&spec, hash)?;
    Ok((data, spec, ck.params))
}

pub fn cmd_eval(cfg: &TrainConfig, checkpoint: &Path, dataset: Option<&Path>, out: Option<&Path>) -> Result<SegMetrics> {
    let (data, spec, params) = load_model(cfg, checkpoint, dataset)?;
    let m = evaluate(&data, spec.classes, predictor(&spec, &params))?;
    if let Some(out) = out {
        write(out, &eval_csv(&m))?;
    }
    Ok(m)
}

pub fn cmd_robustness(
    cfg: &TrainConfig,
    checkpoint: &Path,
    dataset: Option<&Path>,
    axes: &[Axis],
    angles: &[f64],
    out: Option<&Path>,
) -> Result<Vec<RobustnessRow>> {
    if cfg.arch != Arch::UCaps3d {
        return Err(Error::Unsupported("rotation robustness needs a 3D model".into()));
    }
    let (data, spec, params) = load_model(cfg, checkpoint, dataset)?;
    let rows = robustness(&data, spec.classes, axes, angles, predictor(&spec, &params))?;
    if let Some(out) = out {
        write(out, &robustness_csv(&rows))?;
    }
    Ok(rows)
}

pub fn cmd_sensitivity(
    cfg: &TrainConfig,
    checkpoint: &Path,
    dataset: Option<&Path>,
    out: Option<&Path>,
) -> Result<(Vec<SensitivityReport>, SensitivityReport)> {
    let (data, spec, params) = load_model(cfg, checkpoint, dataset)?;
    let (per, mean) = sensitivity(&data, predictor(&spec, &params))?;
    if let Some(out) = out {
        write(out, &sensitivity_csv(&per, &mean))?;
    }
    Ok((per, mean))
}

pub fn cmd_gradcheck(seed: u64, routing_iters: usize, out: Option<&Path>) -> Result<GradcheckReport> {
    let report = end_to_end_gradcheck(seed, routing_iters, 1e-4)?;
    if let Some(out) = out {
        write(out, &format!("{report}\n"))?;
    }
    Ok(report)
}

impl TrainReport {
    pub fn reached_target(&self) -> bool {
        self.summary.stop == StopReason::TargetReached
    }
}
