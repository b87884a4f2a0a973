//! Experiment orchestration: hyperparameter ablations, the reduced-label
//! protocol and result tables.

mod stats;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use stats::{ln_gamma, mean, paired_t_test, regularized_incomplete_beta, std_dev, student_t_two_sided, TTest};

use crate::config::{InferenceConfig, RunConfig};
use crate::data::{load_split, DatasetManifest, LoadedVolume, PadMode, Split};
use crate::error::{Error, Result};
use crate::inference::segment_volume;
use crate::metrics::{dsc, surface_distance_stats};
use crate::model::{Hyperparams, Model, PositionalMode};
use crate::training::{pretrain_then_finetune, train, PretrainTask, TrainConfig};

/// Loaded train/val/test volumes.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<LoadedVolume>,
    pub val: Vec<LoadedVolume>,
    pub test: Vec<LoadedVolume>,
}

impl Dataset {
    pub fn from_manifest(manifest: &DatasetManifest, classes: usize) -> Result<Self> {
        Ok(Dataset {
            train: load_split(manifest, Split::Train, classes)?,
            val: load_split(manifest, Split::Val, classes)?,
            test: load_split(manifest, Split::Test, classes)?,
        })
    }
}

/// Scores of one predicted volume, averaged over foreground classes. Surface
/// distances are `None` when undefined (a class missing from prediction or
/// truth).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeScore {
    pub name: String,
    pub dsc: f64,
    pub hd95_mm: Option<f64>,
    pub assd_mm: Option<f64>,
}

pub fn evaluate_model(model: &Model, volumes: &[LoadedVolume], padding: PadMode) -> Result<Vec<VolumeScore>> {
    volumes
        .iter()
        .map(|v| {
            let truth = v.labeled_mask()?;
            let (pred, _) = segment_volume(&v.image, v.spacing, model, padding)?;
            let mut dscs = Vec::new();
            let mut surf = Vec::new();
            for c in 1..model.hp.classes {
                dscs.push(dsc(&pred, truth, c as u8)?);
                match surface_distance_stats(&pred, truth, c as u8) {
                    Ok(s) => surf.push(s),
                    Err(Error::UndefinedMetric(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            let defined = !surf.is_empty() && surf.len() == dscs.len();
            Ok(VolumeScore {
                name: v.name.clone(),
                dsc: mean(&dscs),
                hd95_mm: defined.then(|| mean(&surf.iter().map(|s| s.0).collect::<Vec<_>>())),
                assd_mm: defined.then(|| mean(&surf.iter().map(|s| s.1).collect::<Vec<_>>())),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridEntry {
    pub name: String,
    pub hyperparams: Hyperparams,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentGrid {
    pub entries: Vec<GridEntry>,
    /// Each entry is trained once per seed; scores are pooled.
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    pub padding: PadMode,
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for e in &self.entries {
            if !names.insert(e.name.as_str()) {
                return Err(Error::Config(format!("duplicate configuration name {:?}", e.name)));
            }
            if e.name.is_empty() || e.name.contains(['/', '\\']) {
                return Err(Error::Config(format!("invalid configuration name {:?}", e.name)));
            }
            e.hyperparams
                .validate()
                .and_then(|_| e.train.validate())
                .map_err(|err| Error::Config(format!("{}: {err}", e.name)))?;
        }
        if self.seeds.is_empty() && !self.entries.is_empty() {
            return Err(Error::Config("grid needs at least one seed".into()));
        }
        Ok(())
    }
}

/// The eight ablation rows, scaled relative to `base`: larger blocks (n = 5
/// with the same patch size), no and fixed positional encoding, deeper and
/// shallower encoders, more heads and a single head.
pub fn ablation_entries(base: &Hyperparams, train: &TrainConfig) -> Vec<GridEntry> {
    let k_step = (3 * base.stages / 7).max(1);
    let entry = |name: &str, f: &dyn Fn(&mut Hyperparams)| {
        let mut hp = base.clone();
        f(&mut hp);
        GridEntry {
            name: name.to_string(),
            hyperparams: hp,
            train: train.clone(),
        }
    };
    vec![
        entry("baseline", &|_| {}),
        entry("larger blocks, n=5", &|hp| {
            hp.block = base.patch_side() * 5;
            hp.patches_per_axis = 5;
        }),
        entry("no positional encoding", &|hp| hp.pos_mode = PositionalMode::None),
        entry("fixed positional encoding", &|hp| hp.pos_mode = PositionalMode::FixedSinusoidal),
        entry(&format!("deeper network, K={}", base.stages + k_step), &|hp| {
            hp.stages = base.stages + k_step
        }),
        entry(
            &format!("shallower network, K={}", base.stages.saturating_sub(k_step).max(1)),
            &|hp| hp.stages = base.stages.saturating_sub(k_step).max(1),
        ),
        entry(&format!("more heads, n_h={}", base.heads * 2), &|hp| hp.heads = base.heads * 2),
        entry("single head, n_h=1", &|hp| hp.heads = 1),
    ]
}

/// One result row: mean and sample standard deviation over all test volumes
/// (and seeds). Surface statistics skip volumes where they are undefined;
/// `undefined` counts those.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub dsc_mean: Option<f64>,
    pub dsc_std: Option<f64>,
    pub hd95_mean: Option<f64>,
    pub hd95_std: Option<f64>,
    pub assd_mean: Option<f64>,
    pub assd_std: Option<f64>,
    pub volumes: usize,
    pub undefined: usize,
    pub status: String,
}

impl AblationRow {
    pub fn is_complete(&self) -> bool {
        self.status == "ok" && self.dsc_mean.is_some()
    }

    fn failed(config: &str, err: &Error) -> Self {
        AblationRow {
            config: config.to_string(),
            dsc_mean: None,
            dsc_std: None,
            hd95_mean: None,
            hd95_std: None,
            assd_mean: None,
            assd_std: None,
            volumes: 0,
            undefined: 0,
            status: format!("failed: {err}"),
        }
    }

    fn from_scores(config: &str, scores: &[VolumeScore]) -> Self {
        let summarize = |xs: Vec<f64>| {
            if xs.is_empty() {
                (None, None)
            } else {
                (Some(mean(&xs)), Some(std_dev(&xs)))
            }
        };
        let (dsc_mean, dsc_std) = summarize(scores.iter().map(|s| s.dsc).collect());
        let (hd95_mean, hd95_std) = summarize(scores.iter().filter_map(|s| s.hd95_mm).collect());
        let (assd_mean, assd_std) = summarize(scores.iter().filter_map(|s| s.assd_mm).collect());
        AblationRow {
            config: config.to_string(),
            dsc_mean,
            dsc_std,
            hd95_mean,
            hd95_std,
            assd_mean,
            assd_std,
            volumes: scores.len(),
            undefined: scores.iter().filter(|s| s.hd95_mm.is_none()).count(),
            status: "ok".into(),
        }
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const ABLATION_COLUMNS: [&str; 10] = [
    "config",
    "dsc_mean",
    "dsc_std",
    "hd95_mean",
    "hd95_std",
    "assd_mean",
    "assd_std",
    "volumes",
    "undefined",
    "status",
];

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

fn run_entry(entry: &GridEntry, seeds: &[u64], data: &Dataset, padding: PadMode) -> Result<Vec<VolumeScore>> {
    let mut scores = Vec::new();
    for &seed in seeds {
        let cfg = TrainConfig {
            seed,
            ..entry.train.clone()
        };
        let model = Model::new(entry.hyperparams.clone(), seed)?;
        let out = train(model, &data.train, &data.val, &cfg, None)?;
        scores.extend(evaluate_model(&out.best, &data.test, padding)?);
    }
    Ok(scores)
}

/// Trains and evaluates every grid entry in order. Failures are recorded in
/// the row's status and do not stop the grid. With an output directory, each
/// finished entry leaves `<slug>/result.json` (rerunning skips it) and a
/// `config.toml` snapshot, and the table is written to `ablations.csv`.
pub fn run_ablations(grid: &ExperimentGrid, data: &Dataset) -> Result<Vec<AblationRow>> {
    grid.validate()?;
    let mut rows = Vec::with_capacity(grid.entries.len());
    for entry in &grid.entries {
        let dir = grid.output_dir.as_ref().map(|d| d.join(slug(&entry.name)));
        let result_path = dir.as_ref().map(|d| d.join("result.json"));
        if let Some(p) = result_path.as_ref().filter(|p| p.exists()) {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            if let Ok(row) = serde_json::from_str::<AblationRow>(&text) {
                log::info!("{}: reusing {}", entry.name, p.display());
                rows.push(row);
                continue;
            }
        }
        log::info!("{}: training", entry.name);
        let row = match run_entry(entry, &grid.seeds, data, grid.padding) {
            Ok(scores) => AblationRow::from_scores(&entry.name, &scores),
            Err(e) => {
                log::error!("{}: {e}", entry.name);
                AblationRow::failed(&entry.name, &e)
            }
        };
        if let (Some(dir), Some(p)) = (&dir, &result_path) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            RunConfig {
                model: entry.hyperparams.clone(),
                train: entry.train.clone(),
                inference: InferenceConfig { padding: grid.padding },
            }
            .save(dir.join("config.toml"))?;
            if row.is_complete() {
                let text = serde_json::to_string_pretty(&row).expect("row serializes");
                fs::write(p, text).map_err(|e| Error::io(p, e))?;
            }
        }
        rows.push(row);
    }
    if let Some(d) = &grid.output_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        write_csv(&d.join("ablations.csv"), &rows, &ABLATION_COLUMNS)?;
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartingPoint {
    Scratch,
    Denoising,
    Inpainting,
}

impl StartingPoint {
    pub const ALL: [StartingPoint; 3] = [StartingPoint::Scratch, StartingPoint::Denoising, StartingPoint::Inpainting];

    fn task(self) -> PretrainTask {
        match self {
            StartingPoint::Scratch => PretrainTask::None,
            StartingPoint::Denoising => PretrainTask::Denoising,
            StartingPoint::Inpainting => PretrainTask::Inpainting,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowLabelSpec {
    pub n_train: Vec<usize>,
    pub options: Vec<StartingPoint>,
    pub seeds: Vec<u64>,
    pub hyperparams: Hyperparams,
    pub train: TrainConfig,
    pub padding: PadMode,
}

/// Test DSC for one (n_train, starting point) cell across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowLabelCell {
    pub n_train: usize,
    pub option: StartingPoint,
    pub dsc_mean: f64,
    pub dsc_min: f64,
    pub dsc_max: f64,
    pub dsc_range: f64,
    pub runs: usize,
}

pub const LOW_LABEL_COLUMNS: [&str; 7] = ["n_train", "option", "dsc_mean", "dsc_min", "dsc_max", "dsc_range", "runs"];

/// For each labeled-set size, labels the first `n` volumes of the training
/// pool and (for pre-trained options) pre-trains on the remaining ones, then
/// records mean test DSC per seed.
pub fn run_low_label_protocol(spec: &LowLabelSpec, data: &Dataset) -> Result<Vec<LowLabelCell>> {
    spec.hyperparams.validate()?;
    spec.train.validate()?;
    let pool = data.train.len();
    if spec.seeds.is_empty() {
        return Err(Error::Config("low-label protocol needs at least one seed".into()));
    }
    if data.val.is_empty() || data.test.is_empty() {
        return Err(Error::Data("low-label protocol needs validation and test volumes".into()));
    }
    for &n in &spec.n_train {
        if n == 0 || n > pool {
            return Err(Error::Data(format!("n_train = {n} does not fit a training pool of {pool}")));
        }
        if n == pool && spec.options.iter().any(|&o| o != StartingPoint::Scratch) {
            return Err(Error::Data(format!(
                "n_train = {n} leaves no unlabeled volumes for pre-training"
            )));
        }
    }
    let mut cells = Vec::new();
    for &n in &spec.n_train {
        let (labeled, unlabeled) = data.train.split_at(n);
        for &option in &spec.options {
            let mut scores = Vec::with_capacity(spec.seeds.len());
            for &seed in &spec.seeds {
                let cfg = TrainConfig {
                    seed,
                    pretrain_task: option.task(),
                    ..spec.train.clone()
                };
                let model = Model::new(spec.hyperparams.clone(), seed)?;
                let best = match option {
                    StartingPoint::Scratch => train(model, labeled, &data.val, &cfg, None)?.best,
                    _ => pretrain_then_finetune(model, unlabeled, labeled, &data.val, &cfg, None)?.finetune.best,
                };
                let s = evaluate_model(&best, &data.test, spec.padding)?;
                scores.push(mean(&s.iter().map(|v| v.dsc).collect::<Vec<_>>()));
                log::info!("n_train {n} {option:?} seed {seed}: DSC {:.4}", scores.last().unwrap());
            }
            let (lo, hi) = scores
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
            cells.push(LowLabelCell {
                n_train: n,
                option,
                dsc_mean: mean(&scores),
                dsc_min: lo,
                dsc_max: hi,
                dsc_range: hi - lo,
                runs: scores.len(),
            });
        }
    }
    Ok(cells)
}
