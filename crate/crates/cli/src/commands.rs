use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use atsg_core::config::RunConfig;
use atsg_core::data::{
    generate_synthetic_dataset, read_volume, split_manifest, write_volume, zscore, DatasetManifest, PadMode,
    SplitRatios, Volume,
};
use atsg_core::harness::{
    ablation_entries, evaluate_model, run_ablations, run_low_label_protocol, write_csv, Dataset, ExperimentGrid,
    LowLabelSpec, StartingPoint, LOW_LABEL_COLUMNS,
};
use atsg_core::inference::{run_inference, InferenceOptions};
use atsg_core::metrics::{dsc, surface_distance_stats};
use atsg_core::model::{checkpoint, Hyperparams, Model};
use atsg_core::training::{
    attach_segmentation_head, check_model_gradients, pretrain, train, PhaseOutput, PretrainTask, TrainOutcome,
};
use atsg_core::Error;

#[derive(Debug, Parser)]
#[command(name = "atsg", version, about = "Patch-transformer volumetric segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic ellipsoid volumes, masks and a split manifest.
    GenData(GenDataArgs),
    /// Train a segmentation model from scratch.
    Train(TrainArgs),
    /// Self-supervised pre-training on the training images (masks unused).
    Pretrain(PretrainArgs),
    /// Replace a pre-trained model's head and fine-tune for segmentation.
    Finetune(FinetuneArgs),
    /// Sliding-window segmentation of one volume.
    Segment(SegmentArgs),
    /// Voxel-wise attention maps of one volume, one file per stage and head.
    Attention(AttentionArgs),
    /// Score a checkpoint on a manifest split, or a prediction against a truth mask.
    Eval(EvalArgs),
    /// Run the eight-row hyperparameter ablation grid.
    Ablate(AblateArgs),
    /// Run the reduced-label protocol (scratch vs. pre-trained starting points).
    Lowlabel(LowLabelArgs),
    /// Compare analytic and finite-difference gradients of a fresh model.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Padding {
    Mirror,
    Zero,
}

impl From<Padding> for PadMode {
    fn from(p: Padding) -> Self {
        match p {
            Padding::Mirror => PadMode::Mirror,
            Padding::Zero => PadMode::Zero,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Task {
    Denoising,
    Inpainting,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

/// Settings shared by every command that trains. Flags override values from
/// `--config`, which override built-in defaults.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML run configuration ([model], [train], [inference] tables).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Use the desk-scale model (W=6, n=3, D=8, D_h=4, n_h=2, K=2) instead of the configured one.
    #[arg(long)]
    pub tiny: bool,
    /// Random seed for initialization and block sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Segmentation training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Pre-training epochs (defaults to --epochs).
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    /// Blocks per mini-batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Blocks drawn per epoch.
    #[arg(long)]
    pub blocks_per_epoch: Option<usize>,
    /// Size of the fixed validation block set.
    #[arg(long)]
    pub val_blocks: Option<usize>,
    /// Denoising signal-to-noise ratio in dB.
    #[arg(long)]
    pub snr_db: Option<f64>,
    /// Padding of volume borders at inference.
    #[arg(long, value_enum)]
    pub padding: Option<Padding>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if self.tiny {
            cfg.model = Hyperparams::tiny();
        }
        let t = &mut cfg.train;
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.epochs {
            t.max_epochs = v;
        }
        if let Some(v) = self.pretrain_epochs {
            t.pretrain_epochs = Some(v);
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.blocks_per_epoch {
            t.blocks_per_epoch = v;
        }
        if let Some(v) = self.val_blocks {
            t.val_blocks = v;
        }
        if let Some(v) = self.snr_db {
            t.snr_db = v;
        }
        if let Some(p) = self.padding {
            cfg.inference.padding = p.into();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts.as_slice() {
        [n] => Ok([*n; 3]),
        [x, y, z] => Ok([*x, *y, *z]),
        _ => Err("expected N or X,Y,Z".into()),
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Number of volumes.
    #[arg(long)]
    pub count: usize,
    /// Volume size, either N (cube) or X,Y,Z.
    #[arg(long, value_parser = parse_shape)]
    pub shape: [usize; 3],
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for the epoch log and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Self-supervised objective.
    #[arg(long, value_enum)]
    pub task: Option<Task>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Pre-trained checkpoint; its hyperparameters are used as is.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Input image volume.
    #[arg(long = "in", value_name = "VOLUME")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write one attention map per stage and head.
    #[arg(long)]
    pub attention: bool,
    #[arg(long, value_enum, default_value = "mirror")]
    pub padding: Padding,
}

#[derive(Debug, Args)]
pub struct AttentionArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in", value_name = "VOLUME")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "mirror")]
    pub padding: Padding,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate on a manifest split.
    #[arg(long, requires = "manifest", conflicts_with_all = ["pred", "truth"])]
    pub ckpt: Option<PathBuf>,
    #[arg(long, requires = "ckpt")]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Predicted label volume.
    #[arg(long, requires = "truth")]
    pub pred: Option<PathBuf>,
    /// Ground-truth label volume.
    #[arg(long, requires = "pred")]
    pub truth: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "mirror")]
    pub padding: Padding,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| format!("{p:?}: {e}")))
        .collect()
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory; finished rows are reused on rerun.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated training seeds per row.
    #[arg(long, value_parser = parse_list::<u64>, default_value = "0")]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct LowLabelArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated labeled-set sizes.
    #[arg(long, value_parser = parse_list::<usize>)]
    pub n_train: Vec<usize>,
    /// Starting points to compare.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "scratch,denoising,inpainting")]
    pub options: Vec<Start>,
    #[arg(long, value_parser = parse_list::<u64>, default_value = "0")]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Start {
    Scratch,
    Denoising,
    Inpainting,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Check the desk-scale model (the only size practical on a CPU).
    #[arg(long)]
    pub tiny: bool,
    /// TOML run configuration whose [model] table is checked.
    #[arg(long, value_name = "FILE", conflicts_with = "tiny")]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-3)]
    pub step: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

/// Runs one command; the returned value is the process exit code.
pub fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Segment(a) => segment_cmd(a),
        Command::Attention(a) => attention_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Lowlabel(a) => lowlabel_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
    .map(|()| 0)
    .or_else(|e| match e.downcast_ref::<GradcheckFailed>() {
        Some(_) => Ok(3),
        None => Err(e),
    })
}

#[derive(Debug)]
struct GradcheckFailed;

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("gradient check failed")
    }
}

impl std::error::Error for GradcheckFailed {}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    if a.count == 0 {
        bail!(Error::Config("--count must be at least 1".into()));
    }
    // Everything is generated and split in memory before the first write.
    let cases = generate_synthetic_dataset(a.count, a.shape, a.seed)?;
    let items: Vec<(PathBuf, Option<PathBuf>)> = (0..a.count)
        .map(|i| {
            (
                PathBuf::from(format!("case_{i:03}.avol")),
                Some(PathBuf::from(format!("case_{i:03}_mask.avol"))),
            )
        })
        .collect();
    let manifest = split_manifest(&items, SplitRatios::default(), a.seed)?;
    create_dir(&a.out)?;
    for (case, (image, mask)) in cases.iter().zip(&items) {
        write_volume(a.out.join(image), &case.image)?;
        write_volume(a.out.join(mask.as_ref().expect("mask path")), &Volume::from_mask(&case.mask))?;
    }
    manifest.save(a.out.join("manifest.json"))?;
    log::info!("wrote {} volumes to {}", a.count, a.out.display());
    Ok(())
}

fn load_dataset(manifest: &Path, classes: usize) -> Result<Dataset> {
    let m = DatasetManifest::load(manifest)?;
    Ok(Dataset::from_manifest(&m, classes)?)
}

fn log_outcome(o: &TrainOutcome) {
    match o.best_epoch.checked_sub(1).and_then(|i| o.stats.get(i)) {
        Some(s) => log::info!("best epoch {} (validation loss {:.6})", s.epoch, s.val_loss),
        None => log::warn!("no epoch improved on the initial validation loss {:.6}", o.initial_val_loss),
    }
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = a.run.resolve()?;
    let data = load_dataset(&a.manifest, cfg.model.classes)?;
    let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    create_dir(&a.out)?;
    cfg.save(a.out.join("config.toml"))?;
    let out = train(model, &data.train, &data.val, &cfg.train, Some(&PhaseOutput::in_dir(&a.out, "")))?;
    checkpoint::save(a.out.join("last.atsg"), &out.last)?;
    log_outcome(&out);
    Ok(())
}

fn pretrain_cmd(a: PretrainArgs) -> Result<()> {
    let mut cfg = a.run.resolve()?;
    if let Some(t) = a.task {
        cfg.train.pretrain_task = match t {
            Task::Denoising => PretrainTask::Denoising,
            Task::Inpainting => PretrainTask::Inpainting,
        };
    }
    if cfg.train.pretrain_task == PretrainTask::None {
        bail!(Error::Config("pre-training needs --task or train.pretrain_task".into()));
    }
    let data = load_dataset(&a.manifest, cfg.model.classes)?;
    let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    create_dir(&a.out)?;
    cfg.save(a.out.join("config.toml"))?;
    let out = pretrain(model, &data.train, &data.val, &cfg.train, Some(&PhaseOutput::in_dir(&a.out, "pretrain_")))?;
    checkpoint::save(a.out.join("pretrain_last.atsg"), &out.last)?;
    log_outcome(&out);
    Ok(())
}

fn finetune_cmd(a: FinetuneArgs) -> Result<()> {
    let mut cfg = a.run.resolve()?;
    let model = checkpoint::load(&a.ckpt)?;
    if a.run.tiny || a.run.config.is_some() {
        log::info!("model hyperparameters come from {}", a.ckpt.display());
    }
    cfg.model = model.hp.clone();
    let data = load_dataset(&a.manifest, cfg.model.classes)?;
    let start = attach_segmentation_head(model, cfg.train.seed ^ 0x0053_4547);
    create_dir(&a.out)?;
    cfg.save(a.out.join("config.toml"))?;
    let out = train(start, &data.train, &data.val, &cfg.train, Some(&PhaseOutput::in_dir(&a.out, "")))?;
    checkpoint::save(a.out.join("last.atsg"), &out.last)?;
    log_outcome(&out);
    Ok(())
}

/// Loads a model with a segmentation head and a z-scored image volume.
fn load_for_inference(ckpt: &Path, input: &Path) -> Result<(Model, atsg_core::tensor::Tensor, [f64; 3])> {
    let model = checkpoint::load(ckpt)?;
    if model.weights.seg_head.is_none() {
        bail!(Error::Config(format!(
            "{} has no segmentation head; fine-tune it first",
            ckpt.display()
        )));
    }
    let vol = read_volume(input)?;
    if vol.channels() != model.hp.channels {
        bail!(Error::Data(format!(
            "{} has {} channels, the model expects {}",
            input.display(),
            vol.channels(),
            model.hp.channels
        )));
    }
    let image = zscore(&vol.to_tensor()?);
    Ok((model, image, vol.spacing()))
}

fn write_attention(out: &Path, maps: &[atsg_core::inference::AttentionMap], spacing: [f64; 3]) -> Result<()> {
    for m in maps {
        write_volume(out.join(format!("{}.avol", m.name())), &Volume::from_tensor(&m.map, spacing)?)?;
    }
    Ok(())
}

fn segment_cmd(a: SegmentArgs) -> Result<()> {
    let (model, image, spacing) = load_for_inference(&a.ckpt, &a.input)?;
    let opts = InferenceOptions {
        padding: a.padding.into(),
        attention: a.attention,
    };
    let out = run_inference(&image, spacing, &model, opts)?;
    create_dir(&a.out)?;
    write_volume(a.out.join("probabilities.avol"), &Volume::from_tensor(&out.probabilities, spacing)?)?;
    write_volume(a.out.join("labels.avol"), &Volume::from_mask(&out.labels))?;
    write_attention(&a.out, &out.attention, spacing)?;
    log::info!("wrote segmentation to {}", a.out.display());
    Ok(())
}

fn attention_cmd(a: AttentionArgs) -> Result<()> {
    let (model, image, spacing) = load_for_inference(&a.ckpt, &a.input)?;
    let opts = InferenceOptions {
        padding: a.padding.into(),
        attention: true,
    };
    let out = run_inference(&image, spacing, &model, opts)?;
    create_dir(&a.out)?;
    write_attention(&a.out, &out.attention, spacing)?;
    log::info!("wrote {} attention maps to {}", out.attention.len(), a.out.display());
    Ok(())
}

#[derive(serde::Serialize)]
struct ClassScore {
    class: u8,
    dsc: f64,
    hd95_mm: Option<f64>,
    assd_mm: Option<f64>,
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    if let (Some(ckpt), Some(manifest)) = (&a.ckpt, &a.manifest) {
        let model = checkpoint::load(ckpt)?;
        let m = DatasetManifest::load(manifest)?;
        let split = match a.split {
            SplitArg::Train => atsg_core::data::Split::Train,
            SplitArg::Val => atsg_core::data::Split::Val,
            SplitArg::Test => atsg_core::data::Split::Test,
        };
        let vols = atsg_core::data::load_split(&m, split, model.hp.classes)?;
        if vols.is_empty() {
            bail!(Error::Data(format!("{split:?} split of {} is empty", manifest.display())));
        }
        let scores = evaluate_model(&model, &vols, a.padding.into())?;
        let mean = scores.iter().map(|s| s.dsc).sum::<f64>() / scores.len() as f64;
        write_csv(&a.out, &scores, &["name", "dsc", "hd95_mm", "assd_mm"])?;
        log::info!("mean DSC {mean:.4} over {} volumes", scores.len());
        return Ok(());
    }
    let (Some(pred), Some(truth)) = (&a.pred, &a.truth) else {
        bail!(Error::Config("eval needs --ckpt and --manifest, or --pred and --truth".into()));
    };
    let p = read_volume(pred)?.to_mask()?;
    let t = read_volume(truth)?.to_mask()?;
    let top = p.labels.iter().chain(&t.labels).copied().max().unwrap_or(0);
    let mut rows = Vec::new();
    for c in 1..=top {
        let (hd95_mm, assd_mm) = match surface_distance_stats(&p, &t, c) {
            Ok((h, s)) => (Some(h), Some(s)),
            Err(Error::UndefinedMetric(m)) => {
                log::warn!("class {c}: {m}");
                (None, None)
            }
            Err(e) => return Err(e.into()),
        };
        rows.push(ClassScore {
            class: c,
            dsc: dsc(&p, &t, c)?,
            hd95_mm,
            assd_mm,
        });
    }
    write_csv(&a.out, &rows, &["class", "dsc", "hd95_mm", "assd_mm"])?;
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let cfg = a.run.resolve()?;
    let data = load_dataset(&a.manifest, cfg.model.classes)?;
    let grid = ExperimentGrid {
        entries: ablation_entries(&cfg.model, &cfg.train),
        seeds: a.seeds,
        output_dir: Some(a.out.clone()),
        padding: cfg.inference.padding,
    };
    let rows = run_ablations(&grid, &data)?;
    let failed = rows.iter().filter(|r| !r.is_complete()).count();
    log::info!("{} rows written to {}", rows.len(), a.out.join("ablations.csv").display());
    if failed > 0 {
        log::warn!("{failed} rows failed; see the status column");
    }
    Ok(())
}

fn lowlabel_cmd(a: LowLabelArgs) -> Result<()> {
    let cfg = a.run.resolve()?;
    if a.n_train.is_empty() {
        bail!(Error::Config("--n-train needs at least one size".into()));
    }
    let data = load_dataset(&a.manifest, cfg.model.classes)?;
    let spec = LowLabelSpec {
        n_train: a.n_train,
        options: a
            .options
            .iter()
            .map(|o| match o {
                Start::Scratch => StartingPoint::Scratch,
                Start::Denoising => StartingPoint::Denoising,
                Start::Inpainting => StartingPoint::Inpainting,
            })
            .collect(),
        seeds: a.seeds,
        hyperparams: cfg.model.clone(),
        train: cfg.train.clone(),
        padding: cfg.inference.padding,
    };
    let cells = run_low_label_protocol(&spec, &data)?;
    create_dir(&a.out)?;
    cfg.save(a.out.join("config.toml"))?;
    write_csv(&a.out.join("lowlabel.csv"), &cells, &LOW_LABEL_COLUMNS)?;
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let hp = match (&a.config, a.tiny) {
        (Some(p), _) => RunConfig::load(p)?.model,
        (None, true) => Hyperparams::tiny(),
        (None, false) => bail!(Error::Config(
            "gradcheck needs --tiny or --config (the default model is too large for finite differences)".into()
        )),
    };
    hp.validate()?;
    let r = check_model_gradients(&hp, a.seed, a.step, a.tolerance)?;
    println!("max relative error: {:e}", r.max_rel_error());
    println!("soft dice: {:e}", r.segmentation.max_rel_error);
    println!("reconstruction: {:e}", r.reconstruction.max_rel_error);
    if r.passed() {
        Ok(())
    } else {
        log::error!("gradient check failed (tolerance {:e})", a.tolerance);
        Err(GradcheckFailed.into())
    }
}
