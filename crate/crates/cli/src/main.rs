//! `bindmix`: one binary tying the pipeline together — dataset synthesis,
//! co-occurrence statistics, blended-dataset generation, two-stage
//! training, and evaluation reports.
//!
//! Every command is deterministic given its flags and `--seed`, and every
//! output directory gets a `run.meta` echoing the resolved configuration,
//! so a rerun with the same inputs reproduces the artifacts byte for
//! byte. Exit codes: 0 success, 1 invalid input, 2 I/O failure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bindmix::bindnet::{
    load_checkpoint, save_checkpoint, train_stage1, train_stage2, write_trace, TrainConfig,
    TrainOutput, TrainSet,
};
use bindmix::blend::{
    blend_batch_cm, blend_batch_cutmix, blend_batch_mixup, generate_cc_dataset, BlendConfig,
    BlendStrategy, BlendedSample, DeltaSampler,
};
use bindmix::cooccur::{compute_cooccurrence, load_matrix, save_matrix, CooccurrenceMode};
use bindmix::dataset::{
    load_label_png, write_image_png, write_label_png, DatasetManifest, SegSample,
};
use bindmix::eval::{
    miou, saliency_metrics, subset_by_cooccurrence_threshold, subset_by_object_count,
    subset_by_occlusion, subset_by_unique_count, ConfusionMatrix, CountBucket, OcclusionMode,
    SaliencyScore,
};
use bindmix::rng::derive_rng;
use bindmix::synth::{write_dataset, SynthConfig};
use bindmix::{Error, Result};

#[derive(Parser)]
#[command(
    name = "bindmix",
    version,
    about = "Category-aware image blending, binding-network training, and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic texture-shapes dataset (images, labels,
    /// instance maps, manifest).
    Synth(SynthArgs),
    /// Compute the category co-occurrence matrix of a dataset.
    Cooccur(CooccurArgs),
    /// Write a blended dataset to disk.
    Augment(AugmentArgs),
    /// Train the binding network (stage 1, stage 2, or both).
    Train(TrainArgs),
    /// Score predictions against a manifest and emit TSV reports.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    /// One count per image containing the pair.
    ImageCount,
    /// Counts weighted by the rarer class's pixel share.
    PixelWeighted,
}

impl From<ModeArg> for CooccurrenceMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::ImageCount => CooccurrenceMode::ImageCount,
            ModeArg::PixelWeighted => CooccurrenceMode::PixelWeighted,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    /// Offline categorical-cluster blending.
    Cc,
    /// Online co-occurrence-matched blending (needs a matrix).
    Cm,
    /// Random whole-image mixing.
    Mixup,
    /// Random rectangle pasting.
    Cutmix,
}

impl From<StrategyArg> for BlendStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Cc => BlendStrategy::Cc,
            StrategyArg::Cm => BlendStrategy::Cm,
            StrategyArg::Mixup => BlendStrategy::Mixup,
            StrategyArg::Cutmix => BlendStrategy::Cutmix,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

/// δ-distribution flags shared by augment and train. `--alpha` selects a
/// symmetric Beta; otherwise `--delta-lo/--delta-hi` select a uniform
/// range.
#[derive(Args)]
struct DeltaArgs {
    /// Lower end of the uniform δ range.
    #[arg(long, default_value_t = 0.5)]
    delta_lo: f64,
    /// Upper end of the uniform δ range.
    #[arg(long, default_value_t = 1.0)]
    delta_hi: f64,
    /// Use Beta(α, α) for δ instead of the uniform range.
    #[arg(long, conflicts_with_all = ["delta_lo", "delta_hi"])]
    alpha: Option<f64>,
    /// Category-union threshold γ above which δ snaps to the override.
    #[arg(long, default_value_t = 4)]
    gamma: usize,
    /// δ used when a pair's categories exceed γ.
    #[arg(long, default_value_t = 0.9)]
    delta_override: f64,
}

impl DeltaArgs {
    fn sampler(&self) -> DeltaSampler {
        match self.alpha {
            Some(alpha) => DeltaSampler::Beta { alpha },
            None => DeltaSampler::Uniform {
                lo: self.delta_lo,
                hi: self.delta_hi,
            },
        }
    }

    fn blend_config(&self, strategy: BlendStrategy) -> BlendConfig {
        BlendConfig {
            delta_sampler: self.sampler(),
            max_unique_categories: self.gamma,
            delta_override: self.delta_override,
            strategy,
            ..BlendConfig::default()
        }
    }

    fn describe(&self, meta: &mut Vec<(String, String)>) {
        match self.alpha {
            Some(alpha) => meta.push(("delta".into(), format!("beta alpha={alpha}"))),
            None => meta.push((
                "delta".into(),
                format!("uniform [{}, {}]", self.delta_lo, self.delta_hi),
            )),
        }
        meta.push(("gamma".into(), self.gamma.to_string()));
        meta.push(("delta_override".into(), self.delta_override.to_string()));
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (images/, labels/, instances/, manifest.tsv).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of images to generate.
    #[arg(long, default_value_t = 100)]
    count: usize,
}

#[derive(Args)]
struct CooccurArgs {
    /// Dataset manifest (TSV with a `#classes=…` header).
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for matrix.txt and run.meta.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::ImageCount)]
    mode: ModeArg,
    /// How many of the strongest pairs to print.
    #[arg(long, default_value_t = 10)]
    top_k: usize,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for `<k>_img/gta/gtb.png` and blends.tsv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Batch size for the online strategies (cm, mixup, cutmix).
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Co-occurrence matrix file; required for the cm strategy.
    #[arg(long)]
    matrix: Option<PathBuf>,
    #[command(flatten)]
    delta: DeltaArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for checkpoints, loss traces, and run.meta.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = StrategyArg::Cm)]
    strategy: StrategyArg,
    #[arg(long, value_enum, default_value_t = StageArg::Both)]
    stage: StageArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Iteration budget per stage; overrides the epoch-derived count.
    #[arg(long)]
    iters: Option<usize>,
    /// Learning rate: stage-1 base rate, or the fine-tune rate when
    /// `--stage 2`.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    /// Co-occurrence matrix for the cm strategy; computed from the
    /// manifest when omitted.
    #[arg(long)]
    matrix: Option<PathBuf>,
    /// Stage-1 checkpoint to fine-tune; required for `--stage 2`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Encoder channel width.
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[command(flatten)]
    delta: DeltaArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of predictions named `<id>.png`.
    #[arg(long)]
    predictions: PathBuf,
    /// Output directory for report.tsv / per_class.tsv / saliency.tsv.
    #[arg(long)]
    out: PathBuf,
    /// Co-occurrence matrix enabling the rarity-threshold subsets.
    #[arg(long)]
    matrix: Option<PathBuf>,
    /// Thresholds for the rarity subsets, e.g. `--thresholds 50,40,30,20,10`.
    #[arg(long, value_delimiter = ',', requires = "matrix")]
    thresholds: Vec<u64>,
    /// Instance-map directory enabling object-count and occlusion subsets.
    #[arg(long)]
    instances: Option<PathBuf>,
    /// Score grayscale saliency maps (max-Fβ and MAE) instead of label
    /// maps.
    #[arg(long, default_value_t = false)]
    saliency: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are success paths; anything else is bad
            // input (exit 1), not clap's default usage code.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Cooccur(args) => cmd_cooccur(args),
        Command::Augment(args) => cmd_augment(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

/// Record the resolved configuration. Content is a pure function of the
/// flags, so reruns stay byte-identical.
fn write_meta(dir: &Path, command: &str, fields: &[(String, String)]) -> Result<()> {
    let mut text = format!("command={command}\n");
    for (k, v) in fields {
        let _ = writeln!(text, "{k}={v}");
    }
    let path = dir.join("run.meta");
    fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
}

fn meta(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    ensure_dir(&args.out)?;
    let config = SynthConfig::default();
    let manifest = write_dataset(&args.out, args.seed, args.count, &config)?;
    write_meta(
        &args.out,
        "synth",
        &[
            meta("seed", args.seed),
            meta("count", args.count),
            meta("height", config.height),
            meta("width", config.width),
            meta("classes", manifest.n_classes),
        ],
    )?;
    println!(
        "wrote {} samples to {}",
        manifest.entries.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_cooccur(args: CooccurArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.manifest)?;
    let matrix = compute_cooccurrence(&manifest, args.mode.into())?;
    ensure_dir(&args.out)?;
    save_matrix(&matrix, args.out.join("matrix.txt"))?;
    write_meta(
        &args.out,
        "cooccur",
        &[
            meta("manifest", args.manifest.display()),
            meta("mode", CooccurrenceMode::from(args.mode)),
            meta("classes", manifest.n_classes),
            meta("images", manifest.entries.len()),
        ],
    )?;
    for (i, j, count) in matrix.top_pairs(args.top_k) {
        println!("{i}\t{j}\t{count}");
    }
    Ok(())
}

fn write_blends(out: &Path, blends: &[BlendedSample]) -> Result<()> {
    let mut tsv = String::new();
    for (k, b) in blends.iter().enumerate() {
        write_image_png(&out.join(format!("{k}_img.png")), &b.image)?;
        write_label_png(&out.join(format!("{k}_gta.png")), &b.gt_dominant)?;
        write_label_png(&out.join(format!("{k}_gtb.png")), &b.gt_phantom)?;
        let _ = writeln!(tsv, "{k}\t{}\t{}\t{}", b.dominant_id, b.phantom_id, b.delta);
    }
    let path = out.join("blends.tsv");
    fs::write(&path, tsv).map_err(|e| Error::Io { path, source: e })
}

fn cmd_augment(args: AugmentArgs) -> Result<()> {
    let strategy: BlendStrategy = args.strategy.into();
    let manifest = DatasetManifest::load(&args.manifest)?;
    let config = args.delta.blend_config(strategy);

    let blends: Vec<BlendedSample> = match strategy {
        // The offline strategy materializes the full cluster plan.
        BlendStrategy::Cc => generate_cc_dataset(&manifest, &config, args.seed)?,
        // Online strategies write one epoch: the manifest in order,
        // chunked into batches, each with its own derived RNG stream.
        _ => {
            if args.batch_size == 0 {
                return Err(Error::InvalidConfig("batch size must be positive".into()));
            }
            let matrix = match (strategy, &args.matrix) {
                (BlendStrategy::Cm, Some(path)) => Some(load_matrix(path)?),
                (BlendStrategy::Cm, None) => {
                    return Err(Error::InvalidConfig(
                        "strategy cm needs --matrix (run `bindmix cooccur` first)".into(),
                    ));
                }
                _ => None,
            };
            let samples: Vec<SegSample> = manifest
                .entries
                .iter()
                .map(|e| manifest.load_entry_sample(e))
                .collect::<Result<_>>()?;
            let mut blends = Vec::with_capacity(samples.len());
            for (bi, batch) in samples.chunks(args.batch_size).enumerate() {
                let mut rng = derive_rng(args.seed, &["augment", &bi.to_string()]);
                let out = match strategy {
                    BlendStrategy::Cm => {
                        blend_batch_cm(batch, matrix.as_ref().unwrap(), &config, &mut rng)?
                    }
                    BlendStrategy::Mixup => blend_batch_mixup(batch, &config, &mut rng)?,
                    BlendStrategy::Cutmix => blend_batch_cutmix(batch, &config, &mut rng)?,
                    BlendStrategy::Cc => unreachable!(),
                };
                blends.extend(out);
            }
            blends
        }
    };

    ensure_dir(&args.out)?;
    write_blends(&args.out, &blends)?;
    let mut fields = vec![
        meta("manifest", args.manifest.display()),
        meta("strategy", strategy),
        meta("seed", args.seed),
        meta("batch_size", args.batch_size),
        meta("blends", blends.len()),
    ];
    args.delta.describe(&mut fields);
    write_meta(&args.out, "augment", &fields)?;
    println!("wrote {} blends to {}", blends.len(), args.out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let strategy: BlendStrategy = args.strategy.into();
    let manifest = DatasetManifest::load(&args.manifest)?;
    let set = TrainSet::load(&manifest)?;
    let blend_config = args.delta.blend_config(strategy);

    let mut config = TrainConfig {
        batch_size: args.batch_size,
        seed: args.seed,
        max_iters: args.iters,
        width: args.width,
        ..TrainConfig::default()
    };
    if let Some(lr) = args.lr {
        match args.stage {
            StageArg::Two => config.finetune_lr = lr,
            _ => config.base_lr = lr,
        }
    }

    ensure_dir(&args.out)?;
    let stage1_out: Option<TrainOutput> = match args.stage {
        StageArg::One | StageArg::Both => {
            let matrix = match (strategy, &args.matrix) {
                (BlendStrategy::Cm, Some(path)) => Some(load_matrix(path)?),
                // The statistic describes the training set itself, so
                // compute it on the fly when not supplied.
                (BlendStrategy::Cm, None) => {
                    Some(compute_cooccurrence(&manifest, CooccurrenceMode::ImageCount)?)
                }
                _ => None,
            };
            let out = train_stage1(&set, matrix.as_ref(), &blend_config, &config)?;
            save_checkpoint(&out.params, args.out.join("stage1.ckpt"))?;
            write_trace(args.out.join("stage1_trace.tsv"), &out.trace)?;
            Some(out)
        }
        StageArg::Two => None,
    };

    if matches!(args.stage, StageArg::Two | StageArg::Both) {
        let start = match (&stage1_out, &args.checkpoint) {
            (Some(out), _) => out.params.clone(),
            (None, Some(path)) => load_checkpoint(path)?,
            (None, None) => {
                return Err(Error::InvalidConfig(
                    "stage 2 needs --checkpoint with a stage-1 model".into(),
                ));
            }
        };
        let out = train_stage2(start, &set, &config)?;
        save_checkpoint(&out.params, args.out.join("stage2.ckpt"))?;
        write_trace(args.out.join("stage2_trace.tsv"), &out.trace)?;
    }

    let stage_name = match args.stage {
        StageArg::One => "1",
        StageArg::Two => "2",
        StageArg::Both => "both",
    };
    let mut fields = vec![
        meta("manifest", args.manifest.display()),
        meta("strategy", strategy),
        meta("stage", stage_name),
        meta("seed", args.seed),
        meta("width", args.width),
        meta("batch_size", args.batch_size),
        meta("base_lr", config.base_lr),
        meta("finetune_lr", config.finetune_lr),
        meta(
            "iters",
            args.iters.map_or("epoch-derived".into(), |i| i.to_string()),
        ),
    ];
    args.delta.describe(&mut fields);
    write_meta(&args.out, "train", &fields)?;
    println!("trained stage {stage_name} into {}", args.out.display());
    Ok(())
}

/// Merge the per-image confusion partials of `ids` and report the subset
/// row; empty subsets get a `-` placeholder instead of an mIoU.
fn subset_row(name: &str, ids: &[String], per_image: &BTreeMap<String, ConfusionMatrix>) -> String {
    let mut merged: Option<ConfusionMatrix> = None;
    for id in ids {
        let cm = per_image[id].clone();
        merged = Some(match merged {
            Some(acc) => acc.merge(cm),
            None => cm,
        });
    }
    let score = merged
        .and_then(|cm| miou(&cm).ok())
        .map_or("-".to_string(), |r| r.miou.to_string());
    format!("{name}\t{}\t{score}\n", ids.len())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.manifest)?;
    ensure_dir(&args.out)?;

    if args.saliency {
        return eval_saliency(&args, &manifest);
    }

    let mut per_image: BTreeMap<String, ConfusionMatrix> = BTreeMap::new();
    let mut overall = ConfusionMatrix::new(manifest.n_classes);
    for entry in &manifest.entries {
        let pred_path = args.predictions.join(format!("{}.png", entry.id));
        if !pred_path.exists() {
            return Err(Error::MissingPrediction(entry.id.clone()));
        }
        let pred = load_label_png(&pred_path)?;
        let gt = manifest.load_entry_label(entry)?;
        let mut cm = ConfusionMatrix::new(manifest.n_classes);
        cm.accumulate(&pred, &gt, manifest.ignore_index)?;
        overall = overall.merge(cm.clone());
        per_image.insert(entry.id.clone(), cm);
    }
    let overall_result = miou(&overall)?;

    let mut report = String::from("subset\tn_images\tmiou\n");
    let _ = writeln!(
        report,
        "overall\t{}\t{}",
        manifest.entries.len(),
        overall_result.miou
    );

    let buckets = [
        ("1", CountBucket::Exact(1)),
        ("2", CountBucket::Exact(2)),
        ("3", CountBucket::Exact(3)),
        ("4plus", CountBucket::AtLeast(4)),
    ];
    for (suffix, bucket) in buckets {
        let ids = subset_by_unique_count(&manifest, bucket)?;
        report.push_str(&subset_row(&format!("unique_{suffix}"), &ids, &per_image));
    }

    if let Some(instances) = &args.instances {
        for (suffix, bucket) in buckets {
            let ids = subset_by_object_count(&manifest, instances, bucket)?;
            report.push_str(&subset_row(&format!("objects_{suffix}"), &ids, &per_image));
        }
        for (name, mode) in [
            ("occluded_one", OcclusionMode::One),
            ("occluded_all", OcclusionMode::All),
        ] {
            let ids = subset_by_occlusion(&manifest, instances, mode)?;
            report.push_str(&subset_row(name, &ids, &per_image));
        }
    }

    if let Some(matrix_path) = &args.matrix {
        let matrix = load_matrix(matrix_path)?;
        for &t in &args.thresholds {
            let ids = subset_by_cooccurrence_threshold(&manifest, &matrix, t)?;
            report.push_str(&subset_row(&format!("cooccur_lt_{t}"), &ids, &per_image));
        }
    }

    let report_path = args.out.join("report.tsv");
    fs::write(&report_path, report).map_err(|e| Error::Io {
        path: report_path,
        source: e,
    })?;

    let mut per_class = String::from("class\tiou\n");
    for (c, iou) in overall_result.per_class.iter().enumerate() {
        let _ = writeln!(
            per_class,
            "{c}\t{}",
            iou.map_or("-".to_string(), |v| v.to_string())
        );
    }
    let per_class_path = args.out.join("per_class.tsv");
    fs::write(&per_class_path, per_class).map_err(|e| Error::Io {
        path: per_class_path,
        source: e,
    })?;

    write_meta(
        &args.out,
        "eval",
        &[
            meta("manifest", args.manifest.display()),
            meta("predictions", args.predictions.display()),
            meta("images", manifest.entries.len()),
            meta("overall_miou", overall_result.miou),
        ],
    )?;
    println!("overall mIoU {}", overall_result.miou);
    Ok(())
}

/// Saliency scoring: predictions are grayscale maps in `[0, 255]`,
/// ground truth is any non-background label; ignored pixels drop out of
/// both sides.
fn eval_saliency(args: &EvalArgs, manifest: &DatasetManifest) -> Result<()> {
    let mut scores: Vec<SaliencyScore> = Vec::new();
    for entry in &manifest.entries {
        let pred_path = args.predictions.join(format!("{}.png", entry.id));
        if !pred_path.exists() {
            return Err(Error::MissingPrediction(entry.id.clone()));
        }
        let pred_map = load_label_png(&pred_path)?;
        let gt_map = manifest.load_entry_label(entry)?;
        let mut pred = Vec::with_capacity(pred_map.data().len());
        let mut gt = Vec::with_capacity(pred_map.data().len());
        for (p, g) in pred_map.data().iter().zip(gt_map.data()) {
            if *g == manifest.ignore_index {
                continue;
            }
            pred.push(f64::from(*p) / 255.0);
            gt.push(*g != manifest.background_index);
        }
        scores.push(saliency_metrics(&pred, &gt)?);
    }
    let (fbeta, mae) = bindmix::eval::mean_saliency(&scores)?;
    let text = format!("fbeta\tmae\n{fbeta}\t{mae}\n");
    let path = args.out.join("saliency.tsv");
    fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
    write_meta(
        &args.out,
        "eval-saliency",
        &[
            meta("manifest", args.manifest.display()),
            meta("predictions", args.predictions.display()),
            meta("images", manifest.entries.len()),
            meta("max_fbeta", fbeta),
            meta("mae", mae),
        ],
    )?;
    println!("max-Fβ {fbeta} mae {mae}");
    Ok(())
}
