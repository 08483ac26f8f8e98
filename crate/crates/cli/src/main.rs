//! `esoseg`: generate phantoms, train, infer, evaluate and report.

mod run;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use esoseg_core::inference::{infer_volume, postprocess, InferenceOptions};
use esoseg_core::metrics::{per_slice_dice, precision_recall_auc, threshold_grid, write_metrics_csv};
use esoseg_core::network::load_checkpoint;
use esoseg_core::phantom::{generate_corpus, CorpusConfig, Manifest, Split, MANIFEST_FILE};
use esoseg_core::report::run_report;
use esoseg_core::trainer::{evaluate_split, split_dir, train, EvalCase, BEST_CHECKPOINT};
use esoseg_core::volgrid::load_scalar;
use esoseg_core::{Error, Network, Result, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use run::RunRecord;

#[derive(Parser)]
#[command(
    name = "esoseg",
    version,
    about = "Esophageal tumor segmentation lab on synthetic CT phantoms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a phantom corpus and its manifest.
    Generate(Common),
    /// Train one split, or all three.
    Train {
        #[command(flatten)]
        common: Common,
        /// Corpus directory (holding manifest.json).
        #[arg(long)]
        data: PathBuf,
    },
    /// Segment one volume with a checkpoint.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Score a checkpoint (or the split models of a run) on a corpus partition.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        partition: Partition,
        /// Also write predicted masks and per-slice DSC tables.
        #[arg(long)]
        overlay: bool,
    },
    /// Aggregate metrics tables into the results report.
    Report {
        #[command(flatten)]
        common: Common,
        /// `label=path` of a metrics CSV; repeatable.
        #[arg(long = "metrics")]
        metrics: Vec<String>,
        /// Collect `metrics_split*.csv` from this directory.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Precision/recall sweep over raw probabilities.
    PrCurve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        partition: Partition,
    },
}

#[derive(Args)]
struct Common {
    /// JSON configuration for the command.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Split id 1, 2, 3, or `all`.
    #[arg(long)]
    split: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, conflicts_with = "run")]
    checkpoint: Option<PathBuf>,
    /// Training run directory holding `split<k>/best.ckpt`.
    #[arg(long)]
    run: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Partition {
    Train,
    Val,
    Test,
}

impl From<Partition> for Split {
    fn from(p: Partition) -> Split {
        match p {
            Partition::Train => Split::Train,
            Partition::Val => Split::Val,
            Partition::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct InferConfig {
    threshold: f64,
    max_voxels: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            threshold: 0.5,
            max_voxels: InferenceOptions::default().max_voxels,
        }
    }
}

impl InferConfig {
    fn options(&self) -> InferenceOptions {
        InferenceOptions {
            max_voxels: self.max_voxels,
            tile: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PrConfig {
    /// Number of threshold steps between 1 and 0.
    steps: usize,
    max_voxels: usize,
}

impl Default for PrConfig {
    fn default() -> Self {
        PrConfig {
            steps: 100,
            max_voxels: InferenceOptions::default().max_voxels,
        }
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_splits(arg: Option<&str>, default: u32) -> Result<Vec<u32>> {
    match arg {
        None => Ok(vec![default]),
        Some("all") => Ok(vec![1, 2, 3]),
        Some(s) => match s.parse::<u32>() {
            Ok(k @ 1..=3) => Ok(vec![k]),
            _ => Err(Error::Parameter(format!("--split must be 1, 2, 3 or all, got {s:?}"))),
        },
    }
}

fn load_manifest(data: &Path) -> Result<Manifest> {
    Manifest::load(data.join(MANIFEST_FILE))
}

/// `(label, checkpoint)` pairs selected by `--checkpoint` or `--run`/`--split`.
fn models(model: &ModelArgs, split: Option<&str>) -> Result<Vec<(String, PathBuf)>> {
    match (&model.checkpoint, &model.run) {
        (Some(c), None) => {
            let label = split.unwrap_or("1").to_string();
            Ok(vec![(label, c.clone())])
        }
        (None, Some(run)) => {
            let ids = match split {
                None => vec![1, 2, 3],
                Some(s) => parse_splits(Some(s), 1)?,
            };
            let found: Vec<(String, PathBuf)> = ids
                .into_iter()
                .map(|k| (k.to_string(), split_dir(run, k).join(BEST_CHECKPOINT)))
                .filter(|(_, p)| p.exists())
                .collect();
            if found.is_empty() {
                return Err(Error::Parameter(format!(
                    "no split checkpoints under {}",
                    run.display()
                )));
            }
            Ok(found)
        }
        _ => Err(Error::Parameter("give either --checkpoint or --run".into())),
    }
}

fn generate(common: &Common) -> Result<()> {
    let mut cfg: CorpusConfig = read_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let manifest = generate_corpus(&cfg, &common.out)?;
    let (tr, va, te) = cfg.split_sizes();
    println!(
        "wrote {} phantoms ({tr} train, {va} val, {te} test) to {}",
        manifest.cases.len(),
        common.out.display()
    );
    RunRecord::new("generate", &cfg)?.seed(cfg.seed).write(&common.out)
}

fn train_cmd(common: &Common, data: &Path) -> Result<()> {
    let mut cfg: TrainConfig = read_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let manifest = load_manifest(data)?;
    create_dir(&common.out)?;
    let mut record = RunRecord::new("train", &cfg)?
        .seed(cfg.seed)
        .input(data.join(MANIFEST_FILE));
    for k in parse_splits(common.split.as_deref(), cfg.split_id)? {
        let split_cfg = TrainConfig {
            split_id: k,
            ..cfg.clone()
        };
        let dir = split_dir(&common.out, k);
        let out = train(&split_cfg, &manifest, Some(&dir))?;
        println!(
            "split {k}: {} steps, best validation DSC {:.4} at epoch {}",
            out.log.steps.len(),
            out.best_val_dsc,
            out.best_epoch
        );
        record = record.split(k);
    }
    record.write(&common.out)
}

fn infer_cmd(common: &Common, checkpoint: &Path, input: &Path) -> Result<()> {
    let cfg: InferConfig = read_config(common.config.as_deref())?;
    let net: Network = load_checkpoint(checkpoint)?;
    let volume = load_scalar(input)?.normalized();
    let prob = infer_volume(&net, &volume, &cfg.options())?;
    let mask = postprocess(&prob, cfg.threshold)?;
    create_dir(&common.out)?;
    prob.save(common.out.join("probability.vol"))?;
    mask.save(common.out.join("mask.vol"))?;
    println!("{} tumor voxels", mask.count());
    RunRecord::new("infer", &cfg)?
        .input(checkpoint.to_path_buf())
        .input(input.to_path_buf())
        .write(&common.out)
}

fn evaluate_cmd(common: &Common, model: &ModelArgs, data: &Path, partition: Partition, overlay: bool) -> Result<()> {
    let cfg: InferConfig = read_config(common.config.as_deref())?;
    let manifest = load_manifest(data)?;
    create_dir(&common.out)?;
    let mut record = RunRecord::new("evaluate", &cfg)?.input(data.join(MANIFEST_FILE));
    for (label, ckpt) in models(model, common.split.as_deref())? {
        let net: Network = load_checkpoint(&ckpt)?;
        let evals = evaluate_split(&net, &manifest, partition.into(), &label, &cfg.options())?;
        let rows: Vec<_> = evals.iter().map(|e| e.row.clone()).collect();
        let path = common.out.join(format!("metrics_split{label}.csv"));
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_metrics_csv(f, &rows)?;
        let mean = rows.iter().map(|r| r.dsc).sum::<f64>() / rows.len().max(1) as f64;
        println!(
            "split {label}: {} scans, mean DSC {mean:.4} -> {}",
            rows.len(),
            path.display()
        );
        if overlay {
            let dir = common.out.join(format!("overlay_split{label}"));
            create_dir(&dir)?;
            for (e, entry) in evals.iter().zip(manifest.split(partition.into())) {
                e.prediction.save(dir.join(format!("{}_pred.vol", e.row.scan_id)))?;
                let gt = EvalCase::load(&manifest, entry)?.gtv;
                let mut table = String::from("slice,dsc\n");
                for (k, d) in per_slice_dice(&e.prediction, &gt)?.iter().enumerate() {
                    table.push_str(&format!("{k},{}\n", d.map(|v| v.to_string()).unwrap_or_default()));
                }
                write_text(&dir.join(format!("{}_slices.csv", e.row.scan_id)), &table)?;
            }
        }
        record = record.input(ckpt);
    }
    record.write(&common.out)
}

fn report_cmd(common: &Common, metrics: &[String], run: Option<&Path>) -> Result<()> {
    let mut inputs: Vec<(String, PathBuf)> = Vec::new();
    for m in metrics {
        let (label, path) = m
            .split_once('=')
            .ok_or_else(|| Error::Parameter(format!("--metrics expects label=path, got {m:?}")))?;
        inputs.push((label.into(), path.into()));
    }
    if let Some(dir) = run {
        for k in 1..=3 {
            let p = dir.join(format!("metrics_split{k}.csv"));
            if p.exists() {
                inputs.push((k.to_string(), p));
            }
        }
    }
    if inputs.is_empty() {
        return Err(Error::Parameter("no metrics tables given".into()));
    }
    let refs: Vec<(String, &Path)> = inputs.iter().map(|(l, p)| (l.clone(), p.as_path())).collect();
    let report = run_report(&refs)?;
    create_dir(&common.out)?;
    let text = report.to_text();
    write_text(&common.out.join("report.txt"), &text)?;
    write_text(&common.out.join("report.json"), &report.to_json()?)?;
    print!("{text}");
    let mut record = RunRecord::new("report", &serde_json::Value::Null)?;
    for (_, p) in inputs {
        record = record.input(p);
    }
    record.write(&common.out)
}

fn pr_curve_cmd(common: &Common, model: &ModelArgs, data: &Path, partition: Partition) -> Result<()> {
    let cfg: PrConfig = read_config(common.config.as_deref())?;
    if cfg.steps == 0 {
        return Err(Error::Config("steps must be >= 1".into()));
    }
    let manifest = load_manifest(data)?;
    let cases = manifest
        .split(partition.into())
        .map(|e| EvalCase::load(&manifest, e))
        .collect::<Result<Vec<_>>>()?;
    create_dir(&common.out)?;
    let opts = InferenceOptions {
        max_voxels: cfg.max_voxels,
        tile: None,
    };
    let mut aucs = serde_json::Map::new();
    let mut record = RunRecord::new("pr-curve", &cfg)?.input(data.join(MANIFEST_FILE));
    for (label, ckpt) in models(model, common.split.as_deref())? {
        let net: Network = load_checkpoint(&ckpt)?;
        let probs = cases
            .iter()
            .map(|c| infer_volume(&net, &c.volume, &opts))
            .collect::<Result<Vec<_>>>()?;
        let scans: Vec<(&[f32], &esoseg_core::BinaryMask)> =
            probs.iter().zip(&cases).map(|(p, c)| (p.voxels(), &c.gtv)).collect();
        let curve = precision_recall_auc(&scans, &threshold_grid(cfg.steps))?;
        let mut table = String::from("threshold,precision,recall,tp,fp,fn\n");
        for p in &curve.points {
            table.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.threshold, p.precision, p.recall, p.tp, p.fp, p.fn_
            ));
        }
        write_text(&common.out.join(format!("pr_split{label}.csv")), &table)?;
        println!("split {label}: AUC {:.4}", curve.auc);
        aucs.insert(label, curve.auc.into());
        record = record.input(ckpt);
    }
    write_text(&common.out.join("pr_auc.json"), &serde_json::to_string_pretty(&aucs)?)?;
    record.write(&common.out)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::Format(_) | Error::Truncated { .. } | Error::Label { .. } | Error::Json(_) | Error::Csv(_) => 4,
        Error::Parameter(_) | Error::Spec(_) | Error::Config(_) => 5,
        Error::Shape(_) | Error::Sampling(_) | Error::Degenerate(_) => 6,
        Error::Compatibility(_) => 7,
        Error::Schema(_) => 8,
        Error::Diverged { .. } => 9,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(c) => generate(c),
        Command::Train { common, data } => train_cmd(common, data),
        Command::Infer {
            common,
            checkpoint,
            input,
        } => infer_cmd(common, checkpoint, input),
        Command::Evaluate {
            common,
            model,
            data,
            partition,
            overlay,
        } => evaluate_cmd(common, model, data, *partition, *overlay),
        Command::Report { common, metrics, run } => report_cmd(common, metrics, run.as_deref()),
        Command::PrCurve {
            common,
            model,
            data,
            partition,
        } => pr_curve_cmd(common, model, data, *partition),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("esoseg: {} error: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
