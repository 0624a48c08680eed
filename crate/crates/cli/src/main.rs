//! `hiccap`: dataset validation, statistics, synthetic data, pretraining,
//! fine-tuning, evaluation, masking probes, ordering sweeps and prediction.

mod config;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use hiccap::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use hiccap::data_model::{Modality, ModalityOrdering, ModalitySet};
use hiccap::ingest::{
    annotation_agreement, dataset_stats, load_annotations, load_dataset, majority_vote, scan_dataset,
    split_partitions, Dataset, PartitionSpec, Partitions,
};
use hiccap::model::{HiccapModel, Task};
use hiccap::pretrain::{run_pretraining, Objective};
use hiccap::synth::{generate, generate_aligned_corpus, SynthSpec};
use hiccap::train_eval::{evaluate_with, finetune, mask_probe, predict_with, ClipSet, MetricsReport};

use config::{Overrides, RunConfig};

/// An error in the user's input; exits with status 2.
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

#[derive(Parser)]
#[command(name = "hiccap", version, about = "Hierarchical cross-attention fusion for comic-mischief detection")]
struct Cli {
    /// Omit timestamps from logs and reports.
    #[arg(long, global = true)]
    no_timestamps: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct RunArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Run configuration (TOML or JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    task: Option<Task>,
    #[arg(long)]
    seed: Option<u64>,
    /// Context ordering, e.g. `t:av,a:vt,v:ta`.
    #[arg(long, value_parser = parse_ordering)]
    ordering: Option<ModalityOrdering>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            task: self.task,
            seed: self.seed,
            ordering: self.ordering,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Partition {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args, Clone, Debug)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Defaults to the checkpoint's task.
    #[arg(long, value_parser = parse_task)]
    task: Option<Task>,
    /// Clips to use. Defaults to the test split recorded in the checkpoint,
    /// or every clip when none is recorded.
    #[arg(long, value_enum)]
    partition: Option<Partition>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SynthKind {
    /// Planted signals, one modality pattern per category.
    Planted,
    /// Every category planted in all three modalities.
    Redundant,
    /// Unlabeled corpus with a shared latent per clip.
    Aligned,
}

#[derive(Subcommand)]
enum Command {
    /// Load a manifest and report invariant violations.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Sequence-length and label statistics.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "planted")]
        kind: SynthKind,
        /// Generator spec (TOML or JSON); overrides `--kind`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_clips: Option<usize>,
    },
    /// Inter-annotator agreement and majority-vote labels.
    Agreement {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Self-supervised pretraining on the training split.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = parse_objective)]
        objective: Option<Objective>,
    },
    /// Fine-tune a classifier, optionally from a pretrained checkpoint.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        ck: CheckpointArgs,
    },
    /// Evaluate with modalities replaced by zeros.
    MaskProbe {
        #[command(flatten)]
        ck: CheckpointArgs,
        /// Modalities to mask, e.g. `av`.
        #[arg(long, value_parser = parse_mask)]
        mask: ModalitySet,
    },
    /// Train and evaluate all eight context orderings.
    SweepOrdering {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Per-clip class probabilities.
    Predict {
        #[command(flatten)]
        ck: CheckpointArgs,
    },
}

fn parse_task(s: &str) -> Result<Task, String> {
    Task::parse(s).map_err(|e| e.to_string())
}

fn parse_ordering(s: &str) -> Result<ModalityOrdering, String> {
    ModalityOrdering::parse(s).map_err(|e| e.to_string())
}

fn parse_mask(s: &str) -> Result<ModalitySet, String> {
    ModalitySet::parse(s).map_err(|e| e.to_string())
}

fn parse_objective(s: &str) -> Result<Objective, String> {
    Objective::parse(s).map_err(|e| e.to_string())
}

/// Writes reports into an optional output directory.
struct Output {
    dir: Option<PathBuf>,
    timestamps: bool,
}

impl Output {
    fn new(dir: Option<&Path>, timestamps: bool) -> Result<Self> {
        if let Some(d) = dir {
            std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
        }
        Ok(Self {
            dir: dir.map(Path::to_path_buf),
            timestamps,
        })
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }

    fn envelope(&self, command: &str, body: impl Serialize) -> Result<Value> {
        let mut v = json!({ "command": command, "report": serde_json::to_value(body)? });
        if self.timestamps {
            let secs = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            v["generated_unix"] = json!(secs);
        }
        Ok(v)
    }

    fn json(&self, name: &str, command: &str, body: impl Serialize) -> Result<()> {
        if let Some(p) = self.path(name) {
            let v = self.envelope(command, body)?;
            std::fs::write(&p, serde_json::to_string_pretty(&v)? + "\n").with_context(|| format!("writing {}", p.display()))?;
        }
        Ok(())
    }

    fn text(&self, name: &str, body: &str) -> Result<()> {
        if let Some(p) = self.path(name) {
            std::fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
        }
        Ok(())
    }

    /// Echo the effective configuration.
    fn config(&self, command: &str, cfg: &RunConfig) -> Result<()> {
        if let Some(p) = self.path("config.json") {
            let v = json!({ "command": command, "config": cfg });
            std::fs::write(&p, serde_json::to_string_pretty(&v)? + "\n").with_context(|| format!("writing {}", p.display()))?;
        }
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut logger = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    if cli.no_timestamps {
        logger.format_timestamp(None);
    }
    logger.init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<InputError>().is_some() {
            return 2;
        }
        if let Some(h) = cause.downcast_ref::<hiccap::Error>() {
            return if h.is_input_error() { 2 } else { 1 };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    let ts = !cli.no_timestamps;
    match cli.command {
        Command::Validate { manifest } => cmd_validate(&manifest),
        Command::Stats { manifest, out } => cmd_stats(&manifest, &Output::new(out.as_deref(), ts)?),
        Command::Synth {
            out,
            kind,
            config,
            seed,
            n_clips,
        } => cmd_synth(&out, kind, config.as_deref(), seed, n_clips),
        Command::Agreement { annotations, out } => cmd_agreement(&annotations, &Output::new(out.as_deref(), ts)?),
        Command::Pretrain { run, objective } => cmd_pretrain(&run, objective, ts),
        Command::Finetune { run, checkpoint } => cmd_finetune(&run, checkpoint.as_deref(), ts),
        Command::Eval { ck } => cmd_eval(&ck, None, ts),
        Command::MaskProbe { ck, mask } => cmd_eval(&ck, Some(mask), ts),
        Command::SweepOrdering { run } => cmd_sweep(&run, ts),
        Command::Predict { ck } => cmd_predict(&ck, ts),
    }
}

// ---- data commands ----

fn cmd_validate(manifest: &Path) -> Result<()> {
    let (dims, report) = scan_dataset(manifest)?;
    if report.clips.is_empty() && report.violations.is_empty() {
        log::warn!("manifest {} lists no clips", manifest.display());
    }
    for (clip, v) in &report.violations {
        for x in v {
            println!("{clip}: {x}");
        }
    }
    println!(
        "{} clips, {} with violations (dims text {} / audio {} / video {})",
        report.clips.len() + report.violations.len(),
        report.violations.len(),
        dims.text,
        dims.audio,
        dims.video
    );
    if !report.violations.is_empty() {
        bail!(InputError(format!("{} clips violate dataset invariants", report.violations.len())));
    }
    Ok(())
}

fn cmd_stats(manifest: &Path, out: &Output) -> Result<()> {
    let ds = load_dataset(manifest)?;
    let table = dataset_stats(&ds.clips)?;
    print!("{table}");
    out.text("stats.csv", &table.to_csv())?;
    out.json("stats.json", "stats", &table)
}

fn read_spec(path: &Path) -> Result<SynthSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spec = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| InputError(format!("{}: {e}", path.display())))?
    } else {
        serde_json::from_str(&text).map_err(|e| InputError(format!("{}: {e}", path.display())))?
    };
    Ok(spec)
}

fn cmd_synth(out: &Path, kind: SynthKind, config: Option<&Path>, seed: Option<u64>, n_clips: Option<usize>) -> Result<()> {
    let mut spec = match (config, kind) {
        (Some(p), _) => read_spec(p)?,
        (None, SynthKind::Planted) => SynthSpec::default(),
        (None, SynthKind::Redundant) => SynthSpec::redundant(),
        (None, SynthKind::Aligned) => SynthSpec::aligned(SynthSpec::default().n_clips, 0),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(n) = n_clips {
        spec.n_clips = n;
    }
    let manifest = if spec.alignment.is_some() && !spec.labeled {
        generate_aligned_corpus(&spec, out)?
    } else {
        generate(&spec, out)?
    };
    println!("wrote {} clips to {}", spec.n_clips, manifest.display());
    Ok(())
}

fn cmd_agreement(path: &Path, out: &Output) -> Result<()> {
    let sets = load_annotations(path)?;
    let report = annotation_agreement(&sets)?;
    println!("{} clips", report.clips);
    for (name, s) in &report.per_annotator {
        println!("  {name:<16} kappa {:.4}  p_o {:.4}  p_e {:.4}", s.kappa, s.p_o, s.p_e);
    }
    println!("  mean kappa {:.4}", report.mean_kappa);
    let majority = sets
        .iter()
        .map(|s| Ok((s.clip_id.clone(), majority_vote(s)?)))
        .collect::<hiccap::Result<std::collections::BTreeMap<_, _>>>()?;
    out.json("agreement.json", "agreement", json!({ "agreement": report, "majority": majority }))
}

// ---- training commands ----

struct Prepared {
    cfg: RunConfig,
    data: Dataset,
    set: ClipSet,
    parts: Partitions,
}

fn prepare(run: &RunArgs) -> Result<Prepared> {
    let cfg = RunConfig::load(run.config.as_deref(), &run.overrides())?;
    let data = load_dataset(&run.manifest)?;
    let parts = split_partitions(&data.clips, &cfg.split)?;
    log::info!(
        "{} clips: {} train / {} val / {} test",
        data.clips.len(),
        parts.train.len(),
        parts.val.len(),
        parts.test.len()
    );
    let set = ClipSet::from_records(&data.clips);
    Ok(Prepared { cfg, data, set, parts })
}

fn split_meta(spec: &PartitionSpec, val: Option<&MetricsReport>, test: Option<&MetricsReport>) -> Value {
    json!({ "split": spec, "validation": val, "test": test })
}

fn cmd_pretrain(run: &RunArgs, objective: Option<Objective>, ts: bool) -> Result<()> {
    let mut p = prepare(run)?;
    if let Some(o) = objective {
        p.cfg.pretraining.objective = o;
    }
    let out = Output::new(run.out.as_deref(), ts)?;
    out.config("pretrain", &p.cfg)?;
    let model = HiccapModel::new(p.cfg.model_for(p.data.dims), p.cfg.seed)?;
    let train = p.set.subset(&p.parts.train).clips;
    let val = p.set.subset(&p.parts.val).clips;
    let r = run_pretraining(model, &train, &val, &p.cfg.pretraining)?;
    println!(
        "pretraining: initial val loss {:.5}, best {:.5} (epoch {})",
        r.initial_val_loss,
        r.best_val_loss,
        r.best_epoch.map_or("none".to_string(), |e| e.to_string())
    );
    let summary = json!({
        "objective": p.cfg.pretraining.objective,
        "initial_val_loss": r.initial_val_loss,
        "best_val_loss": r.best_val_loss,
        "best_epoch": r.best_epoch,
        "history": r.history,
    });
    out.json("report.json", "pretrain", &summary)?;
    if let Some(path) = out.path("pretrained.hckp") {
        let mut meta = CheckpointMeta::new(&r.model, r.best_epoch.map_or(0, |e| e + 1), None);
        meta.metrics = split_meta(&p.cfg.split, None, None);
        save_checkpoint(&path, &r.model, Some(&r.optimizer), &meta)?;
        println!("saved {}", path.display());
    }
    Ok(())
}

fn load_for_dataset(path: &Path, data: &Dataset) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.model.config.dims != data.dims {
        bail!(InputError(format!(
            "checkpoint expects dims {:?} but the dataset has {:?}",
            ck.model.config.dims, data.dims
        )));
    }
    Ok(ck)
}

fn cmd_finetune(run: &RunArgs, checkpoint: Option<&Path>, ts: bool) -> Result<()> {
    let p = prepare(run)?;
    let out = Output::new(run.out.as_deref(), ts)?;
    out.config("finetune", &p.cfg)?;
    let model = match checkpoint {
        Some(path) => {
            let ck = load_for_dataset(path, &p.data)?;
            if ck.model.config != p.cfg.model_for(p.data.dims) {
                log::warn!("using the model configuration stored in {}", path.display());
            }
            ck.model
        }
        None => HiccapModel::new(p.cfg.model_for(p.data.dims), p.cfg.seed)?,
    };
    let task = p.cfg.task;
    let train = p.set.subset(&p.parts.train);
    let val = p.set.subset(&p.parts.val);
    let r = finetune(model, &train, &val, task, &p.cfg.training)?;
    let threads = p.cfg.training.eval_threads;
    let val_report = evaluate_with(&r.model, &val, task, threads)?;
    let test_report = if p.parts.test.is_empty() {
        None
    } else {
        Some(evaluate_with(&r.model, &p.set.subset(&p.parts.test), task, threads)?)
    };
    println!("validation: {val_report}");
    if let Some(t) = &test_report {
        println!("test: {t}");
    }
    out.json(
        "report.json",
        "finetune",
        json!({
            "task": task,
            "best_epoch": r.best_epoch,
            "validation": val_report,
            "test": test_report,
            "history": r.history,
        }),
    )?;
    if let Some(t) = &test_report {
        out.text("report.txt", &t.to_string())?;
        out.text("report.csv", &t.to_csv())?;
    }
    if let Some(path) = out.path("model.hckp") {
        let mut meta = CheckpointMeta::new(&r.model, r.best_epoch.map_or(0, |e| e + 1), Some(task));
        meta.metrics = split_meta(&p.cfg.split, Some(&val_report), test_report.as_ref());
        save_checkpoint(&path, &r.model, Some(&r.optimizer), &meta)?;
        println!("saved {}", path.display());
    }
    Ok(())
}

/// Clips selected from a checkpoint-evaluation dataset.
fn select(ck: &Checkpoint, data: &Dataset, partition: Option<Partition>) -> Result<ClipSet> {
    let recorded: Option<PartitionSpec> = ck
        .meta
        .metrics
        .get("split")
        .and_then(|v| serde_json::from_value(v.clone()).ok());
    let partition = partition.unwrap_or(if recorded.is_some() { Partition::Test } else { Partition::All });
    let set = ClipSet::from_records(&data.clips);
    if partition == Partition::All {
        return Ok(set);
    }
    let spec = recorded.ok_or_else(|| InputError("checkpoint records no split; use --partition all".into()))?;
    let parts = split_partitions(&data.clips, &spec)?;
    let idx = match partition {
        Partition::Train => &parts.train,
        Partition::Val => &parts.val,
        Partition::Test => &parts.test,
        Partition::All => unreachable!(),
    };
    Ok(set.subset(idx))
}

fn eval_threads() -> usize {
    config::thread_cap().unwrap_or(1).max(1)
}

fn checkpoint_task(ck: &Checkpoint, flag: Option<Task>) -> Result<Task> {
    flag.or(ck.meta.task)
        .ok_or_else(|| InputError("checkpoint has no task; pass --task".into()).into())
}

fn cmd_eval(args: &CheckpointArgs, mask: Option<ModalitySet>, ts: bool) -> Result<()> {
    let data = load_dataset(&args.manifest)?;
    let ck = load_for_dataset(&args.checkpoint, &data)?;
    let task = checkpoint_task(&ck, args.task)?;
    let set = select(&ck, &data, args.partition)?;
    let out = Output::new(args.out.as_deref(), ts)?;
    let report = match mask {
        None => evaluate_with(&ck.model, &set, task, eval_threads())?,
        Some(m) => mask_probe(&ck.model, &set, task, m)?,
    };
    print!("{report}");
    let name = if mask.is_some() { "mask-probe" } else { "eval" };
    out.json("report.json", name, &report)?;
    out.text("report.txt", &report.to_string())?;
    out.text("report.csv", &report.to_csv())
}

fn cmd_predict(args: &CheckpointArgs, ts: bool) -> Result<()> {
    let data = load_dataset(&args.manifest)?;
    let ck = load_for_dataset(&args.checkpoint, &data)?;
    let task = checkpoint_task(&ck, args.task)?;
    let set = select(&ck, &data, Some(args.partition.unwrap_or(Partition::All)))?;
    let preds = predict_with(&ck.model, &set, task, eval_threads())?;
    let out = Output::new(args.out.as_deref(), ts)?;
    if out.dir.is_some() {
        out.json("predictions.json", "predict", &preds)?;
        println!("{} predictions", preds.ids.len());
    } else {
        let v = out.envelope("predict", &preds)?;
        let mut stdout = std::io::stdout().lock();
        writeln!(stdout, "{}", serde_json::to_string_pretty(&v)?)?;
    }
    Ok(())
}

// ---- ordering sweep ----

/// All eight orderings: each target's two contexts in either order.
fn all_orderings() -> Vec<ModalityOrdering> {
    use Modality::{Audio as A, Text as T, Video as V};
    (0..8u8)
        .map(|bits| {
            let pick = |bit: u8, x: Modality, y: Modality| if bits & bit == 0 { [x, y] } else { [y, x] };
            ModalityOrdering::new(pick(1, A, V), pick(2, T, V), pick(4, T, A)).expect("valid ordering")
        })
        .collect()
}

#[derive(Serialize)]
struct SweepRow {
    rank: usize,
    ordering: String,
    val_score: f64,
    val_macro_f1: Option<f64>,
    val_accuracy: f64,
    test_score: Option<f64>,
}

fn score_of(r: &MetricsReport) -> f64 {
    r.macro_f1.or_else(|| r.f1_of("binary")).unwrap_or(0.0)
}

fn cmd_sweep(run: &RunArgs, ts: bool) -> Result<()> {
    let p = prepare(run)?;
    let out = Output::new(run.out.as_deref(), ts)?;
    out.config("sweep-ordering", &p.cfg)?;
    let train = p.set.subset(&p.parts.train);
    let val = p.set.subset(&p.parts.val);
    let test = (!p.parts.test.is_empty()).then(|| p.set.subset(&p.parts.test));
    let task = p.cfg.task;
    let mut rows = Vec::new();
    for ordering in all_orderings() {
        let model_cfg = hiccap::model::ModelConfig {
            ordering,
            ..p.cfg.model_for(p.data.dims)
        };
        let model = HiccapModel::new(model_cfg, p.cfg.seed)?;
        let r = finetune(model, &train, &val, task, &p.cfg.training)?;
        let v = evaluate_with(&r.model, &val, task, p.cfg.training.eval_threads)?;
        let t = match &test {
            Some(t) => Some(score_of(&evaluate_with(&r.model, t, task, p.cfg.training.eval_threads)?)),
            None => None,
        };
        log::info!("ordering {ordering}: validation score {:.4}", score_of(&v));
        rows.push(SweepRow {
            rank: 0,
            ordering: ordering.to_string(),
            val_score: score_of(&v),
            val_macro_f1: v.macro_f1,
            val_accuracy: v.mean_accuracy,
            test_score: t,
        });
    }
    rows.sort_by(|a, b| b.val_score.total_cmp(&a.val_score).then_with(|| a.ordering.cmp(&b.ordering)));
    let mut csv = String::from("rank,ordering,val_score,val_accuracy,test_score\n");
    println!("{:<5} {:<14} {:>9} {:>9} {:>9}", "rank", "ordering", "val", "val acc", "test");
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
        let test = r.test_score.map_or(String::new(), |t| format!("{t:.4}"));
        println!("{:<5} {:<14} {:>9.4} {:>9.4} {:>9}", r.rank, r.ordering, r.val_score, r.val_accuracy, test);
        csv.push_str(&format!("{},{},{:.6},{:.6},{}\n", r.rank, r.ordering, r.val_score, r.val_accuracy, test));
    }
    out.text("sweep.csv", &csv)?;
    out.json("sweep.json", "sweep-ordering", &rows)
}
