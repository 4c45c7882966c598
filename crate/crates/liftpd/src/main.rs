//! Command-line entry point: ingestion, training, evaluation, streaming,
//! and synthetic-data generation as reproducible runs.
//!
//! One JSON config document drives every subcommand; `--seed`, `--out`, and
//! `--data-root` flags override it (the `LIFTPD_DATA_ROOT` environment
//! variable also overrides the config's data root). Each run writes a
//! `*_run.json` manifest carrying the config digest, seed, and effective
//! config; metrics, ROC, and checkpoint outputs are byte-identical across
//! re-runs, wall-time fields aside.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use liftpd::config::RunConfig;
use liftpd::error::Result;
use liftpd::eval::write_roc_csv;
use liftpd::gate::{invocation_reduction, run_stream, Decision, Mode};
use liftpd::ingest::{
    apply_standardizer, fit_standardizer, parse_recording, split_labeled_segments,
    write_recording, Annotation, Recording,
};
use liftpd::model::{load_checkpoint, save_checkpoint};
use liftpd::pipeline::{
    labeled_windows, load_corpus, loso_run, metrics_json, pretrain_windows, select_site_all,
    sweep_labels, MetricsDoc,
};
use liftpd::synth::generate_corpus;
use liftpd::training::{finetune, pretrain, supervised_baseline, TrainLog};
use liftpd::windowing::dump_windows;

/// Published reference points for the side-by-side evaluation table.
const REFERENCE_AUC_SUPERVISED: f64 = 0.9078;
const REFERENCE_AUC_SSL: f64 = 0.908;

#[derive(Parser)]
#[command(
    name = "liftpd",
    version,
    about = "Label-efficient freezing-of-gait detection from a single triaxial accelerometer"
)]
struct Cli {
    /// JSON config file; flags below override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Training seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Dataset root override (directory of S<ss>R<rr>.txt files).
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and summarize the recordings under the data root.
    Ingest {
        /// Also write per-file z-scored copies here, same text format.
        #[arg(long)]
        normalize_out: Option<PathBuf>,
    },
    /// Emit the synthetic benchmark corpus into the output directory.
    Synth,
    /// Masked-reconstruction pretraining over the whole data root.
    Pretrain,
    /// Frozen-encoder fine-tuning from a pretrained checkpoint.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Supervised baseline trained from scratch on labeled windows.
    Baseline,
    /// Leave-one-subject-out evaluation; writes per-fold and aggregate
    /// metrics.json + roc.csv.
    Eval {
        /// Skip the supervised comparison model.
        #[arg(long)]
        no_baseline: bool,
        /// Dump each fold's train/test window arrays next to its metrics.
        #[arg(long)]
        dump_windows: bool,
    },
    /// Label-efficiency sweep: SSL fine-tune vs supervised baseline at each
    /// label fraction.
    SweepLabels {
        /// Comma-separated fractions, e.g. 1.0,0.8,0.6,0.4.
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
    },
    /// Activity-gated streaming inference over one recording.
    Stream {
        #[arg(long)]
        recording: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let cfg = match effective_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("config error: {e}");
            std::process::exit(2);
        }
    };
    if let Err(e) = execute(cli, cfg) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_json(&fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Ok(root) = std::env::var("LIFTPD_DATA_ROOT") {
        cfg.data_root = root;
    }
    if let Some(root) = &cli.data_root {
        cfg.data_root = root.display().to_string();
    }
    if let Some(seed) = cli.seed {
        cfg.training.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_digest: String,
    seed: u64,
    /// Wall time; excluded from byte-stability guarantees.
    wall_ms: u64,
    config: &'a RunConfig,
}

fn write_manifest(out_dir: &Path, command: &str, cfg: &RunConfig, started: Instant) -> Result<()> {
    let manifest = RunManifest {
        command,
        config_digest: cfg.digest(),
        seed: cfg.training.seed,
        wall_ms: started.elapsed().as_millis() as u64,
        config: cfg,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(out_dir.join(format!("{command}_run.json")), json)?;
    Ok(())
}

fn write_train_log(path: &Path, log: &TrainLog) -> Result<()> {
    let mut buf = Vec::new();
    log.write_csv(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

fn corpus_single_site(cfg: &RunConfig) -> Result<Vec<Recording>> {
    let recs = load_corpus(Path::new(&cfg.data_root))?;
    select_site_all(&recs, cfg.site)
}

fn standardize_all(recs: &[Recording]) -> Result<Vec<Recording>> {
    let stats = fit_standardizer(recs)?;
    Ok(recs.iter().map(|r| apply_standardizer(r, &stats)).collect())
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "undefined".into(),
    }
}

fn execute(cli: Cli, cfg: RunConfig) -> Result<()> {
    let started = Instant::now();
    let out_dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out_dir)?;

    match cli.command {
        Command::Ingest { normalize_out } => cmd_ingest(&cfg, normalize_out.as_deref()),
        Command::Synth => cmd_synth(&cfg, &out_dir, started),
        Command::Pretrain => cmd_pretrain(&cfg, &out_dir, started),
        Command::Finetune { checkpoint } => cmd_finetune(&cfg, &checkpoint, &out_dir, started),
        Command::Baseline => cmd_baseline(&cfg, &out_dir, started),
        Command::Eval {
            no_baseline,
            dump_windows,
        } => cmd_eval(&cfg, &out_dir, !no_baseline, dump_windows, started),
        Command::SweepLabels { fractions } => {
            let mut cfg = cfg;
            if let Some(f) = fractions {
                cfg.label_fractions = f;
            }
            cmd_sweep(&cfg, &out_dir, started)
        }
        Command::Stream {
            recording,
            checkpoint,
        } => cmd_stream(&cfg, &recording, &checkpoint, &out_dir, started),
    }
}

fn cmd_ingest(cfg: &RunConfig, normalize_out: Option<&Path>) -> Result<()> {
    let recs = load_corpus(Path::new(&cfg.data_root))?;
    println!("recordings: {}", recs.len());
    println!("subject  trial  samples  rate_hz  out_of_exp  no_freeze  freeze  segments");
    for rec in &recs {
        let count = |a: Annotation| rec.samples.iter().filter(|s| s.annotation == a).count();
        println!(
            "{:<8} {:<6} {:>7}  {:>7.2}  {:>10}  {:>9}  {:>6}  {:>8}",
            rec.subject_id,
            rec.trial_id,
            rec.len(),
            rec.sample_rate_hz,
            count(Annotation::OutOfExperiment),
            count(Annotation::NoFreeze),
            count(Annotation::Freeze),
            split_labeled_segments(rec).len(),
        );
    }
    if let Some(dir) = normalize_out {
        fs::create_dir_all(dir)?;
        for rec in &recs {
            let stats = fit_standardizer(std::slice::from_ref(rec))?;
            let z = apply_standardizer(rec, &stats);
            let mut buf = Vec::new();
            write_recording(&z, &mut buf)?;
            fs::write(dir.join(format!("{}{}.txt", rec.subject_id, rec.trial_id)), buf)?;
        }
        println!("normalized copies written to {}", dir.display());
    }
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, out_dir: &Path, started: Instant) -> Result<()> {
    let recs = generate_corpus(&cfg.synth);
    for rec in &recs {
        let mut buf = Vec::new();
        write_recording(rec, &mut buf)?;
        let name = format!("{}{}.txt", rec.subject_id, rec.trial_id);
        fs::write(out_dir.join(&name), buf)?;
        println!("wrote {} ({} samples)", name, rec.len());
    }
    write_manifest(out_dir, "synth", cfg, started)?;
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, out_dir: &Path, started: Instant) -> Result<()> {
    let recs = standardize_all(&corpus_single_site(cfg)?)?;
    let ws = pretrain_windows(&recs, &cfg.windowing, &cfg.digest())?;
    println!("pretraining on {} windows", ws.len());
    let (model, mut log) = pretrain(
        &ws,
        &cfg.encoder_config(),
        &cfg.mask,
        &cfg.train_opts(cfg.training.pretrain_epochs, cfg.training.seed),
    )?;
    log.config_digest = cfg.digest();
    save_checkpoint(&model, &out_dir.join("pretrain.ckpt"))?;
    write_train_log(&out_dir.join("pretrain_log.csv"), &log)?;
    write_manifest(out_dir, "pretrain", cfg, started)?;
    if let Some(last) = log.epochs.last() {
        println!("final reconstruction loss: {:.6}", last.loss);
    }
    println!("checkpoint: {}", out_dir.join("pretrain.ckpt").display());
    Ok(())
}

fn cmd_finetune(cfg: &RunConfig, checkpoint: &Path, out_dir: &Path, started: Instant) -> Result<()> {
    let recs = standardize_all(&corpus_single_site(cfg)?)?;
    let ws = labeled_windows(&recs, &cfg.windowing, &cfg.digest())?;
    let (n0, n1) = ws.class_counts();
    println!("fine-tuning on {} windows ({n0} no-freeze / {n1} freeze)", ws.len());
    let encoder = load_checkpoint(checkpoint)?;
    let (model, mut log) = finetune(
        &encoder,
        &ws,
        &cfg.train_opts(cfg.training.finetune_epochs, cfg.training.seed),
    )?;
    log.config_digest = cfg.digest();
    save_checkpoint(&model, &out_dir.join("model.ckpt"))?;
    write_train_log(&out_dir.join("finetune_log.csv"), &log)?;
    write_manifest(out_dir, "finetune", cfg, started)?;
    println!("checkpoint: {}", out_dir.join("model.ckpt").display());
    Ok(())
}

fn cmd_baseline(cfg: &RunConfig, out_dir: &Path, started: Instant) -> Result<()> {
    let recs = standardize_all(&corpus_single_site(cfg)?)?;
    let ws = labeled_windows(&recs, &cfg.windowing, &cfg.digest())?;
    let (model, mut log) = supervised_baseline(
        &ws,
        &cfg.encoder_config(),
        &cfg.train_opts(cfg.training.baseline_epochs, cfg.training.seed),
    )?;
    log.config_digest = cfg.digest();
    save_checkpoint(&model, &out_dir.join("baseline.ckpt"))?;
    write_train_log(&out_dir.join("baseline_log.csv"), &log)?;
    write_manifest(out_dir, "baseline", cfg, started)?;
    println!("checkpoint: {}", out_dir.join("baseline.ckpt").display());
    Ok(())
}

#[derive(Serialize)]
struct FoldDoc<'a> {
    config_digest: &'a str,
    seed: u64,
    ssl: &'a liftpd::eval::FoldMetrics,
    baseline: Option<&'a liftpd::eval::FoldMetrics>,
}

fn cmd_eval(
    cfg: &RunConfig,
    out_dir: &Path,
    with_baseline: bool,
    dump: bool,
    started: Instant,
) -> Result<()> {
    let recs = corpus_single_site(cfg)?;
    let outcome = loso_run(&recs, cfg, with_baseline)?;
    let digest = cfg.digest();
    let seed = cfg.training.seed;

    for fold in &outcome.folds {
        let fold_dir = out_dir.join(format!("fold_{}", fold.subject));
        fs::create_dir_all(&fold_dir)?;
        if let Some(curve) = &fold.ssl.curve {
            let mut buf = Vec::new();
            write_roc_csv(curve, &mut buf)?;
            fs::write(fold_dir.join("roc.csv"), buf)?;
        }
        let doc = FoldDoc {
            config_digest: &digest,
            seed,
            ssl: &fold.ssl.fold,
            baseline: fold.baseline.as_ref().map(|b| &b.fold),
        };
        let mut json = serde_json::to_string_pretty(&doc)?;
        json.push('\n');
        fs::write(fold_dir.join("metrics.json"), json)?;
        write_train_log(&fold_dir.join("pretrain_log.csv"), &fold.pretrain_log)?;
        write_train_log(&fold_dir.join("finetune_log.csv"), &fold.finetune_log)?;
    }

    if dump {
        // per-fold train/test window dumps reuse the fold protocol inputs
        let folds = liftpd::eval::loso_folds(&recs)?;
        for fold in &folds {
            let fold_dir = out_dir.join(format!("fold_{}", fold.test_subject));
            let train: Vec<Recording> = fold.train.iter().map(|&j| recs[j].clone()).collect();
            let test: Vec<Recording> = fold.test.iter().map(|&j| recs[j].clone()).collect();
            let stats = fit_standardizer(&train)?;
            let std_train: Vec<Recording> =
                train.iter().map(|r| apply_standardizer(r, &stats)).collect();
            let std_test: Vec<Recording> =
                test.iter().map(|r| apply_standardizer(r, &stats)).collect();
            let train_ws = labeled_windows(&std_train, &cfg.windowing, &digest)?;
            let test_ws = labeled_windows(&std_test, &cfg.windowing, &digest)?;
            dump_windows(
                &train_ws,
                &fold_dir.join("train_windows.bin"),
                &fold_dir.join("train_windows.json"),
            )?;
            dump_windows(
                &test_ws,
                &fold_dir.join("test_windows.bin"),
                &fold_dir.join("test_windows.json"),
            )?;
        }
    }

    let ssl_doc = metrics_json(&MetricsDoc {
        config_digest: &digest,
        seed,
        model: "ssl",
        folds: &outcome.ssl_report.folds,
        aggregate: &outcome.ssl_report.aggregate,
    });
    fs::write(out_dir.join("metrics.json"), ssl_doc)?;
    if let Some(report) = &outcome.baseline_report {
        let doc = metrics_json(&MetricsDoc {
            config_digest: &digest,
            seed,
            model: "supervised",
            folds: &report.folds,
            aggregate: &report.aggregate,
        });
        fs::write(out_dir.join("baseline_metrics.json"), doc)?;
    }
    if let Some(curve) = &outcome.pooled_curve {
        let mut buf = Vec::new();
        write_roc_csv(curve, &mut buf)?;
        fs::write(out_dir.join("roc.csv"), buf)?;
    }
    write_manifest(out_dir, "eval", cfg, started)?;

    println!("\nper-fold (SSL):");
    println!("subject  windows  auc      sensitivity  specificity  precision  accuracy  f1");
    for f in &outcome.ssl_report.folds {
        println!(
            "{:<8} {:>7}  {:<7}  {:<11}  {:<11}  {:<9}  {:<8}  {}",
            f.subject,
            f.n_test_windows,
            fmt_opt(f.auc),
            fmt_opt(f.metrics.sensitivity),
            fmt_opt(f.metrics.specificity),
            fmt_opt(f.metrics.precision),
            fmt_opt(f.metrics.accuracy),
            fmt_opt(f.metrics.f1),
        );
    }
    let ssl_auc = outcome.ssl_report.aggregate.get("auc");
    println!("\nside-by-side vs published reference:");
    println!("model       mean auc   reference  gap");
    if let Some(stat) = ssl_auc {
        let gap = stat.mean - REFERENCE_AUC_SSL;
        println!(
            "ssl         {:.4}     {REFERENCE_AUC_SSL:.4}     {gap:+.4}{}",
            stat.mean,
            if gap < 0.0 { "  (below reference)" } else { "" }
        );
    }
    if let Some(report) = &outcome.baseline_report {
        if let Some(stat) = report.aggregate.get("auc") {
            let gap = stat.mean - REFERENCE_AUC_SUPERVISED;
            println!(
                "supervised  {:.4}     {REFERENCE_AUC_SUPERVISED:.4}     {gap:+.4}{}",
                stat.mean,
                if gap < 0.0 { "  (below reference)" } else { "" }
            );
        }
    }
    println!("\noutputs in {}", out_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct SweepDoc<'a> {
    config_digest: &'a str,
    seed: u64,
    test_subject: &'a str,
    points: Vec<SweepPointDoc<'a>>,
}

#[derive(Serialize)]
struct SweepPointDoc<'a> {
    fraction: f64,
    kept_no_freeze: usize,
    kept_freeze: usize,
    ssl: &'a liftpd::eval::FoldMetrics,
    baseline: &'a liftpd::eval::FoldMetrics,
}

fn cmd_sweep(cfg: &RunConfig, out_dir: &Path, started: Instant) -> Result<()> {
    let recs = corpus_single_site(cfg)?;
    let outcome = sweep_labels(&recs, cfg)?;
    let digest = cfg.digest();

    let sweep_dir = out_dir.join("sweep");
    fs::create_dir_all(&sweep_dir)?;
    let doc = SweepDoc {
        config_digest: &digest,
        seed: cfg.training.seed,
        test_subject: &outcome.test_subject,
        points: outcome
            .points
            .iter()
            .map(|p| SweepPointDoc {
                fraction: p.fraction,
                kept_no_freeze: p.kept_class_counts.0,
                kept_freeze: p.kept_class_counts.1,
                ssl: &p.ssl,
                baseline: &p.baseline,
            })
            .collect(),
    };
    let mut json = serde_json::to_string_pretty(&doc)?;
    json.push('\n');
    fs::write(sweep_dir.join("summary.json"), json)?;
    write_manifest(out_dir, "sweep-labels", cfg, started)?;

    println!("label-efficiency sweep, test subject {}", outcome.test_subject);
    println!("fraction  kept(0/1)   ssl auc   ssl acc   ssl prec   sup auc   sup acc   sup prec");
    for p in &outcome.points {
        println!(
            "{:<8}  {:>4}/{:<4}   {:<7}  {:<7}  {:<8}  {:<7}  {:<7}  {}",
            p.fraction,
            p.kept_class_counts.0,
            p.kept_class_counts.1,
            fmt_opt(p.ssl.auc),
            fmt_opt(p.ssl.metrics.accuracy),
            fmt_opt(p.ssl.metrics.precision),
            fmt_opt(p.baseline.auc),
            fmt_opt(p.baseline.metrics.accuracy),
            fmt_opt(p.baseline.metrics.precision),
        );
    }
    println!(
        "\nreference deltas from the published comparison (+7.25% precision, +4.4% accuracy)\n\
         are reported for context, not asserted."
    );
    Ok(())
}

#[derive(Serialize)]
struct StreamSummary<'a> {
    config_digest: &'a str,
    seed: u64,
    stats: liftpd::gate::InferenceStats,
    invocation_reduction: f64,
    /// Wall time; excluded from byte-stability guarantees.
    wall_ms: u64,
    mean_ms_per_invocation: Option<f64>,
}

fn cmd_stream(
    cfg: &RunConfig,
    recording: &Path,
    checkpoint: &Path,
    out_dir: &Path,
    started: Instant,
) -> Result<()> {
    let name = recording
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("unknown");
    let raw = parse_recording(fs::File::open(recording)?, name)?;
    let rec = if raw.channels() == 9 {
        liftpd::ingest::select_sensor(&raw, cfg.site)?
    } else {
        raw
    };
    let stats = fit_standardizer(std::slice::from_ref(&rec))?;
    let rec = apply_standardizer(&rec, &stats);
    let model = load_checkpoint(checkpoint)?;

    let stream_started = Instant::now();
    let (events, istats) = run_stream(
        &rec,
        &model,
        &cfg.gate,
        cfg.windowing.window_len,
        cfg.stream_stride,
    )?;
    let stream_ms = stream_started.elapsed().as_millis() as u64;

    let mut lines = String::new();
    for e in &events {
        let mode = match e.mode {
            Mode::Idle => "idle",
            Mode::Active => "active",
        };
        match e.decision {
            Decision::Score(s) => lines.push_str(&format!("{},{mode},{s}\n", e.start_index)),
            Decision::Skipped => lines.push_str(&format!("{},{mode},SKIP\n", e.start_index)),
        }
    }
    fs::write(out_dir.join("stream.txt"), lines)?;

    let reduction = invocation_reduction(&istats)?;
    let summary = StreamSummary {
        config_digest: &cfg.digest(),
        seed: cfg.training.seed,
        stats: istats,
        invocation_reduction: reduction,
        wall_ms: stream_ms,
        mean_ms_per_invocation: if istats.invoked > 0 {
            Some(stream_ms as f64 / istats.invoked as f64)
        } else {
            None
        },
    };
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    fs::write(out_dir.join("stream_summary.json"), json)?;
    write_manifest(out_dir, "stream", cfg, started)?;

    println!(
        "windows {} | invoked {} | skipped {} | reduction {:.3}",
        istats.total_windows, istats.invoked, istats.skipped, reduction
    );
    println!("events: {}", out_dir.join("stream.txt").display());
    Ok(())
}
