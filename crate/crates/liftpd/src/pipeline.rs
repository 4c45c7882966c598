//! End-to-end orchestration: corpus loading, the leak-free per-fold
//! protocol (standardize → pretrain → differential-hop label windows →
//! fine-tune → evaluate), the leave-one-subject-out runner, and the
//! label-fraction sweep.
//!
//! Standardization statistics, pretraining windows, and hop computation all
//! come from the training side of each fold only; the held-out subject never
//! touches them.

use std::path::Path;

use serde::Serialize;

use crate::config::{RunConfig, WindowingConfig};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate_report, auc, classification_metrics, confusion_at, loso_folds, roc_curve,
    FoldMetrics, Report, RocCurve,
};
use crate::ingest::{
    apply_standardizer, fit_standardizer, parse_recording, select_sensor, split_labeled_segments,
    Annotation, Recording, SensorSite,
};
use crate::model::Model;
use crate::par;
use crate::training::{
    finetune, predict_scores, pretrain, subsample_labels, supervised_baseline, TrainLog,
};
use crate::windowing::{compute_dhwt_hops, dhwt_segment, segment_fixed, DhwtConfig, WindowSet};

/// Read every `*.txt` recording under `dir`, sorted by file name.
pub fn load_corpus(dir: &Path) -> Result<Vec<Recording>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Empty(format!("no .txt recordings in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("unknown");
            parse_recording(std::fs::File::open(p)?, name)
        })
        .collect()
}

/// Reduce 9-channel recordings to the configured site; 3-channel recordings
/// pass through.
pub fn select_site_all(recs: &[Recording], site: SensorSite) -> Result<Vec<Recording>> {
    recs.iter()
        .map(|r| match r.channels() {
            3 => Ok(r.clone()),
            _ => select_sensor(r, site),
        })
        .collect()
}

/// Unlabeled fixed-hop windows over all data, including out-of-experiment
/// regions. Recordings shorter than the window are skipped unless all are.
pub fn pretrain_windows(recs: &[Recording], w: &WindowingConfig, provenance: &str) -> Result<WindowSet> {
    let mut sets = Vec::new();
    for rec in recs {
        match segment_fixed(rec, w.window_len, w.pretrain_hop) {
            Ok(ws) => sets.push(ws),
            Err(Error::TooShort { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    if sets.is_empty() {
        return Err(Error::TooShort {
            len: recs.iter().map(Recording::len).max().unwrap_or(0),
            window_len: w.window_len,
        });
    }
    let mut ws = WindowSet::merge(sets)?;
    ws.provenance = provenance.to_string();
    Ok(ws)
}

fn class_durations(segments: &[Recording]) -> (usize, usize) {
    let mut freeze = 0usize;
    let mut other = 0usize;
    for seg in segments {
        for s in &seg.samples {
            match s.annotation {
                Annotation::Freeze => freeze += 1,
                Annotation::NoFreeze => other += 1,
                Annotation::OutOfExperiment => {}
            }
        }
    }
    (freeze, other)
}

/// Labeled differential-hop windows: split out-of-experiment runs away,
/// derive hops from the class durations, then segment. The freeze class is
/// the densely sampled one.
pub fn labeled_windows(recs: &[Recording], w: &WindowingConfig, provenance: &str) -> Result<WindowSet> {
    let mut segments = Vec::new();
    for rec in recs {
        segments.extend(split_labeled_segments(rec));
    }
    if segments.is_empty() {
        return Err(Error::Empty("no labeled segments after split".into()));
    }
    let (d_freeze, d_other) = class_durations(&segments);
    let (hop_minority, hop_majority) =
        compute_dhwt_hops(d_freeze, d_other, w.window_len, w.hop_minority)?;
    let cfg = DhwtConfig {
        window_len: w.window_len,
        hop_minority,
        hop_majority,
        label_fraction_tau: w.tau,
    };
    let mut ws = dhwt_segment(&segments, &cfg)?;
    ws.provenance = provenance.to_string();
    Ok(ws)
}

/// One model's evaluation on a fold's test windows.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub fold: FoldMetrics,
    pub curve: Option<RocCurve>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

pub fn evaluate_model(model: &Model, test_ws: &WindowSet, subject: &str) -> Result<EvalOutcome> {
    if !test_ws.is_labeled() {
        return Err(Error::SingleClass("test windows must be labeled".into()));
    }
    let scores = predict_scores(model, test_ws)?;
    let labels: Vec<u8> = test_ws.windows.iter().map(|w| w.label.unwrap()).collect();
    let (curve, auc_value) = match roc_curve(&scores, &labels) {
        Ok(c) => {
            let a = auc(&c);
            (Some(c), Some(a))
        }
        Err(Error::SingleClass(_)) => (None, None),
        Err(e) => return Err(e),
    };
    let counts = confusion_at(&scores, &labels, 0.5)?;
    Ok(EvalOutcome {
        fold: FoldMetrics {
            subject: subject.to_string(),
            n_test_windows: test_ws.len(),
            auc: auc_value,
            metrics: classification_metrics(&counts),
        },
        curve,
        scores,
        labels,
    })
}

pub struct FoldRun {
    pub subject: String,
    pub ssl: EvalOutcome,
    pub baseline: Option<EvalOutcome>,
    pub pretrain_log: TrainLog,
    pub finetune_log: TrainLog,
}

/// The full protocol for one fold. `fold_seed` separates fold randomness
/// deterministically.
pub fn run_fold(
    train: &[Recording],
    test: &[Recording],
    cfg: &RunConfig,
    fold_seed: u64,
    with_baseline: bool,
    subject: &str,
) -> Result<FoldRun> {
    let digest = cfg.digest();
    let stats = fit_standardizer(train)?;
    let std_train: Vec<Recording> = train.iter().map(|r| apply_standardizer(r, &stats)).collect();
    let std_test: Vec<Recording> = test.iter().map(|r| apply_standardizer(r, &stats)).collect();

    let enc_cfg = cfg.encoder_config();
    let pre_ws = pretrain_windows(&std_train, &cfg.windowing, &digest)?;
    let (encoder, pretrain_log) = pretrain(
        &pre_ws,
        &enc_cfg,
        &cfg.mask,
        &cfg.train_opts(cfg.training.pretrain_epochs, fold_seed),
    )?;

    let train_ws = labeled_windows(&std_train, &cfg.windowing, &digest)?;
    let (ssl_model, finetune_log) = finetune(
        &encoder,
        &train_ws,
        &cfg.train_opts(cfg.training.finetune_epochs, fold_seed),
    )?;

    let test_ws = labeled_windows(&std_test, &cfg.windowing, &digest)?;
    let ssl = evaluate_model(&ssl_model, &test_ws, subject)?;

    let baseline = if with_baseline {
        let (base_model, _) = supervised_baseline(
            &train_ws,
            &enc_cfg,
            &cfg.train_opts(cfg.training.baseline_epochs, fold_seed),
        )?;
        Some(evaluate_model(&base_model, &test_ws, subject)?)
    } else {
        None
    };

    Ok(FoldRun {
        subject: subject.to_string(),
        ssl,
        baseline,
        pretrain_log,
        finetune_log,
    })
}

pub struct LosoOutcome {
    pub folds: Vec<FoldRun>,
    pub ssl_report: Report,
    pub baseline_report: Option<Report>,
    /// ROC over the pooled test scores of all folds.
    pub pooled_curve: Option<RocCurve>,
    pub pooled_auc: Option<f64>,
}

/// Leave-one-subject-out over 3-channel recordings. Folds run in parallel
/// worker slots; outputs are deterministic in fold order.
pub fn loso_run(recs: &[Recording], cfg: &RunConfig, with_baseline: bool) -> Result<LosoOutcome> {
    let folds = loso_folds(recs)?;
    let runs: Vec<Result<FoldRun>> = par::map_indexed(folds.len(), |i| {
        let fold = &folds[i];
        let train: Vec<Recording> = fold.train.iter().map(|&j| recs[j].clone()).collect();
        let test: Vec<Recording> = fold.test.iter().map(|&j| recs[j].clone()).collect();
        run_fold(
            &train,
            &test,
            cfg,
            cfg.training.seed.wrapping_add(i as u64),
            with_baseline,
            &fold.test_subject,
        )
    });
    let mut fold_runs = Vec::with_capacity(runs.len());
    for r in runs {
        fold_runs.push(r?);
    }

    let ssl_report = aggregate_report(
        &fold_runs
            .iter()
            .map(|f| f.ssl.fold.clone())
            .collect::<Vec<_>>(),
    )?;
    let baseline_report = if with_baseline {
        Some(aggregate_report(
            &fold_runs
                .iter()
                .filter_map(|f| f.baseline.as_ref().map(|b| b.fold.clone()))
                .collect::<Vec<_>>(),
        )?)
    } else {
        None
    };

    let mut pooled_scores = Vec::new();
    let mut pooled_labels = Vec::new();
    for f in &fold_runs {
        pooled_scores.extend_from_slice(&f.ssl.scores);
        pooled_labels.extend_from_slice(&f.ssl.labels);
    }
    let (pooled_curve, pooled_auc) = match roc_curve(&pooled_scores, &pooled_labels) {
        Ok(c) => {
            let a = auc(&c);
            (Some(c), Some(a))
        }
        Err(_) => (None, None),
    };

    Ok(LosoOutcome {
        folds: fold_runs,
        ssl_report,
        baseline_report,
        pooled_curve,
        pooled_auc,
    })
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub fraction: f64,
    pub kept_class_counts: (usize, usize),
    pub ssl: FoldMetrics,
    pub baseline: FoldMetrics,
}

pub struct SweepOutcome {
    pub test_subject: String,
    pub points: Vec<SweepPoint>,
}

/// Label-efficiency sweep on the first leave-one-subject-out split: pretrain
/// once, then per fraction fine-tune the SSL head and train the supervised
/// baseline on the same stratified subsample.
pub fn sweep_labels(recs: &[Recording], cfg: &RunConfig) -> Result<SweepOutcome> {
    let folds = loso_folds(recs)?;
    let fold = &folds[0];
    let digest = cfg.digest();
    let train: Vec<Recording> = fold.train.iter().map(|&j| recs[j].clone()).collect();
    let test: Vec<Recording> = fold.test.iter().map(|&j| recs[j].clone()).collect();

    let stats = fit_standardizer(&train)?;
    let std_train: Vec<Recording> = train.iter().map(|r| apply_standardizer(r, &stats)).collect();
    let std_test: Vec<Recording> = test.iter().map(|r| apply_standardizer(r, &stats)).collect();

    let enc_cfg = cfg.encoder_config();
    let pre_ws = pretrain_windows(&std_train, &cfg.windowing, &digest)?;
    let (encoder, _) = pretrain(
        &pre_ws,
        &enc_cfg,
        &cfg.mask,
        &cfg.train_opts(cfg.training.pretrain_epochs, cfg.training.seed),
    )?;

    let train_ws = labeled_windows(&std_train, &cfg.windowing, &digest)?;
    let test_ws = labeled_windows(&std_test, &cfg.windowing, &digest)?;

    let points: Vec<Result<SweepPoint>> = par::map_indexed(cfg.label_fractions.len(), |i| {
        let fraction = cfg.label_fractions[i];
        let sub = subsample_labels(&train_ws, fraction, cfg.training.seed)?;
        let kept = sub.class_counts();
        let (ssl_model, _) = finetune(
            &encoder,
            &sub,
            &cfg.train_opts(cfg.training.finetune_epochs, cfg.training.seed),
        )?;
        let ssl = evaluate_model(&ssl_model, &test_ws, &fold.test_subject)?;
        let (base_model, _) = supervised_baseline(
            &sub,
            &enc_cfg,
            &cfg.train_opts(cfg.training.baseline_epochs, cfg.training.seed),
        )?;
        let baseline = evaluate_model(&base_model, &test_ws, &fold.test_subject)?;
        Ok(SweepPoint {
            fraction,
            kept_class_counts: kept,
            ssl: ssl.fold,
            baseline: baseline.fold,
        })
    });
    let mut out = Vec::with_capacity(points.len());
    for p in points {
        out.push(p?);
    }
    Ok(SweepOutcome {
        test_subject: fold.test_subject.clone(),
        points: out,
    })
}

/// `metrics.json` document: per-fold rows plus aggregate statistics, stamped
/// with the config digest and seed. Serialization is byte-stable.
#[derive(Serialize)]
pub struct MetricsDoc<'a> {
    pub config_digest: &'a str,
    pub seed: u64,
    pub model: &'a str,
    pub folds: &'a [FoldMetrics],
    pub aggregate: &'a std::collections::BTreeMap<String, crate::eval::AggregateStat>,
}

pub fn metrics_json(doc: &MetricsDoc) -> String {
    let mut s = serde_json::to_string_pretty(doc).expect("metrics serialize");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, SynthConfig};

    fn mini_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.windowing.window_len = 64;
        cfg.windowing.hop_minority = 16;
        cfg.windowing.pretrain_hop = 64;
        cfg.mask.span_len = 8;
        cfg.encoder.blocks = vec![
            crate::model::ConvBlockCfg {
                out_channels: 8,
                kernel_size: 5,
            },
            crate::model::ConvBlockCfg {
                out_channels: 16,
                kernel_size: 3,
            },
        ];
        cfg.encoder.mlp_hidden = 32;
        cfg.training.pretrain_epochs = 2;
        cfg.training.finetune_epochs = 8;
        cfg.training.baseline_epochs = 2;
        cfg.training.batch_size = 16;
        cfg
    }

    fn mini_corpus(subjects: usize) -> Vec<Recording> {
        let synth = SynthConfig {
            subjects,
            duration_s: 120.0,
            ..Default::default()
        };
        select_site_all(&generate_corpus(&synth), SensorSite::Ankle).unwrap()
    }

    #[test]
    fn labeled_windows_are_roughly_balanced() {
        let recs = mini_corpus(2);
        let cfg = mini_cfg();
        let stats = fit_standardizer(&recs).unwrap();
        let std: Vec<Recording> = recs.iter().map(|r| apply_standardizer(r, &stats)).collect();
        let ws = labeled_windows(&std, &cfg.windowing, "test").unwrap();
        let (n0, n1) = ws.class_counts();
        assert!(n0 > 0 && n1 > 0);
        let ratio = n1 as f64 / n0 as f64;
        assert!((0.5..2.0).contains(&ratio), "ratio {ratio} ({n1}/{n0})");
    }

    #[test]
    fn fold_protocol_runs_end_to_end() {
        let recs = mini_corpus(3);
        let cfg = mini_cfg();
        let run = run_fold(&recs[1..], &recs[..1], &cfg, 7, false, "S01").unwrap();
        assert_eq!(run.subject, "S01");
        assert!(run.ssl.fold.auc.is_some());
        assert!(run.baseline.is_none());
        assert_eq!(run.pretrain_log.epochs.len(), 2);
    }

    #[test]
    fn loso_runs_and_aggregates() {
        let recs = mini_corpus(3);
        let cfg = mini_cfg();
        let outcome = loso_run(&recs, &cfg, false).unwrap();
        assert_eq!(outcome.folds.len(), 3);
        assert!(outcome.ssl_report.aggregate.contains_key("auc"));
        assert!(outcome.pooled_auc.is_some());
    }

    #[test]
    fn loso_is_deterministic() {
        let recs = mini_corpus(2);
        let cfg = mini_cfg();
        let a = loso_run(&recs, &cfg, false).unwrap();
        let b = loso_run(&recs, &cfg, false).unwrap();
        let doc_a = metrics_json(&MetricsDoc {
            config_digest: &cfg.digest(),
            seed: cfg.training.seed,
            model: "ssl",
            folds: &a.ssl_report.folds,
            aggregate: &a.ssl_report.aggregate,
        });
        let doc_b = metrics_json(&MetricsDoc {
            config_digest: &cfg.digest(),
            seed: cfg.training.seed,
            model: "ssl",
            folds: &b.ssl_report.folds,
            aggregate: &b.ssl_report.aggregate,
        });
        assert_eq!(doc_a, doc_b);
    }
}
