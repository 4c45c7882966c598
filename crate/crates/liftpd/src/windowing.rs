//! Window segmentation: fixed-hop frames for pretraining and the
//! differential-hop technique (DHWT) for class-balanced labeled frames.
//!
//! DHWT uses a class-dependent hop length: a small hop densely oversamples
//! the minority (freeze) class with overlapping windows, while a large hop
//! subsamples the majority class, with hops chosen so the expected window
//! counts of the two classes match.

use crate::error::{Error, Result};
use crate::ingest::{Annotation, Recording};

/// One segmented frame: `window_len × channels` standardized values in
/// time-major row-major order, an optional class label, and its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub values: Vec<f64>,
    pub label: Option<u8>,
    pub source: WindowSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSource {
    pub subject_id: String,
    pub trial_id: String,
    pub start_index: usize,
}

/// Ordered collection of equally shaped windows.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub windows: Vec<Window>,
    pub window_len: usize,
    pub channels: usize,
    pub provenance: String,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        !self.windows.is_empty() && self.windows.iter().all(|w| w.label.is_some())
    }

    /// (label-0 count, label-1 count); unlabeled windows count in neither.
    pub fn class_counts(&self) -> (usize, usize) {
        let mut n0 = 0;
        let mut n1 = 0;
        for w in &self.windows {
            match w.label {
                Some(0) => n0 += 1,
                Some(1) => n1 += 1,
                _ => {}
            }
        }
        (n0, n1)
    }

    pub fn merge(mut sets: Vec<WindowSet>) -> Result<WindowSet> {
        let mut iter = sets.drain(..);
        let mut first = iter
            .next()
            .ok_or_else(|| Error::Empty("no window sets to merge".into()))?;
        for s in iter {
            if s.window_len != first.window_len || s.channels != first.channels {
                return Err(Error::Shape("merging window sets of different shapes".into()));
            }
            first.windows.extend(s.windows);
        }
        Ok(first)
    }
}

/// DHWT parameters. `hop_majority` may exceed `window_len`, producing gaps.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DhwtConfig {
    pub window_len: usize,
    pub hop_minority: usize,
    pub hop_majority: usize,
    /// Freeze fraction at or above which a window is labeled 1.
    pub label_fraction_tau: f64,
}

impl DhwtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len < 2 {
            return Err(Error::Config(format!(
                "window_len must be ≥ 2, got {}",
                self.window_len
            )));
        }
        if self.hop_minority < 1 || self.hop_majority < 1 {
            return Err(Error::Config("hops must be ≥ 1".into()));
        }
        if !(self.label_fraction_tau > 0.0 && self.label_fraction_tau <= 1.0) {
            return Err(Error::Config(format!(
                "tau must be in (0,1], got {}",
                self.label_fraction_tau
            )));
        }
        Ok(())
    }
}

fn slice_window(rec: &Recording, start: usize, window_len: usize, channels: usize) -> Vec<f64> {
    let mut values = Vec::with_capacity(window_len * channels);
    for s in &rec.samples[start..start + window_len] {
        values.extend_from_slice(&s.accel);
    }
    values
}

/// Uniform-hop segmentation (the unlabeled special case used for
/// pretraining): starts at 0, hop, 2·hop, … while `start + window_len ≤ T`.
pub fn segment_fixed(rec: &Recording, window_len: usize, hop: usize) -> Result<WindowSet> {
    if hop < 1 {
        return Err(Error::Config("hop must be ≥ 1".into()));
    }
    let t = rec.len();
    if window_len > t {
        return Err(Error::TooShort {
            len: t,
            window_len,
        });
    }
    let channels = rec.channels();
    let mut windows = Vec::new();
    let mut start = 0;
    while start + window_len <= t {
        windows.push(Window {
            values: slice_window(rec, start, window_len, channels),
            label: None,
            source: WindowSource {
                subject_id: rec.subject_id.clone(),
                trial_id: rec.trial_id.clone(),
                start_index: start,
            },
        });
        start += hop;
    }
    Ok(WindowSet {
        windows,
        window_len,
        channels,
        provenance: String::new(),
    })
}

/// Choose the majority hop so that the expected majority window count
/// matches the minority count produced by `hop_minority`.
pub fn compute_dhwt_hops(
    duration_minority: usize,
    duration_majority: usize,
    window_len: usize,
    hop_minority: usize,
) -> Result<(usize, usize)> {
    for d in [duration_minority, duration_majority] {
        if d < window_len {
            return Err(Error::TooShort {
                len: d,
                window_len,
            });
        }
    }
    if hop_minority < 1 {
        return Err(Error::Config("hop_minority must be ≥ 1".into()));
    }
    let n_min = (duration_minority - window_len) / hop_minority + 1;
    let hop_majority = if n_min > 1 {
        let ideal = (duration_majority - window_len) as f64 / (n_min - 1) as f64;
        (ideal.round() as usize).max(1)
    } else {
        duration_majority
    };
    Ok((hop_minority, hop_majority))
}

/// Label a window's annotation slice: 1 iff the freeze fraction reaches tau
/// (inclusive), else 0. OutOfExperiment samples violate the contract.
pub fn window_label(annotations: &[Annotation], tau: f64) -> Result<u8> {
    if annotations.is_empty() {
        return Err(Error::Empty("empty annotation slice".into()));
    }
    let mut freeze = 0usize;
    for a in annotations {
        match a {
            Annotation::OutOfExperiment => {
                return Err(Error::Config(
                    "OutOfExperiment sample inside a labeled window".into(),
                ))
            }
            Annotation::Freeze => freeze += 1,
            Annotation::NoFreeze => {}
        }
    }
    Ok(if freeze as f64 / annotations.len() as f64 >= tau {
        1
    } else {
        0
    })
}

/// Differential-hop segmentation of OutOfExperiment-free recordings.
///
/// Candidate windows are generated at the minority hop and labeled; label-1
/// windows are kept as generated. Maximal runs of consecutive label-0
/// candidates define majority regions, which are re-walked at the majority
/// hop. Output order is (recording order, start index). Recordings shorter
/// than the window are skipped unless every recording skips.
pub fn dhwt_segment(recs: &[Recording], cfg: &DhwtConfig) -> Result<WindowSet> {
    cfg.validate()?;
    if recs.is_empty() {
        return Err(Error::Empty("no recordings to segment".into()));
    }
    let channels = recs
        .iter()
        .find(|r| !r.is_empty())
        .map_or(0, |r| r.channels());
    let mut windows = Vec::new();
    let mut skipped = 0usize;
    for rec in recs {
        if rec.len() < cfg.window_len {
            skipped += 1;
            continue;
        }
        segment_one_dhwt(rec, cfg, &mut windows)?;
    }
    if skipped == recs.len() {
        return Err(Error::TooShort {
            len: recs.iter().map(Recording::len).max().unwrap_or(0),
            window_len: cfg.window_len,
        });
    }
    Ok(WindowSet {
        windows,
        window_len: cfg.window_len,
        channels,
        provenance: String::new(),
    })
}

fn segment_one_dhwt(rec: &Recording, cfg: &DhwtConfig, out: &mut Vec<Window>) -> Result<()> {
    let t = rec.len();
    let channels = rec.channels();
    let l = cfg.window_len;
    let annotations: Vec<Annotation> = rec.samples.iter().map(|s| s.annotation).collect();

    // Candidate pass at the minority hop.
    let mut candidates: Vec<(usize, u8)> = Vec::new();
    let mut start = 0;
    while start + l <= t {
        let label = window_label(&annotations[start..start + l], cfg.label_fraction_tau)?;
        candidates.push((start, label));
        start += cfg.hop_minority;
    }

    let mut produced: Vec<(usize, u8)> = Vec::new();
    let mut i = 0;
    while i < candidates.len() {
        let (start, label) = candidates[i];
        if label == 1 {
            produced.push((start, 1));
            i += 1;
            continue;
        }
        // Maximal run of label-0 candidates → one majority region,
        // re-walked at the majority hop.
        let first = start;
        let mut last = start;
        while i < candidates.len() && candidates[i].1 == 0 {
            last = candidates[i].0;
            i += 1;
        }
        let mut s = first;
        while s <= last {
            let label = window_label(&annotations[s..s + l], cfg.label_fraction_tau)?;
            produced.push((s, label));
            s += cfg.hop_majority;
        }
    }

    produced.sort_unstable_by_key(|&(s, _)| s);
    for (s, label) in produced {
        out.push(Window {
            values: slice_window(rec, s, l, channels),
            label: Some(label),
            source: WindowSource {
                subject_id: rec.subject_id.clone(),
                trial_id: rec.trial_id.clone(),
                start_index: s,
            },
        });
    }
    Ok(())
}

/// Window dump sidecar: shape, class counts, provenance, and per-window
/// labels/sources for the raw little-endian f64 array next to it.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct WindowDumpMeta {
    pub n: usize,
    pub window_len: usize,
    pub channels: usize,
    pub class_counts: (usize, usize),
    pub config_digest: String,
    pub labels: Option<Vec<u8>>,
    pub sources: Vec<(String, String, usize)>,
}

/// Write a window set as a raw array file (window-major little-endian f64,
/// the checkpoint payload encoding) plus a JSON sidecar.
pub fn dump_windows(ws: &WindowSet, bin_path: &std::path::Path, json_path: &std::path::Path) -> Result<()> {
    let mut bin = Vec::with_capacity(ws.len() * ws.window_len * ws.channels * 8);
    for w in &ws.windows {
        for v in &w.values {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(bin_path, bin)?;
    let labels = if ws.is_labeled() {
        Some(ws.windows.iter().map(|w| w.label.unwrap()).collect())
    } else {
        None
    };
    let meta = WindowDumpMeta {
        n: ws.len(),
        window_len: ws.window_len,
        channels: ws.channels,
        class_counts: ws.class_counts(),
        config_digest: ws.provenance.clone(),
        labels,
        sources: ws
            .windows
            .iter()
            .map(|w| {
                (
                    w.source.subject_id.clone(),
                    w.source.trial_id.clone(),
                    w.source.start_index,
                )
            })
            .collect(),
    };
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    std::fs::write(json_path, json)?;
    Ok(())
}

pub fn load_windows(bin_path: &std::path::Path, json_path: &std::path::Path) -> Result<WindowSet> {
    let meta: WindowDumpMeta = serde_json::from_str(&std::fs::read_to_string(json_path)?)?;
    let bin = std::fs::read(bin_path)?;
    let per_window = meta.window_len * meta.channels * 8;
    if bin.len() != meta.n * per_window {
        return Err(Error::Shape(format!(
            "window dump holds {} bytes, sidecar implies {}",
            bin.len(),
            meta.n * per_window
        )));
    }
    if meta.sources.len() != meta.n {
        return Err(Error::Shape("sidecar sources do not match n".into()));
    }
    let windows = (0..meta.n)
        .map(|i| {
            let chunk = &bin[i * per_window..(i + 1) * per_window];
            let values = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let (subject_id, trial_id, start_index) = meta.sources[i].clone();
            Window {
                values,
                label: meta.labels.as_ref().map(|l| l[i]),
                source: WindowSource {
                    subject_id,
                    trial_id,
                    start_index,
                },
            }
        })
        .collect();
    Ok(WindowSet {
        windows,
        window_len: meta.window_len,
        channels: meta.channels,
        provenance: meta.config_digest,
    })
}

/// (count of label 1) / (count of label 0).
pub fn balance_ratio(ws: &WindowSet) -> Result<f64> {
    if !ws.is_labeled() {
        return Err(Error::SingleClass("window set has unlabeled windows".into()));
    }
    let (n0, n1) = ws.class_counts();
    if n0 == 0 || n1 == 0 {
        return Err(Error::SingleClass(format!(
            "need both classes, got {n0} vs {n1}"
        )));
    }
    Ok(n1 as f64 / n0 as f64)
}
