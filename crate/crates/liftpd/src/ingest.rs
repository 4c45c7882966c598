//! Recording ingestion: parse Daphnet-style text files, select one triaxial
//! sensor site, validate sample timing, and standardize channels.
//!
//! Input layout is the 11-column whitespace format of the public Daphnet FoG
//! corpus: time in ms, then 9 acceleration values (ankle, thigh, trunk — 3
//! each, milli-g), then the annotation (0 = out of experiment, 1 = no freeze,
//! 2 = freeze). File names follow `S<subject>R<trial>.txt`.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};

use crate::error::{Error, Result};

/// Allowed deviation of each timestamp delta from the median delta.
const DELTA_TOLERANCE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Annotation {
    OutOfExperiment,
    NoFreeze,
    Freeze,
}

impl Annotation {
    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            0 => Some(Self::OutOfExperiment),
            1 => Some(Self::NoFreeze),
            2 => Some(Self::Freeze),
            _ => None,
        }
    }

    pub fn code(self) -> i64 {
        match self {
            Self::OutOfExperiment => 0,
            Self::NoFreeze => 1,
            Self::Freeze => 2,
        }
    }
}

/// One timestamped acceleration sample. Carries 9 channels straight after
/// parsing and 3 after [`select_sensor`].
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t_ms: i64,
    pub accel: Vec<f64>,
    pub annotation: Annotation,
}

/// One subject session: uniformly sampled acceleration plus per-sample
/// annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub trial_id: String,
    pub sample_rate_hz: f64,
    pub samples: Vec<Sample>,
}

impl Recording {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.samples.first().map_or(0, |s| s.accel.len())
    }
}

/// Triaxial sensor placement in the 9-channel source layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensorSite {
    Ankle,
    Thigh,
    Trunk,
}

impl SensorSite {
    fn column_offset(self) -> usize {
        match self {
            Self::Ankle => 0,
            Self::Thigh => 3,
            Self::Trunk => 6,
        }
    }
}

impl fmt::Display for SensorSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Ankle => write!(f, "ankle"),
            Self::Thigh => write!(f, "thigh"),
            Self::Trunk => write!(f, "trunk"),
        }
    }
}

/// Per-channel standardization statistics fit on training data only.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Parse one recording from line-oriented text. Subject and trial ids come
/// from the `S<ss>R<rr>` file-name pattern; the sample rate is inferred from
/// the median timestamp delta and every delta must sit within ±10% of it.
pub fn parse_recording<R: Read>(source: R, naming: &str) -> Result<Recording> {
    let (subject_id, trial_id) = ids_from_name(naming);
    let reader = BufReader::new(source);
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 11 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 11 fields, got {}", fields.len()),
            });
        }
        let t_ms: i64 = fields[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad timestamp {:?}", fields[0]),
        })?;
        let mut accel = Vec::with_capacity(9);
        for f in &fields[1..10] {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad acceleration value {f:?}"),
            })?;
            accel.push(v);
        }
        let code: i64 = fields[10].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad annotation {:?}", fields[10]),
        })?;
        let annotation = Annotation::from_code(code).ok_or_else(|| Error::Parse {
            line: line_no,
            msg: format!("annotation {code} not in {{0,1,2}}"),
        })?;
        samples.push(Sample {
            t_ms,
            accel,
            annotation,
        });
    }
    if samples.is_empty() {
        return Err(Error::Empty(format!("{naming}: no samples")));
    }
    let sample_rate_hz = validate_timing(&samples)?;
    Ok(Recording {
        subject_id,
        trial_id,
        sample_rate_hz,
        samples,
    })
}

fn ids_from_name(naming: &str) -> (String, String) {
    let stem = naming
        .rsplit('/')
        .next()
        .unwrap_or(naming)
        .trim_end_matches(".txt");
    let bytes = stem.as_bytes();
    if let Some(r_pos) = stem.rfind(['R', 'r']) {
        if r_pos > 0 && bytes[0].eq_ignore_ascii_case(&b'S') {
            let subject = &stem[..r_pos];
            let trial = &stem[r_pos..];
            if subject.len() > 1
                && subject[1..].chars().all(|c| c.is_ascii_digit())
                && trial.len() > 1
                && trial[1..].chars().all(|c| c.is_ascii_digit())
            {
                return (subject.to_string(), trial.to_string());
            }
        }
    }
    (stem.to_string(), "R01".to_string())
}

/// Checks strict monotonicity and spacing regularity; returns the inferred
/// rate. A single sample has no deltas and defaults to 64 Hz.
fn validate_timing(samples: &[Sample]) -> Result<f64> {
    if samples.len() < 2 {
        return Ok(64.0);
    }
    let mut deltas = Vec::with_capacity(samples.len() - 1);
    for w in samples.windows(2) {
        let d = w[1].t_ms - w[0].t_ms;
        if d <= 0 {
            return Err(Error::Timing(format!(
                "non-increasing timestamps {} → {}",
                w[0].t_ms, w[1].t_ms
            )));
        }
        deltas.push(d);
    }
    let mut sorted = deltas.clone();
    sorted.sort_unstable();
    let median = sorted[(sorted.len() - 1) / 2] as f64;
    for (i, &d) in deltas.iter().enumerate() {
        let dev = (d as f64 - median).abs() / median;
        if dev > DELTA_TOLERANCE {
            return Err(Error::Timing(format!(
                "delta {} ms at sample {} deviates from median {} ms by {:.0}%",
                d,
                i + 1,
                median,
                dev * 100.0
            )));
        }
    }
    Ok(1000.0 / median)
}

/// Reduce a 9-channel recording to the chosen site's 3 channels.
pub fn select_sensor(rec: &Recording, site: SensorSite) -> Result<Recording> {
    match rec.channels() {
        9 => {}
        3 => return Err(Error::AlreadySingleSite),
        n => return Err(Error::Shape(format!("expected 9 channels, got {n}"))),
    }
    let off = site.column_offset();
    let samples = rec
        .samples
        .iter()
        .map(|s| Sample {
            t_ms: s.t_ms,
            accel: s.accel[off..off + 3].to_vec(),
            annotation: s.annotation,
        })
        .collect();
    Ok(Recording {
        subject_id: rec.subject_id.clone(),
        trial_id: rec.trial_id.clone(),
        sample_rate_hz: rec.sample_rate_hz,
        samples,
    })
}

/// Maximal contiguous runs with annotation ≠ OutOfExperiment, each returned
/// as an independent recording in stream order. May be empty.
pub fn split_labeled_segments(rec: &Recording) -> Vec<Recording> {
    let mut segments = Vec::new();
    let mut run: Vec<Sample> = Vec::new();
    for s in &rec.samples {
        if s.annotation == Annotation::OutOfExperiment {
            if !run.is_empty() {
                segments.push(std::mem::take(&mut run));
            }
        } else {
            run.push(s.clone());
        }
    }
    if !run.is_empty() {
        segments.push(run);
    }
    segments
        .into_iter()
        .map(|samples| Recording {
            subject_id: rec.subject_id.clone(),
            trial_id: rec.trial_id.clone(),
            sample_rate_hz: rec.sample_rate_hz,
            samples,
        })
        .collect()
}

/// Per-channel mean and population standard deviation over every sample of
/// every recording.
pub fn fit_standardizer(recs: &[Recording]) -> Result<ChannelStats> {
    let total: usize = recs.iter().map(Recording::len).sum();
    if recs.is_empty() || total < 2 {
        return Err(Error::Empty("standardizer needs at least 2 samples".into()));
    }
    let channels = recs[0].channels();
    let mut mean = vec![0.0; channels];
    for rec in recs {
        for s in &rec.samples {
            for c in 0..channels {
                mean[c] += s.accel[c];
            }
        }
    }
    for m in &mut mean {
        *m /= total as f64;
    }
    let mut var = vec![0.0; channels];
    for rec in recs {
        for s in &rec.samples {
            for c in 0..channels {
                let d = s.accel[c] - mean[c];
                var[c] += d * d;
            }
        }
    }
    let mut std = vec![0.0; channels];
    for c in 0..channels {
        std[c] = (var[c] / total as f64).sqrt();
        if std[c] == 0.0 {
            return Err(Error::DegenerateChannel(c));
        }
    }
    Ok(ChannelStats { mean, std })
}

/// Replace each channel value by `(value − mean) / std`.
pub fn apply_standardizer(rec: &Recording, stats: &ChannelStats) -> Recording {
    let samples = rec
        .samples
        .iter()
        .map(|s| Sample {
            t_ms: s.t_ms,
            accel: s
                .accel
                .iter()
                .enumerate()
                .map(|(c, &v)| (v - stats.mean[c]) / stats.std[c])
                .collect(),
            annotation: s.annotation,
        })
        .collect();
    Recording {
        subject_id: rec.subject_id.clone(),
        trial_id: rec.trial_id.clone(),
        sample_rate_hz: rec.sample_rate_hz,
        samples,
    }
}

/// Write a recording back out in the same whitespace text layout it was
/// parsed from (any channel width).
pub fn write_recording<W: Write>(rec: &Recording, mut out: W) -> Result<()> {
    for s in &rec.samples {
        write!(out, "{}", s.t_ms)?;
        for v in &s.accel {
            write!(out, " {v}")?;
        }
        writeln!(out, " {}", s.annotation.code())?;
    }
    Ok(())
}
