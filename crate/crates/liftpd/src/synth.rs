//! Synthetic benchmark corpus: configurable subjects with walking segments
//! (1–2 Hz dominant gait), freeze segments (3–8 Hz low-amplitude trembling),
//! and near-zero rest, emitted in the 9-channel recording layout.
//!
//! Values are integer milli-g like the real corpus; annotations mark rest
//! and walking as no-freeze and trembling segments as freeze, with short
//! out-of-experiment lead-in and lead-out runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::{Annotation, Recording, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub subjects: usize,
    pub duration_s: f64,
    pub sample_rate_hz: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects: 6,
            duration_s: 600.0,
            sample_rate_hz: 64.0,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    OutOfExperiment,
    Rest,
    Walk,
    Freeze,
}

impl Phase {
    fn annotation(self) -> Annotation {
        match self {
            Self::OutOfExperiment => Annotation::OutOfExperiment,
            Self::Rest | Self::Walk => Annotation::NoFreeze,
            Self::Freeze => Annotation::Freeze,
        }
    }
}

/// Per-subject signal character, drawn once per subject.
struct SubjectTraits {
    gait_hz: f64,
    tremor_hz: f64,
    /// Per-site gait amplitude (milli-g): ankle, thigh, trunk.
    gait_amp: [f64; 3],
    tremor_amp: [f64; 3],
    rest_noise: f64,
    walk_noise: f64,
    phase: [f64; 9],
}

impl SubjectTraits {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let ankle_gait = rng.random_range(250.0..450.0);
        let ankle_tremor = rng.random_range(50.0..110.0);
        let mut phase = [0.0; 9];
        for p in &mut phase {
            *p = rng.random_range(0.0..std::f64::consts::TAU);
        }
        Self {
            gait_hz: rng.random_range(1.0..2.0),
            // upper half of the 3–8 Hz tremor band, clear of the 2–4 Hz
            // second harmonic of gait
            tremor_hz: rng.random_range(4.5..8.0),
            gait_amp: [ankle_gait, ankle_gait * 0.7, ankle_gait * 0.4],
            tremor_amp: [ankle_tremor, ankle_tremor * 0.8, ankle_tremor * 0.4],
            rest_noise: rng.random_range(4.0..8.0),
            walk_noise: rng.random_range(15.0..25.0),
            phase,
        }
    }
}

/// Gravity plus mounting offset per channel (milli-g), shared by all phases.
const OFFSETS: [f64; 9] = [
    60.0, -970.0, 40.0, // ankle
    30.0, -990.0, 80.0, // thigh
    10.0, -1000.0, 20.0, // trunk
];

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Alternating rest and walk bouts with freeze episodes embedded inside the
/// bouts, bracketed by short out-of-experiment runs.
fn plan_schedule(rng: &mut ChaCha8Rng, total_s: f64) -> Vec<(Phase, f64)> {
    let mut plan = vec![(Phase::OutOfExperiment, 5.0)];
    let mut remaining = total_s - 10.0;
    while remaining > 0.0 {
        let rest: f64 = rng.random_range(12.0..25.0);
        plan.push((Phase::Rest, rest.min(remaining)));
        remaining -= rest;
        if remaining <= 0.0 {
            break;
        }

        let bout = rng.random_range(35.0..60.0f64).min(remaining);
        let mut left = bout;
        let episodes = rng.random_range(1..=2);
        for _ in 0..episodes {
            let walk = rng.random_range(8.0..16.0f64).min(left);
            plan.push((Phase::Walk, walk));
            left -= walk;
            if left <= 0.0 {
                break;
            }
            let freeze = rng.random_range(4.0..8.0f64).min(left);
            plan.push((Phase::Freeze, freeze));
            left -= freeze;
            if left <= 0.0 {
                break;
            }
        }
        if left > 0.0 {
            plan.push((Phase::Walk, left));
        }
        remaining -= bout;
    }
    plan.push((Phase::OutOfExperiment, 5.0));
    plan
}

fn synth_value(
    traits: &SubjectTraits,
    phase: Phase,
    channel: usize,
    t: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let site = channel / 3;
    let base = OFFSETS[channel];
    match phase {
        Phase::OutOfExperiment | Phase::Rest => base + traits.rest_noise * gauss(rng),
        Phase::Walk => {
            let a = traits.gait_amp[site];
            let w = std::f64::consts::TAU * traits.gait_hz;
            base + a * (w * t + traits.phase[channel]).sin()
                + 0.35 * a * (2.0 * w * t + 1.7 * traits.phase[channel]).sin()
                + traits.walk_noise * gauss(rng)
        }
        Phase::Freeze => {
            let a = traits.tremor_amp[site];
            let w = std::f64::consts::TAU * traits.tremor_hz;
            base + a * (w * t + traits.phase[channel]).sin() + traits.rest_noise * gauss(rng)
        }
    }
}

/// One synthetic subject's 9-channel recording.
pub fn generate_subject(cfg: &SynthConfig, subject_idx: usize) -> Recording {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(subject_idx as u64 + 1);
    let traits = SubjectTraits::draw(&mut rng);
    let plan = plan_schedule(&mut rng, cfg.duration_s);
    let rate = cfg.sample_rate_hz;
    let total_samples = (cfg.duration_s * rate) as usize;

    let mut samples = Vec::with_capacity(total_samples);
    let mut i = 0usize;
    'outer: for (phase, dur_s) in plan {
        let n = (dur_s * rate).round() as usize;
        for _ in 0..n {
            if i >= total_samples {
                break 'outer;
            }
            let t = i as f64 / rate;
            let accel: Vec<f64> = (0..9)
                .map(|c| synth_value(&traits, phase, c, t, &mut rng).round())
                .collect();
            samples.push(Sample {
                t_ms: ((i as f64) * 1000.0 / rate).round() as i64,
                accel,
                annotation: phase.annotation(),
            });
            i += 1;
        }
    }
    Recording {
        subject_id: format!("S{:02}", subject_idx + 1),
        trial_id: "R01".into(),
        sample_rate_hz: rate,
        samples,
    }
}

/// The full benchmark corpus: one recording per subject.
pub fn generate_corpus(cfg: &SynthConfig) -> Vec<Recording> {
    (0..cfg.subjects).map(|s| generate_subject(cfg, s)).collect()
}

/// A gate benchmark stream with a prescribed rest fraction: rest and walk
/// alternate in long blocks, rest taking `rest_fraction` of the duration.
/// All samples are annotated no-freeze; the stream exercises gating, not
/// labeling.
pub fn gate_benchmark_stream(seed: u64, duration_s: f64, rest_fraction: f64) -> Recording {
    let cfg = SynthConfig {
        seed,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(101);
    let traits = SubjectTraits::draw(&mut rng);
    let rate = cfg.sample_rate_hz;
    let total = (duration_s * rate) as usize;

    // three walk blocks spread across the stream
    let walk_total = duration_s * (1.0 - rest_fraction);
    let block = walk_total / 3.0;
    let spacing = duration_s / 3.0;
    let walk_ranges: Vec<(f64, f64)> = (0..3)
        .map(|k| {
            let start = k as f64 * spacing + (spacing - block) / 2.0;
            (start, start + block)
        })
        .collect();

    let samples = (0..total)
        .map(|i| {
            let t = i as f64 / rate;
            let walking = walk_ranges.iter().any(|&(a, b)| t >= a && t < b);
            let phase = if walking { Phase::Walk } else { Phase::Rest };
            let accel: Vec<f64> = (0..9)
                .map(|c| synth_value(&traits, phase, c, t, &mut rng).round())
                .collect();
            Sample {
                t_ms: ((i as f64) * 1000.0 / rate).round() as i64,
                accel,
                annotation: Annotation::NoFreeze,
            }
        })
        .collect();
    Recording {
        subject_id: "S99".into(),
        trial_id: "R01".into(),
        sample_rate_hz: rate,
        samples,
    }
}
