//! Opportunistic inference: a cheap activity detector with hysteresis
//! decides when the classifier runs on a live stream, plus invocation
//! accounting.
//!
//! The activity statistic is the population standard deviation of the
//! acceleration magnitude over a short ring buffer, which is orientation
//! invariant and costs a few flops per sample. Dual thresholds plus an off
//! dwell keep the gate from flapping and from deactivating during brief
//! low-movement freeze episodes inside a gait bout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Recording;
use crate::model::Model;
use crate::numerics::Tensor;
use crate::training::scores_from_logits;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    /// Ring-buffer length for the activity statistic (samples).
    pub stat_window: usize,
    /// Activate when the statistic reaches this level.
    pub theta_on: f64,
    /// Deactivate only after the statistic stays below this level…
    pub theta_off: f64,
    /// …for this many consecutive samples.
    pub off_dwell: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            stat_window: 64,
            theta_on: 0.10,
            theta_off: 0.05,
            off_dwell: 320,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stat_window < 2 {
            return Err(Error::Config("stat_window must be ≥ 2".into()));
        }
        if self.theta_off > self.theta_on {
            return Err(Error::Config(format!(
                "theta_off {} must be ≤ theta_on {}",
                self.theta_off, self.theta_on
            )));
        }
        if self.off_dwell < self.stat_window {
            return Err(Error::Config(format!(
                "off_dwell {} must be ≥ stat_window {}",
                self.off_dwell, self.stat_window
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Idle,
    Active,
}

/// Streaming gate state: one per stream, single consumer.
#[derive(Debug, Clone)]
pub struct GateState {
    mode: Mode,
    buf: Vec<f64>,
    head: usize,
    filled: usize,
    below_count: usize,
}

impl GateState {
    pub fn new(cfg: &GateConfig) -> Self {
        Self {
            mode: Mode::Idle,
            buf: vec![0.0; cfg.stat_window],
            head: 0,
            filled: 0,
            below_count: 0,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Population standard deviation of the buffered magnitudes, or `None`
    /// while the buffer is still filling (not ready: no decision change).
    pub fn activity_stat(&self) -> Option<f64> {
        if self.filled < self.buf.len() {
            return None;
        }
        let n = self.buf.len() as f64;
        let mean = self.buf.iter().sum::<f64>() / n;
        let var = self.buf.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n;
        Some(var.sqrt())
    }

    /// Push one sample's acceleration and advance the hysteresis machine:
    /// Idle→Active once the statistic reaches `theta_on`; Active→Idle only
    /// after it stays below `theta_off` for `off_dwell` consecutive samples.
    pub fn step(&mut self, accel: &[f64], cfg: &GateConfig) -> Mode {
        let magnitude = accel.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.buf[self.head] = magnitude;
        self.head = (self.head + 1) % self.buf.len();
        if self.filled < self.buf.len() {
            self.filled += 1;
        }
        let Some(stat) = self.activity_stat() else {
            return self.mode;
        };
        match self.mode {
            Mode::Idle => {
                if stat >= cfg.theta_on {
                    self.mode = Mode::Active;
                    self.below_count = 0;
                }
            }
            Mode::Active => {
                if stat >= cfg.theta_off {
                    self.below_count = 0;
                } else {
                    self.below_count += 1;
                    if self.below_count >= cfg.off_dwell {
                        self.mode = Mode::Idle;
                        self.below_count = 0;
                    }
                }
            }
        }
        self.mode
    }
}

/// Gate-step as a pure transition on an owned state.
pub fn gate_step(mut state: GateState, accel: &[f64], cfg: &GateConfig) -> (GateState, Mode) {
    let mode = state.step(accel, cfg);
    (state, mode)
}

/// Invocation accounting for one stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceStats {
    /// Classifier-eligible window positions seen.
    pub total_windows: usize,
    /// Positions actually classified.
    pub invoked: usize,
    /// Positions gated off (implicit non-FoG).
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    Score(f64),
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamEvent {
    pub start_index: usize,
    pub mode: Mode,
    pub decision: Decision,
}

/// Consume a standardized recording in sample order. At every stride-aligned
/// window-complete position the classifier runs on the trailing window if
/// the gate is Active; Idle positions are recorded as skipped.
pub fn run_stream(
    rec: &Recording,
    model: &Model,
    gate_cfg: &GateConfig,
    window_len: usize,
    stride: usize,
) -> Result<(Vec<StreamEvent>, InferenceStats)> {
    gate_cfg.validate()?;
    if stride < 1 {
        return Err(Error::Config("stride must be ≥ 1".into()));
    }
    if window_len > rec.len() {
        return Err(Error::TooShort {
            len: rec.len(),
            window_len,
        });
    }
    let channels = rec.channels();
    if channels != model.cfg.in_channels || window_len != model.cfg.window_len {
        return Err(Error::Shape(format!(
            "stream windows {window_len}×{channels} vs encoder {}×{}",
            model.cfg.window_len, model.cfg.in_channels
        )));
    }

    let mut state = GateState::new(gate_cfg);
    let mut events = Vec::new();
    let mut stats = InferenceStats {
        total_windows: 0,
        invoked: 0,
        skipped: 0,
    };
    for (i, sample) in rec.samples.iter().enumerate() {
        let mode = state.step(&sample.accel, gate_cfg);
        let consumed = i + 1;
        if consumed < window_len || (consumed - window_len) % stride != 0 {
            continue;
        }
        let start = consumed - window_len;
        stats.total_windows += 1;
        let decision = if mode == Mode::Active {
            stats.invoked += 1;
            Decision::Score(classify_window(model, rec, start, window_len, channels)?)
        } else {
            stats.skipped += 1;
            Decision::Skipped
        };
        events.push(StreamEvent {
            start_index: start,
            mode,
            decision,
        });
    }
    Ok((events, stats))
}

fn classify_window(
    model: &Model,
    rec: &Recording,
    start: usize,
    window_len: usize,
    channels: usize,
) -> Result<f64> {
    let mut data = vec![0.0; channels * window_len];
    for (t, s) in rec.samples[start..start + window_len].iter().enumerate() {
        for c in 0..channels {
            data[c * window_len + t] = s.accel[c];
        }
    }
    let input = Tensor::new(vec![1, channels, window_len], data)?;
    let logits = crate::model::forward_classify(model, &input)?;
    Ok(scores_from_logits(&logits)[0])
}

/// Fraction of eligible positions the gate skipped.
pub fn invocation_reduction(stats: &InferenceStats) -> Result<f64> {
    if stats.total_windows == 0 {
        return Err(Error::Empty("no window positions counted".into()));
    }
    Ok(stats.skipped as f64 / stats.total_windows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(stat_window: usize, theta_on: f64, theta_off: f64, off_dwell: usize) -> GateConfig {
        GateConfig {
            stat_window,
            theta_on,
            theta_off,
            off_dwell,
        }
    }

    fn feed_magnitudes(state: &mut GateState, mags: &[f64], cfg: &GateConfig) -> Mode {
        let mut mode = state.mode();
        for &m in mags {
            mode = state.step(&[m, 0.0, 0.0], cfg);
        }
        mode
    }

    #[test]
    fn stat_examples() {
        let c = cfg(4, 0.1, 0.05, 8);
        let mut s = GateState::new(&c);
        feed_magnitudes(&mut s, &[0.0; 4], &c);
        assert_eq!(s.activity_stat(), Some(0.0));

        let mut s = GateState::new(&c);
        feed_magnitudes(&mut s, &[1.0; 4], &c);
        assert_eq!(s.activity_stat(), Some(0.0));

        let mut s = GateState::new(&c);
        feed_magnitudes(&mut s, &[0.0, 2.0, 0.0, 2.0], &c);
        assert_eq!(s.activity_stat(), Some(1.0));
    }

    #[test]
    fn underfull_buffer_gives_no_stat_or_transition() {
        let c = cfg(8, 0.0, 0.0, 8);
        let mut s = GateState::new(&c);
        for i in 0..7 {
            let mode = s.step(&[i as f64, 0.0, 0.0], &c);
            assert_eq!(s.activity_stat(), None);
            assert_eq!(mode, Mode::Idle);
        }
        assert_ne!(s.step(&[7.0, 0.0, 0.0], &c), Mode::Idle);
    }

    #[test]
    fn idle_activates_at_threshold() {
        let c = cfg(4, 0.1, 0.05, 8);
        let mut s = GateState::new(&c);
        let mode = feed_magnitudes(&mut s, &[0.0, 1.0, 0.0, 1.0], &c);
        assert_eq!(mode, Mode::Active);
    }

    #[test]
    fn zero_signal_never_leaves_idle() {
        let c = cfg(4, 0.1, 0.05, 8);
        let mut s = GateState::new(&c);
        let mode = feed_magnitudes(&mut s, &[0.0; 200], &c);
        assert_eq!(mode, Mode::Idle);
    }

    #[test]
    fn short_lull_does_not_deactivate() {
        // off_dwell of 20; a sub-threshold lull of 12 keeps the gate Active.
        let c = cfg(4, 0.1, 0.05, 20);
        let mut s = GateState::new(&c);
        feed_magnitudes(&mut s, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0], &c);
        assert_eq!(s.mode(), Mode::Active);
        feed_magnitudes(&mut s, &[0.5; 12], &c);
        assert_eq!(s.mode(), Mode::Active);
        // but a full dwell of flat signal deactivates
        feed_magnitudes(&mut s, &[0.5; 20], &c);
        assert_eq!(s.mode(), Mode::Idle);
    }

    #[test]
    fn dwell_counter_resets_on_activity() {
        let c = cfg(4, 0.1, 0.05, 16);
        let mut s = GateState::new(&c);
        feed_magnitudes(&mut s, &[0.0, 1.0, 0.0, 1.0], &c);
        assert_eq!(s.mode(), Mode::Active);
        for _ in 0..5 {
            // 12 flat samples (below dwell), then a burst resets the counter
            feed_magnitudes(&mut s, &[0.5; 12], &c);
            feed_magnitudes(&mut s, &[0.0, 1.0, 0.0, 1.0], &c);
            assert_eq!(s.mode(), Mode::Active);
        }
    }

    #[test]
    fn pure_transition_wrapper_matches_method() {
        let c = cfg(4, 0.1, 0.05, 8);
        let s = GateState::new(&c);
        let (s2, mode) = gate_step(s, &[1.0, 0.0, 0.0], &c);
        assert_eq!(mode, Mode::Idle);
        assert_eq!(s2.mode(), Mode::Idle);
    }

    #[test]
    fn invocation_reduction_quotients() {
        let all_skipped = InferenceStats {
            total_windows: 10,
            invoked: 0,
            skipped: 10,
        };
        assert_eq!(invocation_reduction(&all_skipped).unwrap(), 1.0);

        let none_skipped = InferenceStats {
            total_windows: 10,
            invoked: 10,
            skipped: 0,
        };
        assert_eq!(invocation_reduction(&none_skipped).unwrap(), 0.0);

        // the target figure as a direct quotient
        let paper = InferenceStats {
            total_windows: 100,
            invoked: 33,
            skipped: 67,
        };
        assert_eq!(invocation_reduction(&paper).unwrap(), 0.67);

        assert!(invocation_reduction(&InferenceStats {
            total_windows: 0,
            invoked: 0,
            skipped: 0
        })
        .is_err());
    }

    #[test]
    fn hysteresis_soundness_on_random_streams() {
        use rand::{Rng, SeedableRng};
        let c = cfg(4, 0.3, 0.15, 12);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let len = rng.random_range(30..300usize);
            let mut s = GateState::new(&c);
            let mut consecutive_below = 0usize;
            let mut prev_mode = Mode::Idle;
            for _ in 0..len {
                let m = if rng.random_bool(0.5) {
                    rng.random_range(0.0..2.0)
                } else {
                    rng.random_range(0.0..0.2)
                };
                let mode = s.step(&[m, 0.0, 0.0], &c);
                if let Some(stat) = s.activity_stat() {
                    if prev_mode == Mode::Active {
                        if stat < c.theta_off {
                            consecutive_below += 1;
                        } else {
                            consecutive_below = 0;
                        }
                        if mode == Mode::Idle {
                            assert!(
                                consecutive_below >= c.off_dwell,
                                "deactivated after only {consecutive_below} below-threshold samples"
                            );
                            consecutive_below = 0;
                        }
                    } else {
                        consecutive_below = 0;
                    }
                }
                prev_mode = mode;
            }
        }
    }
}
