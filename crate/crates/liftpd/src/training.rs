//! Masked-reconstruction pretraining, label subsampling, frozen-encoder
//! fine-tuning, the jointly trained supervised baseline, and score
//! prediction.
//!
//! Determinism: every run derives its shuffles and masks from per-epoch
//! ChaCha streams of the run seed, and all kernels use fixed accumulation
//! order, so identical (seed, config, data) reproduce bitwise-identical
//! models and logs (wall-time fields aside).

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_model, EncoderConfig, Model};
use crate::numerics::{AdamHyper, AdamState, NodeId, Tape, Tensor};
use crate::windowing::{Window, WindowSet};

/// Masking scheme for the reconstruction pretext task: non-overlapping spans
/// covering roughly `ratio` of the window, applied to all channels jointly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub ratio: f64,
    pub span_len: usize,
    pub fill_value: f64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            ratio: 0.25,
            span_len: 16,
            fill_value: 0.0,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self, window_len: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::Config(format!(
                "mask ratio must be in [0,1), got {}",
                self.ratio
            )));
        }
        if self.span_len == 0 || self.span_len > window_len {
            return Err(Error::Config(format!(
                "span_len {} outside 1..={window_len}",
                self.span_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hyper: AdamHyper,
}

impl TrainOpts {
    pub fn new(epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            seed,
            hyper: AdamHyper::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub config_digest: String,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    fn new(seed: u64) -> Self {
        Self {
            seed,
            config_digest: String::new(),
            epochs: Vec::new(),
        }
    }

    /// `epoch,loss,ms` rows. The ms column is wall time and is excluded from
    /// byte-stability guarantees.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,loss,ms")?;
        for e in &self.epochs {
            writeln!(out, "{},{},{}", e.epoch, e.loss, e.wall_ms)?;
        }
        Ok(())
    }
}

/// Draw `round(ratio·window_len/span_len)` non-overlapping spans uniformly
/// at random; the placement is sampled uniformly over all valid layouts via
/// the stars-and-bars bijection. The mask covers all channels jointly.
pub fn make_mask(rng: &mut ChaCha8Rng, window_len: usize, spec: &MaskSpec) -> Result<Vec<bool>> {
    spec.validate(window_len)?;
    let k = (spec.ratio * window_len as f64 / spec.span_len as f64).round() as usize;
    let mut mask = vec![false; window_len];
    if k == 0 {
        return Ok(mask);
    }
    if k * spec.span_len > window_len {
        return Err(Error::Config(format!(
            "{k} spans of {} do not fit in a window of {window_len}",
            spec.span_len
        )));
    }
    let slack = window_len - k * spec.span_len;
    let mut picks: Vec<usize> = rand::seq::index::sample(rng, slack + k, k).into_vec();
    picks.sort_unstable();
    for (i, &r) in picks.iter().enumerate() {
        let start = (r - i) + i * spec.span_len;
        for m in mask.iter_mut().skip(start).take(spec.span_len) {
            *m = true;
        }
    }
    Ok(mask)
}

/// Set masked positions to the fill value on every channel. `values` is the
/// window's time-major `[t][c]` array.
pub fn apply_mask(values: &[f64], channels: usize, mask: &[bool], fill_value: f64) -> Vec<f64> {
    let mut out = values.to_vec();
    for (t, &masked) in mask.iter().enumerate() {
        if masked {
            for c in 0..channels {
                out[t * channels + c] = fill_value;
            }
        }
    }
    out
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// `[batch, channels, window_len]` model input from the given windows,
/// transposing each window's time-major storage.
fn input_tensor(ws: &WindowSet, idxs: &[usize]) -> Tensor {
    let (w, ch) = (ws.window_len, ws.channels);
    let mut data = vec![0.0; idxs.len() * ch * w];
    for (b, &i) in idxs.iter().enumerate() {
        let values = &ws.windows[i].values;
        for t in 0..w {
            for c in 0..ch {
                data[b * ch * w + c * w + t] = values[t * ch + c];
            }
        }
    }
    Tensor::new(vec![idxs.len(), ch, w], data).expect("sized above")
}

fn masked_batch(
    ws: &WindowSet,
    idxs: &[usize],
    masks: &[Vec<bool>],
    fill_value: f64,
) -> (Tensor, Tensor, Vec<bool>) {
    let (w, ch) = (ws.window_len, ws.channels);
    let b_n = idxs.len();
    let mut input = vec![0.0; b_n * ch * w];
    let mut target = vec![0.0; b_n * w * ch];
    let mut mask_flat = vec![false; b_n * w * ch];
    for (b, &i) in idxs.iter().enumerate() {
        let values = &ws.windows[i].values;
        let mask = &masks[b];
        for t in 0..w {
            for c in 0..ch {
                let v = values[t * ch + c];
                input[b * ch * w + c * w + t] = if mask[t] { fill_value } else { v };
                target[b * w * ch + t * ch + c] = v;
                mask_flat[b * w * ch + t * ch + c] = mask[t];
            }
        }
    }
    (
        Tensor::new(vec![b_n, ch, w], input).expect("sized above"),
        Tensor::new(vec![b_n, w, ch], target).expect("sized above"),
        mask_flat,
    )
}

fn check_window_shapes(ws: &WindowSet, cfg: &EncoderConfig) -> Result<()> {
    if ws.window_len != cfg.window_len || ws.channels != cfg.in_channels {
        return Err(Error::Shape(format!(
            "windows are {}×{}, encoder expects {}×{}",
            ws.window_len, ws.channels, cfg.window_len, cfg.in_channels
        )));
    }
    Ok(())
}

fn class_labels(ws: &WindowSet) -> Result<Vec<usize>> {
    let labels: Option<Vec<usize>> = ws
        .windows
        .iter()
        .map(|w| w.label.map(|l| l as usize))
        .collect();
    let labels = labels.ok_or_else(|| Error::SingleClass("window set is unlabeled".into()))?;
    let ones = labels.iter().filter(|&&l| l == 1).count();
    if ones == 0 || ones == labels.len() {
        return Err(Error::SingleClass(format!(
            "{} of {} windows labeled 1",
            ones,
            labels.len()
        )));
    }
    Ok(labels)
}

/// Masked-reconstruction pretraining of the encoder and reconstruction head.
/// Fresh masks are drawn per window per epoch.
pub fn pretrain(
    windows: &WindowSet,
    cfg: &EncoderConfig,
    spec: &MaskSpec,
    opts: &TrainOpts,
) -> Result<(Model, TrainLog)> {
    check_window_shapes(windows, cfg)?;
    spec.validate(cfg.window_len)?;
    let n = windows.len();
    if n == 0 {
        return Err(Error::Empty("no pretraining windows".into()));
    }
    if opts.batch_size < 1 || opts.batch_size > n {
        return Err(Error::Config(format!(
            "batch_size {} outside 1..={n}",
            opts.batch_size
        )));
    }
    let mut model = build_model(cfg, opts.seed)?;
    let n_blocks = model.blocks.len();
    let mut adam = {
        let params = trainable_pretrain(&model);
        AdamState::new(&params, opts.hyper)
    };
    let mut log = TrainLog::new(opts.seed);

    for epoch in 0..opts.epochs {
        let started = Instant::now();
        let mut rng = epoch_rng(opts.seed, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;

        for chunk in order.chunks(opts.batch_size) {
            let masks: Vec<Vec<bool>> = chunk
                .iter()
                .map(|_| make_mask(&mut rng, cfg.window_len, spec))
                .collect::<Result<_>>()?;
            let (input, target, mask_flat) =
                masked_batch(windows, chunk, &masks, spec.fill_value);

            let mut tape = Tape::new();
            let nodes = model.stage(&mut tape);
            let input_id = tape.leaf(input);
            let recon = model.reconstruct(&mut tape, &nodes, input_id)?;
            let loss = tape.masked_mse(recon, &target, &mask_flat)?;
            let grads = tape.backward(loss)?;

            let mut ids: Vec<NodeId> = Vec::with_capacity(2 * n_blocks + 2);
            for (k, b) in &nodes.blocks {
                ids.push(*k);
                ids.push(*b);
            }
            ids.push(nodes.recon.0);
            ids.push(nodes.recon.1);
            let grad_refs: Vec<&Tensor> = ids.iter().map(|&id| grads.get(id)).collect();
            let mut params = trainable_pretrain_mut(&mut model);
            adam.update(&mut params, &grad_refs)?;

            epoch_loss += tape.value(loss).item() * chunk.len() as f64;
        }

        log.epochs.push(EpochLog {
            epoch,
            loss: epoch_loss / n as f64,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    Ok((model, log))
}

fn trainable_pretrain(model: &Model) -> Vec<&Tensor> {
    let mut out = Vec::new();
    for b in &model.blocks {
        out.push(&b.kernels);
        out.push(&b.bias);
    }
    out.push(&model.recon.weight);
    out.push(&model.recon.bias);
    out
}

fn trainable_pretrain_mut(model: &mut Model) -> Vec<&mut Tensor> {
    let mut out = Vec::new();
    for b in &mut model.blocks {
        out.push(&mut b.kernels);
        out.push(&mut b.bias);
    }
    out.push(&mut model.recon.weight);
    out.push(&mut model.recon.bias);
    out
}

/// Stratified label subsampling: keep `ceil(fraction · count_c)` windows per
/// class, chosen by seeded shuffle, then restore the original order.
pub fn subsample_labels(ws: &WindowSet, fraction: f64, seed: u64) -> Result<WindowSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "label fraction must be in (0,1], got {fraction}"
        )));
    }
    class_labels(ws)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept: Vec<usize> = Vec::new();
    for class in [0u8, 1u8] {
        let mut idxs: Vec<usize> = ws
            .windows
            .iter()
            .enumerate()
            .filter(|(_, w)| w.label == Some(class))
            .map(|(i, _)| i)
            .collect();
        let keep = (fraction * idxs.len() as f64).ceil() as usize;
        idxs.shuffle(&mut rng);
        kept.extend(idxs.into_iter().take(keep));
    }
    kept.sort_unstable();
    let windows: Vec<Window> = kept.into_iter().map(|i| ws.windows[i].clone()).collect();
    if windows.is_empty() {
        return Err(Error::Empty("subsampling kept no windows".into()));
    }
    Ok(WindowSet {
        windows,
        window_len: ws.window_len,
        channels: ws.channels,
        provenance: ws.provenance.clone(),
    })
}

/// Frozen-encoder fine-tuning: embeddings are computed once through the
/// fixed encoder and only the MLP head trains under cross-entropy. Encoder
/// and reconstruction parameters are byte-identical on exit.
pub fn finetune(
    pretrained: &Model,
    labeled: &WindowSet,
    opts: &TrainOpts,
) -> Result<(Model, TrainLog)> {
    check_window_shapes(labeled, &pretrained.cfg)?;
    let labels = class_labels(labeled)?;
    let n = labeled.len();
    if opts.batch_size < 1 || opts.batch_size > n {
        return Err(Error::Config(format!(
            "batch_size {} outside 1..={n}",
            opts.batch_size
        )));
    }
    let embeddings = embed_windows(pretrained, labeled)?;
    let embed_dim = pretrained.cfg.embedding_dim()?;

    let mut model = pretrained.clone();
    let mut adam = AdamState::new(
        &[
            &model.fc1.weight,
            &model.fc1.bias,
            &model.fc2.weight,
            &model.fc2.bias,
        ],
        opts.hyper,
    );
    let mut log = TrainLog::new(opts.seed);

    for epoch in 0..opts.epochs {
        let started = Instant::now();
        let mut rng = epoch_rng(opts.seed, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;

        for chunk in order.chunks(opts.batch_size) {
            let mut batch = vec![0.0; chunk.len() * embed_dim];
            let mut batch_labels = Vec::with_capacity(chunk.len());
            for (b, &i) in chunk.iter().enumerate() {
                batch[b * embed_dim..(b + 1) * embed_dim]
                    .copy_from_slice(&embeddings[i * embed_dim..(i + 1) * embed_dim]);
                batch_labels.push(labels[i]);
            }
            let mut tape = Tape::new();
            let z = tape.leaf(Tensor::new(vec![chunk.len(), embed_dim], batch)?);
            let w1 = tape.leaf(model.fc1.weight.clone());
            let b1 = tape.leaf(model.fc1.bias.clone());
            let w2 = tape.leaf(model.fc2.weight.clone());
            let b2 = tape.leaf(model.fc2.bias.clone());
            let h = tape.affine(z, w1, b1)?;
            let h = tape.relu(h)?;
            let logits = tape.affine(h, w2, b2)?;
            let loss = tape.softmax_cross_entropy(logits, &batch_labels)?;
            let grads = tape.backward(loss)?;

            adam.update(
                &mut [
                    &mut model.fc1.weight,
                    &mut model.fc1.bias,
                    &mut model.fc2.weight,
                    &mut model.fc2.bias,
                ],
                &[grads.get(w1), grads.get(b1), grads.get(w2), grads.get(b2)],
            )?;
            epoch_loss += tape.value(loss).item() * chunk.len() as f64;
        }

        log.epochs.push(EpochLog {
            epoch,
            loss: epoch_loss / n as f64,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    Ok((model, log))
}

/// Supervised comparison: encoder and MLP head train jointly from random
/// initialization under cross-entropy.
pub fn supervised_baseline(
    labeled: &WindowSet,
    cfg: &EncoderConfig,
    opts: &TrainOpts,
) -> Result<(Model, TrainLog)> {
    check_window_shapes(labeled, cfg)?;
    let labels = class_labels(labeled)?;
    let n = labeled.len();
    if opts.batch_size < 1 || opts.batch_size > n {
        return Err(Error::Config(format!(
            "batch_size {} outside 1..={n}",
            opts.batch_size
        )));
    }
    let mut model = build_model(cfg, opts.seed)?;
    let n_blocks = model.blocks.len();
    let mut adam = {
        let params = trainable_supervised(&model);
        AdamState::new(&params, opts.hyper)
    };
    let mut log = TrainLog::new(opts.seed);

    for epoch in 0..opts.epochs {
        let started = Instant::now();
        let mut rng = epoch_rng(opts.seed, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;

        for chunk in order.chunks(opts.batch_size) {
            let input = input_tensor(labeled, chunk);
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();

            let mut tape = Tape::new();
            let nodes = model.stage(&mut tape);
            let input_id = tape.leaf(input);
            let logits = model.classify(&mut tape, &nodes, input_id)?;
            let loss = tape.softmax_cross_entropy(logits, &batch_labels)?;
            let grads = tape.backward(loss)?;

            let mut ids: Vec<NodeId> = Vec::with_capacity(2 * n_blocks + 4);
            for (k, b) in &nodes.blocks {
                ids.push(*k);
                ids.push(*b);
            }
            ids.extend([nodes.fc1.0, nodes.fc1.1, nodes.fc2.0, nodes.fc2.1]);
            let grad_refs: Vec<&Tensor> = ids.iter().map(|&id| grads.get(id)).collect();
            let mut params = trainable_supervised_mut(&mut model);
            adam.update(&mut params, &grad_refs)?;

            epoch_loss += tape.value(loss).item() * chunk.len() as f64;
        }

        log.epochs.push(EpochLog {
            epoch,
            loss: epoch_loss / n as f64,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    Ok((model, log))
}

fn trainable_supervised(model: &Model) -> Vec<&Tensor> {
    let mut out = Vec::new();
    for b in &model.blocks {
        out.push(&b.kernels);
        out.push(&b.bias);
    }
    out.extend([
        &model.fc1.weight,
        &model.fc1.bias,
        &model.fc2.weight,
        &model.fc2.bias,
    ]);
    out
}

fn trainable_supervised_mut(model: &mut Model) -> Vec<&mut Tensor> {
    let mut out: Vec<&mut Tensor> = Vec::new();
    for b in &mut model.blocks {
        out.push(&mut b.kernels);
        out.push(&mut b.bias);
    }
    out.push(&mut model.fc1.weight);
    out.push(&mut model.fc1.bias);
    out.push(&mut model.fc2.weight);
    out.push(&mut model.fc2.bias);
    out
}

const INFERENCE_BATCH: usize = 64;

/// Flattened embeddings `[N · embed_dim]` of every window.
fn embed_windows(model: &Model, ws: &WindowSet) -> Result<Vec<f64>> {
    let embed_dim = model.cfg.embedding_dim()?;
    let idxs: Vec<usize> = (0..ws.len()).collect();
    let mut out = vec![0.0; ws.len() * embed_dim];
    for chunk in idxs.chunks(INFERENCE_BATCH) {
        let input = input_tensor(ws, chunk);
        let mut tape = Tape::new();
        let nodes = model.stage(&mut tape);
        let input_id = tape.leaf(input);
        let z = model.encode(&mut tape, &nodes, input_id)?;
        let zd = tape.value(z).data();
        for (b, &i) in chunk.iter().enumerate() {
            out[i * embed_dim..(i + 1) * embed_dim]
                .copy_from_slice(&zd[b * embed_dim..(b + 1) * embed_dim]);
        }
    }
    Ok(out)
}

/// Softmax probability of class 1 per row of logits.
pub fn scores_from_logits(logits: &Tensor) -> Vec<f64> {
    logits
        .data()
        .chunks(2)
        .map(|row| {
            let m = row[0].max(row[1]);
            let e0 = (row[0] - m).exp();
            let e1 = (row[1] - m).exp();
            e1 / (e0 + e1)
        })
        .collect()
}

/// Class-1 probability per window, batched through the classifier.
pub fn predict_scores(model: &Model, ws: &WindowSet) -> Result<Vec<f64>> {
    check_window_shapes(ws, &model.cfg)?;
    let idxs: Vec<usize> = (0..ws.len()).collect();
    let mut scores = Vec::with_capacity(ws.len());
    for chunk in idxs.chunks(INFERENCE_BATCH) {
        let input = input_tensor(ws, chunk);
        let logits = crate::model::forward_classify(model, &input)?;
        scores.extend(scores_from_logits(&logits));
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConvBlockCfg;
    use crate::windowing::WindowSource;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            window_len: 16,
            in_channels: 3,
            blocks: vec![ConvBlockCfg {
                out_channels: 4,
                kernel_size: 3,
            }],
            pool_width: 2,
            mlp_hidden: 8,
        }
    }

    fn window_set(n: usize, window_len: usize, make: impl Fn(usize, usize) -> f64, labels: Option<&[u8]>) -> WindowSet {
        let windows = (0..n)
            .map(|i| Window {
                values: (0..window_len * 3).map(|j| make(i, j)).collect(),
                label: labels.map(|l| l[i]),
                source: WindowSource {
                    subject_id: format!("S{:02}", i % 3 + 1),
                    trial_id: "R01".into(),
                    start_index: i,
                },
            })
            .collect();
        WindowSet {
            windows,
            window_len,
            channels: 3,
            provenance: String::new(),
        }
    }

    #[test]
    fn mask_span_count_and_coverage() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = MaskSpec::default();
        let mask = make_mask(&mut rng, 128, &spec).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 32);
    }

    #[test]
    fn zero_ratio_masks_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = MaskSpec {
            ratio: 0.0,
            ..Default::default()
        };
        let mask = make_mask(&mut rng, 128, &spec).unwrap();
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn infeasible_span_layout_rejected() {
        // round(0.9·128/72) = 2 spans of 72 → 144 > 128
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = MaskSpec {
            ratio: 0.9,
            span_len: 72,
            fill_value: 0.0,
        };
        assert!(matches!(
            make_mask(&mut rng, 128, &spec),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mask_spans_never_overlap_and_fit() {
        let spec = MaskSpec {
            ratio: 0.4,
            span_len: 8,
            fill_value: 0.0,
        };
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = make_mask(&mut rng, 64, &spec).unwrap();
            assert_eq!(mask.len(), 64);
            // spans of `true` must each be a multiple of span_len long and
            // total exactly k·span_len
            let total = mask.iter().filter(|&&m| m).count();
            assert_eq!(total, 3 * 8); // k = round(0.4·64/8) = 3
        }
    }

    #[test]
    fn apply_mask_examples() {
        let values: Vec<f64> = (0..12).map(|i| i as f64).collect(); // 4 samples × 3 ch
        let unmasked = apply_mask(&values, 3, &[false; 4], 0.0);
        assert_eq!(unmasked, values);

        let all = apply_mask(&values, 3, &[true; 4], -1.0);
        assert!(all.iter().all(|&v| v == -1.0));

        let partial = apply_mask(&values, 3, &[true, false, false, true], 0.0);
        assert_eq!(&partial[3..9], &values[3..9]);
        assert_eq!(&partial[..3], &[0.0; 3]);
    }

    fn sinusoid_windows(n: usize, window_len: usize) -> WindowSet {
        window_set(
            n,
            window_len,
            |i, j| {
                let t = (j / 3) as f64;
                let c = (j % 3) as f64;
                ((t * 0.3 + i as f64 * 0.7 + c).sin()) * 0.8
            },
            None,
        )
    }

    #[test]
    fn pretrain_zero_epochs_is_initialization() {
        let cfg = tiny_cfg();
        let ws = sinusoid_windows(8, 16);
        let opts = TrainOpts::new(0, 4, 11);
        let (model, log) = pretrain(&ws, &cfg, &MaskSpec::default(), &opts).unwrap();
        assert_eq!(model, build_model(&cfg, 11).unwrap());
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn pretrain_is_deterministic_and_learns() {
        let cfg = tiny_cfg();
        let ws = sinusoid_windows(24, 16);
        let opts = TrainOpts::new(10, 8, 5);
        let spec = MaskSpec {
            ratio: 0.25,
            span_len: 4,
            fill_value: 0.0,
        };
        let (m1, log1) = pretrain(&ws, &cfg, &spec, &opts).unwrap();
        let (m2, log2) = pretrain(&ws, &cfg, &spec, &opts).unwrap();
        assert_eq!(m1, m2);
        let l1: Vec<f64> = log1.epochs.iter().map(|e| e.loss).collect();
        let l2: Vec<f64> = log2.epochs.iter().map(|e| e.loss).collect();
        assert_eq!(l1, l2);
        assert!(
            log1.epochs.last().unwrap().loss < log1.epochs[0].loss,
            "loss did not drop: {l1:?}"
        );
    }

    #[test]
    fn subsample_examples() {
        let labels: Vec<u8> = (0..100).map(|i| (i % 2) as u8).collect();
        let ws = window_set(100, 16, |i, j| (i * 31 + j) as f64, Some(&labels));

        let full = subsample_labels(&ws, 1.0, 9).unwrap();
        assert_eq!(full, ws);

        let sixty = subsample_labels(&ws, 0.6, 9).unwrap();
        let (n0, n1) = sixty.class_counts();
        assert_eq!((n0, n1), (30, 30));

        // 10 label-0 / 3 label-1, fraction 0.6 → 6 / 2
        let labels2: Vec<u8> = (0..13).map(|i| u8::from(i >= 10)).collect();
        let ws2 = window_set(13, 16, |i, j| (i + j) as f64, Some(&labels2));
        let (n0, n1) = subsample_labels(&ws2, 0.6, 1).unwrap().class_counts();
        assert_eq!((n0, n1), (6, 2));

        assert!(subsample_labels(&ws, 0.0, 1).is_err());
    }

    #[test]
    fn subsample_is_deterministic_and_ordered() {
        let labels: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let ws = window_set(40, 16, |i, j| (i * 7 + j) as f64, Some(&labels));
        let a = subsample_labels(&ws, 0.5, 3).unwrap();
        let b = subsample_labels(&ws, 0.5, 3).unwrap();
        assert_eq!(a, b);
        let starts: Vec<usize> = a.windows.iter().map(|w| w.source.start_index).collect();
        let mut sorted = starts.clone();
        sorted.sort_unstable();
        assert_eq!(starts, sorted);
    }

    fn separable_labeled(n: usize) -> WindowSet {
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        window_set(
            n,
            16,
            |i, j| {
                let sign = if i % 2 == 0 { -1.0 } else { 1.0 };
                sign * (1.0 + 0.05 * ((i * 13 + j) % 7) as f64)
            },
            Some(&labels),
        )
    }

    #[test]
    fn finetune_freezes_encoder_bytes() {
        let cfg = tiny_cfg();
        let ws = separable_labeled(20);
        let base = build_model(&cfg, 2).unwrap();
        let before = base.encoder_bytes();
        let recon_before = (base.recon.weight.clone(), base.recon.bias.clone());
        let (tuned, _) = finetune(&base, &ws, &TrainOpts::new(5, 4, 3)).unwrap();
        assert_eq!(tuned.encoder_bytes(), before);
        assert_eq!(tuned.recon.weight, recon_before.0);
        assert_eq!(tuned.recon.bias, recon_before.1);
        assert_ne!(tuned.fc1.weight, base.fc1.weight);
    }

    #[test]
    fn finetune_zero_epochs_keeps_head() {
        let cfg = tiny_cfg();
        let ws = separable_labeled(10);
        let base = build_model(&cfg, 2).unwrap();
        let (tuned, _) = finetune(&base, &ws, &TrainOpts::new(0, 4, 3)).unwrap();
        assert_eq!(tuned, base);
    }

    #[test]
    fn finetune_separates_separable_data() {
        let cfg = tiny_cfg();
        let ws = separable_labeled(30);
        let base = build_model(&cfg, 2).unwrap();
        let (tuned, _) = finetune(&base, &ws, &TrainOpts::new(50, 8, 3)).unwrap();
        let scores = predict_scores(&tuned, &ws).unwrap();
        let correct = scores
            .iter()
            .zip(&ws.windows)
            .filter(|(s, w)| (**s >= 0.5) == (w.label == Some(1)))
            .count();
        assert!(correct as f64 / ws.len() as f64 >= 0.99, "acc {correct}/30");
    }

    #[test]
    fn finetune_rejects_single_class() {
        let cfg = tiny_cfg();
        let labels = vec![1u8; 10];
        let ws = window_set(10, 16, |i, j| (i + j) as f64, Some(&labels));
        let base = build_model(&cfg, 2).unwrap();
        assert!(matches!(
            finetune(&base, &ws, &TrainOpts::new(1, 2, 3)),
            Err(Error::SingleClass(_))
        ));
    }

    #[test]
    fn baseline_is_deterministic() {
        let cfg = tiny_cfg();
        let ws = separable_labeled(20);
        let opts = TrainOpts::new(4, 4, 7);
        let (a, _) = supervised_baseline(&ws, &cfg, &opts).unwrap();
        let (b, _) = supervised_baseline(&ws, &cfg, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn baseline_loss_decreases_on_separable_data() {
        let cfg = tiny_cfg();
        let ws = separable_labeled(30);
        let mut improved = 0;
        for seed in 0..20 {
            let (_, log) = supervised_baseline(&ws, &cfg, &TrainOpts::new(8, 8, seed)).unwrap();
            if log.epochs.last().unwrap().loss < log.epochs[0].loss {
                improved += 1;
            }
        }
        assert!(improved >= 18, "improved in {improved}/20 seeds");
    }

    #[test]
    fn scores_are_probabilities_with_complement() {
        let cfg = tiny_cfg();
        let model = build_model(&cfg, 4).unwrap();
        let ws = sinusoid_windows(10, 16);
        let scores = predict_scores(&model, &ws).unwrap();
        assert!(scores.iter().all(|&s| (0.0..=1.0).contains(&s)));
    }

    #[test]
    fn zeroed_head_scores_half() {
        let cfg = tiny_cfg();
        let mut model = build_model(&cfg, 4).unwrap();
        model.fc2.weight = Tensor::zeros(model.fc2.weight.shape().to_vec());
        model.fc2.bias = Tensor::zeros(model.fc2.bias.shape().to_vec());
        let ws = sinusoid_windows(6, 16);
        let scores = predict_scores(&model, &ws).unwrap();
        assert!(scores.iter().all(|&s| s == 0.5));
    }

    #[test]
    fn masked_loss_ignores_unmasked_target() {
        // Zeroing the target at unmasked positions changes neither the loss
        // nor any gradient.
        let cfg = tiny_cfg();
        let model = build_model(&cfg, 6).unwrap();
        let ws = sinusoid_windows(4, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = MaskSpec {
            ratio: 0.25,
            span_len: 4,
            fill_value: 0.0,
        };
        let masks: Vec<Vec<bool>> = (0..4)
            .map(|_| make_mask(&mut rng, 16, &spec).unwrap())
            .collect();
        let idxs = [0, 1, 2, 3];
        let (input, target, mask_flat) = masked_batch(&ws, &idxs, &masks, 0.0);

        let run = |target: &Tensor| {
            let mut tape = Tape::new();
            let nodes = model.stage(&mut tape);
            let input_id = tape.leaf(input.clone());
            let recon = model.reconstruct(&mut tape, &nodes, input_id).unwrap();
            let loss = tape.masked_mse(recon, target, &mask_flat).unwrap();
            let grads = tape.backward(loss).unwrap();
            let mut flat = vec![tape.value(loss).item()];
            for (k, b) in &nodes.blocks {
                flat.extend_from_slice(grads.get(*k).data());
                flat.extend_from_slice(grads.get(*b).data());
            }
            flat.extend_from_slice(grads.get(nodes.recon.0).data());
            flat.extend_from_slice(grads.get(nodes.recon.1).data());
            flat
        };

        let mut zeroed = target.clone();
        for (i, &m) in mask_flat.iter().enumerate() {
            if !m {
                zeroed.data_mut()[i] = 0.0;
            }
        }
        assert_eq!(run(&target), run(&zeroed));
    }
}
