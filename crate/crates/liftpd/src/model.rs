//! Encoder, reconstruction head, and classifier head, plus bit-exact
//! checkpoint serialization.
//!
//! The encoder is a stack of conv blocks (valid 1D cross-correlation → relu
//! → max-pool); the reconstruction head maps the flattened embedding back to
//! the full window in one affine layer; the classifier head is a two-layer
//! MLP producing binary logits.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape, Tensor};

const CHECKPOINT_MAGIC: &[u8; 8] = b"LIFTPD01";

/// Conv block: output channels and kernel size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockCfg {
    pub out_channels: usize,
    pub kernel_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub window_len: usize,
    pub in_channels: usize,
    pub blocks: Vec<ConvBlockCfg>,
    pub pool_width: usize,
    pub mlp_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            window_len: 128,
            in_channels: 3,
            blocks: vec![
                ConvBlockCfg {
                    out_channels: 16,
                    kernel_size: 7,
                },
                ConvBlockCfg {
                    out_channels: 32,
                    kernel_size: 5,
                },
                ConvBlockCfg {
                    out_channels: 64,
                    kernel_size: 3,
                },
            ],
            pool_width: 2,
            mlp_hidden: 128,
        }
    }
}

impl EncoderConfig {
    /// Sequence length after each block's valid conv and floor-halving pool.
    pub fn final_length(&self) -> Result<usize> {
        let mut len = self.window_len;
        for b in &self.blocks {
            if b.kernel_size > len {
                return Err(Error::Config(format!(
                    "kernel size {} exceeds length {len}",
                    b.kernel_size
                )));
            }
            len -= b.kernel_size - 1;
            len /= self.pool_width;
            if len < 1 {
                return Err(Error::Config(format!(
                    "window_len {} underflows the conv/pool stack",
                    self.window_len
                )));
            }
        }
        Ok(len)
    }

    pub fn embedding_dim(&self) -> Result<usize> {
        let last = self
            .blocks
            .last()
            .ok_or_else(|| Error::Config("encoder needs at least one block".into()))?;
        Ok(last.out_channels * self.final_length()?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len < 2 {
            return Err(Error::Config("window_len must be ≥ 2".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be ≥ 1".into()));
        }
        if self.pool_width < 2 {
            return Err(Error::Config("pool_width must be ≥ 2".into()));
        }
        if self.mlp_hidden < 1 {
            return Err(Error::Config("mlp_hidden must be ≥ 1".into()));
        }
        self.embedding_dim()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub kernels: Tensor,
    pub bias: Tensor,
}

/// Encoder + reconstruction head + classifier head. A built model is
/// immutable for inference; training mutates a private copy.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: EncoderConfig,
    pub blocks: Vec<ConvParams>,
    pub recon: AffineParams,
    pub fc1: AffineParams,
    pub fc2: AffineParams,
}

/// Reconstructed signal: `[batch, window_len, channels]`, matching the input
/// window shape.
pub struct ReconstructionOutput {
    pub h: Tensor,
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape/data constructed together")
}

/// Initialize all parameters from a seeded generator: He-style uniform
/// fan-in scaling for weights, zeros for biases. Same seed, same bits.
pub fn build_model(cfg: &EncoderConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::with_capacity(cfg.blocks.len());
    let mut in_ch = cfg.in_channels;
    for b in &cfg.blocks {
        let fan_in = in_ch * b.kernel_size;
        blocks.push(ConvParams {
            kernels: he_uniform(
                &mut rng,
                vec![b.out_channels, in_ch, b.kernel_size],
                fan_in,
            ),
            bias: Tensor::zeros(vec![b.out_channels]),
        });
        in_ch = b.out_channels;
    }
    let embed = cfg.embedding_dim()?;
    let out_dim = cfg.window_len * cfg.in_channels;
    let recon = AffineParams {
        weight: he_uniform(&mut rng, vec![out_dim, embed], embed),
        bias: Tensor::zeros(vec![out_dim]),
    };
    let fc1 = AffineParams {
        weight: he_uniform(&mut rng, vec![cfg.mlp_hidden, embed], embed),
        bias: Tensor::zeros(vec![cfg.mlp_hidden]),
    };
    let fc2 = AffineParams {
        weight: he_uniform(&mut rng, vec![2, cfg.mlp_hidden], cfg.mlp_hidden),
        bias: Tensor::zeros(vec![2]),
    };
    Ok(Model {
        cfg: cfg.clone(),
        blocks,
        recon,
        fc1,
        fc2,
    })
}

/// Parameter node ids for one staged forward/backward pass.
pub struct ModelNodes {
    pub blocks: Vec<(NodeId, NodeId)>,
    pub recon: (NodeId, NodeId),
    pub fc1: (NodeId, NodeId),
    pub fc2: (NodeId, NodeId),
}

impl Model {
    /// Canonical (name, tensor) list; checkpoint manifest order.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("conv{i}.kernels"), &b.kernels));
            out.push((format!("conv{i}.bias"), &b.bias));
        }
        out.push(("recon.weight".into(), &self.recon.weight));
        out.push(("recon.bias".into(), &self.recon.bias));
        out.push(("fc1.weight".into(), &self.fc1.weight));
        out.push(("fc1.bias".into(), &self.fc1.bias));
        out.push(("fc2.weight".into(), &self.fc2.weight));
        out.push(("fc2.bias".into(), &self.fc2.bias));
        out
    }

    /// Encoder parameter bytes in manifest order; the frozen-contract check.
    pub fn encoder_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend_from_slice(&b.kernels.to_le_bytes());
            out.extend_from_slice(&b.bias.to_le_bytes());
        }
        out
    }

    /// Register every parameter as a leaf on `tape`.
    pub fn stage(&self, tape: &mut Tape) -> ModelNodes {
        ModelNodes {
            blocks: self
                .blocks
                .iter()
                .map(|b| (tape.leaf(b.kernels.clone()), tape.leaf(b.bias.clone())))
                .collect(),
            recon: (
                tape.leaf(self.recon.weight.clone()),
                tape.leaf(self.recon.bias.clone()),
            ),
            fc1: (
                tape.leaf(self.fc1.weight.clone()),
                tape.leaf(self.fc1.bias.clone()),
            ),
            fc2: (
                tape.leaf(self.fc2.weight.clone()),
                tape.leaf(self.fc2.bias.clone()),
            ),
        }
    }

    /// Conv blocks then flatten: `[batch, in_ch, window_len] → [batch, embed]`.
    pub fn encode(&self, tape: &mut Tape, nodes: &ModelNodes, input: NodeId) -> Result<NodeId> {
        let (batch, ch, len) = tape.value(input).dims3()?;
        if ch != self.cfg.in_channels || len != self.cfg.window_len {
            return Err(Error::Shape(format!(
                "encoder expects [*, {}, {}], got [{batch}, {ch}, {len}]",
                self.cfg.in_channels, self.cfg.window_len
            )));
        }
        let mut x = input;
        for (kernels, bias) in &nodes.blocks {
            x = tape.conv1d(x, *kernels, *bias)?;
            x = tape.relu(x)?;
            x = tape.max_pool1d(x, self.cfg.pool_width)?;
        }
        let embed = self.cfg.embedding_dim()?;
        tape.reshape(x, vec![batch, embed])
    }

    /// Encoder → reconstruction head → `[batch, window_len, channels]`.
    pub fn reconstruct(&self, tape: &mut Tape, nodes: &ModelNodes, input: NodeId) -> Result<NodeId> {
        let batch = tape.value(input).shape()[0];
        let z = self.encode(tape, nodes, input)?;
        let flat = tape.affine(z, nodes.recon.0, nodes.recon.1)?;
        tape.reshape(flat, vec![batch, self.cfg.window_len, self.cfg.in_channels])
    }

    /// Encoder → MLP head → logits `[batch, 2]`.
    pub fn classify(&self, tape: &mut Tape, nodes: &ModelNodes, input: NodeId) -> Result<NodeId> {
        let z = self.encode(tape, nodes, input)?;
        let h = tape.affine(z, nodes.fc1.0, nodes.fc1.1)?;
        let h = tape.relu(h)?;
        tape.affine(h, nodes.fc2.0, nodes.fc2.1)
    }
}

/// Reconstruct masked windows `[batch, channels, window_len]`.
pub fn forward_reconstruct(model: &Model, masked_windows: &Tensor) -> Result<ReconstructionOutput> {
    let mut tape = Tape::new();
    let nodes = model.stage(&mut tape);
    let input = tape.leaf(masked_windows.clone());
    let out = model.reconstruct(&mut tape, &nodes, input)?;
    Ok(ReconstructionOutput {
        h: tape.value(out).clone(),
    })
}

/// Classify windows `[batch, channels, window_len]` into logits `[batch, 2]`.
pub fn forward_classify(model: &Model, windows: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let nodes = model.stage(&mut tape);
    let input = tape.leaf(windows.clone());
    let out = model.classify(&mut tape, &nodes, input)?;
    Ok(tape.value(out).clone())
}

// ── Checkpoint format ────────────────────────────────────────────────────────
//
// magic "LIFTPD01" | u64 LE header length | header JSON | payload | sha256.
// The header carries the config and a manifest of (name, shape, byte offset,
// count) entries; the payload is the little-endian f64 arrays in manifest
// order; the trailing 32 bytes are the SHA-256 of the payload.

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    config: EncoderConfig,
    manifest: Vec<ManifestEntry>,
}

pub fn checkpoint_bytes(model: &Model) -> Vec<u8> {
    let params = model.parameters();
    let mut manifest = Vec::with_capacity(params.len());
    let mut payload = Vec::new();
    for (name, tensor) in &params {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset: payload.len(),
            count: tensor.len(),
        });
        payload.extend_from_slice(&tensor.to_le_bytes());
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        config: model.cfg.clone(),
        manifest,
    })
    .expect("header serialization cannot fail");
    let digest = Sha256::digest(&payload);

    let mut out = Vec::with_capacity(8 + 8 + header.len() + payload.len() + 32);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&digest);
    out
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&checkpoint_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 16 {
        return Err(Error::Checkpoint("file too small".into()));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16 + header_len;
    if bytes.len() < payload_start + 32 {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;

    let mut expected_offset = 0usize;
    for entry in &header.manifest {
        if entry.offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "manifest offsets not contiguous at {}",
                entry.name
            )));
        }
        let n: usize = entry.shape.iter().product();
        if n != entry.count {
            return Err(Error::Checkpoint(format!(
                "{}: shape {:?} vs count {}",
                entry.name, entry.shape, entry.count
            )));
        }
        expected_offset += entry.count * 8;
    }
    let payload_len = expected_offset;
    if bytes.len() != payload_start + payload_len + 32 {
        return Err(Error::Checkpoint(format!(
            "expected {} bytes, got {}",
            payload_start + payload_len + 32,
            bytes.len()
        )));
    }
    let payload = &bytes[payload_start..payload_start + payload_len];
    let digest = Sha256::digest(payload);
    if digest.as_slice() != &bytes[payload_start + payload_len..] {
        return Err(Error::Checkpoint("payload digest mismatch".into()));
    }

    let mut tensors = Vec::with_capacity(header.manifest.len());
    for entry in &header.manifest {
        let raw = &payload[entry.offset..entry.offset + entry.count * 8];
        tensors.push((
            entry.name.clone(),
            Tensor::from_le_bytes(entry.shape.clone(), raw)?,
        ));
    }
    assemble_model(header.config, tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    load_checkpoint_bytes(&fs::read(path)?)
}

fn assemble_model(cfg: EncoderConfig, tensors: Vec<(String, Tensor)>) -> Result<Model> {
    cfg.validate()
        .map_err(|e| Error::Checkpoint(format!("invalid config: {e}")))?;
    let reference = build_model(&cfg, 0)?;
    let expected: Vec<(String, &Tensor)> = reference.parameters();
    if tensors.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "manifest has {} entries, config implies {}",
            tensors.len(),
            expected.len()
        )));
    }
    let mut map = std::collections::BTreeMap::new();
    for (name, t) in tensors {
        map.insert(name, t);
    }
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = map
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?} does not match config ({shape:?})",
                t.shape()
            )));
        }
        Ok(t)
    };

    let mut blocks = Vec::with_capacity(cfg.blocks.len());
    for (i, ref_block) in reference.blocks.iter().enumerate() {
        blocks.push(ConvParams {
            kernels: take(&format!("conv{i}.kernels"), ref_block.kernels.shape())?,
            bias: take(&format!("conv{i}.bias"), ref_block.bias.shape())?,
        });
    }
    let model = Model {
        blocks,
        recon: AffineParams {
            weight: take("recon.weight", reference.recon.weight.shape())?,
            bias: take("recon.bias", reference.recon.bias.shape())?,
        },
        fc1: AffineParams {
            weight: take("fc1.weight", reference.fc1.weight.shape())?,
            bias: take("fc1.bias", reference.fc1.bias.shape())?,
        },
        fc2: AffineParams {
            weight: take("fc2.weight", reference.fc2.weight.shape())?,
            bias: take("fc2.bias", reference.fc2.bias.shape())?,
        },
        cfg,
    };
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shape_recurrence() {
        // 128 →(k7) 122 →pool 61 →(k5) 57 →pool 28 →(k3) 26 →pool 13
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.final_length().unwrap(), 13);
        assert_eq!(cfg.embedding_dim().unwrap(), 64 * 13);
    }

    #[test]
    fn underflowing_window_rejected() {
        let cfg = EncoderConfig {
            window_len: 8,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn same_seed_same_bits() {
        let cfg = EncoderConfig::default();
        let a = build_model(&cfg, 42).unwrap();
        let b = build_model(&cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = build_model(&cfg, 43).unwrap();
        assert_ne!(a, c);
    }

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            window_len: 16,
            in_channels: 3,
            blocks: vec![
                ConvBlockCfg {
                    out_channels: 4,
                    kernel_size: 3,
                },
                ConvBlockCfg {
                    out_channels: 6,
                    kernel_size: 3,
                },
            ],
            pool_width: 2,
            mlp_hidden: 8,
        }
    }

    fn batch(cfg: &EncoderConfig, n: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * cfg.in_channels * cfg.window_len;
        Tensor::new(
            vec![n, cfg.in_channels, cfg.window_len],
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn reconstruction_shape_contract() {
        let cfg = tiny_cfg();
        let model = build_model(&cfg, 1).unwrap();
        let x = batch(&cfg, 4, 9);
        let out = forward_reconstruct(&model, &x).unwrap();
        assert_eq!(out.h.shape(), &[4, 16, 3]);
    }

    #[test]
    fn zeroed_recon_head_broadcasts_bias() {
        let cfg = tiny_cfg();
        let mut model = build_model(&cfg, 1).unwrap();
        model.recon.weight = Tensor::zeros(model.recon.weight.shape().to_vec());
        let mut bias = vec![0.0; model.recon.bias.len()];
        for (i, b) in bias.iter_mut().enumerate() {
            *b = i as f64;
        }
        model.recon.bias = Tensor::new(model.recon.bias.shape().to_vec(), bias.clone()).unwrap();
        let out = forward_reconstruct(&model, &batch(&cfg, 2, 3)).unwrap();
        assert_eq!(&out.h.data()[..bias.len()], bias.as_slice());
        assert_eq!(&out.h.data()[bias.len()..], bias.as_slice());
    }

    #[test]
    fn classify_shape_and_softmax_rows() {
        let cfg = tiny_cfg();
        let model = build_model(&cfg, 5).unwrap();
        let logits = forward_classify(&model, &batch(&cfg, 3, 4)).unwrap();
        assert_eq!(logits.shape(), &[3, 2]);
        for row in logits.data().chunks(2) {
            let m = row[0].max(row[1]);
            let p0 = (row[0] - m).exp();
            let p1 = (row[1] - m).exp();
            let z = p0 + p1;
            assert!((p0 / z + p1 / z - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn classify_is_batch_composition_invariant() {
        let cfg = tiny_cfg();
        let model = build_model(&cfg, 5).unwrap();
        let x = batch(&cfg, 5, 21);
        let all = forward_classify(&model, &x).unwrap();
        for i in 0..5 {
            let one = Tensor::new(
                vec![1, cfg.in_channels, cfg.window_len],
                x.data()[i * 48..(i + 1) * 48].to_vec(),
            )
            .unwrap();
            let solo = forward_classify(&model, &one).unwrap();
            assert_eq!(solo.data(), &all.data()[i * 2..(i + 1) * 2]);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let model = build_model(&tiny_cfg(), 77).unwrap();
        let bytes = checkpoint_bytes(&model);
        let back = load_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let model = build_model(&tiny_cfg(), 77).unwrap();
        let bytes = checkpoint_bytes(&model);

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            load_checkpoint_bytes(&bad_magic),
            Err(Error::Checkpoint(_))
        ));

        let truncated = &bytes[..bytes.len() - 40];
        assert!(matches!(
            load_checkpoint_bytes(truncated),
            Err(Error::Checkpoint(_))
        ));

        let mut flipped = bytes.clone();
        let mid = bytes.len() - 40; // inside the payload, before the digest
        flipped[mid] ^= 0xFF;
        assert!(matches!(
            load_checkpoint_bytes(&flipped),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = build_model(&tiny_cfg(), 3).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(model, back);
    }
}
