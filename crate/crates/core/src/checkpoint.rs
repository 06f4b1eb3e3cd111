//! Binary checkpoints: magic line, little-endian header length, JSON header,
//! then every tensor as little-endian `f32` in header order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sdacd_grad::{Adam, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{ModelState, Segment, TrainConfig};

pub const MAGIC: &[u8] = b"sdacd-ckpt-v1\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub segment: String,
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    /// Offset into the payload, in `f32` elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub t: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte seed, hex.
    pub seed: String,
    pub stream: u64,
    /// Decimal, since it exceeds 64 bits.
    pub word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: TrainConfig,
    pub config_hash: String,
    pub epoch: usize,
    pub step: u64,
    pub rng: RngState,
    pub entries: Vec<Entry>,
    pub optimizers: BTreeMap<String, OptimizerState>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

/// Writes parameters, optimizer moments, counters and the data RNG position.
/// Replay pools are not stored.
pub fn save(state: &ModelState, path: &Path, config_hash: &str) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<f32> = Vec::new();
    let mut optimizers = BTreeMap::new();
    let mut push = |entries: &mut Vec<Entry>, seg: Segment, name: &str, kind, t: &Tensor| {
        entries.push(Entry {
            segment: seg.name().to_string(),
            name: name.to_string(),
            kind,
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        payload.extend_from_slice(t.data());
    };
    for seg in Segment::ALL {
        let Some(params) = state.segment(seg) else { continue };
        for (name, t) in params.names().iter().zip(params.tensors()) {
            push(&mut entries, seg, name, EntryKind::Param, t);
        }
        if let Some(opt) = state.optimizer(seg) {
            for (name, slot) in params.names().iter().zip(&opt.moments) {
                if let Some((m, v)) = slot {
                    push(&mut entries, seg, name, EntryKind::AdamM, m);
                    push(&mut entries, seg, name, EntryKind::AdamV, v);
                }
            }
            optimizers.insert(
                seg.name().to_string(),
                OptimizerState {
                    t: opt.t,
                    lr: opt.lr,
                    beta1: opt.beta1,
                    beta2: opt.beta2,
                    eps: opt.eps,
                },
            );
        }
    }
    let header = CheckpointHeader {
        config: state.config.clone(),
        config_hash: config_hash.to_string(),
        epoch: state.epoch,
        step: state.step,
        rng: RngState {
            seed: hex(&state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        entries,
        optimizers,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut bytes = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 4 * payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_header(path: &Path) -> Result<(CheckpointHeader, Vec<f32>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
    let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("not a checkpoint (bad magic)"))?;
    if rest.len() < 8 {
        return Err(bad("truncated header"));
    }
    let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < len {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&rest[..len]).map_err(|e| bad(&format!("malformed header: {e}")))?;
    let body = &rest[len..];
    if body.len() % 4 != 0 {
        return Err(bad("payload is not a whole number of floats"));
    }
    let payload: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    for e in &header.entries {
        let n: usize = e.shape.iter().product();
        if e.offset + n > payload.len() {
            return Err(bad(&format!("entry `{}/{}` runs past the payload", e.segment, e.name)));
        }
    }
    Ok((header, payload))
}

/// Restores a model exactly as saved, ready to continue training.
pub fn load(path: &Path) -> Result<(ModelState, CheckpointHeader)> {
    let (header, payload) = read_header(path)?;
    let mut state = ModelState::new(&header.config)?;
    let tensor = |e: &Entry| {
        let n: usize = e.shape.iter().product();
        Tensor::new(&e.shape, payload[e.offset..e.offset + n].to_vec())
    };
    let mut by_segment: BTreeMap<&str, Vec<&Entry>> = BTreeMap::new();
    for e in &header.entries {
        let seg = Segment::from_name(&e.segment)
            .ok_or_else(|| Error::Checkpoint(format!("unknown segment `{}`", e.segment)))?;
        if state.segment(seg).is_none() {
            return Err(Error::Checkpoint(format!(
                "segment `{}` is stored but absent from the configured model",
                e.segment
            )));
        }
        by_segment.entry(seg.name()).or_default().push(e);
    }
    for seg in Segment::ALL {
        let Some(params) = state.segment_mut(seg) else { continue };
        let entries = by_segment.get(seg.name()).map(Vec::as_slice).unwrap_or_default();
        let find = |name: &str, kind| entries.iter().find(|e| e.name == name && e.kind == kind).map(|e| tensor(e));
        params.load_named(|name| find(name, EntryKind::Param))?;
        let names = params.names().to_vec();
        let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.shape().to_vec()).collect();
        let Some(o) = header.optimizers.get(seg.name()) else {
            return Err(Error::Checkpoint(format!("no optimizer state for `{}`", seg.name())));
        };
        let mut opt = Adam::new(o.lr, names.len());
        opt.t = o.t;
        opt.beta1 = o.beta1;
        opt.beta2 = o.beta2;
        opt.eps = o.eps;
        for (i, name) in names.iter().enumerate() {
            match (find(name, EntryKind::AdamM), find(name, EntryKind::AdamV)) {
                (Some(m), Some(v)) if m.shape() == shapes[i].as_slice() && v.shape() == shapes[i].as_slice() => {
                    opt.moments[i] = Some((m, v));
                }
                (None, None) => {}
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "inconsistent optimizer moments for `{}/{name}`",
                        seg.name()
                    )))
                }
            }
        }
        state.optimizers.insert(seg, opt);
    }
    let seed: [u8; 32] = unhex(&header.rng.seed)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Checkpoint("malformed rng seed".into()))?;
    let word_pos: u128 = header
        .rng
        .word_pos
        .parse()
        .map_err(|_| Error::Checkpoint("malformed rng position".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(word_pos);
    state.rng = rng;
    state.epoch = header.epoch;
    state.step = header.step;
    Ok((state, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Group;

    #[test]
    fn round_trip_restores_everything() {
        let cfg = TrainConfig {
            model: crate::trainer::ModelConfig {
                generator: crate::image_adaptation::GeneratorConfig {
                    width: 2,
                    res_blocks: 1,
                    identity_init: true,
                },
                image_discriminator: crate::image_adaptation::DiscriminatorConfig { width: 2 },
                backbone: crate::feature_adaptation::BackboneConfig {
                    width: 2,
                    discriminator_width: 2,
                },
            },
            ..Default::default()
        };
        let mut s = ModelState::new(&cfg).unwrap();
        let data = crate::data::synthesize_benchmark(&crate::data::SyntheticConfig {
            n_samples: 1,
            tile_size: 16,
            ..Default::default()
        })
        .unwrap();
        s.train_step(&data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save(&s, &p, "abc").unwrap();
        let (r, h) = load(&p).unwrap();
        assert_eq!(h.config_hash, "abc");
        assert_eq!(r.step(), 1);
        for g in s.groups() {
            assert_eq!(s.group_checksum(g), r.group_checksum(g), "{g}");
            assert_eq!(s.optimizer_checksum(g), r.optimizer_checksum(g), "{g}");
        }
        assert_eq!(r.groups().len(), Group::ALL.len());
        assert_eq!(s.rng, r.rng);
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        std::fs::write(&p, b"hello").unwrap();
        assert!(matches!(load(&p), Err(Error::Checkpoint(_))));
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&100u64.to_le_bytes());
        bytes.extend_from_slice(b"{}");
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load(&p), Err(Error::Checkpoint(_))));
    }
}
