//! Versioned binary checkpoints and transfer initialization.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "CQARNNCK"
//! version      u32
//! config       u32 length + UTF-8 `key=value` lines (architecture echo)
//! vocabulary   u32 count, then per token u32 length + UTF-8 bytes
//! tensors      u32 count, then per tensor:
//!                u16 name length + name, u64 entry count, entries as f64
//! ```
//!
//! Dimensions live in the config echo; each tensor's entry count must match
//! the architecture rebuilt from it.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::numerics::{ParamSet, Rng};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CQARNNCK";

/// A trained model together with the vocabulary its embedding rows index.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocabulary,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());

        let config: String = self
            .model
            .config
            .to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        write_bytes(&mut out, config.as_bytes());

        out.extend_from_slice(&(self.vocab.len() as u32).to_le_bytes());
        for t in self.vocab.tokens() {
            write_bytes(&mut out, t.as_bytes());
        }

        let tensors = self.model.params.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, data) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, offset: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(r.corrupt(0, "not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }

        let config_start = r.offset;
        let config_text = r.string()?;
        let mut config = ModelConfig::default();
        for line in config_text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| r.corrupt(config_start, &format!("bad config line {line:?}")))?;
            match config.apply(k, v) {
                Ok(true) => {}
                Ok(false) => return Err(r.corrupt(config_start, &format!("unknown config key {k:?}"))),
                Err(e) => return Err(r.corrupt(config_start, &e.to_string())),
            }
        }
        config
            .validate()
            .map_err(|e| r.corrupt(config_start, &e.to_string()))?;

        let vocab_start = r.offset;
        let count = r.u32()? as usize;
        let mut vocab = Vocabulary::default();
        for i in 0..count {
            let token = r.string()?;
            if i == 0 {
                if token != crate::data::UNK {
                    return Err(r.corrupt(vocab_start, "vocabulary does not start with the unknown token"));
                }
                continue;
            }
            if vocab.insert(&token) != i {
                return Err(r.corrupt(vocab_start, &format!("duplicate vocabulary token {token:?}")));
            }
        }

        let mut params = ModelParams::zeros(&config);
        let tensors_start = r.offset;
        let count = r.u32()? as usize;
        let expected: Vec<(String, usize)> = params.tensors().into_iter().map(|(n, t)| (n, t.len())).collect();
        if count != expected.len() {
            return Err(r.corrupt(
                tensors_start,
                &format!("architecture has {} tensors, file has {count}", expected.len()),
            ));
        }
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(count);
        for (want_name, want_len) in &expected {
            let at = r.offset;
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.corrupt(at, "tensor name is not UTF-8"))?;
            if &name != want_name {
                return Err(r.corrupt(at, &format!("expected tensor {want_name}, found {name}")));
            }
            let n = r.u64()? as usize;
            if n != *want_len {
                return Err(r.corrupt(at, &format!("tensor {name} has {n} entries, architecture needs {want_len}")));
            }
            let raw = r.take(n.checked_mul(8).ok_or_else(|| r.corrupt(at, "tensor too large"))?)?;
            values.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect());
        }
        if r.offset != bytes.len() {
            return Err(r.corrupt(r.offset, "trailing bytes after last tensor"));
        }
        if vocab.len() != config.vocab_size {
            return Err(r.corrupt(
                vocab_start,
                &format!("vocabulary has {} tokens, config says {}", vocab.len(), config.vocab_size),
            ));
        }
        for ((_, dst), src) in params.tensors_mut().into_iter().zip(values) {
            dst.copy_from_slice(&src);
        }
        Ok(Checkpoint {
            model: Model { config, params },
            vocab,
        })
    }
}

fn write_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, offset: usize, message: &str) -> Error {
        Error::Checkpoint {
            offset: offset as u64,
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .offset
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.corrupt(self.offset, "unexpected end of file"))?;
        let s = &self.bytes[self.offset..end];
        self.offset = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let at = self.offset;
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.corrupt(at, "string is not UTF-8"))
    }
}

/// Writes atomically: a temporary sibling file is renamed over `path`.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&checkpoint.to_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

fn is_softmax(name: &str) -> bool {
    name.starts_with("softmax.")
}

/// Initializes a model for `target` from a pretrained checkpoint.
///
/// Every tensor except the softmax output layer(s) is copied; `softmax.*`
/// tensors are drawn fresh, uniform in ±`init_scale`, from `rng`.
pub fn transfer_init(pretrained: &Checkpoint, target: &ModelConfig, rng: &mut Rng) -> Result<ModelParams> {
    target.validate()?;
    let mut params = ModelParams::zeros(target);
    let source = pretrained.model.params.tensors();

    let mut mismatched = Vec::new();
    for (name, dst) in params.tensors() {
        if is_softmax(&name) {
            continue;
        }
        match source.iter().find(|(n, _)| *n == name) {
            Some((_, src)) if src.len() == dst.len() => {}
            _ => mismatched.push(name),
        }
    }
    for (name, _) in &source {
        if !is_softmax(name) && !params.tensors().iter().any(|(n, _)| n == name) {
            mismatched.push(name.clone());
        }
    }
    let pc = &pretrained.model.config;
    if mismatched.is_empty() && (pc.embed_dim, pc.cell_count) != (target.embed_dim, target.cell_count) {
        mismatched.extend(params.tensors().into_iter().map(|(n, _)| n).filter(|n| !is_softmax(n)));
    }
    if !mismatched.is_empty() {
        return Err(Error::TransferMismatch(mismatched));
    }

    for (name, dst) in params.tensors_mut() {
        if is_softmax(&name) {
            dst.iter_mut().for_each(|x| *x = rng.uniform(-target.init_scale, target.init_scale));
        } else {
            let (_, src) = source.iter().find(|(n, _)| *n == name).expect("checked above");
            dst.copy_from_slice(src);
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Topology;

    fn small(topology: Topology) -> ModelConfig {
        ModelConfig {
            topology,
            vocab_size: 4,
            embed_dim: 3,
            cell_count: 4,
            attention_hidden: 2,
            mlp_hidden: 5,
            ..ModelConfig::default()
        }
    }

    fn checkpoint(topology: Topology, seed: u64) -> Checkpoint {
        let vocab = Vocabulary::from_tokens(["a", "b", "c"]);
        Checkpoint {
            model: Model::new(small(topology), &mut Rng::new(seed)).unwrap(),
            vocab,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        for t in Topology::ALL {
            let ck = checkpoint(t, 4);
            let path = dir.path().join(format!("{t}.ckpt"));
            save_checkpoint(&ck, &path).unwrap();
            let back = load_checkpoint(&path).unwrap();
            assert_eq!(back, ck);
            for ((_, a), (_, b)) in back.model.params.tensors().iter().zip(ck.model.params.tensors()) {
                assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn zero_model_loads_as_zeros() {
        let ck = Checkpoint {
            model: Model::zeros(small(Topology::Serialized)),
            vocab: Vocabulary::from_tokens(["a", "b", "c"]),
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert!(back.model.params.tensors().iter().all(|(_, t)| t.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn truncated_and_corrupt_files_are_rejected() {
        let bytes = checkpoint(Topology::Attention, 1).to_bytes();
        for cut in [0, 5, 12, 40, bytes.len() / 2, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Checkpoint { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint { offset: 0, .. })));

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = checkpoint(Topology::Parallel, 1).to_bytes();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Version { found: 7, expected: CHECKPOINT_VERSION })
        ));
    }

    #[test]
    fn self_transfer_changes_only_softmax() {
        for t in Topology::ALL {
            let ck = checkpoint(t, 8);
            let p = transfer_init(&ck, &ck.model.config, &mut Rng::new(99)).unwrap();
            for ((name, a), (_, b)) in p.tensors().iter().zip(ck.model.params.tensors()) {
                if name.starts_with("softmax.") {
                    assert_ne!(*a, b, "{name}");
                } else {
                    assert_eq!(*a, b, "{name}");
                }
            }
        }
    }

    #[test]
    fn transfer_rejects_other_cell_counts() {
        let ck = checkpoint(Topology::Attention, 2);
        let target = ModelConfig {
            cell_count: 6,
            ..ck.model.config.clone()
        };
        match transfer_init(&ck, &target, &mut Rng::new(1)) {
            Err(Error::TransferMismatch(names)) => {
                assert!(names.iter().any(|n| n.contains("lstm1.W_iX")));
                assert!(names.iter().all(|n| !n.starts_with("softmax.")));
            }
            other => panic!("{other:?}"),
        }
        let target = ModelConfig {
            topology: Topology::Serialized,
            ..ck.model.config.clone()
        };
        assert!(transfer_init(&ck, &target, &mut Rng::new(1)).is_err());
    }
}
