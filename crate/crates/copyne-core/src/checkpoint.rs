//! Binary checkpoint format.
//!
//! Layout: magic `CPNE`, format version (u16 LE), a length-prefixed (u32 LE)
//! flat key=value config block describing mode, architecture, and
//! vocabulary, then one record per tensor until end of file: name length
//! (u16 LE), UTF-8 name, rank (u8), each dim (u32 LE), then the values as
//! little-endian f64. Tensors are written in parameter-construction order,
//! so save(load(x)) is byte-identical to x.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Mode, Model, ModelConfig};
use crate::rng::StreamRng;
use crate::vocab::Vocab;

const MAGIC: &[u8; 4] = b"CPNE";
const VERSION: u16 = 1;

fn config_block(model: &Model) -> String {
    let c = &model.config;
    let mut kv = BTreeMap::new();
    kv.insert("mode", model.mode.as_str().to_string());
    kv.insert("d_model", c.d_model.to_string());
    kv.insert("n_heads", c.n_heads.to_string());
    kv.insert("n_enc_layers", c.n_enc_layers.to_string());
    kv.insert("n_dec_layers", c.n_dec_layers.to_string());
    kv.insert("d_attn", c.d_attn.to_string());
    kv.insert("ne_hidden", c.ne_hidden.to_string());
    kv.insert("ne_lstm_layers", c.ne_lstm_layers.to_string());
    kv.insert("frame_dim", c.frame_dim.to_string());
    kv.insert("max_frames", c.max_frames.to_string());
    kv.insert("max_tokens", c.max_tokens.to_string());
    kv.insert("positional", c.positional.to_string());
    kv.insert("vocab", model.vocab.chars().iter().collect());
    let mut s = String::new();
    for (k, v) in kv {
        s.push_str(k);
        s.push('=');
        s.push_str(&v);
        s.push('\n');
    }
    s
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let config = config_block(model);
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(config.as_bytes());
    for (name, tensor) in model.params.iter() {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path: path.display().to_string() };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", r.path)));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("{}: unsupported version {version}", r.path)));
    }
    let config_len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
    let config_text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|_| Error::Checkpoint(format!("{}: config block is not UTF-8", r.path)))?
        .to_string();

    let mut kv = BTreeMap::new();
    for line in config_text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("{}: bad config line `{line}`", r.path)))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<&String> {
        kv.get(k).ok_or_else(|| Error::Checkpoint(format!("missing config key `{k}`")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad numeric config key `{k}`")))
    };
    let config = ModelConfig {
        d_model: num("d_model")?,
        n_heads: num("n_heads")?,
        n_enc_layers: num("n_enc_layers")?,
        n_dec_layers: num("n_dec_layers")?,
        d_attn: num("d_attn")?,
        ne_hidden: num("ne_hidden")?,
        ne_lstm_layers: num("ne_lstm_layers")?,
        frame_dim: num("frame_dim")?,
        max_frames: num("max_frames")?,
        max_tokens: num("max_tokens")?,
        positional: get("positional")? == "true",
    };
    let mode = Mode::parse(get("mode")?)?;
    let vocab = Vocab::new(get("vocab")?.chars().collect())?;

    // Build the canonical parameter layout, then fill values from the file.
    let mut model = Model::new(config, vocab, mode, &StreamRng::new(0))?;
    let mut filled = vec![false; model.params.len()];
    while !r.done() {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint(format!("{}: tensor name is not UTF-8", r.path)))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data: Vec<f64> =
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let idx = model
            .params
            .index_of(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}` in checkpoint")))?;
        if model.params.value(idx).shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}`: checkpoint shape {:?} does not match expected {:?}",
                shape,
                model.params.value(idx).shape()
            )));
        }
        *model.params.value_mut(idx) = Tensor::new(shape, data)?;
        filled[idx] = true;
    }
    if let Some(missing) = filled.iter().position(|&f| !f) {
        return Err(Error::Checkpoint(format!(
            "checkpoint is missing tensor `{}`",
            model.params.name(missing)
        )));
    }
    Ok(model)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated at byte {} (wanted {n} more, {} available)",
                self.path,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(mode: Mode) -> Model {
        let config = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_attn: 8,
            ne_hidden: 8,
            ne_lstm_layers: 1,
            frame_dim: 4,
            max_frames: 32,
            max_tokens: 16,
            positional: true,
        };
        let vocab = Vocab::new("abc".chars().collect()).unwrap();
        Model::new(config, vocab, mode, &StreamRng::new(9)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for mode in [Mode::Baseline, Mode::CopyNe] {
            let m = model(mode);
            let dir = tempfile::tempdir().unwrap();
            let p1 = dir.path().join("a.cpne");
            let p2 = dir.path().join("b.cpne");
            save(&p1, &m).unwrap();
            let loaded = load(&p1).unwrap();
            assert_eq!(loaded.mode, m.mode);
            assert_eq!(loaded.config, m.config);
            assert_eq!(loaded.vocab, m.vocab);
            save(&p2, &loaded).unwrap();
            assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        }
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let m = model(Mode::Baseline);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.cpne");
        save(&p, &m).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, bytes).unwrap();
        let err = load(&p).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.cpne");
        fs::write(&p, b"NOPE$$$$").unwrap();
        assert!(load(&p).is_err());
    }
}
