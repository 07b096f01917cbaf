//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "RFMRCKPT"
//! version      u32      1
//! config_len   u32
//! config       config_len bytes of "key = value\n" lines
//! n_tensors    u32
//! per tensor:
//!   name_len   u32, name (UTF-8)
//!   ndim       u32, dims (u64 each)
//!   data       product(dims) × f32
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{param_shapes, Gpt, ModelConfig, Params};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"RFMRCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Name and shape of every tensor stored in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Vec<usize>)>,
}

impl Manifest {
    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

pub fn config_to_text(c: &ModelConfig) -> String {
    format!(
        "vocab_size = {}\nblock_size = {}\nd_model = {}\nn_blocks = {}\nn_heads = {}\ndropout_p = {}\n",
        c.vocab_size, c.block_size, c.d_model, c.n_blocks, c.n_heads, c.dropout_p
    )
}

pub fn config_from_text(text: &str) -> Result<ModelConfig> {
    let mut kv = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::CheckpointFormat(format!("bad config line {line:?}")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| {
        kv.get(k)
            .ok_or_else(|| Error::CheckpointFormat(format!("config is missing {k}")))
    };
    let int = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::CheckpointFormat(format!("config value for {k} is not an integer")))
    };
    let config = ModelConfig {
        vocab_size: int("vocab_size")?,
        block_size: int("block_size")?,
        d_model: int("d_model")?,
        n_blocks: int("n_blocks")?,
        n_heads: int("n_heads")?,
        dropout_p: get("dropout_p")?
            .parse()
            .map_err(|_| Error::CheckpointFormat("dropout_p is not a number".into()))?,
    };
    config
        .validate()
        .map_err(|e| Error::CheckpointFormat(e.to_string()))?;
    Ok(config)
}

pub fn to_bytes<F: Scalar>(model: &Gpt<F>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let cfg = config_to_text(&model.config);
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let entries = model.params.entries();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::CheckpointTruncated(what))?;
        if end > self.buf.len() {
            return Err(Error::CheckpointTruncated(what));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn read_header<'a>(r: &mut Reader<'a>) -> Result<ModelConfig> {
    let magic = r.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(Error::CheckpointFormat("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(len, "config")?)
        .map_err(|_| Error::CheckpointFormat("config is not UTF-8".into()))?;
    config_from_text(text)
}

fn read_tensor_header(r: &mut Reader<'_>) -> Result<(String, Vec<usize>)> {
    let nlen = r.u32("tensor name length")? as usize;
    let name = String::from_utf8(r.take(nlen, "tensor name")?.to_vec())
        .map_err(|_| Error::CheckpointFormat("tensor name is not UTF-8".into()))?;
    let ndim = r.u32("tensor rank")? as usize;
    if ndim > 8 {
        return Err(Error::CheckpointFormat(format!("tensor {name} has rank {ndim}")));
    }
    let shape = (0..ndim)
        .map(|_| r.u64("tensor shape").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok((name, shape))
}

pub fn from_bytes(buf: &[u8]) -> Result<Gpt<f32>> {
    let mut r = Reader { buf, pos: 0 };
    let config = read_header(&mut r)?;
    let count = r.u32("tensor count")? as usize;
    let expected = param_shapes(&config);
    let expected = expected.entries();
    if count != expected.len() {
        return Err(Error::CheckpointFormat(format!(
            "{count} tensors stored, config implies {}",
            expected.len()
        )));
    }
    let mut loaded = Vec::with_capacity(count);
    for (exp_name, exp_shape) in &expected {
        let (name, shape) = read_tensor_header(&mut r)?;
        if &name != exp_name {
            return Err(Error::CheckpointFormat(format!(
                "expected tensor {exp_name}, found {name}"
            )));
        }
        if &&shape != exp_shape {
            return Err(Error::CheckpointShape {
                name,
                found: shape,
                expected: exp_shape.to_vec(),
            });
        }
        let n: usize = shape.iter().product();
        let bytes = r.take(n * 4, "tensor data")?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        loaded.push(Tensor::new(&shape, data)?.with_requires_grad(true));
    }
    if r.pos != buf.len() {
        return Err(Error::CheckpointFormat(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    let mut it = loaded.into_iter();
    let params: std::result::Result<_, ()> = Params::try_build(config.n_blocks, |_| Ok(it.next().unwrap()));
    Gpt::from_params(config, params.expect("count checked"))
}

/// Reads names and shapes without loading tensor data.
pub fn manifest_from_bytes(buf: &[u8]) -> Result<Manifest> {
    let mut r = Reader { buf, pos: 0 };
    let config = read_header(&mut r)?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let (name, shape) = read_tensor_header(&mut r)?;
        let n: usize = shape.iter().product();
        r.take(n * 4, "tensor data")?;
        tensors.push((name, shape));
    }
    Ok(Manifest { config, tensors })
}

pub fn save_checkpoint<F: Scalar>(model: &Gpt<F>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Gpt<f32>> {
    let path = path.as_ref();
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    manifest_from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Mode;
    use crate::model::count_params;
    use crate::tokenizer::TokenId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 402,
            block_size: 16,
            d_model: 16,
            n_blocks: 2,
            n_heads: 2,
            dropout_p: 0.1,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let model = Gpt::<f32>::new(small(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, model.config);
        for ((_, a), (_, b)) in model.params.entries().iter().zip(back.params.entries()) {
            let ab: Vec<u32> = a.data().iter().map(|x| x.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        let toks = [TokenId(199), TokenId(203), TokenId(200)];
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            model.forward(&toks, Mode::Eval, &mut r).unwrap(),
            back.forward(&toks, Mode::Eval, &mut r).unwrap()
        );
    }

    #[test]
    fn default_manifest_matches_count() {
        let model = Gpt::<f32>::new(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let m = manifest_from_bytes(&to_bytes(&model)).unwrap();
        assert_eq!(m.total_params(), count_params(&ModelConfig::default()));
    }

    #[test]
    fn distinct_corruption_errors() {
        let model = Gpt::<f32>::new(small(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let good = to_bytes(&model);

        let mut bad_magic = good.clone();
        bad_magic[0] ^= 0xff;
        assert!(matches!(from_bytes(&bad_magic), Err(Error::CheckpointFormat(_))));

        let mut bad_version = good.clone();
        bad_version[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            from_bytes(&bad_version),
            Err(Error::CheckpointVersion { found: 7, expected: 1 })
        ));

        assert!(matches!(
            from_bytes(&good[..good.len() - 3]),
            Err(Error::CheckpointTruncated(_))
        ));

        // Config claims a wider model than the stored tensors.
        let mut cfg = small();
        cfg.d_model = 32;
        let text = config_to_text(&small());
        let wider = config_to_text(&cfg);
        assert_eq!(text.len(), wider.len());
        let mut shape_bad = good.clone();
        let start = 16;
        shape_bad[start..start + wider.len()].copy_from_slice(wider.as_bytes());
        assert!(matches!(from_bytes(&shape_bad), Err(Error::CheckpointShape { .. })));
    }
}
