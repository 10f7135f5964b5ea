//! Binary checkpoint container. All integers and floats little-endian.
//!
//! ```text
//! magic          5 bytes   "NNMF\x01"
//! version        u16       1
//! kind           u8        1 nnmf, 2 pmf, 3 biasedmf, 4 ntn
//! n_rows         u64
//! n_cols         u64
//! d              u64
//! d_prime        u64       0 unless nnmf
//! k              u64       0 unless nnmf
//! layer_count    u32
//! layer_dims     u64 * layer_count   nnmf: network widths; ntn: [2D, H, 1]
//! flags          u8        bit 0: logistic output
//! hidden_act     u8        0 identity, 1 sigmoid, 2 tanh
//! metadata_len   u32
//! metadata       UTF-8     run configuration and code version
//! block_count    u32
//! per block:
//!   name_len     u16
//!   name         UTF-8
//!   group        u8        0 network, 1 features
//!   ndim         u8
//!   dims         u64 * ndim
//!   data         f64 * prod(dims), row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::latent::Activation;
use crate::model::{Model, ModelKind, ParamGroup};
use crate::registry::{AnyModel, ModelConfig};

pub const MAGIC: &[u8; 5] = b"NNMF\x01";
pub const VERSION: u16 = 1;

/// A loaded checkpoint: the model and the metadata string saved with it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: AnyModel,
    pub metadata: String,
}

struct Header {
    kind: ModelKind,
    n_rows: usize,
    n_cols: usize,
    d: usize,
    d_prime: usize,
    k: usize,
    layer_dims: Vec<usize>,
    output_sigmoid: bool,
    hidden_act: u8,
}

fn header_of(model: &AnyModel) -> Header {
    let (d, d_prime, k, layer_dims, output_sigmoid, hidden_act) = match model {
        AnyModel::Nnmf(m) => {
            let dims = m.dims();
            let act = match m.net.hidden_activation {
                Activation::Identity => 0,
                Activation::Sigmoid => 1,
            };
            let out = m.net.output_activation == Activation::Sigmoid;
            (dims.d, dims.d_prime, dims.k, m.net.layer_dims.clone(), out, act)
        }
        AnyModel::Pmf(m) => (m.rank(), 0, 0, vec![], false, 0),
        AnyModel::BiasedMf(m) => (m.pmf.rank(), 0, 0, vec![], false, 0),
        AnyModel::Ntn(m) => (
            m.rank(),
            0,
            0,
            vec![2 * m.rank(), m.hidden(), 1],
            m.output_sigmoid,
            2,
        ),
    };
    Header {
        kind: model.kind(),
        n_rows: model.n_rows(),
        n_cols: model.n_cols(),
        d,
        d_prime,
        k,
        layer_dims,
        output_sigmoid,
        hidden_act,
    }
}

/// Serializes `model` with `metadata` into the checkpoint byte format.
pub fn to_bytes(model: &AnyModel, metadata: &str) -> Vec<u8> {
    let h = header_of(model);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(h.kind.tag());
    for x in [h.n_rows, h.n_cols, h.d, h.d_prime, h.k] {
        out.extend_from_slice(&(x as u64).to_le_bytes());
    }
    out.extend_from_slice(&(h.layer_dims.len() as u32).to_le_bytes());
    for x in &h.layer_dims {
        out.extend_from_slice(&(*x as u64).to_le_bytes());
    }
    out.push(u8::from(h.output_sigmoid));
    out.push(h.hidden_act);
    out.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
    out.extend_from_slice(metadata.as_bytes());
    let blocks = model.blocks();
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        out.extend_from_slice(&(b.name.len() as u16).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.push(match b.group {
            ParamGroup::Network => 0,
            ParamGroup::Features => 1,
        });
        out.push(b.shape.len() as u8);
        for s in &b.shape {
            out.extend_from_slice(&(*s as u64).to_le_bytes());
        }
        for x in b.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn save(model: &AnyModel, metadata: &str, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model, metadata)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::CheckpointTruncated(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn size(&mut self, what: &str) -> Result<usize> {
        let x = u64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        usize::try_from(x).map_err(|_| Error::CheckpointFormat(format!("{what} = {x} too large")))
    }

    fn string(&mut self, n: usize, what: &str) -> Result<String> {
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::CheckpointFormat(format!("{what} is not UTF-8")))
    }
}

fn config_of(h: &Header) -> Result<ModelConfig> {
    let bad = |msg: String| Error::CheckpointFormat(msg);
    Ok(match h.kind {
        ModelKind::Nnmf => ModelConfig::Nnmf {
            d: h.d,
            d_prime: h.d_prime,
            k: h.k,
            layer_dims: h.layer_dims.clone(),
        },
        ModelKind::Pmf => ModelConfig::Pmf { d: h.d },
        ModelKind::BiasedMf => ModelConfig::BiasedMf { d: h.d },
        ModelKind::Ntn => {
            if h.layer_dims.len() != 3 || h.layer_dims[0] != 2 * h.d || h.layer_dims[2] != 1 {
                return Err(bad(format!("ntn layer_dims {:?} inconsistent with D = {}", h.layer_dims, h.d)));
            }
            ModelConfig::Ntn {
                d: h.d,
                hidden: h.layer_dims[1],
                output_sigmoid: h.output_sigmoid,
            }
        }
    })
}

/// Parses checkpoint bytes.
pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(Error::CheckpointFormat(format!("bad magic {magic:?}")));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let tag = r.u8("kind")?;
    let kind = ModelKind::from_tag(tag)
        .ok_or_else(|| Error::CheckpointFormat(format!("unknown model kind tag {tag}")))?;
    let n_rows = r.size("n_rows")?;
    let n_cols = r.size("n_cols")?;
    let d = r.size("d")?;
    let d_prime = r.size("d_prime")?;
    let k = r.size("k")?;
    let n_layers = r.u32("layer count")? as usize;
    let layer_dims = (0..n_layers)
        .map(|_| r.size("layer_dims"))
        .collect::<Result<Vec<_>>>()?;
    let flags = r.u8("flags")?;
    let hidden_act = r.u8("hidden activation")?;
    let meta_len = r.u32("metadata length")? as usize;
    let metadata = r.string(meta_len, "metadata")?;
    let header = Header {
        kind,
        n_rows,
        n_cols,
        d,
        d_prime,
        k,
        layer_dims,
        output_sigmoid: flags & 1 == 1,
        hidden_act,
    };

    let mut model = config_of(&header)?
        .zeros(n_rows, n_cols)
        .map_err(|e| Error::CheckpointFormat(format!("header describes no valid model: {e}")))?;
    if let AnyModel::Nnmf(m) = &mut model {
        m.net.hidden_activation = match hidden_act {
            0 => Activation::Identity,
            1 => Activation::Sigmoid,
            other => return Err(Error::CheckpointFormat(format!("unknown activation tag {other}"))),
        };
        if header.output_sigmoid {
            m.net.output_activation = Activation::Sigmoid;
        }
    }

    let n_blocks = r.u32("block count")? as usize;
    let expected = model.blocks().len();
    if n_blocks != expected {
        return Err(Error::ShapeMismatch(format!(
            "{n_blocks} parameter blocks, {kind} has {expected}"
        )));
    }
    for (i, block) in model.blocks_mut().into_iter().enumerate() {
        let name_len = r.u16("block name length")? as usize;
        let name = r.string(name_len, "block name")?;
        if name != block.name {
            return Err(Error::ShapeMismatch(format!(
                "block {i} is '{name}', expected '{}'",
                block.name
            )));
        }
        let group = r.u8("block group")?;
        let want = match block.group {
            ParamGroup::Network => 0,
            ParamGroup::Features => 1,
        };
        if group != want {
            return Err(Error::CheckpointFormat(format!("block '{name}' has group tag {group}")));
        }
        let ndim = r.u8("block ndim")? as usize;
        let shape = (0..ndim)
            .map(|_| r.size("block dims"))
            .collect::<Result<Vec<_>>>()?;
        if shape != block.shape {
            return Err(Error::ShapeMismatch(format!(
                "block '{name}' has shape {shape:?}, expected {:?}",
                block.shape
            )));
        }
        let bytes = r.take(8 * block.data.len(), "block data")?;
        for (x, chunk) in block.data.iter_mut().zip(bytes.chunks_exact(8)) {
            *x = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if r.pos != buf.len() {
        return Err(Error::CheckpointFormat(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    Ok(Checkpoint { model, metadata })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads a checkpoint and checks it against the model configuration and
/// array dimensions the caller expects.
pub fn load_expecting(path: &Path, config: &ModelConfig, n_rows: usize, n_cols: usize) -> Result<Checkpoint> {
    let ckpt = load(path)?;
    let found = ckpt.model.config();
    if &found != config {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint holds {found:?}, expected {config:?}"
        )));
    }
    if (ckpt.model.n_rows(), ckpt.model.n_cols()) != (n_rows, n_cols) {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint is {}x{}, expected {n_rows}x{n_cols}",
            ckpt.model.n_rows(),
            ckpt.model.n_cols()
        )));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::InitSpec;

    fn models() -> Vec<AnyModel> {
        let init = InitSpec { feature_std: 0.3, seed: 9 };
        vec![
            ModelConfig::Nnmf {
                d: 2,
                d_prime: 3,
                k: 2,
                layer_dims: vec![7, 4, 1],
            }
            .init(4, 5, &init, 0.0)
            .unwrap(),
            ModelConfig::Pmf { d: 3 }.init(4, 5, &init, 0.0).unwrap(),
            ModelConfig::BiasedMf { d: 3 }.init(4, 5, &init, 3.5).unwrap(),
            ModelConfig::Ntn {
                d: 2,
                hidden: 3,
                output_sigmoid: true,
            }
            .init(4, 5, &init, 0.0)
            .unwrap(),
        ]
    }

    fn bits(m: &AnyModel) -> Vec<u64> {
        m.blocks().iter().flat_map(|b| b.data.iter().map(|x| x.to_bits())).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for m in models() {
            let bytes = to_bytes(&m, "model = x\nversion = 0.1.0\n");
            let back = from_bytes(&bytes).unwrap();
            assert_eq!(bits(&back.model), bits(&m));
            assert_eq!(back.model, m);
            assert_eq!(back.metadata, "model = x\nversion = 0.1.0\n");
            assert_eq!(to_bytes(&back.model, &back.metadata), bytes);
        }
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut bytes = to_bytes(&models()[1], "");
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::CheckpointFormat(_))));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = to_bytes(&models()[1], "");
        bytes[5] = 7;
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::CheckpointVersion { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn every_truncation_is_detected() {
        let bytes = to_bytes(&models()[0], "meta");
        for len in MAGIC.len()..bytes.len() {
            assert!(
                matches!(from_bytes(&bytes[..len]), Err(Error::CheckpointTruncated(_))),
                "length {len}"
            );
        }
    }

    #[test]
    fn d_prime_mismatch_is_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg60 = ModelConfig::Nnmf {
            d: 1,
            d_prime: 60,
            k: 1,
            layer_dims: vec![62, 3, 1],
        };
        let cfg80 = ModelConfig::Nnmf {
            d: 1,
            d_prime: 80,
            k: 1,
            layer_dims: vec![82, 3, 1],
        };
        let m = cfg60.init(2, 2, &InitSpec::default(), 0.0).unwrap();
        save(&m, "", &path).unwrap();
        assert!(load_expecting(&path, &cfg60, 2, 2).is_ok());
        assert!(matches!(load_expecting(&path, &cfg80, 2, 2), Err(Error::ShapeMismatch(_))));
        assert!(matches!(load_expecting(&path, &cfg60, 3, 2), Err(Error::ShapeMismatch(_))));
    }
}
