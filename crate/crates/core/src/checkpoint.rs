//! Binary checkpoints.
//!
//! Layout (little-endian): magic `HFSG1`, `u32` format version, `u32` length and
//! bytes of the JSON model config, `u32` blob count, then per blob: `u16` name
//! length, name, `u8` dtype, `u8` rank, `rank` dims as `u32`, raw data.
//! Parameters are stored as `param.<name>`, untrained buffers as `buffer.<name>`
//! and anything else (optimizer moments, training state) as `extra.<name>`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::Parameters;

pub const MAGIC: &[u8; 5] = b"HFSG1";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

pub type Blobs = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub extra: Blobs,
}

fn push_blob(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F64);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Writes atomically via a sibling temporary file.
pub fn save(path: &Path, model: &Model, extra: &Blobs) -> Result<()> {
    let config = serde_json::to_vec(&model.config).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&((model.params.len() + extra.len()) as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        let prefix = if t.trainable { "param" } else { "buffer" };
        push_blob(&mut out, &format!("{prefix}.{name}"), &t.shape, &t.data);
    }
    for (name, (shape, data)) in extra {
        push_blob(&mut out, &format!("extra.{name}"), shape, data);
    }
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(&out).and_then(|_| f.sync_all()))
        .map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, msg: impl Into<String>) -> Error {
        Error::Corrupt {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt(format!("truncated: needed {n} bytes at offset {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(5)? != MAGIC {
        return Err(r.corrupt("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.corrupt(format!("unsupported format version {version}")));
    }
    let len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?).map_err(|e| r.corrupt(format!("config: {e}")))?;
    let count = r.u32()? as usize;
    let mut params = Parameters::new();
    let mut extra = Blobs::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| r.corrupt("blob name is not UTF-8"))?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(r.corrupt(format!("blob {name}: unknown dtype {dtype}")));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| r.corrupt("blob size overflow"))?)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        match name.split_once('.') {
            Some(("param", rest)) => params.insert(rest, &shape, data, true),
            Some(("buffer", rest)) => params.insert(rest, &shape, data, false),
            Some(("extra", rest)) => {
                extra.insert(rest.to_string(), (shape, data));
            }
            _ => return Err(r.corrupt(format!("unexpected blob name {name}"))),
        }
    }
    if r.pos != bytes.len() {
        return Err(r.corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    config.validate().map_err(|e| r.corrupt(format!("stored config is invalid: {e}")))?;
    let reference = Model::with_init(config.clone(), crate::model::InitScheme::Zero)?;
    for (name, t) in reference.params.iter() {
        match params.get(name) {
            Some(p) if p.shape == t.shape => {}
            Some(p) => return Err(r.corrupt(format!("parameter {name} has shape {:?}, expected {:?}", p.shape, t.shape))),
            None => return Err(r.corrupt(format!("missing parameter {name}"))),
        }
    }
    if params.len() != reference.params.len() {
        return Err(r.corrupt("unexpected extra parameters"));
    }
    Ok(Checkpoint {
        model: Model { config, params },
        extra,
    })
}

/// Fields whose values differ between two configs.
pub fn config_differences(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let (va, vb) = (serde_json::to_value(a).expect("serializes"), serde_json::to_value(b).expect("serializes"));
    let (oa, ob) = (va.as_object().expect("object"), vb.as_object().expect("object"));
    oa.iter()
        .filter(|(k, v)| ob.get(*k) != Some(v))
        .map(|(k, v)| format!("{k}: checkpoint has {}, config has {}", v, ob.get(k).cloned().unwrap_or_default()))
        .collect()
}

/// Loads a checkpoint and checks that it was written for `expected`. The seed
/// only affects initialization and is not compared.
pub fn load_matching(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = load(path)?;
    let stored = ModelConfig {
        seed: expected.seed,
        ..ck.model.config.clone()
    };
    let diffs = config_differences(&stored, expected);
    if !diffs.is_empty() {
        return Err(Error::ConfigMismatch(format!("{}: {}", path.display(), diffs.join("; "))));
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::Aggregator;
    use crate::config::Variant;

    fn cfg(layers: usize) -> ModelConfig {
        ModelConfig {
            variant: Variant::Hfsgm,
            aggregator: Aggregator::Lag,
            layers,
            c_channels: 2,
            z_channels: 2,
            latent_resolution: 2,
            hidden_channels: 4,
            encoder_widths: vec![2, 2],
            image_size: 8,
            heads: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let model = Model::with_init(cfg(2), crate::model::InitScheme::Random { scale: 0.7 }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut extra = Blobs::new();
        extra.insert("state".into(), (vec![3], vec![1.5, f64::MIN_POSITIVE, -0.0]));
        save(&path, &model, &extra).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.model.config, model.config);
        for ((n1, t1), (n2, t2)) in back.model.params.iter().zip(model.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.trainable, t2.trainable);
            let bits = |d: &[f64]| d.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&t1.data), bits(&t2.data));
        }
        assert_eq!(back.extra["state"].1[2].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn mismatched_layers_are_rejected() {
        let model = Model::new(cfg(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &model, &Blobs::new()).unwrap();
        let err = load_matching(&path, &cfg(3)).unwrap_err();
        assert!(matches!(err, Error::ConfigMismatch(ref m) if m.contains("layers")), "{err}");
        load_matching(&path, &ModelConfig { seed: 99, ..cfg(2) }).unwrap();
    }

    #[test]
    fn truncation_is_detected() {
        let model = Model::new(cfg(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &model, &Blobs::new()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            assert!(matches!(load(&path), Err(Error::Corrupt { .. })), "cut at {cut}");
        }
    }
}
