//! Checkpoint serialization.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  b"CHIRPVIT"
//! version  u32      currently 1
//! meta_len u64      length of the JSON metadata block
//! meta     bytes    {"config": ViTConfig, "pixel_mean": [..], "pixel_std": [..]}
//! count    u64      number of tensors
//! tensor*  name_len u64, name bytes, ndim u64, dims u64×ndim, data f64×numel
//! ```
//!
//! Tensors are written in the canonical order of
//! [`ViTParams::shape_spec`], so identical state always produces identical
//! bytes. Loading validates magic, version, config consistency, and every
//! tensor's shape against the config before accepting the file.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::config::ViTConfig;
use super::params::ViTParams;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"CHIRPVIT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Input-normalization statistics baked into the checkpoint so inference
/// never depends on having the training manifest around.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ViTConfig,
    pixel_mean: [f64; 3],
    pixel_std: [f64; 3],
}

/// Everything a checkpoint restores.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: ViTConfig,
    pub norm: NormStats,
    pub params: ViTParams,
}

pub fn save_checkpoint(
    path: &Path,
    cfg: &ViTConfig,
    norm: &NormStats,
    params: &ViTParams,
) -> Result<()> {
    cfg.validate()?;
    let named = params.named();
    let spec = ViTParams::shape_spec(cfg);
    if named.len() != spec.len()
        || named
            .iter()
            .zip(spec.iter())
            .any(|((nn, nt), (sn, ss))| nn != sn || nt.shape() != ss.as_slice())
    {
        return Err(Error::Checkpoint(
            "parameters do not match the config's shape spec".to_string(),
        ));
    }
    let meta = serde_json::to_vec(&Meta {
        config: cfg.clone(),
        pixel_mean: norm.pixel_mean,
        pixel_std: norm.pixel_std,
    })?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(&meta)?;
    w.write_all(&(named.len() as u64).to_le_bytes())?;
    for (name, t) in named {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u64).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Guard against nonsense lengths from corrupt files before allocating.
const MAX_SANE_LEN: u64 = 1 << 33;

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}; not a checkpoint file"
        )));
    }
    let mut vbuf = [0u8; 4];
    r.read_exact(&mut vbuf)?;
    let version = u32::from_le_bytes(vbuf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let meta_len = read_u64(&mut r)?;
    if meta_len > MAX_SANE_LEN {
        return Err(Error::Checkpoint(format!("metadata length {meta_len} is implausible")));
    }
    let mut meta_bytes = vec![0u8; meta_len as usize];
    r.read_exact(&mut meta_bytes)?;
    let meta: Meta = serde_json::from_slice(&meta_bytes)?;
    meta.config.validate()?;

    let count = read_u64(&mut r)?;
    let spec = ViTParams::shape_spec(&meta.config);
    if count as usize != spec.len() {
        return Err(Error::Checkpoint(format!(
            "file holds {count} tensors, config implies {}",
            spec.len()
        )));
    }
    let mut map: HashMap<String, Tensor> = HashMap::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u64(&mut r)?;
        if name_len > 4096 {
            return Err(Error::Checkpoint(format!("tensor name length {name_len} is implausible")));
        }
        let mut name_bytes = vec![0u8; name_len as usize];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".to_string()))?;
        let ndim = read_u64(&mut r)?;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!("tensor {name:?} has {ndim} dims")));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        let mut numel = 1u64;
        for _ in 0..ndim {
            let d = read_u64(&mut r)?;
            numel = numel.saturating_mul(d.max(1));
            shape.push(d as usize);
        }
        if numel > MAX_SANE_LEN {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} with shape {shape:?} is implausibly large"
            )));
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0f64; n];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        let t = Tensor::new(shape, data)?;
        if map.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name:?}")));
        }
    }
    // Exactly at EOF: anything else means a mangled file.
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".to_string()));
    }
    let params = ViTParams::from_named(&meta.config, map)?;
    Ok(Checkpoint {
        config: meta.config,
        norm: NormStats {
            pixel_mean: meta.pixel_mean,
            pixel_std: meta.pixel_std,
        },
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::config::BlockStyle;

    fn toy_cfg() -> ViTConfig {
        ViTConfig {
            image_size: 4,
            channels: 3,
            patch_size: 2,
            width: 4,
            layers: 2,
            heads: 2,
            ffn_dim: 6,
            head_hidden: 5,
            out_dim: 3,
            lora_rank: 2,
            lora_alpha: 1.0,
            block_style: BlockStyle::PostNorm,
            ffn_activation: crate::vit::config::FfnActivation::Gelu,
            ln_eps: 1e-5,
        }
    }

    fn toy_norm() -> NormStats {
        NormStats {
            pixel_mean: [0.21, 0.22, 0.23],
            pixel_std: [0.11, 0.12, 0.13],
        }
    }

    #[test]
    fn roundtrip_is_bit_exact_and_resave_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_cfg();
        let params = ViTParams::init(&cfg, 99).unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &cfg, &toy_norm(), &params).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.norm, toy_norm());
        for ((n1, t1), (n2, t2)) in params.named().iter().zip(loaded.params.named().iter())
        {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            for (a, b) in t1.data().iter().zip(t2.data().iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "tensor {n1} drifted");
            }
        }
        save_checkpoint(&p2, &loaded.config, &loaded.norm, &loaded.params).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn payload_is_exactly_8n_bytes_plus_structure() {
        // Structural parse with raw reads — independent of load_checkpoint.
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_cfg();
        let params = ViTParams::init(&cfg, 5).unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&path, &cfg, &toy_norm(), &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let n_expected: usize = ViTParams::param_count(&cfg);

        let u64_at = |o: usize| {
            u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()) as usize
        };
        assert_eq!(&bytes[0..8], b"CHIRPVIT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let meta_len = u64_at(12);
        let mut off = 20 + meta_len;
        let count = u64_at(off);
        off += 8;
        let mut data_bytes = 0usize;
        for _ in 0..count {
            let name_len = u64_at(off);
            off += 8 + name_len;
            let ndim = u64_at(off);
            off += 8;
            let mut numel = 1usize;
            for _ in 0..ndim {
                numel *= u64_at(off);
                off += 8;
            }
            data_bytes += 8 * numel;
            off += 8 * numel;
        }
        assert_eq!(off, bytes.len(), "file ends exactly after the last tensor");
        assert_eq!(data_bytes, 8 * n_expected, "payload is 8·N bytes");
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_cfg();
        let params = ViTParams::init(&cfg, 1).unwrap();
        let path = dir.path().join("d.ckpt");
        save_checkpoint(&path, &cfg, &toy_norm(), &params).unwrap();
        // Flip the stored width 4 → 6 in the JSON metadata (same byte
        // length), leaving the tensors alone: shapes no longer match.
        let mut bytes = std::fs::read(&path).unwrap();
        let needle = br#""width":4"#;
        let pos = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .expect("width field present");
        bytes[pos + needle.len() - 1] = b'6';
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(
            err.to_string().contains("shape") || err.to_string().contains("tensors"),
            "unexpected error: {err}"
        );
    }

    #[test]
    fn bad_magic_version_and_truncation_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_cfg();
        let params = ViTParams::init(&cfg, 1).unwrap();
        let path = dir.path().join("e.ckpt");
        save_checkpoint(&path, &cfg, &toy_norm(), &params).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("magic"));

        let mut bad = good.clone();
        bad[8] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(load_checkpoint(&path)
            .unwrap_err()
            .to_string()
            .contains("version"));

        std::fs::write(&path, &good[..good.len() / 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());

        let mut bad = good.clone();
        bad.push(0);
        std::fs::write(&path, &bad).unwrap();
        assert!(load_checkpoint(&path)
            .unwrap_err()
            .to_string()
            .contains("trailing"));
    }
}
