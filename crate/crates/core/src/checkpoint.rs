//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "TEEFCKPT"
//! version    u32       FORMAT_VERSION
//! meta_len   u32
//! meta       meta_len bytes of UTF-8 JSON (CheckpointMeta)
//! n_arrays   u32
//! per array: name_len u16, name (UTF-8), ndim u8, dims u64 x ndim,
//!            data f64 x prod(dims)
//! checksum   32 bytes  SHA-256 of every preceding byte
//! ```
//!
//! Array names are the canonical parameter names of
//! [`ModelParams::tensors`](crate::model::ModelParams::tensors), e.g.
//! `conditioner.token_table`, `trunk.layers.0.weight`, `trunk.output.bias`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant, VelocityModel};
use crate::nn::Mlp2;
use crate::world::WorldSpec;

pub const MAGIC: &[u8; 8] = b"TEEFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub world: WorldSpec,
    pub model: ModelConfig,
    pub variant: Option<Variant>,
    pub has_guidance_mlp: bool,
    pub n_params: usize,
    /// Training step the parameters were taken at.
    pub step: usize,
    /// Wall-clock duration of the producing run, milliseconds.
    pub wall_clock_ms: u64,
}

/// SHA-256 over the parameter arrays only (names, shapes, values).
pub fn param_digest(model: &VelocityModel) -> String {
    let mut h = Sha256::new();
    for t in model.params.tensors() {
        h.update(t.name.as_bytes());
        for d in &t.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn encode(model: &VelocityModel, world: &WorldSpec, step: usize, wall_clock_ms: u64) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        world: *world,
        model: model.config,
        variant: model.variant,
        has_guidance_mlp: model.params.conditioner.guidance_mlp.is_some(),
        n_params: model.n_params(),
        step,
        wall_clock_ms,
    };
    let meta = serde_json::to_vec(&meta).map_err(|e| Error::checkpoint("meta", e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    let tensors = model.params.tensors();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.push(t.shape.len() as u8);
        for d in &t.shape {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

pub fn save(path: &Path, model: &VelocityModel, world: &WorldSpec, step: usize, wall_clock_ms: u64) -> Result<()> {
    let bytes = encode(model, world, step, wall_clock_ms)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::checkpoint(
                field,
                format!("truncated: need {n} bytes at offset {}, {} left", self.pos, self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint; the returned model has a zero forward counter.
pub fn decode(bytes: &[u8]) -> Result<(VelocityModel, CheckpointMeta)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::checkpoint("magic", "not a checkpoint file"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::checkpoint(
            "version",
            format!("unsupported version {version} (expected {FORMAT_VERSION})"),
        ));
    }
    if bytes.len() < 32 {
        return Err(Error::checkpoint("checksum", "truncated"));
    }
    let body_end = bytes.len() - 32;
    let meta_len = r.u32("meta_len")? as usize;
    let meta_bytes = r.take(meta_len, "meta")?;
    let meta: CheckpointMeta =
        serde_json::from_slice(meta_bytes).map_err(|e| Error::checkpoint("meta", e.to_string()))?;

    let mut model = VelocityModel::new(&meta.world, meta.model, 0)
        .map_err(|e| Error::checkpoint("meta.model", e.to_string()))?;
    if meta.has_guidance_mlp {
        let c = meta.model;
        model.params.conditioner.guidance_mlp =
            Some(Mlp2::init(&mut ChaCha8Rng::seed_from_u64(0), c.sinusoid_dim, c.cond_dim, c.cond_dim));
    }
    model.variant = meta.variant;

    let n_arrays = r.u32("n_arrays")? as usize;
    let mut targets = model.params.tensors_mut();
    if n_arrays != targets.len() {
        return Err(Error::checkpoint(
            "n_arrays",
            format!("expected {} arrays, found {n_arrays}", targets.len()),
        ));
    }
    for target in targets.iter_mut() {
        let field = target.name.clone();
        let name_len = r.u16(&field)? as usize;
        let name = std::str::from_utf8(r.take(name_len, &field)?)
            .map_err(|_| Error::checkpoint(&field, "array name is not UTF-8"))?;
        if name != target.name {
            return Err(Error::checkpoint(&field, format!("found array `{name}` in its place")));
        }
        let ndim = r.u8(&field)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64(&field)? as usize);
        }
        if shape != target.shape {
            return Err(Error::checkpoint(
                &field,
                format!("shape {shape:?} does not match {:?}", target.shape),
            ));
        }
        let raw = r.take(8 * target.data.len(), &field)?;
        for (dst, chunk) in target.data.iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    drop(targets);
    if r.pos != body_end {
        return Err(Error::checkpoint(
            "checksum",
            format!("expected checksum at offset {}, file has {} bytes", r.pos, bytes.len()),
        ));
    }
    let digest = Sha256::digest(&bytes[..body_end]);
    if digest.as_slice() != &bytes[body_end..] {
        return Err(Error::checkpoint("checksum", "content does not match checksum"));
    }
    if meta.n_params != model.n_params() {
        return Err(Error::checkpoint("meta.n_params", "parameter count mismatch"));
    }
    Ok((model, meta))
}

pub fn load(path: &Path) -> Result<(VelocityModel, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    fn model() -> VelocityModel {
        let mut m = VelocityModel::new(&WorldSpec::default(), ModelConfig::default(), 17).unwrap();
        m.params.trunk.output.weight.fill(0.01);
        m
    }

    #[test]
    fn round_trip_preserves_every_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        let z = Array1::from_elem(32, 0.1);
        let before = m.forward([0.3, 0.4], z.view()).unwrap();
        save(&path, &m, &WorldSpec::default(), 1234, 5).unwrap();
        let (loaded, meta) = load(&path).unwrap();
        assert_eq!(loaded.forward_count(), 0);
        assert_eq!(loaded.params, m.params);
        assert_eq!(loaded.forward([0.3, 0.4], z.view()).unwrap(), before);
        assert_eq!(meta.step, 1234);
        assert_eq!(meta.world, WorldSpec::default());
        assert_eq!(meta.model, ModelConfig::default());
        assert_eq!(param_digest(&loaded), param_digest(&m));
    }

    #[test]
    fn baseline_student_round_trips() {
        let mut m = model().with_guidance_mlp(3);
        m.variant = Some(Variant::DistillCfg);
        let bytes = encode(&m, &WorldSpec::default(), 0, 0).unwrap();
        let (loaded, meta) = decode(&bytes).unwrap();
        assert_eq!(loaded.params, m.params);
        assert_eq!(meta.variant, Some(Variant::DistillCfg));
    }

    #[test]
    fn truncated_file_names_the_field() {
        let bytes = encode(&model(), &WorldSpec::default(), 0, 0).unwrap();
        let err = decode(&bytes[..bytes.len() / 2]).unwrap_err();
        match err {
            Error::Checkpoint { field, reason } => {
                assert!(field.starts_with("trunk") || field.starts_with("conditioner"), "{field}");
                assert!(reason.contains("truncated"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = encode(&model(), &WorldSpec::default(), 0, 0).unwrap();
        let i = bytes.len() - 100;
        bytes[i] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint { field, .. }) if field == "checksum"));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = encode(&model(), &WorldSpec::default(), 0, 0).unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint { field, .. }) if field == "version"));
    }
}
