//! Checkpoints: a binary parameter/optimizer store plus a UTF-8 JSON manifest
//! carrying the run config, step and a SHA-256 content hash. Writes are
//! atomic (temp file + rename); loads verify the hash and the architecture.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SVCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub step: u64,
    pub opt_g_step: u64,
    pub opt_d_step: u64,
    pub best_total: f64,
    pub content_hash: String,
    pub config: RunConfig,
}

pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

fn encode_tensors(tensors: &BTreeMap<String, ArrayD<f64>>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, arr) in tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(arr.ndim() as u32).to_le_bytes());
        for &d in arr.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in arr.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

fn decode_tensors(bytes: &[u8], path: &Path) -> Result<BTreeMap<String, ArrayD<f64>>> {
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(bad("truncated"));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec()).map_err(|_| bad("bad name"))?;
        let ndim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(n * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.insert(
            name,
            ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|_| bad("bad shape"))?,
        );
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

impl Checkpoint {
    pub fn save(
        path: &Path,
        tensors: &BTreeMap<String, ArrayD<f64>>,
        step: u64,
        opt_g_step: u64,
        opt_d_step: u64,
        best_total: f64,
        config: &RunConfig,
    ) -> Result<()> {
        let payload = encode_tensors(tensors);
        let mut hasher = Sha256::new();
        hasher.update(&payload);
        let manifest = CheckpointManifest {
            format_version: VERSION,
            step,
            opt_g_step,
            opt_d_step,
            best_total,
            content_hash: hex(&hasher.finalize()),
            config: config.clone(),
        };
        let tmp = path.with_extension("svck.tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&payload).map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        let mpath = manifest_path(path);
        let mtmp = mpath.with_extension("json.tmp");
        std::fs::write(
            &mtmp,
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )
        .map_err(|e| Error::io(&mtmp, e))?;
        std::fs::rename(&mtmp, &mpath).map_err(|e| Error::io(&mpath, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mpath = manifest_path(path);
        let mtext = std::fs::read_to_string(&mpath).map_err(|e| {
            Error::Checkpoint(format!("missing manifest {}: {e}", mpath.display()))
        })?;
        let manifest: CheckpointManifest = serde_json::from_str(&mtext)
            .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
        let mut payload = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut payload)
            .map_err(|e| Error::io(path, e))?;
        let mut hasher = Sha256::new();
        hasher.update(&payload);
        let got = hex(&hasher.finalize());
        if got != manifest.content_hash {
            return Err(Error::Checkpoint(format!(
                "{}: content hash mismatch (file corrupt?)",
                path.display()
            )));
        }
        let tensors = decode_tensors(&payload, path)?;
        Ok(Checkpoint { manifest, tensors })
    }

    /// Architecture compatibility guard for resuming / evaluation.
    pub fn check_compatible(&self, cfg: &RunConfig) -> Result<()> {
        let a = &self.manifest.config;
        if a.model != cfg.model {
            return Err(Error::IncompatibleCheckpoint(format!(
                "model config differs (checkpoint latent_dim={}, requested latent_dim={})",
                a.model.latent_dim, cfg.model.latent_dim
            )));
        }
        if a.discriminator != cfg.discriminator {
            return Err(Error::IncompatibleCheckpoint(
                "discriminator config differs".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensors() -> BTreeMap<String, ArrayD<f64>> {
        let mut m = BTreeMap::new();
        m.insert(
            "a.w".to_string(),
            ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, -2.5, 3.25, 0.0, 1e-17, 9.9]).unwrap(),
        );
        m.insert("b".to_string(), ArrayD::from_elem(IxDyn(&[1]), 42.0));
        m
    }

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("test.svck");
        let cfg = RunConfig::default();
        Checkpoint::save(&p, &tensors(), 17, 17, 17, 1.25, &cfg).unwrap();
        let ck = Checkpoint::load(&p).unwrap();
        assert_eq!(ck.manifest.step, 17);
        for (k, v) in tensors() {
            let got = &ck.tensors[&k];
            assert_eq!(got.shape(), v.shape());
            for (a, b) in got.iter().zip(v.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn corrupt_payload_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("test.svck");
        Checkpoint::save(&p, &tensors(), 1, 1, 1, 0.0, &RunConfig::default()).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xFF;
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn incompatible_model_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("test.svck");
        Checkpoint::save(&p, &tensors(), 1, 1, 1, 0.0, &RunConfig::default()).unwrap();
        let ck = Checkpoint::load(&p).unwrap();
        let mut other = RunConfig::default();
        other.model.latent_dim = 128;
        assert!(matches!(
            ck.check_compatible(&other),
            Err(Error::IncompatibleCheckpoint(_))
        ));
        ck.check_compatible(&RunConfig::default()).unwrap();
    }
}
