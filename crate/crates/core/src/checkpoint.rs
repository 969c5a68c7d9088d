//! Versioned binary snapshot of the ensemble, used both for server
//! checkpoints and for the final-ensemble artifact. Layout in
//! `docs/checkpoint.md`.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::StudyConfig;
use crate::error::{Error, Result};
use crate::partition::DynamicState;

pub const MAGIC: &[u8; 8] = b"ENSDACKP";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 56;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtifactKind {
    Checkpoint = 0,
    FinalEnsemble = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerCheckpoint {
    pub kind: ArtifactKind,
    /// Next cycle to propagate: the states are the analysis of `cycle − 1`.
    pub cycle: u32,
    pub seed: u64,
    pub config_hash: u64,
    pub n_dynamic: usize,
    pub n_assimilated: usize,
    /// Ordered by member id.
    pub members: Vec<DynamicState>,
}

impl ServerCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            HEADER_LEN + self.members.len() * (8 + 8 * self.n_dynamic) + DIGEST_LEN,
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.cycle.to_le_bytes());
        out.extend_from_slice(&(self.members.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_dynamic as u64).to_le_bytes());
        out.extend_from_slice(&(self.n_assimilated as u64).to_le_bytes());
        for m in &self.members {
            out.extend_from_slice(&m.member_id.to_le_bytes());
            out.extend_from_slice(&0u32.to_le_bytes());
            for v in &m.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < HEADER_LEN + DIGEST_LEN {
            return Err(err("file too short to be a checkpoint"));
        }
        if &bytes[..8] != MAGIC {
            return Err(err("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(8);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} not supported (expected {FORMAT_VERSION})"
            )));
        }
        let kind = match u32_at(12) {
            0 => ArtifactKind::Checkpoint,
            1 => ArtifactKind::FinalEnsemble,
            k => return Err(Error::Checkpoint(format!("unknown artifact kind {k}"))),
        };
        let config_hash = u64_at(16);
        let seed = u64_at(24);
        let cycle = u32_at(32);
        let count = u32_at(36) as usize;
        let n_dynamic = u64_at(40) as usize;
        let n_assimilated = u64_at(48) as usize;
        let record = 8usize
            .checked_add(n_dynamic.checked_mul(8).ok_or_else(|| err("n_dynamic overflow"))?)
            .ok_or_else(|| err("record size overflow"))?;
        let expected = count
            .checked_mul(record)
            .and_then(|b| b.checked_add(HEADER_LEN + DIGEST_LEN))
            .ok_or_else(|| err("size overflow"))?;
        if bytes.len() != expected {
            return Err(Error::Checkpoint(format!(
                "truncated or oversized: {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let body_end = bytes.len() - DIGEST_LEN;
        if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
            return Err(err("checksum mismatch"));
        }
        let members = bytes[HEADER_LEN..body_end]
            .chunks_exact(record)
            .map(|rec| DynamicState {
                member_id: u32::from_le_bytes(rec[..4].try_into().unwrap()),
                values: rec[8..]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            })
            .collect();
        Ok(Self {
            kind,
            cycle,
            seed,
            config_hash,
            n_dynamic,
            n_assimilated,
            members,
        })
    }

    /// Writes to a sibling temp file, syncs, then renames over `path`, so a
    /// crash mid-write leaves the previous file intact.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        let tmp = temp_path(path);
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            if let Ok(d) = File::open(dir) {
                let _ = d.sync_all();
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Reads a checkpoint and checks it belongs to the study described by `cfg`.
    pub fn restore(path: &Path, cfg: &StudyConfig) -> Result<Self> {
        let ckpt = Self::read(path)?;
        if ckpt.config_hash != cfg.config_hash() {
            return Err(Error::Checkpoint(format!(
                "study configuration changed since {} was written (hash {:016x}, now {:016x}); refusing to restore",
                path.display(),
                ckpt.config_hash,
                cfg.config_hash()
            )));
        }
        if ckpt.seed != cfg.seed || ckpt.n_dynamic != cfg.n_dynamic {
            return Err(Error::Checkpoint("seed or layout mismatch".into()));
        }
        Ok(ckpt)
    }

    pub fn ensemble_hash(&self) -> String {
        ensemble_hash(&self.members)
    }
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// SHA-256 over member ids and state bits, in the given order.
pub fn ensemble_hash(members: &[DynamicState]) -> String {
    let mut h = Sha256::new();
    for m in members {
        h.update(m.member_id.to_le_bytes());
        for v in &m.values {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
