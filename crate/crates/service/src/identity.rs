//! Raw sensor id → stable uuid mapping with time-to-live reissue.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uuid::Uuid;
use xlane_twin::RawId;

use crate::{Result, ServiceError};

pub const DEFAULT_TTL_S: f64 = 5.0;
/// Streams skipped on restore, covering uuids minted after the last snapshot.
const RESTORE_SKIP: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub uuid: Uuid,
    pub last_seen: f64,
}

/// Deterministic uuid source: the `n`-th uuid is drawn from ChaCha stream `n` of `seed`,
/// so a restored cache never reissues an earlier uuid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Minter {
    seed: u64,
    minted: u64,
}

impl Minter {
    fn next(&mut self) -> Uuid {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.minted);
        self.minted += 1;
        uuid::Builder::from_random_bytes(rng.gen()).into_uuid()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Snapshot {
    ttl: f64,
    minter: Minter,
    entries: Vec<(RawId, Entry)>,
}

#[derive(Debug, Clone)]
pub struct IdentityCache {
    ttl: f64,
    entries: HashMap<RawId, Entry>,
    minter: Minter,
}

impl IdentityCache {
    /// `seed = None` draws the uuid seed from the OS.
    pub fn new(ttl: f64, seed: Option<u64>) -> Self {
        Self {
            ttl,
            entries: HashMap::new(),
            minter: Minter {
                seed: seed.unwrap_or_else(|| rand::thread_rng().gen()),
                minted: 0,
            },
        }
    }

    pub fn ttl(&self) -> f64 {
        self.ttl
    }

    /// Existing uuid if `raw` was seen within the ttl, a fresh one otherwise.
    pub fn assign(&mut self, raw: RawId, now: f64) -> Uuid {
        let ttl = self.ttl;
        let minter = &mut self.minter;
        let e = self.entries.entry(raw).or_insert_with(|| Entry {
            uuid: minter.next(),
            last_seen: now,
        });
        if now - e.last_seen > ttl {
            e.uuid = minter.next();
        }
        e.last_seen = now;
        e.uuid
    }

    /// Forget ids absent for longer than the ttl.
    pub fn prune(&mut self, now: f64) {
        let ttl = self.ttl;
        self.entries.retain(|_, e| now - e.last_seen <= ttl);
    }

    pub fn get(&self, raw: RawId) -> Option<&Entry> {
        self.entries.get(&raw)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn minted(&self) -> u64 {
        self.minter.minted
    }

    /// Write atomically (temp file + rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut entries: Vec<_> = self.entries.iter().map(|(k, v)| (*k, *v)).collect();
        entries.sort_by_key(|e| e.0);
        let snap = Snapshot {
            ttl: self.ttl,
            minter: self.minter,
            entries,
        };
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(&snap)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let snap: Snapshot = serde_json::from_slice(&std::fs::read(path)?)?;
        if !(snap.ttl > 0.0) {
            return Err(ServiceError::Config(format!("snapshot ttl {} must be positive", snap.ttl)));
        }
        Ok(Self {
            ttl: snap.ttl,
            entries: snap.entries.into_iter().collect(),
            minter: Minter {
                seed: snap.minter.seed,
                minted: snap.minter.minted + RESTORE_SKIP,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reissue_only_after_ttl() {
        let mut c = IdentityCache::new(5.0, Some(1));
        let a = c.assign(37, 0.0);
        assert_eq!(c.assign(37, 1.0), a);
        assert_eq!(c.assign(37, 6.0), a);
        let b = c.assign(37, 12.5);
        assert_ne!(a, b);
        assert_eq!(c.assign(37, 17.5), b);
    }

    #[test]
    fn prune_drops_stale_entries() {
        let mut c = IdentityCache::new(5.0, Some(1));
        c.assign(1, 0.0);
        c.assign(2, 4.0);
        c.prune(8.0);
        assert!(c.get(1).is_none());
        assert!(c.get(2).is_some());
    }
}
