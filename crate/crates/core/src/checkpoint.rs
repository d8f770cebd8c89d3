//! Versioned, bit-exact parameter archives.
//!
//! A checkpoint stores every parameter tensor keyed by `(user_index,
//! component)` where the component is `enc`, `dec`, or `ifg`.  Values are
//! written as little-endian `f64` bytes, so save/load round-trips are exact
//! to the bit.  Architecture (dimensions, layer counts, side users) is not
//! stored; the caller reassembles identical stacks from its configuration
//! before loading.

use std::io::{Read, Write};
use std::path::Path;

use crate::nn::{Param, ParamStore};
use crate::sic::UserStacks;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"SEMCKPT\0";
const VERSION: u32 = 1;

/// One component's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub user_index: u32,
    pub component: String,
    pub store: ParamStore,
}

/// A full system snapshot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    /// Snapshots every stack of every user.
    pub fn from_users(users: &[UserStacks]) -> Self {
        let mut entries = Vec::new();
        for u in users {
            entries.push(Entry {
                user_index: u.enc.user_index as u32,
                component: "enc".into(),
                store: u.enc.store.clone(),
            });
            entries.push(Entry {
                user_index: u.dec.user_index as u32,
                component: "dec".into(),
                store: u.dec.store.clone(),
            });
            if let Some(ifg) = &u.ifg {
                entries.push(Entry {
                    user_index: ifg.user_index as u32,
                    component: "ifg".into(),
                    store: ifg.store.clone(),
                });
            }
        }
        Self { entries }
    }

    fn find(&self, user_index: u32, component: &str) -> Option<&ParamStore> {
        self.entries
            .iter()
            .find(|e| e.user_index == user_index && e.component == component)
            .map(|e| &e.store)
    }

    /// Copies stored values into identically shaped stacks.
    pub fn apply_to_users(&self, users: &mut [UserStacks]) -> Result<()> {
        for u in users {
            let idx = u.enc.user_index as u32;
            copy_store(
                self.find(idx, "enc")
                    .ok_or_else(|| Error::Checkpoint(format!("missing enc for user {idx}")))?,
                &mut u.enc.store,
            )?;
            copy_store(
                self.find(idx, "dec")
                    .ok_or_else(|| Error::Checkpoint(format!("missing dec for user {idx}")))?,
                &mut u.dec.store,
            )?;
            if let Some(ifg) = &mut u.ifg {
                copy_store(
                    self.find(idx, "ifg")
                        .ok_or_else(|| Error::Checkpoint(format!("missing ifg for user {idx}")))?,
                    &mut ifg.store,
                )?;
            }
        }
        Ok(())
    }

    /// Loads a single user's stacks from the entries recorded under
    /// `stored_index` (pretraining archives are reusable under any index).
    pub fn apply_to_user(&self, stored_index: u32, user: &mut UserStacks) -> Result<()> {
        copy_store(
            self.find(stored_index, "enc")
                .ok_or_else(|| Error::Checkpoint(format!("missing enc for user {stored_index}")))?,
            &mut user.enc.store,
        )?;
        copy_store(
            self.find(stored_index, "dec")
                .ok_or_else(|| Error::Checkpoint(format!("missing dec for user {stored_index}")))?,
            &mut user.dec.store,
        )?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.user_index.to_le_bytes());
            write_str(&mut out, &e.component);
            out.extend_from_slice(&(e.store.params.len() as u32).to_le_bytes());
            for p in &e.store.params {
                write_str(&mut out, &p.name);
                out.extend_from_slice(&(p.rows as u32).to_le_bytes());
                out.extend_from_slice(&(p.cols as u32).to_le_bytes());
                for v in &p.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n_entries = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n_entries);
        for _ in 0..n_entries {
            let user_index = r.u32()?;
            let component = r.string()?;
            let n_params = r.u32()? as usize;
            let mut store = ParamStore::new();
            for _ in 0..n_params {
                let name = r.string()?;
                let rows = r.u32()? as usize;
                let cols = r.u32()? as usize;
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows * cols {
                    data.push(r.f64()?);
                }
                store.params.push(Param {
                    name,
                    data,
                    rows,
                    cols,
                });
            }
            entries.push(Entry {
                user_index,
                component,
                store,
            });
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn copy_store(src: &ParamStore, dst: &mut ParamStore) -> Result<()> {
    if src.params.len() != dst.params.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: stored {} vs expected {}",
            src.params.len(),
            dst.params.len()
        )));
    }
    for (s, d) in src.params.iter().zip(dst.params.iter_mut()) {
        if s.name != d.name || s.rows != d.rows || s.cols != d.cols {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch: stored {}[{}x{}] vs expected {}[{}x{}]",
                s.name, s.rows, s.cols, d.name, d.rows, d.cols
            )));
        }
        d.data.copy_from_slice(&s.data);
    }
    Ok(())
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        let s = self.take(len)?;
        String::from_utf8(s.to_vec()).map_err(|_| Error::Checkpoint("bad utf8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecDims;
    use crate::training::assemble_users;

    fn dims() -> CodecDims {
        CodecDims {
            vocab: 9,
            d: 8,
            m: 8,
            c: 4,
            n: 6,
            l: 2,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            d_ff: 16,
            dropout: 0.0,
        }
    }

    #[test]
    fn byte_round_trip_is_bit_exact() {
        let users = assemble_users(2, &dims(), true, 77);
        let ck = Checkpoint::from_users(&users);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(ck, back);
    }

    #[test]
    fn apply_restores_checksums() {
        let dims = dims();
        let users = assemble_users(2, &dims, true, 78);
        let sums: Vec<u64> = users.iter().map(|u| u.checksum()).collect();
        let ck = Checkpoint::from_users(&users);
        // Different seed -> different parameters; applying restores exactly.
        let mut other = assemble_users(2, &dims, true, 79);
        assert_ne!(other[0].checksum(), sums[0]);
        ck.apply_to_users(&mut other).unwrap();
        let restored: Vec<u64> = other.iter().map(|u| u.checksum()).collect();
        assert_eq!(restored, sums);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let users = assemble_users(1, &dims(), false, 80);
        let ck = Checkpoint::from_users(&users);
        let other_dims = CodecDims {
            d: 16,
            m: 16,
            ..dims()
        };
        let mut other = assemble_users(1, &other_dims, false, 81);
        assert!(ck.apply_to_users(&mut other).is_err());
    }

    #[test]
    fn corrupt_bytes_rejected() {
        let users = assemble_users(1, &dims(), false, 82);
        let mut bytes = Checkpoint::from_users(&users).to_bytes();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let users2 = assemble_users(1, &dims(), false, 82);
        let mut truncated = Checkpoint::from_users(&users2).to_bytes();
        truncated.truncate(truncated.len() / 2);
        assert!(Checkpoint::from_bytes(&truncated).is_err());
    }
}
