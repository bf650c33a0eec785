//! Versioned binary checkpoints: model dims, seed, both embedding matrices,
//! Adam state, and the threshold snapshot. Round-trips are bit-exact.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::model::{AdamState, FactorModel, ModelError};
use crate::quantile::ThresholdTable;

const MAGIC: &[u8; 8] = b"TALOSCKP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A complete training state snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: FactorModel,
    pub adam: AdamState,
    pub thresholds: ThresholdTable,
    pub seed: u64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        write_u32(w, VERSION)?;
        write_u64(w, self.model.num_users() as u64)?;
        write_u64(w, self.model.num_items() as u64)?;
        write_u64(w, self.model.dim() as u64)?;
        write_u64(w, self.seed)?;
        write_f64_slice(w, self.model.user_matrix())?;
        write_f64_slice(w, self.model.item_matrix())?;

        write_f64(w, self.adam.learning_rate)?;
        write_f64(w, self.adam.weight_decay)?;
        write_u64(w, self.adam.step)?;
        let (mu, vu, mi, vi) = self.adam.moments();
        write_f64_slice(w, mu)?;
        write_f64_slice(w, vu)?;
        write_f64_slice(w, mi)?;
        write_f64_slice(w, vi)?;

        write_u32(w, self.thresholds.k)?;
        write_f64(w, self.thresholds.learning_rate)?;
        write_f64_slice(w, self.thresholds.values())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Format("wrong magic bytes".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(CheckpointError::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let num_users = read_u64(r)? as usize;
        let num_items = read_u64(r)? as usize;
        let dim = read_u64(r)? as usize;
        let seed = read_u64(r)?;
        let n_user = num_users
            .checked_mul(dim)
            .ok_or_else(|| CheckpointError::Format("user matrix overflow".into()))?;
        let n_item = num_items
            .checked_mul(dim)
            .ok_or_else(|| CheckpointError::Format("item matrix overflow".into()))?;
        let user_emb = read_f64_vec(r, n_user)?;
        let item_emb = read_f64_vec(r, n_item)?;
        let model = FactorModel::from_parts(num_users, num_items, dim, user_emb, item_emb)?;

        let lr = read_f64(r)?;
        let wd = read_f64(r)?;
        let step = read_u64(r)?;
        let m_user = read_f64_vec(r, n_user)?;
        let v_user = read_f64_vec(r, n_user)?;
        let m_item = read_f64_vec(r, n_item)?;
        let v_item = read_f64_vec(r, n_item)?;
        let adam = AdamState::from_parts(lr, wd, step, m_user, v_user, m_item, v_item);

        let k = read_u32(r)?;
        let t_lr = read_f64(r)?;
        let beta = read_f64_vec(r, num_users)?;
        let thresholds = ThresholdTable::from_values(beta, t_lr, k);

        Ok(Self {
            model,
            adam,
            thresholds,
            seed,
        })
    }
}

fn write_u32<W: Write>(w: &mut W, x: u32) -> io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn write_u64<W: Write>(w: &mut W, x: u64) -> io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn write_f64<W: Write>(w: &mut W, x: f64) -> io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn write_f64_slice<W: Write>(w: &mut W, xs: &[f64]) -> io::Result<()> {
    write_u64(w, xs.len() as u64)?;
    for &x in xs {
        write_f64(w, x)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_f64_vec<R: Read>(r: &mut R, expected: usize) -> Result<Vec<f64>, CheckpointError> {
    let len = read_u64(r)? as usize;
    if len != expected {
        return Err(CheckpointError::Format(format!(
            "array length {len}, expected {expected}"
        )));
    }
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(read_f64(r)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_checkpoint() -> Checkpoint {
        let model = FactorModel::init(3, 5, 4, 99);
        let adam = AdamState::new(&model, 0.01, 1e-6);
        let mut thresholds = ThresholdTable::new(3, 2);
        thresholds.set(1, -0.125);
        Checkpoint {
            model,
            adam,
            thresholds,
            seed: 1234,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = sample_checkpoint();
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        let loaded = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(ckpt, loaded);

        // Serializing the loaded copy reproduces the bytes.
        let mut buf2 = Vec::new();
        loaded.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut buf = Vec::new();
        sample_checkpoint().write_to(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(
            Checkpoint::read_from(&mut buf.as_slice()),
            Err(CheckpointError::Format(_))
        ));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut buf = Vec::new();
        sample_checkpoint().write_to(&mut buf).unwrap();
        buf.truncate(buf.len() / 2);
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample_checkpoint();
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
    }
}
