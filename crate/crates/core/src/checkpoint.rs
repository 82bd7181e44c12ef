//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "GTNCKPT1"
//! n, m, d    3 x u64
//! seed       u64
//! epoch      u64
//! step       u64       Adam steps taken
//! rng        32-byte ChaCha seed, u64 stream, u128 word position
//! E_in       (n+m)*d x f64, row-major
//! moment 1   (n+m)*d x f64
//! moment 2   (n+m)*d x f64
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::training::ModelState;

pub const MAGIC: &[u8; 8] = b"GTNCKPT1";
const HEADER_LEN: usize = 8 + 6 * 8 + 32 + 8 + 16;

pub fn encode_checkpoint(state: &ModelState) -> Vec<u8> {
    let values = state.embeddings.len();
    let mut buf = Vec::with_capacity(HEADER_LEN + 3 * values * 8);
    buf.extend_from_slice(MAGIC);
    for v in [
        state.num_users as u64,
        state.num_items as u64,
        state.dim() as u64,
        state.seed,
        state.epoch,
        state.step,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&state.rng.get_seed());
    buf.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    buf.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    for m in [&state.embeddings, &state.first_moment, &state.second_moment] {
        for x in m.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos + len;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::CheckpointIntegrity(format!("truncated at byte {} of {}", self.bytes.len(), end)))?;
        self.pos = end;
        Ok(slice)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelState> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(MAGIC.len())]).into_owned();
        return Err(Error::CheckpointVersion(format!(
            "expected magic {:?}, found {found:?}",
            std::str::from_utf8(MAGIC).expect("ascii")
        )));
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let num_users = r.u64()? as usize;
    let num_items = r.u64()? as usize;
    let dim = r.u64()? as usize;
    let seed = r.u64()?;
    let epoch = r.u64()?;
    let step = r.u64()?;
    let rng_seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));

    let rows = num_users
        .checked_add(num_items)
        .ok_or_else(|| Error::CheckpointIntegrity("node count overflows".into()))?;
    let count = rows
        .checked_mul(dim)
        .ok_or_else(|| Error::CheckpointIntegrity("matrix size overflows".into()))?;
    let expected = count
        .checked_mul(24)
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::CheckpointIntegrity("matrix size overflows".into()))?;
    if bytes.len() != expected {
        return Err(Error::CheckpointIntegrity(format!(
            "expected {expected} bytes for {rows}x{dim} matrices, found {}",
            bytes.len()
        )));
    }
    let mut matrix = || -> Result<Array2<f64>> {
        let raw = r.take(count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Array2::from_shape_vec((rows, dim), data).expect("length checked"))
    };
    let embeddings = matrix()?;
    let first_moment = matrix()?;
    let second_moment = matrix()?;

    let mut rng = ChaCha8Rng::from_seed(rng_seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(ModelState {
        num_users,
        num_items,
        seed,
        epoch,
        embeddings,
        first_moment,
        second_moment,
        step,
        rng,
    })
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and checks it matches the expected `n`, `m`, `d`.
pub fn load_checkpoint_for(path: &Path, num_users: usize, num_items: usize, dim: usize) -> Result<ModelState> {
    let state = load_checkpoint(path)?;
    let found = (state.num_users, state.num_items, state.dim());
    if found != (num_users, num_items, dim) {
        return Err(Error::CheckpointShape(format!(
            "{} holds n={} m={} d={}, run expects n={num_users} m={num_items} d={dim}",
            path.display(),
            found.0,
            found.1,
            found.2
        )));
    }
    Ok(state)
}

/// Hex SHA-256 of the encoded checkpoint; identifies a trained state.
pub fn state_digest(state: &ModelState) -> String {
    Sha256::digest(encode_checkpoint(state))
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
