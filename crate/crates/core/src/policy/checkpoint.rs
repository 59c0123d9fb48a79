//! Binary checkpoints.
//!
//! ```text
//! magic      8 bytes  "KVRPOL01"
//! vocab      u64 LE
//! window     u64 LE
//! embed      u64 LE
//! hidden     u64 LE
//! seed       u64 LE
//! count      u64 LE   number of parameters that follow
//! values     count × f64 LE
//! ```

use std::path::Path;

use super::params::{PolicyConfig, PolicyParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"KVRPOL01";
const HEADER_LEN: usize = 8 + 6 * 8;

pub fn to_bytes(params: &PolicyParams) -> Vec<u8> {
    let c = &params.config;
    let mut out = Vec::with_capacity(HEADER_LEN + params.len() * 8);
    out.extend_from_slice(MAGIC);
    for v in [
        c.vocab_size as u64,
        c.context_window as u64,
        c.embed_dim as u64,
        c.hidden_dim as u64,
        c.seed,
        params.len() as u64,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<PolicyParams> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(Error::input("not a policy checkpoint"));
    }
    let field = |i: usize| u64::from_le_bytes(bytes[8 + i * 8..16 + i * 8].try_into().expect("8 bytes"));
    let config = PolicyConfig {
        vocab_size: field(0) as usize,
        context_window: field(1) as usize,
        embed_dim: field(2) as usize,
        hidden_dim: field(3) as usize,
        seed: field(4),
    };
    config.validate()?;
    let count = field(5) as usize;
    if count != config.param_count() {
        return Err(Error::structural(format!(
            "checkpoint declares {count} parameters, configuration implies {}",
            config.param_count()
        )));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() != count * 8 {
        return Err(Error::structural(format!(
            "checkpoint body holds {} bytes, expected {}",
            body.len(),
            count * 8
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    PolicyParams::from_values(config, values)
}

pub fn save(path: &Path, params: &PolicyParams) -> Result<()> {
    std::fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<PolicyParams> {
    from_bytes(&std::fs::read(path)?)
}
