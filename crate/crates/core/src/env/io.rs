//! Little-endian dataset container.
//!
//! ```text
//! header : "AFRL" | version u32 | M u32 | N u32 | count u64
//!          | action_free u8 | quality u8 | reserved [u8; 16]
//! body   : per transition  s [f32; M] | a [f32; N] (absent if action-free)
//!          | r f32 | s' [f32; M] | terminal u8
//! footer : episode count u64 | episode start u64 ...
//! ```

use std::path::Path;

use crate::codec::{read_file, write_file, Reader};
use crate::error::{Error, Result};

use super::{Dataset, Quality};

pub const DATASET_MAGIC: &[u8; 4] = b"AFRL";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8 + 1 + 1 + 16;

pub fn write_dataset(ds: &Dataset) -> Vec<u8> {
    let m = ds.state_dim();
    let n = ds.action_dim();
    let per = 4 * m * 2 + 4 + 1 + if ds.is_action_free() { 0 } else { 4 * n };
    let mut out = Vec::with_capacity(HEADER_LEN + per * ds.len() + 8 * (ds.episode_starts().len() + 1));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    out.push(u8::from(ds.is_action_free()));
    out.push(ds.quality().tag());
    out.extend_from_slice(&[0u8; 16]);
    let put = |out: &mut Vec<u8>, values: &[f32]| {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for i in 0..ds.len() {
        put(&mut out, ds.state(i));
        if let Some(a) = ds.action(i) {
            put(&mut out, a);
        }
        out.extend_from_slice(&ds.reward(i).to_le_bytes());
        put(&mut out, ds.next_state(i));
        out.push(u8::from(ds.terminal(i)));
    }
    out.extend_from_slice(&(ds.episode_starts().len() as u64).to_le_bytes());
    for s in ds.episode_starts() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn read_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file (magic mismatch)".into()));
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let m = r.u32("state dim")? as usize;
    let n = r.u32("action dim")? as usize;
    let count = r.u64("transition count")? as usize;
    let action_free = match r.u8("action-free flag")? {
        0 => false,
        1 => true,
        other => return Err(Error::Format(format!("bad action-free flag {other}"))),
    };
    let quality = Quality::from_tag(r.u8("quality tag")?)?;
    r.take(16, "reserved header bytes")?;
    if m == 0 || n == 0 {
        return Err(Error::Format("state and action dims must be positive".into()));
    }
    let per = 4 * (2 * m + 1) + 1 + if action_free { 0 } else { 4 * n };
    if count.saturating_mul(per) > r.remaining() {
        return Err(Error::Truncated("transition body"));
    }
    let mut states = Vec::with_capacity(count * m);
    let mut next_states = Vec::with_capacity(count * m);
    let mut actions = (!action_free).then(|| Vec::with_capacity(count * n));
    let mut rewards = Vec::with_capacity(count);
    let mut terminals = Vec::with_capacity(count);
    for _ in 0..count {
        r.f32s(m, &mut states, "state")?;
        if let Some(a) = actions.as_mut() {
            r.f32s(n, a, "action")?;
        }
        r.f32s(1, &mut rewards, "reward")?;
        r.f32s(m, &mut next_states, "next state")?;
        terminals.push(r.u8("terminal flag")? != 0);
    }
    let episodes = r.u64("episode count")? as usize;
    if episodes.saturating_mul(8) > r.remaining() {
        return Err(Error::Truncated("episode starts"));
    }
    let episode_starts = (0..episodes)
        .map(|_| r.u64("episode start"))
        .collect::<Result<Vec<_>>>()?;
    r.finish("episode table")?;
    Dataset::from_parts(
        m,
        n,
        states,
        actions,
        rewards,
        next_states,
        terminals,
        episode_starts,
        quality,
    )
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &write_dataset(ds))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(&read_file(path.as_ref())?)
}
