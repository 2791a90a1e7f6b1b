//! Canonical binary event file.
//!
//! ```text
//! magic      b"CNDE"
//! version    u16 LE
//! num_nodes  u64 LE
//! num_events u64 LE
//! d_e        u32 LE
//! d_v        u32 LE
//! events     num_events × (src u64, dst u64, t f64, d_e × f64), all LE
//! node_feat  num_nodes × d_v × f64 LE
//! ```
//!
//! Events are written in log order, so a re-read log is identical.

use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{EventLog, GraphError, RawEvent, Result};

pub const MAGIC: &[u8; 4] = b"CNDE";
pub const VERSION: u16 = 1;

pub fn encode(log: &EventLog) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + log.len() * (24 + 8 * log.d_e()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(log.num_nodes() as u64).to_le_bytes());
    out.extend_from_slice(&(log.len() as u64).to_le_bytes());
    out.extend_from_slice(&(log.d_e() as u32).to_le_bytes());
    out.extend_from_slice(&(log.d_v() as u32).to_le_bytes());
    for e in log.events() {
        out.extend_from_slice(&(e.src as u64).to_le_bytes());
        out.extend_from_slice(&(e.dst as u64).to_le_bytes());
        out.extend_from_slice(&e.t.to_le_bytes());
        for &f in &e.edge_feat {
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    for &f in log.node_feats() {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|_| GraphError::Format("truncated event file".into()))?;
    Ok(b)
}

pub fn decode(mut bytes: &[u8]) -> Result<EventLog> {
    let r = &mut bytes;
    if &take::<4>(r)? != MAGIC {
        return Err(GraphError::Format("bad magic".into()));
    }
    let version = u16::from_le_bytes(take(r)?);
    if version != VERSION {
        return Err(GraphError::Format(format!("unsupported version {version}")));
    }
    let num_nodes = u64::from_le_bytes(take(r)?) as usize;
    let num_events = u64::from_le_bytes(take(r)?) as usize;
    let d_e = u32::from_le_bytes(take(r)?) as usize;
    let d_v = u32::from_le_bytes(take(r)?) as usize;
    let mut raw = Vec::with_capacity(num_events);
    for _ in 0..num_events {
        let src = u64::from_le_bytes(take(r)?) as usize;
        let dst = u64::from_le_bytes(take(r)?) as usize;
        let t = f64::from_le_bytes(take(r)?);
        let edge_feat = (0..d_e)
            .map(|_| take(r).map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        raw.push(RawEvent { src, dst, t, edge_feat });
    }
    let node_feat = (0..num_nodes * d_v)
        .map(|_| take(r).map(f64::from_le_bytes))
        .collect::<Result<Vec<_>>>()?;
    if !r.is_empty() {
        return Err(GraphError::Format(format!("{} trailing bytes", r.len())));
    }
    EventLog::new(raw, Some(num_nodes), d_v, Some(node_feat))
}

pub fn write(path: &Path, log: &EventLog) -> Result<String> {
    let bytes = encode(log);
    std::fs::write(path, &bytes)?;
    Ok(content_hash(&bytes))
}

pub fn read(path: &Path) -> Result<EventLog> {
    decode(&std::fs::read(path)?)
}

/// Hex SHA-256 of a byte string.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut a = RawEvent::new(0, 2, 0.5);
        a.edge_feat = vec![1.5, -0.25];
        let mut b = RawEvent::new(2, 1, 0.125);
        b.edge_feat = vec![0.0, 3.0];
        let log = EventLog::new(vec![a, b], Some(4), 2, Some((0..8).map(f64::from).collect())).unwrap();
        let bytes = encode(&log);
        assert_eq!(decode(&bytes).unwrap(), log);
        assert_eq!(content_hash(&bytes), content_hash(&encode(&log)));
    }

    #[test]
    fn rejects_truncation() {
        let log = EventLog::new(vec![RawEvent::new(0, 1, 0.0)], None, 0, None).unwrap();
        let bytes = encode(&log);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"XXXX").is_err());
    }
}
