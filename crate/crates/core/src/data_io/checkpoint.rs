//! `.segc` checkpoints.
//!
//! All integers are little-endian `u32`.
//!
//! ```text
//! "SEGC" | version | digest_len | digest (UTF-8) | count
//! count × ( name_len | name (UTF-8) | rank | extents[rank] | f32 values )
//! crc32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{CheckpointFault, Error, Result};
use crate::network::{Network, NetworkParams, UNetConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SEGC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Network configuration digest (see [`UNetConfig::digest`]); empty for
    /// bare parameter sets.
    pub digest: String,
    pub params: NetworkParams<f32>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

pub fn encode_checkpoint(params: &NetworkParams<f32>, digest: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.scalar_count() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION as usize);
    put_u32(&mut out, digest.len());
    out.extend_from_slice(digest.as_bytes());
    put_u32(&mut out, params.len());
    for (name, t) in params.iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len());
        for &e in t.shape() {
            put_u32(&mut out, e);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn fault(kind: CheckpointFault, offset: usize, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        kind,
        offset,
        reason: reason.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(fault(
                CheckpointFault::Truncated,
                self.bytes.len(),
                format!("need {n} bytes for {what} at byte {}", self.pos),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let at = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| fault(CheckpointFault::Utf8, at, format!("{what} is not UTF-8")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(fault(CheckpointFault::Magic, 0, "magic is not SEGC"));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(fault(
            CheckpointFault::Version,
            4,
            format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    // The trailer must stay in reach of every structural read below.
    if bytes.len() < 12 {
        return Err(fault(
            CheckpointFault::Truncated,
            bytes.len(),
            "missing checksum",
        ));
    }
    let body_len = bytes.len() - 4;
    r.bytes = &bytes[..body_len];

    let digest = r.string("config digest")?;
    let count = r.u32("tensor count")?;
    let mut params = NetworkParams::new();
    for i in 0..count {
        let name_at = r.pos;
        let name = r.string("tensor name")?;
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(fault(
                CheckpointFault::BadShape,
                r.pos - 4,
                format!("tensor `{name}` has rank {rank}"),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let e = r.u32("extent")? as usize;
            numel = numel.saturating_mul(e);
            shape.push(e);
        }
        if shape.contains(&0) {
            return Err(fault(
                CheckpointFault::BadShape,
                r.pos,
                format!("tensor `{name}` has a zero extent {shape:?}"),
            ));
        }
        let raw = r.take(numel.saturating_mul(4), "tensor values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(shape, data)?;
        if params.get(&name).is_some() {
            return Err(fault(
                CheckpointFault::DuplicateName,
                name_at,
                format!("tensor {i} repeats name `{name}`"),
            ));
        }
        params.push(name, tensor)?;
    }
    if r.pos != body_len {
        return Err(fault(
            CheckpointFault::TrailingBytes,
            r.pos,
            format!("{} unexpected bytes before checksum", body_len - r.pos),
        ));
    }
    let t = &bytes[body_len..];
    let stored = u32::from_le_bytes([t[0], t[1], t[2], t[3]]);
    let actual = crc32fast::hash(&bytes[..body_len]);
    if stored != actual {
        return Err(fault(
            CheckpointFault::Checksum,
            body_len,
            format!("crc32 {actual:#010x} does not match stored {stored:#010x}"),
        ));
    }
    Ok(Checkpoint { digest, params })
}

pub fn save_checkpoint(
    params: &NetworkParams<f32>,
    digest: &str,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params, digest)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_network(net: &Network<f32>, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint(net.params(), &net.config().digest(), path)
}

/// Loads a checkpoint and rebuilds the network its digest describes.
pub fn load_network(path: impl AsRef<Path>) -> Result<Network<f32>> {
    let ck = load_checkpoint(path)?;
    let config = UNetConfig::from_digest(&ck.digest)
        .map_err(|e| fault(CheckpointFault::Mismatch, 0, format!("config digest: {e}")))?;
    Network::from_params(config, ck.params)
        .map_err(|e| fault(CheckpointFault::Mismatch, 0, e.to_string()))
}
