//! VNET checkpoints: magic `VNET`, version u32, tensor count u32, then per
//! tensor a layer-kind byte, rank byte and u32 dims; all weights follow as
//! little-endian f32 in table order.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::models::Network;

pub const VNET_MAGIC: &[u8; 4] = b"VNET";
pub const VNET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}, expected \"VNET\"")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("layer table mismatch at tensor {index}: file has {found}, network expects {expected}")]
    LayerMismatch {
        index: usize,
        found: String,
        expected: String,
    },
    #[error("{0} trailing bytes after weights")]
    TrailingBytes(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn describe(kind: u8, shape: &[usize]) -> String {
    format!("kind {kind} shape {shape:?}")
}

pub fn to_vnet_bytes<N: Network + ?Sized>(net: &N) -> Vec<u8> {
    let params = net.params();
    let mut out = Vec::new();
    out.extend_from_slice(VNET_MAGIC);
    out.extend_from_slice(&VNET_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (kind, p) in &params {
        out.push(*kind as u8);
        out.push(p.shape.len() as u8);
        for &d in &p.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, p) in &params {
        for &v in &p.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(what))?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Loads weights into `net`, validating the layer table first. Gradients and
/// momentum buffers are reset.
pub fn from_vnet_bytes<N: Network + ?Sized>(net: &mut N, bytes: &[u8]) -> Result<(), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if &magic != VNET_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VNET_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = r.u32("tensor count")? as usize;
    let expected: Vec<(u8, Vec<usize>)> = net.params().iter().map(|(k, p)| (*k as u8, p.shape.clone())).collect();
    if count != expected.len() {
        return Err(CheckpointError::LayerMismatch {
            index: count.min(expected.len()),
            found: format!("{count} tensors"),
            expected: format!("{} tensors", expected.len()),
        });
    }
    for (index, (ek, es)) in expected.iter().enumerate() {
        let kind = r.take(1, "layer kind")?[0];
        let rank = r.take(1, "layer rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("layer dims")? as usize);
        }
        if kind != *ek || &shape != es {
            return Err(CheckpointError::LayerMismatch {
                index,
                found: describe(kind, &shape),
                expected: describe(*ek, es),
            });
        }
    }
    let mut values = Vec::new();
    for (_, p) in net.params() {
        let raw = r.take(4 * p.len(), "weights")?;
        values.push(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect::<Vec<_>>());
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    for (p, v) in net.params_mut().into_iter().zip(values) {
        p.data = v;
        p.zero_grad();
        p.velocity.iter_mut().for_each(|x| *x = 0.0);
    }
    Ok(())
}

pub fn save_checkpoint<N: Network + ?Sized>(net: &N, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    fs::write(path, to_vnet_bytes(net))?;
    Ok(())
}

pub fn load_checkpoint<N: Network + ?Sized>(net: &mut N, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let bytes = fs::read(path)?;
    from_vnet_bytes(net, &bytes)
}

/// Rounds every weight to f32 so in-memory inference matches a reloaded
/// checkpoint exactly.
pub fn quantize<N: Network + ?Sized>(net: &mut N) {
    for p in net.params_mut() {
        p.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

