//! Model checkpoint format.
//!
//! Layout: the 5-byte magic `SGXP1`, an 8-byte little-endian byte length
//! followed by the JSON architecture, then one block per parameter in
//! declaration order. Each block is an 8-byte little-endian byte length
//! followed by little-endian `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use super::{Architecture, Network};
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SGXP1";

pub fn write_checkpoint<T: Real, W: Write>(net: &Network<T>, mut w: W) -> Result<()> {
    let io = |e| Error::io("<checkpoint>", e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    let json = serde_json::to_vec(net.architecture())?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for p in net.params() {
        let bytes: Vec<u8> = p
            .value
            .data()
            .iter()
            .flat_map(|v| (v.as_f64() as f32).to_le_bytes())
            .collect();
        w.write_all(&(bytes.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&bytes).map_err(io)?;
    }
    Ok(())
}

pub fn read_checkpoint<T: Real, R: Read>(mut r: R) -> Result<Network<T>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| Error::io("<checkpoint>", e))?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if buf.len() < *off + n {
            return Err(Error::Format {
                offset: *off,
                detail: format!("truncated checkpoint, wanted {n} more bytes"),
            });
        }
        let s = &buf[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 5)? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad checkpoint magic".into(),
        });
    }
    let len_at = |off: &mut usize| -> Result<usize> {
        let b = take(off, 8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
    };
    let json_len = len_at(&mut off)?;
    let json_at = off;
    let arch: Architecture = serde_json::from_slice(take(&mut off, json_len)?).map_err(|e| Error::Format {
        offset: json_at,
        detail: format!("architecture JSON: {e}"),
    })?;
    let mut net = Network::<T>::zeroed(arch)?;
    for i in 0..net.params().len() {
        let at = off;
        let n = len_at(&mut off)?;
        let expected = net.params()[i].value.len() * 4;
        if n != expected {
            return Err(Error::Format {
                offset: at,
                detail: format!(
                    "block for {} holds {n} bytes, expected {expected}",
                    net.params()[i].name
                ),
            });
        }
        let bytes = take(&mut off, n)?;
        for (v, chunk) in net.params_mut()[i]
            .value
            .data_mut()
            .iter_mut()
            .zip(bytes.chunks_exact(4))
        {
            *v = T::lit(f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64);
        }
    }
    if off != buf.len() {
        return Err(Error::Format {
            offset: off,
            detail: "trailing bytes after last parameter block".into(),
        });
    }
    Ok(net)
}

pub fn save_checkpoint<T: Real>(net: &Network<T>, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(net, &mut bytes)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Network<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(f))
}
