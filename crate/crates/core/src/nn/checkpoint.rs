//! Parameter checkpoints: `SPLNN1` followed by records of
//! `name_len u32 | name | rank u32 | extents u32... | f32 payload`, all little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{Layer, Network};
use crate::error::{Error, Result};
use crate::linalg::Tensor;

const MAGIC: &[u8; 6] = b"SPLNN1";

pub fn write_checkpoint<W: Write>(net: &Network, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in net.named_tensors() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        w.write_all(&t.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(net, f)
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos.checked_add(n).filter(|&e| e <= buf.len()).ok_or_else(|| {
        Error::Format(format!("checkpoint truncated at byte {}", *pos))
    })?;
    let s = &buf[*pos..end];
    *pos = end;
    Ok(s)
}

fn take_u32(buf: &[u8], pos: &mut usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, pos, 4)?.try_into().unwrap()))
}

/// Parses every record of a checkpoint stream.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let mut pos = MAGIC.len();
    let mut out = Vec::new();
    while pos < buf.len() {
        let nlen = take_u32(&buf, &mut pos)? as usize;
        let name = String::from_utf8(take(&buf, &mut pos, nlen)?.to_vec())
            .map_err(|_| Error::Format("checkpoint name is not UTF-8".into()))?;
        let rank = take_u32(&buf, &mut pos)? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("implausible rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(take_u32(&buf, &mut pos)? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = take(&buf, &mut pos, n.checked_mul(4).ok_or_else(|| Error::Format("overflow".into()))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Loads a checkpoint into `net`; names and shapes must match exactly.
pub fn load_checkpoint(net: &mut Network, path: impl AsRef<Path>) -> Result<()> {
    let records = read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))?;
    apply_records(net, records)
}

pub(crate) fn apply_records(net: &mut Network, records: Vec<(String, Tensor)>) -> Result<()> {
    let expected: Vec<(String, Vec<usize>)> = net
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != records.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, network needs {}",
            records.len(),
            expected.len()
        )));
    }
    for ((n, s), (rn, rt)) in expected.iter().zip(&records) {
        if n != rn || s.as_slice() != rt.shape() {
            return Err(Error::Format(format!(
                "checkpoint record {rn} {:?} does not match {n} {s:?}",
                rt.shape()
            )));
        }
    }
    let mut it = records.into_iter().map(|(_, t)| t);
    for layer in net.layers_mut() {
        for p in layer.params_mut() {
            *p = it.next().unwrap();
        }
        if let Layer::BatchNorm(bn) = layer {
            bn.running_mean = it.next().unwrap();
            bn.running_var = it.next().unwrap();
        }
    }
    Ok(())
}
