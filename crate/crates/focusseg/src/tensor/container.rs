//! Binary tensor container: magic "FRNT", version u16, rank u16, extents as
//! u64 little-endian, then the raw little-endian f64 payload. Used for
//! checkpoints and test fixtures.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FRNT";
const VERSION: u16 = 1;

pub fn write_tensor(w: &mut impl Write, tensor: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let rank = tensor.shape().len() as u16;
    w.write_all(&rank.to_le_bytes())?;
    for &extent in tensor.shape() {
        w.write_all(&(extent as u64).to_le_bytes())?;
    }
    for &v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let fail = |reason: &str| Error::Format {
        path: "<tensor container>".into(),
        reason: reason.into(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(fail("bad magic, expected FRNT"));
    }
    let mut u16buf = [0u8; 2];
    r.read_exact(&mut u16buf)?;
    let version = u16::from_le_bytes(u16buf);
    if version != VERSION {
        return Err(fail(&format!("unsupported container version {version}")));
    }
    r.read_exact(&mut u16buf)?;
    let rank = u16::from_le_bytes(u16buf) as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut u64buf = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut u64buf)?;
        shape.push(u64::from_le_bytes(u64buf) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        r.read_exact(&mut u64buf)?;
        data.push(f64::from_le_bytes(u64buf));
    }
    Tensor::from_vec(&shape, data)
}
