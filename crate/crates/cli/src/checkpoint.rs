//! `PXC1` checkpoints: magic, version and tensor count, then for each
//! tensor its name, rank, dims and little-endian `f64` payload. All
//! integers are little-endian `u32`.

use pixclust_core::network::ParameterStore;
use pixclust_core::tensor::Tensor;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"PXC1";
pub const VERSION: u32 = 1;

pub fn encode(params: &ParameterStore) -> Vec<u8> {
    let mut out = Vec::new();
    let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(MAGIC);
    u32le(&mut out, VERSION as usize);
    u32le(&mut out, params.entries().len());
    for (name, t) in params.entries() {
        u32le(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        u32le(&mut out, t.dims().len());
        for &d in t.dims() {
            u32le(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(CliError::format("checkpoint", "truncated"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParameterStore> {
    let mut r = Reader { buf: bytes };
    if r.take(4)? != MAGIC {
        return Err(CliError::format("checkpoint", "missing PXC1 magic"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(CliError::format("checkpoint", format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CliError::format("checkpoint", "tensor name is not UTF-8"))?
            .to_owned();
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| CliError::format("checkpoint", "tensor too large"))?;
        let payload = r.take(numel.checked_mul(8).ok_or_else(|| CliError::format("checkpoint", "tensor too large"))?)?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        entries.push((name, Tensor::from_vec(&dims, data)?));
    }
    if !r.buf.is_empty() {
        return Err(CliError::format("checkpoint", format!("{} trailing bytes", r.buf.len())));
    }
    Ok(ParameterStore::new(entries))
}
