//! Checkpoint container: a `DQCKPT v1` header line, then for every parameter
//! in registration order a line `<name> <dtype> <rank> <d0> <d1> ...`
//! followed by its little-endian payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &str = "DQCKPT v1";

pub fn encode_checkpoint<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(store.numel() * T::BYTES + 64 * store.len());
    out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    out.push(b'\n');
    for (_, name, value) in store.iter() {
        let dims: Vec<String> = value.shape().iter().map(ToString::to_string).collect();
        let mut line = format!("{name} {} {}", T::DTYPE, value.rank());
        for d in dims {
            line.push(' ');
            line.push_str(&d);
        }
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
        for &x in value.data() {
            x.write_le(&mut out);
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::contract(format!("checkpoint: {}", msg.into()))
}

/// Loads every parameter of `store` from `bytes`. Names, order, dtype and
/// shapes must match exactly; on error `store` is left untouched.
pub fn decode_checkpoint<T: Real>(bytes: &[u8], store: &mut ParamStore<T>) -> Result<()> {
    let mut staged = store.clone();
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Result<String> {
        let rest = &bytes[*pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
        let line = std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))?;
        *pos += end + 1;
        Ok(line.to_string())
    };
    if next_line(&mut pos)? != CHECKPOINT_MAGIC {
        return Err(bad(format!("missing `{CHECKPOINT_MAGIC}` header")));
    }
    let ids: Vec<_> = staged.ids().collect();
    for id in ids {
        if pos >= bytes.len() {
            return Err(bad(format!("missing parameter `{}`", staged.name(id))));
        }
        let line = next_line(&mut pos)?;
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() < 3 {
            return Err(bad(format!("malformed record `{line}`")));
        }
        let (name, dtype) = (fields[0], fields[1]);
        if name != staged.name(id) {
            return Err(bad(format!("expected `{}`, found `{name}`", staged.name(id))));
        }
        if dtype != T::DTYPE {
            return Err(bad(format!("`{name}` stored as {dtype}, model uses {}", T::DTYPE)));
        }
        let rank: usize = fields[2].parse().map_err(|_| bad(format!("bad rank in `{line}`")))?;
        let shape = fields[3..]
            .iter()
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(format!("bad shape in `{line}`")))?;
        if shape.len() != rank {
            return Err(bad(format!("rank {rank} but {} dims in `{line}`", shape.len())));
        }
        if shape != staged.get(id).shape() {
            return Err(bad(format!(
                "`{name}` has shape {shape:?}, model expects {:?}",
                staged.get(id).shape()
            )));
        }
        let n: usize = shape.iter().product();
        let len = n * T::BYTES;
        if bytes.len() - pos < len {
            return Err(bad(format!("truncated payload of `{name}`")));
        }
        let data = bytes[pos..pos + len].chunks_exact(T::BYTES).map(T::read_le).collect();
        pos += len;
        staged.set(id, Tensor::new(&shape, data)?)?;
    }
    if pos != bytes.len() {
        return Err(bad("trailing data after the last parameter"));
    }
    *store = staged;
    Ok(())
}

pub fn write_checkpoint<T: Real>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(store))?;
    Ok(())
}

pub fn read_checkpoint<T: Real>(path: &Path, store: &mut ParamStore<T>) -> Result<()> {
    decode_checkpoint(&std::fs::read(path)?, store)
}
