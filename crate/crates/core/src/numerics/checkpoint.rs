//! Checkpoint file format.
//!
//! ```text
//! GTADCKPT v1\n
//! <name> <d0>,<d1>,...\n<numel × f64 little-endian>
//! ... one record per parameter, in store order
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::param::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "GTADCKPT v1";

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    writeln!(w, "{CHECKPOINT_MAGIC}")?;
    for (_, p) in store.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        writeln!(w, "{} {}", p.name, dims.join(","))?;
        let mut buf = Vec::with_capacity(p.value.numel() * 8);
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn checkpoint_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    write_checkpoint(store, &mut out).expect("in-memory write");
    out
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<ParamStore> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end_matches('\n') != CHECKPOINT_MAGIC {
        return Err(Error::Parse(format!("bad checkpoint magic {:?}", line.trim_end())));
    }
    let mut store = ParamStore::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            break;
        }
        let header = line.trim_end_matches('\n');
        let (name, dims) = header
            .split_once(' ')
            .ok_or_else(|| Error::Parse(format!("bad record header {header:?}")))?;
        let shape = dims
            .split(',')
            .map(|d| d.parse::<usize>().map_err(|e| Error::Parse(format!("{header:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.add(name, Tensor::new(&shape, data)?)?;
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(store, std::io::BufWriter::new(f))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    read_checkpoint(std::fs::File::open(path)?)
}

/// Copies values from `loaded` into `target`, requiring identical names and
/// shapes in identical order.
pub fn restore_into(target: &mut ParamStore, loaded: &ParamStore) -> Result<()> {
    if target.len() != loaded.len() {
        return Err(Error::Parse(format!(
            "checkpoint has {} parameters, model expects {}",
            loaded.len(),
            target.len()
        )));
    }
    let ids: Vec<_> = target.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for ((id, name), (_, src)) in ids.into_iter().zip(loaded.iter()) {
        if name != src.name {
            return Err(Error::Parse(format!("expected parameter {name}, found {}", src.name)));
        }
        target.set_value(id, src.value.clone())?;
    }
    Ok(())
}
