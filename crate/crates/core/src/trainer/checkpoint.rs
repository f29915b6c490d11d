//! Parameter and running-statistics snapshots.
//!
//! Layout, all integers little-endian `u64` unless noted:
//!
//! ```text
//! b"MSDC"  version: u32 (1)
//! hash_len  hash bytes (UTF-8 config hash)
//! num_params, then per tensor: ndim, dims..., f64 values
//! num_stats, then per layer: channels, f64 means, f64 variances
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::tensor::{RunningStats, Tensor};

const MAGIC: &[u8; 4] = b"MSDC";
const VERSION: u32 = 1;

pub fn save_checkpoint(graph: &NetworkGraph, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let u = |out: &mut BufWriter<File>, v: usize| out.write_all(&(v as u64).to_le_bytes());
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let hash = graph.config().arch_hash();
    u(&mut out, hash.len())?;
    out.write_all(hash.as_bytes())?;
    u(&mut out, graph.params().len())?;
    for p in graph.params() {
        u(&mut out, p.shape().len())?;
        for &d in p.shape() {
            u(&mut out, d)?;
        }
        for v in p.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    u(&mut out, graph.stats().len())?;
    for s in graph.stats() {
        u(&mut out, s.channels())?;
        for v in s.mean.iter().chain(&s.var) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct Reader<'a> {
    input: BufReader<File>,
    path: &'a Path,
}

impl Reader<'_> {
    fn bad(&self, reason: impl Into<String>) -> Error {
        Error::Format { path: self.path.to_path_buf(), reason: reason.into() }
    }

    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.input.read_exact(&mut b).map_err(|_| self.bad("unexpected end of file"))?;
        Ok(b)
    }

    fn count(&mut self, limit: usize) -> Result<usize> {
        let v = u64::from_le_bytes(self.bytes()?) as usize;
        if v > limit {
            return Err(self.bad(format!("count {v} is implausibly large")));
        }
        Ok(v)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.bytes()?))).collect()
    }
}

/// Loads a checkpoint into `graph`, refusing one written for a different
/// architecture.
pub fn load_checkpoint(graph: &mut NetworkGraph, path: &Path) -> Result<()> {
    let mut r = Reader { input: BufReader::new(File::open(path)?), path };
    if &r.bytes::<4>()? != MAGIC {
        return Err(r.bad("not a checkpoint file"));
    }
    if u32::from_le_bytes(r.bytes()?) != VERSION {
        return Err(r.bad("unsupported checkpoint version"));
    }
    let hash_len = r.count(256)?;
    let mut hash = vec![0u8; hash_len];
    r.input.read_exact(&mut hash).map_err(|_| r.bad("unexpected end of file"))?;
    let found = String::from_utf8(hash).map_err(|_| r.bad("config hash is not UTF-8"))?;
    let expected = graph.config().arch_hash();
    if found != expected {
        return Err(Error::HashMismatch { expected, found });
    }
    let limit = 1 << 32;
    let mut params = Vec::new();
    for _ in 0..r.count(limit)? {
        let ndim = r.count(8)?;
        let dims = (0..ndim).map(|_| r.count(limit)).collect::<Result<Vec<_>>>()?;
        let data = r.floats(dims.iter().product())?;
        params.push(Tensor::new(dims, data)?);
    }
    let mut stats = Vec::new();
    for _ in 0..r.count(limit)? {
        let c = r.count(limit)?;
        let mean = r.floats(c)?;
        let var = r.floats(c)?;
        stats.push(RunningStats { mean, var });
    }
    if r.input.read(&mut [0u8; 1])? != 0 {
        return Err(r.bad("trailing bytes"));
    }
    graph.load_state(params, stats)
}
