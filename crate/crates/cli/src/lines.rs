use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::UsageError;

/// Lines handed to the worker pool at a time.
const CHUNK: usize = 4096;

pub fn require_file(path: &Path, flag: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(UsageError(format!("{flag} {}: no such file", path.display())).into())
    }
}

pub fn require_dir(path: &Path, flag: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(UsageError(format!("{flag} {}: no such directory", path.display())).into())
    }
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn write_json_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// `<path>` with `suffix` appended to its file name.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

/// Applies `f` to every non-blank line, in parallel chunks, and passes the
/// results to `sink` in input order. Line numbers start at 1.
pub fn map_lines<T, F, S>(path: &Path, f: F, mut sink: S) -> Result<()>
where
    T: Send,
    F: Fn(usize, &str) -> T + Sync,
    S: FnMut(usize, T) -> Result<()>,
{
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    loop {
        let mut chunk = Vec::with_capacity(CHUNK);
        for (i, line) in lines.by_ref() {
            let line = line.with_context(|| format!("{}: reading line {}", path.display(), i + 1))?;
            if !line.trim().is_empty() {
                chunk.push((i + 1, line));
            }
            if chunk.len() == CHUNK {
                break;
            }
        }
        if chunk.is_empty() {
            return Ok(());
        }
        let results: Vec<(usize, T)> = chunk.par_iter().map(|(n, l)| (*n, f(*n, l))).collect();
        for (n, r) in results {
            sink(n, r)?;
        }
    }
}

/// Reads a whole JSON Lines file; blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned + Send>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    map_lines(
        path,
        |_, l| serde_json::from_str::<T>(l),
        |n, r| {
            out.push(r.with_context(|| format!("{}: line {n}", path.display()))?);
            Ok(())
        },
    )?;
    Ok(out)
}

pub fn file_digest(path: &Path) -> Result<String> {
    let mut f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}
