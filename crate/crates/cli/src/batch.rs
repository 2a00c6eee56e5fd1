//! Row-parallel JSONL processing with input-ordered results.
//!
//! Lines are read in chunks so memory stays proportional to the chunk, not
//! the file. Each chunk is mapped on the pool and handed to the sink in
//! input order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::Context as _;
use rayon::prelude::*;

use crate::{CmdResult, Ctx, Failure};

const CHUNK_PER_THREAD: usize = 32;

pub fn open(path: &Path) -> CmdResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .with_context(|| format!("cannot open {}", path.display()))
        .map_err(Failure::Io)
}

pub fn create(path: &Path) -> CmdResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("cannot create {}", dir.display()))
            .map_err(Failure::Io)?;
    }
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("cannot create {}", path.display()))
        .map_err(Failure::Io)
}

pub fn io_err(e: std::io::Error, what: &Path) -> Failure {
    Failure::Io(anyhow::Error::new(e).context(format!("i/o on {}", what.display())))
}

/// Calls `sink(line_no, work(line))` for every non-blank line, in order.
/// Line numbers are 1-based.
pub fn process<T, W, S>(ctx: &Ctx, input: &Path, work: W, mut sink: S) -> CmdResult
where
    T: Send,
    W: Fn(&str) -> T + Sync,
    S: FnMut(usize, T) -> CmdResult,
{
    let chunk_len = CHUNK_PER_THREAD * ctx.pool.current_num_threads().max(1);
    let mut lines = open(input)?.lines().enumerate();
    loop {
        let mut chunk = Vec::with_capacity(chunk_len);
        for (i, line) in lines.by_ref() {
            let line = line.map_err(|e| io_err(e, input))?;
            if line.trim().is_empty() {
                continue;
            }
            chunk.push((i + 1, line));
            if chunk.len() == chunk_len {
                break;
            }
        }
        if chunk.is_empty() {
            return Ok(());
        }
        let done: Vec<(usize, T)> = ctx
            .pool
            .install(|| chunk.par_iter().map(|(n, line)| (*n, work(line))).collect());
        for (n, out) in done {
            sink(n, out)?;
        }
    }
}

pub fn write_line(w: &mut impl Write, line: &str, path: &Path) -> CmdResult {
    writeln!(w, "{line}").map_err(|e| io_err(e, path))
}

pub fn finish(mut w: BufWriter<File>, path: &Path) -> CmdResult {
    w.flush().map_err(|e| io_err(e, path))
}
