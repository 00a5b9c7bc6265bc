//! Append-only journal framing.
//!
//! Each record is a 4-byte big-endian length followed by that many bytes of
//! UTF-8: one line of the form `TABLE|field,field,...\n`. Writes are grouped
//! into transactions bracketed by `BEGIN|<tx>,<n>` and `END|<tx>`; on replay a
//! transaction without its `END` (or with the wrong record count) is
//! discarded together with everything after it.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::StoreError;

pub(crate) fn io_err(e: std::io::Error) -> StoreError {
    StoreError::StorageFailure(e.to_string())
}

pub(crate) fn encode_record(out: &mut Vec<u8>, line: &str) {
    let body_len = line.len() + 1;
    out.extend_from_slice(&(body_len as u32).to_be_bytes());
    out.extend_from_slice(line.as_bytes());
    out.push(b'\n');
}

/// Builds the bytes of one transaction.
pub(crate) fn encode_tx(tx: u64, lines: &[String]) -> Vec<u8> {
    let mut out = Vec::new();
    encode_record(&mut out, &format!("BEGIN|{tx},{}", lines.len()));
    for l in lines {
        encode_record(&mut out, l);
    }
    encode_record(&mut out, &format!("END|{tx}"));
    out
}

/// Splits a buffer into record lines. Stops at the first torn record and
/// reports the byte offset just past the last complete one.
pub fn split_records(buf: &[u8]) -> (Vec<String>, usize) {
    let mut lines = Vec::new();
    let mut pos = 0;
    while buf.len() - pos >= 4 {
        let len = u32::from_be_bytes([buf[pos], buf[pos + 1], buf[pos + 2], buf[pos + 3]]) as usize;
        let end = pos + 4 + len;
        if len == 0 || end > buf.len() {
            break;
        }
        let Ok(text) = std::str::from_utf8(&buf[pos + 4..end]) else {
            break;
        };
        let Some(line) = text.strip_suffix('\n') else {
            break;
        };
        lines.push(line.to_string());
        pos = end;
    }
    (lines, pos)
}

/// Groups record lines into committed transactions. Returns the body lines
/// of each complete transaction, the number of leading records consumed,
/// and the highest transaction id seen.
pub(crate) fn committed_transactions(lines: &[String]) -> (Vec<Vec<String>>, usize, u64) {
    let mut txs = Vec::new();
    let mut consumed = 0;
    let mut max_tx = 0;
    let mut i = 0;
    while i < lines.len() {
        let Some((tx, n)) = lines[i]
            .strip_prefix("BEGIN|")
            .and_then(|r| r.split_once(','))
            .and_then(|(a, b)| Some((a.parse::<u64>().ok()?, b.parse::<usize>().ok()?)))
        else {
            break;
        };
        let end = i + 1 + n;
        if end >= lines.len() || lines[end] != format!("END|{tx}") {
            break;
        }
        txs.push(lines[i + 1..end].to_vec());
        max_tx = max_tx.max(tx);
        i = end + 1;
        consumed = i;
    }
    (txs, consumed, max_tx)
}

/// Reads every intact record line of a journal file.
pub fn read_journal(path: &Path) -> Result<Vec<String>, StoreError> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(io_err)?;
    Ok(split_records(&buf).0)
}

pub(crate) struct Journal {
    pub path: PathBuf,
    file: File,
    pub next_tx: u64,
    pub records_since_compact: usize,
}

impl Journal {
    /// Opens (creating if needed) and returns the committed transaction
    /// bodies. A torn tail is cut off so later appends start clean.
    pub fn open(path: &Path) -> Result<(Self, Vec<Vec<String>>), StoreError> {
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)
            .map_err(io_err)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf).map_err(io_err)?;
        let (lines, _) = split_records(&buf);
        let (txs, consumed, max_tx) = committed_transactions(&lines);
        let good_len: usize = lines[..consumed].iter().map(|l| 4 + l.len() + 1).sum();
        if good_len < buf.len() {
            file.set_len(good_len as u64).map_err(io_err)?;
        }
        file.seek(SeekFrom::Start(good_len as u64))
            .map_err(io_err)?;
        let records = consumed;
        Ok((
            Journal {
                path: path.to_path_buf(),
                file,
                next_tx: max_tx + 1,
                records_since_compact: records,
            },
            txs,
        ))
    }

    /// Appends one transaction and syncs it to disk.
    pub fn append(&mut self, lines: &[String]) -> Result<(), StoreError> {
        let bytes = encode_tx(self.next_tx, lines);
        self.file.write_all(&bytes).map_err(io_err)?;
        self.file.sync_data().map_err(io_err)?;
        self.next_tx += 1;
        self.records_since_compact += lines.len() + 2;
        Ok(())
    }

    /// Replaces the journal with `txs`, written to a side file and renamed
    /// into place.
    pub fn rewrite(&mut self, txs: &[Vec<String>]) -> Result<(), StoreError> {
        let tmp = self.path.with_extension("compact");
        let mut bytes = Vec::new();
        for (i, lines) in txs.iter().enumerate() {
            bytes.extend(encode_tx(i as u64 + 1, lines));
        }
        {
            let mut f = File::create(&tmp).map_err(io_err)?;
            f.write_all(&bytes).map_err(io_err)?;
            f.sync_all().map_err(io_err)?;
        }
        std::fs::rename(&tmp, &self.path).map_err(io_err)?;
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .open(&self.path)
            .map_err(io_err)?;
        file.seek(SeekFrom::End(0)).map_err(io_err)?;
        self.file = file;
        self.next_tx = txs.len() as u64 + 1;
        self.records_since_compact = txs.iter().map(|t| t.len() + 2).sum();
        Ok(())
    }
}
