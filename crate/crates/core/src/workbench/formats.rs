//! Little-endian binary containers for signals, tokens and checkpoints, and
//! the delimited event table.
//!
//! Signal file (`.megts`):
//!
//! | bytes | field |
//! |---|---|
//! | 6 | magic `MEGTS1` |
//! | 4 | u32 channel count |
//! | 4 | u32 sampling rate in Hz |
//! | 8 | u64 samples per channel |
//! | 4·C·T | f32 samples, channel-major |
//!
//! Token file (`.megtk`): magic `MEGTK1`, u16 vocabulary size, u32 channel
//! count, u64 samples per channel, then u16 labels channel-major.
//!
//! Checkpoint (`.megck`): magic `MEGCK1`, a length-prefixed kind string, a
//! length-prefixed `key = value` header, a u32 block count and one block per
//! parameter: u32 name length, name, u32 rank, u64 per dimension, f32 values.
//! Every length prefix is a u32.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{Event, EventTable, Recording, SignalSet, TokenCorpus, TokenRecording};
use crate::error::{bail, Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const SIGNAL_MAGIC: &[u8; 6] = b"MEGTS1";
pub const TOKEN_MAGIC: &[u8; 6] = b"MEGTK1";
pub const CHECKPOINT_MAGIC: &[u8; 6] = b"MEGCK1";

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format { offset: offset as u64, message: message.into() }
}

/// Bounds-checked little-endian reader.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if left < n {
            return Err(format_err(self.pos, format!("truncated {what}: expected {n} bytes, found {left}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, want: &[u8; 6]) -> Result<()> {
        let got = self.take(6, "magic")?;
        if got != want {
            return Err(format_err(0, format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(want))));
        }
        Ok(())
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let at = self.pos;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| format_err(at, format!("{what} is not UTF-8")))
    }

    /// Payload of `count` items of `width` bytes, checked before reading.
    fn payload(&mut self, count: u64, width: usize, what: &str) -> Result<&'a [u8]> {
        let left = (self.buf.len() - self.pos) as u64;
        let need = count.checked_mul(width as u64).ok_or_else(|| format_err(self.pos, format!("{what} size overflows")))?;
        if left < need {
            return Err(format_err(self.pos, format!("truncated {what}: expected {need} bytes, found {left}")));
        }
        self.take(need as usize, what)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(format_err(self.pos, format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Sampling rate as stored in the header.
fn integer_rate(fs: f64) -> Result<u32> {
    if !(fs >= 1.0) || fs.fract() != 0.0 || fs > u32::MAX as f64 {
        bail!(Parameter, "sampling rate {} Hz cannot be stored as a whole number of Hz", fs);
    }
    Ok(fs as u32)
}

pub fn encode_signal(rec: &Recording, fs: f64) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(22 + rec.data.len() * 4);
    out.extend_from_slice(SIGNAL_MAGIC);
    out.extend_from_slice(&(rec.channels as u32).to_le_bytes());
    out.extend_from_slice(&integer_rate(fs)?.to_le_bytes());
    out.extend_from_slice(&(rec.samples as u64).to_le_bytes());
    for v in &rec.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Recording (tagged with `subject`, `session`) and sampling rate.
pub fn decode_signal(bytes: &[u8], subject: usize, session: usize) -> Result<(Recording, f64)> {
    let mut r = Reader::new(bytes);
    r.magic(SIGNAL_MAGIC)?;
    let channels = r.u32("channel count")? as usize;
    let fs = r.u32("sampling rate")? as f64;
    let samples = r.u64("sample count")?;
    let payload = r.payload(channels as u64 * samples, 4, "signal payload")?;
    r.finish()?;
    let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Ok((Recording::new(subject, session, channels, samples as usize, data)?, fs))
}

pub fn encode_tokens(rec: &TokenRecording, k_star: usize) -> Result<Vec<u8>> {
    if k_star > u16::MAX as usize {
        bail!(Parameter, "vocabulary of {} does not fit the token header", k_star);
    }
    let mut out = Vec::with_capacity(20 + rec.labels.len() * 2);
    out.extend_from_slice(TOKEN_MAGIC);
    out.extend_from_slice(&(k_star as u16).to_le_bytes());
    out.extend_from_slice(&(rec.channels as u32).to_le_bytes());
    out.extend_from_slice(&(rec.samples as u64).to_le_bytes());
    for l in &rec.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

/// Token recording and its vocabulary size.
pub fn decode_tokens(bytes: &[u8], subject: usize, session: usize) -> Result<(TokenRecording, usize)> {
    let mut r = Reader::new(bytes);
    r.magic(TOKEN_MAGIC)?;
    let k_star = r.u16("vocabulary size")? as usize;
    let channels = r.u32("channel count")? as usize;
    let samples = r.u64("sample count")?;
    let start = r.pos;
    let payload = r.payload(channels as u64 * samples, 2, "token payload")?;
    r.finish()?;
    let labels: Vec<u16> = payload.chunks_exact(2).map(|b| u16::from_le_bytes(b.try_into().unwrap())).collect();
    if let Some(i) = labels.iter().position(|&l| l as usize >= k_star) {
        return Err(format_err(start + 2 * i, format!("label {} outside vocabulary of {}", labels[i], k_star)));
    }
    Ok((TokenRecording::new(subject, session, channels, samples as usize, labels)?, k_star))
}

/// Named parameter blocks plus a kind tag and `key = value` header.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub header: BTreeMap<String, String>,
    pub params: ParamStore<f32>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_str(&mut out, &ck.kind);
    let header: String = ck.header.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    put_str(&mut out, &header);
    out.extend_from_slice(&(ck.params.len() as u32).to_le_bytes());
    for (_, name, t) in ck.params.iter() {
        put_str(&mut out, name);
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let kind = r.string("kind")?;
    let at = r.pos;
    let text = r.string("header")?;
    let header = super::config::parse_pairs(&text).map_err(|e| format_err(at, format!("bad checkpoint header: {e}")))?;
    let blocks = r.u32("block count")?;
    let mut params = ParamStore::new();
    for _ in 0..blocks {
        let name = r.string("block name")?;
        let rank = r.u32("block rank")? as usize;
        let shape = (0..rank).map(|_| r.u64("block shape").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1u64, |a, &d| a.checked_mul(d as u64)).ok_or_else(|| format_err(r.pos, "block size overflows"))?;
        let payload = r.payload(count, 4, "block payload")?;
        let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        if params.find(&name).is_some() {
            return Err(format_err(r.pos, format!("duplicate block '{name}'")));
        }
        params.add(name, Tensor::new(shape, data)?);
    }
    r.finish()?;
    Ok(Checkpoint { kind, header, params })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_file(path, &encode_checkpoint(ck))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?)
}

/// `sub-<subject>_ses-<session>.<ext>`
pub fn recording_name(subject: usize, session: usize, ext: &str) -> String {
    format!("sub-{subject:03}_ses-{session:02}.{ext}")
}

fn parse_recording_name(name: &str, ext: &str) -> Option<(usize, usize)> {
    let stem = name.strip_suffix(&format!(".{ext}"))?;
    let (a, b) = stem.split_once('_')?;
    Some((a.strip_prefix("sub-")?.parse().ok()?, b.strip_prefix("ses-")?.parse().ok()?))
}

/// Files of `dir` with extension `ext`, keyed by `(subject, session)`. A plain
/// file path is read as subject 0, session 0.
fn collect(path: &Path, ext: &str) -> Result<Vec<((usize, usize), PathBuf)>> {
    if path.is_file() {
        return Ok(vec![((0, 0), path.to_path_buf())]);
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))? {
        let p = entry?.path();
        if let Some(key) = p.file_name().and_then(|n| n.to_str()).and_then(|n| parse_recording_name(n, ext)) {
            out.push((key, p));
        }
    }
    out.sort();
    if out.is_empty() {
        bail!(Input, "no .{} files in {}", ext, path.display());
    }
    Ok(out)
}

pub fn write_signal_set(dir: &Path, set: &SignalSet) -> Result<()> {
    for rec in &set.recordings {
        write_file(&dir.join(recording_name(rec.subject, rec.session, "megts")), &encode_signal(rec, set.fs)?)?;
    }
    Ok(())
}

/// Reads a directory of signal files (or one file); all must share one rate.
pub fn read_signal_set(path: &Path) -> Result<SignalSet> {
    let mut fs_all = None;
    let mut recordings = Vec::new();
    for ((subject, session), p) in collect(path, "megts")? {
        let (rec, fs) = decode_signal(&read_file(&p)?, subject, session)?;
        if *fs_all.get_or_insert(fs) != fs {
            bail!(Input, "{} is sampled at {} Hz, earlier files at {} Hz", p.display(), fs, fs_all.unwrap());
        }
        recordings.push(rec);
    }
    Ok(SignalSet::new(fs_all.unwrap_or(0.0), recordings))
}

pub fn write_token_corpus(dir: &Path, corpus: &TokenCorpus) -> Result<()> {
    for rec in &corpus.recordings {
        write_file(&dir.join(recording_name(rec.subject, rec.session, "megtk")), &encode_tokens(rec, corpus.k_star)?)?;
    }
    Ok(())
}

pub fn read_token_corpus(path: &Path) -> Result<TokenCorpus> {
    let mut k_all = None;
    let mut recordings = Vec::new();
    for ((subject, session), p) in collect(path, "megtk")? {
        let (rec, k) = decode_tokens(&read_file(&p)?, subject, session)?;
        if *k_all.get_or_insert(k) != k {
            bail!(Input, "{} has vocabulary {}, earlier files {}", p.display(), k, k_all.unwrap());
        }
        recordings.push(rec);
    }
    Ok(TokenCorpus { k_star: k_all.unwrap_or(0), recordings })
}

pub const EVENT_HEADER: &str = "session_id,subject_id,onset_sample,label";

pub fn format_events(events: &EventTable) -> String {
    let mut s = format!("{EVENT_HEADER}\n");
    for e in &events.events {
        s.push_str(&format!("{},{},{},{}\n", e.session, e.subject, e.onset, e.label));
    }
    s
}

/// Parses the delimited event table; the header line is required.
pub fn parse_events(text: &str) -> Result<EventTable> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == EVENT_HEADER => {}
        _ => bail!(Input, "event table must start with '{}'", EVENT_HEADER),
    }
    let mut events = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let num = |j: usize| -> Result<usize> {
            match f.get(j).and_then(|v| v.parse().ok()) {
                Some(v) => Ok(v),
                None => bail!(Input, "line {}: field {} is not a non-negative integer", i + 1, j + 1),
            }
        };
        if f.len() != 4 {
            bail!(Input, "line {}: expected 4 fields, found {}", i + 1, f.len());
        }
        let label = num(3)?;
        if label >= crate::decoding::CLASSES {
            bail!(Input, "line {}: label {} outside 0..{}", i + 1, label, crate::decoding::CLASSES);
        }
        events.push(Event { session: num(0)?, subject: num(1)?, onset: num(2)?, label: label as u8 });
    }
    Ok(EventTable { events })
}

pub fn write_events(path: &Path, events: &EventTable) -> Result<()> {
    write_file(path, format_events(events).as_bytes())
}

pub fn read_events(path: &Path) -> Result<EventTable> {
    let bytes = read_file(path)?;
    parse_events(&String::from_utf8_lossy(&bytes))
}

/// Writes `text` creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}
