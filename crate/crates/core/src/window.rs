//! Hash-window segmentation and hash logs.
//!
//! A [`WindowHasher`] digests a stream with several algorithms at once,
//! emitting one entry per `window_bytes` span plus whole-stream totals, in a
//! single pass.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::digest::{DigestError, DigestValue, HashAlgorithm, Hasher};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WindowError {
    #[error("at least one hash algorithm is required")]
    NoAlgorithms,
    #[error("hash log line {line}: {reason}")]
    LogParse { line: usize, reason: String },
    #[error(transparent)]
    Digest(#[from] DigestError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashWindowConfig {
    window_bytes: u64,
    algorithms: Vec<HashAlgorithm>,
}

impl HashWindowConfig {
    /// `window_bytes == 0` digests the whole stream only. Duplicate
    /// algorithms collapse; order is canonical.
    pub fn new(
        window_bytes: u64,
        algorithms: impl IntoIterator<Item = HashAlgorithm>,
    ) -> Result<Self, WindowError> {
        let mut algorithms: Vec<HashAlgorithm> = algorithms.into_iter().collect();
        algorithms.sort();
        algorithms.dedup();
        if algorithms.is_empty() {
            return Err(WindowError::NoAlgorithms);
        }
        Ok(HashWindowConfig {
            window_bytes,
            algorithms,
        })
    }

    pub fn window_bytes(&self) -> u64 {
        self.window_bytes
    }

    pub fn algorithms(&self) -> &[HashAlgorithm] {
        &self.algorithms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowIndex {
    Window(u64),
    Whole,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashLogEntry {
    pub index: WindowIndex,
    /// Half-open byte range `[start, end)`.
    pub start: u64,
    pub end: u64,
    pub digests: Vec<DigestValue>,
}

/// Window entries in stream order followed by one `Whole` entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashLog {
    pub entries: Vec<HashLogEntry>,
}

impl HashLog {
    pub fn windows(&self) -> impl Iterator<Item = &HashLogEntry> {
        self.entries
            .iter()
            .filter(|e| matches!(e.index, WindowIndex::Window(_)))
    }

    pub fn whole(&self) -> Option<&HashLogEntry> {
        self.entries.iter().find(|e| e.index == WindowIndex::Whole)
    }

    pub fn total(&self, algorithm: HashAlgorithm) -> Option<&DigestValue> {
        self.whole()?
            .digests
            .iter()
            .find(|d| d.algorithm() == algorithm)
    }

    /// `window <index> <start>-<end> <algorithm> <hex>` and
    /// `total <algorithm> <hex>` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            for d in &e.digests {
                match e.index {
                    WindowIndex::Window(i) => out.push_str(&format!(
                        "window {i} {}-{} {} {}\n",
                        e.start,
                        e.end,
                        d.algorithm(),
                        d.to_hex()
                    )),
                    WindowIndex::Whole => {
                        out.push_str(&format!("total {} {}\n", d.algorithm(), d.to_hex()))
                    }
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<HashLog, WindowError> {
        let mut entries: Vec<HashLogEntry> = Vec::new();
        let mut totals: Vec<DigestValue> = Vec::new();
        let mut end_of_stream = 0u64;
        for (i, line) in text.lines().enumerate() {
            let bad = |reason: &str| WindowError::LogParse {
                line: i + 1,
                reason: reason.to_string(),
            };
            let fields: Vec<&str> = line.split(' ').collect();
            match fields.as_slice() {
                ["window", index, range, alg, hex] => {
                    let index: u64 = index.parse().map_err(|_| bad("bad window index"))?;
                    let (start, end) = range.split_once('-').ok_or_else(|| bad("bad range"))?;
                    let start: u64 = start.parse().map_err(|_| bad("bad range start"))?;
                    let end: u64 = end.parse().map_err(|_| bad("bad range end"))?;
                    let digest = DigestValue::from_hex(alg.parse()?, hex)?;
                    match entries.last_mut() {
                        Some(last) if last.index == WindowIndex::Window(index) => {
                            if (last.start, last.end) != (start, end) {
                                return Err(bad("range differs between algorithms"));
                            }
                            last.digests.push(digest);
                        }
                        _ => {
                            if start != end_of_stream {
                                return Err(bad("window ranges are not contiguous"));
                            }
                            entries.push(HashLogEntry {
                                index: WindowIndex::Window(index),
                                start,
                                end,
                                digests: alloc::vec![digest],
                            });
                        }
                    }
                    end_of_stream = end;
                }
                ["total", alg, hex] => totals.push(DigestValue::from_hex(alg.parse()?, hex)?),
                _ => return Err(bad("unrecognised line")),
            }
        }
        if totals.is_empty() {
            return Err(WindowError::LogParse {
                line: text.lines().count(),
                reason: "missing total lines".to_string(),
            });
        }
        entries.push(HashLogEntry {
            index: WindowIndex::Whole,
            start: 0,
            end: end_of_stream,
            digests: totals,
        });
        Ok(HashLog { entries })
    }
}

/// Incremental multi-algorithm window digester.
#[derive(Debug, Clone)]
pub struct WindowHasher {
    config: HashWindowConfig,
    position: u64,
    window_start: u64,
    window: Vec<Hasher>,
    whole: Vec<Hasher>,
    entries: Vec<HashLogEntry>,
}

impl WindowHasher {
    pub fn new(config: HashWindowConfig) -> Self {
        let fresh = |c: &HashWindowConfig| c.algorithms.iter().map(|&a| Hasher::new(a)).collect();
        WindowHasher {
            window: if config.window_bytes > 0 { fresh(&config) } else { Vec::new() },
            whole: fresh(&config),
            config,
            position: 0,
            window_start: 0,
            entries: Vec::new(),
        }
    }

    pub fn update(&mut self, mut data: &[u8]) {
        for h in &mut self.whole {
            h.update(data);
        }
        if self.config.window_bytes == 0 {
            self.position += data.len() as u64;
            return;
        }
        while !data.is_empty() {
            let room = self.window_start + self.config.window_bytes - self.position;
            let take = room.min(data.len() as u64) as usize;
            for h in &mut self.window {
                h.update(&data[..take]);
            }
            self.position += take as u64;
            data = &data[take..];
            if self.position - self.window_start == self.config.window_bytes {
                self.close_window();
            }
        }
    }

    fn close_window(&mut self) {
        let fresh: Vec<Hasher> = self.config.algorithms.iter().map(|&a| Hasher::new(a)).collect();
        let done = core::mem::replace(&mut self.window, fresh);
        self.entries.push(HashLogEntry {
            index: WindowIndex::Window(self.entries.len() as u64),
            start: self.window_start,
            end: self.position,
            digests: done.into_iter().map(Hasher::finalize).collect(),
        });
        self.window_start = self.position;
    }

    pub fn bytes_consumed(&self) -> u64 {
        self.position
    }

    pub fn finish(mut self) -> HashLog {
        if self.config.window_bytes > 0 && self.position > self.window_start {
            self.close_window();
        }
        self.entries.push(HashLogEntry {
            index: WindowIndex::Whole,
            start: 0,
            end: self.position,
            digests: self.whole.into_iter().map(Hasher::finalize).collect(),
        });
        HashLog {
            entries: self.entries,
        }
    }
}
