//! Text header followed by a little-endian `f32` blob.
//!
//! ```text
//! hinova <kind>
//! key = value
//! key = value
//! ---
//! <blob>
//! ```
//!
//! Keys may repeat; order is preserved. Checkpoints, fingerprint files and
//! feature caches all use this layout.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::dataio::capture::ensure_parent;
use crate::error::{Error, Result};

const MAGIC: &str = "hinova";
const END: &str = "---";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Header {
    pub kind: String,
    entries: Vec<(String, String)>,
}

impl Header {
    pub fn new(kind: impl Into<String>) -> Self {
        Header {
            kind: kind.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.entries.push((key.into(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .iter()
            .filter(move |(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn require(&self, key: &str) -> std::result::Result<&str, String> {
        self.get(key).ok_or_else(|| format!("missing key {key}"))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> std::result::Result<T, String>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.require(key)?;
        raw.parse().map_err(|e| format!("{key} = {raw:?}: {e}"))
    }

    pub fn parse_list<T: FromStr>(&self, key: &str) -> std::result::Result<Vec<T>, String>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.require(key)?;
        parse_words(raw).map_err(|e| format!("{key}: {e}"))
    }
}

pub(crate) fn parse_words<T: FromStr>(raw: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    raw.split_whitespace()
        .map(|w| w.parse::<T>().map_err(|e| format!("{w:?}: {e}")))
        .collect()
}

pub(crate) fn join_words<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn write_container(path: impl AsRef<Path>, header: &Header, blob: &[f32]) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    if let Some(index) = blob.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut text = format!("{MAGIC} {}\n", header.kind);
    for (k, v) in &header.entries {
        debug_assert!(!v.contains('\n'));
        text.push_str(&format!("{k} = {v}\n"));
    }
    text.push_str(END);
    text.push('\n');
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    for v in blob {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<(Header, Vec<f32>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let kind = line
        .trim_end()
        .strip_prefix(MAGIC)
        .map(str::trim)
        .filter(|k| !k.is_empty())
        .ok_or_else(|| Error::format(path, "not a hinova container"))?
        .to_string();
    let mut header = Header::new(kind);
    loop {
        line.clear();
        let n = r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::format(path, "header not terminated"));
        }
        let l = line.trim_end();
        if l == END {
            break;
        }
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("expected key = value, got {l:?}")))?;
        header.push(k.trim(), v.trim());
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::LengthMismatch(format!(
            "{}: blob of {} bytes is not a whole number of f32 values",
            path.display(),
            bytes.len()
        )));
    }
    let blob = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, blob))
}
