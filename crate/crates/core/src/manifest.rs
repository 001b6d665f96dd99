//! Line-delimited JSON manifests.
//!
//! The first line is a [`ManifestHeader`]; each following line is one record.
//! Appends are flushed line by line, and a torn final line (no trailing
//! newline) is ignored on read, so any prefix of appends parses.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tile::GeoPoint;

pub const PAIR_SCHEMA: &str = "roadweave.pairs/1";
pub const PATCH_SCHEMA: &str = "roadweave.patches/1";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: header {found} does not match {expected}")]
    Header {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("duplicate key {0} with different contents")]
    DuplicateKey(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reproducibility header written as the first manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub schema: String,
    pub config_digest: String,
    pub seed: u64,
    pub version: String,
}

impl ManifestHeader {
    pub fn new(schema: &str, config_digest: impl Into<String>, seed: u64) -> Self {
        Self {
            schema: schema.to_string(),
            config_digest: config_digest.into(),
            seed,
            version: VERSION.to_string(),
        }
    }
}

/// Timestamp recorded in manifests: `SOURCE_DATE_EPOCH` if set, else the Unix epoch.
pub fn created_at() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse::<u64>().ok())
        .unwrap_or(0);
    humantime::format_rfc3339_seconds(UNIX_EPOCH + Duration::from_secs(secs)).to_string()
}

pub fn now_rfc3339() -> String {
    humantime::format_rfc3339_seconds(SystemTime::now()).to_string()
}

pub trait Keyed {
    fn key(&self) -> &str;
}

fn parse_line<T: DeserializeOwned>(
    path: &Path,
    line: usize,
    text: &str,
) -> Result<T, ManifestError> {
    serde_json::from_str(text).map_err(|e| ManifestError::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    })
}

/// Reads header and records. A torn last line is dropped.
pub fn read_jsonl<T: DeserializeOwned>(
    path: &Path,
) -> Result<(ManifestHeader, Vec<T>), ManifestError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let text = String::from_utf8_lossy(&bytes);
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    let mut lines = complete
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| ManifestError::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: "missing header".into(),
    })?;
    let header: ManifestHeader = parse_line(path, 1, first)?;
    let records = lines
        .map(|(i, l)| parse_line(path, i + 1, l))
        .collect::<Result<Vec<T>, _>>()?;
    Ok((header, records))
}

/// Writes a complete manifest atomically.
pub fn write_jsonl<T: Serialize>(
    path: &Path,
    header: &ManifestHeader,
    records: &[T],
) -> Result<(), ManifestError> {
    let bytes = encode_jsonl(header, records);
    crate::io::write_atomic(path, &bytes).map_err(io_err(path))
}

pub fn encode_jsonl<T: Serialize>(header: &ManifestHeader, records: &[T]) -> Vec<u8> {
    let mut out = serde_json::to_vec(header).expect("header serializes");
    out.push(b'\n');
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    out
}

/// Append-only keyed manifest. One writer per file.
#[derive(Debug)]
pub struct Manifest<T> {
    path: PathBuf,
    header: ManifestHeader,
    records: Vec<T>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendOutcome {
    Appended,
    AlreadyPresent,
}

impl<T> Manifest<T>
where
    T: Serialize + DeserializeOwned + Keyed + PartialEq + Clone,
{
    /// Opens an existing manifest, whose header must equal `header`, or creates one.
    pub fn open(path: &Path, header: ManifestHeader) -> Result<Self, ManifestError> {
        if path.exists() && std::fs::metadata(path).map_err(io_err(path))?.len() > 0 {
            let (found, records): (ManifestHeader, Vec<T>) = read_jsonl(path)?;
            if found != header {
                return Err(ManifestError::Header {
                    path: path.to_path_buf(),
                    found: serde_json::to_string(&found).unwrap_or_default(),
                    expected: serde_json::to_string(&header).unwrap_or_default(),
                });
            }
            let mut m = Self {
                path: path.to_path_buf(),
                header,
                records: Vec::with_capacity(records.len()),
                index: HashMap::new(),
            };
            for r in records {
                if let Some(&i) = m.index.get(r.key()) {
                    if m.records[i] != r {
                        return Err(ManifestError::DuplicateKey(r.key().to_string()));
                    }
                    continue;
                }
                m.index.insert(r.key().to_string(), m.records.len());
                m.records.push(r);
            }
            // rewrite to drop a torn tail before appending
            let clean = encode_jsonl(&m.header, &m.records);
            if std::fs::read(path).map_err(io_err(path))? != clean {
                crate::io::write_atomic(path, &clean).map_err(io_err(path))?;
            }
            return Ok(m);
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let bytes = encode_jsonl::<T>(&header, &[]);
        crate::io::write_atomic(path, &bytes).map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            header,
            records: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn header(&self) -> &ManifestHeader {
        &self.header
    }

    pub fn records(&self) -> &[T] {
        &self.records
    }

    pub fn get(&self, key: &str) -> Option<&T> {
        self.index.get(key).map(|&i| &self.records[i])
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Identical re-appends are no-ops; a different record under an existing key is an error.
    pub fn append(&mut self, record: T) -> Result<AppendOutcome, ManifestError> {
        if let Some(existing) = self.get(record.key()) {
            if *existing == record {
                return Ok(AppendOutcome::AlreadyPresent);
            }
            return Err(ManifestError::DuplicateKey(record.key().to_string()));
        }
        let mut line = serde_json::to_vec(&record).expect("record serializes");
        line.push(b'\n');
        let mut f: File = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(io_err(&self.path))?;
        f.write_all(&line).map_err(io_err(&self.path))?;
        f.sync_data().map_err(io_err(&self.path))?;
        self.index
            .insert(record.key().to_string(), self.records.len());
        self.records.push(record);
        Ok(AppendOutcome::Appended)
    }

    /// Replaces a record in place and rewrites the file.
    pub fn replace(&mut self, record: T) -> Result<(), ManifestError> {
        match self.index.get(record.key()) {
            Some(&i) => {
                self.records[i] = record;
                let bytes = encode_jsonl(&self.header, &self.records);
                crate::io::write_atomic(&self.path, &bytes).map_err(io_err(&self.path))
            }
            None => self.append(record).map(|_| ()),
        }
    }
}

/// Geographic bounds of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoBounds {
    pub north: f64,
    pub west: f64,
    pub south: f64,
    pub east: f64,
}

impl GeoBounds {
    pub fn from_corners(nw: GeoPoint, se: GeoPoint) -> Self {
        Self {
            north: nw.lat,
            west: nw.lon,
            south: se.lat,
            east: se.lon,
        }
    }
}

/// Reads `(header, records)` through a streaming reader, stopping at a torn tail.
pub fn stream_jsonl<T: DeserializeOwned>(
    path: &Path,
    mut each: impl FnMut(T) -> Result<(), ManifestError>,
) -> Result<ManifestHeader, ManifestError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(f);
    let mut buf = String::new();
    let mut header = None;
    let mut line = 0;
    loop {
        buf.clear();
        if r.read_line(&mut buf).map_err(io_err(path))? == 0 || !buf.ends_with('\n') {
            break;
        }
        line += 1;
        let t = buf.trim();
        if t.is_empty() {
            continue;
        }
        if header.is_none() {
            header = Some(parse_line::<ManifestHeader>(path, line, t)?);
        } else {
            each(parse_line(path, line, t)?)?;
        }
    }
    header.ok_or_else(|| ManifestError::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: "missing header".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    struct Rec {
        key: String,
        v: f64,
    }

    impl Keyed for Rec {
        fn key(&self) -> &str {
            &self.key
        }
    }

    fn header() -> ManifestHeader {
        ManifestHeader::new(PAIR_SCHEMA, "abc", 7)
    }

    #[test]
    fn round_trip_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut m: Manifest<Rec> = Manifest::open(&path, header()).unwrap();
        let a = Rec {
            key: "a".into(),
            v: 0.1,
        };
        assert_eq!(m.append(a.clone()).unwrap(), AppendOutcome::Appended);
        assert_eq!(m.append(a.clone()).unwrap(), AppendOutcome::AlreadyPresent);
        assert!(matches!(
            m.append(Rec { key: "a".into(), v: 0.2 }),
            Err(ManifestError::DuplicateKey(k)) if k == "a"
        ));
        m.append(Rec {
            key: "b".into(),
            v: 1e-17,
        })
        .unwrap();
        let (h, recs): (_, Vec<Rec>) = read_jsonl(&path).unwrap();
        assert_eq!(h, header());
        assert_eq!(recs, m.records());

        let reopened: Manifest<Rec> = Manifest::open(&path, header()).unwrap();
        assert_eq!(reopened.records(), m.records());
        assert!(Manifest::<Rec>::open(&path, ManifestHeader::new(PAIR_SCHEMA, "zzz", 7)).is_err());
    }

    #[test]
    fn every_prefix_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let recs: Vec<Rec> = (0..5)
            .map(|i| Rec {
                key: format!("k{i}"),
                v: i as f64,
            })
            .collect();
        let full = encode_jsonl(&header(), &recs);
        let header_len = full.iter().position(|&b| b == b'\n').unwrap() + 1;
        for cut in header_len..=full.len() {
            std::fs::write(&path, &full[..cut]).unwrap();
            let (_, got): (_, Vec<Rec>) = read_jsonl(&path).unwrap();
            let complete = full[..cut].iter().filter(|&&b| b == b'\n').count() - 1;
            assert_eq!(got, recs[..complete]);
            let mut streamed = Vec::new();
            stream_jsonl(&path, |r: Rec| {
                streamed.push(r);
                Ok(())
            })
            .unwrap();
            assert_eq!(streamed, got);
        }
        // torn tail is dropped on reopen, then appends continue cleanly
        std::fs::write(&path, &full[..full.len() - 3]).unwrap();
        let mut m: Manifest<Rec> = Manifest::open(&path, header()).unwrap();
        m.append(recs[4].clone()).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), full);
    }

    #[test]
    fn created_at_is_fixed() {
        // SOURCE_DATE_EPOCH is not set under cargo test
        if std::env::var_os("SOURCE_DATE_EPOCH").is_none() {
            assert_eq!(created_at(), "1970-01-01T00:00:00Z");
        }
    }
}
