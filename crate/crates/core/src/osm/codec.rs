//! Compact little-endian extract format:
//!
//! ```text
//! "RWX1" | zoom u8 | origin x u32 | origin y u32 | grid u32 | tile_px u32 | margin u32
//! way count u32 | ways... | sha256(body) [32 bytes]
//! way: id i64 | part u32 | tier u8 | stroke u32 | highway len u16 + utf8 | n u32 | n × (px f64, py f64)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ExtractWay, FrameExtract, OsmError, RoadClass, RoadTier};
use crate::io::write_atomic;
use crate::tile::{PixelCoord, StitchFrame, TileCoord};

const MAGIC: &[u8; 4] = b"RWX1";
pub const EXTRACT_EXT: &str = "rwx";

pub(super) fn body_bytes(frame: &StitchFrame, margin_px: u32, ways: &[ExtractWay]) -> Vec<u8> {
    let pts: usize = ways.iter().map(|w| w.points.len()).sum();
    let mut out = Vec::with_capacity(32 + ways.len() * 40 + pts * 16);
    out.extend_from_slice(MAGIC);
    out.push(frame.origin.z);
    for v in [
        frame.origin.x,
        frame.origin.y,
        frame.grid,
        frame.tile_px,
        margin_px,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(ways.len() as u32).to_le_bytes());
    for w in ways {
        out.extend_from_slice(&w.id.to_le_bytes());
        out.extend_from_slice(&w.part.to_le_bytes());
        out.push(w.class.tier.code());
        out.extend_from_slice(&w.class.stroke_px.to_le_bytes());
        let tag = w.highway.as_bytes();
        out.extend_from_slice(&(tag.len().min(u16::MAX as usize) as u16).to_le_bytes());
        out.extend_from_slice(&tag[..tag.len().min(u16::MAX as usize)]);
        out.extend_from_slice(&(w.points.len() as u32).to_le_bytes());
        for p in &w.points {
            out.extend_from_slice(&p.px.to_le_bytes());
            out.extend_from_slice(&p.py.to_le_bytes());
        }
    }
    out
}

pub fn encode_extract(e: &FrameExtract) -> Vec<u8> {
    let mut body = body_bytes(&e.frame, e.margin_px, &e.ways);
    let digest = Sha256::digest(&body);
    body.extend_from_slice(&digest);
    body
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], OsmError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| OsmError::Codec(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, OsmError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, OsmError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, OsmError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i64(&mut self) -> Result<i64, OsmError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, OsmError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_extract(bytes: &[u8]) -> Result<FrameExtract, OsmError> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..4] != MAGIC {
        return Err(OsmError::Codec("bad magic".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(OsmError::Codec("digest mismatch".into()));
    }
    let mut c = Cursor { buf: body, pos: 4 };
    let z = c.u8()?;
    let (x, y, grid, tile_px, margin_px) = (c.u32()?, c.u32()?, c.u32()?, c.u32()?, c.u32()?);
    let frame = StitchFrame::new(TileCoord::new(z, x, y)?, grid, tile_px)?;
    let n = c.u32()? as usize;
    let mut ways = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let id = c.i64()?;
        let part = c.u32()?;
        let tier =
            RoadTier::from_code(c.u8()?).ok_or_else(|| OsmError::Codec("bad tier".into()))?;
        let stroke_px = c.u32()?;
        let len = c.u16()? as usize;
        let highway =
            String::from_utf8(c.take(len)?.to_vec()).map_err(|e| OsmError::Codec(e.to_string()))?;
        let np = c.u32()? as usize;
        let mut points = Vec::with_capacity(np.min(1 << 20));
        for _ in 0..np {
            points.push(PixelCoord {
                px: c.f64()?,
                py: c.f64()?,
            });
        }
        ways.push(ExtractWay {
            id,
            part,
            class: RoadClass { tier, stroke_px },
            highway,
            points,
        });
    }
    if c.pos != body.len() {
        return Err(OsmError::Codec(format!(
            "{} trailing bytes",
            body.len() - c.pos
        )));
    }
    Ok(FrameExtract {
        frame,
        margin_px,
        ways,
        source_digest: hex::encode(digest),
    })
}

/// Human-readable sidecar: way count, class histogram, digest.
pub fn summary_text(e: &FrameExtract) -> String {
    let mut hist: BTreeMap<RoadTier, usize> = BTreeMap::new();
    let mut seen = std::collections::BTreeSet::new();
    for w in &e.ways {
        if seen.insert(w.id) {
            *hist.entry(w.class.tier).or_default() += 1;
        }
    }
    let mut s = String::new();
    let _ = writeln!(s, "frame {}", e.frame.key());
    let _ = writeln!(s, "ways {}", e.way_count());
    let _ = writeln!(s, "parts {}", e.ways.len());
    for tier in [RoadTier::Main, RoadTier::Middle, RoadTier::Small] {
        let _ = writeln!(s, "{tier} {}", hist.get(&tier).copied().unwrap_or(0));
    }
    let _ = writeln!(s, "digest {}", e.source_digest);
    s
}

/// Writes `{dir}/{key}.rwx` and `{dir}/{key}.txt`, returning the extract path.
pub fn write_extract(dir: &Path, e: &FrameExtract) -> std::io::Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.{EXTRACT_EXT}", e.frame.key()));
    write_atomic(&path, &encode_extract(e))?;
    write_atomic(
        &dir.join(format!("{}.txt", e.frame.key())),
        summary_text(e).as_bytes(),
    )?;
    Ok(path)
}

pub fn read_extract(path: &Path) -> Result<FrameExtract, OsmError> {
    decode_extract(&std::fs::read(path)?)
}
