use std::collections::BTreeSet;
use std::io::Read;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::codec::body_bytes;
use super::parse::{parse_osm_xml, IngestStats, ParsedOsm};
use super::{Classifier, OsmError, RoadClass};
use crate::tile::{mercator_x, mercator_y, GeoPoint, PixelCoord, StitchFrame, TileCoord};

/// Default extract margin around each frame, in pixels. Must cover the widest
/// stroke radius plus one pixel.
pub const DEFAULT_MARGIN_PX: u32 = 32;

/// A classified road with resolved geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadWay {
    pub id: i64,
    pub polyline: Vec<GeoPoint>,
    pub class: RoadClass,
    pub highway: String,
}

/// Classifies and resolves raw ways, dropping consecutive duplicate vertices.
/// Output is sorted by way id.
pub fn resolve_ways(
    parsed: &ParsedOsm,
    classifier: &Classifier,
    stats: &mut IngestStats,
) -> Vec<RoadWay> {
    let mut out = Vec::with_capacity(parsed.ways.len());
    for raw in &parsed.ways {
        let Some(class) = classifier.classify(&raw.tags) else {
            stats.rejected_ways += 1;
            continue;
        };
        let mut polyline: Vec<GeoPoint> = Vec::with_capacity(raw.refs.len());
        for r in &raw.refs {
            match parsed.nodes.get(r) {
                Some(&p) => {
                    if polyline.last() != Some(&p) {
                        polyline.push(p);
                    }
                }
                None => stats.dangling_refs += 1,
            }
        }
        if polyline.len() < 2 {
            stats.short_ways += 1;
            log::debug!(
                "way {} dropped with {} usable vertices",
                raw.id,
                polyline.len()
            );
            continue;
        }
        out.push(RoadWay {
            id: raw.id,
            polyline,
            class,
            highway: raw.tags["highway"].clone(),
        });
    }
    out.sort_by_key(|w| w.id);
    out
}

/// Parse plus resolve in one call.
pub fn ingest<R: Read>(
    input: R,
    classifier: &Classifier,
) -> Result<(Vec<RoadWay>, IngestStats), OsmError> {
    let parsed = parse_osm_xml(input)?;
    let mut stats = parsed.stats.clone();
    let ways = resolve_ways(&parsed, classifier, &mut stats);
    if stats.warnings() > 0 {
        log::warn!(
            "ingest warnings: {} dangling refs, {} short ways, {} invalid nodes, {} duplicate nodes",
            stats.dangling_refs,
            stats.short_ways,
            stats.invalid_nodes,
            stats.duplicate_nodes
        );
    }
    Ok((ways, stats))
}

/// One clipped piece of a road in frame pixel coordinates. A way that leaves
/// and re-enters the expanded frame yields several parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractWay {
    pub id: i64,
    pub part: u32,
    pub class: RoadClass,
    pub highway: String,
    pub points: Vec<PixelCoord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameExtract {
    pub frame: StitchFrame,
    pub margin_px: u32,
    pub ways: Vec<ExtractWay>,
    /// Hex SHA-256 of the encoded frame and way content.
    pub source_digest: String,
}

impl FrameExtract {
    pub fn new(frame: StitchFrame, margin_px: u32, ways: Vec<ExtractWay>) -> Self {
        let digest = Sha256::digest(body_bytes(&frame, margin_px, &ways));
        Self {
            frame,
            margin_px,
            ways,
            source_digest: hex::encode(digest),
        }
    }

    pub fn empty(frame: StitchFrame, margin_px: u32) -> Self {
        Self::new(frame, margin_px, Vec::new())
    }

    pub fn way_count(&self) -> usize {
        self.ways
            .iter()
            .map(|w| w.id)
            .collect::<BTreeSet<_>>()
            .len()
    }
}

/// Liang–Barsky clip of segment `a → b` to the square `[lo, hi]²`.
pub fn clip_segment(
    a: PixelCoord,
    b: PixelCoord,
    lo: f64,
    hi: f64,
) -> Option<(PixelCoord, PixelCoord)> {
    let dx = b.px - a.px;
    let dy = b.py - a.py;
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for (p, q) in [
        (-dx, a.px - lo),
        (dx, hi - a.px),
        (-dy, a.py - lo),
        (dy, hi - a.py),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
            if t0 > t1 {
                return None;
            }
        }
    }
    let at = |t: f64| {
        if t == 0.0 {
            a
        } else if t == 1.0 {
            b
        } else {
            PixelCoord {
                px: (a.px + t * dx).clamp(lo, hi),
                py: (a.py + t * dy).clamp(lo, hi),
            }
        }
    };
    Some((at(t0), at(t1)))
}

fn clip_way(way: &RoadWay, frame: &StitchFrame, margin: f64) -> Vec<ExtractWay> {
    let lo = -margin;
    let hi = f64::from(frame.size_px()) + margin;
    let pts: Vec<PixelCoord> = way.polyline.iter().map(|&p| frame.project(p)).collect();
    let mut parts: Vec<Vec<PixelCoord>> = Vec::new();
    let mut current: Vec<PixelCoord> = Vec::new();
    for seg in pts.windows(2) {
        match clip_segment(seg[0], seg[1], lo, hi) {
            Some((s, e)) if s != e => {
                if current.last() != Some(&s) {
                    if current.len() >= 2 {
                        parts.push(std::mem::take(&mut current));
                    }
                    current.clear();
                    current.push(s);
                }
                current.push(e);
            }
            _ => {
                if current.len() >= 2 {
                    parts.push(std::mem::take(&mut current));
                }
                current.clear();
            }
        }
    }
    if current.len() >= 2 {
        parts.push(current);
    }
    parts
        .into_iter()
        .enumerate()
        .map(|(i, points)| ExtractWay {
            id: way.id,
            part: i as u32,
            class: way.class,
            highway: way.highway.clone(),
            points,
        })
        .collect()
}

/// Lat/lon box of a polyline: (south, west, north, east).
fn geo_bbox(poly: &[GeoPoint]) -> (f64, f64, f64, f64) {
    poly.iter().fold(
        (
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        ),
        |(s, w, n, e), p| (s.min(p.lat), w.min(p.lon), n.max(p.lat), e.max(p.lon)),
    )
}

/// Splits ways into one extract per frame, clipped to the margin-expanded
/// frame square. Output is sorted by frame, ways within a frame by `(id, part)`.
/// Every requested frame gets an extract, possibly empty.
pub fn partition_by_frame(
    ways: &[RoadWay],
    frames: &[StitchFrame],
    margin_px: u32,
) -> Vec<FrameExtract> {
    let mut frames: Vec<StitchFrame> = frames.to_vec();
    frames.sort();
    frames.dedup();
    let boxes: Vec<_> = ways.iter().map(|w| geo_bbox(&w.polyline)).collect();
    let margin = f64::from(margin_px);

    frames
        .par_iter()
        .map(|frame| {
            let size = f64::from(frame.size_px());
            let nw = frame.unproject(PixelCoord {
                px: -margin - 1.0,
                py: -margin - 1.0,
            });
            let se = frame.unproject(PixelCoord {
                px: size + margin + 1.0,
                py: size + margin + 1.0,
            });
            let mut out: Vec<ExtractWay> = ways
                .iter()
                .zip(&boxes)
                .filter(|(_, &(s, w, n, e))| {
                    n >= se.lat && s <= nw.lat && e >= nw.lon && w <= se.lon
                })
                .flat_map(|(way, _)| clip_way(way, frame, margin))
                .collect();
            out.sort_by_key(|w| (w.id, w.part));
            FrameExtract::new(*frame, margin_px, out)
        })
        .collect()
}

/// Frames whose margin-expanded square any way segment may touch, derived
/// from per-way bounding boxes. Callers filter empties after partitioning.
pub fn frames_touched(
    ways: &[RoadWay],
    zoom: u8,
    grid: u32,
    tile_px: u32,
    margin_px: u32,
) -> Vec<StitchFrame> {
    let n = (1u64 << zoom) as f64;
    let frame_px = f64::from(grid * tile_px);
    let frames_per_side = ((1u64 << zoom) / u64::from(grid)) as i64;
    let margin = f64::from(margin_px);
    let mut set = BTreeSet::new();
    for w in ways {
        let (s, west, north, e) = geo_bbox(&w.polyline);
        let x0 = mercator_x(west) * n * f64::from(tile_px) - margin;
        let x1 = mercator_x(e) * n * f64::from(tile_px) + margin;
        let y0 = mercator_y(north) * n * f64::from(tile_px) - margin;
        let y1 = mercator_y(s) * n * f64::from(tile_px) + margin;
        let fx0 = ((x0 / frame_px).floor() as i64).clamp(0, frames_per_side - 1);
        let fx1 = ((x1 / frame_px).floor() as i64).clamp(0, frames_per_side - 1);
        let fy0 = ((y0 / frame_px).floor() as i64).clamp(0, frames_per_side - 1);
        let fy1 = ((y1 / frame_px).floor() as i64).clamp(0, frames_per_side - 1);
        for fy in fy0..=fy1 {
            for fx in fx0..=fx1 {
                set.insert((fx, fy));
            }
        }
    }
    set.into_iter()
        .filter_map(|(fx, fy)| {
            let origin = TileCoord::new(zoom, fx as u32 * grid, fy as u32 * grid).ok()?;
            StitchFrame::new(origin, grid, tile_px).ok()
        })
        .collect()
}
