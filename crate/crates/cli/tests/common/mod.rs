#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{ImageFormat, Rgb, RgbImage};
use roadweave::fetch::TileCache;
use roadweave::osm::ExtractWay;
use roadweave::tile::{pixel_to_geo, PixelCoord, StitchFrame, TileCoord};

pub fn frame_at(z: u8, x: u32, y: u32, grid: u32, tile_px: u32) -> StitchFrame {
    StitchFrame::new(TileCoord::new(z, x, y).unwrap(), grid, tile_px).unwrap()
}

/// A way in pixel coordinates of `frame`, tagged `highway=<tag>`.
pub struct FixtureWay {
    pub id: i64,
    pub highway: &'static str,
    pub points: Vec<(f64, f64)>,
    /// Extra node ids referenced but never defined.
    pub dangling: Vec<i64>,
}

/// OSM XML with one node per way vertex, ids numbered from 1.
pub fn osm_xml(frame: &StitchFrame, ways: &[FixtureWay]) -> String {
    let mut nodes = String::new();
    let mut body = String::new();
    let mut next = 1i64;
    for w in ways {
        let mut refs = Vec::new();
        for &(px, py) in &w.points {
            let g = pixel_to_geo(PixelCoord { px, py }, frame);
            writeln!(
                nodes,
                r#"  <node id="{next}" lat="{:.9}" lon="{:.9}" version="1"/>"#,
                g.lat, g.lon
            )
            .unwrap();
            refs.push(next);
            next += 1;
        }
        refs.extend(&w.dangling);
        writeln!(body, r#"  <way id="{}" version="1">"#, w.id).unwrap();
        for r in refs {
            writeln!(body, r#"    <nd ref="{r}"/>"#).unwrap();
        }
        writeln!(body, r#"    <tag k="highway" v="{}"/>"#, w.highway).unwrap();
        writeln!(body, r#"    <tag k="name" v="way {}"/>"#, w.id).unwrap();
        body.push_str("  </way>\n");
    }
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<osm version=\"0.6\" generator=\"fixture\">\n{nodes}{body}  <relation id=\"1\">\n    <member type=\"way\" ref=\"1\" role=\"\"/>\n    <tag k=\"type\" v=\"route\"/>\n  </relation>\n</osm>\n"
    )
}

pub fn tile_png(c: TileCoord, tile_px: u32) -> Vec<u8> {
    let img = RgbImage::from_fn(tile_px, tile_px, |x, y| {
        Rgb([
            (x.wrapping_mul(7) ^ c.x) as u8,
            (y.wrapping_mul(5) ^ c.y) as u8,
            ((x + y) as u8).wrapping_add(c.z),
        ])
    });
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).unwrap();
    out.into_inner()
}

pub fn populate_cache(dir: &Path, frames: &[StitchFrame]) -> TileCache {
    let cache = TileCache::open(dir).unwrap();
    for f in frames {
        for t in f.tiles() {
            cache
                .store(
                    t,
                    &tile_png(t, f.tile_px),
                    "image/png",
                    None,
                    None,
                    "1970-01-01T00:00:00Z",
                )
                .unwrap();
        }
    }
    cache
}

/// Every file under `dir` keyed by relative path.
pub fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn seg_dist2(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (px - a.0, py - a.1);
    let l2 = vx * vx + vy * vy;
    let t = if l2 == 0.0 {
        0.0
    } else {
        ((wx * vx + wy * vy) / l2).clamp(0.0, 1.0)
    };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    dx * dx + dy * dy
}

/// Every pixel centre against every segment of every way.
pub fn raster_oracle(side: usize, ways: &[ExtractWay]) -> Vec<u8> {
    let mut out = vec![0u8; side * side];
    for w in ways {
        let r = f64::from(w.class.stroke_px) / 2.0;
        for pair in w.points.windows(2) {
            let (a, b) = ((pair[0].px, pair[0].py), (pair[1].px, pair[1].py));
            for i in 0..side {
                for j in 0..side {
                    let k = i * side + j;
                    if out[k] == 0 && seg_dist2(j as f64 + 0.5, i as f64 + 0.5, a, b) <= r * r {
                        out[k] = 1;
                    }
                }
            }
        }
    }
    out
}
