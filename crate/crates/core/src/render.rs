//! Binary road masks from frame extracts.
//!
//! A pixel is road iff its centre lies within `stroke_px / 2` of some road
//! segment (a capsule: round caps and joins, no anti-aliasing).

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageEncoder, Luma};
use rayon::prelude::*;
use thiserror::Error;

use crate::io::write_atomic;
use crate::osm::FrameExtract;
use crate::tile::StitchFrame;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("mask is {got_w}x{got_h}, frame {frame} expects {want}x{want}")]
    Size {
        frame: String,
        got_w: u32,
        got_h: u32,
        want: u32,
    },
}

/// Row band height used by the parallel renderer.
const BAND_ROWS: usize = 64;
/// Half-width of the uncertainty band around computed span edges. Pixels in
/// the band are settled by the exact predicate.
const EDGE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskRaster {
    pub frame: StitchFrame,
    width: usize,
    height: usize,
    /// Row-major, 1 = road.
    pixels: Vec<u8>,
    road_pixel_count: u64,
}

impl MaskRaster {
    pub fn empty(frame: StitchFrame) -> Self {
        let side = frame.size_px() as usize;
        Self {
            frame,
            width: side,
            height: side,
            pixels: vec![0; side * side],
            road_pixel_count: 0,
        }
    }

    /// Builds from 0/1 (or 0/non-zero) pixels, recounting road pixels.
    pub fn from_pixels(frame: StitchFrame, pixels: Vec<u8>) -> Self {
        let side = frame.size_px() as usize;
        assert_eq!(
            pixels.len(),
            side * side,
            "pixel buffer does not match frame size"
        );
        let pixels: Vec<u8> = pixels.into_iter().map(|v| u8::from(v != 0)).collect();
        let road_pixel_count = count_ones(&pixels);
        Self {
            frame,
            width: side,
            height: side,
            pixels,
            road_pixel_count,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn road_pixel_count(&self) -> u64 {
        self.road_pixel_count
    }

    /// Single-channel 8-bit PNG, road = 255.
    pub fn to_png(&self) -> Result<Vec<u8>, RenderError> {
        let gray: Vec<u8> = self.pixels.iter().map(|&v| v * 255).collect();
        encode_png(
            &gray,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )
    }

    pub fn from_png(frame: StitchFrame, bytes: &[u8]) -> Result<Self, RenderError> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.into_luma8();
        let want = frame.size_px();
        if img.width() != want || img.height() != want {
            return Err(RenderError::Size {
                frame: frame.key(),
                got_w: img.width(),
                got_h: img.height(),
                want,
            });
        }
        Ok(Self::from_pixels(frame, img.into_raw()))
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([self.get(y as usize, x as usize) * 255])
        })
    }

    /// Writes `{dir}/{z_x_y}.png`.
    pub fn write_png(&self, dir: &Path) -> Result<std::path::PathBuf, RenderError> {
        let path = dir.join(mask_file_name(&self.frame));
        write_atomic(&path, &self.to_png()?)?;
        Ok(path)
    }
}

pub fn mask_file_name(frame: &StitchFrame) -> String {
    format!("{}.png", frame.key())
}

pub(crate) fn encode_png(
    buf: &[u8],
    w: u32,
    h: u32,
    color: image::ExtendedColorType,
) -> Result<Vec<u8>, RenderError> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new_with_quality(
        Cursor::new(&mut out),
        image::codecs::png::CompressionType::Fast,
        image::codecs::png::FilterType::Adaptive,
    )
    .write_image(buf, w, h, color)?;
    Ok(out)
}

fn count_ones(pixels: &[u8]) -> u64 {
    pixels.iter().map(|&v| u64::from(v)).sum()
}

/// One stroked road segment in frame pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub ax: f64,
    pub ay: f64,
    pub bx: f64,
    pub by: f64,
    /// Stroke radius, `stroke_px / 2`.
    pub radius: f64,
}

impl Segment {
    pub fn new(a: (f64, f64), b: (f64, f64), stroke_px: u32) -> Self {
        Self {
            ax: a.0,
            ay: a.1,
            bx: b.0,
            by: b.1,
            radius: f64::from(stroke_px) / 2.0,
        }
    }

    /// Exact coverage predicate for a point.
    #[inline]
    pub fn covers(&self, cx: f64, cy: f64) -> bool {
        let dx = self.bx - self.ax;
        let dy = self.by - self.ay;
        let len2 = dx * dx + dy * dy;
        let (qx, qy) = if len2 == 0.0 {
            (self.ax, self.ay)
        } else {
            let t = (((cx - self.ax) * dx + (cy - self.ay) * dy) / len2).clamp(0.0, 1.0);
            (self.ax + t * dx, self.ay + t * dy)
        };
        let ex = cx - qx;
        let ey = cy - qy;
        ex * ex + ey * ey <= self.radius * self.radius
    }

    fn y_range(&self) -> (f64, f64) {
        (
            self.ay.min(self.by) - self.radius,
            self.ay.max(self.by) + self.radius,
        )
    }

    /// x-extent of the capsule of radius `r` on the horizontal line `y`.
    fn span(&self, y: f64, r: f64) -> Option<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (px, py) in [(self.ax, self.ay), (self.bx, self.by)] {
            let d = y - py;
            if d.abs() <= r {
                let h = (r * r - d * d).sqrt();
                lo = lo.min(px - h);
                hi = hi.max(px + h);
            }
        }
        let dx = self.bx - self.ax;
        let dy = self.by - self.ay;
        let len2 = dx * dx + dy * dy;
        if len2 > 0.0 {
            let len = len2.sqrt();
            let ry = y - self.ay;
            // 0 <= (x - ax) dx + ry dy <= len2
            let along = linear_range(dx, ry * dy - self.ax * dx, 0.0, len2);
            // |dx ry - dy (x - ax)| <= r len
            let across = linear_range(-dy, dx * ry + dy * self.ax, -r * len, r * len);
            if let (Some(a), Some(b)) = (along, across) {
                let (l, h) = (a.0.max(b.0), a.1.min(b.1));
                if l <= h {
                    lo = lo.min(l);
                    hi = hi.max(h);
                }
            }
        }
        (lo <= hi).then_some((lo, hi))
    }
}

/// Solutions of `lo <= alpha x + beta <= hi`.
fn linear_range(alpha: f64, beta: f64, lo: f64, hi: f64) -> Option<(f64, f64)> {
    if alpha == 0.0 {
        return (lo <= beta && beta <= hi).then_some((f64::NEG_INFINITY, f64::INFINITY));
    }
    let a = (lo - beta) / alpha;
    let b = (hi - beta) / alpha;
    Some((a.min(b), a.max(b)))
}

/// Segments of every way in an extract.
pub fn extract_segments(extract: &FrameExtract) -> Vec<Segment> {
    extract
        .ways
        .iter()
        .flat_map(|w| {
            w.points.windows(2).map(move |p| {
                Segment::new((p[0].px, p[0].py), (p[1].px, p[1].py), w.class.stroke_px)
            })
        })
        .collect()
}

/// Rasterises `seg` into the rows `[row0, row0 + rows.len() / width)`.
fn draw_segment(seg: &Segment, rows: &mut [u8], row0: usize, width: usize) {
    let nrows = rows.len() / width;
    if nrows == 0 || width == 0 {
        return;
    }
    let (ylo, yhi) = seg.y_range();
    let r_in = (seg.radius - EDGE_EPS).max(0.0);
    let r_out = seg.radius + EDGE_EPS;
    // rows whose centre i + 0.5 lies in [ylo - eps, yhi + eps]
    let first = ((ylo - EDGE_EPS - 0.5).ceil().max(row0 as f64)) as usize;
    let last_f = (yhi + EDGE_EPS - 0.5).floor();
    if last_f < row0 as f64 {
        return;
    }
    let last = (last_f as usize).min(row0 + nrows - 1);
    let wmax = width as f64 - 1.0;
    for i in first..=last {
        let cy = i as f64 + 0.5;
        let Some((ol, oh)) = seg.span(cy, r_out) else {
            continue;
        };
        // pixels j with centre j + 0.5 in [ol, oh]
        let jo_lo = (ol - 0.5).ceil().max(0.0);
        let jo_hi = (oh - 0.5).floor().min(wmax);
        if jo_lo > jo_hi {
            continue;
        }
        let (jo_lo, jo_hi) = (jo_lo as usize, jo_hi as usize);
        let row = &mut rows[(i - row0) * width..(i - row0 + 1) * width];
        let (ji_lo, ji_hi) = match seg.span(cy, r_in) {
            Some((il, ih)) => (
                (il - 0.5).ceil().max(jo_lo as f64),
                (ih - 0.5).floor().min(jo_hi as f64),
            ),
            None => (1.0, 0.0),
        };
        if ji_lo <= ji_hi {
            let (ji_lo, ji_hi) = (ji_lo as usize, ji_hi as usize);
            row[ji_lo..=ji_hi].fill(1);
            for j in (jo_lo..ji_lo).chain(ji_hi + 1..=jo_hi) {
                if row[j] == 0 && seg.covers(j as f64 + 0.5, cy) {
                    row[j] = 1;
                }
            }
        } else {
            for j in jo_lo..=jo_hi {
                if row[j] == 0 && seg.covers(j as f64 + 0.5, cy) {
                    row[j] = 1;
                }
            }
        }
    }
}

/// Renders segments on a single thread.
pub fn render_segments(frame: StitchFrame, segments: &[Segment]) -> MaskRaster {
    let mut mask = MaskRaster::empty(frame);
    let width = mask.width;
    for seg in segments {
        draw_segment(seg, &mut mask.pixels, 0, width);
    }
    mask.road_pixel_count = count_ones(&mask.pixels);
    mask
}

/// Renders segments with row-band parallelism; each band only visits the
/// segments bucketed to it. Output is bit-identical to [`render_segments`].
pub fn render_segments_banded(frame: StitchFrame, segments: &[Segment]) -> MaskRaster {
    let mut mask = MaskRaster::empty(frame);
    let width = mask.width;
    let nbands = mask.height.div_ceil(BAND_ROWS);
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); nbands];
    for (k, seg) in segments.iter().enumerate() {
        let (ylo, yhi) = seg.y_range();
        let b0 = ((ylo - 1.0).max(0.0) as usize / BAND_ROWS).min(nbands.saturating_sub(1));
        if yhi + 1.0 < 0.0 {
            continue;
        }
        let b1 = (((yhi + 1.0).max(0.0) as usize) / BAND_ROWS).min(nbands.saturating_sub(1));
        for bucket in &mut buckets[b0..=b1] {
            bucket.push(k);
        }
    }
    mask.pixels
        .par_chunks_mut(BAND_ROWS * width)
        .zip(buckets.par_iter())
        .enumerate()
        .for_each(|(b, (rows, bucket))| {
            for &k in bucket {
                draw_segment(&segments[k], rows, b * BAND_ROWS, width);
            }
        });
    mask.road_pixel_count = count_ones(&mask.pixels);
    mask
}

/// Renders a frame extract sequentially.
pub fn render_frame(extract: &FrameExtract) -> MaskRaster {
    render_segments(extract.frame, &extract_segments(extract))
}

/// Renders a frame extract with row-band parallelism.
pub fn render_frame_par(extract: &FrameExtract) -> MaskRaster {
    render_segments_banded(extract.frame, &extract_segments(extract))
}

/// Fraction of road pixels.
pub fn measure_density(mask: &MaskRaster) -> f64 {
    mask.road_pixel_count as f64 / (mask.width * mask.height) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::osm::{ExtractWay, RoadClass, RoadTier};
    use crate::tile::{PixelCoord, TileCoord};
    use proptest::prelude::*;

    fn frame(grid: u32) -> StitchFrame {
        StitchFrame::new(TileCoord::new(18, 0, 0).unwrap(), grid, 256).unwrap()
    }

    /// Brute force: every pixel centre against every segment.
    fn oracle(frame: StitchFrame, segs: &[Segment]) -> Vec<u8> {
        let side = frame.size_px() as usize;
        let mut out = vec![0u8; side * side];
        for i in 0..side {
            for j in 0..side {
                let (cx, cy) = (j as f64 + 0.5, i as f64 + 0.5);
                if segs.iter().any(|s| {
                    let dx = s.bx - s.ax;
                    let dy = s.by - s.ay;
                    let l2 = dx * dx + dy * dy;
                    let t = if l2 == 0.0 {
                        0.0
                    } else {
                        (((cx - s.ax) * dx + (cy - s.ay) * dy) / l2).clamp(0.0, 1.0)
                    };
                    let ex = cx - (s.ax + t * dx);
                    let ey = cy - (s.ay + t * dy);
                    ex * ex + ey * ey <= s.radius * s.radius
                }) {
                    out[i * side + j] = 1;
                }
            }
        }
        out
    }

    #[test]
    fn empty_extract_renders_nothing() {
        let f = frame(16);
        let m = render_frame(&FrameExtract::empty(f, 32));
        assert_eq!(m.road_pixel_count(), 0);
        assert_eq!(measure_density(&m), 0.0);
        assert_eq!((m.width(), m.height()), (4096, 4096));
    }

    #[test]
    fn horizontal_main_road_is_fifteen_rows() {
        let f = frame(16);
        let ex = FrameExtract::new(
            f,
            32,
            vec![ExtractWay {
                id: 1,
                part: 0,
                class: RoadClass::new(RoadTier::Main),
                highway: "motorway".into(),
                points: vec![
                    PixelCoord {
                        px: -20.0,
                        py: 2048.5,
                    },
                    PixelCoord {
                        px: 4116.0,
                        py: 2048.5,
                    },
                ],
            }],
        );
        let m = render_frame(&ex);
        assert_eq!(m.road_pixel_count(), 15 * 4096);
        assert_eq!(measure_density(&m), 15.0 / 4096.0);
        for i in 0..4096 {
            let expect = u8::from((2041..=2055).contains(&i));
            assert_eq!(m.get(i, 0), expect, "row {i}");
            assert_eq!(m.get(i, 4095), expect, "row {i}");
        }
    }

    #[test]
    fn all_road_density_is_one() {
        let f = frame(1);
        let m = render_segments(f, &[Segment::new((128.0, 128.0), (128.0, 128.0), 400)]);
        assert_eq!(measure_density(&m), 1.0);
    }

    #[test]
    fn degenerate_segment_is_a_disc() {
        let f = frame(1);
        let segs = [Segment::new((100.0, 100.0), (100.0, 100.0), 10)];
        assert_eq!(
            render_segments(f, &segs).pixels(),
            oracle(f, &segs).as_slice()
        );
    }

    #[test]
    fn rotation_symmetry() {
        let f = frame(1);
        let w = 256.0;
        let segs = [
            Segment::new((10.5, 20.0), (200.0, 90.5), 15),
            Segment::new((30.0, 200.0), (31.0, 60.0), 10),
            Segment::new((120.0, 120.0), (250.0, 240.5), 5),
        ];
        let rotated: Vec<Segment> = segs
            .iter()
            .map(|s| Segment {
                ax: w - s.ay,
                ay: s.ax,
                bx: w - s.by,
                by: s.bx,
                radius: s.radius,
            })
            .collect();
        let a = render_segments(f, &segs);
        let b = render_segments(f, &rotated);
        for i in 0..256 {
            for j in 0..256 {
                assert_eq!(a.get(i, j), b.get(j, 255 - i), "({i},{j})");
            }
        }
    }

    #[test]
    fn png_round_trip() {
        let f = frame(1);
        let m = render_segments(f, &[Segment::new((3.0, 3.0), (200.0, 150.0), 10)]);
        let png = m.to_png().unwrap();
        assert_eq!(MaskRaster::from_png(f, &png).unwrap(), m);
        let img = image::load_from_memory(&png).unwrap();
        assert_eq!(img.color(), image::ColorType::L8);
        assert!(matches!(
            MaskRaster::from_png(frame(2), &png),
            Err(RenderError::Size { .. })
        ));
    }

    fn arb_segments() -> impl Strategy<Value = Vec<Segment>> {
        proptest::collection::vec(
            (
                -40.0f64..296.0,
                -40.0f64..296.0,
                -40.0f64..296.0,
                -40.0f64..296.0,
                prop_oneof![Just(5u32), Just(10u32), Just(15u32)],
            )
                .prop_map(|(ax, ay, bx, by, s)| Segment::new((ax, ay), (bx, by), s)),
            1..12,
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn fast_path_matches_oracle(segs in arb_segments()) {
            let f = frame(1);
            let fast = render_segments(f, &segs);
            let expect = oracle(f, &segs);
            prop_assert_eq!(fast.pixels(), expect.as_slice());
            prop_assert_eq!(render_segments_banded(f, &segs), fast);
        }

        #[test]
        fn adding_a_way_never_clears(segs in arb_segments(), extra in arb_segments()) {
            let f = frame(1);
            let base = render_segments(f, &segs);
            let all: Vec<_> = segs.iter().chain(&extra).copied().collect();
            let more = render_segments(f, &all);
            prop_assert!(base.pixels().iter().zip(more.pixels()).all(|(a, b)| a <= b));
        }
    }
}
