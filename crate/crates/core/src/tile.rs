//! Slippy-map (XYZ) tile math on the spherical Web-Mercator projection.
//!
//! Tiles are addressed top-left origin with `y` growing southward. Longitudes
//! live in the half-open range `[-180, 180)`; a point on a shared tile edge
//! belongs to the tile east or south of it.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Northernmost latitude representable in Web-Mercator, `atan(sinh(pi))`.
pub const MAX_LAT: f64 = 85.051_128_779_806_59;
/// Highest zoom level accepted; keeps tile indices exact in `u32` and `f64`.
pub const MAX_ZOOM: u8 = 30;
/// Equatorial ground resolution at zoom 0, metres per 256-px tile pixel.
pub const EQUATOR_RESOLUTION_Z0: f64 = 156_543.033_92;

pub const DEFAULT_ZOOM: u8 = 18;
pub const DEFAULT_GRID: u32 = 16;
pub const DEFAULT_TILE_PX: u32 = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} outside Web-Mercator bound ±{MAX_LAT}")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
    #[error("zoom {0} exceeds maximum {MAX_ZOOM}")]
    Zoom(u8),
    #[error("tile {x}/{y} out of range at zoom {z}")]
    TileRange { z: u8, x: u32, y: u32 },
    #[error("frame origin {x}/{y} not aligned to grid {grid}")]
    Unaligned { x: u32, y: u32, grid: u32 },
    #[error("invalid frame geometry: {0}")]
    Frame(String),
    #[error("point ({lat}, {lon}) falls outside frame {frame} (pixel {px:.3}, {py:.3})")]
    OutOfFrame {
        lat: f64,
        lon: f64,
        frame: String,
        px: f64,
        py: f64,
    },
    #[error("malformed frame key {0:?}")]
    Key(String),
}

/// A WGS84 position in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    /// Validates the latitude and folds `lon = 180` onto `-180`.
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !(-MAX_LAT..=MAX_LAT).contains(&lat) {
            return Err(GeoError::Latitude(lat));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::Longitude(lon));
        }
        let lon = if lon == 180.0 { -180.0 } else { lon };
        Ok(Self { lat, lon })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileCoord {
    pub z: u8,
    pub x: u32,
    pub y: u32,
}

impl TileCoord {
    pub fn new(z: u8, x: u32, y: u32) -> Result<Self, GeoError> {
        if z > MAX_ZOOM {
            return Err(GeoError::Zoom(z));
        }
        let n = 1u64 << z;
        if u64::from(x) >= n || u64::from(y) >= n {
            return Err(GeoError::TileRange { z, x, y });
        }
        Ok(Self { z, x, y })
    }

    /// `z_x_y`, the key used for file names and manifests.
    pub fn key(&self) -> String {
        format!("{}_{}_{}", self.z, self.x, self.y)
    }

    pub fn parse_key(key: &str) -> Result<Self, GeoError> {
        let bad = || GeoError::Key(key.to_string());
        let mut it = key.split('_');
        let (Some(z), Some(x), Some(y), None) = (it.next(), it.next(), it.next(), it.next()) else {
            return Err(bad());
        };
        let z = z.parse().map_err(|_| bad())?;
        let x = x.parse().map_err(|_| bad())?;
        let y = y.parse().map_err(|_| bad())?;
        Self::new(z, x, y)
    }
}

impl fmt::Display for TileCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.z, self.x, self.y)
    }
}

fn tiles_at(z: u8) -> f64 {
    (1u64 << z) as f64
}

/// Normalised Mercator x in `[0, 1)` for a longitude in degrees.
#[inline]
pub fn mercator_x(lon: f64) -> f64 {
    (lon + 180.0) / 360.0
}

/// Normalised Mercator y in `[0, 1]`, 0 at the north edge.
#[inline]
pub fn mercator_y(lat: f64) -> f64 {
    let phi = lat.to_radians();
    (1.0 - (phi.tan() + 1.0 / phi.cos()).ln() / PI) / 2.0
}

#[inline]
fn lon_of_mercator_x(mx: f64) -> f64 {
    mx * 360.0 - 180.0
}

#[inline]
fn lat_of_mercator_y(my: f64) -> f64 {
    (PI * (1.0 - 2.0 * my)).sinh().atan().to_degrees()
}

fn west_edge(x: u32, z: u8) -> f64 {
    lon_of_mercator_x(f64::from(x) / tiles_at(z))
}

fn north_edge(y: u32, z: u8) -> f64 {
    lat_of_mercator_y(f64::from(y) / tiles_at(z))
}

/// Tile containing `p` at zoom `z`.
///
/// The closed-form index is corrected against the same edge functions that
/// [`tile_to_bounds`] uses, so containment in the returned bounds is exact.
pub fn geo_to_tile(p: GeoPoint, z: u8) -> Result<TileCoord, GeoError> {
    if z > MAX_ZOOM {
        return Err(GeoError::Zoom(z));
    }
    if !(-MAX_LAT..=MAX_LAT).contains(&p.lat) {
        return Err(GeoError::Latitude(p.lat));
    }
    let n = tiles_at(z);
    let last = (1u64 << z) as i64 - 1;
    let mut x = ((mercator_x(p.lon) * n).floor() as i64).clamp(0, last);
    let mut y = ((mercator_y(p.lat) * n).floor() as i64).clamp(0, last);

    while x > 0 && p.lon < west_edge(x as u32, z) {
        x -= 1;
    }
    while x < last && p.lon >= west_edge((x + 1) as u32, z) {
        x += 1;
    }
    // rows: north edge inclusive, south edge exclusive
    while y > 0 && p.lat > north_edge(y as u32, z) {
        y -= 1;
    }
    while y < last && p.lat <= north_edge((y + 1) as u32, z) {
        y += 1;
    }
    Ok(TileCoord {
        z,
        x: x as u32,
        y: y as u32,
    })
}

/// North-west and south-east corners of a tile.
pub fn tile_to_bounds(t: TileCoord) -> (GeoPoint, GeoPoint) {
    let nw = GeoPoint {
        lat: north_edge(t.y, t.z),
        lon: west_edge(t.x, t.z),
    };
    let se = GeoPoint {
        lat: north_edge(t.y + 1, t.z),
        lon: lon_of_mercator_x(f64::from(t.x + 1) / tiles_at(t.z)),
    };
    (nw, se)
}

/// True when `p` lies in the tile's half-open cell under the edge convention.
pub fn tile_contains(t: TileCoord, p: GeoPoint) -> bool {
    let (nw, se) = tile_to_bounds(t);
    let last = (1u64 << t.z) - 1;
    let south_ok = p.lat > se.lat || (u64::from(t.y) == last && p.lat >= se.lat);
    let north_ok = p.lat <= nw.lat || t.y == 0;
    p.lon >= nw.lon && p.lon < se.lon && north_ok && south_ok
}

/// Metres per pixel at latitude `lat` for 256-px tiles at zoom `z`.
pub fn ground_resolution(lat: f64, z: u8) -> f64 {
    EQUATOR_RESOLUTION_Z0 * lat.to_radians().cos() / tiles_at(z)
}

/// A `grid × grid` block of tiles stitched into one raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StitchFrame {
    pub origin: TileCoord,
    pub grid: u32,
    pub tile_px: u32,
}

impl StitchFrame {
    pub fn new(origin: TileCoord, grid: u32, tile_px: u32) -> Result<Self, GeoError> {
        if grid == 0 || tile_px == 0 {
            return Err(GeoError::Frame(format!("grid {grid}, tile_px {tile_px}")));
        }
        if origin.x % grid != 0 || origin.y % grid != 0 {
            return Err(GeoError::Unaligned {
                x: origin.x,
                y: origin.y,
                grid,
            });
        }
        let n = 1u64 << origin.z;
        if u64::from(origin.x) + u64::from(grid) > n || u64::from(origin.y) + u64::from(grid) > n {
            return Err(GeoError::Frame(format!(
                "grid {grid} at {origin} overruns zoom {}",
                origin.z
            )));
        }
        Ok(Self {
            origin,
            grid,
            tile_px,
        })
    }

    /// The aligned frame holding `tile`.
    pub fn containing(tile: TileCoord, grid: u32, tile_px: u32) -> Result<Self, GeoError> {
        if grid == 0 {
            return Err(GeoError::Frame("grid 0".into()));
        }
        let origin = TileCoord {
            z: tile.z,
            x: tile.x - tile.x % grid,
            y: tile.y - tile.y % grid,
        };
        Self::new(origin, grid, tile_px)
    }

    /// Side length in pixels.
    pub fn size_px(&self) -> u32 {
        self.grid * self.tile_px
    }

    pub fn key(&self) -> String {
        self.origin.key()
    }

    pub fn bounds(&self) -> (GeoPoint, GeoPoint) {
        let (nw, _) = tile_to_bounds(self.origin);
        let (_, se) = tile_to_bounds(TileCoord {
            z: self.origin.z,
            x: self.origin.x + self.grid - 1,
            y: self.origin.y + self.grid - 1,
        });
        (nw, se)
    }

    /// Member tiles in row-major order.
    pub fn tiles(&self) -> impl Iterator<Item = TileCoord> + '_ {
        (0..self.grid).flat_map(move |r| {
            (0..self.grid).map(move |c| TileCoord {
                z: self.origin.z,
                x: self.origin.x + c,
                y: self.origin.y + r,
            })
        })
    }

    /// Continuous pixel position of `p`, without any range check.
    pub fn project(&self, p: GeoPoint) -> PixelCoord {
        let n = tiles_at(self.origin.z);
        let tile_px = f64::from(self.tile_px);
        PixelCoord {
            px: (mercator_x(p.lon) * n - f64::from(self.origin.x)) * tile_px,
            py: (mercator_y(p.lat) * n - f64::from(self.origin.y)) * tile_px,
        }
    }

    /// Inverse of [`StitchFrame::project`].
    pub fn unproject(&self, c: PixelCoord) -> GeoPoint {
        let n = tiles_at(self.origin.z);
        let tile_px = f64::from(self.tile_px);
        GeoPoint {
            lat: lat_of_mercator_y((c.py / tile_px + f64::from(self.origin.y)) / n),
            lon: lon_of_mercator_x((c.px / tile_px + f64::from(self.origin.x)) / n),
        }
    }
}

impl fmt::Display for StitchFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.key())
    }
}

/// Sub-pixel raster position; pixel `(i, j)` covers `[j, j+1) × [i, i+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelCoord {
    pub px: f64,
    pub py: f64,
}

/// Pixel position of `p` in `frame`, rejecting points further than
/// `margin_px` outside the frame raster.
pub fn geo_to_pixel(
    p: GeoPoint,
    frame: &StitchFrame,
    margin_px: f64,
) -> Result<PixelCoord, GeoError> {
    let c = frame.project(p);
    let lo = -margin_px;
    let hi = f64::from(frame.size_px()) + margin_px;
    if !(lo..=hi).contains(&c.px) || !(lo..=hi).contains(&c.py) {
        return Err(GeoError::OutOfFrame {
            lat: p.lat,
            lon: p.lon,
            frame: frame.key(),
            px: c.px,
            py: c.py,
        });
    }
    Ok(c)
}

/// Inverse of [`geo_to_pixel`].
pub fn pixel_to_geo(c: PixelCoord, frame: &StitchFrame) -> GeoPoint {
    frame.unproject(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    #[test]
    fn origin_maps_to_center_tile() {
        let t = geo_to_tile(pt(0.0, 0.0), 18).unwrap();
        assert_eq!((t.x, t.y), (131072, 131072));
    }

    #[test]
    fn mercator_corner_maps_to_first_tile() {
        let t = geo_to_tile(pt(MAX_LAT, -180.0), 18).unwrap();
        assert_eq!((t.x, t.y), (0, 0));
        let t = geo_to_tile(pt(-MAX_LAT, 179.999_999), 18).unwrap();
        assert_eq!((t.x, t.y), ((1 << 18) - 1, (1 << 18) - 1));
    }

    #[test]
    fn tokyo_tile() {
        // high-precision evaluation gives x = 232847.005..., y = 103224.691...
        let p = pt(35.6833, 139.7667);
        let t = geo_to_tile(p, 18).unwrap();
        assert_eq!((t.x, t.y), (232847, 103224));
        assert!(tile_contains(t, p));
    }

    #[test]
    fn latitude_outside_mercator_is_rejected() {
        assert!(matches!(
            GeoPoint::new(85.06, 0.0),
            Err(GeoError::Latitude(_))
        ));
        let raw = GeoPoint {
            lat: -89.0,
            lon: 0.0,
        };
        assert!(matches!(geo_to_tile(raw, 18), Err(GeoError::Latitude(_))));
    }

    #[test]
    fn lon_180_folds_to_west_edge() {
        let p = pt(10.0, 180.0);
        assert_eq!(p.lon, -180.0);
        assert_eq!(geo_to_tile(p, 5).unwrap().x, 0);
    }

    #[test]
    fn quadrant_bounds() {
        let (nw, se) = tile_to_bounds(TileCoord::new(1, 0, 0).unwrap());
        assert!((nw.lat - MAX_LAT).abs() < 1e-12);
        assert_eq!(nw.lon, -180.0);
        assert_eq!(se.lat, 0.0);
        assert_eq!(se.lon, 0.0);

        let (nw, _) = tile_to_bounds(TileCoord::new(18, 131072, 131072).unwrap());
        assert_eq!((nw.lat, nw.lon), (0.0, 0.0));
    }

    #[test]
    fn shared_edge_belongs_to_east_and_south() {
        let t = TileCoord::new(10, 300, 400).unwrap();
        let (nw, _) = tile_to_bounds(t);
        assert_eq!(geo_to_tile(nw, 10).unwrap(), t);
        let east = TileCoord::new(10, 301, 400).unwrap();
        let (enw, _) = tile_to_bounds(east);
        let (_, se) = tile_to_bounds(t);
        assert_eq!(se.lon, enw.lon);
    }

    #[test]
    fn resolution_values() {
        let eq = ground_resolution(0.0, 18);
        assert!((eq - 0.597_164_283_447_265_6).abs() < 1e-15);
        assert!((ground_resolution(60.0, 18) - eq / 2.0).abs() < 1e-12);
        assert_eq!(ground_resolution(0.0, 0), EQUATOR_RESOLUTION_Z0);
    }

    #[test]
    fn frame_alignment_enforced() {
        let o = TileCoord::new(18, 17, 32).unwrap();
        assert!(matches!(
            StitchFrame::new(o, 16, 256),
            Err(GeoError::Unaligned { .. })
        ));
        let f = StitchFrame::containing(o, 16, 256).unwrap();
        assert_eq!((f.origin.x, f.origin.y, f.size_px()), (16, 32, 4096));
        assert_eq!(f.tiles().count(), 256);
        assert_eq!(
            f.tiles().nth(17).unwrap(),
            TileCoord::new(18, 17, 33).unwrap()
        );
    }

    #[test]
    fn frame_corner_and_center_pixels() {
        let f =
            StitchFrame::containing(TileCoord::new(18, 232847, 103224).unwrap(), 16, 256).unwrap();
        let (nw, _) = f.bounds();
        let c = geo_to_pixel(nw, &f, 0.0).unwrap();
        assert!(c.px.abs() < 1e-6 && c.py.abs() < 1e-6, "{c:?}");

        let mid = f.unproject(PixelCoord {
            px: 2048.0,
            py: 2048.0,
        });
        let c = geo_to_pixel(mid, &f, 0.0).unwrap();
        assert!(
            (c.px - 2048.0).abs() < 1e-6 && (c.py - 2048.0).abs() < 1e-6,
            "{c:?}"
        );
    }

    #[test]
    fn out_of_frame_point_rejected() {
        let f =
            StitchFrame::containing(TileCoord::new(18, 131072, 131072).unwrap(), 16, 256).unwrap();
        let far = pt(-1.0, 1.0);
        assert!(matches!(
            geo_to_pixel(far, &f, 32.0),
            Err(GeoError::OutOfFrame { .. })
        ));
        let near = f.unproject(PixelCoord {
            px: -20.0,
            py: 4110.0,
        });
        assert!(geo_to_pixel(near, &f, 32.0).is_ok());
        assert!(geo_to_pixel(near, &f, 10.0).is_err());
    }

    #[test]
    fn keys_round_trip() {
        let t = TileCoord::new(18, 232847, 103224).unwrap();
        assert_eq!(TileCoord::parse_key(&t.key()).unwrap(), t);
        assert!(TileCoord::parse_key("18_1").is_err());
        assert!(TileCoord::parse_key("3_9_1").is_err());
    }

    /// Direct projection written with `asinh(tan)` rather than `ln(tan + sec)`.
    fn oracle_pixel(p: GeoPoint, f: &StitchFrame) -> (f64, f64) {
        let n = 2f64.powi(i32::from(f.origin.z));
        let wx = (p.lon + 180.0) / 360.0 * n * f64::from(f.tile_px);
        let wy = (0.5 - p.lat.to_radians().tan().asinh() / (2.0 * PI)) * n * f64::from(f.tile_px);
        (
            wx - f64::from(f.origin.x * f.tile_px),
            wy - f64::from(f.origin.y * f.tile_px),
        )
    }

    proptest! {
        #[test]
        fn round_trip_containment(lat in -MAX_LAT..=MAX_LAT, lon in -180.0f64..180.0, z in 0u8..=22) {
            let p = pt(lat, lon);
            let t = geo_to_tile(p, z).unwrap();
            prop_assert!(tile_contains(t, p), "{p:?} not in {t}");
        }

        #[test]
        fn pixel_matches_direct_projection(tx in 0u32..(1 << 14), ty in 0u32..(1 << 14), u in 0.0f64..1.0, v in 0.0f64..1.0) {
            let f = StitchFrame::containing(TileCoord::new(18, tx * 16, ty * 16).unwrap(), 16, 256).unwrap();
            let p = f.unproject(PixelCoord { px: u * 4096.0, py: v * 4096.0 });
            let c = geo_to_pixel(p, &f, 1.0).unwrap();
            let (ox, oy) = oracle_pixel(p, &f);
            prop_assert!((c.px - ox).abs() < 1e-6 && (c.py - oy).abs() < 1e-6);
        }

        #[test]
        fn pixel_projection_is_monotone(a in 0.0f64..4095.0, d in 1e-3f64..1.0) {
            let f = StitchFrame::containing(TileCoord::new(18, 232847, 103224).unwrap(), 16, 256).unwrap();
            let p0 = f.unproject(PixelCoord { px: a, py: a });
            let p1 = f.unproject(PixelCoord { px: a + d, py: a + d });
            let c0 = f.project(p0);
            let c1 = f.project(p1);
            prop_assert!(c1.px > c0.px && c1.py > c0.py);
        }
    }
}
