//! Tile stitching and persisted (image, mask) pairs.
//!
//! ```text
//! {out}/images/{z_x_y}.png   stitched RGB imagery
//! {out}/masks/{z_x_y}.png    rendered road mask
//! {out}/manifest.jsonl       one StitchedPair per line
//! ```
//! Paths inside records are relative to `{out}`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fetch::TileAsset;
use crate::io::{write_output, OutputError, WriteOutcome};
use crate::manifest::{
    created_at, GeoBounds, Keyed, Manifest, ManifestError, ManifestHeader, PAIR_SCHEMA,
};
use crate::osm::FrameExtract;
use crate::render::{encode_png, measure_density, render_frame_par, MaskRaster, RenderError};
use crate::tile::{StitchFrame, TileCoord};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Error)]
pub enum StitchError {
    #[error("frame {frame}: missing tile {coord}")]
    MissingTile { frame: String, coord: TileCoord },
    #[error("tile {coord}: {message}")]
    BadTile { coord: TileCoord, message: String },
    #[error("extract for {extract} does not belong to frame {frame}")]
    FrameMismatch { frame: String, extract: String },
    #[error("frame {0} is not in the manifest")]
    UnknownFrame(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Output(#[from] OutputError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Copies tile `(r, c)` into the block `[r·px, r·px+px) × [c·px, c·px+px)`, no resampling.
pub fn stitch_image(frame: &StitchFrame, assets: &[TileAsset]) -> Result<RgbImage, StitchError> {
    let by_coord: HashMap<TileCoord, &TileAsset> = assets.iter().map(|a| (a.coord, a)).collect();
    let px = frame.tile_px;
    let side = frame.size_px();
    let mut out = RgbImage::new(side, side);
    for (i, coord) in frame.tiles().enumerate() {
        let asset = by_coord
            .get(&coord)
            .ok_or_else(|| StitchError::MissingTile {
                frame: frame.key(),
                coord,
            })?;
        let bad = |message: String| StitchError::BadTile { coord, message };
        let tile = image::load_from_memory(&asset.bytes)
            .map_err(|e| bad(e.to_string()))?
            .into_rgb8();
        if tile.width() != px || tile.height() != px {
            return Err(bad(format!(
                "{}x{} tile, expected {px}x{px}",
                tile.width(),
                tile.height()
            )));
        }
        let (r, c) = (i as u32 / frame.grid, i as u32 % frame.grid);
        let row_bytes = px as usize * 3;
        let stride = side as usize * 3;
        let dst = out.as_mut();
        for y in 0..px as usize {
            let d = (r as usize * px as usize + y) * stride + c as usize * row_bytes;
            dst[d..d + row_bytes]
                .copy_from_slice(&tile.as_raw()[y * row_bytes..(y + 1) * row_bytes]);
        }
    }
    Ok(out)
}

pub fn encode_rgb_png(img: &RgbImage) -> Result<Vec<u8>, RenderError> {
    encode_png(
        img.as_raw(),
        img.width(),
        img.height(),
        image::ExtendedColorType::Rgb8,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchedPair {
    pub key: String,
    pub frame: StitchFrame,
    pub bounds: GeoBounds,
    pub density: f64,
    pub road_pixels: u64,
    pub image_path: String,
    pub mask_path: String,
    /// Digest of the frame's road extract.
    pub source_digest: String,
    pub image_sha256: String,
    pub mask_sha256: String,
    pub created_at: String,
}

impl Keyed for StitchedPair {
    fn key(&self) -> &str {
        &self.key
    }
}

/// Output directory with its pair manifest. `build_pair` may run from many threads.
pub struct PairStore {
    root: PathBuf,
    manifest: Mutex<Manifest<StitchedPair>>,
    force: bool,
}

impl PairStore {
    pub fn open(root: &Path, header: ManifestHeader, force: bool) -> Result<Self, StitchError> {
        std::fs::create_dir_all(root.join("images"))?;
        std::fs::create_dir_all(root.join("masks"))?;
        let manifest = Manifest::open(&root.join(MANIFEST_FILE), header)?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest: Mutex::new(manifest),
            force,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> Vec<StitchedPair> {
        self.manifest
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .records()
            .to_vec()
    }

    /// Stitches imagery, renders the mask, writes both and records the pair.
    pub fn build_pair(
        &self,
        frame: &StitchFrame,
        assets: &[TileAsset],
        extract: &FrameExtract,
    ) -> Result<StitchedPair, StitchError> {
        if extract.frame != *frame {
            return Err(StitchError::FrameMismatch {
                frame: frame.key(),
                extract: extract.frame.key(),
            });
        }
        let image_png = encode_rgb_png(&stitch_image(frame, assets)?)?;
        let mask = render_frame_par(extract);
        let mask_png = mask.to_png()?;
        let key = frame.key();
        let (nw, se) = frame.bounds();
        let record = StitchedPair {
            key: key.clone(),
            frame: *frame,
            bounds: GeoBounds::from_corners(nw, se),
            density: measure_density(&mask),
            road_pixels: mask.road_pixel_count(),
            image_path: format!("images/{key}.png"),
            mask_path: format!("masks/{key}.png"),
            source_digest: extract.source_digest.clone(),
            image_sha256: hex::encode(Sha256::digest(&image_png)),
            mask_sha256: hex::encode(Sha256::digest(&mask_png)),
            created_at: created_at(),
        };

        let mut written: Vec<PathBuf> = Vec::new();
        let result = (|| -> Result<(), StitchError> {
            for (rel, bytes) in [
                (&record.image_path, &image_png),
                (&record.mask_path, &mask_png),
            ] {
                let path = self.root.join(rel);
                if write_output(&path, bytes, self.force)? == WriteOutcome::Written {
                    written.push(path);
                }
            }
            let mut m = self.manifest.lock().unwrap_or_else(|e| e.into_inner());
            if self.force {
                m.replace(record.clone())?;
            } else {
                m.append(record.clone())?;
            }
            Ok(())
        })();
        if let Err(e) = result {
            for p in written {
                let _ = std::fs::remove_file(p);
            }
            return Err(e);
        }
        Ok(record)
    }
}

pub fn read_pairs(root: &Path) -> Result<(ManifestHeader, Vec<StitchedPair>), StitchError> {
    let (h, recs) = crate::manifest::read_jsonl(&root.join(MANIFEST_FILE))?;
    if h.schema != PAIR_SCHEMA {
        return Err(ManifestError::Parse {
            path: root.join(MANIFEST_FILE),
            line: 1,
            message: format!("unexpected schema {}", h.schema),
        }
        .into());
    }
    Ok((h, recs))
}

pub fn load_mask(root: &Path, pair: &StitchedPair) -> Result<MaskRaster, StitchError> {
    Ok(MaskRaster::from_png(
        pair.frame,
        &std::fs::read(root.join(&pair.mask_path))?,
    )?)
}

pub fn load_image(root: &Path, pair: &StitchedPair) -> Result<RgbImage, StitchError> {
    Ok(image::load_from_memory_with_format(
        &std::fs::read(root.join(&pair.image_path))?,
        image::ImageFormat::Png,
    )?
    .into_rgb8())
}
