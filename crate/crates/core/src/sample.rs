//! Seeded random crops from stitched pairs.
//!
//! Generator: `ChaCha8Rng::seed_from_u64(seed)` with `set_stream(worker)`, one
//! stream per worker. Draws are grouped in blocks of `block` patches. Block `b`
//! belongs to worker `b % workers`. For each of its blocks, in order, a worker
//! draws the frame index with `random_range(0..pool_len)`, then `top` and
//! `left` with `random_range(0..=frame_px - size)` for each patch. Frames are
//! drawn with replacement.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{write_output, OutputError, WriteOutcome};
use crate::manifest::{encode_jsonl, ManifestHeader, PATCH_SCHEMA};
use crate::render::{encode_png, MaskRaster, RenderError};
use crate::stitch::{load_image, load_mask, StitchError, StitchedPair};

pub const DEFAULT_PATCH_PX: u32 = 512;
pub const DEFAULT_BLOCK: u32 = 64;
pub const PATCH_MANIFEST: &str = "patches.jsonl";

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("patch size {patch} exceeds frame size {frame}")]
    PatchTooLarge { frame: u32, patch: u32 },
    #[error("invalid sampling parameters: {0}")]
    Params(String),
    #[error("frame {0} not found")]
    MissingFrame(String),
    #[error("frame {key}")]
    Frame {
        key: String,
        #[source]
        source: StitchError,
    },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Output(#[from] OutputError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Inclusive placements: `(frame - patch + 1)²`.
pub fn position_count(frame_px: u32, patch_px: u32) -> Result<u64, SampleError> {
    if patch_px == 0 || patch_px > frame_px {
        return Err(SampleError::PatchTooLarge {
            frame: frame_px,
            patch: patch_px,
        });
    }
    let per_axis = u64::from(frame_px - patch_px) + 1;
    Ok(per_axis * per_axis)
}

/// The exclusive count `(frame - patch)²`, which omits the last row and column of offsets.
pub fn exclusive_position_count(frame_px: u32, patch_px: u32) -> Result<u64, SampleError> {
    position_count(frame_px, patch_px).map(|_| u64::from(frame_px - patch_px).pow(2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleParams {
    pub n: u64,
    pub seed: u64,
    pub size: u32,
    pub block: u32,
    pub workers: u32,
}

impl Default for SampleParams {
    fn default() -> Self {
        Self {
            n: 0,
            seed: 0,
            size: DEFAULT_PATCH_PX,
            block: DEFAULT_BLOCK,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub frame: String,
    pub top: u32,
    pub left: u32,
    pub size: u32,
    pub seed: u64,
    pub worker: u32,
    /// Index of this draw within its worker's stream.
    pub draw: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub image: RgbImage,
    /// 0/1 values.
    pub mask: GrayImage,
    pub spec: PatchSpec,
}

pub fn worker_rng(seed: u64, worker: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(worker));
    rng
}

/// One frame load and the patches cut from it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanBlock {
    pub frame_index: usize,
    pub specs: Vec<PatchSpec>,
}

/// Draws every PatchSpec without touching the disk. Patch `k` is
/// `blocks[k / block].specs[k % block]`.
pub fn plan(
    keys: &[String],
    frame_px: u32,
    params: &SampleParams,
) -> Result<Vec<PlanBlock>, SampleError> {
    position_count(frame_px, params.size)?;
    if params.block == 0 || params.workers == 0 {
        return Err(SampleError::Params(
            "block and workers must be positive".into(),
        ));
    }
    if keys.is_empty() && params.n > 0 {
        return Err(SampleError::Params("empty pool".into()));
    }
    let block = u64::from(params.block);
    let n_blocks = params.n.div_ceil(block);
    let max_off = frame_px - params.size;
    let mut rngs: Vec<ChaCha8Rng> = (0..params.workers)
        .map(|w| worker_rng(params.seed, w))
        .collect();
    let mut drawn = vec![0u64; params.workers as usize];
    let mut out = Vec::with_capacity(n_blocks as usize);
    for b in 0..n_blocks {
        let w = (b % u64::from(params.workers)) as usize;
        let rng = &mut rngs[w];
        let frame_index = rng.random_range(0..keys.len());
        let take = block.min(params.n - b * block);
        let specs = (0..take)
            .map(|_| {
                let top = rng.random_range(0..=max_off);
                let left = rng.random_range(0..=max_off);
                let spec = PatchSpec {
                    frame: keys[frame_index].clone(),
                    top,
                    left,
                    size: params.size,
                    seed: params.seed,
                    worker: w as u32,
                    draw: drawn[w],
                };
                drawn[w] += 1;
                spec
            })
            .collect();
        out.push(PlanBlock { frame_index, specs });
    }
    Ok(out)
}

pub fn crop_pair(image: &RgbImage, mask: &MaskRaster, spec: &PatchSpec) -> PatchPair {
    let (t, l, s) = (spec.top, spec.left, spec.size);
    let img = image::imageops::crop_imm(image, l, t, s, s).to_image();
    let mut m = GrayImage::new(s, s);
    for i in 0..s {
        for j in 0..s {
            m.put_pixel(
                j,
                i,
                image::Luma([mask.get((t + i) as usize, (l + j) as usize)]),
            );
        }
    }
    PatchPair {
        image: img,
        mask: m,
        spec: spec.clone(),
    }
}

/// Frames resolved from a pair store.
pub struct FrameSource<'a> {
    pub root: &'a Path,
    pub pairs: &'a [StitchedPair],
}

impl FrameSource<'_> {
    pub fn keys(&self) -> Vec<String> {
        self.pairs.iter().map(|p| p.key.clone()).collect()
    }

    fn frame_px(&self) -> u32 {
        self.pairs.first().map(|p| p.frame.size_px()).unwrap_or(0)
    }

    fn load(&self, index: usize) -> Result<(RgbImage, MaskRaster), SampleError> {
        let pair = &self.pairs[index];
        let wrap = |source: StitchError| match source {
            StitchError::Io(ref e) if e.kind() == std::io::ErrorKind::NotFound => {
                SampleError::MissingFrame(pair.key.clone())
            }
            source => SampleError::Frame {
                key: pair.key.clone(),
                source,
            },
        };
        Ok((
            load_image(self.root, pair).map_err(wrap)?,
            load_mask(self.root, pair).map_err(wrap)?,
        ))
    }
}

/// Resolves pool keys against the pair manifest, keeping pool order.
pub fn resolve_pool(
    pool: &[String],
    pairs: &[StitchedPair],
) -> Result<Vec<StitchedPair>, SampleError> {
    let by_key: std::collections::HashMap<&str, &StitchedPair> =
        pairs.iter().map(|p| (p.key.as_str(), p)).collect();
    pool.iter()
        .map(|k| {
            by_key
                .get(k.as_str())
                .map(|p| (*p).clone())
                .ok_or_else(|| SampleError::MissingFrame(k.clone()))
        })
        .collect()
}

/// Lazily loads one frame per block and yields its patches.
pub struct PatchStream<'a> {
    source: &'a FrameSource<'a>,
    blocks: std::vec::IntoIter<PlanBlock>,
    current: Option<(
        std::sync::Arc<(RgbImage, MaskRaster)>,
        std::vec::IntoIter<PatchSpec>,
    )>,
    frames_opened: usize,
}

impl PatchStream<'_> {
    pub fn frames_opened(&self) -> usize {
        self.frames_opened
    }
}

impl Iterator for PatchStream<'_> {
    type Item = Result<PatchPair, SampleError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some((frame, specs)) = &mut self.current {
                if let Some(spec) = specs.next() {
                    return Some(Ok(crop_pair(&frame.0, &frame.1, &spec)));
                }
            }
            let block = self.blocks.next()?;
            self.frames_opened += 1;
            match self.source.load(block.frame_index) {
                Ok(f) => self.current = Some((std::sync::Arc::new(f), block.specs.into_iter())),
                Err(e) => {
                    self.current = None;
                    return Some(Err(e));
                }
            }
        }
    }
}

pub fn sample_patches<'a>(
    source: &'a FrameSource<'a>,
    params: &SampleParams,
) -> Result<PatchStream<'a>, SampleError> {
    let blocks = plan(&source.keys(), source.frame_px(), params)?;
    Ok(PatchStream {
        source,
        blocks: blocks.into_iter(),
        current: None,
        frames_opened: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub index: u64,
    pub image: String,
    pub mask: String,
    #[serde(flatten)]
    pub spec: PatchSpec,
}

fn patch_files(k: u64) -> (String, String) {
    (format!("img_{k}.png"), format!("msk_{k}.png"))
}

fn encode_pair(p: &PatchPair) -> Result<(Vec<u8>, Vec<u8>), SampleError> {
    let img = encode_png(
        p.image.as_raw(),
        p.image.width(),
        p.image.height(),
        image::ExtendedColorType::Rgb8,
    )?;
    let gray: Vec<u8> = p.mask.as_raw().iter().map(|&v| v * 255).collect();
    let msk = encode_png(
        &gray,
        p.mask.width(),
        p.mask.height(),
        image::ExtendedColorType::L8,
    )?;
    Ok((img, msk))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportSummary {
    pub patches: u64,
    pub frames_opened: usize,
    pub manifest: PathBuf,
}

/// Writes `img_{k}.png`, `msk_{k}.png` and `patches.jsonl` into `out`.
/// Blocks are processed in parallel; on any error every file written by this
/// call is removed.
pub fn export_patches(
    source: &FrameSource<'_>,
    params: &SampleParams,
    out: &Path,
    header: &ManifestHeader,
    force: bool,
) -> Result<ExportSummary, SampleError> {
    let blocks = plan(&source.keys(), source.frame_px(), params)?;
    std::fs::create_dir_all(out)?;
    let block = u64::from(params.block);
    let written = std::sync::Mutex::new(Vec::<PathBuf>::new());
    let result = blocks
        .par_iter()
        .enumerate()
        .map(|(b, pb)| -> Result<Vec<PatchRecord>, SampleError> {
            let (image, mask) = source.load(pb.frame_index)?;
            let mut recs = Vec::with_capacity(pb.specs.len());
            for (j, spec) in pb.specs.iter().enumerate() {
                let k = b as u64 * block + j as u64;
                let (img_name, msk_name) = patch_files(k);
                let (img, msk) = encode_pair(&crop_pair(&image, &mask, spec))?;
                for (name, bytes) in [(&img_name, img), (&msk_name, msk)] {
                    let path = out.join(name);
                    if write_output(&path, &bytes, force)? == WriteOutcome::Written {
                        written.lock().unwrap_or_else(|e| e.into_inner()).push(path);
                    }
                }
                recs.push(PatchRecord {
                    index: k,
                    image: img_name,
                    mask: msk_name,
                    spec: spec.clone(),
                });
            }
            Ok(recs)
        })
        .collect::<Result<Vec<_>, _>>()
        .and_then(|per_block| {
            let records: Vec<PatchRecord> = per_block.into_iter().flatten().collect();
            let path = out.join(PATCH_MANIFEST);
            if write_output(&path, &encode_jsonl(header, &records), force)? == WriteOutcome::Written
            {
                written
                    .lock()
                    .unwrap_or_else(|e| e.into_inner())
                    .push(path.clone());
            }
            Ok(path)
        });
    match result {
        Ok(manifest) => Ok(ExportSummary {
            patches: params.n,
            frames_opened: blocks.len(),
            manifest,
        }),
        Err(e) => {
            for p in written.into_inner().unwrap_or_else(|e| e.into_inner()) {
                let _ = std::fs::remove_file(p);
            }
            Err(e)
        }
    }
}

pub fn patch_header(config_digest: &str, seed: u64) -> ManifestHeader {
    ManifestHeader::new(PATCH_SCHEMA, config_digest, seed)
}
