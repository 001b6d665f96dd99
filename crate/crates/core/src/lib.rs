//! Weak road-segmentation labels from OpenStreetMap.
//!
//! The pipeline turns OSM road vectors into 4096×4096 binary masks aligned
//! with stitched zoom-18 imagery, curates pre-training pools by size and road
//! density, samples reproducible 512×512 training patches, and provides the
//! dice loss and mIoU kernels used to train and evaluate on them.

pub mod config;
pub mod curate;
pub mod fetch;
pub mod io;
pub mod manifest;
pub mod metrics;
pub mod osm;
pub mod render;
pub mod sample;
pub mod stitch;
pub mod tile;

pub use tile::{GeoPoint, PixelCoord, StitchFrame, TileCoord};
