//! OSM XML ingestion: streaming parse, paved-road classification, and
//! partitioning of road polylines into per-frame extracts.

mod classify;
mod codec;
mod parse;
mod partition;

use std::io;

use thiserror::Error;

pub use classify::{
    Classifier, RoadClass, RoadTier, StrokeTable, DEFAULT_SMALL_ROADS, MAIN_ROADS, MIDDLE_ROADS,
    REJECTED_ROADS,
};
pub use codec::{
    decode_extract, encode_extract, read_extract, summary_text, write_extract, EXTRACT_EXT,
};
pub use parse::{parse_osm_xml, IngestStats, ParsedOsm, RawWay};
pub use partition::{
    clip_segment, frames_touched, ingest, partition_by_frame, resolve_ways, ExtractWay,
    FrameExtract, RoadWay, DEFAULT_MARGIN_PX,
};

use crate::tile::GeoPoint;

/// A node retained from the source file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OsmNode {
    pub id: i64,
    pub location: GeoPoint,
}

#[derive(Debug, Error)]
pub enum OsmError {
    #[error("malformed OSM XML at byte {offset}: {message}")]
    Xml { offset: u64, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt extract: {0}")]
    Codec(String),
    #[error("invalid classifier configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Geo(#[from] crate::tile::GeoError),
}
