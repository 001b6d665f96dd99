use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read};

use flate2::bufread::MultiGzDecoder;
use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;

use super::{OsmError, OsmNode};
use crate::tile::GeoPoint;

/// A `highway`-tagged way with unresolved node references.
#[derive(Debug, Clone, PartialEq)]
pub struct RawWay {
    pub id: i64,
    pub refs: Vec<i64>,
    pub tags: BTreeMap<String, String>,
}

/// Warning and volume counters. Warnings never abort ingestion.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct IngestStats {
    pub nodes: u64,
    pub ways_seen: u64,
    pub highway_ways: u64,
    pub relations_skipped: u64,
    /// Nodes that appeared after the first way (planet order violated).
    pub nodes_after_ways: u64,
    pub duplicate_nodes: u64,
    /// Nodes outside the Web-Mercator latitude band.
    pub invalid_nodes: u64,
    /// Way references to nodes absent from the file.
    pub dangling_refs: u64,
    pub rejected_ways: u64,
    /// Ways left with fewer than two distinct vertices.
    pub short_ways: u64,
}

impl IngestStats {
    pub fn warnings(&self) -> u64 {
        self.duplicate_nodes + self.invalid_nodes + self.dangling_refs + self.short_ways
    }
}

#[derive(Debug, Default)]
pub struct ParsedOsm {
    pub nodes: HashMap<i64, GeoPoint>,
    pub ways: Vec<RawWay>,
    pub stats: IngestStats,
}

impl ParsedOsm {
    pub fn node(&self, id: i64) -> Option<OsmNode> {
        self.nodes
            .get(&id)
            .map(|&location| OsmNode { id, location })
    }
}

enum Context {
    Outside,
    Node,
    Way(RawWay),
    Relation,
}

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

/// Single streaming pass over an OSM XML document, gzip sniffed by magic bytes.
///
/// Node references are resolved afterwards (see [`super::resolve_ways`]), so
/// the result does not depend on whether nodes precede ways.
pub fn parse_osm_xml<R: Read>(input: R) -> Result<ParsedOsm, OsmError> {
    let mut buffered = BufReader::with_capacity(1 << 16, input);
    let head = buffered.fill_buf()?;
    if head.len() >= 2 && head[..2] == GZIP_MAGIC {
        parse_xml(BufReader::with_capacity(
            1 << 16,
            MultiGzDecoder::new(buffered),
        ))
    } else {
        parse_xml(buffered)
    }
}

fn parse_xml<R: BufRead>(input: R) -> Result<ParsedOsm, OsmError> {
    let mut reader = Reader::from_reader(input);
    let mut out = ParsedOsm::default();
    let mut buf = Vec::with_capacity(1024);
    let mut ctx = Context::Outside;
    let mut depth = 0usize;
    let mut seen_way = false;

    loop {
        let event = reader
            .read_event_into(&mut buf)
            .map_err(|e| OsmError::Xml {
                offset: reader.error_position(),
                message: e.to_string(),
            })?;
        let offset = reader.buffer_position();
        match event {
            Event::Start(ref e) | Event::Empty(ref e) => {
                let empty = matches!(event, Event::Empty(_));
                if !empty {
                    depth += 1;
                }
                match e.local_name().as_ref() {
                    "node" => {
                        let (id, lat, lon) = node_attrs(e, offset)?;
                        out.stats.nodes += 1;
                        if seen_way {
                            out.stats.nodes_after_ways += 1;
                        }
                        match GeoPoint::new(lat, lon) {
                            Ok(p) => {
                                if out.nodes.insert(id, p).is_some() {
                                    out.stats.duplicate_nodes += 1;
                                }
                            }
                            Err(_) => out.stats.invalid_nodes += 1,
                        }
                        if !empty {
                            ctx = Context::Node;
                        }
                    }
                    "way" => {
                        seen_way = true;
                        out.stats.ways_seen += 1;
                        let id = int_attr(e, "id", offset)?;
                        let way = RawWay {
                            id,
                            refs: Vec::new(),
                            tags: BTreeMap::new(),
                        };
                        if empty {
                            finish_way(way, &mut out);
                        } else {
                            ctx = Context::Way(way);
                        }
                    }
                    "relation" => {
                        out.stats.relations_skipped += 1;
                        if !empty {
                            ctx = Context::Relation;
                        }
                    }
                    "nd" => {
                        if let Context::Way(w) = &mut ctx {
                            w.refs.push(int_attr(e, "ref", offset)?);
                        }
                    }
                    "tag" => {
                        if let Context::Way(w) = &mut ctx {
                            let k = str_attr(e, "k", offset)?;
                            let v = str_attr(e, "v", offset)?;
                            w.tags.insert(k, v);
                        }
                    }
                    _ => {}
                }
            }
            Event::End(ref e) => {
                depth = depth.saturating_sub(1);
                match e.local_name().as_ref() {
                    "way" => {
                        if let Context::Way(w) = std::mem::replace(&mut ctx, Context::Outside) {
                            finish_way(w, &mut out);
                        }
                    }
                    "node" | "relation" => ctx = Context::Outside,
                    _ => {}
                }
            }
            Event::Eof => {
                if depth != 0 {
                    return Err(OsmError::Xml {
                        offset,
                        message: format!("unexpected end of document with {depth} open element(s)"),
                    });
                }
                break;
            }
            _ => {}
        }
        buf.clear();
    }
    Ok(out)
}

fn finish_way(way: RawWay, out: &mut ParsedOsm) {
    if way.tags.contains_key("highway") {
        out.stats.highway_ways += 1;
        out.ways.push(way);
    }
}

fn raw_attr<'a>(
    e: &'a BytesStart<'_>,
    key: &str,
    offset: u64,
) -> Result<std::borrow::Cow<'a, str>, OsmError> {
    for a in e.attributes() {
        let a = a.map_err(|err| OsmError::Xml {
            offset,
            message: err.to_string(),
        })?;
        if a.key.as_ref() == key {
            return Ok(a.value);
        }
    }
    Err(OsmError::Xml {
        offset,
        message: format!("<{}> missing attribute {:?}", e.name().as_ref(), key),
    })
}

fn parse_attr<T: std::str::FromStr>(
    e: &BytesStart<'_>,
    key: &str,
    offset: u64,
) -> Result<T, OsmError> {
    let raw = raw_attr(e, key, offset)?;
    raw.trim().parse().ok().ok_or_else(|| OsmError::Xml {
        offset,
        message: format!("attribute {:?} has unparseable value {:?}", key, raw),
    })
}

fn int_attr(e: &BytesStart<'_>, key: &str, offset: u64) -> Result<i64, OsmError> {
    parse_attr(e, key, offset)
}

fn str_attr(e: &BytesStart<'_>, key: &str, offset: u64) -> Result<String, OsmError> {
    for a in e.attributes() {
        let a = a.map_err(|err| OsmError::Xml {
            offset,
            message: err.to_string(),
        })?;
        if a.key.as_ref() == key {
            return a
                .normalized_value(quick_xml::XmlVersion::Implicit1_0)
                .map(|v| v.into_owned())
                .map_err(|err| OsmError::Xml {
                    offset,
                    message: err.to_string(),
                });
        }
    }
    Err(OsmError::Xml {
        offset,
        message: format!("<tag> missing attribute {:?}", key),
    })
}

fn node_attrs(e: &BytesStart<'_>, offset: u64) -> Result<(i64, f64, f64), OsmError> {
    Ok((
        int_attr(e, "id", offset)?,
        parse_attr(e, "lat", offset)?,
        parse_attr(e, "lon", offset)?,
    ))
}
