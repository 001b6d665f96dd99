use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::OsmError;

/// `highway=*` values rendered as main roads.
pub const MAIN_ROADS: [&str; 4] = ["motorway", "motorway_link", "trunk", "trunk_link"];
/// `highway=*` values rendered as middle roads.
pub const MIDDLE_ROADS: [&str; 6] = [
    "primary",
    "primary_link",
    "secondary",
    "secondary_link",
    "tertiary",
    "tertiary_link",
];
/// Default paved remainder rendered as small roads.
pub const DEFAULT_SMALL_ROADS: [&str; 5] = [
    "unclassified",
    "residential",
    "service",
    "living_street",
    "road",
];
/// Values that are never rendered with the default small-road set. Informational:
/// anything outside the three tier sets is rejected.
pub const REJECTED_ROADS: [&str; 8] = [
    "track",
    "path",
    "footway",
    "cycleway",
    "bridleway",
    "steps",
    "pedestrian",
    "construction",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoadTier {
    Main,
    Middle,
    Small,
}

impl RoadTier {
    pub fn code(self) -> u8 {
        match self {
            RoadTier::Main => 0,
            RoadTier::Middle => 1,
            RoadTier::Small => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(RoadTier::Main),
            1 => Some(RoadTier::Middle),
            2 => Some(RoadTier::Small),
            _ => None,
        }
    }
}

impl fmt::Display for RoadTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoadTier::Main => "main",
            RoadTier::Middle => "middle",
            RoadTier::Small => "small",
        })
    }
}

/// Stroke width in pixels for each tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrokeTable {
    pub main: u32,
    pub middle: u32,
    pub small: u32,
}

impl Default for StrokeTable {
    fn default() -> Self {
        Self {
            main: 15,
            middle: 10,
            small: 5,
        }
    }
}

impl StrokeTable {
    pub fn width(&self, tier: RoadTier) -> u32 {
        match tier {
            RoadTier::Main => self.main,
            RoadTier::Middle => self.middle,
            RoadTier::Small => self.small,
        }
    }

    pub fn max(&self) -> u32 {
        self.main.max(self.middle).max(self.small)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoadClass {
    pub tier: RoadTier,
    pub stroke_px: u32,
}

impl RoadClass {
    /// Class with the default stroke table.
    pub fn new(tier: RoadTier) -> Self {
        Self {
            tier,
            stroke_px: StrokeTable::default().width(tier),
        }
    }
}

/// Maps `highway=*` tags onto road classes. Only the `highway` key is consulted.
#[derive(Debug, Clone)]
pub struct Classifier {
    small: BTreeSet<String>,
    strokes: StrokeTable,
}

impl Default for Classifier {
    fn default() -> Self {
        Self {
            small: DEFAULT_SMALL_ROADS.iter().map(|s| s.to_string()).collect(),
            strokes: StrokeTable::default(),
        }
    }
}

impl Classifier {
    pub fn new<I, S>(small_roads: I, strokes: StrokeTable) -> Result<Self, OsmError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let small: BTreeSet<String> = small_roads.into_iter().map(Into::into).collect();
        if let Some(clash) = small
            .iter()
            .find(|v| MAIN_ROADS.contains(&v.as_str()) || MIDDLE_ROADS.contains(&v.as_str()))
        {
            return Err(OsmError::Config(format!(
                "small-road value {clash:?} already belongs to the main or middle tier"
            )));
        }
        if strokes.main == 0 || strokes.middle == 0 || strokes.small == 0 {
            return Err(OsmError::Config(format!(
                "stroke widths must be positive: {strokes:?}"
            )));
        }
        Ok(Self { small, strokes })
    }

    pub fn strokes(&self) -> StrokeTable {
        self.strokes
    }

    pub fn small_roads(&self) -> impl Iterator<Item = &str> {
        self.small.iter().map(String::as_str)
    }

    pub fn tier_of(&self, highway: &str) -> Option<RoadTier> {
        if MAIN_ROADS.contains(&highway) {
            Some(RoadTier::Main)
        } else if MIDDLE_ROADS.contains(&highway) {
            Some(RoadTier::Middle)
        } else if self.small.contains(highway) {
            Some(RoadTier::Small)
        } else {
            None
        }
    }

    /// `None` means the way is not a paved road and is not rendered.
    pub fn classify(&self, tags: &BTreeMap<String, String>) -> Option<RoadClass> {
        let tier = self.tier_of(tags.get("highway")?)?;
        Some(RoadClass {
            tier,
            stroke_px: self.strokes.width(tier),
        })
    }
}
