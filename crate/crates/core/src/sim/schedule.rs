use serde::{Deserialize, Serialize};

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    /// Zeroes the region.
    DeadRegion,
    /// Saturates the region.
    HotSpot,
    /// Dead for the first half of every period, normal for the rest.
    Flicker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Region {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }
}

/// Frames `start..=end` are affected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureEvent {
    pub start: u64,
    pub end: u64,
    pub kind: FailureKind,
    pub region: Region,
    /// Frames per on/off cycle; Flicker only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<u64>,
}

/// What a frame really shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Truth {
    Good,
    Dead,
    Hot,
}

impl Truth {
    pub const ALL: [Truth; 3] = [Truth::Good, Truth::Dead, Truth::Hot];

    pub fn as_str(self) -> &'static str {
        match self {
            Truth::Good => "Good",
            Truth::Dead => "Dead",
            Truth::Hot => "Hot",
        }
    }

    pub fn parse(s: &str) -> Option<Truth> {
        Truth::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

/// A region effect applied to one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Effect {
    pub truth: Truth,
    pub region: Region,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureSchedule {
    #[serde(default, rename = "event")]
    pub events: Vec<FailureEvent>,
}

impl FailureSchedule {
    pub fn new(events: Vec<FailureEvent>) -> Result<Self, SimError> {
        let s = FailureSchedule { events };
        s.validate()?;
        Ok(s)
    }

    /// Parses a schedule file: a list of `[[event]]` tables.
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let s: FailureSchedule = toml::from_str(text).map_err(|e| SimError::InvalidSchedule(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|source| SimError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (i, e) in self.events.iter().enumerate() {
            let bad = |why: &str| Err(SimError::InvalidSchedule(format!("event {i}: {why}")));
            if e.start > e.end {
                return bad("start is after end");
            }
            if e.region.width == 0 || e.region.height == 0 {
                return bad("empty region");
            }
            match (e.kind, e.period) {
                (FailureKind::Flicker, Some(p)) if p >= 2 => {}
                (FailureKind::Flicker, _) => return bad("flicker needs a period of at least 2 frames"),
                (_, Some(_)) => return bad("only flicker takes a period"),
                _ => {}
            }
        }
        Ok(())
    }

    /// Earliest frame any event touches.
    pub fn onset(&self) -> Option<u64> {
        self.events.iter().map(|e| e.start).min()
    }

    /// Effects on frame `index`, in schedule order.
    pub fn effects(&self, index: u64) -> Vec<Effect> {
        self.events
            .iter()
            .filter(|e| (e.start..=e.end).contains(&index))
            .filter_map(|e| {
                let truth = match e.kind {
                    FailureKind::DeadRegion => Truth::Dead,
                    FailureKind::HotSpot => Truth::Hot,
                    FailureKind::Flicker => {
                        let p = e.period.expect("validated");
                        if (index - e.start) % p < p / 2 {
                            Truth::Dead
                        } else {
                            return None;
                        }
                    }
                };
                Some(Effect { truth, region: e.region })
            })
            .collect()
    }

    /// The frame's true class: the last effect applied, or Good.
    pub fn truth(&self, index: u64) -> Truth {
        self.effects(index).last().map_or(Truth::Good, |e| e.truth)
    }
}
