//! Sparse point annotations and the rules they must satisfy.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How many clicks per class an annotation mode allows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelMode {
    #[serde(rename = "1C1C")]
    OneClick,
    #[serde(rename = "1C10C")]
    TenClicks,
}

impl LabelMode {
    pub fn max_per_class(self) -> usize {
        match self {
            LabelMode::OneClick => 1,
            LabelMode::TenClicks => 10,
        }
    }

    pub fn for_points_per_class(k: usize) -> Option<Self> {
        match k {
            1 => Some(LabelMode::OneClick),
            2..=10 => Some(LabelMode::TenClicks),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LabelMode::OneClick => "1C1C",
            LabelMode::TenClicks => "1C10C",
        }
    }
}

/// One click: pixel column `x`, row `y`, 0-based class id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PointLabel {
    pub x: u16,
    pub y: u16,
    #[serde(rename = "class_id")]
    pub class: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelViolation {
    TooManyPoints { class: u8, count: usize, limit: usize },
    DuplicatePixel { x: u16, y: u16 },
    OutOfBounds { x: u16, y: u16 },
    UnknownClass { class: u8 },
}

impl fmt::Display for LabelViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelViolation::TooManyPoints {
                class,
                count,
                limit,
            } => write!(f, "class {class} has {count} points (limit {limit})"),
            LabelViolation::DuplicatePixel { x, y } => {
                write!(f, "pixel ({x}, {y}) is labeled more than once")
            }
            LabelViolation::OutOfBounds { x, y } => write!(f, "pixel ({x}, {y}) is out of bounds"),
            LabelViolation::UnknownClass { class } => write!(f, "class {class} is not in the palette"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointLabelSet {
    pub mode: LabelMode,
    pub points: Vec<PointLabel>,
}

impl PointLabelSet {
    pub fn new(mode: LabelMode, points: Vec<PointLabel>) -> Self {
        Self { mode, points }
    }

    pub fn empty(mode: LabelMode) -> Self {
        Self::new(mode, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Every rule the set breaks for a `width` x `height` frame with
    /// `num_classes` classes (ids `0..num_classes`).
    pub fn violations(&self, width: u16, height: u16, num_classes: usize) -> Vec<LabelViolation> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        let mut per_class: BTreeMap<u8, usize> = BTreeMap::new();
        for p in &self.points {
            if p.x >= width || p.y >= height {
                out.push(LabelViolation::OutOfBounds { x: p.x, y: p.y });
            }
            if usize::from(p.class) >= num_classes {
                out.push(LabelViolation::UnknownClass { class: p.class });
            }
            if !seen.insert((p.x, p.y)) {
                out.push(LabelViolation::DuplicatePixel { x: p.x, y: p.y });
            }
            *per_class.entry(p.class).or_default() += 1;
        }
        let limit = self.mode.max_per_class();
        for (class, count) in per_class {
            if count > limit {
                out.push(LabelViolation::TooManyPoints {
                    class,
                    count,
                    limit,
                });
            }
        }
        out
    }

    pub fn validate(&self, width: u16, height: u16, num_classes: usize) -> Result<()> {
        let violations = self.violations(width, height, num_classes);
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidLabels(violations))
        }
    }
}
