use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One raw eye-tracker sample in screen pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawGazeSample {
    /// Milliseconds since stimulus onset.
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub validity: bool,
}

/// A fixation after detection and normalization: centroid in the unit
/// square, duration and onset in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fixation {
    pub x: f64,
    pub y: f64,
    pub duration_ms: f64,
    pub onset_ms: f64,
}

/// The seven stimulus content categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StimulusCategory {
    Animals,
    BuildingsObjects,
    Nature,
    PeopleGroup,
    PeopleWithObjects,
    SinglePerson,
    SinglePersonMultiObject,
}

impl StimulusCategory {
    pub const ALL: [StimulusCategory; 7] = [
        StimulusCategory::Animals,
        StimulusCategory::BuildingsObjects,
        StimulusCategory::Nature,
        StimulusCategory::PeopleGroup,
        StimulusCategory::PeopleWithObjects,
        StimulusCategory::SinglePerson,
        StimulusCategory::SinglePersonMultiObject,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StimulusCategory::Animals => "animals",
            StimulusCategory::BuildingsObjects => "buildings_objects",
            StimulusCategory::Nature => "nature",
            StimulusCategory::PeopleGroup => "people_group",
            StimulusCategory::PeopleWithObjects => "people_with_objects",
            StimulusCategory::SinglePerson => "single_person",
            StimulusCategory::SinglePersonMultiObject => "single_person_multi_object",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown stimulus category: {name}")))
    }
}

/// Ordered fixation sequence for one subject viewing one stimulus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPath {
    pub subject_id: String,
    pub stimulus_id: String,
    pub category: StimulusCategory,
    pub fixations: Vec<Fixation>,
    /// 0 = non-ASD, 1 = ASD.
    pub label: u8,
}

impl ScanPath {
    pub fn total_duration_ms(&self) -> f64 {
        self.fixations.iter().map(|f| f.duration_ms).sum()
    }
}

/// Normalized spatial attention density over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, nonnegative, sums to 1.
    pub grid: Vec<f64>,
}

impl SaliencyMap {
    pub fn validate(&self) -> Result<()> {
        if self.grid.len() != self.rows * self.cols {
            return Err(Error::Usage("saliency grid size mismatch".into()));
        }
        if self.grid.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidDistribution(
                "saliency map has negative or non-finite entries".into(),
            ));
        }
        let sum: f64 = self.grid.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!(
                "saliency map sums to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}
