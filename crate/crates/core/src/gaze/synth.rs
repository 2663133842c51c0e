//! Seeded synthetic cohort generator.
//!
//! Stands in for the access-controlled corpus: emits scanpaths whose two
//! classes differ, by construction, in fixation dispersion, dwell time on
//! a designated social region per stimulus, and saccade extent, plus
//! per-subject stand-in speech and visual feature vectors from
//! class-conditional Gaussians. `class_gap` scales every difference;
//! at 0 the classes are drawn from identical distributions.
//!
//! Every draw comes from a named substream of the provided key, and
//! per-subject streams are derived by index, so parallel generation
//! would produce the same cohort as sequential.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamKey;
use crate::scalar::Scalar;

use super::types::{Fixation, ScanPath, StimulusCategory};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortConfig {
    pub subjects_per_class: usize,
    pub stimuli_per_subject: usize,
    pub fixations_min: usize,
    pub fixations_max: usize,
    /// Class separation in [0, 1]. The mean social-dwell fractions of the
    /// two classes differ by exactly this much before clamping.
    pub class_gap: f64,
    pub speech_dim: usize,
    pub visual_dim: usize,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            subjects_per_class: 32,
            stimuli_per_subject: 3,
            fixations_min: 10,
            fixations_max: 18,
            class_gap: 0.5,
            speech_dim: 8,
            visual_dim: 12,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects_per_class == 0 {
            return Err(Error::Config("subjects_per_class must be >= 1".into()));
        }
        if self.stimuli_per_subject == 0 {
            return Err(Error::Config("stimuli_per_subject must be >= 1".into()));
        }
        if self.fixations_min < 2 || self.fixations_max < self.fixations_min {
            return Err(Error::Config(
                "fixation count range must satisfy 2 <= min <= max".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.class_gap) {
            return Err(Error::Config("class_gap must lie in [0, 1]".into()));
        }
        if self.speech_dim == 0 || self.visual_dim == 0 {
            return Err(Error::Config("modality dims must be >= 1".into()));
        }
        Ok(())
    }
}

/// Stand-in speech and visual feature vectors for one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectModalities {
    pub f_s: Vec<f64>,
    pub f_v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub scanpaths: Vec<ScanPath>,
    /// Keyed by subject id; BTreeMap for deterministic serialization.
    pub modalities: BTreeMap<String, SubjectModalities>,
    pub subjects: Vec<(String, u8)>,
}

struct Stimulus {
    id: String,
    category: StimulusCategory,
    social_center: (f64, f64),
    other_center: (f64, f64),
}

const SACCADE_GAP_MS: f64 = 30.0;

pub fn generate_cohort(config: &CohortConfig, key: &StreamKey) -> Result<Cohort> {
    config.validate()?;
    let gap = config.class_gap;

    let stim_key = key.child("stimuli");
    let stimuli: Vec<Stimulus> = (0..config.stimuli_per_subject)
        .map(|i| {
            let mut rng = stim_key.child_idx(i as u64).rng();
            Stimulus {
                id: format!("stim{i:03}"),
                category: StimulusCategory::ALL[i % 7],
                social_center: (rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75)),
                other_center: (rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)),
            }
        })
        .collect();

    let mut scanpaths = Vec::new();
    let mut modalities = BTreeMap::new();
    let mut subjects = Vec::new();
    let subj_key = key.child("subjects");
    let total = 2 * config.subjects_per_class;
    for s in 0..total {
        // Interleave labels so truncated prefixes stay near-balanced.
        let label = (s % 2) as u8;
        let subject_id = format!("subj{s:03}");
        let sk = subj_key.child_idx(s as u64);

        for (si, stim) in stimuli.iter().enumerate() {
            let mut rng = sk.child_idx(si as u64).rng();
            scanpaths.push(gen_scanpath(&subject_id, stim, label, gap, config, &mut rng));
        }

        let mut mrng = sk.child("modalities").rng();
        let shift = if label == 1 { 0.75 * gap } else { -0.75 * gap };
        let draw = |rng: &mut rand_chacha::ChaCha8Rng, dim: usize| -> Vec<f64> {
            (0..dim)
                .map(|_| shift + f64::sample_standard_normal(rng))
                .collect()
        };
        modalities.insert(
            subject_id.clone(),
            SubjectModalities {
                f_s: draw(&mut mrng, config.speech_dim),
                f_v: draw(&mut mrng, config.visual_dim),
            },
        );
        subjects.push((subject_id, label));
    }

    Ok(Cohort {
        scanpaths,
        modalities,
        subjects,
    })
}

fn gen_scanpath<R: Rng>(
    subject_id: &str,
    stim: &Stimulus,
    label: u8,
    gap: f64,
    config: &CohortConfig,
    rng: &mut R,
) -> ScanPath {
    // Class knobs. Label 0 dwells more on the social region, scatters
    // less, and makes shorter saccades.
    let p_social = (0.5 + if label == 0 { gap / 2.0 } else { -gap / 2.0 }).clamp(0.0, 1.0);
    let scatter = 0.06 + if label == 1 { 0.12 * gap } else { 0.0 };
    let n_fix = rng.gen_range(config.fixations_min..=config.fixations_max);

    let mut fixations = Vec::with_capacity(n_fix);
    let mut onset = 0.0;
    for _ in 0..n_fix {
        let (cx, cy, sigma) = if f64::sample_unit(rng) < p_social {
            (stim.social_center.0, stim.social_center.1, 0.03)
        } else {
            (stim.other_center.0, stim.other_center.1, scatter)
        };
        let x = (cx + f64::sample_standard_normal(rng) * sigma).clamp(0.0, 1.0);
        let y = (cy + f64::sample_standard_normal(rng) * sigma).clamp(0.0, 1.0);
        let duration_ms = 150.0 + 80.0 * f64::sample_standard_normal(rng).abs();
        fixations.push(Fixation {
            x,
            y,
            duration_ms,
            onset_ms: onset,
        });
        onset += duration_ms + SACCADE_GAP_MS;
    }
    ScanPath {
        subject_id: subject_id.to_string(),
        stimulus_id: stim.id.clone(),
        category: stim.category,
        fixations,
        label,
    }
}

/// Fraction of fixation duration spent within `radius` of the stimulus
/// social center. Exposed for generator tests.
pub fn social_dwell_fraction(path: &ScanPath, center: (f64, f64), radius: f64) -> f64 {
    let total: f64 = path.fixations.iter().map(|f| f.duration_ms).sum();
    let social: f64 = path
        .fixations
        .iter()
        .filter(|f| ((f.x - center.0).powi(2) + (f.y - center.1).powi(2)).sqrt() < radius)
        .map(|f| f.duration_ms)
        .sum();
    social / total
}
