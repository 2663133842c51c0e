//! Scanpath ingestion, preprocessing, augmentation and cohort synthesis.

mod io;
mod preprocess;
mod synth;
mod types;

pub use io::{parse_scanpaths, serialize_scanpaths, ParseConfig, ParseOutcome};
pub use preprocess::{
    cluster_fixations, filter_noise, jitter_augment, normalize, synth_heatmap, FilterConfig,
    FilterOutcome,
};
pub use synth::{
    generate_cohort, social_dwell_fraction, Cohort, CohortConfig, SubjectModalities,
};
pub use types::{Fixation, RawGazeSample, SaliencyMap, ScanPath, StimulusCategory};
