//! Preprocessing: noise filtering, I-DT fixation detection, normalization,
//! jitter augmentation and synthetic heatmaps.
//!
//! Pipeline order for raw recordings is filter → cluster → normalize.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::types::{Fixation, RawGazeSample, SaliencyMap, ScanPath};

#[derive(Debug, Clone, Copy)]
pub struct FilterConfig {
    /// Invalid runs spanning less than this are interpolated linearly;
    /// longer runs are removed and recorded as segment boundaries.
    pub blink_gap_ms: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { blink_gap_ms: 75.0 }
    }
}

pub struct FilterOutcome {
    pub samples: Vec<RawGazeSample>,
    /// Onset times of gaps too long to interpolate.
    pub segment_boundaries: Vec<f64>,
}

pub fn filter_noise(samples: &[RawGazeSample], config: &FilterConfig) -> FilterOutcome {
    let mut out: Vec<RawGazeSample> = Vec::with_capacity(samples.len());
    let mut boundaries = Vec::new();
    let mut i = 0;
    while i < samples.len() {
        if samples[i].validity {
            out.push(samples[i]);
            i += 1;
            continue;
        }
        let run_start = i;
        while i < samples.len() && !samples[i].validity {
            i += 1;
        }
        let before = if run_start > 0 {
            Some(samples[run_start - 1])
        } else {
            None
        };
        let after = samples.get(i).copied();
        match (before, after) {
            (Some(b), Some(a)) if a.t - b.t < config.blink_gap_ms => {
                // Short blink: fill the invalid samples on the line b → a.
                for s in &samples[run_start..i] {
                    let w = (s.t - b.t) / (a.t - b.t);
                    out.push(RawGazeSample {
                        t: s.t,
                        x: b.x + w * (a.x - b.x),
                        y: b.y + w * (a.y - b.y),
                        validity: true,
                    });
                }
            }
            _ => boundaries.push(samples[run_start].t),
        }
    }
    FilterOutcome {
        samples: out,
        segment_boundaries: boundaries,
    }
}

/// I-DT fixation detection: a maximal window whose bounding-box dispersion
/// `(max x − min x) + (max y − min y)` stays at or below the threshold and
/// whose time span reaches `min_duration_ms` becomes one fixation at the
/// window centroid. Units of the threshold follow the sample units.
pub fn cluster_fixations(
    samples: &[RawGazeSample],
    dispersion_threshold: f64,
    min_duration_ms: f64,
) -> Vec<Fixation> {
    let n = samples.len();
    let mut fixations = Vec::new();
    let mut start = 0;
    while start < n {
        // Smallest window covering the minimum duration.
        let mut end = start + 1;
        while end < n && samples[end - 1].t - samples[start].t < min_duration_ms {
            end += 1;
        }
        if samples[end - 1].t - samples[start].t < min_duration_ms {
            break;
        }
        if dispersion(&samples[start..end]) <= dispersion_threshold {
            while end < n && dispersion(&samples[start..end + 1]) <= dispersion_threshold {
                end += 1;
            }
            let window = &samples[start..end];
            let nf = window.len() as f64;
            fixations.push(Fixation {
                x: window.iter().map(|s| s.x).sum::<f64>() / nf,
                y: window.iter().map(|s| s.y).sum::<f64>() / nf,
                duration_ms: window[window.len() - 1].t - window[0].t,
                onset_ms: window[0].t,
            });
            start = end;
        } else {
            start += 1;
        }
    }
    fixations
}

fn dispersion(window: &[RawGazeSample]) -> f64 {
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in window {
        min_x = min_x.min(s.x);
        max_x = max_x.max(s.x);
        min_y = min_y.min(s.y);
        max_y = max_y.max(s.y);
    }
    (max_x - min_x) + (max_y - min_y)
}

/// Divide coordinates by the screen dimensions and clamp into the unit
/// square. Idempotent once coordinates are normalized.
pub fn normalize(path: &ScanPath, screen_w: f64, screen_h: f64) -> Result<ScanPath> {
    if screen_w <= 0.0 || screen_h <= 0.0 {
        return Err(Error::Config(format!(
            "screen dimensions must be positive, got {screen_w}x{screen_h}"
        )));
    }
    let mut out = path.clone();
    for f in &mut out.fixations {
        f.x = (f.x / screen_w).clamp(0.0, 1.0);
        f.y = (f.y / screen_h).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Add isotropic Gaussian noise to every fixation coordinate, re-clamping
/// to the unit square. Durations, onsets and labels are untouched.
pub fn jitter_augment<R: Rng + ?Sized>(path: &ScanPath, sigma: f64, rng: &mut R) -> ScanPath {
    let mut out = path.clone();
    if sigma == 0.0 {
        return out;
    }
    for f in &mut out.fixations {
        f.x = (f.x + f64::sample_standard_normal(rng) * sigma).clamp(0.0, 1.0);
        f.y = (f.y + f64::sample_standard_normal(rng) * sigma).clamp(0.0, 1.0);
    }
    out
}

/// Duration-weighted Gaussian kernel density over the fixations, evaluated
/// at cell centers and normalized to sum 1.
pub fn synth_heatmap(
    path: &ScanPath,
    grid_h: usize,
    grid_w: usize,
    bandwidth: f64,
) -> Result<SaliencyMap> {
    if grid_h == 0 || grid_w == 0 {
        return Err(Error::Config("heatmap grid dims must be >= 1".into()));
    }
    if bandwidth <= 0.0 {
        return Err(Error::Config("heatmap bandwidth must be positive".into()));
    }
    if path.fixations.is_empty() {
        return Err(Error::InsufficientData(
            "cannot build a heatmap from an empty scanpath".into(),
        ));
    }
    let inv_two_bw2 = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut grid = vec![0.0f64; grid_h * grid_w];
    for (r, cell) in grid.iter_mut().enumerate() {
        let cy = ((r / grid_w) as f64 + 0.5) / grid_h as f64;
        let cx = ((r % grid_w) as f64 + 0.5) / grid_w as f64;
        let mut v = 0.0;
        for f in &path.fixations {
            let d2 = (f.x - cx).powi(2) + (f.y - cy).powi(2);
            v += f.duration_ms * (-d2 * inv_two_bw2).exp();
        }
        *cell = v;
    }
    let sum: f64 = grid.iter().sum();
    if sum <= 0.0 || !sum.is_finite() {
        return Err(Error::NonFinite("synth_heatmap"));
    }
    for v in &mut grid {
        *v /= sum;
    }
    Ok(SaliencyMap {
        rows: grid_h,
        cols: grid_w,
        grid,
    })
}
