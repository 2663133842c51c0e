//! Hand-engineered spatial and temporal gaze descriptors: region-transition
//! probabilities, dwell times, entropies, recurrence rate and saccade
//! statistics, assembled into fixed-layout per-scanpath feature vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaze::ScanPath;

/// Uniform tiling of the unit square into `rows × cols` regions. The
/// boundary x = 1 or y = 1 maps into the last tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionGrid {
    pub rows: usize,
    pub cols: usize,
}

impl Default for RegionGrid {
    fn default() -> Self {
        RegionGrid { rows: 4, cols: 4 }
    }
}

impl RegionGrid {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Config("region grid dims must be >= 1".into()));
        }
        Ok(RegionGrid { rows, cols })
    }

    pub fn region_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn region_of(&self, x: f64, y: f64) -> usize {
        let c = ((x * self.cols as f64) as usize).min(self.cols - 1);
        let r = ((y * self.rows as f64) as usize).min(self.rows - 1);
        r * self.cols + c
    }
}

/// Fill rule for transition-matrix rows whose region was never a source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnvisitedRowPolicy {
    /// Fill with 1/R, keeping the matrix row-stochastic (default).
    Uniform,
    /// Leave the row at zero and flag it.
    ZeroWithFlag,
}

/// Row-stochastic matrix of region-to-region gaze transitions, with the
/// underlying counts. Self-transitions are counted.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub regions: usize,
    /// Row-major counts.
    pub counts: Vec<u64>,
    /// Row-major probabilities.
    pub probs: Vec<f64>,
    /// Rows that were never a transition source.
    pub unvisited: Vec<bool>,
}

pub fn transition_matrix(
    path: &ScanPath,
    grid: &RegionGrid,
    policy: UnvisitedRowPolicy,
) -> Result<TransitionMatrix> {
    if path.fixations.len() < 2 {
        return Err(Error::InsufficientData(
            "transition matrix needs at least 2 fixations".into(),
        ));
    }
    let r = grid.region_count();
    let mut counts = vec![0u64; r * r];
    let regions: Vec<usize> = path
        .fixations
        .iter()
        .map(|f| grid.region_of(f.x, f.y))
        .collect();
    for pair in regions.windows(2) {
        counts[pair[0] * r + pair[1]] += 1;
    }
    let mut probs = vec![0.0f64; r * r];
    let mut unvisited = vec![false; r];
    for i in 0..r {
        let row_sum: u64 = counts[i * r..(i + 1) * r].iter().sum();
        if row_sum == 0 {
            unvisited[i] = true;
            if policy == UnvisitedRowPolicy::Uniform {
                let fill = 1.0 / r as f64;
                probs[i * r..(i + 1) * r].iter_mut().for_each(|v| *v = fill);
            }
        } else {
            for j in 0..r {
                probs[i * r + j] = counts[i * r + j] as f64 / row_sum as f64;
            }
        }
    }
    Ok(TransitionMatrix {
        regions: r,
        counts,
        probs,
        unvisited,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialStats {
    pub mean_fix_duration_ms: f64,
    pub std_fix_duration_ms: f64,
    pub mean_saccade_amplitude: f64,
    pub max_saccade_amplitude: f64,
    /// RMS distance of fixations from their centroid.
    pub dispersion: f64,
}

pub fn spatial_stats(path: &ScanPath) -> Result<SpatialStats> {
    let fx = &path.fixations;
    if fx.len() < 2 {
        return Err(Error::InsufficientData(
            "spatial stats need at least 2 fixations".into(),
        ));
    }
    let n = fx.len() as f64;
    let mean_dur = fx.iter().map(|f| f.duration_ms).sum::<f64>() / n;
    let var_dur = fx
        .iter()
        .map(|f| (f.duration_ms - mean_dur).powi(2))
        .sum::<f64>()
        / n;
    let amps: Vec<f64> = fx
        .windows(2)
        .map(|w| ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt())
        .collect();
    let (cx, cy) = (
        fx.iter().map(|f| f.x).sum::<f64>() / n,
        fx.iter().map(|f| f.y).sum::<f64>() / n,
    );
    let dispersion = (fx
        .iter()
        .map(|f| (f.x - cx).powi(2) + (f.y - cy).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(SpatialStats {
        mean_fix_duration_ms: mean_dur,
        std_fix_duration_ms: var_dur.sqrt(),
        mean_saccade_amplitude: amps.iter().sum::<f64>() / amps.len() as f64,
        max_saccade_amplitude: amps.iter().copied().fold(0.0, f64::max),
        dispersion,
    })
}

/// Fraction of total fixation duration spent in each region; sums to 1.
pub fn dwell_times(path: &ScanPath, grid: &RegionGrid) -> Result<Vec<f64>> {
    let total = path.total_duration_ms();
    if total <= 0.0 {
        return Err(Error::InsufficientData(
            "dwell times need positive total duration".into(),
        ));
    }
    let mut out = vec![0.0; grid.region_count()];
    for f in &path.fixations {
        out[grid.region_of(f.x, f.y)] += f.duration_ms / total;
    }
    Ok(out)
}

/// Shannon entropy in bits, with 0·log 0 = 0. The input must be a
/// distribution up to 1e-6; it is renormalized before the sum.
pub fn entropy(dist: &[f64]) -> Result<f64> {
    if dist.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::InvalidDistribution(
            "entropy input has negative or non-finite entries".into(),
        ));
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidDistribution(format!(
            "entropy input sums to {sum}, expected 1 within 1e-6"
        )));
    }
    Ok(dist
        .iter()
        .map(|&p| p / sum)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.log2())
        .sum())
}

/// Entropy of the fixation-count distribution over regions.
pub fn fixation_entropy(path: &ScanPath, grid: &RegionGrid) -> Result<f64> {
    if path.fixations.is_empty() {
        return Err(Error::InsufficientData("no fixations".into()));
    }
    let mut counts = vec![0.0f64; grid.region_count()];
    for f in &path.fixations {
        counts[grid.region_of(f.x, f.y)] += 1.0;
    }
    let n = path.fixations.len() as f64;
    counts.iter_mut().for_each(|c| *c /= n);
    entropy(&counts)
}

/// Recurrence rate: fraction of fixation pairs closer than `epsilon`.
pub fn rqa_recurrence(path: &ScanPath, epsilon: f64) -> Result<f64> {
    let fx = &path.fixations;
    if fx.len() < 2 {
        return Err(Error::InsufficientData(
            "recurrence rate needs at least 2 fixations".into(),
        ));
    }
    if epsilon <= 0.0 {
        return Err(Error::Config("rqa epsilon must be positive".into()));
    }
    let n = fx.len();
    let mut close = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            let d = ((fx[i].x - fx[j].x).powi(2) + (fx[i].y - fx[j].y).powi(2)).sqrt();
            if d < epsilon {
                close += 1;
            }
        }
    }
    Ok(close as f64 / (n * (n - 1) / 2) as f64)
}

/// Mean and max saccade speed in normalized units per second. Each saccade
/// covers the interval between the end of one fixation and the onset of
/// the next; nonpositive intervals are skipped.
pub fn saccadic_speed(path: &ScanPath) -> Result<(f64, f64)> {
    let fx = &path.fixations;
    if fx.len() < 2 {
        return Err(Error::InsufficientData(
            "saccadic speed needs at least 2 fixations".into(),
        ));
    }
    let mut speeds = Vec::new();
    for w in fx.windows(2) {
        let gap_ms = w[1].onset_ms - (w[0].onset_ms + w[0].duration_ms);
        if gap_ms <= 0.0 {
            continue;
        }
        let amp = ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt();
        speeds.push(amp / (gap_ms / 1000.0));
    }
    if speeds.is_empty() {
        return Err(Error::InsufficientData(
            "no valid saccade interval (all gaps nonpositive)".into(),
        ));
    }
    let mean = speeds.iter().sum::<f64>() / speeds.len() as f64;
    let max = speeds.iter().copied().fold(0.0, f64::max);
    Ok((mean, max))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub grid: RegionGrid,
    pub rqa_epsilon: f64,
    pub policy: UnvisitedRowPolicy,
    /// Include the two temporally-aware extras (fixation entropy and mean
    /// saccadic speed). The feature-ablation arm turns these off.
    pub include_temporal: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            grid: RegionGrid::default(),
            rqa_epsilon: 0.05,
            policy: UnvisitedRowPolicy::Uniform,
            include_temporal: true,
        }
    }
}

impl FeatureConfig {
    /// Base layout is 7 scalars + R dwell fractions + R² transition
    /// probabilities; the temporal extras add 2 more scalars.
    pub fn feature_len(&self) -> usize {
        let r = self.grid.region_count();
        7 + r + r * r + if self.include_temporal { 2 } else { 0 }
    }

    pub fn feature_names(&self) -> Vec<String> {
        let r = self.grid.region_count();
        let mut names = vec![
            "mean_fix_duration_ms".to_string(),
            "std_fix_duration_ms".to_string(),
            "mean_saccade_amplitude".to_string(),
            "max_saccade_amplitude".to_string(),
            "dispersion".to_string(),
            "gaze_entropy".to_string(),
            "rqa_recurrence_rate".to_string(),
        ];
        for i in 0..r {
            names.push(format!("dwell_{i}"));
        }
        for i in 0..r {
            for j in 0..r {
                names.push(format!("trans_{i}_{j}"));
            }
        }
        if self.include_temporal {
            names.push("fixation_entropy".to_string());
            names.push("mean_saccadic_speed".to_string());
        }
        names
    }
}

/// Deterministic concatenation of every descriptor in the documented
/// order. Propagates component errors.
pub fn assemble_features(path: &ScanPath, config: &FeatureConfig) -> Result<Vec<f64>> {
    let stats = spatial_stats(path)?;
    let dwell = dwell_times(path, &config.grid)?;
    let gaze_entropy = entropy(&dwell)?;
    let rr = rqa_recurrence(path, config.rqa_epsilon)?;
    let tm = transition_matrix(path, &config.grid, config.policy)?;

    let mut out = Vec::with_capacity(config.feature_len());
    out.extend([
        stats.mean_fix_duration_ms,
        stats.std_fix_duration_ms,
        stats.mean_saccade_amplitude,
        stats.max_saccade_amplitude,
        stats.dispersion,
        gaze_entropy,
        rr,
    ]);
    out.extend(dwell);
    out.extend(tm.probs);
    if config.include_temporal {
        out.push(fixation_entropy(path, &config.grid)?);
        out.push(saccadic_speed(path)?.0);
    }
    debug_assert_eq!(out.len(), config.feature_len());
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("assemble_features"));
    }
    Ok(out)
}
