//! Scanpath CSV layout:
//!
//! ```text
//! subject_id,stimulus_id,category,label,idx,x,y,duration_ms
//! ```
//!
//! One fixation per row, `idx` starting at 0 within each (subject,
//! stimulus) group, UTF-8, LF line endings. Coordinates are interpreted
//! against the declared screen bounds in [`ParseConfig`]; the shipped
//! synthetic cohort uses unit bounds (already-normalized coordinates).
//!
//! The layout carries no onsets; they are reconstructed on parse as
//! cumulative durations with a fixed inter-fixation saccade gap.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::types::{Fixation, ScanPath, StimulusCategory};

pub const CSV_HEADER: &str = "subject_id,stimulus_id,category,label,idx,x,y,duration_ms";

#[derive(Debug, Clone, Copy)]
pub struct ParseConfig {
    pub screen_w: f64,
    pub screen_h: f64,
    /// Assumed inter-fixation interval when reconstructing onsets.
    pub saccade_gap_ms: f64,
}

impl Default for ParseConfig {
    fn default() -> Self {
        ParseConfig {
            screen_w: 1.0,
            screen_h: 1.0,
            saccade_gap_ms: 30.0,
        }
    }
}

#[derive(Debug)]
pub struct ParseOutcome {
    pub paths: Vec<ScanPath>,
    /// Rows dropped for out-of-bounds coordinates.
    pub dropped_rows: usize,
}

pub fn parse_scanpaths(path: &Path, config: &ParseConfig) -> Result<ParseOutcome> {
    let text = fs::read_to_string(path)?;
    parse_scanpaths_str(&text, config)
}

pub fn parse_scanpaths_str(text: &str, config: &ParseConfig) -> Result<ParseOutcome> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        None => return Ok(ParseOutcome { paths: vec![], dropped_rows: 0 }),
        Some((_, header)) if header == CSV_HEADER => {}
        Some((_, header)) => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unexpected header: {header:?}"),
            })
        }
    }

    // Groups keyed by (subject, stimulus), in file order.
    let mut paths: Vec<ScanPath> = Vec::new();
    let mut dropped = 0usize;
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = lineno + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 8 fields, found {}", fields.len()),
            });
        }
        let perr = |msg: String| Error::Parse { line: lineno, msg };
        let subject_id = fields[0].to_string();
        let stimulus_id = fields[1].to_string();
        let category = StimulusCategory::from_name(fields[2])
            .map_err(|e| perr(e.to_string()))?;
        let label: u8 = fields[3]
            .parse()
            .map_err(|_| perr(format!("bad label {:?}", fields[3])))?;
        if label > 1 {
            return Err(perr(format!("label must be 0 or 1, got {label}")));
        }
        let _idx: usize = fields[4]
            .parse()
            .map_err(|_| perr(format!("bad idx {:?}", fields[4])))?;
        let x: f64 = fields[5]
            .parse()
            .map_err(|_| perr(format!("bad x {:?}", fields[5])))?;
        let y: f64 = fields[6]
            .parse()
            .map_err(|_| perr(format!("bad y {:?}", fields[6])))?;
        let duration_ms: f64 = fields[7]
            .parse()
            .map_err(|_| perr(format!("bad duration {:?}", fields[7])))?;
        if duration_ms <= 0.0 || !duration_ms.is_finite() {
            return Err(perr(format!("duration must be positive, got {duration_ms}")));
        }
        if !(0.0..=config.screen_w).contains(&x) || !(0.0..=config.screen_h).contains(&y) {
            dropped += 1;
            continue;
        }

        let group = match paths
            .iter_mut()
            .find(|p| p.subject_id == subject_id && p.stimulus_id == stimulus_id)
        {
            Some(g) => g,
            None => {
                paths.push(ScanPath {
                    subject_id,
                    stimulus_id,
                    category,
                    fixations: Vec::new(),
                    label,
                });
                paths.last_mut().unwrap()
            }
        };
        let onset_ms = group
            .fixations
            .last()
            .map(|f| f.onset_ms + f.duration_ms + config.saccade_gap_ms)
            .unwrap_or(0.0);
        group.fixations.push(Fixation {
            x,
            y,
            duration_ms,
            onset_ms,
        });
    }
    Ok(ParseOutcome {
        paths,
        dropped_rows: dropped,
    })
}

pub fn serialize_scanpaths(paths: &[ScanPath]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for p in paths {
        for (idx, f) in p.fixations.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                p.subject_id,
                p.stimulus_id,
                p.category.name(),
                p.label,
                idx,
                f.x,
                f.y,
                f.duration_ms
            ));
        }
    }
    out
}
