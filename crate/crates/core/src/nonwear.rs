//! Non-wear detection over minute-epoch counts, and valid-day
//! classification.
//!
//! A non-wear interval is a maximal zero-count run that may absorb a small
//! number of brief low-count interruptions: scanning left to right, a span
//! grows over zero minutes; a minute with a count strictly between zero and
//! the interrupt ceiling is tolerated up to `max_interrupts` times per span;
//! a minute at or above the ceiling — or one tolerated-range minute too
//! many — terminates the span at its last zero minute. Spans therefore
//! always start and end on zero-count minutes. Spans shorter than `min_len`
//! are discarded and scanning resumes at the next zero minute, so a kept
//! span is never extendable by the rule.

use chrono::{Datelike, NaiveDate, NaiveDateTime, Weekday};

use crate::clock::{self, MINUTES_PER_DAY};
use crate::error::{Error, Result};
use crate::ingest::EpochSeries;

/// Detection thresholds. Defaults: 60-minute minimum span, at most two
/// interrupt minutes, counts of 100 or more always terminate a span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NonWearParams {
    pub min_len: usize,
    pub max_interrupts: usize,
    pub interrupt_ceiling: u32,
}

impl Default for NonWearParams {
    fn default() -> Self {
        NonWearParams {
            min_len: 60,
            max_interrupts: 2,
            interrupt_ceiling: 100,
        }
    }
}

/// A detected non-wear span, as a half-open epoch index range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NonWearInterval {
    pub start_index: usize,
    /// Exclusive.
    pub end_index: usize,
    /// Tolerated nonzero minutes inside the span.
    pub interrupted_minutes: usize,
}

impl NonWearInterval {
    pub fn len(&self) -> usize {
        self.end_index - self.start_index
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn start_instant(&self, series: &EpochSeries) -> NaiveDateTime {
        series.instant_at(self.start_index)
    }

    pub fn end_instant(&self, series: &EpochSeries) -> NaiveDateTime {
        series.instant_at(self.end_index)
    }
}

/// Detect all non-wear intervals in a series. Output is ordered, disjoint,
/// and maximal under the rule.
pub fn detect_nonwear(series: &EpochSeries, params: &NonWearParams) -> Vec<NonWearInterval> {
    let c = &series.counts;
    let n = c.len();
    let min_len = params.min_len.max(1);
    let mut out = Vec::new();
    let mut pos = 0usize;
    while pos < n {
        if c[pos] != 0 {
            pos += 1;
            continue;
        }
        // Longest extension from this zero minute.
        let mut last_zero = pos;
        let mut interrupts: Vec<usize> = Vec::new();
        let mut j = pos + 1;
        while j < n {
            let v = c[j];
            if v == 0 {
                last_zero = j;
            } else if v < params.interrupt_ceiling && interrupts.len() < params.max_interrupts {
                interrupts.push(j);
            } else {
                break;
            }
            j += 1;
        }
        let end = last_zero + 1;
        if end - pos >= min_len {
            // Tolerated minutes past the last zero are trimmed off the span
            // and do not count as interruptions.
            let interrupted_minutes = interrupts.iter().filter(|&&k| k < end).count();
            out.push(NonWearInterval {
                start_index: pos,
                end_index: end,
                interrupted_minutes,
            });
            pos = end;
        } else {
            pos += 1;
        }
    }
    out
}

/// Total non-wear minutes across a set of intervals.
pub fn total_nonwear_minutes(intervals: &[NonWearInterval]) -> usize {
    intervals.iter().map(|iv| iv.len()).sum()
}

// ---------------------------------------------------------------------------
// Day classification
// ---------------------------------------------------------------------------

/// The protocol window inside which days (and bedtime candidates) count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssessmentWindow {
    pub start: NaiveDateTime,
    /// Exclusive.
    pub end: NaiveDateTime,
}

impl AssessmentWindow {
    pub fn new(start: NaiveDateTime, end: NaiveDateTime) -> Result<AssessmentWindow> {
        if end <= start {
            return Err(Error::Config(format!(
                "assessment window end {} not after start {}",
                clock::format_instant(end),
                clock::format_instant(start)
            )));
        }
        Ok(AssessmentWindow { start, end })
    }

    /// Window of `days` whole days anchored at the first recorded date.
    pub fn from_series_start(series: &EpochSeries, days: u32) -> Result<AssessmentWindow> {
        let start = series.start_instant.date().and_hms_opt(0, 0, 0).unwrap();
        AssessmentWindow::new(start, start + chrono::Duration::days(i64::from(days)))
    }

    pub fn contains(&self, t: NaiveDateTime) -> bool {
        self.start <= t && t < self.end
    }
}

/// One calendar day touched by a recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DayRecord {
    pub date: NaiveDate,
    pub weekday: Weekday,
    /// Minutes of this date covered by the recording (1440 = full day).
    pub coverage_minutes: u32,
    /// Minutes of this date inside any non-wear interval.
    pub nonwear_minutes: u32,
    pub valid: bool,
}

fn overlap_minutes(a0: NaiveDateTime, a1: NaiveDateTime, b0: NaiveDateTime, b1: NaiveDateTime) -> i64 {
    let lo = a0.max(b0);
    let hi = a1.min(b1);
    (hi - lo).num_minutes().max(0)
}

/// Classify every calendar day intersecting the recording. A day is valid
/// when fully covered, carrying fewer than `max_nonwear_minutes` non-wear
/// minutes, and lying entirely inside the assessment window. The window
/// must overlap the recording at all; a disjoint window is a configuration
/// error.
pub fn classify_days(
    series: &EpochSeries,
    intervals: &[NonWearInterval],
    window: &AssessmentWindow,
    max_nonwear_minutes: u32,
) -> Result<Vec<DayRecord>> {
    if series.is_empty() {
        return Ok(Vec::new());
    }
    let s0 = series.start_instant;
    let s1 = series.end_instant();
    if window.end <= s0 || window.start >= s1 {
        return Err(Error::Config(format!(
            "assessment window {}..{} does not cover recording {}..{}",
            clock::format_instant(window.start),
            clock::format_instant(window.end),
            clock::format_instant(s0),
            clock::format_instant(s1)
        )));
    }

    let spans: Vec<(NaiveDateTime, NaiveDateTime)> = intervals
        .iter()
        .map(|iv| (iv.start_instant(series), iv.end_instant(series)))
        .collect();

    let first_date = s0.date();
    let last_date = (s1 - chrono::Duration::minutes(1)).date();
    let mut out = Vec::new();
    let mut date = first_date;
    loop {
        let day_start = date.and_hms_opt(0, 0, 0).unwrap();
        let day_end = day_start + chrono::Duration::minutes(MINUTES_PER_DAY);
        let coverage = overlap_minutes(s0, s1, day_start, day_end) as u32;
        let nonwear: i64 = spans
            .iter()
            .map(|&(a, b)| overlap_minutes(a, b, day_start, day_end))
            .sum();
        let nonwear = nonwear as u32;
        let in_window = day_start >= window.start && day_end <= window.end;
        out.push(DayRecord {
            date,
            weekday: date.weekday(),
            coverage_minutes: coverage,
            nonwear_minutes: nonwear,
            valid: coverage == MINUTES_PER_DAY as u32
                && nonwear < max_nonwear_minutes
                && in_window,
        });
        if date == last_date {
            break;
        }
        date = date.succ_opt().expect("date overflow");
    }
    Ok(out)
}
