//! Objective bedtime (OBT) extraction: long, wear-bounded non-wear
//! intervals interpreted as in-bed episodes, assigned to nights by the noon
//! rule and reduced to one record per subject-night.
//!
//! The midpoint feature lives on a signed linear axis anchored at the
//! midnight that ends the assigned night: a midpoint of 4:19AM is +259, a
//! midpoint of 11:30PM the evening before is -30. Averaging on this axis is
//! what makes bedtimes near midnight behave; the clock rendering is derived
//! (mod 1440) for display only.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Weekday};

use crate::clock::{self, MINUTES_PER_DAY};
use crate::error::{Error, Result};
use crate::ingest::EpochSeries;
use crate::nonwear::{
    classify_days, detect_nonwear, AssessmentWindow, DayRecord, NonWearInterval, NonWearParams,
};

/// Candidate length bounds in minutes. Defaults keep intervals between four
/// and fourteen hours.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObtParams {
    pub min_minutes: i64,
    pub max_minutes: i64,
}

impl Default for ObtParams {
    fn default() -> Self {
        ObtParams {
            min_minutes: 240,
            max_minutes: 840,
        }
    }
}

/// A non-wear interval that survived the candidate filters, plus its night
/// assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CandidateObt {
    pub start_index: usize,
    pub end_index: usize,
    pub start_instant: NaiveDateTime,
    pub end_instant: NaiveDateTime,
    pub duration_minutes: i64,
    pub assigned_date: NaiveDate,
    pub assigned_weekday: Weekday,
}

/// Why candidates were filtered out, tallied for the run log.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CandidateFilterCounts {
    pub intervals_in: usize,
    pub outside_length_bounds: usize,
    pub at_recording_edge: usize,
    pub adjacent_nonwear: usize,
    pub invalid_start_day: usize,
    pub outside_window: usize,
    pub kept: usize,
}

/// Assign an interval ending at `end_instant` to its night. Intervals
/// ending before noon belong to the previous calendar day's night; from
/// noon onward they belong to the day they end on.
pub fn assign_night(end_instant: NaiveDateTime) -> (NaiveDate, Weekday) {
    let date = if clock::minute_of_day(end_instant) < MINUTES_PER_DAY / 2 {
        end_instant.date().pred_opt().expect("date underflow")
    } else {
        end_instant.date()
    };
    (date, date.weekday())
}

fn covered_by_any(intervals: &[NonWearInterval], minute: usize) -> bool {
    // Intervals are ordered and disjoint; find the last one starting at or
    // before `minute`.
    let idx = intervals.partition_point(|iv| iv.start_index <= minute);
    idx > 0 && intervals[idx - 1].end_index > minute
}

/// Filter detected non-wear intervals down to bedtime candidates: length
/// within bounds, flanked on both sides by recorded wear minutes, starting
/// on a valid day, and lying inside the assessment window.
pub fn candidate_obts(
    series: &EpochSeries,
    intervals: &[NonWearInterval],
    days: &[DayRecord],
    window: &AssessmentWindow,
    params: &ObtParams,
) -> (Vec<CandidateObt>, CandidateFilterCounts) {
    let valid_dates: BTreeMap<NaiveDate, bool> =
        days.iter().map(|d| (d.date, d.valid)).collect();
    let mut counts = CandidateFilterCounts {
        intervals_in: intervals.len(),
        ..Default::default()
    };
    let mut out = Vec::new();
    for iv in intervals {
        let len = iv.len() as i64;
        if len < params.min_minutes || len > params.max_minutes {
            counts.outside_length_bounds += 1;
            continue;
        }
        if iv.start_index == 0 || iv.end_index >= series.len() {
            counts.at_recording_edge += 1;
            continue;
        }
        // The flanking minutes exist; they must also carry wear (not sit
        // inside another non-wear interval). Detected intervals are maximal,
        // so this cannot fire, but the contract is checked, not assumed.
        if covered_by_any(intervals, iv.start_index - 1) || covered_by_any(intervals, iv.end_index)
        {
            counts.adjacent_nonwear += 1;
            continue;
        }
        let start_instant = iv.start_instant(series);
        let end_instant = iv.end_instant(series);
        if !valid_dates.get(&start_instant.date()).copied().unwrap_or(false) {
            counts.invalid_start_day += 1;
            continue;
        }
        if start_instant < window.start || end_instant > window.end {
            counts.outside_window += 1;
            continue;
        }
        let (assigned_date, assigned_weekday) = assign_night(end_instant);
        counts.kept += 1;
        out.push(CandidateObt {
            start_index: iv.start_index,
            end_index: iv.end_index,
            start_instant,
            end_instant,
            duration_minutes: len,
            assigned_date,
            assigned_weekday,
        });
    }
    (out, counts)
}

/// One selected objective-bedtime record: a subject-night's winning
/// interval and its two features.
#[derive(Debug, Clone, PartialEq)]
pub struct ObtRecord {
    pub subject_id: String,
    pub start_instant: NaiveDateTime,
    pub end_instant: NaiveDateTime,
    pub assigned_date: NaiveDate,
    pub assigned_weekday: Weekday,
    /// OBT-D: interval length in minutes.
    pub obt_d_minutes: i64,
    /// OBT-M: interval midpoint in signed minutes relative to the midnight
    /// ending the assigned night.
    pub obt_m_linear: f64,
}

impl ObtRecord {
    fn from_candidate(subject_id: &str, c: &CandidateObt) -> ObtRecord {
        // Midnight that ends the assigned night is the start of the next
        // calendar day.
        let midnight = c
            .assigned_date
            .succ_opt()
            .expect("date overflow")
            .and_hms_opt(0, 0, 0)
            .unwrap();
        let start_offset = clock::minutes_between(midnight, c.start_instant) as f64;
        let obt_m_linear = start_offset + c.duration_minutes as f64 / 2.0;
        ObtRecord {
            subject_id: subject_id.to_string(),
            start_instant: c.start_instant,
            end_instant: c.end_instant,
            assigned_date: c.assigned_date,
            assigned_weekday: c.assigned_weekday,
            obt_d_minutes: c.duration_minutes,
            obt_m_linear,
        }
    }

    /// Clock rendering of the midpoint, e.g. "4:19AM".
    pub fn obt_m_clock(&self) -> String {
        clock::render_clock(self.obt_m_linear)
    }
}

/// Keep one candidate per assigned night: the longest, breaking ties by
/// earliest start. Returns the records in assigned-date order plus the
/// number of losing candidates discarded.
pub fn select_obt_per_night(
    subject_id: &str,
    candidates: &[CandidateObt],
) -> (Vec<ObtRecord>, usize) {
    let mut best: BTreeMap<NaiveDate, &CandidateObt> = BTreeMap::new();
    let mut discarded = 0usize;
    for c in candidates {
        match best.entry(c.assigned_date) {
            Entry::Vacant(v) => {
                v.insert(c);
            }
            Entry::Occupied(mut o) => {
                let cur = *o.get();
                let better = c.duration_minutes > cur.duration_minutes
                    || (c.duration_minutes == cur.duration_minutes
                        && c.start_instant < cur.start_instant);
                if better {
                    o.insert(c);
                }
                discarded += 1;
            }
        }
    }
    let records = best
        .values()
        .map(|c| ObtRecord::from_candidate(subject_id, c))
        .collect();
    (records, discarded)
}

/// Per-weekday features of a subject's single record on that weekday.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeekdayFeatures {
    pub assigned_date: NaiveDate,
    pub obt_d_minutes: i64,
    pub obt_m_linear: f64,
}

/// Subject-level summary across all selected nights.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectObtSummary {
    pub subject_id: String,
    pub nights_used: usize,
    pub mean_obt_d_minutes: f64,
    /// Mean midpoint on the signed linear axis (not a clock average).
    pub mean_obt_m_linear: f64,
    /// Keyed by Sunday-first weekday index; when a span of more than seven
    /// days yields two records on one weekday, the chronologically first
    /// wins.
    pub per_weekday: BTreeMap<usize, WeekdayFeatures>,
}

impl SubjectObtSummary {
    pub fn mean_obt_m_clock(&self) -> String {
        clock::render_clock(self.mean_obt_m_linear)
    }
}

/// Summarize a subject's records. Empty input is an error; callers exclude
/// subjects with no nights instead of summarizing them.
pub fn summarize_subject(records: &[ObtRecord]) -> Result<SubjectObtSummary> {
    let first = records
        .first()
        .ok_or_else(|| Error::Record("cannot summarize zero bedtime records".into()))?;
    let n = records.len() as f64;
    let mean_d = records.iter().map(|r| r.obt_d_minutes as f64).sum::<f64>() / n;
    let mean_m = records.iter().map(|r| r.obt_m_linear).sum::<f64>() / n;
    let mut per_weekday: BTreeMap<usize, WeekdayFeatures> = BTreeMap::new();
    let mut ordered: Vec<&ObtRecord> = records.iter().collect();
    ordered.sort_by_key(|r| r.assigned_date);
    for r in ordered {
        per_weekday
            .entry(clock::weekday_index(r.assigned_weekday))
            .or_insert(WeekdayFeatures {
                assigned_date: r.assigned_date,
                obt_d_minutes: r.obt_d_minutes,
                obt_m_linear: r.obt_m_linear,
            });
    }
    Ok(SubjectObtSummary {
        subject_id: first.subject_id.clone(),
        nights_used: records.len(),
        mean_obt_d_minutes: mean_d,
        mean_obt_m_linear: mean_m,
        per_weekday,
    })
}

/// Per-subject extraction accounting for the run log.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExtractionStats {
    pub filter: CandidateFilterCounts,
    pub same_night_discarded: usize,
    pub valid_days: usize,
    pub total_days: usize,
}

/// Full single-subject extraction: detect non-wear, classify days, filter
/// candidates, and pick one record per night.
pub fn extract_obt_records(
    series: &EpochSeries,
    nonwear_params: &NonWearParams,
    obt_params: &ObtParams,
    window: &AssessmentWindow,
    max_nonwear_minutes: u32,
) -> Result<(Vec<ObtRecord>, ExtractionStats)> {
    let intervals = detect_nonwear(series, nonwear_params);
    let days = classify_days(series, &intervals, window, max_nonwear_minutes)?;
    let (candidates, filter) = candidate_obts(series, &intervals, &days, window, obt_params);
    let (records, same_night_discarded) = select_obt_per_night(&series.subject_id, &candidates);
    Ok((
        records,
        ExtractionStats {
            filter,
            same_night_discarded,
            valid_days: days.iter().filter(|d| d.valid).count(),
            total_days: days.len(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instant(s: &str) -> NaiveDateTime {
        clock::parse_instant(s).unwrap()
    }

    /// Build a series starting at the given instant where every minute is
    /// active except the listed zero runs (offset, length in minutes).
    fn series_with_runs(start: &str, total: usize, runs: &[(usize, usize)]) -> EpochSeries {
        let mut counts = vec![500u32; total];
        for &(off, len) in runs {
            for c in counts.iter_mut().skip(off).take(len) {
                *c = 0;
            }
        }
        EpochSeries {
            subject_id: "T1".into(),
            start_instant: instant(start),
            counts,
            status_flags: None,
        }
    }

    fn extract(series: &EpochSeries, window_days: i64) -> Vec<ObtRecord> {
        let window = AssessmentWindow::new(
            series.start_instant.date().and_hms_opt(0, 0, 0).unwrap(),
            series.start_instant.date().and_hms_opt(0, 0, 0).unwrap()
                + chrono::Duration::days(window_days),
        )
        .unwrap();
        let (records, _) = extract_obt_records(
            series,
            &NonWearParams::default(),
            &ObtParams::default(),
            &window,
            600,
        )
        .unwrap();
        records
    }

    #[test]
    fn eight_hour_wear_bounded_removal_is_kept() {
        // Two full days; removal 23:00 -> 07:00 across midnight.
        let s = series_with_runs("2003-06-02T00:00", 2880, &[(1380, 480)]);
        let records = extract(&s, 7);
        assert_eq!(records.len(), 1);
        let r = &records[0];
        assert_eq!(r.obt_d_minutes, 480);
        assert_eq!(clock::format_instant(r.start_instant), "2003-06-02T23:00");
        assert_eq!(clock::format_instant(r.end_instant), "2003-06-03T07:00");
        assert_eq!(r.assigned_date, NaiveDate::from_ymd_opt(2003, 6, 2).unwrap());
        assert_eq!(r.assigned_weekday, Weekday::Mon);
        assert!((r.obt_m_linear - 180.0).abs() < 1e-12);
        assert_eq!(r.obt_m_clock(), "3:00AM");
    }

    #[test]
    fn interval_abutting_recording_start_is_dropped() {
        let s = series_with_runs("2003-06-02T00:00", 2880, &[(0, 480)]);
        assert!(extract(&s, 7).is_empty());
    }

    #[test]
    fn interval_abutting_recording_end_is_dropped() {
        let s = series_with_runs("2003-06-02T00:00", 2880, &[(2400, 480)]);
        assert!(extract(&s, 7).is_empty());
    }

    #[test]
    fn fifteen_hour_interval_is_not_a_candidate() {
        let s = series_with_runs("2003-06-02T00:00", 2880, &[(600, 900)]);
        assert!(extract(&s, 7).is_empty());
    }

    #[test]
    fn four_hour_interval_is_a_candidate_but_shorter_is_not() {
        let kept = series_with_runs("2003-06-02T00:00", 2880, &[(600, 240)]);
        assert_eq!(extract(&kept, 7).len(), 1);
        let dropped = series_with_runs("2003-06-02T00:00", 2880, &[(600, 239)]);
        assert!(extract(&dropped, 7).is_empty());
    }

    #[test]
    fn interval_starting_on_invalid_day_is_dropped() {
        // Day one carries 700 non-wear minutes (invalid); the overnight
        // removal starting on it is rejected even though day two is fine.
        let s = series_with_runs("2003-06-02T00:00", 2880, &[(300, 700), (1380, 480)]);
        assert!(extract(&s, 7).is_empty());
        // Same overnight removal with a clean first day is kept.
        let s = series_with_runs("2003-06-02T00:00", 2880, &[(1380, 480)]);
        assert_eq!(extract(&s, 7).len(), 1);
    }

    #[test]
    fn interval_ending_past_assessment_window_is_dropped() {
        // Window covers only the first day; the removal ends on day two.
        let s = series_with_runs("2003-06-02T00:00", 2880, &[(1380, 480)]);
        assert!(extract(&s, 1).is_empty());
    }

    #[test]
    fn noon_rule_fixtures() {
        // Ends 7:00AM Tuesday -> Monday night.
        let (d, w) = assign_night(instant("2003-06-03T07:00"));
        assert_eq!(d, NaiveDate::from_ymd_opt(2003, 6, 2).unwrap());
        assert_eq!(w, Weekday::Mon);
        // Ends 1:00PM Tuesday -> Tuesday.
        let (d, w) = assign_night(instant("2003-06-03T13:00"));
        assert_eq!(d, NaiveDate::from_ymd_opt(2003, 6, 3).unwrap());
        assert_eq!(w, Weekday::Tue);
        // Ends 11:59AM Wednesday -> Tuesday.
        let (d, w) = assign_night(instant("2003-06-04T11:59"));
        assert_eq!(d, NaiveDate::from_ymd_opt(2003, 6, 3).unwrap());
        assert_eq!(w, Weekday::Tue);
        // Exactly noon -> same day.
        let (d, _) = assign_night(instant("2003-06-04T12:00"));
        assert_eq!(d, NaiveDate::from_ymd_opt(2003, 6, 4).unwrap());
    }

    #[test]
    fn longest_candidate_wins_a_night() {
        // Two removals assigned to the same night: 20:00-01:00 (300) and
        // 02:00-10:00 (480). The 480-minute one wins.
        let s = series_with_runs("2003-06-02T00:00", 2880, &[(1200, 300), (1560, 480)]);
        let records = extract(&s, 7);
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].obt_d_minutes, 480);
        assert_eq!(
            clock::format_instant(records[0].start_instant),
            "2003-06-03T02:00"
        );
    }

    #[test]
    fn tie_goes_to_earlier_start() {
        // Same night, both 240 minutes: 20:00-24:00 and 02:00-06:00.
        let s = series_with_runs("2003-06-02T00:00", 2880, &[(1200, 240), (1560, 240)]);
        let records = extract(&s, 7);
        assert_eq!(records.len(), 1);
        assert_eq!(
            clock::format_instant(records[0].start_instant),
            "2003-06-02T20:00"
        );
    }

    #[test]
    fn one_record_per_assigned_night() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            // Random zero runs over a 7-day recording.
            let total = 7 * 1440;
            let mut runs = Vec::new();
            let mut cursor = 200usize;
            while cursor + 900 < total {
                let len = rng.random_range(60..850);
                runs.push((cursor, len));
                cursor += len + rng.random_range(120..1400);
            }
            let s = series_with_runs("2003-06-01T00:00", total, &runs);
            let records = extract(&s, 7);
            let mut seen = std::collections::BTreeSet::new();
            for r in &records {
                assert!(seen.insert(r.assigned_date), "duplicate night");
                assert!(r.obt_d_minutes >= 240 && r.obt_d_minutes <= 840);
                // midpoint consistency
                let midnight = r
                    .assigned_date
                    .succ_opt()
                    .unwrap()
                    .and_hms_opt(0, 0, 0)
                    .unwrap();
                let expect = clock::minutes_between(midnight, r.start_instant) as f64
                    + r.obt_d_minutes as f64 / 2.0;
                assert_eq!(r.obt_m_linear, expect);
            }
        }
    }

    #[test]
    fn shifting_a_week_preserves_everything_but_dates() {
        let s1 = series_with_runs("2003-06-02T00:00", 2880, &[(1380, 481)]);
        let s2 = series_with_runs("2003-06-09T00:00", 2880, &[(1380, 481)]);
        let r1 = extract(&s1, 7);
        let r2 = extract(&s2, 7);
        assert_eq!(r1.len(), 1);
        assert_eq!(r2.len(), 1);
        assert_eq!(r1[0].obt_d_minutes, r2[0].obt_d_minutes);
        assert_eq!(r1[0].obt_m_linear, r2[0].obt_m_linear);
        assert_eq!(r1[0].assigned_weekday, r2[0].assigned_weekday);
        assert_eq!(
            r1[0].assigned_date + chrono::Duration::days(7),
            r2[0].assigned_date
        );
        // odd duration -> half-minute midpoint survives exactly
        assert_eq!(r1[0].obt_m_linear.fract(), 0.5);
    }

    fn record(date: &str, m: f64) -> ObtRecord {
        let d = clock::parse_date(date).unwrap();
        ObtRecord {
            subject_id: "T1".into(),
            start_instant: d.and_hms_opt(22, 0, 0).unwrap(),
            end_instant: d.succ_opt().unwrap().and_hms_opt(6, 0, 0).unwrap(),
            assigned_date: d,
            assigned_weekday: d.weekday(),
            obt_d_minutes: 480,
            obt_m_linear: m,
        }
    }

    #[test]
    fn summary_means_live_on_the_linear_axis() {
        let records = vec![record("2003-06-02", 240.0), record("2003-06-03", 300.0)];
        let s = summarize_subject(&records).unwrap();
        assert!((s.mean_obt_m_linear - 270.0).abs() < 1e-12);
        assert_eq!(s.mean_obt_m_clock(), "4:30AM");
        assert_eq!(s.nights_used, 2);

        // Midpoints straddling midnight: 11:30PM (-30) and 1:30AM (+90)
        // average to +30 = 12:30AM. A naive clock average of 23:30 and
        // 01:30 would instead land at 12:30PM.
        let records = vec![record("2003-06-02", -30.0), record("2003-06-03", 90.0)];
        let s = summarize_subject(&records).unwrap();
        assert!((s.mean_obt_m_linear - 30.0).abs() < 1e-12);
        assert_eq!(s.mean_obt_m_clock(), "12:30AM");
        let naive_clock_mean = (1410.0 + 90.0) / 2.0;
        assert_eq!(clock::render_clock(naive_clock_mean), "12:30PM");
    }

    #[test]
    fn summary_keeps_first_record_per_weekday() {
        // Two Mondays a week apart: the earlier one fills the weekday map.
        let records = vec![record("2003-06-09", 300.0), record("2003-06-02", 240.0)];
        let s = summarize_subject(&records).unwrap();
        let monday = &s.per_weekday[&clock::weekday_index(Weekday::Mon)];
        assert_eq!(
            monday.assigned_date,
            NaiveDate::from_ymd_opt(2003, 6, 2).unwrap()
        );
        assert!((monday.obt_m_linear - 240.0).abs() < 1e-12);
        assert_eq!(s.nights_used, 2);
    }

    #[test]
    fn summarizing_nothing_is_an_error() {
        assert!(summarize_subject(&[]).is_err());
    }
}
