//! Cohort ingestion: minute-epoch activity streams, demographics, and the
//! sleep questionnaire, joined into an analysis-ready [`Cohort`].
//!
//! The epoch CSV accepts two layouts, detected from the header:
//!
//! * canonical: `SEQN,date,minute,PAXINTEN[,PAXSTAT,PAXCAL]` with an ISO
//!   date per row and a 0-based minute-of-day, and
//! * day-numbered: `SEQN,PAXDAY,PAXN,PAXINTEN[,PAXSTAT,PAXCAL]` where
//!   `PAXDAY` is a 1..=7 day-of-week (1 = Sunday) and `PAXN` a 1-based
//!   sequential minute over the whole record. Day-numbered files carry no
//!   calendar anchor, so dates are synthesized on a fixed reference week;
//!   weekday structure — all the analysis uses — is preserved.
//!
//! Rows may arrive in any order; each subject's minutes are sorted and must
//! then be strictly contiguous.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use chrono::{Datelike, Days, NaiveDate, NaiveDateTime, Weekday};

use crate::clock::{self, MINUTES_PER_DAY};
use crate::error::{Error, Result};

/// Reference Sunday used to anchor day-numbered epoch files on a calendar.
const REFERENCE_SUNDAY: NaiveDate = match NaiveDate::from_ymd_opt(2000, 1, 2) {
    Some(d) => d,
    None => panic!("bad reference date"),
};

// ---------------------------------------------------------------------------
// Age groups and sex
// ---------------------------------------------------------------------------

/// Inclusive year bounds of the thirteen analysis age groups.
pub const AGE_GROUP_BOUNDS: [(u32, u32); 13] = [
    (6, 10),
    (11, 16),
    (17, 22),
    (23, 28),
    (29, 34),
    (35, 40),
    (41, 46),
    (47, 52),
    (53, 58),
    (59, 64),
    (65, 70),
    (71, 76),
    (77, 84),
];

/// Index of the regression reference group (ages 17-22).
pub const REFERENCE_AGE_GROUP: usize = 2;

/// One of the thirteen age groups, stored by index into
/// [`AGE_GROUP_BOUNDS`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgeGroup(usize);

impl AgeGroup {
    /// Group containing an integer age, or `None` outside 6..=84.
    pub fn from_age(age: u32) -> Option<AgeGroup> {
        AGE_GROUP_BOUNDS
            .iter()
            .position(|&(lo, hi)| age >= lo && age <= hi)
            .map(AgeGroup)
    }

    pub fn from_index(i: usize) -> AgeGroup {
        assert!(i < AGE_GROUP_BOUNDS.len());
        AgeGroup(i)
    }

    pub fn index(self) -> usize {
        self.0
    }

    pub fn is_reference(self) -> bool {
        self.0 == REFERENCE_AGE_GROUP
    }

    /// Label like `17-22`, used in every table.
    pub fn label(self) -> String {
        let (lo, hi) = AGE_GROUP_BOUNDS[self.0];
        format!("{lo}-{hi}")
    }

    pub fn from_label(s: &str) -> Result<AgeGroup> {
        AGE_GROUP_BOUNDS
            .iter()
            .position(|&(lo, hi)| s == format!("{lo}-{hi}"))
            .map(AgeGroup)
            .ok_or_else(|| Error::Record(format!("bad age group '{s}'")))
    }

    /// Midpoint age in years, used as the bin coordinate on age grids.
    pub fn midpoint(self) -> f64 {
        let (lo, hi) = AGE_GROUP_BOUNDS[self.0];
        (lo + hi) as f64 / 2.0
    }

    pub fn all() -> impl Iterator<Item = AgeGroup> {
        (0..AGE_GROUP_BOUNDS.len()).map(AgeGroup)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn label(self) -> &'static str {
        match self {
            Sex::Female => "female",
            Sex::Male => "male",
        }
    }

    pub fn from_label(s: &str) -> Result<Sex> {
        match s {
            "female" => Ok(Sex::Female),
            "male" => Ok(Sex::Male),
            _ => Err(Error::Record(format!("bad sex '{s}'"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Epoch series
// ---------------------------------------------------------------------------

/// Device status flags carried by some epoch files. Subjects with any row
/// flagged not-ok are dropped at parse time, so surviving series always hold
/// all-ok flags; `None` means the file had no flag columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceFlags {
    pub status_ok: bool,
    pub calibration_ok: bool,
}

/// One subject's contiguous minute-epoch activity counts.
#[derive(Debug, Clone)]
pub struct EpochSeries {
    pub subject_id: String,
    /// Instant of the first epoch (minute-aligned).
    pub start_instant: NaiveDateTime,
    /// One activity count per minute, contiguous from `start_instant`.
    pub counts: Vec<u32>,
    pub status_flags: Option<DeviceFlags>,
}

impl EpochSeries {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Instant of epoch `idx` (the minute [instant, instant+1min)).
    pub fn instant_at(&self, idx: usize) -> NaiveDateTime {
        self.start_instant + chrono::Duration::minutes(idx as i64)
    }

    /// Exclusive end instant of the recording.
    pub fn end_instant(&self) -> NaiveDateTime {
        self.instant_at(self.len())
    }
}

/// Result of parsing an epoch file: surviving series plus the ids dropped
/// because their device flags marked unreliable or uncalibrated data.
#[derive(Debug, Clone)]
pub struct EpochParse {
    pub series: Vec<EpochSeries>,
    pub dropped_flagged: Vec<String>,
}

#[derive(Clone, Copy)]
enum EpochLayout {
    /// `date` + 0-based `minute` of day.
    DateMinute,
    /// 1..=7 `PAXDAY` day-of-week + 1-based sequential `PAXN`.
    DayNumbered,
}

struct HeaderMap {
    id: usize,
    layout: EpochLayout,
    time_a: usize, // date or paxday column
    time_b: usize, // minute or paxn column
    count: usize,
    stat: Option<usize>,
    cal: Option<usize>,
}

fn find_column(headers: &csv::StringRecord, names: &[&str]) -> Option<usize> {
    headers
        .iter()
        .position(|h| names.iter().any(|n| h.trim().eq_ignore_ascii_case(n)))
}

fn epoch_header_map(source: &str, headers: &csv::StringRecord) -> Result<HeaderMap> {
    let missing = |what: &str| Error::Parse {
        path: source.to_string(),
        line: 1,
        message: format!("missing {what} column"),
    };
    let id = find_column(headers, &["seqn", "id", "subject_id"]).ok_or_else(|| missing("subject id"))?;
    let count =
        find_column(headers, &["paxinten", "count"]).ok_or_else(|| missing("activity count"))?;
    let date = find_column(headers, &["date"]);
    let minute = find_column(headers, &["minute"]);
    let paxday = find_column(headers, &["paxday"]);
    let paxn = find_column(headers, &["paxn"]);
    let (layout, time_a, time_b) = match (date, minute, paxday, paxn) {
        (Some(d), Some(m), _, _) => (EpochLayout::DateMinute, d, m),
        (None, None, Some(d), Some(n)) => (EpochLayout::DayNumbered, d, n),
        _ => {
            return Err(Error::Parse {
                path: source.to_string(),
                line: 1,
                message: "need either date+minute or PAXDAY+PAXN columns".into(),
            })
        }
    };
    Ok(HeaderMap {
        id,
        layout,
        time_a,
        time_b,
        count,
        stat: find_column(headers, &["paxstat"]),
        cal: find_column(headers, &["paxcal"]),
    })
}

/// Rows accumulated per subject before contiguity validation.
struct RawSubject {
    /// (minutes since reference midnight, count) — sortable key.
    rows: Vec<(i64, u32)>,
    flags_seen: bool,
    flagged_bad: bool,
    /// Day-numbered layout only: weekday index of record day 0.
    day0_weekday: Option<i64>,
}

fn parse_count(field: &str) -> std::result::Result<u32, String> {
    let v: i64 = field
        .trim()
        .parse()
        .map_err(|_| format!("bad count '{field}'"))?;
    if v < 0 {
        return Err(format!("negative count {v}"));
    }
    u32::try_from(v).map_err(|_| format!("count {v} out of range"))
}

/// Parse an epoch CSV. `source` names the input in error messages.
pub fn parse_epochs<R: io::Read>(source: &str, reader: R) -> Result<EpochParse> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    if rdr.is_done() {
        // completely empty input: no header, no rows
        return Ok(EpochParse {
            series: Vec::new(),
            dropped_flagged: Vec::new(),
        });
    }
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Ok(EpochParse {
            series: Vec::new(),
            dropped_flagged: Vec::new(),
        });
    }
    let map = epoch_header_map(source, &headers)?;

    let parse_err = |line: u64, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };

    let mut subjects: BTreeMap<String, RawSubject> = BTreeMap::new();
    // Preserve first-appearance order of subjects for output stability.
    let mut order: Vec<String> = Vec::new();

    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| -> &str { record.get(i).unwrap_or("") };
        let id = field(map.id).to_string();
        if id.is_empty() {
            return Err(parse_err(line, "empty subject id".into()));
        }
        let count = parse_count(field(map.count)).map_err(|m| parse_err(line, m))?;

        let entry = match subjects.entry(id.clone()) {
            Entry::Vacant(v) => {
                order.push(id.clone());
                v.insert(RawSubject {
                    rows: Vec::new(),
                    flags_seen: false,
                    flagged_bad: false,
                    day0_weekday: None,
                })
            }
            Entry::Occupied(o) => o.into_mut(),
        };

        let key = match map.layout {
            EpochLayout::DateMinute => {
                let date = clock::parse_date(field(map.time_a))
                    .map_err(|e| parse_err(line, e.to_string()))?;
                let minute: i64 = field(map.time_b)
                    .parse()
                    .map_err(|_| parse_err(line, format!("bad minute '{}'", field(map.time_b))))?;
                if !(0..MINUTES_PER_DAY).contains(&minute) {
                    return Err(parse_err(line, format!("minute {minute} outside 0..=1439")));
                }
                days_since_reference(date) * MINUTES_PER_DAY + minute
            }
            EpochLayout::DayNumbered => {
                let paxday: i64 = field(map.time_a)
                    .parse()
                    .map_err(|_| parse_err(line, format!("bad PAXDAY '{}'", field(map.time_a))))?;
                if !(1..=7).contains(&paxday) {
                    return Err(parse_err(line, format!("PAXDAY {paxday} outside 1..=7")));
                }
                let paxn: i64 = field(map.time_b)
                    .parse()
                    .map_err(|_| parse_err(line, format!("bad PAXN '{}'", field(map.time_b))))?;
                if paxn < 1 {
                    return Err(parse_err(line, format!("PAXN {paxn} must be >= 1")));
                }
                let record_day = (paxn - 1) / MINUTES_PER_DAY;
                let day0 = (paxday - 1 - record_day).rem_euclid(7);
                match entry.day0_weekday {
                    None => entry.day0_weekday = Some(day0),
                    Some(prev) if prev != day0 => {
                        return Err(parse_err(
                            line,
                            format!("PAXDAY {paxday} inconsistent with PAXN {paxn}"),
                        ))
                    }
                    Some(_) => {}
                }
                day0 * MINUTES_PER_DAY + (paxn - 1)
            }
        };

        if map.stat.is_some() || map.cal.is_some() {
            entry.flags_seen = true;
            let ok_flag = |col: Option<usize>| -> std::result::Result<bool, String> {
                match col {
                    None => Ok(true),
                    Some(i) => {
                        let f = field(i);
                        if f.is_empty() {
                            return Ok(true);
                        }
                        let v: i64 = f.parse().map_err(|_| format!("bad flag '{f}'"))?;
                        Ok(v == 1)
                    }
                }
            };
            let stat_ok = ok_flag(map.stat).map_err(|m| parse_err(line, m))?;
            let cal_ok = ok_flag(map.cal).map_err(|m| parse_err(line, m))?;
            if !(stat_ok && cal_ok) {
                entry.flagged_bad = true;
            }
        }

        entry.rows.push((key, count));
    }

    let mut series = Vec::new();
    let mut dropped_flagged = Vec::new();
    for id in order {
        let mut raw = subjects.remove(&id).expect("subject recorded");
        if raw.flagged_bad {
            dropped_flagged.push(id);
            continue;
        }
        raw.rows.sort_by_key(|&(k, _)| k);
        let start_key = raw.rows[0].0;
        let mut counts = Vec::with_capacity(raw.rows.len());
        for (offset, &(key, count)) in raw.rows.iter().enumerate() {
            let expected = start_key + offset as i64;
            if key == expected {
                counts.push(count);
            } else if key < expected {
                return Err(Error::Record(format!(
                    "subject {id}: duplicate minute at {}",
                    clock::format_instant(key_to_instant(key))
                )));
            } else {
                return Err(Error::Gap {
                    subject: id,
                    position: clock::format_instant(key_to_instant(expected)),
                });
            }
        }
        let status_flags = raw.flags_seen.then_some(DeviceFlags {
            status_ok: true,
            calibration_ok: true,
        });
        series.push(EpochSeries {
            subject_id: id,
            start_instant: key_to_instant(start_key),
            counts,
            status_flags,
        });
    }

    Ok(EpochParse {
        series,
        dropped_flagged,
    })
}

fn days_since_reference(date: NaiveDate) -> i64 {
    (date - REFERENCE_SUNDAY).num_days()
}

fn key_to_instant(key: i64) -> NaiveDateTime {
    let days = key.div_euclid(MINUTES_PER_DAY);
    let minute = key.rem_euclid(MINUTES_PER_DAY);
    let date = if days >= 0 {
        REFERENCE_SUNDAY + Days::new(days as u64)
    } else {
        REFERENCE_SUNDAY - Days::new((-days) as u64)
    };
    date.and_hms_opt(0, 0, 0).unwrap() + chrono::Duration::minutes(minute)
}

pub fn parse_epochs_file(path: &Path) -> Result<EpochParse> {
    let file = File::open(path)?;
    parse_epochs(&path.display().to_string(), io::BufReader::new(file))
}

/// Write series in the canonical layout (`SEQN,date,minute,PAXINTEN` plus
/// flag columns when every series carries flags). Parsing the output and
/// writing it again is byte-stable.
pub fn write_epochs<W: Write>(series: &[EpochSeries], writer: W) -> Result<()> {
    let with_flags = !series.is_empty() && series.iter().all(|s| s.status_flags.is_some());
    let mut w = io::BufWriter::new(writer);
    if with_flags {
        writeln!(w, "SEQN,date,minute,PAXINTEN,PAXSTAT,PAXCAL")?;
    } else {
        writeln!(w, "SEQN,date,minute,PAXINTEN")?;
    }
    for s in series {
        for (i, &count) in s.counts.iter().enumerate() {
            let t = s.instant_at(i);
            let date = t.date();
            let minute = clock::minute_of_day(t);
            if with_flags {
                writeln!(w, "{},{},{},{},1,1", s.subject_id, date, minute, count)?;
            } else {
                writeln!(w, "{},{},{},{}", s.subject_id, date, minute, count)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_epochs_file(series: &[EpochSeries], path: &Path) -> Result<()> {
    write_epochs(series, File::create(path)?)
}

// ---------------------------------------------------------------------------
// Demographics
// ---------------------------------------------------------------------------

/// Self-reported usual sleep duration and onset latency. Either answer may
/// be absent; rows with both missing are skipped entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelfReport {
    /// Usual nightly sleep in whole hours, top-coded: >11 reported as 12.
    pub sleep_hours: Option<u16>,
    /// Minutes to fall asleep, top-coded: >50 reported as 60.
    pub onset_minutes: Option<u16>,
}

/// One subject's demographic and design data.
#[derive(Debug, Clone)]
pub struct SubjectProfile {
    pub subject_id: String,
    pub age_years: u32,
    pub age_group: AgeGroup,
    pub sex: Sex,
    /// Analysis weight. As parsed this is the examination weight; cohort
    /// assembly rescales it per the weight scheme.
    pub weight: f64,
    pub stratum: Option<i64>,
    pub psu: Option<i64>,
    pub self_report: Option<SelfReport>,
}

/// Why a parsed demographics row was set aside rather than profiled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExclusionReason {
    UnderSix,
    OverEightyFour,
}

impl ExclusionReason {
    pub fn label(self) -> &'static str {
        match self {
            ExclusionReason::UnderSix => "age under 6",
            ExclusionReason::OverEightyFour => "age over 84",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExcludedSubject {
    pub subject_id: String,
    pub age_years: u32,
    pub reason: ExclusionReason,
}

#[derive(Debug, Clone)]
pub struct DemographicsParse {
    pub profiles: Vec<SubjectProfile>,
    pub excluded: Vec<ExcludedSubject>,
}

fn parse_sex(field: &str) -> std::result::Result<Sex, String> {
    match field.trim().to_ascii_lowercase().as_str() {
        "1" | "m" | "male" => Ok(Sex::Male),
        "2" | "f" | "female" => Ok(Sex::Female),
        other => Err(format!("bad sex '{other}'")),
    }
}

/// Parse a demographics CSV. Ages outside 6..=84 are excluded (not errors)
/// and reported with their reason; non-positive weights are record errors.
pub fn parse_demographics<R: io::Read>(source: &str, reader: R) -> Result<DemographicsParse> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    if rdr.is_done() {
        return Ok(DemographicsParse {
            profiles: Vec::new(),
            excluded: Vec::new(),
        });
    }
    let headers = rdr.headers()?.clone();
    let missing = |what: &str| Error::Parse {
        path: source.to_string(),
        line: 1,
        message: format!("missing {what} column"),
    };
    let id_col =
        find_column(&headers, &["seqn", "id", "subject_id"]).ok_or_else(|| missing("subject id"))?;
    let age_col =
        find_column(&headers, &["ridageyr", "age", "age_years"]).ok_or_else(|| missing("age"))?;
    let sex_col = find_column(&headers, &["riagendr", "sex"]).ok_or_else(|| missing("sex"))?;
    let weight_col = find_column(&headers, &["wtmec2yr", "wtmec4yr", "weight", "exam_weight"])
        .ok_or_else(|| missing("weight"))?;
    let stratum_col = find_column(&headers, &["sdmvstra", "stratum"]);
    let psu_col = find_column(&headers, &["sdmvpsu", "psu"]);

    let parse_err = |line: u64, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };

    let mut profiles = Vec::new();
    let mut excluded = Vec::new();
    let mut seen: BTreeMap<String, ()> = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| -> &str { record.get(i).unwrap_or("") };
        let id = field(id_col).to_string();
        if id.is_empty() {
            return Err(parse_err(line, "empty subject id".into()));
        }
        if seen.insert(id.clone(), ()).is_some() {
            return Err(Error::Record(format!("duplicate demographics row for subject {id}")));
        }
        let age: u32 = field(age_col)
            .parse()
            .map_err(|_| parse_err(line, format!("bad age '{}'", field(age_col))))?;
        let sex = parse_sex(field(sex_col)).map_err(|m| parse_err(line, m))?;
        let weight: f64 = field(weight_col)
            .parse()
            .map_err(|_| parse_err(line, format!("bad weight '{}'", field(weight_col))))?;
        if !weight.is_finite() || weight <= 0.0 {
            return Err(Error::Record(format!(
                "subject {id}: non-positive weight {weight}"
            )));
        }
        let opt_int = |col: Option<usize>, what: &str| -> Result<Option<i64>> {
            match col {
                None => Ok(None),
                Some(i) => {
                    let f = field(i);
                    if f.is_empty() {
                        Ok(None)
                    } else {
                        f.parse()
                            .map(Some)
                            .map_err(|_| parse_err(line, format!("bad {what} '{f}'")))
                    }
                }
            }
        };
        let stratum = opt_int(stratum_col, "stratum")?;
        let psu = opt_int(psu_col, "psu")?;

        match AgeGroup::from_age(age) {
            Some(age_group) => profiles.push(SubjectProfile {
                subject_id: id,
                age_years: age,
                age_group,
                sex,
                weight,
                stratum,
                psu,
                self_report: None,
            }),
            None => excluded.push(ExcludedSubject {
                subject_id: id,
                age_years: age,
                reason: if age < 6 {
                    ExclusionReason::UnderSix
                } else {
                    ExclusionReason::OverEightyFour
                },
            }),
        }
    }

    Ok(DemographicsParse { profiles, excluded })
}

pub fn parse_demographics_file(path: &Path) -> Result<DemographicsParse> {
    let file = File::open(path)?;
    parse_demographics(&path.display().to_string(), io::BufReader::new(file))
}

// ---------------------------------------------------------------------------
// Sleep questionnaire
// ---------------------------------------------------------------------------

/// Top-code self-reported sleep hours: values above 11 collapse to 12.
pub fn top_code_sleep_hours(hours: u16) -> u16 {
    if hours > 11 {
        12
    } else {
        hours
    }
}

/// Top-code self-reported onset latency: values above 50 collapse to 60.
pub fn top_code_onset_minutes(minutes: u16) -> u16 {
    if minutes > 50 {
        60
    } else {
        minutes
    }
}

/// Questionnaire codes meaning "refused" / "don't know" for sleep hours.
const HOURS_MISSING_CODES: [i64; 2] = [77, 99];
/// Same for onset minutes.
const ONSET_MISSING_CODES: [i64; 2] = [77777, 99999];

/// Parse the sleep questionnaire CSV into per-subject reports. Refused and
/// don't-know codes become absent answers; rows with no answers at all are
/// skipped.
pub fn parse_sleep_questionnaire<R: io::Read>(
    source: &str,
    reader: R,
) -> Result<BTreeMap<String, SelfReport>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    if rdr.is_done() {
        return Ok(BTreeMap::new());
    }
    let headers = rdr.headers()?.clone();
    let missing = |what: &str| Error::Parse {
        path: source.to_string(),
        line: 1,
        message: format!("missing {what} column"),
    };
    let id_col =
        find_column(&headers, &["seqn", "id", "subject_id"]).ok_or_else(|| missing("subject id"))?;
    let hours_col = find_column(&headers, &["sld010h", "sleep_hours", "hours"])
        .ok_or_else(|| missing("sleep hours"))?;
    let onset_col = find_column(&headers, &["sld020m", "onset_minutes", "onset"])
        .ok_or_else(|| missing("onset minutes"))?;

    let parse_err = |line: u64, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };

    let mut reports = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| -> &str { record.get(i).unwrap_or("") };
        let id = field(id_col).to_string();
        if id.is_empty() {
            return Err(parse_err(line, "empty subject id".into()));
        }

        let raw_int = |col: usize, what: &str| -> Result<Option<i64>> {
            let f = field(col);
            if f.is_empty() {
                return Ok(None);
            }
            f.parse()
                .map(Some)
                .map_err(|_| parse_err(line, format!("bad {what} '{f}'")))
        };

        let sleep_hours = match raw_int(hours_col, "sleep hours")? {
            None => None,
            Some(v) if HOURS_MISSING_CODES.contains(&v) => None,
            Some(v) => {
                if v < 1 {
                    return Err(Error::Record(format!(
                        "subject {id}: sleep hours {v} below 1"
                    )));
                }
                Some(top_code_sleep_hours(v as u16))
            }
        };
        let onset_minutes = match raw_int(onset_col, "onset minutes")? {
            None => None,
            Some(v) if ONSET_MISSING_CODES.contains(&v) => None,
            Some(v) => {
                if v < 0 {
                    return Err(Error::Record(format!(
                        "subject {id}: onset minutes {v} below 0"
                    )));
                }
                Some(top_code_onset_minutes(v as u16))
            }
        };

        if sleep_hours.is_none() && onset_minutes.is_none() {
            continue;
        }
        if reports
            .insert(
                id.clone(),
                SelfReport {
                    sleep_hours,
                    onset_minutes,
                },
            )
            .is_some()
        {
            return Err(Error::Record(format!(
                "duplicate questionnaire row for subject {id}"
            )));
        }
    }
    Ok(reports)
}

pub fn parse_sleep_questionnaire_file(path: &Path) -> Result<BTreeMap<String, SelfReport>> {
    let file = File::open(path)?;
    parse_sleep_questionnaire(&path.display().to_string(), io::BufReader::new(file))
}

// ---------------------------------------------------------------------------
// Cohort assembly
// ---------------------------------------------------------------------------

/// How analysis weights are derived from examination weights. Pooling two
/// survey cycles halves each cycle's weights so totals still estimate one
/// population.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightScheme {
    SingleCycle,
    CombinedTwoCycle,
}

impl WeightScheme {
    pub fn label(self) -> &'static str {
        match self {
            WeightScheme::SingleCycle => "single-cycle",
            WeightScheme::CombinedTwoCycle => "combined-two-cycle",
        }
    }

    pub fn from_label(s: &str) -> Result<WeightScheme> {
        match s {
            "single-cycle" => Ok(WeightScheme::SingleCycle),
            "combined-two-cycle" => Ok(WeightScheme::CombinedTwoCycle),
            _ => Err(Error::Config(format!("bad weight scheme '{s}'"))),
        }
    }

    fn factor(self) -> f64 {
        match self {
            WeightScheme::SingleCycle => 1.0,
            WeightScheme::CombinedTwoCycle => 0.5,
        }
    }
}

/// The joined analysis cohort: profiles (with scheme-scaled weights and
/// attached self-reports) and epoch series, keyed by subject id.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub subjects: BTreeMap<String, SubjectProfile>,
    pub series: BTreeMap<String, EpochSeries>,
    pub weight_scheme: WeightScheme,
}

/// Join accounting, reported by the pipeline log.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct JoinReport {
    pub matched: usize,
    pub series_without_profile: usize,
    pub profiles_without_series: usize,
    pub reports_attached: usize,
    pub reports_unmatched: usize,
}

/// Inner-join profiles and series on subject id, attach self-reports where
/// present, and apply the weight scheme.
pub fn join_cohort(
    profiles: Vec<SubjectProfile>,
    series: Vec<EpochSeries>,
    reports: &BTreeMap<String, SelfReport>,
    weight_scheme: WeightScheme,
) -> (Cohort, JoinReport) {
    let mut profile_map: BTreeMap<String, SubjectProfile> = profiles
        .into_iter()
        .map(|p| (p.subject_id.clone(), p))
        .collect();

    let mut report = JoinReport::default();
    let mut subjects = BTreeMap::new();
    let mut series_map = BTreeMap::new();
    for s in series {
        match profile_map.remove(&s.subject_id) {
            Some(mut p) => {
                p.weight *= weight_scheme.factor();
                if let Some(r) = reports.get(&p.subject_id) {
                    p.self_report = Some(*r);
                    report.reports_attached += 1;
                }
                report.matched += 1;
                subjects.insert(p.subject_id.clone(), p);
                series_map.insert(s.subject_id.clone(), s);
            }
            None => report.series_without_profile += 1,
        }
    }
    report.profiles_without_series = profile_map.len();
    report.reports_unmatched = reports
        .keys()
        .filter(|id| !subjects.contains_key(*id))
        .count();

    (
        Cohort {
            subjects,
            series: series_map,
            weight_scheme,
        },
        report,
    )
}

impl Cohort {
    /// Subjects in id order (the iteration order used by every stage).
    pub fn subject_ids(&self) -> impl Iterator<Item = &String> {
        self.subjects.keys()
    }
}

/// Weekday of a date — re-exported convenience for table builders.
pub fn weekday_of(date: NaiveDate) -> Weekday {
    date.weekday()
}
