//! Run configuration, staged orchestration, and the report bundle.
//!
//! The pipeline reads three CSVs (epochs, demographics, optional sleep
//! questionnaire), runs every analysis stage, and assembles all outputs
//! in memory. Files reach disk only when the whole run succeeded, so a
//! failed run never leaves a partial bundle behind. With fixed inputs and
//! configuration the bundle is byte-identical across runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::clock;
use crate::error::{Error, Result};
use crate::ingest::{
    self, AgeGroup, Cohort, EpochSeries, SelfReport, Sex, SubjectProfile, WeightScheme,
};
use crate::lms::{fit_lms, LmsConfig, LmsCurveSet, LmsObservation};
use crate::nonwear::{
    classify_days, detect_nonwear, AssessmentWindow, DayRecord, NonWearInterval, NonWearParams,
};
use crate::obt::{
    candidate_obts, select_obt_per_night, summarize_subject, CandidateFilterCounts, ObtParams,
    ObtRecord, SubjectObtSummary,
};
use crate::survey::{
    build_design_frames, demographic_table, fit_day_model, fitted_value_tables,
    participation_table, self_report_comparison, ComparisonRow, DayModelFit, OutcomeKind,
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Analysis parameters for a whole run. Input and output paths are command
/// arguments, not configuration: the same config file should mean the same
/// analysis wherever the data lives.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Days in the assessment window, anchored at midnight of each
    /// subject's first recorded day.
    pub assessment_days: u32,
    pub nonwear_min_len: usize,
    pub nonwear_max_interrupts: usize,
    pub nonwear_interrupt_ceiling: u32,
    pub obt_min_minutes: i64,
    pub obt_max_minutes: i64,
    /// A day with this much non-wear (or more) is invalid.
    pub max_nonwear_minutes: u32,
    /// Two-sided significance level for coefficient tables.
    pub alpha: f64,
    pub weight_scheme: WeightScheme,
    pub lms_edf_l: f64,
    pub lms_edf_m: f64,
    pub lms_edf_s: f64,
    pub lms_segments: usize,
    pub lms_tol: f64,
    pub lms_max_iter: usize,
    pub lms_min_obs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            assessment_days: 7,
            nonwear_min_len: 60,
            nonwear_max_interrupts: 2,
            nonwear_interrupt_ceiling: 100,
            obt_min_minutes: 240,
            obt_max_minutes: 840,
            max_nonwear_minutes: 600,
            alpha: 0.05,
            weight_scheme: WeightScheme::SingleCycle,
            lms_edf_l: 3.0,
            lms_edf_m: 5.0,
            lms_edf_s: 3.0,
            lms_segments: 20,
            lms_tol: 1e-6,
            lms_max_iter: 50,
            lms_min_obs: 50,
        }
    }
}

impl PipelineConfig {
    /// Parse `key = value` lines. Blank lines and `#` comments are
    /// ignored; unknown keys are errors; later lines override earlier
    /// ones. Missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "config line {}: expected key = value, got '{line}'",
                    i + 1
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                Error::Config(format!("config key {key}: bad {what} '{value}'"))
            };
            match key {
                "assessment_days" => {
                    cfg.assessment_days = value.parse().map_err(|_| bad("day count"))?
                }
                "nonwear_min_len" => {
                    cfg.nonwear_min_len = value.parse().map_err(|_| bad("minute count"))?
                }
                "nonwear_max_interrupts" => {
                    cfg.nonwear_max_interrupts = value.parse().map_err(|_| bad("count"))?
                }
                "nonwear_interrupt_ceiling" => {
                    cfg.nonwear_interrupt_ceiling = value.parse().map_err(|_| bad("count"))?
                }
                "obt_min_minutes" => {
                    cfg.obt_min_minutes = value.parse().map_err(|_| bad("minute count"))?
                }
                "obt_max_minutes" => {
                    cfg.obt_max_minutes = value.parse().map_err(|_| bad("minute count"))?
                }
                "max_nonwear_minutes" => {
                    cfg.max_nonwear_minutes = value.parse().map_err(|_| bad("minute count"))?
                }
                "alpha" => cfg.alpha = value.parse().map_err(|_| bad("level"))?,
                "weight_scheme" => cfg.weight_scheme = WeightScheme::from_label(value)?,
                "lms_edf_l" => cfg.lms_edf_l = value.parse().map_err(|_| bad("edf"))?,
                "lms_edf_m" => cfg.lms_edf_m = value.parse().map_err(|_| bad("edf"))?,
                "lms_edf_s" => cfg.lms_edf_s = value.parse().map_err(|_| bad("edf"))?,
                "lms_segments" => cfg.lms_segments = value.parse().map_err(|_| bad("count"))?,
                "lms_tol" => cfg.lms_tol = value.parse().map_err(|_| bad("tolerance"))?,
                "lms_max_iter" => cfg.lms_max_iter = value.parse().map_err(|_| bad("count"))?,
                "lms_min_obs" => cfg.lms_min_obs = value.parse().map_err(|_| bad("count"))?,
                other => {
                    return Err(Error::Config(format!("unknown config key '{other}'")));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<PipelineConfig> {
        let text = fs::read_to_string(path)?;
        PipelineConfig::parse(&text)
    }

    /// Canonical `key = value` rendering; `parse` of the output gives back
    /// an equal config.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "assessment_days = {}", self.assessment_days);
        let _ = writeln!(s, "nonwear_min_len = {}", self.nonwear_min_len);
        let _ = writeln!(s, "nonwear_max_interrupts = {}", self.nonwear_max_interrupts);
        let _ = writeln!(
            s,
            "nonwear_interrupt_ceiling = {}",
            self.nonwear_interrupt_ceiling
        );
        let _ = writeln!(s, "obt_min_minutes = {}", self.obt_min_minutes);
        let _ = writeln!(s, "obt_max_minutes = {}", self.obt_max_minutes);
        let _ = writeln!(s, "max_nonwear_minutes = {}", self.max_nonwear_minutes);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "weight_scheme = {}", self.weight_scheme.label());
        let _ = writeln!(s, "lms_edf_l = {}", self.lms_edf_l);
        let _ = writeln!(s, "lms_edf_m = {}", self.lms_edf_m);
        let _ = writeln!(s, "lms_edf_s = {}", self.lms_edf_s);
        let _ = writeln!(s, "lms_segments = {}", self.lms_segments);
        let _ = writeln!(s, "lms_tol = {}", self.lms_tol);
        let _ = writeln!(s, "lms_max_iter = {}", self.lms_max_iter);
        let _ = writeln!(s, "lms_min_obs = {}", self.lms_min_obs);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.assessment_days == 0 {
            return err("assessment_days must be positive".into());
        }
        if self.nonwear_min_len == 0 {
            return err("nonwear_min_len must be positive".into());
        }
        if self.nonwear_interrupt_ceiling == 0 {
            return err("nonwear_interrupt_ceiling must be positive".into());
        }
        if self.obt_min_minutes <= 0 || self.obt_min_minutes >= self.obt_max_minutes {
            return err(format!(
                "bedtime length bounds must satisfy 0 < min < max, got {}..{}",
                self.obt_min_minutes, self.obt_max_minutes
            ));
        }
        if self.max_nonwear_minutes == 0 || self.max_nonwear_minutes > 1440 {
            return err(format!(
                "max_nonwear_minutes must lie in 1..=1440, got {}",
                self.max_nonwear_minutes
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return err(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        for (name, edf) in [
            ("lms_edf_l", self.lms_edf_l),
            ("lms_edf_m", self.lms_edf_m),
            ("lms_edf_s", self.lms_edf_s),
        ] {
            if !(edf >= 2.0) {
                return err(format!("{name} must be at least 2, got {edf}"));
            }
        }
        if self.lms_segments == 0 {
            return err("lms_segments must be positive".into());
        }
        if !(self.lms_tol > 0.0) {
            return err(format!("lms_tol must be positive, got {}", self.lms_tol));
        }
        if self.lms_max_iter == 0 {
            return err("lms_max_iter must be positive".into());
        }
        if self.lms_min_obs == 0 {
            return err("lms_min_obs must be positive".into());
        }
        Ok(())
    }

    pub fn nonwear_params(&self) -> NonWearParams {
        NonWearParams {
            min_len: self.nonwear_min_len,
            max_interrupts: self.nonwear_max_interrupts,
            interrupt_ceiling: self.nonwear_interrupt_ceiling,
        }
    }

    pub fn obt_params(&self) -> ObtParams {
        ObtParams {
            min_minutes: self.obt_min_minutes,
            max_minutes: self.obt_max_minutes,
        }
    }

    pub fn lms_config(&self) -> LmsConfig {
        LmsConfig {
            edf_l: self.lms_edf_l,
            edf_m: self.lms_edf_m,
            edf_s: self.lms_edf_s,
            n_segments: self.lms_segments,
            tol: self.lms_tol,
            max_iter: self.lms_max_iter,
            min_obs: self.lms_min_obs,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

// ---------------------------------------------------------------------------
// Interchange CSV (written by one stage command, read by the next)
// ---------------------------------------------------------------------------

/// Subject table with analysis weights already on the configured scheme.
pub fn subjects_csv(subjects: &BTreeMap<String, SubjectProfile>) -> String {
    let mut s = String::from(
        "subject_id,age_years,age_group,sex,weight,stratum,psu,sleep_hours,onset_minutes\n",
    );
    for p in subjects.values() {
        let opt_int = |v: Option<i64>| v.map(|x| x.to_string()).unwrap_or_default();
        let opt_u16 = |v: Option<u16>| v.map(|x| x.to_string()).unwrap_or_default();
        let report = p.self_report.unwrap_or(SelfReport {
            sleep_hours: None,
            onset_minutes: None,
        });
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            p.subject_id,
            p.age_years,
            p.age_group.label(),
            p.sex.label(),
            p.weight,
            opt_int(p.stratum),
            opt_int(p.psu),
            opt_u16(report.sleep_hours),
            opt_u16(report.onset_minutes),
        );
    }
    s
}

pub fn read_subjects_file(path: &Path) -> Result<Vec<SubjectProfile>> {
    let source = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let parse_err = |line: usize, message: String| Error::Parse {
        path: source.clone(),
        line: line as u64,
        message,
    };
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("missing {name} column")))
    };
    let (c_id, c_age, c_group, c_sex, c_weight) = (
        col("subject_id")?,
        col("age_years")?,
        col("age_group")?,
        col("sex")?,
        col("weight")?,
    );
    let (c_stratum, c_psu, c_hours, c_onset) = (
        col("stratum")?,
        col("psu")?,
        col("sleep_hours")?,
        col("onset_minutes")?,
    );
    let mut out = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record?;
        let field = |c: usize| record.get(c).unwrap_or("").to_string();
        let age_years: u32 = field(c_age)
            .parse()
            .map_err(|_| parse_err(line, format!("bad age '{}'", field(c_age))))?;
        let age_group = AgeGroup::from_age(age_years).ok_or_else(|| {
            parse_err(line, format!("age {age_years} outside the analyzed range"))
        })?;
        if field(c_group) != age_group.label() {
            return Err(parse_err(
                line,
                format!(
                    "age group column '{}' disagrees with age {age_years}",
                    field(c_group)
                ),
            ));
        }
        let weight: f64 = field(c_weight)
            .parse()
            .map_err(|_| parse_err(line, format!("bad weight '{}'", field(c_weight))))?;
        if !weight.is_finite() || weight < 0.0 {
            return Err(parse_err(line, format!("bad weight '{weight}'")));
        }
        let opt_int = |c: usize| -> Result<Option<i64>> {
            let f = field(c);
            if f.is_empty() {
                return Ok(None);
            }
            f.parse()
                .map(Some)
                .map_err(|_| parse_err(line, format!("bad integer '{f}'")))
        };
        let opt_u16 = |c: usize| -> Result<Option<u16>> {
            let f = field(c);
            if f.is_empty() {
                return Ok(None);
            }
            f.parse()
                .map(Some)
                .map_err(|_| parse_err(line, format!("bad integer '{f}'")))
        };
        let (sleep_hours, onset_minutes) = (opt_u16(c_hours)?, opt_u16(c_onset)?);
        let self_report = (sleep_hours.is_some() || onset_minutes.is_some()).then_some(
            SelfReport {
                sleep_hours,
                onset_minutes,
            },
        );
        out.push(SubjectProfile {
            subject_id: field(c_id),
            age_years,
            age_group,
            sex: Sex::from_label(&field(c_sex))
                .map_err(|e| parse_err(line, e.to_string()))?,
            weight,
            stratum: opt_int(c_stratum)?,
            psu: opt_int(c_psu)?,
            self_report,
        });
    }
    Ok(out)
}

/// One line per selected night. `obt_m_linear` uses the shortest exact
/// decimal so reading the file back reproduces the value bit-for-bit.
pub fn obt_records_csv(records: &BTreeMap<String, Vec<ObtRecord>>) -> String {
    let mut s = String::from(
        "subject_id,assigned_date,weekday,start,end,obt_d_minutes,obt_m_linear,obt_m_clock\n",
    );
    for recs in records.values() {
        for r in recs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.subject_id,
                r.assigned_date.format("%Y-%m-%d"),
                clock::weekday_label(r.assigned_weekday),
                clock::format_instant(r.start_instant),
                clock::format_instant(r.end_instant),
                r.obt_d_minutes,
                r.obt_m_linear,
                r.obt_m_clock(),
            );
        }
    }
    s
}

/// Read a night table back, recomputing every derived column and refusing
/// files whose columns disagree with the timestamps.
pub fn read_obt_records_file(path: &Path) -> Result<Vec<ObtRecord>> {
    let source = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let parse_err = |line: usize, message: String| Error::Parse {
        path: source.clone(),
        line: line as u64,
        message,
    };
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("missing {name} column")))
    };
    let (c_id, c_date, c_start, c_end, c_d, c_m) = (
        col("subject_id")?,
        col("assigned_date")?,
        col("start")?,
        col("end")?,
        col("obt_d_minutes")?,
        col("obt_m_linear")?,
    );
    let mut out = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record?;
        let field = |c: usize| record.get(c).unwrap_or("").to_string();
        let start_instant = clock::parse_instant(&field(c_start))
            .map_err(|e| parse_err(line, e.to_string()))?;
        let end_instant =
            clock::parse_instant(&field(c_end)).map_err(|e| parse_err(line, e.to_string()))?;
        let obt_d_minutes = clock::minutes_between(start_instant, end_instant);
        if obt_d_minutes <= 0 {
            return Err(parse_err(line, "interval end not after start".into()));
        }
        let stated_d: i64 = field(c_d)
            .parse()
            .map_err(|_| parse_err(line, format!("bad minute count '{}'", field(c_d))))?;
        if stated_d != obt_d_minutes {
            return Err(parse_err(
                line,
                format!("duration column {stated_d} disagrees with timestamps ({obt_d_minutes})"),
            ));
        }
        let (assigned_date, assigned_weekday) = crate::obt::assign_night(end_instant);
        let stated_date =
            clock::parse_date(&field(c_date)).map_err(|e| parse_err(line, e.to_string()))?;
        if stated_date != assigned_date {
            return Err(parse_err(
                line,
                format!("assigned date {stated_date} disagrees with the noon rule"),
            ));
        }
        let midnight = assigned_date
            .succ_opt()
            .ok_or_else(|| parse_err(line, "date overflow".into()))?
            .and_hms_opt(0, 0, 0)
            .unwrap();
        let obt_m_linear = clock::minutes_between(midnight, start_instant) as f64
            + obt_d_minutes as f64 / 2.0;
        let stated_m: f64 = field(c_m)
            .parse()
            .map_err(|_| parse_err(line, format!("bad midpoint '{}'", field(c_m))))?;
        if (stated_m - obt_m_linear).abs() > 1e-9 {
            return Err(parse_err(
                line,
                format!("midpoint column {stated_m} disagrees with timestamps ({obt_m_linear})"),
            ));
        }
        out.push(ObtRecord {
            subject_id: field(c_id),
            start_instant,
            end_instant,
            assigned_date,
            assigned_weekday,
            obt_d_minutes,
            obt_m_linear,
        });
    }
    Ok(out)
}

pub fn subject_summaries_csv(summaries: &BTreeMap<String, SubjectObtSummary>) -> String {
    let mut s = String::from(
        "subject_id,nights_used,mean_obt_d_minutes,mean_obt_m_linear,mean_obt_m_clock\n",
    );
    for m in summaries.values() {
        let _ = writeln!(
            s,
            "{},{},{:.4},{:.4},{}",
            m.subject_id,
            m.nights_used,
            m.mean_obt_d_minutes,
            m.mean_obt_m_linear,
            m.mean_obt_m_clock(),
        );
    }
    s
}

// ---------------------------------------------------------------------------
// Extraction stage
// ---------------------------------------------------------------------------

/// Everything the detection stages produce for a set of subjects.
pub struct ExtractOutputs {
    pub records: BTreeMap<String, Vec<ObtRecord>>,
    pub summaries: BTreeMap<String, SubjectObtSummary>,
    pub intervals_csv: String,
    pub days_csv: String,
    pub subjects_in: usize,
    pub subjects_without_nights: Vec<String>,
    pub filter_totals: CandidateFilterCounts,
    pub same_night_discarded: usize,
    pub nights_total: usize,
    pub valid_days: usize,
    pub total_days: usize,
}

impl ExtractOutputs {
    pub fn log_lines(&self) -> Vec<String> {
        let retained = self.subjects_in - self.subjects_without_nights.len();
        let f = &self.filter_totals;
        let mut lines = vec![
            format!(
                "stage extract: {} subjects = {retained} with nights + {} without qualifying nights",
                self.subjects_in,
                self.subjects_without_nights.len()
            ),
            format!(
                "stage extract: days: {} classified, {} valid",
                self.total_days, self.valid_days
            ),
            format!(
                "stage extract: candidates: {} intervals = {} kept + {} length + {} edge + \
                 {} adjacent + {} invalid-day + {} window",
                f.intervals_in,
                f.kept,
                f.outside_length_bounds,
                f.at_recording_edge,
                f.adjacent_nonwear,
                f.invalid_start_day,
                f.outside_window
            ),
            format!(
                "stage extract: nights selected: {} ({} same-night runner-ups discarded)",
                self.nights_total, self.same_night_discarded
            ),
        ];
        if !self.subjects_without_nights.is_empty() {
            lines.push(format!(
                "stage extract: subjects without nights: {}",
                self.subjects_without_nights.join(", ")
            ));
        }
        lines
    }
}

fn intervals_csv_row(s: &mut String, series: &EpochSeries, iv: &NonWearInterval) {
    let _ = writeln!(
        s,
        "{},{},{},{},{}",
        series.subject_id,
        clock::format_instant(iv.start_instant(series)),
        clock::format_instant(iv.end_instant(series)),
        iv.len(),
        iv.interrupted_minutes,
    );
}

fn days_csv_row(s: &mut String, subject_id: &str, d: &DayRecord) {
    let _ = writeln!(
        s,
        "{},{},{},{},{},{}",
        subject_id,
        d.date.format("%Y-%m-%d"),
        clock::weekday_label(d.weekday),
        d.coverage_minutes,
        d.nonwear_minutes,
        if d.valid { "yes" } else { "no" },
    );
}

/// Detect non-wear, classify days, and select one bedtime per night for
/// every series, with per-subject accounting. The assessment window starts
/// at midnight of each subject's first recorded day.
pub fn extract_all<'a>(
    series: impl Iterator<Item = &'a EpochSeries>,
    config: &PipelineConfig,
) -> Result<ExtractOutputs> {
    let nonwear_params = config.nonwear_params();
    let obt_params = config.obt_params();
    let mut out = ExtractOutputs {
        records: BTreeMap::new(),
        summaries: BTreeMap::new(),
        intervals_csv: String::from("subject_id,start,end,minutes,interrupted_minutes\n"),
        days_csv: String::from("subject_id,date,weekday,coverage_minutes,nonwear_minutes,valid\n"),
        subjects_in: 0,
        subjects_without_nights: Vec::new(),
        filter_totals: CandidateFilterCounts::default(),
        same_night_discarded: 0,
        nights_total: 0,
        valid_days: 0,
        total_days: 0,
    };
    for s in series {
        out.subjects_in += 1;
        let subject_err =
            |e: Error| Error::Record(format!("subject {}: {e}", s.subject_id));
        let window = AssessmentWindow::from_series_start(s, config.assessment_days)
            .map_err(subject_err)?;
        let intervals = detect_nonwear(s, &nonwear_params);
        let days = classify_days(s, &intervals, &window, config.max_nonwear_minutes)
            .map_err(subject_err)?;
        let (candidates, filter) = candidate_obts(s, &intervals, &days, &window, &obt_params);
        let (records, same_night) = select_obt_per_night(&s.subject_id, &candidates);

        for iv in &intervals {
            intervals_csv_row(&mut out.intervals_csv, s, iv);
        }
        for d in &days {
            days_csv_row(&mut out.days_csv, &s.subject_id, d);
        }
        out.total_days += days.len();
        out.valid_days += days.iter().filter(|d| d.valid).count();
        out.filter_totals.intervals_in += filter.intervals_in;
        out.filter_totals.outside_length_bounds += filter.outside_length_bounds;
        out.filter_totals.at_recording_edge += filter.at_recording_edge;
        out.filter_totals.adjacent_nonwear += filter.adjacent_nonwear;
        out.filter_totals.invalid_start_day += filter.invalid_start_day;
        out.filter_totals.outside_window += filter.outside_window;
        out.filter_totals.kept += filter.kept;
        out.same_night_discarded += same_night;
        out.nights_total += records.len();
        if records.is_empty() {
            out.subjects_without_nights.push(s.subject_id.clone());
        } else {
            let summary = summarize_subject(&records).map_err(subject_err)?;
            out.summaries.insert(s.subject_id.clone(), summary);
            out.records.insert(s.subject_id.clone(), records);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Regression stage
// ---------------------------------------------------------------------------

pub struct ModelStage {
    pub fits_d: Vec<DayModelFit>,
    pub fits_m: Vec<DayModelFit>,
    pub log: Vec<String>,
}

/// Fit the fourteen weekday models, skipping (and logging) frames with no
/// rows at all. A frame with rows but an unpopulated (sex, age group) cell
/// is an error: its saturated model is unidentifiable.
pub fn fit_weekday_models(
    cohort: &Cohort,
    summaries: &BTreeMap<String, SubjectObtSummary>,
    alpha: f64,
) -> Result<ModelStage> {
    let mut stage = ModelStage {
        fits_d: Vec::new(),
        fits_m: Vec::new(),
        log: Vec::new(),
    };
    for frame in build_design_frames(cohort, summaries) {
        let tag = format!(
            "model {} {}",
            frame.outcome.label(),
            clock::weekday_label(frame.weekday)
        );
        if frame.rows.is_empty() {
            stage.log.push(format!("{tag}: skipped (no rows)"));
            continue;
        }
        let fit = fit_day_model(&frame, alpha)?;
        stage.log.push(format!(
            "{tag}: n_rows={} df={} variance={}",
            fit.n_rows,
            fit.degrees_of_freedom,
            fit.variance_method.label()
        ));
        match frame.outcome {
            OutcomeKind::ObtD => stage.fits_d.push(fit),
            OutcomeKind::ObtM => stage.fits_m.push(fit),
        }
    }
    Ok(stage)
}

/// Coefficient table for one outcome's weekday fits. The reference-cell
/// intercept of a midpoint model renders as a clock time; every other
/// entry is a duration or contrast in hours:minutes.
pub fn coefficient_table_csv(fits: &[DayModelFit]) -> String {
    let mut s = String::from(
        "weekday,coefficient,estimate_minutes,se_minutes,p_value,significant,variance_method,rendered\n",
    );
    for fit in fits {
        for entry in fit.coefficient_entries() {
            let rendered = if fit.outcome == OutcomeKind::ObtM && entry.name == "g_F" {
                clock::render_clock(entry.estimate_minutes)
            } else {
                clock::render_hours_minutes(entry.estimate_minutes)
            };
            let _ = writeln!(
                s,
                "{},{},{:.4},{:.4},{:.6},{},{},{}",
                clock::weekday_label(fit.weekday),
                entry.name,
                entry.estimate_minutes,
                entry.se_minutes,
                entry.p_value,
                if entry.significant { "yes" } else { "no" },
                fit.variance_method.label(),
                rendered,
            );
        }
    }
    s
}

/// Fitted cell means (one row per weekday, age group, and sex).
pub fn fitted_table_csv(fits: &[DayModelFit]) -> String {
    let mut s =
        String::from("weekday,age_group,sex,fitted_minutes,se_minutes,rendered\n");
    for row in fitted_value_tables(fits) {
        let _ = writeln!(
            s,
            "{},{},{},{:.4},{:.4},{}",
            clock::weekday_label(row.weekday),
            row.age_group.label(),
            row.sex.label(),
            row.fitted_minutes,
            row.se_minutes,
            row.rendered,
        );
    }
    s
}

fn opt_pct(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

pub fn demographic_table_csv(cohort: &Cohort) -> String {
    let mut s = String::from("age_group,subjects,weighted_female_pct,weighted_male_pct\n");
    for row in demographic_table(cohort) {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            row.label,
            row.n_subjects,
            opt_pct(row.weighted_female_pct),
            opt_pct(row.weighted_male_pct),
        );
    }
    s
}

pub fn participation_table_csv(
    cohort: &Cohort,
    records: &BTreeMap<String, Vec<ObtRecord>>,
) -> String {
    let table = participation_table(cohort, records);
    let mut s = String::from("age_group");
    for wd in clock::WEEKDAYS {
        let label = clock::weekday_label(wd).to_ascii_lowercase();
        let _ = write!(s, ",{label}_nights,{label}_female_pct");
    }
    s.push_str(",all_nights,all_female_pct,subjects,subjects_female_pct\n");
    let cell_fields = |c: &crate::survey::ParticipationCell| {
        format!("{},{}", c.nights, opt_pct(c.female_pct()))
    };
    let subject_fields = |(n, female): (usize, usize)| {
        let pct = (n > 0).then(|| 100.0 * female as f64 / n as f64);
        format!("{n},{}", opt_pct(pct))
    };
    for group in AgeGroup::all() {
        let g = group.index();
        let _ = write!(s, "{}", group.label());
        for w in 0..7 {
            let _ = write!(s, ",{}", cell_fields(&table.cells[g][w]));
        }
        let _ = writeln!(
            s,
            ",{},{}",
            cell_fields(&table.group_total(g)),
            subject_fields(table.subjects[g])
        );
    }
    let _ = write!(s, "all");
    for w in 0..7 {
        let _ = write!(s, ",{}", cell_fields(&table.weekday_total(w)));
    }
    let _ = writeln!(
        s,
        ",{},{}",
        cell_fields(&table.overall()),
        subject_fields(table.subjects_overall())
    );
    s
}

pub fn comparison_table_csv(rows: &[ComparisonRow]) -> String {
    let mut s = String::from(
        "age_group,age_mid,sex,subjects,median_selfreport_sleep_minutes,\
         median_selfreport_onset_minutes,median_obt_d_minutes\n",
    );
    let opt_med = |v: Option<f64>| v.map(|x| format!("{x:.1}")).unwrap_or_default();
    for row in rows {
        let _ = writeln!(
            s,
            "{},{:.1},{},{},{},{},{}",
            row.age_group.label(),
            row.age_mid,
            row.sex.label(),
            row.n_subjects,
            opt_med(row.median_selfreport_sleep_minutes),
            opt_med(row.median_selfreport_onset_minutes),
            opt_med(row.median_obt_d_minutes),
        );
    }
    s
}

// ---------------------------------------------------------------------------
// Percentile-curve stage
// ---------------------------------------------------------------------------

/// Which nights feed a subject's curve observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NightSelection {
    /// Subject mean across all selected nights.
    AllNights,
    /// Mean across nights assigned to the given part of the week.
    Part(WeekPart),
    /// The night on one weekday (Sunday-first index).
    Weekday(usize),
}

impl NightSelection {
    pub fn file_suffix(self) -> String {
        match self {
            NightSelection::AllNights => String::new(),
            NightSelection::Part(p) => format!("_{}", p.label()),
            NightSelection::Weekday(w) => format!(
                "_{}",
                clock::weekday_label(clock::weekday_from_index(w)).to_ascii_lowercase()
            ),
        }
    }

    pub fn describe(self) -> String {
        match self {
            NightSelection::AllNights => "pooled".into(),
            NightSelection::Part(p) => p.label().into(),
            NightSelection::Weekday(w) => clock::weekday_label(clock::weekday_from_index(w))
                .to_ascii_lowercase(),
        }
    }
}

/// School-week versus weekend-eve nights. Sunday nights sit between the
/// two regimes and belong to neither part.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeekPart {
    MonThu,
    FriSat,
}

impl WeekPart {
    pub fn label(self) -> &'static str {
        match self {
            WeekPart::MonThu => "mon_thu",
            WeekPart::FriSat => "fri_sat",
        }
    }

    pub fn contains(self, weekday_index: usize) -> bool {
        match self {
            WeekPart::MonThu => (1..=4).contains(&weekday_index),
            WeekPart::FriSat => weekday_index == 5 || weekday_index == 6,
        }
    }
}

/// Shift applied to outcomes before curve fitting, so that midpoints (which
/// may be negative on the linear axis) become positive.
pub fn curve_axis_shift(outcome: OutcomeKind) -> f64 {
    match outcome {
        OutcomeKind::ObtD => 0.0,
        OutcomeKind::ObtM => 720.0,
    }
}

/// One observation per subject of the given sex: age against the selected
/// nights' outcome, carrying the analysis weight.
pub fn curve_observations(
    cohort: &Cohort,
    summaries: &BTreeMap<String, SubjectObtSummary>,
    outcome: OutcomeKind,
    sex: Sex,
    selection: NightSelection,
) -> Vec<LmsObservation> {
    let mut out = Vec::new();
    for (id, summary) in summaries {
        let Some(profile) = cohort.subjects.get(id) else {
            continue;
        };
        if profile.sex != sex || !(profile.weight > 0.0) {
            continue;
        }
        let feature = |f: &crate::obt::WeekdayFeatures| match outcome {
            OutcomeKind::ObtD => f.obt_d_minutes as f64,
            OutcomeKind::ObtM => f.obt_m_linear,
        };
        let y = match selection {
            NightSelection::AllNights => Some(match outcome {
                OutcomeKind::ObtD => summary.mean_obt_d_minutes,
                OutcomeKind::ObtM => summary.mean_obt_m_linear,
            }),
            NightSelection::Part(part) => {
                let values: Vec<f64> = summary
                    .per_weekday
                    .iter()
                    .filter(|(&w, _)| part.contains(w))
                    .map(|(_, f)| feature(f))
                    .collect();
                (!values.is_empty())
                    .then(|| values.iter().sum::<f64>() / values.len() as f64)
            }
            NightSelection::Weekday(w) => summary.per_weekday.get(&w).map(feature),
        };
        if let Some(y) = y {
            out.push(LmsObservation {
                x: profile.age_years as f64,
                y,
                weight: profile.weight,
            });
        }
    }
    out
}

/// Reference table of a fitted curve set on the monthly age grid.
pub fn curve_csv(set: &LmsCurveSet) -> Result<String> {
    let mut s = String::from("age,l,m,s,p5,p10,p25,p50,p75,p90,p95\n");
    for row in set.curve_table()? {
        let _ = write!(
            s,
            "{:.4},{:.6},{:.4},{:.6}",
            row.x,
            row.l,
            row.m - set.axis_shift,
            row.s
        );
        for p in row.percentiles {
            let _ = write!(s, ",{p:.4}");
        }
        s.push('\n');
    }
    Ok(s)
}

/// Sidecar describing a curve fit. `m` in the main table is reported on
/// the raw outcome axis (the shift removed); the sidecar records the shift.
pub fn curve_meta(
    set: &LmsCurveSet,
    outcome: OutcomeKind,
    sex: Sex,
    selection: NightSelection,
    config: &LmsConfig,
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "outcome = {}", outcome.label());
    let _ = writeln!(s, "sex = {}", sex.label());
    let _ = writeln!(s, "selection = {}", selection.describe());
    let _ = writeln!(s, "n_obs = {}", set.n_obs);
    let _ = writeln!(s, "axis_shift_minutes = {}", set.axis_shift);
    let _ = writeln!(s, "age_min = {:.4}", set.x_min);
    let _ = writeln!(s, "age_max = {:.4}", set.x_max);
    let _ = writeln!(s, "edf_l_target = {}", config.edf_l);
    let _ = writeln!(s, "edf_m_target = {}", config.edf_m);
    let _ = writeln!(s, "edf_s_target = {}", config.edf_s);
    let _ = writeln!(s, "edf_l = {:.6}", set.edf_l);
    let _ = writeln!(s, "edf_m = {:.6}", set.edf_m);
    let _ = writeln!(s, "edf_s = {:.6}", set.edf_s);
    let _ = writeln!(s, "iterations = {}", set.iterations);
    let _ = writeln!(s, "converged = {}", set.converged);
    let _ = writeln!(s, "deviance = {:.6}", set.deviance);
    s
}

/// Fit one curve per (sex, selection), skipping under-sized observation
/// sets with a log note. File names look like
/// `<prefix><outcome>_curve_<sex><selection>.csv`.
#[allow(clippy::too_many_arguments)]
fn fit_curve_family(
    bundle: &mut ReportBundle,
    log: &mut Vec<String>,
    cohort: &Cohort,
    summaries: &BTreeMap<String, SubjectObtSummary>,
    outcome: OutcomeKind,
    selections: &[NightSelection],
    prefix: &str,
    config: &LmsConfig,
) -> Result<()> {
    for &selection in selections {
        for sex in [Sex::Female, Sex::Male] {
            let tag = format!(
                "curve {} {} {}",
                outcome.label(),
                sex.label(),
                selection.describe()
            );
            let obs = curve_observations(cohort, summaries, outcome, sex, selection);
            if obs.len() < config.min_obs {
                log.push(format!(
                    "{tag}: skipped ({} observations, need {})",
                    obs.len(),
                    config.min_obs
                ));
                continue;
            }
            let set = fit_lms(&obs, config, curve_axis_shift(outcome))?;
            log.push(format!(
                "{tag}: n={} iterations={} converged={}",
                set.n_obs, set.iterations, set.converged
            ));
            if !set.converged {
                log.push(format!(
                    "{tag}: warning: not converged after {} iterations; last iterate reported",
                    set.iterations
                ));
            }
            let stem = format!(
                "{prefix}{}_curve_{}{}",
                outcome.file_label(),
                sex.label(),
                selection.file_suffix()
            );
            bundle.insert(format!("{stem}.csv"), curve_csv(&set)?);
            bundle.insert(
                format!("{stem}.meta.txt"),
                curve_meta(&set, outcome, sex, selection, config),
            );
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Report bundle
// ---------------------------------------------------------------------------

/// All output files of a run, assembled in memory and written atomically
/// enough for practical purposes: nothing reaches disk unless every stage
/// succeeded.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReportBundle {
    pub files: BTreeMap<String, String>,
}

impl ReportBundle {
    pub fn insert(&mut self, name: String, content: String) {
        self.files.insert(name, content);
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.files.get(name).map(String::as_str)
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        for (name, content) in &self.files {
            let path = dir.join(name);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, content)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Full run
// ---------------------------------------------------------------------------

pub struct IngestStage {
    pub cohort: Cohort,
    pub log: Vec<String>,
}

/// Parse and join the three inputs, logging checksums and conservation
/// counts (every subject entering a stage is retained or itemized).
pub fn ingest_stage(
    epochs_path: &Path,
    demographics_path: &Path,
    questionnaire_path: Option<&Path>,
    weight_scheme: WeightScheme,
) -> Result<IngestStage> {
    let mut log = Vec::new();
    // Log file names, not full paths: the bundle should be byte-identical
    // wherever the same inputs happen to live.
    let base = |p: &Path| {
        p.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string())
    };
    let epoch_bytes = fs::read(epochs_path)?;
    let demo_bytes = fs::read(demographics_path)?;
    log.push(format!(
        "input epochs: {} ({} bytes, sha256 {})",
        base(epochs_path),
        epoch_bytes.len(),
        sha256_hex(&epoch_bytes)
    ));
    log.push(format!(
        "input demographics: {} ({} bytes, sha256 {})",
        base(demographics_path),
        demo_bytes.len(),
        sha256_hex(&demo_bytes)
    ));
    let reports = match questionnaire_path {
        Some(path) => {
            let bytes = fs::read(path)?;
            log.push(format!(
                "input questionnaire: {} ({} bytes, sha256 {})",
                base(path),
                bytes.len(),
                sha256_hex(&bytes)
            ));
            ingest::parse_sleep_questionnaire(&path.display().to_string(), bytes.as_slice())?
        }
        None => {
            log.push("input questionnaire: none".into());
            BTreeMap::new()
        }
    };

    let epochs = ingest::parse_epochs(&epochs_path.display().to_string(), epoch_bytes.as_slice())?;
    let n_series_in = epochs.series.len() + epochs.dropped_flagged.len();
    log.push(format!(
        "stage ingest: epochs: {n_series_in} subjects = {} retained + {} dropped for device flags",
        epochs.series.len(),
        epochs.dropped_flagged.len()
    ));
    if !epochs.dropped_flagged.is_empty() {
        log.push(format!(
            "stage ingest: flagged subjects: {}",
            epochs.dropped_flagged.join(", ")
        ));
    }

    let demo =
        ingest::parse_demographics(&demographics_path.display().to_string(), demo_bytes.as_slice())?;
    let under = demo
        .excluded
        .iter()
        .filter(|e| e.reason.label() == "age under 6")
        .count();
    let over = demo.excluded.len() - under;
    log.push(format!(
        "stage ingest: demographics: {} subjects = {} retained + {under} age under 6 + {over} age over 84",
        demo.profiles.len() + demo.excluded.len(),
        demo.profiles.len()
    ));

    let n_profiles = demo.profiles.len();
    let n_series = epochs.series.len();
    let (cohort, join) = ingest::join_cohort(demo.profiles, epochs.series, &reports, weight_scheme);
    log.push(format!(
        "stage ingest: join: {n_profiles} profiles = {} matched + {} without series; \
         {n_series} series = {} matched + {} without profile",
        join.matched, join.profiles_without_series, join.matched, join.series_without_profile
    ));
    log.push(format!(
        "stage ingest: questionnaire: {} reports = {} attached + {} unmatched",
        reports.len(),
        join.reports_attached,
        join.reports_unmatched
    ));
    Ok(IngestStage { cohort, log })
}

/// Run every stage and return the full bundle. See the module docs for the
/// file inventory.
pub fn run_pipeline(
    epochs_path: &Path,
    demographics_path: &Path,
    questionnaire_path: Option<&Path>,
    config: &PipelineConfig,
) -> Result<ReportBundle> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    let mut bundle = ReportBundle::default();
    let mut log: Vec<String> = Vec::new();

    let ingest_out = ingest_stage(
        epochs_path,
        demographics_path,
        questionnaire_path,
        config.weight_scheme,
    )
    .map_err(|e| e.in_stage("ingest"))?;
    log.extend(ingest_out.log);
    let cohort = ingest_out.cohort;

    let extract = extract_all(cohort.series.values(), config).map_err(|e| e.in_stage("extract"))?;
    log.extend(extract.log_lines());

    let models = fit_weekday_models(&cohort, &extract.summaries, config.alpha)
        .map_err(|e| e.in_stage("models"))?;
    log.extend(models.log);

    let comparison =
        self_report_comparison(&cohort, &extract.summaries).map_err(|e| e.in_stage("compare"))?;
    let with_data = comparison
        .iter()
        .filter(|r| r.median_obt_d_minutes.is_some())
        .count();
    log.push(format!(
        "stage compare: {} cells, {with_data} with both self-report and nights",
        comparison.len()
    ));

    let lms_config = config.lms_config();
    fit_curve_family(
        &mut bundle,
        &mut log,
        &cohort,
        &extract.summaries,
        OutcomeKind::ObtD,
        &[NightSelection::AllNights],
        "figures/figure3_",
        &lms_config,
    )
    .map_err(|e| e.in_stage("curves"))?;
    fit_curve_family(
        &mut bundle,
        &mut log,
        &cohort,
        &extract.summaries,
        OutcomeKind::ObtM,
        &[NightSelection::AllNights],
        "figures/figure4_",
        &lms_config,
    )
    .map_err(|e| e.in_stage("curves"))?;
    fit_curve_family(
        &mut bundle,
        &mut log,
        &cohort,
        &extract.summaries,
        OutcomeKind::ObtM,
        &[
            NightSelection::Part(WeekPart::MonThu),
            NightSelection::Part(WeekPart::FriSat),
        ],
        "figures/figure5_",
        &lms_config,
    )
    .map_err(|e| e.in_stage("curves"))?;

    bundle.insert("config.txt".into(), config.to_config_string());
    bundle.insert("data/subjects.csv".into(), subjects_csv(&cohort.subjects));
    bundle.insert(
        "data/obt_records.csv".into(),
        obt_records_csv(&extract.records),
    );
    bundle.insert(
        "data/subject_summaries.csv".into(),
        subject_summaries_csv(&extract.summaries),
    );
    bundle.insert(
        "data/nonwear_intervals.csv".into(),
        extract.intervals_csv.clone(),
    );
    bundle.insert("data/day_records.csv".into(), extract.days_csv.clone());
    bundle.insert(
        "tables/table1_demographics.csv".into(),
        demographic_table_csv(&cohort),
    );
    bundle.insert(
        "tables/table2_obt_d_coefficients.csv".into(),
        coefficient_table_csv(&models.fits_d),
    );
    bundle.insert(
        "tables/table3_obt_d_fitted.csv".into(),
        fitted_table_csv(&models.fits_d),
    );
    bundle.insert(
        "tables/table4_obt_m_coefficients.csv".into(),
        coefficient_table_csv(&models.fits_m),
    );
    bundle.insert(
        "tables/table5_obt_m_fitted.csv".into(),
        fitted_table_csv(&models.fits_m),
    );
    bundle.insert(
        "tables/tableA1_participation.csv".into(),
        participation_table_csv(&cohort, &extract.records),
    );
    bundle.insert(
        "figures/figure2_selfreport_comparison.csv".into(),
        comparison_table_csv(&comparison),
    );

    log.push(format!("run complete: {} files", bundle.files.len() + 1));
    let mut log_text = String::new();
    for line in &log {
        let _ = writeln!(log_text, "{line}");
    }
    bundle.insert("run.log".into(), log_text);
    Ok(bundle)
}
