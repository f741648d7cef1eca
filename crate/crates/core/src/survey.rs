//! Survey-weighted statistics: interpolated weighted quantiles, the
//! saturated sex-by-age-group day-of-week regression, and the summary
//! tables built from it.
//!
//! The regression is weighted least squares on the fully interacted dummy
//! design — intercept (reference females 17-22), a male shift, twelve
//! age-group shifts, and twelve sex-by-group interactions, 26 coefficients
//! in all. Because the design is saturated, every fitted cell value equals
//! that cell's weighted outcome mean; the fit is still performed as an
//! honest linear solve so that standard errors come from the same machinery
//! regardless of weighting. Variance is design-based Taylor linearization
//! over stratum/PSU sums when design columns are present, and a
//! heteroskedasticity-robust weighted sandwich (each row its own sampling
//! unit) otherwise.

use std::collections::BTreeMap;

use chrono::Weekday;
use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::clock::{self, WEEKDAYS};
use crate::error::{Error, Result};
use crate::ingest::{AgeGroup, Cohort, Sex, AGE_GROUP_BOUNDS, REFERENCE_AGE_GROUP};
use crate::obt::{ObtRecord, SubjectObtSummary};

pub const N_AGE_GROUPS: usize = AGE_GROUP_BOUNDS.len();
/// Coefficient count of the saturated model: intercept, male shift, and
/// per-non-reference-group main effects and interactions.
pub const N_COEFFICIENTS: usize = 2 + 2 * (N_AGE_GROUPS - 1);

// ---------------------------------------------------------------------------
// Weighted quantiles
// ---------------------------------------------------------------------------

/// Interpolated inverse of the weighted empirical CDF.
///
/// Sorting values ascending with cumulative weights `c_k`, the estimate is
/// the first value whose cumulative weight reaches `p` of the total; when
/// `p` lands exactly on a step boundary the two adjacent order statistics
/// are averaged. With unit weights this reproduces the textbook sample
/// median (`[1,2,3]` at p=0.5 gives 2, `[1,2,3,4]` gives 2.5).
pub fn weighted_quantile(values: &[f64], weights: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Record("weighted quantile of empty input".into()));
    }
    if values.len() != weights.len() {
        return Err(Error::Record(format!(
            "quantile inputs disagree: {} values, {} weights",
            values.len(),
            weights.len()
        )));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Record(format!("quantile level {p} outside [0,1]")));
    }
    for (&v, &w) in values.iter().zip(weights) {
        if !v.is_finite() {
            return Err(Error::Record(format!("non-finite value {v}")));
        }
        if !w.is_finite() || w <= 0.0 {
            return Err(Error::Record(format!("non-positive weight {w}")));
        }
    }

    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .unwrap()
            .then(weights[a].partial_cmp(&weights[b]).unwrap())
    });
    let total: f64 = weights.iter().sum();
    let target = p * total;
    let boundary_tol = 1e-12 * total;

    let mut cum = 0.0;
    for (pos, &i) in order.iter().enumerate() {
        cum += weights[i];
        if cum + boundary_tol >= target {
            // Exactly on the step boundary: interpolate halfway to the next
            // order statistic.
            if (cum - target).abs() <= boundary_tol && pos + 1 < order.len() {
                return Ok((values[i] + values[order[pos + 1]]) / 2.0);
            }
            return Ok(values[i]);
        }
    }
    Ok(values[*order.last().unwrap()])
}

// ---------------------------------------------------------------------------
// Design frames
// ---------------------------------------------------------------------------

/// Which extracted feature a model explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeKind {
    /// OBT-D, minutes of duration.
    ObtD,
    /// OBT-M, signed linear midpoint minutes.
    ObtM,
}

impl OutcomeKind {
    pub fn label(self) -> &'static str {
        match self {
            OutcomeKind::ObtD => "OBT-D",
            OutcomeKind::ObtM => "OBT-M",
        }
    }

    pub fn file_label(self) -> &'static str {
        match self {
            OutcomeKind::ObtD => "obt_d",
            OutcomeKind::ObtM => "obt_m",
        }
    }

    /// Table rendering of a fitted value: durations as hours:minutes,
    /// midpoints as clock times.
    pub fn render(self, minutes: f64) -> String {
        match self {
            OutcomeKind::ObtD => clock::render_hours_minutes(minutes),
            OutcomeKind::ObtM => clock::render_clock(minutes),
        }
    }
}

/// One observation of one weekday model.
#[derive(Debug, Clone)]
pub struct DesignRow {
    pub subject_id: String,
    pub value: f64,
    pub sex: Sex,
    pub age_group: AgeGroup,
    pub weight: f64,
    pub stratum: Option<i64>,
    pub psu: Option<i64>,
}

/// All rows of one (outcome, weekday) model.
#[derive(Debug, Clone)]
pub struct DesignFrame {
    pub outcome: OutcomeKind,
    pub weekday: Weekday,
    pub rows: Vec<DesignRow>,
}

/// Build the fourteen design frames (two outcomes by seven weekdays) from
/// subject summaries. Each subject contributes at most one row per weekday:
/// the chronologically first record on that weekday.
pub fn build_design_frames(
    cohort: &Cohort,
    summaries: &BTreeMap<String, SubjectObtSummary>,
) -> Vec<DesignFrame> {
    let mut frames = Vec::new();
    for outcome in [OutcomeKind::ObtD, OutcomeKind::ObtM] {
        for weekday in WEEKDAYS {
            let wd = clock::weekday_index(weekday);
            let mut rows = Vec::new();
            for (id, summary) in summaries {
                let Some(profile) = cohort.subjects.get(id) else {
                    continue;
                };
                let Some(features) = summary.per_weekday.get(&wd) else {
                    continue;
                };
                let value = match outcome {
                    OutcomeKind::ObtD => features.obt_d_minutes as f64,
                    OutcomeKind::ObtM => features.obt_m_linear,
                };
                rows.push(DesignRow {
                    subject_id: id.clone(),
                    value,
                    sex: profile.sex,
                    age_group: profile.age_group,
                    weight: profile.weight,
                    stratum: profile.stratum,
                    psu: profile.psu,
                });
            }
            frames.push(DesignFrame {
                outcome,
                weekday,
                rows,
            });
        }
    }
    frames
}

// ---------------------------------------------------------------------------
// Saturated weekday model
// ---------------------------------------------------------------------------

/// Slot of a non-reference age group among the dummy columns.
fn nonref_slot(group: usize) -> Option<usize> {
    match group.cmp(&REFERENCE_AGE_GROUP) {
        std::cmp::Ordering::Less => Some(group),
        std::cmp::Ordering::Equal => None,
        std::cmp::Ordering::Greater => Some(group - 1),
    }
}

/// Nonzero design columns for a cell (at most four).
fn active_columns(sex: Sex, group: usize) -> Vec<usize> {
    let mut cols = vec![0usize];
    if sex == Sex::Male {
        cols.push(1);
    }
    if let Some(slot) = nonref_slot(group) {
        cols.push(2 + slot);
        if sex == Sex::Male {
            cols.push(2 + (N_AGE_GROUPS - 1) + slot);
        }
    }
    cols
}

/// Human-readable coefficient names, in column order.
pub fn coefficient_names() -> Vec<String> {
    let mut names = vec!["g_F".to_string(), "g_M".to_string()];
    for g in (0..N_AGE_GROUPS).filter(|&g| g != REFERENCE_AGE_GROUP) {
        names.push(format!("a_{}", AgeGroup::from_index(g).label()));
    }
    for g in (0..N_AGE_GROUPS).filter(|&g| g != REFERENCE_AGE_GROUP) {
        names.push(format!("ga_{}", AgeGroup::from_index(g).label()));
    }
    names
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceMethod {
    /// Taylor-linearized stratum/PSU sandwich.
    DesignBased,
    /// Heteroskedasticity-robust weighted sandwich, each row its own unit.
    WeightRobust,
}

impl VarianceMethod {
    pub fn label(self) -> &'static str {
        match self {
            VarianceMethod::DesignBased => "design-based",
            VarianceMethod::WeightRobust => "weight-robust",
        }
    }
}

/// A fitted weekday model.
#[derive(Debug, Clone)]
pub struct DayModelFit {
    pub outcome: OutcomeKind,
    pub weekday: Weekday,
    pub coefficients: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub n_rows: usize,
    pub degrees_of_freedom: f64,
    pub variance_method: VarianceMethod,
    pub alpha: f64,
}

/// One row of a coefficient table.
#[derive(Debug, Clone)]
pub struct CoefficientEntry {
    pub name: String,
    pub estimate_minutes: f64,
    pub se_minutes: f64,
    pub p_value: f64,
    pub significant: bool,
}

impl DayModelFit {
    /// Fitted minutes for a (sex, age group) cell: the coefficient sum,
    /// which for this saturated design equals the cell's weighted mean.
    pub fn fitted_cell(&self, sex: Sex, group: AgeGroup) -> f64 {
        active_columns(sex, group.index())
            .iter()
            .map(|&j| self.coefficients[j])
            .sum()
    }

    /// Standard error of a fitted cell value.
    pub fn fitted_cell_se(&self, sex: Sex, group: AgeGroup) -> f64 {
        let cols = active_columns(sex, group.index());
        let mut var = 0.0;
        for &j in &cols {
            for &k in &cols {
                var += self.covariance[(j, k)];
            }
        }
        var.max(0.0).sqrt()
    }

    pub fn coefficient_entries(&self) -> Vec<CoefficientEntry> {
        let names = coefficient_names();
        (0..N_COEFFICIENTS)
            .map(|j| {
                let estimate = self.coefficients[j];
                let se = self.covariance[(j, j)].max(0.0).sqrt();
                let p = self.p_value(estimate, se);
                CoefficientEntry {
                    name: names[j].clone(),
                    estimate_minutes: estimate,
                    se_minutes: se,
                    p_value: p,
                    significant: p < self.alpha,
                }
            })
            .collect()
    }

    fn p_value(&self, estimate: f64, se: f64) -> f64 {
        if se <= 0.0 {
            return if estimate.abs() < 1e-12 { 1.0 } else { 0.0 };
        }
        let t = (estimate / se).abs();
        let df = self.degrees_of_freedom.max(1.0);
        let dist = StudentsT::new(0.0, 1.0, df).expect("valid t distribution");
        2.0 * (1.0 - dist.cdf(t))
    }
}

/// Fit the saturated weekday model by weighted least squares.
///
/// Every (sex, age group) cell must contain at least one row; an empty cell
/// leaves its coefficient unidentified and is a model error naming the cell.
pub fn fit_day_model(frame: &DesignFrame, alpha: f64) -> Result<DayModelFit> {
    let rows = &frame.rows;
    if rows.is_empty() {
        return Err(Error::Model(format!(
            "{} {}: no rows",
            frame.outcome.label(),
            clock::weekday_label(frame.weekday)
        )));
    }
    let mut cell_counts = [[0usize; 2]; N_AGE_GROUPS];
    for row in rows {
        if !row.value.is_finite() {
            return Err(Error::Model(format!("non-finite outcome {}", row.value)));
        }
        if !row.weight.is_finite() || row.weight <= 0.0 {
            return Err(Error::Model(format!(
                "subject {}: non-positive weight {}",
                row.subject_id, row.weight
            )));
        }
        let s = if row.sex == Sex::Male { 1 } else { 0 };
        cell_counts[row.age_group.index()][s] += 1;
    }
    for g in 0..N_AGE_GROUPS {
        for (s, sex) in [Sex::Female, Sex::Male].into_iter().enumerate() {
            if cell_counts[g][s] == 0 {
                return Err(Error::Model(format!(
                    "{} {}: empty cell sex={} age_group={}",
                    frame.outcome.label(),
                    clock::weekday_label(frame.weekday),
                    sex.label(),
                    AgeGroup::from_index(g).label()
                )));
            }
        }
    }

    // Normal equations, accumulated over the (at most four) active columns
    // per row.
    let mut a = DMatrix::<f64>::zeros(N_COEFFICIENTS, N_COEFFICIENTS);
    let mut b = DVector::<f64>::zeros(N_COEFFICIENTS);
    let actives: Vec<Vec<usize>> = rows
        .iter()
        .map(|r| active_columns(r.sex, r.age_group.index()))
        .collect();
    for (row, cols) in rows.iter().zip(&actives) {
        for &j in cols {
            for &k in cols {
                a[(j, k)] += row.weight;
            }
            b[j] += row.weight * row.value;
        }
    }

    let chol = nalgebra::Cholesky::new(a.clone()).ok_or_else(|| {
        Error::Model(format!(
            "{} {}: singular design",
            frame.outcome.label(),
            clock::weekday_label(frame.weekday)
        ))
    })?;
    let mut beta = chol.solve(&b);
    // One round of iterative refinement keeps the saturated-model identity
    // (fitted cell == weighted cell mean) tight at the 1e-10 level.
    let residual_b = &b - &a * &beta;
    beta += chol.solve(&residual_b);

    // Scores per row, summed into sampling units.
    let score = |row: &DesignRow, cols: &[usize]| -> (f64, Vec<usize>) {
        let fitted: f64 = cols.iter().map(|&j| beta[j]).sum();
        (row.weight * (row.value - fitted), cols.to_vec())
    };

    let design_complete = rows.iter().all(|r| r.stratum.is_some() && r.psu.is_some());
    let variance_method = if design_complete {
        VarianceMethod::DesignBased
    } else {
        VarianceMethod::WeightRobust
    };

    // stratum -> psu -> summed score vector
    let mut strata: BTreeMap<i64, BTreeMap<i64, DVector<f64>>> = BTreeMap::new();
    for (i, (row, cols)) in rows.iter().zip(&actives).enumerate() {
        let (h, c) = if design_complete {
            (row.stratum.unwrap(), row.psu.unwrap())
        } else {
            (0, i as i64)
        };
        let z = strata
            .entry(h)
            .or_default()
            .entry(c)
            .or_insert_with(|| DVector::zeros(N_COEFFICIENTS));
        let (u, cols) = score(row, cols);
        for j in cols {
            z[j] += u;
        }
    }

    let mut g = DMatrix::<f64>::zeros(N_COEFFICIENTS, N_COEFFICIENTS);
    let mut total_psus = 0usize;
    for units in strata.values() {
        let n_h = units.len();
        total_psus += n_h;
        if n_h < 2 {
            // A singleton sampling unit carries no estimable within-stratum
            // variance; it contributes nothing.
            continue;
        }
        let mut mean = DVector::<f64>::zeros(N_COEFFICIENTS);
        for z in units.values() {
            mean += z;
        }
        mean /= n_h as f64;
        let factor = n_h as f64 / (n_h as f64 - 1.0);
        for z in units.values() {
            let d = z - &mean;
            g.ger(factor, &d, &d, 1.0);
        }
    }

    let a_inv = chol.inverse();
    let covariance = &a_inv * &g * &a_inv;
    let degrees_of_freedom = (total_psus as f64 - strata.len() as f64).max(1.0);

    Ok(DayModelFit {
        outcome: frame.outcome,
        weekday: frame.weekday,
        coefficients: beta,
        covariance,
        n_rows: rows.len(),
        degrees_of_freedom,
        variance_method,
        alpha,
    })
}

// ---------------------------------------------------------------------------
// Fitted-value tables
// ---------------------------------------------------------------------------

/// One cell of a fitted-value table (per weekday, age group, and sex).
#[derive(Debug, Clone)]
pub struct FittedCellRow {
    pub outcome: OutcomeKind,
    pub weekday: Weekday,
    pub age_group: AgeGroup,
    pub sex: Sex,
    pub fitted_minutes: f64,
    pub se_minutes: f64,
    /// Clock or hours:minutes rendering with the rounded SE in brackets,
    /// e.g. "9:25(08)".
    pub rendered: String,
}

/// Expand fits into per-cell rows, ordered weekday, then age group, then
/// sex (female first).
pub fn fitted_value_tables(fits: &[DayModelFit]) -> Vec<FittedCellRow> {
    let mut out = Vec::new();
    for fit in fits {
        for group in AgeGroup::all() {
            for sex in [Sex::Female, Sex::Male] {
                let fitted = fit.fitted_cell(sex, group);
                let se = fit.fitted_cell_se(sex, group);
                let rendered = format!("{}({:02})", fit.outcome.render(fitted), se.round() as i64);
                out.push(FittedCellRow {
                    outcome: fit.outcome,
                    weekday: fit.weekday,
                    age_group: group,
                    sex,
                    fitted_minutes: fitted,
                    se_minutes: se,
                    rendered,
                });
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Self-report comparison
// ---------------------------------------------------------------------------

/// Minimum age answering the sleep questionnaire; younger subjects are not
/// eligible respondents and never enter the comparison.
pub const SELF_REPORT_MIN_AGE: u32 = 16;

/// Weighted medians of self-reported and objective sleep per (age group,
/// sex) bin, among subjects carrying both kinds of data.
#[derive(Debug, Clone)]
pub struct ComparisonRow {
    pub age_group: AgeGroup,
    pub sex: Sex,
    pub age_mid: f64,
    pub n_subjects: usize,
    pub median_selfreport_sleep_minutes: Option<f64>,
    pub median_selfreport_onset_minutes: Option<f64>,
    pub median_obt_d_minutes: Option<f64>,
}

/// Compare self-reported sleep to extracted bedtime durations. Subjects
/// need a self-report, at least one bedtime record, and respondent age;
/// bins with no such subjects still appear with absent medians.
pub fn self_report_comparison(
    cohort: &Cohort,
    summaries: &BTreeMap<String, SubjectObtSummary>,
) -> Result<Vec<ComparisonRow>> {
    let mut out = Vec::new();
    for group in AgeGroup::all() {
        for sex in [Sex::Female, Sex::Male] {
            let mut hours: Vec<(f64, f64)> = Vec::new();
            let mut onset: Vec<(f64, f64)> = Vec::new();
            let mut obt_d: Vec<(f64, f64)> = Vec::new();
            let mut n = 0usize;
            for (id, profile) in &cohort.subjects {
                if profile.age_group != group
                    || profile.sex != sex
                    || profile.age_years < SELF_REPORT_MIN_AGE
                {
                    continue;
                }
                let Some(report) = profile.self_report else {
                    continue;
                };
                let Some(summary) = summaries.get(id) else {
                    continue;
                };
                n += 1;
                if let Some(h) = report.sleep_hours {
                    hours.push((f64::from(h) * 60.0, profile.weight));
                }
                if let Some(m) = report.onset_minutes {
                    onset.push((f64::from(m), profile.weight));
                }
                obt_d.push((summary.mean_obt_d_minutes, profile.weight));
            }
            let median = |pairs: &[(f64, f64)]| -> Result<Option<f64>> {
                if pairs.is_empty() {
                    return Ok(None);
                }
                let (v, w): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
                weighted_quantile(&v, &w, 0.5).map(Some)
            };
            out.push(ComparisonRow {
                age_group: group,
                sex,
                age_mid: group.midpoint(),
                n_subjects: n,
                median_selfreport_sleep_minutes: median(&hours)?,
                median_selfreport_onset_minutes: median(&onset)?,
                median_obt_d_minutes: median(&obt_d)?,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Participation and demographic tables
// ---------------------------------------------------------------------------

/// Raw (unweighted) participation counts: analyzed nights per age group and
/// weekday, with the share contributed by female subjects, plus distinct
/// subjects per group.
#[derive(Debug, Clone, Copy, Default)]
pub struct ParticipationCell {
    pub nights: usize,
    pub female_nights: usize,
}

impl ParticipationCell {
    pub fn female_pct(&self) -> Option<f64> {
        (self.nights > 0).then(|| 100.0 * self.female_nights as f64 / self.nights as f64)
    }
}

#[derive(Debug, Clone)]
pub struct ParticipationTable {
    /// `cells[group][weekday]`.
    pub cells: Vec<[ParticipationCell; 7]>,
    /// Distinct subjects with at least one analyzed night, per group:
    /// (subjects, female subjects).
    pub subjects: Vec<(usize, usize)>,
}

impl ParticipationTable {
    pub fn group_total(&self, group: usize) -> ParticipationCell {
        let mut t = ParticipationCell::default();
        for c in &self.cells[group] {
            t.nights += c.nights;
            t.female_nights += c.female_nights;
        }
        t
    }

    pub fn weekday_total(&self, weekday: usize) -> ParticipationCell {
        let mut t = ParticipationCell::default();
        for g in &self.cells {
            t.nights += g[weekday].nights;
            t.female_nights += g[weekday].female_nights;
        }
        t
    }

    pub fn overall(&self) -> ParticipationCell {
        let mut t = ParticipationCell::default();
        for w in 0..7 {
            let c = self.weekday_total(w);
            t.nights += c.nights;
            t.female_nights += c.female_nights;
        }
        t
    }

    pub fn subjects_overall(&self) -> (usize, usize) {
        self.subjects
            .iter()
            .fold((0, 0), |(a, b), &(c, d)| (a + c, b + d))
    }
}

/// Count analyzed nights per age group and weekday.
pub fn participation_table(
    cohort: &Cohort,
    records: &BTreeMap<String, Vec<ObtRecord>>,
) -> ParticipationTable {
    let mut cells = vec![[ParticipationCell::default(); 7]; N_AGE_GROUPS];
    let mut subjects = vec![(0usize, 0usize); N_AGE_GROUPS];
    for (id, recs) in records {
        let Some(profile) = cohort.subjects.get(id) else {
            continue;
        };
        if recs.is_empty() {
            continue;
        }
        let g = profile.age_group.index();
        subjects[g].0 += 1;
        if profile.sex == Sex::Female {
            subjects[g].1 += 1;
        }
        for r in recs {
            let cell = &mut cells[g][clock::weekday_index(r.assigned_weekday)];
            cell.nights += 1;
            if profile.sex == Sex::Female {
                cell.female_nights += 1;
            }
        }
    }
    ParticipationTable { cells, subjects }
}

/// Weighted sex shares per age group (plus subject counts).
#[derive(Debug, Clone)]
pub struct DemographicRow {
    pub label: String,
    pub n_subjects: usize,
    pub weighted_male_pct: Option<f64>,
    pub weighted_female_pct: Option<f64>,
}

/// Table of weighted sex composition per age group, with an overall row
/// appended.
pub fn demographic_table(cohort: &Cohort) -> Vec<DemographicRow> {
    let mut rows = Vec::new();
    let mut make_row = |label: String, filter: &dyn Fn(&crate::ingest::SubjectProfile) -> bool| {
        let mut n = 0usize;
        let mut w_total = 0.0;
        let mut w_male = 0.0;
        for p in cohort.subjects.values().filter(|p| filter(p)) {
            n += 1;
            w_total += p.weight;
            if p.sex == Sex::Male {
                w_male += p.weight;
            }
        }
        let male_pct = (w_total > 0.0).then(|| 100.0 * w_male / w_total);
        rows.push(DemographicRow {
            label,
            n_subjects: n,
            weighted_male_pct: male_pct,
            weighted_female_pct: male_pct.map(|m| 100.0 - m),
        });
    };
    for group in AgeGroup::all() {
        make_row(group.label(), &move |p| p.age_group == group);
    }
    make_row("all".to_string(), &|_| true);
    rows
}
