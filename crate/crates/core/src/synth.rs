//! Synthetic cohort generator with planted ground truth.
//!
//! Each synthetic subject wears the device for seven midnight-aligned
//! days and sleeps six nights (evening of day k into the morning of day
//! k+1, k = 0..5; a seventh night would hit the recording edge and be
//! unextractable). Planted nights are zero-count spans; all other minutes
//! carry active counts, so the detector should find exactly the planted
//! spans.
//! Two clamps guarantee that every generated day stays analyzable:
//! a night may start no earlier than 23:30 (head at most 30 minutes) and
//! must end by 9:29 (tail at most 569 minutes), so one day's tail plus the
//! next night's head never reaches the 600-minute invalid-day cutoff, and
//! every night ends before noon and is therefore assigned to the evening's
//! date.
//!
//! Demographics rotate round-robin through age groups, sexes, start
//! weekdays, and sampling strata so that modest cohorts already populate
//! every regression cell.

use std::io::Write as IoWrite;
use std::path::Path;

use chrono::{Datelike, NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clock::{self, MINUTES_PER_DAY};
use crate::error::{Error, Result};
use crate::ingest::{DeviceFlags, EpochSeries, Sex, AGE_GROUP_BOUNDS};

/// Recording length per subject, in days.
pub const RECORDING_DAYS: usize = 7;
/// Planted nights per subject (one per evening except the last day).
pub const NIGHTS_PER_SUBJECT: usize = 6;
/// Latest allowed head: a night starts at 23:30 or later.
pub const MAX_HEAD_MINUTES: i64 = 30;
/// Latest allowed end: 9:29 the next morning.
pub const MAX_TAIL_MINUTES: i64 = 569;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub seed: u64,
    /// Mean midpoint (minutes after midnight) per age group.
    pub chronotype_means: [f64; 13],
    pub chronotype_sd: f64,
    /// Added to the midpoint according to the assigned night's weekday
    /// (Sunday first).
    pub weekday_delay: [f64; 7],
    pub time_in_bed_mean: f64,
    pub time_in_bed_sd: f64,
    /// Chance that a night is spent wearing the device (low nonzero
    /// counts), which hides it from the detector.
    pub night_corruption_prob: f64,
    /// Chance per day of an afternoon device-off block.
    pub daytime_removal_prob: f64,
    pub daytime_removal_minutes: u32,
    /// First subject's first recorded day; later subjects rotate weekdays.
    pub start_date: NaiveDate,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let mut chronotype_means = [0.0; 13];
        for (g, slot) in chronotype_means.iter_mut().enumerate() {
            // mild age trend: midpoints drift earlier with age. Kept well
            // clear of both generator clamps (start >= 23:30, end <= 9:29)
            // so clamping cannot bias planted midpoints noticeably.
            *slot = 240.0 - g as f64;
        }
        SynthSpec {
            n_subjects: 500,
            seed: 7,
            chronotype_means,
            chronotype_sd: 18.0,
            weekday_delay: [0.0; 7],
            time_in_bed_mean: 420.0,
            time_in_bed_sd: 15.0,
            night_corruption_prob: 0.0,
            daytime_removal_prob: 0.0,
            daytime_removal_minutes: 90,
            start_date: match NaiveDate::from_ymd_opt(2003, 6, 1) {
                Some(d) => d,
                None => unreachable!(),
            },
        }
    }
}

/// One planted night.
#[derive(Debug, Clone)]
pub struct TruthNight {
    pub subject_id: String,
    pub assigned_date: NaiveDate,
    pub weekday_index: usize,
    pub start_instant: NaiveDateTime,
    pub duration_minutes: i64,
    /// Midpoint on the linear axis anchored at the midnight ending the
    /// assigned night (half-integral when the duration is odd).
    pub midpoint_linear: f64,
    /// True when the night was generated worn-in-bed and is not expected
    /// to be detected.
    pub corrupted: bool,
}

/// Demographics of one synthetic subject.
#[derive(Debug, Clone)]
pub struct SynthSubject {
    pub subject_id: String,
    pub age_years: u32,
    pub sex: Sex,
    pub weight: f64,
    pub stratum: i64,
    pub psu: i64,
    pub sleep_hours: Option<u16>,
    pub onset_minutes: Option<u16>,
}

#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub subjects: Vec<SynthSubject>,
    pub series: Vec<EpochSeries>,
    pub truth: Vec<TruthNight>,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(1e-12..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generate a cohort with planted nights.
pub fn generate(spec: &SynthSpec) -> Result<SynthCohort> {
    if spec.n_subjects == 0 {
        return Err(Error::Config("cohort size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&spec.night_corruption_prob)
        || !(0.0..=1.0).contains(&spec.daytime_removal_prob)
    {
        return Err(Error::Config("probabilities must lie in [0,1]".into()));
    }
    if spec.time_in_bed_mean < 330.0 || spec.time_in_bed_mean > 510.0 {
        return Err(Error::Config(format!(
            "time in bed mean {} outside the generated range [330, 510]",
            spec.time_in_bed_mean
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut subjects = Vec::with_capacity(spec.n_subjects);
    let mut series = Vec::with_capacity(spec.n_subjects);
    let mut truth = Vec::new();

    let total_minutes = RECORDING_DAYS * MINUTES_PER_DAY as usize;

    for i in 0..spec.n_subjects {
        let subject_id = format!("SYN{:05}", i + 1);
        let group = i % AGE_GROUP_BOUNDS.len();
        let sex = if (i / AGE_GROUP_BOUNDS.len()) % 2 == 0 {
            Sex::Female
        } else {
            Sex::Male
        };
        let (lo, hi) = AGE_GROUP_BOUNDS[group];
        let age_years = rng.random_range(lo..=hi);
        let weight = rng.random_range(0.5..2.5);
        let stratum = 1 + (i % 15) as i64;
        let psu = 1 + ((i / 15) % 2) as i64;

        let start_date = spec.start_date + chrono::Days::new((i % 7) as u64);
        let start_instant = start_date.and_hms_opt(0, 0, 0).expect("midnight");

        // Active wear everywhere, then carve the nights out.
        let mut counts: Vec<u32> = (0..total_minutes)
            .map(|_| rng.random_range(200..=3000))
            .collect();

        let mut planted_mean_duration = 0.0;
        for k in 0..NIGHTS_PER_SUBJECT {
            let assigned_date = start_date + chrono::Days::new(k as u64);
            let weekday = assigned_date.weekday();
            let wd = clock::weekday_index(weekday);

            let duration = (spec.time_in_bed_mean
                + spec.time_in_bed_sd * standard_normal(&mut rng))
            .round()
            .clamp(330.0, 510.0) as i64;
            let raw_mid = spec.chronotype_means[group]
                + spec.weekday_delay[wd]
                + spec.chronotype_sd * standard_normal(&mut rng);
            // Start offset from the midnight ending the night, clamped so
            // the head stays within 30 minutes and the end before 9:29.
            let start_offset = (raw_mid - duration as f64 / 2.0)
                .round()
                .clamp(-(MAX_HEAD_MINUTES as f64), (MAX_TAIL_MINUTES - duration) as f64)
                as i64;
            let midnight_global = (k as i64 + 1) * MINUTES_PER_DAY;
            let night_start = midnight_global + start_offset;
            let night_end = night_start + duration;
            debug_assert!(night_start > 0 && (night_end as usize) < total_minutes);

            let corrupted = rng.random_bool(spec.night_corruption_prob);
            for slot in counts[night_start as usize..night_end as usize].iter_mut() {
                *slot = if corrupted {
                    rng.random_range(1..=80)
                } else {
                    0
                };
            }

            planted_mean_duration += duration as f64 / NIGHTS_PER_SUBJECT as f64;
            truth.push(TruthNight {
                subject_id: subject_id.clone(),
                assigned_date,
                weekday_index: wd,
                start_instant: start_instant + chrono::Duration::minutes(night_start),
                duration_minutes: duration,
                midpoint_linear: start_offset as f64 + duration as f64 / 2.0,
                corrupted,
            });
        }

        // Optional afternoon device-off blocks. Never allowed to push a
        // day past the invalid-day cutoff.
        if spec.daytime_removal_prob > 0.0 {
            for day in 0..RECORDING_DAYS {
                if !rng.random_bool(spec.daytime_removal_prob) {
                    continue;
                }
                let day_start = day * MINUTES_PER_DAY as usize;
                let day_slice = &counts[day_start..day_start + MINUTES_PER_DAY as usize];
                let planted: usize = day_slice.iter().filter(|&&c| c == 0).count();
                if planted + spec.daytime_removal_minutes as usize >= 600 {
                    continue;
                }
                let offset = rng.random_range(780..900) as usize; // 13:00-15:00
                for slot in counts
                    [day_start + offset..day_start + offset + spec.daytime_removal_minutes as usize]
                    .iter_mut()
                {
                    *slot = 0;
                }
            }
        }

        // Self-reports for respondent-aged subjects: roughly honest hours
        // plus reporting noise, and a short onset latency.
        let (sleep_hours, onset_minutes) = if age_years >= 16 {
            let hours = ((planted_mean_duration + 45.0 * standard_normal(&mut rng)) / 60.0)
                .round()
                .clamp(4.0, 12.0) as u16;
            let onset = (18.0 + 9.0 * standard_normal(&mut rng)).abs().round().min(60.0) as u16;
            (Some(hours), Some(onset))
        } else {
            (None, None)
        };

        subjects.push(SynthSubject {
            subject_id: subject_id.clone(),
            age_years,
            sex,
            weight,
            stratum,
            psu,
            sleep_hours,
            onset_minutes,
        });
        series.push(EpochSeries {
            subject_id,
            start_instant,
            counts,
            status_flags: Some(DeviceFlags {
                status_ok: true,
                calibration_ok: true,
            }),
        });
    }

    Ok(SynthCohort {
        subjects,
        series,
        truth,
    })
}

impl SynthCohort {
    /// Epoch CSV in the canonical layout.
    pub fn write_epochs_csv(&self, path: &Path) -> Result<()> {
        crate::ingest::write_epochs_file(&self.series, path)
    }

    pub fn write_demographics_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "SEQN,RIDAGEYR,RIAGENDR,WTMEC2YR,SDMVSTRA,SDMVPSU")?;
        for s in &self.subjects {
            let sex_code = match s.sex {
                Sex::Male => 1,
                Sex::Female => 2,
            };
            writeln!(
                out,
                "{},{},{},{:.6},{},{}",
                s.subject_id, s.age_years, sex_code, s.weight, s.stratum, s.psu
            )?;
        }
        out.flush()?;
        Ok(())
    }

    /// Questionnaire CSV covering respondent-aged subjects.
    pub fn write_questionnaire_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "SEQN,SLD010H,SLD020M")?;
        for s in &self.subjects {
            let (Some(h), Some(m)) = (s.sleep_hours, s.onset_minutes) else {
                continue;
            };
            writeln!(out, "{},{},{}", s.subject_id, h, m)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Planted-night ground truth.
    pub fn write_truth_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            out,
            "subject_id,assigned_date,weekday,start,duration_minutes,midpoint_minutes,corrupted"
        )?;
        for t in &self.truth {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                t.subject_id,
                t.assigned_date.format("%Y-%m-%d"),
                clock::WEEKDAYS[t.weekday_index],
                clock::format_instant(t.start_instant),
                t.duration_minutes,
                t.midpoint_linear,
                if t.corrupted { 1 } else { 0 }
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nonwear::{self, AssessmentWindow, NonWearParams};
    use crate::obt;
    use std::collections::BTreeMap;

    fn small_spec(n: usize, seed: u64) -> SynthSpec {
        SynthSpec {
            n_subjects: n,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small_spec(8, 99)).unwrap();
        let b = generate(&small_spec(8, 99)).unwrap();
        for (sa, sb) in a.series.iter().zip(&b.series) {
            assert_eq!(sa.counts, sb.counts);
        }
        assert_eq!(a.truth.len(), b.truth.len());
        for (ta, tb) in a.truth.iter().zip(&b.truth) {
            assert_eq!(ta.start_instant, tb.start_instant);
            assert_eq!(ta.duration_minutes, tb.duration_minutes);
        }
        let c = generate(&small_spec(8, 100)).unwrap();
        assert_ne!(a.series[0].counts, c.series[0].counts);
    }

    #[test]
    fn cohort_structure_and_round_robin_coverage() {
        let cohort = generate(&small_spec(26 * 2, 1)).unwrap();
        assert_eq!(cohort.series.len(), 52);
        assert_eq!(cohort.truth.len(), 52 * NIGHTS_PER_SUBJECT);
        let mut cells = std::collections::BTreeSet::new();
        let mut weekdays = std::collections::BTreeSet::new();
        for (i, s) in cohort.subjects.iter().enumerate() {
            assert_eq!(cohort.series[i].counts.len(), 7 * 1440);
            cells.insert((
                crate::ingest::AgeGroup::from_age(s.age_years).unwrap().index(),
                s.sex == Sex::Male,
            ));
            weekdays.insert(clock::weekday_index(chrono::Datelike::weekday(
                &cohort.series[i].start_instant.date(),
            )));
        }
        assert_eq!(cells.len(), 26, "every age-by-sex cell populated");
        assert_eq!(weekdays.len(), 7, "every start weekday present");
    }

    #[test]
    fn planted_nights_respect_the_day_budget() {
        let cohort = generate(&small_spec(40, 2)).unwrap();
        for t in &cohort.truth {
            assert!((330..=510).contains(&t.duration_minutes));
            let start_offset = t.midpoint_linear - t.duration_minutes as f64 / 2.0;
            assert!(start_offset >= -(MAX_HEAD_MINUTES as f64));
            assert!(start_offset + t.duration_minutes as f64 <= MAX_TAIL_MINUTES as f64);
        }
        // no calendar day of any series accumulates 600 zero minutes
        for s in &cohort.series {
            for day in 0..RECORDING_DAYS {
                let lo = day * 1440;
                let zeros = s.counts[lo..lo + 1440].iter().filter(|&&c| c == 0).count();
                assert!(zeros < 600, "day {day}: {zeros} zero minutes");
            }
        }
    }

    #[test]
    fn extraction_recovers_every_planted_night_exactly() {
        let cohort = generate(&small_spec(10, 3)).unwrap();
        let mut truth_by_subject: BTreeMap<&str, Vec<&TruthNight>> = BTreeMap::new();
        for t in &cohort.truth {
            truth_by_subject.entry(&t.subject_id).or_default().push(t);
        }
        for s in &cohort.series {
            let window = AssessmentWindow::from_series_start(s, RECORDING_DAYS as u32).unwrap();
            let (records, _) = obt::extract_obt_records(
                s,
                &NonWearParams::default(),
                &obt::ObtParams::default(),
                &window,
                600,
            )
            .unwrap();
            let truths = &truth_by_subject[s.subject_id.as_str()];
            assert_eq!(records.len(), truths.len());
            for (rec, t) in records.iter().zip(truths.iter()) {
                assert_eq!(rec.start_instant, t.start_instant);
                assert_eq!(rec.obt_d_minutes, t.duration_minutes);
                assert_eq!(rec.assigned_date, t.assigned_date);
                assert_eq!(rec.obt_m_linear, t.midpoint_linear);
            }
        }
    }

    #[test]
    fn corrupted_nights_stay_hidden() {
        let spec = SynthSpec {
            night_corruption_prob: 1.0,
            ..small_spec(5, 4)
        };
        let cohort = generate(&spec).unwrap();
        assert!(cohort.truth.iter().all(|t| t.corrupted));
        for s in &cohort.series {
            let intervals = nonwear::detect_nonwear(s, &NonWearParams::default());
            assert!(intervals.is_empty(), "worn-in-bed nights must not appear");
        }
    }

    #[test]
    fn daytime_removals_never_form_candidates() {
        let spec = SynthSpec {
            daytime_removal_prob: 0.8,
            ..small_spec(6, 5)
        };
        let cohort = generate(&spec).unwrap();
        for s in &cohort.series {
            let window = AssessmentWindow::from_series_start(s, 7).unwrap();
            let (records, _) = obt::extract_obt_records(
                s,
                &NonWearParams::default(),
                &obt::ObtParams::default(),
                &window,
                600,
            )
            .unwrap();
            // still exactly the six nights: removals are too short
            assert_eq!(records.len(), NIGHTS_PER_SUBJECT);
            assert!(records.iter().all(|r| (330..=510).contains(&r.obt_d_minutes)));
        }
    }

    #[test]
    fn weekend_delay_is_visible_in_recovered_midpoints() {
        let mut spec = small_spec(30, 6);
        spec.weekday_delay[6] = 60.0; // Saturdays
        let cohort = generate(&spec).unwrap();
        let (mut sat, mut rest) = (Vec::new(), Vec::new());
        for s in &cohort.series {
            let window = AssessmentWindow::from_series_start(s, 7).unwrap();
            let (records, _) = obt::extract_obt_records(
                s,
                &NonWearParams::default(),
                &obt::ObtParams::default(),
                &window,
                600,
            )
            .unwrap();
            for r in records {
                if clock::weekday_index(r.assigned_weekday) == 6 {
                    sat.push(r.obt_m_linear);
                } else {
                    rest.push(r.obt_m_linear);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let gap = mean(&sat) - mean(&rest);
        assert!((gap - 60.0).abs() < 12.0, "weekend gap {gap}");
    }

    #[test]
    fn writers_produce_readable_files() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = generate(&small_spec(12, 8)).unwrap();
        let epochs = dir.path().join("epochs.csv");
        let demo = dir.path().join("demo.csv");
        let quest = dir.path().join("quest.csv");
        let truth = dir.path().join("truth.csv");
        cohort.write_epochs_csv(&epochs).unwrap();
        cohort.write_demographics_csv(&demo).unwrap();
        cohort.write_questionnaire_csv(&quest).unwrap();
        cohort.write_truth_csv(&truth).unwrap();

        let parsed = crate::ingest::parse_epochs_file(&epochs).unwrap();
        assert_eq!(parsed.series.len(), 12);
        let profiles = crate::ingest::parse_demographics_file(&demo).unwrap();
        assert_eq!(profiles.profiles.len(), 12);
        let reports = crate::ingest::parse_sleep_questionnaire_file(&quest).unwrap();
        assert!(!reports.is_empty());
        let truth_text = std::fs::read_to_string(&truth).unwrap();
        assert_eq!(truth_text.lines().count(), 1 + 12 * NIGHTS_PER_SUBJECT);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate(&small_spec(0, 1)).is_err());
        let bad = SynthSpec {
            night_corruption_prob: 1.5,
            ..small_spec(3, 1)
        };
        assert!(generate(&bad).is_err());
        let bad = SynthSpec {
            time_in_bed_mean: 200.0,
            ..small_spec(3, 1)
        };
        assert!(generate(&bad).is_err());
    }
}
