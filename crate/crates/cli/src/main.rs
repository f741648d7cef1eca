//! obtk — command-line front end for the bedtime-analytics library.
//!
//! Subcommands mirror the pipeline stages so runs can be scripted piecewise
//! (ingest → nonwear → obt → regress/curves/compare-selfreport) or all at
//! once (`report`). `synth` fabricates a seeded cohort with planted
//! bedtimes for validation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use obtk_core::ingest::{self, Cohort, WeightScheme};
use obtk_core::obt::{summarize_subject, ObtRecord, SubjectObtSummary};
use obtk_core::pipeline::{
    self, NightSelection, PipelineConfig, WeekPart,
};
use obtk_core::survey::OutcomeKind;
use obtk_core::synth;

#[derive(Parser)]
#[command(
    name = "obtk",
    version,
    about = "Objective bedtime analytics for minute-epoch actigraphy"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Analysis configuration (key = value lines); defaults when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<PipelineConfig> {
        match &self.config {
            Some(path) => PipelineConfig::from_file(path)
                .with_context(|| format!("reading config {}", path.display())),
            None => Ok(PipelineConfig::default()),
        }
    }
}

#[derive(Args)]
struct OutDirArg {
    /// Directory for output files (created if missing).
    #[arg(long, value_name = "DIR", default_value = "obtk-out")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupingArg {
    /// One observation per subject: the mean over all analyzed nights.
    Pooled,
    /// Separate curves for Monday-Thursday and Friday-Saturday nights.
    Weekpart,
    /// One curve per weekday.
    Weekday,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and join the raw inputs; write canonical subject/epoch tables.
    Ingest {
        #[arg(long, value_name = "FILE")]
        epochs: PathBuf,
        #[arg(long, value_name = "FILE")]
        demographics: PathBuf,
        #[arg(long, value_name = "FILE")]
        questionnaire: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        out: OutDirArg,
    },
    /// Detect non-wear intervals and classify days.
    Nonwear {
        #[arg(long, value_name = "FILE")]
        epochs: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        out: OutDirArg,
    },
    /// Extract one bedtime interval per night plus subject summaries.
    Obt {
        #[arg(long, value_name = "FILE")]
        epochs: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        out: OutDirArg,
    },
    /// Fit the fourteen weekday models; write coefficient and fitted tables.
    Regress {
        #[arg(long, value_name = "FILE")]
        subjects: PathBuf,
        #[arg(long, value_name = "FILE")]
        obt_records: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        out: OutDirArg,
    },
    /// Fit age percentile curves for both outcomes.
    Curves {
        #[arg(long, value_name = "FILE")]
        subjects: PathBuf,
        #[arg(long, value_name = "FILE")]
        obt_records: PathBuf,
        #[arg(long, value_enum, default_value_t = GroupingArg::Pooled)]
        grouping: GroupingArg,
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        out: OutDirArg,
    },
    /// Compare self-reported sleep with extracted bedtime durations.
    CompareSelfreport {
        #[arg(long, value_name = "FILE")]
        subjects: PathBuf,
        #[arg(long, value_name = "FILE")]
        obt_records: PathBuf,
        #[command(flatten)]
        out: OutDirArg,
    },
    /// Run every stage and write the full report bundle.
    Report {
        #[arg(long, value_name = "FILE")]
        epochs: PathBuf,
        #[arg(long, value_name = "FILE")]
        demographics: PathBuf,
        #[arg(long, value_name = "FILE")]
        questionnaire: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        out: OutDirArg,
    },
    /// Generate a synthetic cohort with planted bedtimes and ground truth.
    Synth {
        /// Cohort size.
        #[arg(long, default_value_t = 500)]
        subjects: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Minutes added to Friday and Saturday night midpoints.
        #[arg(long, default_value_t = 0.0)]
        weekend_delay: f64,
        /// Probability that a night is worn in bed (hidden from detection).
        #[arg(long, default_value_t = 0.0)]
        corruption: f64,
        /// Probability per day of an afternoon device-off block.
        #[arg(long, default_value_t = 0.0)]
        daytime_removal: f64,
        #[command(flatten)]
        out: OutDirArg,
    },
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, content).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn say_wrote(path: &Path) {
    println!("wrote {}", path.display());
}

/// Rebuild the in-memory cohort and per-subject summaries from the
/// interchange tables written by `ingest` and `obt`.
fn load_interchange(
    subjects_path: &Path,
    records_path: &Path,
    weight_scheme: WeightScheme,
) -> Result<(
    Cohort,
    BTreeMap<String, Vec<ObtRecord>>,
    BTreeMap<String, SubjectObtSummary>,
)> {
    let profiles = pipeline::read_subjects_file(subjects_path)
        .with_context(|| format!("reading {}", subjects_path.display()))?;
    let cohort = Cohort {
        subjects: profiles
            .into_iter()
            .map(|p| (p.subject_id.clone(), p))
            .collect(),
        series: BTreeMap::new(),
        weight_scheme,
    };
    let flat = pipeline::read_obt_records_file(records_path)
        .with_context(|| format!("reading {}", records_path.display()))?;
    let mut records: BTreeMap<String, Vec<ObtRecord>> = BTreeMap::new();
    for r in flat {
        records.entry(r.subject_id.clone()).or_default().push(r);
    }
    let mut summaries = BTreeMap::new();
    for (id, recs) in &records {
        summaries.insert(id.clone(), summarize_subject(recs)?);
    }
    Ok((cohort, records, summaries))
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Ingest {
            epochs,
            demographics,
            questionnaire,
            config,
            out,
        } => {
            let config = config.load()?;
            let stage = pipeline::ingest_stage(
                &epochs,
                &demographics,
                questionnaire.as_deref(),
                config.weight_scheme,
            )?;
            for line in &stage.log {
                println!("{line}");
            }
            let path = write_file(
                &out.out_dir,
                "subjects.csv",
                &pipeline::subjects_csv(&stage.cohort.subjects),
            )?;
            say_wrote(&path);
            let epochs_out = out.out_dir.join("epochs.csv");
            let series: Vec<_> = stage.cohort.series.values().cloned().collect();
            ingest::write_epochs_file(&series, &epochs_out)?;
            say_wrote(&epochs_out);
        }
        Command::Nonwear {
            epochs,
            config,
            out,
        } => {
            let config = config.load()?;
            let parsed = ingest::parse_epochs_file(&epochs)?;
            let extract = pipeline::extract_all(parsed.series.iter(), &config)?;
            for line in extract.log_lines() {
                println!("{line}");
            }
            say_wrote(&write_file(
                &out.out_dir,
                "nonwear_intervals.csv",
                &extract.intervals_csv,
            )?);
            say_wrote(&write_file(&out.out_dir, "day_records.csv", &extract.days_csv)?);
        }
        Command::Obt {
            epochs,
            config,
            out,
        } => {
            let config = config.load()?;
            let parsed = ingest::parse_epochs_file(&epochs)?;
            let extract = pipeline::extract_all(parsed.series.iter(), &config)?;
            for line in extract.log_lines() {
                println!("{line}");
            }
            say_wrote(&write_file(
                &out.out_dir,
                "obt_records.csv",
                &pipeline::obt_records_csv(&extract.records),
            )?);
            say_wrote(&write_file(
                &out.out_dir,
                "subject_summaries.csv",
                &pipeline::subject_summaries_csv(&extract.summaries),
            )?);
        }
        Command::Regress {
            subjects,
            obt_records,
            config,
            out,
        } => {
            let config = config.load()?;
            let (cohort, _, summaries) =
                load_interchange(&subjects, &obt_records, config.weight_scheme)?;
            let models = pipeline::fit_weekday_models(&cohort, &summaries, config.alpha)?;
            for line in &models.log {
                println!("{line}");
            }
            for (name, content) in [
                (
                    "obt_d_coefficients.csv",
                    pipeline::coefficient_table_csv(&models.fits_d),
                ),
                ("obt_d_fitted.csv", pipeline::fitted_table_csv(&models.fits_d)),
                (
                    "obt_m_coefficients.csv",
                    pipeline::coefficient_table_csv(&models.fits_m),
                ),
                ("obt_m_fitted.csv", pipeline::fitted_table_csv(&models.fits_m)),
            ] {
                say_wrote(&write_file(&out.out_dir, name, &content)?);
            }
        }
        Command::Curves {
            subjects,
            obt_records,
            grouping,
            config,
            out,
        } => {
            let config = config.load()?;
            let (cohort, _, summaries) =
                load_interchange(&subjects, &obt_records, config.weight_scheme)?;
            let lms_config = config.lms_config();
            let selections: Vec<NightSelection> = match grouping {
                GroupingArg::Pooled => vec![NightSelection::AllNights],
                GroupingArg::Weekpart => vec![
                    NightSelection::Part(WeekPart::MonThu),
                    NightSelection::Part(WeekPart::FriSat),
                ],
                GroupingArg::Weekday => (0..7).map(NightSelection::Weekday).collect(),
            };
            for outcome in [OutcomeKind::ObtD, OutcomeKind::ObtM] {
                for &selection in &selections {
                    for sex in [ingest::Sex::Female, ingest::Sex::Male] {
                        let obs = pipeline::curve_observations(
                            &cohort, &summaries, outcome, sex, selection,
                        );
                        if obs.len() < lms_config.min_obs {
                            println!(
                                "curve {} {} {}: skipped ({} observations, need {})",
                                outcome.label(),
                                sex.label(),
                                selection.describe(),
                                obs.len(),
                                lms_config.min_obs
                            );
                            continue;
                        }
                        let set = obtk_core::lms::fit_lms(
                            &obs,
                            &lms_config,
                            pipeline::curve_axis_shift(outcome),
                        )?;
                        println!(
                            "curve {} {} {}: n={} iterations={} converged={}",
                            outcome.label(),
                            sex.label(),
                            selection.describe(),
                            set.n_obs,
                            set.iterations,
                            set.converged
                        );
                        let stem = format!(
                            "{}_curve_{}{}",
                            outcome.file_label(),
                            sex.label(),
                            selection.file_suffix()
                        );
                        say_wrote(&write_file(
                            &out.out_dir,
                            &format!("{stem}.csv"),
                            &pipeline::curve_csv(&set)?,
                        )?);
                        say_wrote(&write_file(
                            &out.out_dir,
                            &format!("{stem}.meta.txt"),
                            &pipeline::curve_meta(&set, outcome, sex, selection, &lms_config),
                        )?);
                    }
                }
            }
        }
        Command::CompareSelfreport {
            subjects,
            obt_records,
            out,
        } => {
            let (cohort, _, summaries) =
                load_interchange(&subjects, &obt_records, WeightScheme::SingleCycle)?;
            let rows = obtk_core::survey::self_report_comparison(&cohort, &summaries)?;
            say_wrote(&write_file(
                &out.out_dir,
                "selfreport_comparison.csv",
                &pipeline::comparison_table_csv(&rows),
            )?);
        }
        Command::Report {
            epochs,
            demographics,
            questionnaire,
            config,
            out,
        } => {
            let config = config.load()?;
            let bundle = pipeline::run_pipeline(
                &epochs,
                &demographics,
                questionnaire.as_deref(),
                &config,
            )?;
            bundle
                .write_to(&out.out_dir)
                .with_context(|| format!("writing bundle under {}", out.out_dir.display()))?;
            println!(
                "wrote {} files to {}",
                bundle.files.len(),
                out.out_dir.display()
            );
        }
        Command::Synth {
            subjects,
            seed,
            weekend_delay,
            corruption,
            daytime_removal,
            out,
        } => {
            let mut spec = synth::SynthSpec {
                n_subjects: subjects,
                seed,
                night_corruption_prob: corruption,
                daytime_removal_prob: daytime_removal,
                ..synth::SynthSpec::default()
            };
            spec.weekday_delay[5] = weekend_delay;
            spec.weekday_delay[6] = weekend_delay;
            let cohort = synth::generate(&spec)?;
            fs::create_dir_all(&out.out_dir)
                .with_context(|| format!("creating {}", out.out_dir.display()))?;
            let epochs = out.out_dir.join("epochs.csv");
            cohort.write_epochs_csv(&epochs)?;
            say_wrote(&epochs);
            let demo = out.out_dir.join("demographics.csv");
            cohort.write_demographics_csv(&demo)?;
            say_wrote(&demo);
            let quest = out.out_dir.join("questionnaire.csv");
            cohort.write_questionnaire_csv(&quest)?;
            say_wrote(&quest);
            let truth = out.out_dir.join("truth.csv");
            cohort.write_truth_csv(&truth)?;
            say_wrote(&truth);
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
