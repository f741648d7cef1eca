//! Batch analytics for minute-epoch accelerometer recordings.
//!
//! The library turns raw activity-count streams into "objective bedtime"
//! (OBT) intervals — long device-removal periods that behave like in-bed
//! episodes — and then into population statistics:
//!
//! * [`ingest`] — epoch, demographics, and sleep-questionnaire CSV parsing
//!   plus cohort assembly.
//! * [`nonwear`] — zero-count run detection with interrupt tolerance and
//!   valid-day classification.
//! * [`obt`] — candidate filtering, night assignment (noon rule), per-night
//!   selection, and per-subject summaries.
//! * [`survey`] — design-weighted quantiles, saturated day-of-week
//!   regression with linearized variance, and the derived tables.
//! * [`lms`] — penalized-likelihood LMS (Box-Cox Cole-Green) percentile
//!   curves over age.
//! * [`synth`] — seeded synthetic cohort generation with planted ground
//!   truth, used for end-to-end validation.
//! * [`pipeline`] — configuration, stage orchestration, and the output
//!   bundle written by the CLI.
//!
//! All timestamps are minute-resolution local clock times; no timezone
//! transitions are modeled.

pub mod clock;
pub mod error;
pub mod ingest;
pub mod lms;
pub mod nonwear;
pub mod obt;
pub mod pipeline;
pub mod spline;
pub mod survey;
pub mod synth;

pub use error::{Error, Result};
