//! Minute-resolution time helpers shared across modules: strict timestamp
//! parsing/formatting and the clock-face renderings used in output tables.

use chrono::{NaiveDate, NaiveDateTime, Timelike, Weekday};

use crate::error::{Error, Result};

pub const MINUTES_PER_DAY: i64 = 1440;

/// Timestamp format used everywhere minutes matter: `2003-06-02T23:00`.
pub const INSTANT_FORMAT: &str = "%Y-%m-%dT%H:%M";

pub fn format_instant(t: NaiveDateTime) -> String {
    t.format(INSTANT_FORMAT).to_string()
}

pub fn parse_instant(s: &str) -> Result<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s, INSTANT_FORMAT)
        .map_err(|e| Error::Record(format!("bad timestamp '{s}': {e}")))
}

pub fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map_err(|e| Error::Record(format!("bad date '{s}': {e}")))
}

/// Whole minutes from `a` to `b` (positive when `b` is later).
pub fn minutes_between(a: NaiveDateTime, b: NaiveDateTime) -> i64 {
    (b - a).num_minutes()
}

/// Minute-of-day of an instant, 0..1439.
pub fn minute_of_day(t: NaiveDateTime) -> i64 {
    i64::from(t.hour()) * 60 + i64::from(t.minute())
}

/// Round a fractional minute value half-up (toward +inf for .5 exactly).
fn round_minute(m: f64) -> i64 {
    (m + 0.5).floor() as i64
}

/// Render minutes-past-midnight (any real value; reduced mod 1440) as a
/// 12-hour clock string: 259 -> "4:19AM", -30 -> "11:30PM", 0 -> "12:00AM".
pub fn render_clock(minutes: f64) -> String {
    let m = round_minute(minutes).rem_euclid(MINUTES_PER_DAY);
    let (h24, mm) = (m / 60, m % 60);
    let suffix = if h24 < 12 { "AM" } else { "PM" };
    let h12 = match h24 % 12 {
        0 => 12,
        h => h,
    };
    format!("{h12}:{mm:02}{suffix}")
}

/// Render a duration or signed offset in minutes as hours:minutes:
/// 565 -> "9:25", -95 -> "-1:35", 0 -> "0:00".
pub fn render_hours_minutes(minutes: f64) -> String {
    let m = round_minute(minutes.abs());
    let sign = if minutes < 0.0 && m != 0 { "-" } else { "" };
    format!("{sign}{}:{:02}", m / 60, m % 60)
}

/// Weekday label used in every table, Sunday-first to match the day-of-week
/// models' ordering.
pub fn weekday_label(w: Weekday) -> &'static str {
    match w {
        Weekday::Sun => "Sun",
        Weekday::Mon => "Mon",
        Weekday::Tue => "Tue",
        Weekday::Wed => "Wed",
        Weekday::Thu => "Thu",
        Weekday::Fri => "Fri",
        Weekday::Sat => "Sat",
    }
}

/// Sunday-first index of a weekday, 0..=6.
pub fn weekday_index(w: Weekday) -> usize {
    w.num_days_from_sunday() as usize
}

/// Inverse of [`weekday_index`].
pub fn weekday_from_index(i: usize) -> Weekday {
    match i % 7 {
        0 => Weekday::Sun,
        1 => Weekday::Mon,
        2 => Weekday::Tue,
        3 => Weekday::Wed,
        4 => Weekday::Thu,
        5 => Weekday::Fri,
        _ => Weekday::Sat,
    }
}

/// All weekdays in table order.
pub const WEEKDAYS: [Weekday; 7] = [
    Weekday::Sun,
    Weekday::Mon,
    Weekday::Tue,
    Weekday::Wed,
    Weekday::Thu,
    Weekday::Fri,
    Weekday::Sat,
];

pub fn parse_weekday(s: &str) -> Result<Weekday> {
    WEEKDAYS
        .iter()
        .copied()
        .find(|w| weekday_label(*w) == s)
        .ok_or_else(|| Error::Record(format!("bad weekday '{s}'")))
}
