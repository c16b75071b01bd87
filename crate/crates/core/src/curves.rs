//! Raw daily observations, the completeness filter, and aggregation of
//! multi-year daily records into one mean annual curve per site.
//!
//! Day-of-year indexing ignores Feb 29 throughout: leap-day observations are
//! discarded and every year is treated as 365 days, so every aggregated curve
//! lives on the same grid `(d - 0.5) / 365`, `d = 1..=365`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use chrono::{Datelike, NaiveDate};
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const DAYS_PER_YEAR: usize = 365;

/// One row of the observation CSV. `value == None` marks a missing day.
#[derive(Debug, Clone, PartialEq)]
pub struct RawObservation {
    pub site_id: String,
    pub date: NaiveDate,
    pub value: Option<f64>,
}

impl RawObservation {
    pub fn is_missing(&self) -> bool {
        self.value.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteGeometry {
    pub site_id: String,
    pub latitude: f64,
    pub longitude: f64,
    /// Meters above sea level.
    pub elevation: f64,
}

impl SiteGeometry {
    pub fn new(site_id: impl Into<String>, latitude: f64, longitude: f64, elevation: f64) -> Self {
        Self {
            site_id: site_id.into(),
            latitude,
            longitude,
            elevation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.latitude) || !(-180.0..=180.0).contains(&self.longitude) {
            return Err(Error::Validation(format!(
                "site {}: coordinates ({}, {}) out of range",
                self.site_id, self.latitude, self.longitude
            )));
        }
        if !self.elevation.is_finite() {
            return Err(Error::Validation(format!(
                "site {}: non-finite elevation",
                self.site_id
            )));
        }
        Ok(())
    }
}

/// A single functional observation `Y_i` with its time points in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnualCurve {
    pub site_id: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub years_used: u32,
}

impl AnnualCurve {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.values.len() {
            return Err(Error::Validation(format!(
                "site {}: {} times but {} values",
                self.site_id,
                self.times.len(),
                self.values.len()
            )));
        }
        if self.times.windows(2).any(|w| w[0] >= w[1])
            || self.times.iter().any(|t| !(0.0..=1.0).contains(t))
        {
            return Err(Error::Validation(format!(
                "site {}: times must be strictly increasing within [0, 1]",
                self.site_id
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "site {}: non-finite curve value",
                self.site_id
            )));
        }
        Ok(())
    }
}

/// Curves plus aligned site geometry, sorted by `site_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub curves: Vec<AnnualCurve>,
    pub geometry: Vec<SiteGeometry>,
}

impl Dataset {
    /// Aligns curves and geometry by site id. Geometry rows without a curve
    /// are dropped; curves without geometry are an error.
    pub fn new(mut curves: Vec<AnnualCurve>, geometry: Vec<SiteGeometry>) -> Result<Self> {
        curves.sort_by(|a, b| a.site_id.cmp(&b.site_id));
        if let Some(w) = curves.windows(2).find(|w| w[0].site_id == w[1].site_id) {
            return Err(Error::Validation(format!(
                "duplicate curve for site {}",
                w[0].site_id
            )));
        }
        let mut by_id: BTreeMap<&str, &SiteGeometry> = BTreeMap::new();
        for g in &geometry {
            g.validate()?;
            if by_id.insert(g.site_id.as_str(), g).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate geometry for site {}",
                    g.site_id
                )));
            }
        }
        let orphans: Vec<&str> = curves
            .iter()
            .filter(|c| !by_id.contains_key(c.site_id.as_str()))
            .map(|c| c.site_id.as_str())
            .collect();
        if !orphans.is_empty() {
            return Err(Error::Validation(format!(
                "curves without geometry: {}",
                orphans.join(", ")
            )));
        }
        for c in &curves {
            c.validate()?;
        }
        let geometry = curves
            .iter()
            .map(|c| by_id[c.site_id.as_str()].clone())
            .collect();
        Ok(Self { curves, geometry })
    }

    pub fn len(&self) -> usize {
        self.curves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }

    pub fn site_ids(&self) -> impl Iterator<Item = &str> {
        self.curves.iter().map(|c| c.site_id.as_str())
    }
}

/// Daily record of one site, sorted by date with unique dates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SiteRecord {
    pub site_id: String,
    pub days: Vec<(NaiveDate, Option<f64>)>,
}

pub type RecordMap = BTreeMap<String, SiteRecord>;

/// Maps a date to its day-of-year in `1..=365`, skipping Feb 29 (`None`).
pub fn day_of_year(date: NaiveDate) -> Option<u32> {
    if date.month() == 2 && date.day() == 29 {
        return None;
    }
    let ordinal = date.ordinal();
    let leap = NaiveDate::from_ymd_opt(date.year(), 2, 29).is_some();
    Some(if leap && date.month() > 2 {
        ordinal - 1
    } else {
        ordinal
    })
}

/// The time point a day-of-year maps to.
pub fn day_time(day: u32) -> f64 {
    (day as f64 - 0.5) / DAYS_PER_YEAR as f64
}

/// The standard 365-point daily grid.
pub fn daily_grid() -> Vec<f64> {
    (1..=DAYS_PER_YEAR as u32).map(day_time).collect()
}

/// Groups rows by site and sorts them by date. A repeated `(site, date)`
/// pair is a conflict.
pub fn ingest_records<I>(rows: I) -> Result<RecordMap>
where
    I: IntoIterator<Item = Result<RawObservation>>,
{
    let mut map = RecordMap::new();
    for row in rows {
        let row = row?;
        if let Some(v) = row.value {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Validation(format!(
                    "site {} on {}: value {} must be finite and non-negative",
                    row.site_id, row.date, v
                )));
            }
        }
        let rec = map
            .entry(row.site_id.clone())
            .or_insert_with(|| SiteRecord {
                site_id: row.site_id.clone(),
                days: Vec::new(),
            });
        rec.days.push((row.date, row.value));
    }
    for rec in map.values_mut() {
        rec.days.sort_by_key(|(d, _)| *d);
        if let Some(w) = rec.days.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Conflict {
                site: rec.site_id.clone(),
                date: w[0].0.to_string(),
            });
        }
    }
    Ok(map)
}

/// Years (calendar) for which the record has at most `max_missing` of the
/// 365 non-leap days without a value.
pub fn complete_years(record: &SiteRecord, max_missing: u32) -> Vec<i32> {
    let mut present: BTreeMap<i32, u32> = BTreeMap::new();
    for (date, value) in &record.days {
        if value.is_some() && day_of_year(*date).is_some() {
            *present.entry(date.year()).or_default() += 1;
        }
    }
    present
        .into_iter()
        .filter(|&(_, n)| DAYS_PER_YEAR as u32 - n <= max_missing)
        .map(|(y, _)| y)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub records: RecordMap,
    pub retained: Vec<String>,
    pub dropped: Vec<String>,
}

/// Keeps sites with at least `min_complete_years` complete calendar years.
pub fn filter_complete_sites(
    records: RecordMap,
    min_complete_years: u32,
    max_missing_days_per_year: u32,
) -> FilterOutcome {
    let mut retained = Vec::new();
    let mut dropped = Vec::new();
    let mut kept = RecordMap::new();
    for (id, rec) in records {
        if complete_years(&rec, max_missing_days_per_year).len() >= min_complete_years as usize {
            retained.push(id.clone());
            kept.insert(id, rec);
        } else {
            dropped.push(id);
        }
    }
    FilterOutcome {
        records: kept,
        retained,
        dropped,
    }
}

/// Mean over years in `year_range` (inclusive) of the non-missing values at
/// each day-of-year.
pub fn aggregate_mean_daily(record: &SiteRecord, year_range: (i32, i32)) -> Result<AnnualCurve> {
    let (y0, y1) = year_range;
    let mut sums = [0.0f64; DAYS_PER_YEAR];
    let mut counts = [0u32; DAYS_PER_YEAR];
    let mut years = BTreeSet::new();
    for (date, value) in &record.days {
        let (Some(v), Some(d)) = (value, day_of_year(*date)) else {
            continue;
        };
        if date.year() < y0 || date.year() > y1 {
            continue;
        }
        sums[d as usize - 1] += v;
        counts[d as usize - 1] += 1;
        years.insert(date.year());
    }
    let uncovered: Vec<u32> = (0..DAYS_PER_YEAR)
        .filter(|&d| counts[d] == 0)
        .map(|d| d as u32 + 1)
        .collect();
    if !uncovered.is_empty() {
        return Err(Error::IncompleteCoverage {
            site: record.site_id.clone(),
            days: uncovered,
        });
    }
    Ok(AnnualCurve {
        site_id: record.site_id.clone(),
        times: daily_grid(),
        values: sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| s / c as f64)
            .collect(),
        years_used: years.len() as u32,
    })
}

/// Aggregates every record concurrently; output is ordered by site id.
pub fn aggregate_all(records: &RecordMap, year_range: (i32, i32)) -> Result<Vec<AnnualCurve>> {
    let recs: Vec<&SiteRecord> = records.values().collect();
    recs.par_iter()
        .map(|r| aggregate_mean_daily(r, year_range))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MissingSummary {
    pub missing_days: u64,
    pub total_days: u64,
}

impl MissingSummary {
    pub fn percent(&self) -> f64 {
        if self.total_days == 0 {
            0.0
        } else {
            100.0 * self.missing_days as f64 / self.total_days as f64
        }
    }
}

/// Counts missing days over each site's span from first to last recorded
/// date. A day is missing if it has no row or an empty value. Feb 29 is
/// not counted.
pub fn missing_summary(records: &RecordMap) -> MissingSummary {
    let mut out = MissingSummary::default();
    for rec in records.values() {
        let (Some(first), Some(last)) = (rec.days.first(), rec.days.last()) else {
            continue;
        };
        let present = rec
            .days
            .iter()
            .filter(|(d, v)| v.is_some() && day_of_year(*d).is_some())
            .count() as u64;
        let total = first
            .0
            .iter_days()
            .take_while(|d| *d <= last.0)
            .filter(|d| day_of_year(*d).is_some())
            .count() as u64;
        out.total_days += total;
        out.missing_days += total - present;
    }
    out
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader)
}

fn check_header(
    rdr: &mut csv::Reader<impl Read>,
    expected: &[&str],
    source_name: &str,
) -> Result<()> {
    let headers = rdr.headers().map_err(|e| Error::Parse {
        source_name: source_name.to_string(),
        line: 1,
        message: e.to_string(),
    })?;
    let got: Vec<&str> = headers.iter().collect();
    if got.len() < expected.len() || got[..expected.len()] != *expected {
        return Err(Error::Parse {
            source_name: source_name.to_string(),
            line: 1,
            message: format!(
                "expected header {}, found {}",
                expected.join(","),
                got.join(",")
            ),
        });
    }
    Ok(())
}

fn parse_f64(field: &str, what: &str, source_name: &str, line: u64) -> Result<f64> {
    field.parse::<f64>().map_err(|_| Error::Parse {
        source_name: source_name.to_string(),
        line,
        message: format!("invalid {what} {field:?}"),
    })
}

/// Streams `site_id,date,value` rows. An empty value is a missing day.
pub fn read_observations<R: Read>(
    reader: R,
    source_name: &str,
) -> Result<impl Iterator<Item = Result<RawObservation>>> {
    let mut rdr = csv_reader(reader);
    check_header(&mut rdr, &["site_id", "date", "value"], source_name)?;
    let name = source_name.to_string();
    Ok(rdr.into_records().map(move |rec| {
        let rec = rec.map_err(|e| Error::Parse {
            source_name: name.clone(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 3 {
            return Err(Error::Parse {
                source_name: name.clone(),
                line,
                message: format!("expected 3 fields, found {}", rec.len()),
            });
        }
        let date = NaiveDate::parse_from_str(&rec[1], "%Y-%m-%d").map_err(|_| Error::Parse {
            source_name: name.clone(),
            line,
            message: format!("invalid date {:?}", &rec[1]),
        })?;
        let value = if rec[2].is_empty() {
            None
        } else {
            Some(parse_f64(&rec[2], "value", &name, line)?)
        };
        Ok(RawObservation {
            site_id: rec[0].to_string(),
            date,
            value,
        })
    }))
}

pub fn write_observations<W: Write>(
    writer: W,
    rows: &[RawObservation],
    header_comment: &str,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(writer);
    let io = |e| Error::io("observations", e);
    write_comment(&mut w, header_comment).map_err(io)?;
    writeln!(w, "site_id,date,value").map_err(io)?;
    for r in rows {
        match r.value {
            Some(v) => writeln!(w, "{},{},{}", r.site_id, r.date.format("%Y-%m-%d"), v),
            None => writeln!(w, "{},{},", r.site_id, r.date.format("%Y-%m-%d")),
        }
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads `site_id,lat,lon,elev_m`.
pub fn read_geometry<R: Read>(reader: R, source_name: &str) -> Result<Vec<SiteGeometry>> {
    let mut rdr = csv_reader(reader);
    check_header(&mut rdr, &["site_id", "lat", "lon", "elev_m"], source_name)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let g = SiteGeometry {
            site_id: rec[0].to_string(),
            latitude: parse_f64(&rec[1], "latitude", source_name, line)?,
            longitude: parse_f64(&rec[2], "longitude", source_name, line)?,
            elevation: parse_f64(&rec[3], "elevation", source_name, line)?,
        };
        g.validate().map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            line,
            message: e.to_string(),
        })?;
        out.push(g);
    }
    Ok(out)
}

pub fn write_geometry<W: Write>(
    writer: W,
    sites: &[SiteGeometry],
    header_comment: &str,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(writer);
    let io = |e| Error::io("geometry", e);
    write_comment(&mut w, header_comment).map_err(io)?;
    writeln!(w, "site_id,lat,lon,elev_m").map_err(io)?;
    for s in sites {
        writeln!(
            w,
            "{},{},{},{}",
            s.site_id, s.latitude, s.longitude, s.elevation
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Long-format curve file: `site_id,t,value,years_used`, one row per point.
pub fn write_curves<W: Write>(
    writer: W,
    curves: &[AnnualCurve],
    header_comment: &str,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(writer);
    let io = |e| Error::io("curves", e);
    write_comment(&mut w, header_comment).map_err(io)?;
    writeln!(w, "site_id,t,value,years_used").map_err(io)?;
    for c in curves {
        for (t, v) in c.times.iter().zip(&c.values) {
            writeln!(w, "{},{},{},{}", c.site_id, t, v, c.years_used).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_curves<R: Read>(reader: R, source_name: &str) -> Result<Vec<AnnualCurve>> {
    let mut rdr = csv_reader(reader);
    check_header(
        &mut rdr,
        &["site_id", "t", "value", "years_used"],
        source_name,
    )?;
    let mut by_site: BTreeMap<String, AnnualCurve> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let t = parse_f64(&rec[1], "time", source_name, line)?;
        let v = parse_f64(&rec[2], "value", source_name, line)?;
        let years: u32 = rec[3].parse().map_err(|_| Error::Parse {
            source_name: source_name.to_string(),
            line,
            message: format!("invalid years_used {:?}", &rec[3]),
        })?;
        let c = by_site
            .entry(rec[0].to_string())
            .or_insert_with(|| AnnualCurve {
                site_id: rec[0].to_string(),
                times: Vec::new(),
                values: Vec::new(),
                years_used: years,
            });
        if let Some(&prev) = c.times.last() {
            if t <= prev {
                return Err(Error::Parse {
                    source_name: source_name.to_string(),
                    line,
                    message: format!("times for site {} not strictly increasing", c.site_id),
                });
            }
        }
        c.times.push(t);
        c.values.push(v);
    }
    Ok(by_site.into_values().collect())
}

pub(crate) fn write_comment<W: Write>(w: &mut W, comment: &str) -> std::io::Result<()> {
    for line in comment.lines() {
        writeln!(w, "# {line}")?;
    }
    Ok(())
}
