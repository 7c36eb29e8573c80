//! CSV readers and writers for the load, weather, calendar and forecast files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    Calendar, GeoPoint, LoadPoint, LoadSeries, SeriesId, Timestamp, WeatherPoint, WeatherSeries,
};

#[derive(Debug, Serialize, Deserialize)]
struct LoadRecord {
    substation_id: SeriesId,
    timestamp: String,
    load_mw: Option<f64>,
    lat: f64,
    lon: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeatherRecord {
    station_id: SeriesId,
    timestamp: String,
    temp_c: f64,
    cloud_pct: f64,
    wind_ms: f64,
    lat: f64,
    lon: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CalendarRecord {
    date: NaiveDate,
    bank_holiday: u8,
    vacation: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub target_id: SeriesId,
    pub timestamp: String,
    pub forecast_mw: f64,
}

pub(crate) fn create_file(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

pub(crate) fn open_file(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn flush<W: Write>(w: &mut csv::Writer<W>, what: &str) -> Result<()> {
    w.flush().map_err(|e| Error::io(what, e))
}

pub fn write_load_csv<W: Write>(out: W, series: &[LoadSeries]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in series {
        for p in &s.points {
            w.serialize(LoadRecord {
                substation_id: s.substation_id,
                timestamp: p.timestamp.format_iso(),
                load_mw: p.load_mw,
                lat: s.location.lat,
                lon: s.location.lon,
            })?;
        }
    }
    if series.iter().all(|s| s.points.is_empty()) {
        w.write_record(["substation_id", "timestamp", "load_mw", "lat", "lon"])?;
    }
    flush(&mut w, "load csv")
}

/// Reads one or more substations; rows are grouped by `substation_id` and
/// must be in time order within each substation.
pub fn read_load_csv<R: Read>(input: R) -> Result<Vec<LoadSeries>> {
    let mut groups: BTreeMap<SeriesId, (GeoPoint, Vec<LoadPoint>)> = BTreeMap::new();
    for rec in csv::Reader::from_reader(input).deserialize() {
        let rec: LoadRecord = rec?;
        let entry = groups
            .entry(rec.substation_id)
            .or_insert_with(|| (GeoPoint::new(rec.lat, rec.lon), Vec::new()));
        entry.1.push(LoadPoint {
            timestamp: Timestamp::parse_iso(&rec.timestamp)?,
            load_mw: rec.load_mw,
        });
    }
    groups
        .into_iter()
        .map(|(id, (loc, points))| LoadSeries::new(id, loc, points))
        .collect()
}

pub fn write_weather_csv<W: Write>(out: W, series: &[WeatherSeries]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in series {
        for p in &s.points {
            w.serialize(WeatherRecord {
                station_id: s.station_id,
                timestamp: p.timestamp.format_iso(),
                temp_c: p.temp_c,
                cloud_pct: p.cloud_pct,
                wind_ms: p.wind_ms,
                lat: s.location.lat,
                lon: s.location.lon,
            })?;
        }
    }
    flush(&mut w, "weather csv")
}

pub fn read_weather_csv<R: Read>(input: R) -> Result<Vec<WeatherSeries>> {
    let mut groups: BTreeMap<SeriesId, (GeoPoint, Vec<WeatherPoint>)> = BTreeMap::new();
    for rec in csv::Reader::from_reader(input).deserialize() {
        let rec: WeatherRecord = rec?;
        let entry = groups
            .entry(rec.station_id)
            .or_insert_with(|| (GeoPoint::new(rec.lat, rec.lon), Vec::new()));
        entry.1.push(WeatherPoint {
            timestamp: Timestamp::parse_iso(&rec.timestamp)?,
            temp_c: rec.temp_c,
            cloud_pct: rec.cloud_pct,
            wind_ms: rec.wind_ms,
        });
    }
    Ok(groups
        .into_iter()
        .map(|(station_id, (location, points))| WeatherSeries {
            station_id,
            location,
            points,
        })
        .collect())
}

pub fn write_calendar_csv<W: Write>(out: W, calendar: &Calendar) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "bank_holiday", "vacation"])?;
    for (date, (bank, vac)) in &calendar.days {
        w.write_record([
            date.to_string(),
            (*bank as u8).to_string(),
            (*vac as u8).to_string(),
        ])?;
    }
    flush(&mut w, "calendar csv")
}

pub fn read_calendar_csv<R: Read>(input: R) -> Result<Calendar> {
    let mut cal = Calendar::default();
    for rec in csv::Reader::from_reader(input).deserialize() {
        let rec: CalendarRecord = rec?;
        if rec.bank_holiday > 1 || rec.vacation > 1 {
            return Err(Error::invalid(format!(
                "calendar flags on {} must be 0 or 1",
                rec.date
            )));
        }
        cal.insert(rec.date, rec.bank_holiday == 1, rec.vacation == 1);
    }
    Ok(cal)
}

pub fn write_forecasts_csv<W: Write>(out: W, records: &[ForecastRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["target_id", "timestamp", "forecast_mw"])?;
    for r in records {
        w.write_record([
            r.target_id.to_string(),
            r.timestamp.clone(),
            r.forecast_mw.to_string(),
        ])?;
    }
    flush(&mut w, "forecast csv")
}

pub fn read_forecasts_csv<R: Read>(input: R) -> Result<Vec<ForecastRecord>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// `*.csv` files of a directory in lexicographic order.
pub fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Every load series found in the `*.csv` files of `dir`, sorted by id.
pub fn read_load_dir(dir: &Path) -> Result<Vec<LoadSeries>> {
    let mut all = Vec::new();
    for path in csv_files(dir)? {
        all.extend(read_load_csv(open_file(&path)?)?);
    }
    all.sort_by_key(|s| s.substation_id);
    if all
        .windows(2)
        .any(|w| w[0].substation_id == w[1].substation_id)
    {
        return Err(Error::invalid(format!(
            "substation listed in several files under {}",
            dir.display()
        )));
    }
    Ok(all)
}

pub fn read_weather_dir(dir: &Path) -> Result<Vec<WeatherSeries>> {
    let mut all = Vec::new();
    for path in csv_files(dir)? {
        all.extend(read_weather_csv(open_file(&path)?)?);
    }
    all.sort_by_key(|s| s.station_id);
    Ok(all)
}
