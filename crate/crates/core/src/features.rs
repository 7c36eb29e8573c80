//! Raw series types and construction of the per-substation explanatory frame.
//!
//! Everything here works on naive local time at a 30-minute resolution. A
//! [`Timestamp`] is a calendar date plus a half-hour slot (0..=47); the load
//! series, the interpolated weather and the resulting [`FeatureFrame`] all
//! share that grid.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type SeriesId = u32;

/// Half-hour slots per day.
pub const INSTANTS_PER_DAY: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestamp {
    pub date: NaiveDate,
    pub instant: u8,
}

impl Timestamp {
    pub fn new(date: NaiveDate, instant: u8) -> Result<Self> {
        if instant as usize >= INSTANTS_PER_DAY {
            return Err(Error::invalid(format!("instant {instant} outside 0..=47")));
        }
        Ok(Self { date, instant })
    }

    /// Accepts only datetimes on a :00 or :30 boundary.
    pub fn from_datetime(dt: NaiveDateTime) -> Result<Self> {
        if dt.second() != 0 || dt.nanosecond() != 0 || (dt.minute() != 0 && dt.minute() != 30) {
            return Err(Error::invalid(format!(
                "{dt} is not on a half-hour boundary"
            )));
        }
        let instant = (dt.hour() * 2 + dt.minute() / 30) as u8;
        Ok(Self {
            date: dt.date(),
            instant,
        })
    }

    pub fn to_datetime(&self) -> NaiveDateTime {
        let minutes = self.instant as u32 * 30;
        self.date
            .and_hms_opt(minutes / 60, minutes % 60, 0)
            .expect("instant is always < 48")
    }

    /// Absolute half-hour index counted from 1970-01-01 00:00.
    pub fn half_hour_index(&self) -> i64 {
        let days = self.date.signed_duration_since(epoch()).num_days();
        days * INSTANTS_PER_DAY as i64 + self.instant as i64
    }

    pub fn from_half_hour_index(index: i64) -> Self {
        let days = index.div_euclid(INSTANTS_PER_DAY as i64);
        let instant = index.rem_euclid(INSTANTS_PER_DAY as i64) as u8;
        Self {
            date: epoch() + chrono::Duration::days(days),
            instant,
        }
    }

    pub fn format_iso(&self) -> String {
        self.to_datetime().format("%Y-%m-%dT%H:%M:%S").to_string()
    }

    pub fn parse_iso(s: &str) -> Result<Self> {
        let dt = NaiveDateTime::parse_from_str(s.trim(), "%Y-%m-%dT%H:%M:%S")
            .or_else(|_| NaiveDateTime::parse_from_str(s.trim(), "%Y-%m-%d %H:%M:%S"))
            .or_else(|_| NaiveDateTime::parse_from_str(s.trim(), "%Y-%m-%dT%H:%M"))
            .map_err(|e| Error::invalid(format!("bad timestamp `{s}`: {e}")))?;
        Self::from_datetime(dt)
    }
}

fn epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 1).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    /// Great-circle distance in kilometres.
    pub fn haversine_km(&self, other: &GeoPoint) -> f64 {
        const EARTH_RADIUS_KM: f64 = 6371.0088;
        let (phi1, phi2) = (self.lat.to_radians(), other.lat.to_radians());
        let dphi = phi2 - phi1;
        let dlambda = (other.lon - self.lon).to_radians();
        let a =
            (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
        2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadPoint {
    pub timestamp: Timestamp,
    /// `None` marks a missing measurement.
    pub load_mw: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadSeries {
    pub substation_id: SeriesId,
    pub location: GeoPoint,
    pub points: Vec<LoadPoint>,
}

impl LoadSeries {
    pub fn new(
        substation_id: SeriesId,
        location: GeoPoint,
        points: Vec<LoadPoint>,
    ) -> Result<Self> {
        for w in points.windows(2) {
            if w[1].timestamp <= w[0].timestamp {
                return Err(Error::invalid(format!(
                    "substation {substation_id}: timestamps not strictly increasing at {}",
                    w[1].timestamp.format_iso()
                )));
            }
        }
        for p in &points {
            if let Some(v) = p.load_mw {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::invalid(format!(
                        "substation {substation_id}: load {v} at {} must be finite and >= 0",
                        p.timestamp.format_iso()
                    )));
                }
            }
        }
        Ok(Self {
            substation_id,
            location,
            points,
        })
    }

    /// Timestamps inside the covered span that have no observation, either
    /// because the row is absent or because its value is missing.
    pub fn gaps(&self) -> Vec<Timestamp> {
        let mut out = Vec::new();
        for w in self.points.windows(2) {
            let (a, b) = (
                w[0].timestamp.half_hour_index(),
                w[1].timestamp.half_hour_index(),
            );
            out.extend((a + 1..b).map(Timestamp::from_half_hour_index));
        }
        out.extend(
            self.points
                .iter()
                .filter(|p| p.load_mw.is_none())
                .map(|p| p.timestamp),
        );
        out.sort();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherPoint {
    pub timestamp: Timestamp,
    pub temp_c: f64,
    pub cloud_pct: f64,
    pub wind_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherSeries {
    pub station_id: SeriesId,
    pub location: GeoPoint,
    pub points: Vec<WeatherPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DayType {
    Monday,
    TueToThu,
    Friday,
    Saturday,
    Sunday,
}

impl DayType {
    pub const ALL: [DayType; 5] = [
        DayType::Monday,
        DayType::TueToThu,
        DayType::Friday,
        DayType::Saturday,
        DayType::Sunday,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Five-way day category derived from the weekday alone.
pub fn day_type(date: NaiveDate) -> DayType {
    match date.weekday() {
        Weekday::Mon => DayType::Monday,
        Weekday::Tue | Weekday::Wed | Weekday::Thu => DayType::TueToThu,
        Weekday::Fri => DayType::Friday,
        Weekday::Sat => DayType::Saturday,
        Weekday::Sun => DayType::Sunday,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalendarInfo {
    pub day_type: DayType,
    pub bank_holiday: bool,
    pub vacation: bool,
    pub working_day: bool,
}

impl CalendarInfo {
    pub fn new(date: NaiveDate, bank_holiday: bool, vacation: bool) -> Self {
        let day_type = day_type(date);
        let weekend = matches!(day_type, DayType::Saturday | DayType::Sunday);
        Self {
            day_type,
            bank_holiday,
            vacation,
            working_day: !(weekend || bank_holiday),
        }
    }

    /// Holiday indicator used by the models: bank holiday or vacation day.
    pub fn holiday(&self) -> bool {
        self.bank_holiday || self.vacation
    }
}

/// Bank-holiday and vacation flags by date. Dates absent from the table are
/// ordinary days.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Calendar {
    pub days: BTreeMap<NaiveDate, (bool, bool)>,
}

impl Calendar {
    pub fn insert(&mut self, date: NaiveDate, bank_holiday: bool, vacation: bool) {
        self.days.insert(date, (bank_holiday, vacation));
    }

    pub fn info(&self, date: NaiveDate) -> CalendarInfo {
        let (bank, vacation) = self.days.get(&date).copied().unwrap_or((false, false));
        CalendarInfo::new(date, bank, vacation)
    }
}

fn days_in_year(year: i32) -> u32 {
    if NaiveDate::from_ymd_opt(year, 2, 29).is_some() {
        366
    } else {
        365
    }
}

/// Fraction of the year elapsed: 0 at Jan 1 00:00, 1 at Dec 31 23:30.
pub fn compute_time_of_year(ts: Timestamp) -> f64 {
    let slots = days_in_year(ts.date.year()) as usize * INSTANTS_PER_DAY;
    let index = ts.date.ordinal0() as usize * INSTANTS_PER_DAY + ts.instant as usize;
    index as f64 / (slots - 1) as f64
}

/// Exponential smoothing `s_t = alpha * s_{t-1} + (1 - alpha) * x_t`, started at `s_1 = x_1`.
pub fn exp_smooth(series: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::Empty("exp_smooth series".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!(
            "smoothing factor {alpha} outside (0, 1)"
        )));
    }
    let mut out = Vec::with_capacity(series.len());
    let mut s = series[0];
    out.push(s);
    for &x in &series[1..] {
        s = alpha * s + (1.0 - alpha) * x;
        out.push(s);
    }
    Ok(out)
}

/// Linear interpolation of a coarse weather series onto the 30-minute grid.
/// Original points are kept as-is.
pub fn interpolate_weather(series: &WeatherSeries) -> Result<WeatherSeries> {
    if series.points.is_empty() {
        return Err(Error::Empty(format!(
            "weather station {}",
            series.station_id
        )));
    }
    let mut points = Vec::new();
    for w in series.points.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let (ia, ib) = (a.timestamp.half_hour_index(), b.timestamp.half_hour_index());
        if ib <= ia {
            return Err(Error::invalid(format!(
                "weather station {}: timestamps not strictly increasing at {}",
                series.station_id,
                b.timestamp.format_iso()
            )));
        }
        let span = (ib - ia) as f64;
        for k in 0..(ib - ia) {
            let u = k as f64 / span;
            points.push(WeatherPoint {
                timestamp: Timestamp::from_half_hour_index(ia + k),
                temp_c: a.temp_c + u * (b.temp_c - a.temp_c),
                cloud_pct: a.cloud_pct + u * (b.cloud_pct - a.cloud_pct),
                wind_ms: a.wind_ms + u * (b.wind_ms - a.wind_ms),
            });
        }
    }
    points.push(*series.points.last().unwrap());
    Ok(WeatherSeries {
        station_id: series.station_id,
        location: series.location,
        points,
    })
}

/// Station with the smallest haversine distance; exact ties go to the lowest id.
pub fn assign_closest_station(
    location: &GeoPoint,
    stations: &[(SeriesId, GeoPoint)],
) -> Result<SeriesId> {
    stations
        .iter()
        .map(|(id, p)| (location.haversine_km(p), *id))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, id)| id)
        .ok_or_else(|| Error::Empty("weather station list".into()))
}

/// Lags (in half-hours) of the load-derived features. `None` disables a lag,
/// which also means no rows are dropped on its account.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LagConfig {
    pub day_lag: Option<usize>,
    pub week_lag: Option<usize>,
}

impl Default for LagConfig {
    fn default() -> Self {
        Self {
            day_lag: Some(96),
            week_lag: Some(336),
        }
    }
}

impl LagConfig {
    pub fn none() -> Self {
        Self {
            day_lag: None,
            week_lag: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub timestamp: Timestamp,
    pub y: Option<f64>,
    pub toy: f64,
    pub trend: f64,
    pub temp: f64,
    pub temp95: f64,
    pub temp99: f64,
    pub temp_min: f64,
    pub temp_max: f64,
    pub load_2d: Option<f64>,
    pub load_1w: Option<f64>,
    pub calendar: CalendarInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFrame {
    pub substation_id: SeriesId,
    pub station_id: SeriesId,
    pub rows: Vec<FeatureRow>,
    /// Grid rows discarded because a lag or the temperature was unavailable.
    pub dropped_rows: usize,
}

impl FeatureFrame {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows at one half-hour slot, in time order.
    pub fn at_instant(&self, instant: u8) -> Vec<&FeatureRow> {
        self.rows
            .iter()
            .filter(|r| r.timestamp.instant == instant)
            .collect()
    }

    pub fn instants(&self) -> Vec<u8> {
        let mut seen = [false; INSTANTS_PER_DAY];
        for r in &self.rows {
            seen[r.timestamp.instant as usize] = true;
        }
        (0..INSTANTS_PER_DAY as u8)
            .filter(|&i| seen[i as usize])
            .collect()
    }
}

/// Aligns a load series with its (already 30-minute) weather series and the
/// calendar. Load-derived lags are looked up on the regular grid spanned by the
/// load series, so a lag pointing at a gap drops the row.
pub fn build_feature_frame(
    load: &LoadSeries,
    weather: &WeatherSeries,
    calendar: &Calendar,
    lags: LagConfig,
) -> Result<FeatureFrame> {
    let first = load
        .points
        .first()
        .ok_or_else(|| Error::Empty(format!("load series {}", load.substation_id)))?;
    if weather.points.is_empty() {
        return Err(Error::Empty(format!(
            "weather station {}",
            weather.station_id
        )));
    }
    let start = first.timestamp.half_hour_index();
    let end = load.points.last().unwrap().timestamp.half_hour_index();
    let n = (end - start + 1) as usize;

    let mut y = vec![None; n];
    for p in &load.points {
        y[(p.timestamp.half_hour_index() - start) as usize] = p.load_mw;
    }

    let temps: Vec<f64> = weather.points.iter().map(|p| p.temp_c).collect();
    let temp95 = exp_smooth(&temps, 0.95)?;
    let temp99 = exp_smooth(&temps, 0.99)?;
    let mut weather_at: BTreeMap<i64, usize> = BTreeMap::new();
    let mut daily: BTreeMap<NaiveDate, (f64, f64)> = BTreeMap::new();
    for (k, p) in weather.points.iter().enumerate() {
        weather_at.insert(p.timestamp.half_hour_index(), k);
        let e = daily
            .entry(p.timestamp.date)
            .or_insert((f64::INFINITY, f64::NEG_INFINITY));
        e.0 = e.0.min(p.temp_c);
        e.1 = e.1.max(p.temp_c);
    }

    let lag_value = |i: usize, lag: Option<usize>| -> std::result::Result<Option<f64>, ()> {
        match lag {
            None => Ok(None),
            Some(l) if i < l => Err(()),
            Some(l) => y[i - l].map(Some).ok_or(()),
        }
    };

    let mut rows = Vec::new();
    let mut dropped = 0usize;
    for i in 0..n {
        let ts = Timestamp::from_half_hour_index(start + i as i64);
        let Some(&k) = weather_at.get(&(start + i as i64)) else {
            dropped += 1;
            continue;
        };
        let (Ok(load_2d), Ok(load_1w)) = (lag_value(i, lags.day_lag), lag_value(i, lags.week_lag))
        else {
            dropped += 1;
            continue;
        };
        let (temp_min, temp_max) = daily[&ts.date];
        rows.push(FeatureRow {
            timestamp: ts,
            y: y[i],
            toy: compute_time_of_year(ts),
            trend: i as f64,
            temp: temps[k],
            temp95: temp95[k],
            temp99: temp99[k],
            temp_min,
            temp_max,
            load_2d,
            load_1w,
            calendar: calendar.info(ts.date),
        });
    }
    if rows.is_empty() {
        return Err(Error::Empty(format!(
            "no usable rows for substation {} ({dropped} dropped)",
            load.substation_id
        )));
    }
    if dropped > 0 {
        log::debug!("substation {}: {dropped} rows dropped", load.substation_id);
    }
    Ok(FeatureFrame {
        substation_id: load.substation_id,
        station_id: weather.station_id,
        rows,
        dropped_rows: dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    fn ts(y: i32, m: u32, day: u32, inst: u8) -> Timestamp {
        Timestamp::new(d(y, m, day), inst).unwrap()
    }

    #[test]
    fn time_of_year_endpoints() {
        assert_eq!(compute_time_of_year(ts(2019, 1, 1, 0)), 0.0);
        assert_eq!(compute_time_of_year(ts(2019, 12, 31, 47)), 1.0);
        assert_eq!(compute_time_of_year(ts(2020, 12, 31, 47)), 1.0);
        // slot 8759 of a 17,520-slot year: day 182 (0-based), instant 23
        let t = Timestamp::from_half_hour_index(ts(2019, 1, 1, 0).half_hour_index() + 8759);
        assert_eq!(compute_time_of_year(t), 8759.0 / 17519.0);
    }

    #[test]
    fn day_types() {
        assert_eq!(day_type(d(2021, 3, 1)), DayType::Monday);
        assert_eq!(day_type(d(2021, 3, 3)), DayType::TueToThu);
        assert_eq!(day_type(d(2021, 3, 5)), DayType::Friday);
        assert_eq!(day_type(d(2021, 3, 7)), DayType::Sunday);
    }

    #[test]
    fn working_day_ignores_vacation() {
        let mut cal = Calendar::default();
        cal.insert(d(2021, 3, 3), false, true);
        cal.insert(d(2021, 3, 4), true, false);
        let vac = cal.info(d(2021, 3, 3));
        assert!(vac.working_day && vac.holiday());
        let bank = cal.info(d(2021, 3, 4));
        assert!(!bank.working_day && bank.holiday());
        assert!(!cal.info(d(2021, 3, 6)).working_day);
    }

    #[test]
    fn smoothing_examples() {
        assert_eq!(exp_smooth(&[3.0; 5], 0.4).unwrap(), vec![3.0; 5]);
        let s = exp_smooth(&[0.0, 1.0], 0.95).unwrap();
        assert!((s[1] - 0.05).abs() < 1e-15);
        let mut step = vec![0.0];
        step.extend(std::iter::repeat_n(1.0, 30));
        let s = exp_smooth(&step, 0.95).unwrap();
        for k in 1..=30 {
            assert!((s[k] - (1.0 - 0.95f64.powi(k as i32))).abs() < 1e-12);
        }
        assert!(exp_smooth(&[], 0.5).is_err());
        assert!(exp_smooth(&[1.0], 1.0).is_err());
    }

    fn wseries(values: &[f64], step: i64) -> WeatherSeries {
        let t0 = ts(2020, 1, 1, 0).half_hour_index();
        WeatherSeries {
            station_id: 1,
            location: GeoPoint::new(45.0, 2.0),
            points: values
                .iter()
                .enumerate()
                .map(|(k, &v)| WeatherPoint {
                    timestamp: Timestamp::from_half_hour_index(t0 + step * k as i64),
                    temp_c: v,
                    cloud_pct: 50.0,
                    wind_ms: 3.0,
                })
                .collect(),
        }
    }

    #[test]
    fn weather_interpolation() {
        let out = interpolate_weather(&wseries(&[0.0, 6.0], 6)).unwrap();
        let temps: Vec<f64> = out.points.iter().map(|p| p.temp_c).collect();
        assert_eq!(temps, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = interpolate_weather(&wseries(&[10.0, 4.0], 6)).unwrap();
        for (k, p) in out.points.iter().enumerate() {
            assert!((p.temp_c - (10.0 - k as f64)).abs() < 1e-12);
        }
        let out = interpolate_weather(&wseries(&[7.0, 7.0, 7.0], 6)).unwrap();
        assert!(out.points.iter().all(|p| p.temp_c == 7.0));
        assert_eq!(out.points.len(), 13);

        let mut bad = wseries(&[1.0, 2.0, 3.0], 6);
        bad.points.swap(1, 2);
        assert!(interpolate_weather(&bad).is_err());
    }

    #[test]
    fn closest_station() {
        let a = GeoPoint::new(45.0, 0.0);
        let b = GeoPoint::new(45.0, 2.0);
        let stations = [(1, a), (2, b)];
        assert_eq!(assign_closest_station(&a, &stations).unwrap(), 1);
        let near_a = GeoPoint::new(45.0, 1.0 - 1e-6);
        assert!(near_a.haversine_km(&a) < near_a.haversine_km(&b));
        assert_eq!(assign_closest_station(&near_a, &stations).unwrap(), 1);
        let site = GeoPoint::new(45.0, 1.0);
        let tie = [(7, GeoPoint::new(46.0, 1.0)), (3, GeoPoint::new(46.0, 1.0))];
        assert_eq!(assign_closest_station(&site, &tie).unwrap(), 3);
        assert!(assign_closest_station(&site, &[]).is_err());
    }

    fn constant_load(days: usize, value: f64) -> LoadSeries {
        let t0 = ts(2020, 1, 6, 0).half_hour_index();
        let points = (0..days * 48)
            .map(|i| LoadPoint {
                timestamp: Timestamp::from_half_hour_index(t0 + i as i64),
                load_mw: Some(value),
            })
            .collect();
        LoadSeries::new(5, GeoPoint::new(45.0, 2.0), points).unwrap()
    }

    fn flat_weather(days: usize, t: f64) -> WeatherSeries {
        let t0 = ts(2020, 1, 6, 0).half_hour_index();
        WeatherSeries {
            station_id: 9,
            location: GeoPoint::new(45.0, 2.0),
            points: (0..days * 48)
                .map(|i| WeatherPoint {
                    timestamp: Timestamp::from_half_hour_index(t0 + i as i64),
                    temp_c: t,
                    cloud_pct: 0.0,
                    wind_ms: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn frame_from_ten_days() {
        let frame = build_feature_frame(
            &constant_load(10, 5.0),
            &flat_weather(10, 10.0),
            &Calendar::default(),
            LagConfig::default(),
        )
        .unwrap();
        assert_eq!(frame.len(), 3 * 48);
        assert_eq!(frame.dropped_rows, 7 * 48);
        for r in &frame.rows {
            assert_eq!(r.load_2d, Some(5.0));
            assert_eq!(r.load_1w, Some(5.0));
            assert_eq!((r.temp_min, r.temp_max), (10.0, 10.0));
        }
        assert_eq!(frame.at_instant(24).len(), 3);

        let mt = build_feature_frame(
            &constant_load(10, 5.0),
            &flat_weather(10, 10.0),
            &Calendar::default(),
            LagConfig::none(),
        )
        .unwrap();
        assert_eq!(mt.len(), 480);
        assert!(mt.rows.iter().all(|r| r.load_2d.is_none()));
    }

    #[test]
    fn frame_without_history_errors() {
        let err = build_feature_frame(
            &constant_load(5, 5.0),
            &flat_weather(5, 10.0),
            &Calendar::default(),
            LagConfig::default(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn load_series_rejects_negative_and_unsorted() {
        let t = ts(2020, 1, 1, 0);
        let p = |ts, v| LoadPoint {
            timestamp: ts,
            load_mw: Some(v),
        };
        assert!(LoadSeries::new(1, GeoPoint::new(0.0, 0.0), vec![p(t, -1.0)]).is_err());
        let t2 = Timestamp::from_half_hour_index(t.half_hour_index() + 3);
        assert!(LoadSeries::new(1, GeoPoint::new(0.0, 0.0), vec![p(t2, 1.0), p(t, 1.0)]).is_err());
        let s = LoadSeries::new(1, GeoPoint::new(0.0, 0.0), vec![p(t, 1.0), p(t2, 1.0)]).unwrap();
        assert_eq!(s.gaps().len(), 2);
    }

    proptest! {
        #[test]
        fn smoothing_stays_in_range(xs in prop::collection::vec(-50.0f64..50.0, 1..200), alpha in 0.01f64..0.99) {
            let s = exp_smooth(&xs, alpha).unwrap();
            let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for v in s {
                prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
            }
        }

        #[test]
        fn interpolation_exact_on_affine(a in -20.0f64..20.0, b in -2.0f64..2.0, n in 2usize..12) {
            let values: Vec<f64> = (0..n).map(|k| a + b * 6.0 * k as f64).collect();
            let out = interpolate_weather(&wseries(&values, 6)).unwrap();
            for (k, p) in out.points.iter().enumerate() {
                prop_assert!((p.temp_c - (a + b * k as f64)).abs() < 1e-9);
            }
        }

        #[test]
        fn day_lag_matches_raw_series(vals in prop::collection::vec(0.0f64..100.0, 9 * 48..12 * 48)) {
            let t0 = ts(2020, 2, 3, 0).half_hour_index();
            let points: Vec<LoadPoint> = vals.iter().enumerate().map(|(i, &v)| LoadPoint {
                timestamp: Timestamp::from_half_hour_index(t0 + i as i64),
                load_mw: Some(v),
            }).collect();
            let load = LoadSeries::new(1, GeoPoint::new(45.0, 2.0), points).unwrap();
            let mut weather = flat_weather(14, 8.0);
            for (k, p) in weather.points.iter_mut().enumerate() {
                p.timestamp = Timestamp::from_half_hour_index(t0 + k as i64);
            }
            let frame = build_feature_frame(&load, &weather, &Calendar::default(), LagConfig::default()).unwrap();
            for r in &frame.rows {
                let i = (r.timestamp.half_hour_index() - t0) as usize;
                prop_assert_eq!(r.load_2d, Some(vals[i - 96]));
                prop_assert_eq!(r.load_1w, Some(vals[i - 336]));
                prop_assert_eq!(r.trend, i as f64);
            }
        }

        #[test]
        fn toy_monotone_within_year(a in 0i64..17520, b in 0i64..17520) {
            let t0 = ts(2019, 1, 1, 0).half_hour_index();
            let (lo, hi) = (a.min(b), a.max(b));
            let x = compute_time_of_year(Timestamp::from_half_hour_index(t0 + lo));
            let y = compute_time_of_year(Timestamp::from_half_hour_index(t0 + hi));
            prop_assert!(x <= y);
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn toy_resets_at_new_year() {
        assert_eq!(compute_time_of_year(ts(2020, 1, 1, 0)), 0.0);
        assert!(compute_time_of_year(ts(2019, 12, 31, 47)) > 0.99);
    }

    #[test]
    fn frame_serialization_deterministic() {
        let build = || {
            build_feature_frame(
                &constant_load(9, 3.0),
                &flat_weather(9, 4.0),
                &Calendar::default(),
                LagConfig::default(),
            )
            .unwrap()
        };
        let a = serde_json::to_string(&build()).unwrap();
        let b = serde_json::to_string(&build()).unwrap();
        assert_eq!(a, b);
    }
}
