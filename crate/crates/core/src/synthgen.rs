//! Synthetic substation fleets: weather stations, a French-style calendar and
//! half-hourly loads with daily, weekly and annual shapes, a heating/cooling
//! temperature response, scale heterogeneity and an optional regime shift.
//!
//! Everything is a pure function of the [`FleetConfig`]; each series draws
//! from its own ChaCha stream derived from the fleet seed and its index.

use std::f64::consts::PI;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    assign_closest_station, compute_time_of_year, interpolate_weather, Calendar, GeoPoint,
    LoadPoint, LoadSeries, SeriesId, Timestamp, WeatherPoint, WeatherSeries, INSTANTS_PER_DAY,
};

pub const FLEET_MANIFEST_SCHEMA: &str = "fleet_manifest_v1";
pub const HEATING_THRESHOLD_C: f64 = 15.0;
pub const COOLING_THRESHOLD_C: f64 = 22.0;

/// Mixes a master seed, a named stream and an index into an independent seed.
pub fn derive_seed(master: u64, stream: &str, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    let tag = stream.bytes().fold(0xCBF2_9CE4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01B3)
    });
    splitmix(splitmix(splitmix(master) ^ tag) ^ index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BehaviorClass {
    /// Day-peaking tertiary/residential mix.
    Classic,
    /// Night-peaking (storage heaters, off-peak tariffs).
    Inverted,
    /// Industrial-looking series with an arbitrary profile and more noise.
    Irregular,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeShift {
    pub start: NaiveDate,
    /// Last affected day (inclusive).
    pub end: NaiveDate,
    pub multiplier: f64,
    /// 0 keeps the daily profile, 1 flattens it to its mean.
    pub distortion: f64,
}

impl RegimeShift {
    pub fn contains(&self, date: NaiveDate) -> bool {
        date >= self.start && date <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstationGenConfig {
    pub substation_id: SeriesId,
    pub location: GeoPoint,
    pub class: BehaviorClass,
    /// MW.
    pub base_load: f64,
    /// 48 multipliers, one per half-hour.
    pub daily_profile: Vec<f64>,
    /// Monday first. Bank holidays use the Sunday entry.
    pub weekly_profile: [f64; 7],
    pub vacation_multiplier: f64,
    /// Relative amplitude of the winter-peaking annual cycle.
    pub annual_amplitude: f64,
    /// Relative level change per year since the first generated day.
    pub yearly_growth: f64,
    /// MW per degree below the heating threshold.
    pub heating: f64,
    /// MW per degree above the cooling threshold.
    pub cooling: f64,
    pub noise_std: f64,
    pub regime_shift: Option<RegimeShift>,
}

impl SubstationGenConfig {
    /// Flat profiles, no temperature response, no noise.
    pub fn flat(substation_id: SeriesId, base_load: f64) -> Self {
        Self {
            substation_id,
            location: GeoPoint::new(46.5, 2.5),
            class: BehaviorClass::Classic,
            base_load,
            daily_profile: vec![1.0; INSTANTS_PER_DAY],
            weekly_profile: [1.0; 7],
            vacation_multiplier: 1.0,
            annual_amplitude: 0.0,
            yearly_growth: 0.0,
            heating: 0.0,
            cooling: 0.0,
            noise_std: 0.0,
            regime_shift: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_load > 0.0) {
            return Err(Error::invalid(format!(
                "substation {}: base load must be positive",
                self.substation_id
            )));
        }
        if self.daily_profile.len() != INSTANTS_PER_DAY {
            return Err(Error::invalid("daily profile needs 48 multipliers"));
        }
        if self
            .daily_profile
            .iter()
            .chain(&self.weekly_profile)
            .any(|m| !(*m > 0.0))
            || !(self.vacation_multiplier > 0.0)
        {
            return Err(Error::invalid(format!(
                "substation {}: multipliers must be positive",
                self.substation_id
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::invalid("noise std must be non-negative"));
        }
        if let Some(r) = &self.regime_shift {
            if r.end < r.start || !(r.multiplier > 0.0) || !(0.0..=1.0).contains(&r.distortion) {
                return Err(Error::invalid(
                    "regime shift needs start <= end, positive multiplier, distortion in [0, 1]",
                ));
            }
        }
        Ok(())
    }

    /// Noise-free load at one timestamp.
    pub fn expected_load(
        &self,
        ts: Timestamp,
        temp_c: f64,
        calendar: &Calendar,
        origin: NaiveDate,
    ) -> f64 {
        let info = calendar.info(ts.date);
        let dow = if info.bank_holiday {
            6
        } else {
            ts.date.weekday().num_days_from_monday() as usize
        };
        let mut daily = self.daily_profile[ts.instant as usize];
        let mut level = 1.0;
        if let Some(shift) = self.regime_shift.filter(|s| s.contains(ts.date)) {
            let mean = self.daily_profile.iter().sum::<f64>() / INSTANTS_PER_DAY as f64;
            daily = (1.0 - shift.distortion) * daily + shift.distortion * mean;
            level = shift.multiplier;
        }
        let years = (ts.date - origin).num_days() as f64 / 365.25;
        let annual = 1.0 + self.annual_amplitude * (2.0 * PI * compute_time_of_year(ts)).cos();
        let vacation = if info.vacation {
            self.vacation_multiplier
        } else {
            1.0
        };
        let shape = self.base_load
            * daily
            * self.weekly_profile[dow]
            * annual
            * vacation
            * (1.0 + self.yearly_growth * years);
        let thermal = self.heating * (HEATING_THRESHOLD_C - temp_c).max(0.0)
            + self.cooling * (temp_c - COOLING_THRESHOLD_C).max(0.0);
        level * (shape + thermal)
    }
}

/// Generated load together with the number of values clamped at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedLoad {
    pub series: LoadSeries,
    pub clamped: usize,
}

/// Loads on every half-hour of `weather` (which must already be at 30-minute
/// resolution) between `start` and `end` inclusive.
pub fn generate_substation(
    config: &SubstationGenConfig,
    weather: &WeatherSeries,
    calendar: &Calendar,
    start: NaiveDate,
    end: NaiveDate,
    seed: u64,
) -> Result<GeneratedLoad> {
    config.validate()?;
    let first = Timestamp::new(start, 0)?.half_hour_index();
    let last = Timestamp::new(end, 47)?.half_hour_index();
    let offset = weather
        .points
        .iter()
        .position(|p| p.timestamp.half_hour_index() == first)
        .ok_or_else(|| {
            Error::invalid(format!(
                "weather station {} does not cover {start}",
                weather.station_id
            ))
        })?;
    let n = (last - first + 1) as usize;
    if weather.points.len() < offset + n
        || weather.points[offset + n - 1].timestamp.half_hour_index() != last
    {
        return Err(Error::invalid(format!(
            "weather station {} does not cover up to {end}",
            weather.station_id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut points = Vec::with_capacity(n);
    let mut clamped = 0;
    for k in 0..n {
        let w = &weather.points[offset + k];
        let mut y = config.expected_load(w.timestamp, w.temp_c, calendar, start);
        y += config.noise_std * normal.sample(&mut rng);
        if y < 0.0 {
            y = 0.0;
            clamped += 1;
        }
        points.push(LoadPoint {
            timestamp: w.timestamp,
            load_mw: Some(y),
        });
    }
    Ok(GeneratedLoad {
        series: LoadSeries::new(config.substation_id, config.location, points)?,
        clamped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationGenConfig {
    pub station_id: SeriesId,
    pub location: GeoPoint,
    pub mean_temp: f64,
    pub annual_amplitude: f64,
    pub daily_amplitude: f64,
    /// AR(1) coefficient of the 3-hourly anomaly.
    pub persistence: f64,
    pub anomaly_std: f64,
}

/// 3-hourly observations from `start` 00:00 to the day after `end` 00:00.
pub fn generate_weather(
    config: &StationGenConfig,
    start: NaiveDate,
    end: NaiveDate,
    seed: u64,
) -> Result<WeatherSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let last = end + Duration::days(1);
    let mut points = Vec::new();
    let mut anomaly = 0.0;
    let mut date = start;
    let innovation = config.anomaly_std * (1.0 - config.persistence * config.persistence).sqrt();
    while date <= last {
        for slot in 0..8u8 {
            if date == last && slot > 0 {
                break;
            }
            let ts = Timestamp::new(date, slot * 6)?;
            anomaly = config.persistence * anomaly + innovation * normal.sample(&mut rng);
            let hour = slot as f64 * 3.0;
            // coldest mid-January, warmest mid-July; daily peak around 15:00
            let seasonal =
                -config.annual_amplitude * (2.0 * PI * (compute_time_of_year(ts) - 0.04)).cos();
            let diurnal = config.daily_amplitude * (2.0 * PI * (hour - 9.0) / 24.0).sin();
            let temp = config.mean_temp + seasonal + diurnal + anomaly;
            let cloud: f64 =
                (50.0 - 4.0 * anomaly + 20.0 * normal.sample(&mut rng)).clamp(0.0, 100.0);
            let wind: f64 = (4.0 + 2.0 * normal.sample(&mut rng)).abs();
            points.push(WeatherPoint {
                timestamp: ts,
                temp_c: temp,
                cloud_pct: cloud,
                wind_ms: wind,
            });
        }
        date += Duration::days(1);
    }
    Ok(WeatherSeries {
        station_id: config.station_id,
        location: config.location,
        points,
    })
}

fn easter_sunday(year: i32) -> NaiveDate {
    // anonymous Gregorian computus
    let a = year % 19;
    let b = year / 100;
    let c = year % 100;
    let d = b / 4;
    let e = b % 4;
    let f = (b + 8) / 25;
    let g = (b - f + 1) / 3;
    let h = (19 * a + b - d - g + 15) % 30;
    let i = c / 4;
    let k = c % 4;
    let l = (32 + 2 * e + 2 * i - h - k) % 7;
    let m = (a + 11 * h + 22 * l) / 451;
    let month = (h + l - 7 * m + 114) / 31;
    let day = (h + l - 7 * m + 114) % 31 + 1;
    NaiveDate::from_ymd_opt(year, month as u32, day as u32).expect("valid Easter date")
}

/// French public holidays and stylised school vacations over `[start, end]`.
pub fn french_calendar(start: NaiveDate, end: NaiveDate) -> Calendar {
    let mut cal = Calendar::default();
    for year in start.year() - 1..=end.year() {
        let ymd = |m, d| NaiveDate::from_ymd_opt(year, m, d).unwrap();
        let easter = easter_sunday(year);
        let mut vacation = Vec::new();
        let mut push_range = |a: NaiveDate, b: NaiveDate| {
            let mut d = a;
            while d <= b {
                vacation.push(d);
                d += Duration::days(1);
            }
        };
        push_range(ymd(2, 15), ymd(2, 28));
        push_range(easter + Duration::days(6), easter + Duration::days(19));
        push_range(ymd(7, 6), ymd(8, 31));
        push_range(ymd(10, 20), ymd(11, 2));
        push_range(ymd(12, 20), ymd(12, 31));
        push_range(ymd(1, 1), ymd(1, 3));
        for d in vacation {
            cal.insert(d, false, true);
        }
        let bank = [
            ymd(1, 1),
            easter + Duration::days(1),
            ymd(5, 1),
            ymd(5, 8),
            easter + Duration::days(39),
            easter + Duration::days(50),
            ymd(7, 14),
            ymd(8, 15),
            ymd(11, 1),
            ymd(11, 11),
            ymd(12, 25),
        ];
        for d in bank {
            let vac = cal.days.get(&d).is_some_and(|v| v.1);
            cal.insert(d, true, vac);
        }
    }
    cal.days.retain(|d, _| *d >= start && *d <= end);
    cal
}

/// Regime shift applied to every substation of a fleet, with per-substation
/// multiplier and distortion drawn uniformly from the given ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeShiftSpec {
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub multiplier: (f64, f64),
    pub distortion: (f64, f64),
}

impl RegimeShiftSpec {
    /// Spring 2020 lockdown-like drop in activity.
    pub fn lockdown() -> Self {
        Self {
            start: NaiveDate::from_ymd_opt(2020, 3, 16).unwrap(),
            end: NaiveDate::from_ymd_opt(2020, 5, 11).unwrap(),
            multiplier: (0.7, 0.9),
            distortion: (0.2, 0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetConfig {
    pub n_substations: usize,
    pub n_weather_stations: usize,
    pub start: NaiveDate,
    /// Last generated day (inclusive).
    pub end: NaiveDate,
    #[serde(default)]
    pub seed: u64,
    /// Proportions of Classic, Inverted and Irregular substations.
    #[serde(default = "default_mix")]
    pub class_mix: [f64; 3],
    #[serde(default)]
    pub regime_shift: Option<RegimeShiftSpec>,
    /// Scales every drawn noise level.
    #[serde(default = "one")]
    pub noise_scale: f64,
}

fn default_mix() -> [f64; 3] {
    [0.6, 0.3, 0.1]
}

fn one() -> f64 {
    1.0
}

impl Default for FleetConfig {
    fn default() -> Self {
        Self {
            n_substations: 20,
            n_weather_stations: 5,
            start: NaiveDate::from_ymd_opt(2017, 1, 1).unwrap(),
            end: NaiveDate::from_ymd_opt(2020, 12, 31).unwrap(),
            seed: 0,
            class_mix: default_mix(),
            regime_shift: None,
            noise_scale: 1.0,
        }
    }
}

impl FleetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_substations == 0 || self.n_weather_stations == 0 {
            return Err(Error::Config(
                "fleet needs at least one substation and one weather station".into(),
            ));
        }
        if self.end < self.start {
            return Err(Error::Config(format!(
                "fleet end {} precedes start {}",
                self.end, self.start
            )));
        }
        if self.class_mix.iter().any(|p| !(*p >= 0.0))
            || (self.class_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(
                "class mix proportions must be non-negative and sum to 1".into(),
            ));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::Config("noise scale must be non-negative".into()));
        }
        Ok(())
    }

    /// Classes assigned deterministically by cumulative proportion, so a
    /// 50/50 mix over 10 substations gives exactly five of each.
    fn class_of(&self, index: usize) -> BehaviorClass {
        let u = (index as f64 + 0.5) / self.n_substations as f64;
        let mut acc = 0.0;
        for (p, class) in self.class_mix.iter().zip([
            BehaviorClass::Classic,
            BehaviorClass::Inverted,
            BehaviorClass::Irregular,
        ]) {
            acc += p;
            if u < acc {
                return class;
            }
        }
        BehaviorClass::Irregular
    }
}

fn gaussian_bump(h: f64, center: f64, width: f64) -> f64 {
    // circular distance on the 24 h clock
    let d = (h - center).rem_euclid(24.0);
    let d = d.min(24.0 - d);
    (-0.5 * (d / width).powi(2)).exp()
}

fn normalize_mean(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x /= m);
}

fn draw_daily_profile(class: BehaviorClass, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let hours: Vec<f64> = (0..INSTANTS_PER_DAY).map(|i| i as f64 * 0.5).collect();
    let mut p: Vec<f64> = match class {
        BehaviorClass::Classic => {
            let (m, e) = (rng.random_range(0.2..0.4), rng.random_range(0.3..0.6));
            let (mc, ec) = (rng.random_range(11.0..13.5), rng.random_range(18.5..20.0));
            hours
                .iter()
                .map(|&h| {
                    0.6 + m * gaussian_bump(h, mc, 3.0)
                        + e * gaussian_bump(h, ec, 2.0)
                        + 0.2 * gaussian_bump(h, 8.0, 1.5)
                })
                .collect()
        }
        BehaviorClass::Inverted => {
            let night = rng.random_range(0.5..0.9);
            let center = rng.random_range(1.0..3.5);
            hours
                .iter()
                .map(|&h| {
                    0.6 + night * gaussian_bump(h, center, 2.5) + 0.15 * gaussian_bump(h, 19.0, 2.0)
                })
                .collect()
        }
        BehaviorClass::Irregular => {
            let harmonics: Vec<(f64, f64)> = (1..=4)
                .map(|k| {
                    (
                        rng.random_range(-0.25..0.25) / k as f64,
                        rng.random_range(0.0..2.0 * PI),
                    )
                })
                .collect();
            hours
                .iter()
                .map(|&h| {
                    1.0 + harmonics
                        .iter()
                        .enumerate()
                        .map(|(k, (a, ph))| a * (2.0 * PI * (k + 1) as f64 * h / 24.0 + ph).cos())
                        .sum::<f64>()
                })
                .collect()
        }
    };
    p.iter_mut().for_each(|x| *x = x.max(0.2));
    normalize_mean(&mut p);
    p
}

fn draw_substation(fleet: &FleetConfig, index: usize) -> SubstationGenConfig {
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(fleet.seed, "substation-config", index as u64));
    let class = fleet.class_of(index);
    let location = GeoPoint::new(rng.random_range(43.0..50.5), rng.random_range(-3.5..7.5));
    let base_load = (rng.random_range(2f64.ln()..40f64.ln())).exp();
    let daily_profile = draw_daily_profile(class, &mut rng);
    let jitter = |rng: &mut ChaCha8Rng, v: f64| v * rng.random_range(0.97..1.03);
    let weekly_profile = match class {
        BehaviorClass::Classic => {
            let sat = rng.random_range(0.75..0.9);
            let sun = rng.random_range(0.65..0.8);
            [
                jitter(&mut rng, 0.98),
                1.0,
                1.0,
                1.0,
                jitter(&mut rng, 0.97),
                sat,
                sun,
            ]
        }
        BehaviorClass::Inverted => {
            let we = rng.random_range(0.95..1.1);
            [1.0, 1.0, 1.0, 1.0, 1.0, we, we * jitter(&mut rng, 1.0)]
        }
        BehaviorClass::Irregular => {
            let sat = rng.random_range(0.4..0.8);
            let sun = rng.random_range(0.3..sat);
            [1.0, 1.0, 1.0, 1.0, jitter(&mut rng, 0.95), sat, sun]
        }
    };
    let (noise_lo, noise_hi) = match class {
        BehaviorClass::Irregular => (0.05, 0.08),
        _ => (0.02, 0.04),
    };
    let regime_shift = fleet.regime_shift.map(|spec| RegimeShift {
        start: spec.start,
        end: spec.end,
        multiplier: draw_range(&mut rng, spec.multiplier),
        distortion: draw_range(&mut rng, spec.distortion),
    });
    SubstationGenConfig {
        substation_id: index as SeriesId + 1,
        location,
        class,
        base_load,
        daily_profile,
        weekly_profile,
        vacation_multiplier: rng.random_range(0.85..1.0),
        annual_amplitude: rng.random_range(0.03..0.12),
        yearly_growth: rng.random_range(-0.02..0.04),
        heating: base_load * rng.random_range(0.01..0.035),
        cooling: base_load * rng.random_range(0.0..0.02),
        noise_std: base_load * rng.random_range(noise_lo..noise_hi) * fleet.noise_scale,
        regime_shift,
    }
}

fn draw_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn draw_station(fleet: &FleetConfig, index: usize) -> StationGenConfig {
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(fleet.seed, "station-config", index as u64));
    let lat = rng.random_range(43.0..50.5);
    let lon = rng.random_range(-3.5..7.5);
    StationGenConfig {
        station_id: index as SeriesId + 1,
        location: GeoPoint::new(lat, lon),
        mean_temp: 12.5 - 0.6 * (lat - 46.5) + rng.random_range(-0.5..0.5),
        annual_amplitude: 6.5 + 0.25 * (lon + 3.5) + rng.random_range(-0.5..0.5),
        daily_amplitude: rng.random_range(3.0..5.0),
        persistence: 0.97,
        anomaly_std: rng.random_range(2.0..3.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSubstation {
    pub config: SubstationGenConfig,
    pub station_id: SeriesId,
    pub noise_seed: u64,
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestStation {
    pub config: StationGenConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetManifest {
    pub schema: String,
    pub fleet: FleetConfig,
    pub stations: Vec<ManifestStation>,
    pub substations: Vec<ManifestSubstation>,
    pub total_points: usize,
    pub clamped_points: usize,
}

impl FleetManifest {
    pub fn clamping_rate(&self) -> f64 {
        self.clamped_points as f64 / self.total_points.max(1) as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.schema != FLEET_MANIFEST_SCHEMA {
            return Err(Error::invalid(format!("unexpected schema `{}`", m.schema)));
        }
        Ok(m)
    }
}

/// A generated fleet held in memory. Weather is kept at its native 3-hour
/// resolution, as written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Fleet {
    pub loads: Vec<LoadSeries>,
    pub weather: Vec<WeatherSeries>,
    pub calendar: Calendar,
    pub manifest: FleetManifest,
}

pub fn generate_fleet(config: &FleetConfig) -> Result<Fleet> {
    config.validate()?;
    let stations: Vec<ManifestStation> = (0..config.n_weather_stations)
        .map(|i| ManifestStation {
            config: draw_station(config, i),
            seed: derive_seed(config.seed, "station-noise", i as u64),
        })
        .collect();
    let weather: Vec<WeatherSeries> = stations
        .iter()
        .map(|s| generate_weather(&s.config, config.start, config.end, s.seed))
        .collect::<Result<_>>()?;
    let fine: Vec<WeatherSeries> = weather
        .iter()
        .map(interpolate_weather)
        .collect::<Result<_>>()?;
    let calendar = french_calendar(config.start, config.end);
    let station_points: Vec<(SeriesId, GeoPoint)> = stations
        .iter()
        .map(|s| (s.config.station_id, s.config.location))
        .collect();

    let mut loads = Vec::with_capacity(config.n_substations);
    let mut substations = Vec::with_capacity(config.n_substations);
    let (mut total, mut clamped_total) = (0, 0);
    for i in 0..config.n_substations {
        let sub = draw_substation(config, i);
        let station_id = assign_closest_station(&sub.location, &station_points)?;
        let w = fine
            .iter()
            .find(|w| w.station_id == station_id)
            .expect("assigned station exists");
        let noise_seed = derive_seed(config.seed, "substation-noise", i as u64);
        let generated =
            generate_substation(&sub, w, &calendar, config.start, config.end, noise_seed)?;
        total += generated.series.points.len();
        clamped_total += generated.clamped;
        substations.push(ManifestSubstation {
            config: sub,
            station_id,
            noise_seed,
            clamped: generated.clamped,
        });
        loads.push(generated.series);
    }
    Ok(Fleet {
        loads,
        weather,
        calendar,
        manifest: FleetManifest {
            schema: FLEET_MANIFEST_SCHEMA.into(),
            fleet: config.clone(),
            stations,
            substations,
            total_points: total,
            clamped_points: clamped_total,
        },
    })
}

/// Recomputes one substation from the manifest alone.
pub fn regenerate_substation(
    manifest: &FleetManifest,
    substation_id: SeriesId,
) -> Result<LoadSeries> {
    let entry = manifest
        .substations
        .iter()
        .find(|s| s.config.substation_id == substation_id)
        .ok_or_else(|| {
            Error::MissingArtifact(format!("substation {substation_id} not in manifest"))
        })?;
    let station = manifest
        .stations
        .iter()
        .find(|s| s.config.station_id == entry.station_id)
        .ok_or_else(|| {
            Error::MissingArtifact(format!("station {} not in manifest", entry.station_id))
        })?;
    let fleet = &manifest.fleet;
    let weather = interpolate_weather(&generate_weather(
        &station.config,
        fleet.start,
        fleet.end,
        station.seed,
    )?)?;
    let calendar = french_calendar(fleet.start, fleet.end);
    Ok(generate_substation(
        &entry.config,
        &weather,
        &calendar,
        fleet.start,
        fleet.end,
        entry.noise_seed,
    )?
    .series)
}

/// Layout of a fleet on disk.
pub struct FleetPaths;

impl FleetPaths {
    pub const LOAD_DIR: &'static str = "load";
    pub const WEATHER_DIR: &'static str = "weather";
    pub const CALENDAR: &'static str = "calendar.csv";
    pub const MANIFEST: &'static str = "manifest.json";
}

/// Writes `load/substation_<id>.csv`, `weather/station_<id>.csv`,
/// `calendar.csv` and `manifest.json` under `dir`.
pub fn write_fleet(fleet: &Fleet, dir: &Path) -> Result<()> {
    use crate::io::{create_file, write_calendar_csv, write_load_csv, write_weather_csv};
    use std::io::Write as _;
    for s in &fleet.loads {
        let path = dir
            .join(FleetPaths::LOAD_DIR)
            .join(format!("substation_{:05}.csv", s.substation_id));
        write_load_csv(create_file(&path)?, std::slice::from_ref(s))?;
    }
    for w in &fleet.weather {
        let path = dir
            .join(FleetPaths::WEATHER_DIR)
            .join(format!("station_{:04}.csv", w.station_id));
        write_weather_csv(create_file(&path)?, std::slice::from_ref(w))?;
    }
    write_calendar_csv(
        create_file(&dir.join(FleetPaths::CALENDAR))?,
        &fleet.calendar,
    )?;
    let path = dir.join(FleetPaths::MANIFEST);
    let mut f = create_file(&path)?;
    f.write_all(fleet.manifest.to_json()?.as_bytes())
        .map_err(|e| Error::io(&path, e))?;
    f.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}
