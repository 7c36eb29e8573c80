//! Median NMAE of the adapted-transfer aggregation as a function of the
//! number of experts, over repeated random draws of source substations.

use chrono::NaiveDate;
use frucast::features::LagConfig;
use frucast::synthgen::{generate_fleet, FleetConfig};
use frucast::transfer::{grid_search_experts, Dataset, FitConfig, Method, ModelStore};

fn main() -> frucast::Result<()> {
    let date = |y, m, d| NaiveDate::from_ymd_opt(y, m, d).unwrap();
    let fleet = generate_fleet(&FleetConfig {
        n_substations: 16,
        n_weather_stations: 4,
        start: date(2018, 1, 1),
        end: date(2020, 6, 30),
        seed: 9,
        ..Default::default()
    })?;
    let instants = [30];
    let data = Dataset::build_for_instants(
        &fleet.loads,
        &fleet.weather,
        &fleet.calendar,
        LagConfig::default(),
        date(2019, 12, 31),
        Some(&instants),
    )?;
    let ids = data.ids();
    let mut store = ModelStore::new();
    let result = grid_search_experts(
        Method::AggGamKalmanTl,
        &[1, 2, 4, 8],
        5,
        &ids,
        &ids,
        &instants,
        99,
        &data,
        &mut store,
        &FitConfig::default(),
    )?;
    for (n, m) in result.summary() {
        println!("{n:>2} experts: median NMAE {m:.2}%");
    }
    println!(
        "{} GAM fits and {} variance searches in total",
        store.counters.gam_fits, store.counters.variance_searches
    );
    Ok(())
}
