//! Generates a small synthetic fleet and writes it in the on-disk layout the
//! CLI reads.
//!
//! ```text
//! cargo run --example generate_fleet -- /tmp/fleet
//! ```

use chrono::NaiveDate;
use frucast::synthgen::{generate_fleet, write_fleet, FleetConfig, RegimeShiftSpec};

fn main() -> frucast::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "fleet".into());
    let config = FleetConfig {
        n_substations: 8,
        n_weather_stations: 3,
        start: NaiveDate::from_ymd_opt(2019, 1, 1).unwrap(),
        end: NaiveDate::from_ymd_opt(2020, 6, 30).unwrap(),
        seed: 2024,
        regime_shift: Some(RegimeShiftSpec::lockdown()),
        ..Default::default()
    };
    let fleet = generate_fleet(&config)?;
    for load in &fleet.loads {
        let mw: Vec<f64> = load.points.iter().filter_map(|p| p.load_mw).collect();
        let mean = mw.iter().sum::<f64>() / mw.len() as f64;
        println!(
            "substation {:>2}: {} half-hours, mean {:.2} MW, peak {:.2} MW",
            load.substation_id,
            load.points.len(),
            mean,
            mw.iter().cloned().fold(f64::MIN, f64::max)
        );
    }
    println!(
        "{} weather stations, clamped share {:.4}%",
        fleet.weather.len(),
        100.0 * fleet.manifest.clamping_rate()
    );
    write_fleet(&fleet, std::path::Path::new(&out))?;
    println!("written to {out}/");
    Ok(())
}
