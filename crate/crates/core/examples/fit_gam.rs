//! Fits the short-term per-instant GAM of one synthetic substation and prints
//! the selected smoothing parameters and the out-of-sample error. Two full
//! years of training keep the Trend and time-of-year effects apart.

use chrono::NaiveDate;
use frucast::eval::nmae;
use frucast::features::LagConfig;
use frucast::gam::{fit_gam, GamConfig, GamFormula};
use frucast::synthgen::{generate_fleet, FleetConfig};
use frucast::transfer::Dataset;

fn main() -> frucast::Result<()> {
    let config = FleetConfig {
        n_substations: 1,
        n_weather_stations: 1,
        start: NaiveDate::from_ymd_opt(2018, 1, 1).unwrap(),
        end: NaiveDate::from_ymd_opt(2020, 6, 30).unwrap(),
        seed: 11,
        ..Default::default()
    };
    let fleet = generate_fleet(&config)?;
    let instant = 38; // 19:00
    let train_end = NaiveDate::from_ymd_opt(2019, 12, 31).unwrap();
    let data = Dataset::build_for_instants(
        &fleet.loads,
        &fleet.weather,
        &fleet.calendar,
        LagConfig::default(),
        train_end,
        Some(&[instant]),
    )?;

    let formula = GamFormula::short_term();
    let model = fit_gam(
        &data.training_frame(1)?,
        &formula,
        instant,
        &GamConfig::default(),
    )?;
    println!("intercept {:.3} MW", model.intercept);
    for term in &model.terms {
        let lambdas: Vec<String> = term.lambdas.iter().map(|l| format!("{l:.1e}")).collect();
        println!(
            "{:<24} {:>3} coefficients, lambda [{}]",
            term.name,
            term.coefficients.len(),
            lambdas.join(", ")
        );
    }

    let test: Vec<_> = data
        .frame(1)?
        .rows
        .iter()
        .filter(|r| data.in_test(&r.timestamp))
        .collect();
    let predictions = test
        .iter()
        .map(|r| model.predict_row(r))
        .collect::<frucast::Result<Vec<_>>>()?;
    let y: Vec<Option<f64>> = test.iter().map(|r| r.y).collect();
    println!(
        "test NMAE over {} days: {:.2}%",
        test.len(),
        nmae(&y, &predictions)?
    );
    Ok(())
}
