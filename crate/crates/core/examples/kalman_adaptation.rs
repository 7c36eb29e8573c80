//! Adapts a GAM through a lockdown-like regime shift: the plain GAM, the
//! static Kalman filter (recursive ridge on the GAM effects) and the dynamic
//! filter with variances from the greedy likelihood search.

use chrono::NaiveDate;
use frucast::eval::nmae;
use frucast::features::LagConfig;
use frucast::gam::{fit_gam, GamConfig, GamFormula};
use frucast::kalman::{
    dynamic_init, filter_matrix, greedy_variance_search, static_params, EffectMatrix,
};
use frucast::synthgen::{generate_fleet, FleetConfig, RegimeShiftSpec};
use frucast::transfer::Dataset;

fn main() -> frucast::Result<()> {
    let date = |y, m, d| NaiveDate::from_ymd_opt(y, m, d).unwrap();
    let config = FleetConfig {
        n_substations: 1,
        n_weather_stations: 1,
        start: date(2018, 1, 1),
        end: date(2020, 6, 30),
        seed: 5,
        regime_shift: Some(RegimeShiftSpec::lockdown()),
        ..Default::default()
    };
    let fleet = generate_fleet(&config)?;
    let instant = 24;
    let data = Dataset::build_for_instants(
        &fleet.loads,
        &fleet.weather,
        &fleet.calendar,
        LagConfig::default(),
        date(2019, 12, 31),
        Some(&[instant]),
    )?;
    let training = data.training_frame(1)?;
    let model = fit_gam(
        &training,
        &GamFormula::short_term(),
        instant,
        &GamConfig::default(),
    )?;
    let search = greedy_variance_search(
        &model,
        &training,
        &dynamic_init(model.n_effects() + 1)?,
        &Default::default(),
    )?;
    println!(
        "variance search: {} sweeps, log-likelihood {:.1}, sigma2 {:.3}",
        search.sweeps, search.log_likelihood, search.params.sigma2
    );
    for (name, q) in model
        .effect_names()
        .iter()
        .chain(["bias".to_string()].iter())
        .zip(&search.params.q)
    {
        println!("  q[{name}] = {q:.2e}");
    }

    let m = EffectMatrix::from_model(&model, data.frame(1)?)?;
    let theta = model.reconstruction_theta();
    let gam: Vec<f64> = (0..m.len())
        .map(|t| m.row(t).iter().zip(&theta).map(|(a, b)| a * b).sum())
        .collect();
    let fixed = filter_matrix(&m, &static_params(m.dim)?, false)?.predictions;
    let dynamic = filter_matrix(&m, &search.params, false)?.predictions;

    let lockdown = RegimeShiftSpec::lockdown();
    let rows: Vec<usize> = (0..m.len())
        .filter(|&t| (lockdown.start..=lockdown.end).contains(&m.timestamps[t].date))
        .collect();
    let y: Vec<Option<f64>> = rows.iter().map(|&t| m.y[t]).collect();
    for (name, pred) in [
        ("GAM", &gam),
        ("static Kalman", &fixed),
        ("dynamic Kalman", &dynamic),
    ] {
        let p: Vec<f64> = rows.iter().map(|&t| pred[t]).collect();
        println!("{name:<15} NMAE during the shift: {:.2}%", nmae(&y, &p)?);
    }
    Ok(())
}
