//! Scores two methods per evaluation window, adds the hindsight oracles of
//! the aggregation and prints quartiles of the per-target NMAE.

use chrono::NaiveDate;
use frucast::eval::{
    oracle_series, segment_scores, ExpertPanel, PeriodSegmentation, ScoredSeries, Window,
};
use frucast::features::LagConfig;
use frucast::synthgen::{generate_fleet, FleetConfig, RegimeShiftSpec};
use frucast::transfer::{run_pipeline, Dataset, Method, ModelStore, PipelinePlan, RunOptions};

fn main() -> frucast::Result<()> {
    let date = |y, m, d| NaiveDate::from_ymd_opt(y, m, d).unwrap();
    let fleet = generate_fleet(&FleetConfig {
        n_substations: 10,
        n_weather_stations: 3,
        start: date(2018, 1, 1),
        end: date(2020, 9, 30),
        seed: 21,
        regime_shift: Some(RegimeShiftSpec::lockdown()),
        ..Default::default()
    })?;
    let instants = vec![22];
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
    let options = RunOptions {
        fit_missing: true,
        ..Default::default()
    };

    let mut series = Vec::new();
    let mut panels = Vec::new();
    for method in [Method::StGam, Method::AggGamKalmanTl] {
        let plan = PipelinePlan::new(method, 5, ids.clone(), ids.clone(), 4)
            .with_instants(instants.clone());
        let out = run_pipeline(&plan, &data, &mut store, &options)?;
        for target in &out.targets {
            let s = target.forecast_series();
            series.push(ScoredSeries {
                method: method.name().into(),
                target: target.target,
                timestamps: s.iter().map(|r| r.0).collect(),
                y: s.iter().map(|r| r.2).collect(),
                forecasts: s.iter().map(|r| r.1).collect(),
            });
            for o in target.instants.iter().filter(|o| o.aggregation.is_some()) {
                panels.push(ExpertPanel {
                    method: method.name().into(),
                    target: target.target,
                    timestamps: o.timestamps.clone(),
                    y: o.y.clone(),
                    forecasts: o.expert_forecasts.clone(),
                    n_experts: o.experts.len(),
                });
            }
        }
    }
    let windows = PeriodSegmentation::new(vec![
        Window::new("before", date(2020, 1, 1), date(2020, 3, 15)),
        Window::new("lockdown", date(2020, 3, 16), date(2020, 5, 11)),
        Window::new("after", date(2020, 5, 12), date(2020, 9, 30)),
    ])?;
    series.extend(oracle_series(&panels, &windows)?);
    let report = segment_scores(&series, &windows)?;

    println!(
        "{:<40} {:<9} {:>6} {:>6} {:>6}",
        "method", "window", "Q1", "median", "Q3"
    );
    for row in &report.summary {
        if let Some(q) = &row.quartiles {
            println!(
                "{:<40} {:<9} {:>6.2} {:>6.2} {:>6.2}",
                row.method, row.period, q.q1, q.median, q.q3
            );
        }
    }
    Ok(())
}
