//! Acceptance criteria, one line each. Runs without the libtest harness so
//! the verdicts always show in the output:
//!
//! ```text
//! cargo test --test acceptance            # all criteria
//! cargo test --test acceptance -- 6 9     # a subset, by number
//! ```

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use chrono::{Datelike, Days, NaiveDate};
use frucast::aggregation::{
    aggregate_series, best_expert_oracle, convex_oracle, fixed_weights_loss, AggregationState,
    ConvexOracleConfig, LossKind,
};
use frucast::eval::{median, nmae};
use frucast::features::{
    compute_time_of_year, CalendarInfo, FeatureFrame, FeatureRow, LagConfig, SeriesId, Timestamp,
};
use frucast::gam::{fit_gam, GamConfig, GamFormula, Term, TermSpec, Variant};
use frucast::kalman::{
    dynamic_init, filter_matrix, greedy_variance_search_matrix, static_params, EffectMatrix,
};
use frucast::splines::BasisKind;
use frucast::synthgen::{generate_fleet, FleetConfig, RegimeShiftSpec};
use frucast::transfer::{
    grid_search_experts, run_pipeline, Dataset, FitConfig, Method, ModelStore, PipelinePlan,
    RunOptions,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

fn timestamps(n: usize) -> Vec<Timestamp> {
    (0..n as i64).map(Timestamp::from_half_hour_index).collect()
}

fn gauss(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    Normal::new(0.0, sd).unwrap().sample(rng)
}

/// Static Kalman predictions against ridge regression solved directly.
fn static_kalman_is_ridge() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let dim = rng.random_range(1..=10);
        let len = rng.random_range(dim + 1..=500);
        let theta: Vec<f64> = (0..dim).map(|_| gauss(&mut rng, 2.0)).collect();
        let f: Vec<f64> = (0..len * dim).map(|_| gauss(&mut rng, 1.0)).collect();
        let y: Vec<f64> = (0..len)
            .map(|t| {
                (0..dim).map(|d| theta[d] * f[t * dim + d]).sum::<f64>() + gauss(&mut rng, 0.5)
            })
            .collect();
        let m = EffectMatrix::new(
            dim,
            timestamps(len),
            f.clone(),
            y.iter().map(|v| Some(*v)).collect(),
        )
        .unwrap();
        let kalman = filter_matrix(&m, &static_params(dim).unwrap(), false)
            .unwrap()
            .predictions;

        let mut gram = DMatrix::<f64>::identity(dim, dim);
        let mut rhs = DVector::<f64>::zeros(dim);
        for t in 0..len {
            let ft = DVector::from_column_slice(&f[t * dim..(t + 1) * dim]);
            let coef = gram.clone().cholesky().unwrap().solve(&rhs);
            worst = worst.max((coef.dot(&ft) - kalman[t]).abs());
            gram += &ft * ft.transpose();
            rhs += &ft * y[t];
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst <= 1e-8 && elapsed < Duration::from_secs(10),
        format!("max |kalman - ridge| = {worst:.2e} over 50 instances (<= 1e-8), {elapsed:.1?} (< 10 s)"),
    )
}

fn fleet_dataset(config: &FleetConfig, train_end: NaiveDate, instants: &[u8]) -> Dataset {
    let fleet = generate_fleet(config).unwrap();
    Dataset::build_for_instants(
        &fleet.loads,
        &fleet.weather,
        &fleet.calendar,
        LagConfig::default(),
        train_end,
        Some(instants),
    )
    .unwrap()
}

fn run(
    plan: &PipelinePlan,
    data: &Dataset,
    store: &mut ModelStore,
    hybrid: bool,
) -> frucast::transfer::PipelineOutput {
    let options = RunOptions {
        fit: FitConfig::default(),
        fit_missing: true,
        hybrid_states: hybrid,
    };
    let out = run_pipeline(plan, data, store, &options).unwrap();
    assert!(
        out.failures.is_empty(),
        "target failures: {:?}",
        out.failures
    );
    out
}

/// Aggregated Kalman experts sharing one GAM equal a single adapted GAM whose
/// state is the weight-averaged expert state.
fn hybrid_state_identity() -> Verdict {
    let config = FleetConfig {
        n_substations: 4,
        n_weather_stations: 2,
        start: ymd(2018, 1, 1),
        end: ymd(2019, 12, 31),
        seed: 7,
        ..Default::default()
    };
    let data = fleet_dataset(&config, ymd(2019, 6, 30), &[20]);
    let ids = data.ids();
    let plan =
        PipelinePlan::new(Method::AggKalmanTl, 3, ids.clone(), ids, 7).with_instants(vec![20]);
    let out = run(&plan, &data, &mut ModelStore::new(), true);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let target = &out.targets[rng.random_range(0..out.targets.len())];
        let o = &target.instants[0];
        let t = rng.random_range(0..o.forecasts.len());
        let h = o.hybrid_states.as_ref().unwrap();
        let f = o.effects.as_ref().unwrap();
        let dim = h.len() / o.forecasts.len();
        let hybrid: f64 = (0..dim).map(|d| h[t * dim + d] * f[t * dim + d]).sum();
        worst = worst.max((hybrid - o.forecasts[t]).abs());
    }
    verdict(
        worst <= 1e-10,
        format!("max |aggregate - hybrid state forecast| = {worst:.2e} on 100 steps (<= 1e-10)"),
    )
}

/// Three bounded experts, the first unbiased and nearly exact.
fn mlpoly_regret() -> Verdict {
    let len = 2000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut f = Vec::with_capacity(len * 3);
    let mut y = Vec::with_capacity(len);
    for _ in 0..len {
        let yt: f64 = rng.random_range(0.0..0.6);
        f.push((yt + gauss(&mut rng, 0.01)).clamp(0.0, 1.0));
        f.push((yt + 0.3).clamp(0.0, 1.0));
        f.push((yt + 0.15 + gauss(&mut rng, 0.05)).clamp(0.0, 1.0));
        y.push(yt);
    }
    let y_obs: Vec<Option<f64>> = y.iter().map(|v| Some(*v)).collect();
    let run = aggregate_series(AggregationState::new(3).unwrap(), &f, &y_obs).unwrap();
    let agg_loss: f64 = run
        .predictions
        .iter()
        .zip(&y)
        .map(|(p, y)| (p - y).powi(2))
        .sum();
    let best = best_expert_oracle(&f, &y, 3, LossKind::Squared).unwrap();
    // losses of values in [0, 1] lie in [0, 1]
    let slack = 0.05 * 1.0 * len as f64;
    // With linearized losses the dominated experts' regret increments have
    // zero mean once the mixture sits on the dominant expert, so their
    // weights flicker back; the weight is judged on its average from round
    // 500 on. Plain losses keep a negative drift and are judged pointwise.
    let mean_after: f64 =
        (500..len).map(|t| run.weights_at(t)[0]).sum::<f64>() / (len - 500) as f64;
    let settle = |run: &frucast::aggregation::AggregationRun| {
        (0..len)
            .rev()
            .find(|&t| run.weights_at(t)[0] < 0.99)
            .map_or(0, |t| t + 1)
    };
    let plain = aggregate_series(
        AggregationState::with_loss(3, LossKind::Squared, false).unwrap(),
        &f,
        &y_obs,
    )
    .unwrap();
    let plain_settled = settle(&plain);
    verdict(
        best.weights[0] == 1.0
            && agg_loss <= best.cumulative_loss + slack
            && mean_after >= 0.99
            && plain_settled <= 500,
        format!(
            "aggregation loss {agg_loss:.3} vs best expert {:.3} + slack {slack}; dominant weight averages {mean_after:.4} \
             over rounds 500..{len} (>= 0.99, pointwise from round {}); plain-loss weight >= 0.99 from round {plain_settled} (<= 500)",
            best.cumulative_loss,
            settle(&run)
        ),
    )
}

/// Oracle ordering on random instances and a brute-force check of the
/// two-expert convex oracle.
fn oracle_ordering() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut convex_ok, mut regret_ok, mut literal, mut total) = (0, 0, 0, 0);
    for _ in 0..40 {
        let e = rng.random_range(2..=5);
        let len = 300;
        let bias: Vec<f64> = (0..e).map(|_| rng.random_range(-0.3..0.3)).collect();
        let noise: Vec<f64> = (0..e).map(|_| rng.random_range(0.01..0.2)).collect();
        let mut f = Vec::with_capacity(len * e);
        let mut y = Vec::with_capacity(len);
        for _ in 0..len {
            let yt: f64 = rng.random_range(0.0..1.0);
            for k in 0..e {
                f.push(yt + bias[k] + gauss(&mut rng, noise[k]));
            }
            y.push(yt);
        }
        let best = best_expert_oracle(&f, &y, e, LossKind::Squared).unwrap();
        let convex =
            convex_oracle(&f, &y, e, LossKind::Squared, &ConvexOracleConfig::default()).unwrap();
        let run = aggregate_series(
            AggregationState::new(e).unwrap(),
            &f,
            &y.iter().map(|v| Some(*v)).collect::<Vec<_>>(),
        )
        .unwrap();
        let agg: f64 = run
            .predictions
            .iter()
            .zip(&y)
            .map(|(p, y)| (p - y).powi(2))
            .sum();
        let range = f
            .iter()
            .enumerate()
            .map(|(i, v)| (v - y[i / e]).powi(2))
            .fold(0.0, f64::max);
        let slack = 0.05 * range * len as f64;
        total += 1;
        convex_ok += (convex.cumulative_loss <= best.cumulative_loss) as usize;
        regret_ok += (agg <= best.cumulative_loss + slack) as usize;
        literal += (best.cumulative_loss <= agg + slack) as usize;
    }

    let mut worst_w: f64 = 0.0;
    let mut worst_loss: f64 = 0.0;
    for _ in 0..10 {
        let len = 200;
        let mut f = Vec::with_capacity(len * 2);
        let mut y = Vec::with_capacity(len);
        let (b0, b1) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        for _ in 0..len {
            let yt: f64 = rng.random_range(0.0..1.0);
            f.push(yt + b0 + gauss(&mut rng, 0.1));
            f.push(yt + b1 + gauss(&mut rng, 0.1));
            y.push(yt);
        }
        let loss = |w: f64| fixed_weights_loss(&f, &y, &[w, 1.0 - w], LossKind::Squared);
        let coarse = (0..=1000)
            .map(|i| i as f64 / 1000.0)
            .min_by(|a, b| loss(*a).total_cmp(&loss(*b)))
            .unwrap();
        let lo = (coarse - 1e-3).max(0.0);
        let fine = (0..=20_000)
            .map(|i| (lo + i as f64 * 1e-7).min(1.0))
            .min_by(|a, b| loss(*a).total_cmp(&loss(*b)))
            .unwrap();
        let convex =
            convex_oracle(&f, &y, 2, LossKind::Squared, &ConvexOracleConfig::default()).unwrap();
        worst_w = worst_w.max((convex.weights[0] - fine).abs());
        worst_loss = worst_loss.max((convex.cumulative_loss - loss(fine)).abs());
    }
    verdict(
        convex_ok == total && regret_ok == total && worst_w <= 1e-6 && worst_loss <= 1e-6,
        format!(
            "convex <= best on {convex_ok}/{total}, aggregation <= best + slack on {regret_ok}/{total} \
             (best <= aggregation + slack on {literal}/{total}); 2-expert grid: |dw| {worst_w:.1e}, |dloss| {worst_loss:.1e} (<= 1e-6)"
        ),
    )
}

/// Monotone accepted likelihoods, and the drifting coordinate ends with the
/// largest state variance.
fn greedy_search() -> Verdict {
    let start = Instant::now();
    let mut monotone = 0;
    let mut drift_found = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let dim = 4;
        let len = 1000;
        let drifting = 1 + (seed as usize % 3);
        let mut theta: Vec<f64> = (0..dim).map(|_| gauss(&mut rng, 1.0)).collect();
        let mut f = Vec::with_capacity(len * dim);
        let mut y = Vec::with_capacity(len);
        for _ in 0..len {
            let row: Vec<f64> = std::iter::once(1.0)
                .chain((1..dim).map(|_| gauss(&mut rng, 1.0)))
                .collect();
            y.push(Some(
                row.iter().zip(&theta).map(|(a, b)| a * b).sum::<f64>() + gauss(&mut rng, 0.5),
            ));
            f.extend(row);
            theta[drifting] += gauss(&mut rng, 0.1);
        }
        let m = EffectMatrix::new(dim, timestamps(len), f, y).unwrap();
        let result =
            greedy_variance_search_matrix(&m, &dynamic_init(dim).unwrap(), &Default::default())
                .unwrap();
        monotone += result.accepted.windows(2).all(|w| w[1] >= w[0]) as usize;
        let q = &result.params.q;
        drift_found += (0..dim)
            .filter(|&d| d != drifting)
            .all(|d| q[drifting] > q[d]) as usize;
    }
    let elapsed = start.elapsed();
    verdict(
        monotone == 20 && drift_found >= 18 && elapsed < Duration::from_secs(120),
        format!(
            "non-decreasing likelihood on {monotone}/20; drifting q largest in {drift_found}/20 (>= 18); {elapsed:.1?} (< 2 min)"
        ),
    )
}

fn summary(values: &[f64]) -> (f64, f64) {
    let m = median(values).unwrap();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
        / (values.len() - 1).max(1) as f64)
        .sqrt();
    (m, sd / (values.len() as f64).sqrt())
}

/// Median NMAE against the number of aggregated experts.
fn elbow() -> Verdict {
    let start = Instant::now();
    let config = FleetConfig {
        n_substations: 60,
        n_weather_stations: 8,
        start: ymd(2018, 1, 1),
        end: ymd(2020, 12, 31),
        seed: 60,
        ..Default::default()
    };
    let instants = [16, 36];
    let data = fleet_dataset(&config, ymd(2019, 12, 31), &instants);
    let ids = data.ids();
    let candidates = [1, 3, 6, 9, 12];
    let result = grid_search_experts(
        Method::AggGamKalmanTl,
        &candidates,
        10,
        &ids,
        &ids,
        &instants,
        61,
        &data,
        &mut ModelStore::new(),
        &FitConfig::default(),
    )
    .unwrap();
    let stats: Vec<(f64, f64)> = result.medians.iter().map(|m| summary(m)).collect();
    let monotone = stats.windows(2).all(|w| w[1].0 <= w[0].0 + w[0].1 + w[1].1);
    let gain_1_9 = stats[0].0 - stats[3].0;
    let gain_9_12 = stats[3].0 - stats[4].0;
    let elapsed = start.elapsed();
    let curve: Vec<String> = candidates
        .iter()
        .zip(&stats)
        .map(|(n, s)| format!("n={n}: {:.3}", s.0))
        .collect();
    verdict(
        monotone && gain_1_9 > 0.0 && gain_9_12 < 0.25 * gain_1_9 && elapsed < Duration::from_secs(900),
        format!(
            "median NMAE % [{}]; gain 9->12 {gain_9_12:.3} vs 25% of gain 1->9 {:.3}; {elapsed:.0?} (< 15 min)",
            curve.join(", "),
            0.25 * gain_1_9
        ),
    )
}

fn window_nmae(out: &frucast::transfer::PipelineOutput, from: NaiveDate, to: NaiveDate) -> f64 {
    let scores: Vec<f64> = out
        .targets
        .iter()
        .map(|t| {
            let rows: Vec<_> = t
                .forecast_series()
                .into_iter()
                .filter(|r| r.0.date >= from && r.0.date <= to)
                .collect();
            nmae(
                &rows.iter().map(|r| r.2).collect::<Vec<_>>(),
                &rows.iter().map(|r| r.1).collect::<Vec<_>>(),
            )
            .unwrap()
        })
        .collect();
    median(&scores).unwrap()
}

/// Adapted transfer against plain transferred GAMs inside a lockdown-like
/// regime shift.
fn adaptation_value() -> Verdict {
    let mut wins = 0;
    let mut cells = Vec::new();
    for seed in 0..10u64 {
        let config = FleetConfig {
            n_substations: 20,
            n_weather_stations: 4,
            start: ymd(2018, 1, 1),
            end: ymd(2020, 5, 31),
            seed: 700 + seed,
            regime_shift: Some(RegimeShiftSpec::lockdown()),
            ..Default::default()
        };
        let instants = vec![24];
        let data = fleet_dataset(&config, ymd(2019, 12, 31), &instants);
        let ids = data.ids();
        let mut store = ModelStore::new();
        let mut score = |method| {
            let plan = PipelinePlan::new(method, 6, ids.clone(), ids.clone(), seed)
                .with_instants(instants.clone());
            window_nmae(
                &run(&plan, &data, &mut store, false),
                ymd(2020, 3, 16),
                ymd(2020, 5, 11),
            )
        };
        let gam = score(Method::AggGamTl);
        let kalman = score(Method::AggGamKalmanTl);
        wins += (kalman < gam) as usize;
        cells.push(format!("{kalman:.1}/{gam:.1}"));
    }
    verdict(
        wins >= 9,
        format!(
            "in-window median NMAE %, adapted/plain per seed [{}]; adapted lower in {wins}/10 (>= 9)",
            cells.join(" ")
        ),
    )
}

/// Instrumented fit counts of the three aggregations.
fn frugality_ledger() -> Verdict {
    let config = FleetConfig {
        n_substations: 60,
        n_weather_stations: 6,
        start: ymd(2018, 7, 1),
        end: ymd(2020, 1, 31),
        seed: 8,
        ..Default::default()
    };
    let instants = vec![24];
    let data = fleet_dataset(&config, ymd(2019, 12, 31), &instants);
    let ids: Vec<SeriesId> = data.ids();
    let mut cells = Vec::new();
    let mut pass = ids.len() == 60;
    for (method, n, expected) in [
        (Method::AggGamTl, 9, (9, 0)),
        (Method::AggGamKalmanTl, 9, (9, 9)),
        (Method::AggKalmanTl, 6, (60, 6)),
    ] {
        let mut store = ModelStore::new();
        let plan = PipelinePlan::new(method, n, ids.clone(), ids.clone(), 80)
            .with_instants(instants.clone());
        let out = run(&plan, &data, &mut store, false);
        let counted = (store.counters.gam_fits, store.counters.variance_searches);
        let reported = (out.cost.gam_fits, out.cost.variance_searches);
        let executed = (
            out.cost.executed_gam_fits,
            out.cost.executed_variance_searches,
        );
        pass &= counted == expected && reported == expected && executed == expected;
        cells.push(format!(
            "{method}: counted {counted:?} reported {reported:?}"
        ));
    }
    verdict(
        pass,
        format!("{} (expected (9, 0), (9, 9), (60, 6))", cells.join("; ")),
    )
}

/// Additive truth recovered by a GAM with GCV-selected smoothing.
fn gam_recovery() -> Verdict {
    let formula = GamFormula::new(
        Variant::Custom,
        vec![
            Term {
                name: "s(ToY)".into(),
                spec: TermSpec::Smooth {
                    covariate: frucast::gam::Covariate::ToY,
                    kind: BasisKind::CyclicCubic,
                    dimension: 20,
                    domain: Some((0.0, 1.0)),
                    by: None,
                },
            },
            Term {
                name: "s(Temp)".into(),
                spec: TermSpec::Smooth {
                    covariate: frucast::gam::Covariate::Temp,
                    kind: BasisKind::CubicRegression,
                    dimension: 10,
                    domain: None,
                    by: None,
                },
            },
            Term {
                name: "DayType".into(),
                spec: TermSpec::Categorical {
                    factor: frucast::gam::Factor::DayType,
                },
            },
        ],
    )
    .unwrap();
    let config = GamConfig::default();
    let day_effect = [0.0, 0.4, 0.8, -1.5, -2.5];
    let toy_truth = |x: f64| {
        3.0 * (2.0 * std::f64::consts::PI * x).sin() + 1.0 * (4.0 * std::f64::consts::PI * x).cos()
    };
    let temp_truth = |t: f64| 0.3 * (15.0 - t).max(0.0) + 0.2 * (t - 22.0).max(0.0);

    let mut worst_rel: f64 = 0.0;
    let mut interior = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let first = ymd(2010, 1, 1);
        let rows: Vec<FeatureRow> = (0..2000u64)
            .map(|i| {
                let date = first + Days::new(i);
                let timestamp = Timestamp::new(date, 24).unwrap();
                let toy = compute_time_of_year(timestamp);
                let temp = 12.0 - 9.0 * (2.0 * std::f64::consts::PI * (toy - 0.05)).cos()
                    + gauss(&mut rng, 4.0);
                let calendar = CalendarInfo::new(date, false, false);
                let y = 20.0
                    + toy_truth(toy)
                    + temp_truth(temp)
                    + day_effect[calendar.day_type.index()]
                    + gauss(&mut rng, 0.5);
                FeatureRow {
                    timestamp,
                    y: Some(y),
                    toy,
                    trend: i as f64,
                    temp,
                    temp95: temp,
                    temp99: temp,
                    temp_min: temp,
                    temp_max: temp,
                    load_2d: None,
                    load_1w: None,
                    calendar,
                }
            })
            .collect();
        assert!(rows
            .iter()
            .any(|r| r.timestamp.date.weekday() == chrono::Weekday::Sat));
        let frame = FeatureFrame {
            substation_id: 1,
            station_id: 1,
            rows,
            dropped_rows: 0,
        };
        let model = fit_gam(&frame, &formula, 24, &config).unwrap();
        let fitted: Vec<Vec<f64>> = frame
            .rows
            .iter()
            .map(|r| model.effects(r).unwrap())
            .collect();
        let truths: [Box<dyn Fn(&FeatureRow) -> f64>; 3] = [
            Box::new(|r| toy_truth(r.toy)),
            Box::new(|r| temp_truth(r.temp)),
            Box::new(|r| day_effect[r.calendar.day_type.index()]),
        ];
        for (d, truth) in truths.iter().enumerate() {
            let t: Vec<f64> = frame.rows.iter().map(|r| truth(r)).collect();
            let g: Vec<f64> = fitted.iter().map(|v| v[d]).collect();
            let n = t.len() as f64;
            let (tm, gm) = (t.iter().sum::<f64>() / n, g.iter().sum::<f64>() / n);
            let rmse = (t
                .iter()
                .zip(&g)
                .map(|(a, b)| ((a - tm) - (b - gm)).powi(2))
                .sum::<f64>()
                / n)
                .sqrt();
            let range = t.iter().cloned().fold(f64::MIN, f64::max)
                - t.iter().cloned().fold(f64::MAX, f64::min);
            worst_rel = worst_rel.max(rmse / range);
        }
        let at_edge = |l: f64| {
            (l / config.lambda_min - 1.0).abs() < 1e-9 || (l / config.lambda_max - 1.0).abs() < 1e-9
        };
        let smooth_lambdas: Vec<f64> = model.terms[..2]
            .iter()
            .flat_map(|t| t.lambdas.clone())
            .collect();
        interior += smooth_lambdas.iter().all(|&l| !at_edge(l)) as usize;
    }
    verdict(
        worst_rel <= 0.05 && interior >= 8,
        format!("worst effect RMSE {:.2}% of range (<= 5%); interior lambdas in {interior}/10 seeds (>= 8)", 100.0 * worst_rel),
    )
}

/// The CLI sequence with one and three worker threads.
fn determinism() -> Verdict {
    let config = r#"
seed = 10

[fleet]
n_substations = 5
n_weather_stations = 2
start = 2018-01-01
end = 2020-03-31

[periods]
train_end = 2019-06-30
validation_end = 2019-12-31

[plan]
method = "agg-gam-kalman-tl"
n_experts = 3
sources = [1, 2, 3, 4]
instants = [14, 38]
"#;
    let root = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for jobs in ["1", "3"] {
        let dir = root.path().join(format!("jobs{jobs}"));
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = dir.join("run.toml");
        std::fs::write(&cfg, config).unwrap();
        let cfg = cfg.to_str().unwrap();
        for args in [
            vec!["generate"],
            vec!["fit", "gam"],
            vec!["fit", "kalman"],
            vec!["forecast"],
            vec!["fit", "gam", "--method", "agg-kalman-tl"],
            vec!["fit", "kalman", "--method", "agg-kalman-tl"],
            vec!["forecast", "--method", "agg-kalman-tl"],
        ] {
            let mut argv = vec!["frucast", "--config", cfg, "--jobs", jobs];
            argv.extend(args);
            assert_eq!(frucast::cli::run(argv.clone()), 0, "{argv:?}");
        }
        let read =
            |m: &str| std::fs::read(dir.join("output/forecasts").join(format!("{m}.csv"))).unwrap();
        outputs.push((read("agg-gam-kalman-tl"), read("agg-kalman-tl")));
    }
    let same = outputs[0] == outputs[1];
    let rows = outputs[0].0.iter().filter(|&&b| b == b'\n').count();
    verdict(
        same && rows > 1,
        format!(
            "forecast CSVs (2 methods, {} rows each) byte-identical with --jobs 1 and 3: {same}",
            rows - 1
        ),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let criteria: [(usize, &str, fn() -> Verdict); 10] = [
        (1, "static Kalman equals ridge", static_kalman_is_ridge),
        (2, "hybrid state coefficients", hybrid_state_identity),
        (3, "ML-Poly regret and convergence", mlpoly_regret),
        (4, "oracle ordering", oracle_ordering),
        (5, "greedy variance search", greedy_search),
        (6, "elbow in the number of experts", elbow),
        (7, "adaptation value under regime shift", adaptation_value),
        (8, "frugality ledger", frugality_ledger),
        (9, "GAM recovery", gam_recovery),
        (10, "determinism across --jobs", determinism),
    ];
    std::env::set_var("FRUCAST_LOG", "error");
    let mut failed = Vec::new();
    for (n, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        println!(
            "criterion {n:>2} {} | {name} | {} | {:.1}s",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
        if !v.pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
