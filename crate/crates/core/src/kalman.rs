//! State-space adaptation of a fitted GAM: `y_t = theta_t' f(x_t) + eps_t`,
//! `theta_{t+1} = theta_t + eta_t`, filtered online.
//!
//! The low-level routines work on an [`EffectMatrix`] (the normalized effect
//! vectors of one substation at one instant) so that variance searches can
//! rerun the filter many times without touching the GAM again.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureFrame, Timestamp};
use crate::gam::GamModel;
use crate::linalg::{dot, Cholesky};

pub const KALMAN_PARAMS_SCHEMA: &str = "kalman_params_v1";

fn default_schema() -> String {
    KALMAN_PARAMS_SCHEMA.to_string()
}

/// Noise variances and prior of the state-space model. `q` is the diagonal of
/// the state-noise covariance. Missing `theta1` means zero, missing `p1` the
/// identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalmanHyperParams {
    #[serde(default = "default_schema")]
    pub schema: String,
    pub sigma2: f64,
    pub q: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta1: Option<Vec<f64>>,
    /// Row-major `dim x dim`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p1: Option<Vec<f64>>,
}

impl KalmanHyperParams {
    pub fn dimension(&self) -> usize {
        self.q.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dimension();
        if d == 0 {
            return Err(Error::invalid("state dimension must be at least 1"));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::invalid(format!(
                "sigma2 must be positive, got {}",
                self.sigma2
            )));
        }
        if self.q.iter().any(|q| !(*q >= 0.0 && q.is_finite())) {
            return Err(Error::invalid(
                "state-noise variances must be finite and non-negative",
            ));
        }
        if let Some(t) = &self.theta1 {
            if t.len() != d {
                return Err(Error::invalid(format!(
                    "theta1 has length {}, expected {d}",
                    t.len()
                )));
            }
        }
        if let Some(p) = &self.p1 {
            if p.len() != d * d {
                return Err(Error::invalid(format!(
                    "P1 has {} entries, expected {}",
                    p.len(),
                    d * d
                )));
            }
            for i in 0..d {
                for j in 0..i {
                    if (p[i * d + j] - p[j * d + i]).abs() > 1e-12 * (1.0 + p[i * d + j].abs()) {
                        return Err(Error::invalid("P1 is not symmetric"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        if p.schema != KALMAN_PARAMS_SCHEMA {
            return Err(Error::invalid(format!("unexpected schema `{}`", p.schema)));
        }
        p.validate()?;
        Ok(p)
    }
}

/// `sigma2 = 1`, `Q = 0`, `P1 = I`, `theta1 = 0`.
pub fn static_params(dimension: usize) -> Result<KalmanHyperParams> {
    if dimension == 0 {
        return Err(Error::invalid("state dimension must be at least 1"));
    }
    Ok(KalmanHyperParams {
        schema: default_schema(),
        sigma2: 1.0,
        q: vec![0.0; dimension],
        theta1: None,
        p1: None,
    })
}

/// Starting point of the variance search: the static setting with every
/// state-noise variance at `1e-6`.
pub fn dynamic_init(dimension: usize) -> Result<KalmanHyperParams> {
    let mut p = static_params(dimension)?;
    p.q.iter_mut().for_each(|q| *q = 1e-6);
    Ok(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub theta_hat: Vec<f64>,
    /// Row-major `dim x dim`.
    pub p: Vec<f64>,
    pub t: usize,
}

impl KalmanState {
    pub fn initial(params: &KalmanHyperParams) -> Self {
        let d = params.dimension();
        let theta_hat = params.theta1.clone().unwrap_or_else(|| vec![0.0; d]);
        let p = params.p1.clone().unwrap_or_else(|| {
            let mut p = vec![0.0; d * d];
            (0..d).for_each(|i| p[i * d + i] = 1.0);
            p
        });
        Self { theta_hat, p, t: 0 }
    }

    pub fn dimension(&self) -> usize {
        self.theta_hat.len()
    }

    /// Predictive variance `f' P f + sigma2`.
    fn innovation_variance(&self, f: &[f64], pf: &mut [f64], sigma2: f64) -> f64 {
        let d = self.dimension();
        for i in 0..d {
            pf[i] = dot(&self.p[i * d..(i + 1) * d], f);
        }
        dot(f, pf) + sigma2
    }

    /// Emits `theta' f` and then assimilates `y` (when present). Returns the
    /// prediction together with the innovation `(error, variance)` when `y`
    /// was observed.
    fn advance(
        &mut self,
        f: &[f64],
        y: Option<f64>,
        q: &[f64],
        sigma2: f64,
        pf: &mut [f64],
    ) -> (f64, Option<(f64, f64)>) {
        let d = self.dimension();
        let pred = dot(&self.theta_hat, f);
        let mut innovation = None;
        if let Some(y) = y {
            let v = self.innovation_variance(f, pf, sigma2);
            let e = y - pred;
            let gain = e / v;
            for i in 0..d {
                self.theta_hat[i] += pf[i] * gain;
            }
            for i in 0..d {
                let a = pf[i] / v;
                for j in 0..d {
                    self.p[i * d + j] -= a * pf[j];
                }
            }
            innovation = Some((e, v));
        }
        for i in 0..d {
            self.p[i * d + i] += q[i];
        }
        for i in 0..d {
            for j in 0..i {
                let avg = 0.5 * (self.p[i * d + j] + self.p[j * d + i]);
                self.p[i * d + j] = avg;
                self.p[j * d + i] = avg;
            }
        }
        self.t += 1;
        (pred, innovation)
    }
}

/// One filter step. The prediction uses only the current state and `f_t`.
pub fn kalman_step(
    state: &KalmanState,
    f_t: &[f64],
    y_t: Option<f64>,
    params: &KalmanHyperParams,
) -> Result<(f64, KalmanState)> {
    let d = state.dimension();
    if f_t.len() != d || params.dimension() != d {
        return Err(Error::invalid(format!(
            "dimension mismatch: state {d}, effect vector {}, params {}",
            f_t.len(),
            params.dimension()
        )));
    }
    if f_t.iter().any(|v| !v.is_finite()) || y_t.is_some_and(|y| !y.is_finite()) {
        return Err(Error::NonFinite("Kalman step input".into()));
    }
    let mut next = state.clone();
    let mut pf = vec![0.0; d];
    let (pred, _) = next.advance(f_t, y_t, &params.q, params.sigma2, &mut pf);
    Ok((pred, next))
}

/// Effect vectors of consecutive observations at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectMatrix {
    pub dim: usize,
    pub timestamps: Vec<Timestamp>,
    /// Row-major `len x dim`.
    pub f: Vec<f64>,
    pub y: Vec<Option<f64>>,
}

impl EffectMatrix {
    pub fn new(
        dim: usize,
        timestamps: Vec<Timestamp>,
        f: Vec<f64>,
        y: Vec<Option<f64>>,
    ) -> Result<Self> {
        if f.len() != dim * y.len() || timestamps.len() != y.len() {
            return Err(Error::invalid("effect matrix shape mismatch"));
        }
        if f.iter().any(|v| !v.is_finite()) || y.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("effect matrix".into()));
        }
        Ok(Self {
            dim,
            timestamps,
            f,
            y,
        })
    }

    /// Effect vectors of `model` over the frame rows at the model's instant.
    pub fn from_model(model: &GamModel, frame: &FeatureFrame) -> Result<Self> {
        let rows = frame.at_instant(model.instant);
        let dim = model.n_effects() + 1;
        let mut f = Vec::with_capacity(rows.len() * dim);
        for r in &rows {
            f.extend(model.effect_vector(r)?);
        }
        Self::new(
            dim,
            rows.iter().map(|r| r.timestamp).collect(),
            f,
            rows.iter().map(|r| r.y).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.f[t * self.dim..(t + 1) * self.dim]
    }

    /// Rows with timestamps up to and including `end`.
    pub fn truncated(&self, end: Timestamp) -> Self {
        let n = self.timestamps.partition_point(|ts| *ts <= end);
        Self {
            dim: self.dim,
            timestamps: self.timestamps[..n].to_vec(),
            f: self.f[..n * self.dim].to_vec(),
            y: self.y[..n].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub timestamps: Vec<Timestamp>,
    /// One-step-ahead predictions.
    pub predictions: Vec<f64>,
    /// State mean used for each prediction, row-major `len x dim`; empty when
    /// trajectories were not requested.
    pub states: Vec<f64>,
    pub dim: usize,
}

impl FilterOutput {
    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.dim..(t + 1) * self.dim]
    }
}

/// Runs the filter over every row. With `keep_states`, the state mean used for
/// each prediction is recorded.
pub fn filter_matrix(
    m: &EffectMatrix,
    params: &KalmanHyperParams,
    keep_states: bool,
) -> Result<FilterOutput> {
    params.validate()?;
    if params.dimension() != m.dim {
        return Err(Error::invalid(format!(
            "params have dimension {}, effect vectors {}",
            params.dimension(),
            m.dim
        )));
    }
    let mut state = KalmanState::initial(params);
    let mut pf = vec![0.0; m.dim];
    let mut predictions = Vec::with_capacity(m.len());
    let mut states = Vec::with_capacity(if keep_states { m.len() * m.dim } else { 0 });
    for t in 0..m.len() {
        if keep_states {
            states.extend_from_slice(&state.theta_hat);
        }
        let (pred, _) = state.advance(m.row(t), m.y[t], &params.q, params.sigma2, &mut pf);
        predictions.push(pred);
    }
    if predictions.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("Kalman prediction".into()));
    }
    Ok(FilterOutput {
        timestamps: m.timestamps.clone(),
        predictions,
        states,
        dim: m.dim,
    })
}

/// Adapted forecasts of `model` over the frame at its instant, with the state
/// trajectory.
pub fn run_filter(
    model: &GamModel,
    frame: &FeatureFrame,
    params: &KalmanHyperParams,
) -> Result<FilterOutput> {
    filter_matrix(&EffectMatrix::from_model(model, frame)?, params, true)
}

/// Gaussian log-likelihood by prediction-error decomposition. Missing
/// observations contribute nothing.
pub fn log_likelihood_matrix(m: &EffectMatrix, params: &KalmanHyperParams) -> Result<f64> {
    params.validate()?;
    if m.is_empty() {
        return Err(Error::Empty("log-likelihood over zero rows".into()));
    }
    let mut state = KalmanState::initial(params);
    let mut pf = vec![0.0; m.dim];
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut ll = 0.0;
    for t in 0..m.len() {
        let (_, innovation) = state.advance(m.row(t), m.y[t], &params.q, params.sigma2, &mut pf);
        if let Some((e, v)) = innovation {
            if !(v > 0.0) {
                return Err(Error::NonFinite(format!(
                    "predictive variance {v} at step {t}"
                )));
            }
            ll -= 0.5 * (ln2pi + v.ln() + e * e / v);
        }
    }
    Ok(ll)
}

pub fn log_likelihood(
    model: &GamModel,
    frame: &FeatureFrame,
    params: &KalmanHyperParams,
) -> Result<f64> {
    log_likelihood_matrix(&EffectMatrix::from_model(model, frame)?, params)
}

/// `theta_t = argmin sum_{s<t} (y_s - theta' f_s)^2 + |theta|^2`, recomputed
/// from accumulated normal equations at every step.
pub fn ridge_predictions(m: &EffectMatrix) -> Result<Vec<f64>> {
    let d = m.dim;
    let mut a = vec![0.0; d * d];
    (0..d).for_each(|i| a[i * d + i] = 1.0);
    let mut b = vec![0.0; d];
    let mut out = Vec::with_capacity(m.len());
    for t in 0..m.len() {
        let chol = Cholesky::factor(&a, d)
            .map_err(|_| Error::NonFinite("ridge normal equations".into()))?;
        let mut theta = b.clone();
        chol.solve_in_place(&mut theta);
        let f = m.row(t);
        out.push(dot(&theta, f));
        if let Some(y) = m.y[t] {
            for i in 0..d {
                b[i] += y * f[i];
                for j in 0..d {
                    a[i * d + j] += f[i] * f[j];
                }
            }
        }
    }
    Ok(out)
}

pub fn ridge_equivalence(model: &GamModel, frame: &FeatureFrame) -> Result<Vec<f64>> {
    ridge_predictions(&EffectMatrix::from_model(model, frame)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceSearchConfig {
    pub multipliers: Vec<f64>,
    /// Proposals (as multiples of `sigma2`) for a state variance sitting at 0.
    pub zero_jumps: Vec<f64>,
    pub max_sweeps: usize,
    /// Stop once a whole sweep gains less than this in log-likelihood.
    pub tolerance: f64,
}

impl Default for VarianceSearchConfig {
    fn default() -> Self {
        Self {
            multipliers: vec![10.0, 2.0, 1.0, 0.5, 0.1],
            zero_jumps: vec![1e-8, 1e-6],
            max_sweeps: 20,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSearchResult {
    pub params: KalmanHyperParams,
    pub log_likelihood: f64,
    /// Log-likelihood after the initial evaluation and after every accepted move.
    pub accepted: Vec<f64>,
    pub sweeps: usize,
}

/// Greedy coordinate ascent of the log-likelihood over `(q_1, .., q_D+1, sigma2)`.
/// Within a coordinate the first candidate achieving the best value wins, so
/// the result does not depend on evaluation order.
pub fn greedy_variance_search_matrix(
    m: &EffectMatrix,
    init: &KalmanHyperParams,
    config: &VarianceSearchConfig,
) -> Result<VarianceSearchResult> {
    if m.len() < 10 * m.dim {
        return Err(Error::invalid(format!(
            "variance search needs at least {} rows, got {}",
            10 * m.dim,
            m.len()
        )));
    }
    let mut current = init.clone();
    let mut best = log_likelihood_matrix(m, &current)?;
    if !best.is_finite() {
        return Err(Error::NonFinite(
            "log-likelihood at the initial variances".into(),
        ));
    }
    let mut accepted = vec![best];
    let d = current.dimension();
    let mut sweeps = 0;
    while sweeps < config.max_sweeps {
        sweeps += 1;
        let sweep_start = best;
        for coord in 0..=d {
            let value = if coord < d {
                current.q[coord]
            } else {
                current.sigma2
            };
            let candidates: Vec<f64> = if value == 0.0 {
                config
                    .zero_jumps
                    .iter()
                    .map(|j| j * current.sigma2)
                    .collect()
            } else {
                config
                    .multipliers
                    .iter()
                    .filter(|&&mult| mult != 1.0)
                    .map(|mult| value * mult)
                    .collect()
            };
            let mut choice: Option<(f64, f64)> = None;
            for c in candidates {
                let mut trial = current.clone();
                if coord < d {
                    trial.q[coord] = c;
                } else {
                    trial.sigma2 = c;
                }
                let ll = match log_likelihood_matrix(m, &trial) {
                    Ok(ll) if ll.is_finite() => ll,
                    _ => continue,
                };
                if ll > choice.map_or(best, |(_, b)| b) {
                    choice = Some((c, ll));
                }
            }
            if let Some((c, ll)) = choice {
                debug_assert!(ll >= best);
                if coord < d {
                    current.q[coord] = c;
                } else {
                    current.sigma2 = c;
                }
                best = ll;
                accepted.push(ll);
            }
        }
        if best - sweep_start < config.tolerance {
            break;
        }
    }
    Ok(VarianceSearchResult {
        params: current,
        log_likelihood: best,
        accepted,
        sweeps,
    })
}

pub fn greedy_variance_search(
    model: &GamModel,
    frame: &FeatureFrame,
    init: &KalmanHyperParams,
    config: &VarianceSearchConfig,
) -> Result<VarianceSearchResult> {
    greedy_variance_search_matrix(&EffectMatrix::from_model(model, frame)?, init, config)
}

/// Writes the state trajectory as `timestamp,coef_name,value` rows.
pub fn write_trajectory_csv<W: Write>(
    out: W,
    names: &[String],
    output: &FilterOutput,
) -> Result<()> {
    if names.len() != output.dim {
        return Err(Error::invalid(
            "one coefficient name per state coordinate expected",
        ));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["timestamp", "coef_name", "value"])?;
    for (t, ts) in output.timestamps.iter().enumerate() {
        let stamp = ts.format_iso();
        for (name, v) in names.iter().zip(output.state(t)) {
            w.write_record([stamp.as_str(), name.as_str(), &v.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("trajectory csv", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn stamps(n: usize) -> Vec<Timestamp> {
        let start = NaiveDate::from_ymd_opt(2018, 1, 1).unwrap();
        (0..n)
            .map(|i| Timestamp::new(start + chrono::Duration::days(i as i64), 12).unwrap())
            .collect()
    }

    fn random_matrix(
        rng: &mut ChaCha8Rng,
        n: usize,
        d: usize,
        theta: &[f64],
        noise: f64,
    ) -> EffectMatrix {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut f = Vec::with_capacity(n * d);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let row: Vec<f64> = (0..d)
                .map(|k| if k == 0 { 1.0 } else { normal.sample(rng) })
                .collect();
            y.push(Some(dot(&row, theta) + noise * normal.sample(rng)));
            f.extend(row);
        }
        EffectMatrix::new(d, stamps(n), f, y).unwrap()
    }

    #[test]
    fn static_parameter_set() {
        let p = static_params(3).unwrap();
        assert_eq!(p.sigma2, 1.0);
        assert_eq!(p.q, vec![0.0; 3]);
        let s = KalmanState::initial(&p);
        assert_eq!(s.theta_hat, vec![0.0; 3]);
        assert_eq!(s.p, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(static_params(1).unwrap().q, vec![0.0]);
        assert!(static_params(0).is_err());
    }

    #[test]
    fn scalar_step_by_hand() {
        let p = static_params(1).unwrap();
        let s = KalmanState::initial(&p);
        let (pred, next) = kalman_step(&s, &[1.0], Some(1.0), &p).unwrap();
        assert_eq!(pred, 0.0);
        assert!((next.theta_hat[0] - 0.5).abs() < 1e-15);
        assert!((next.p[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_effect_vector_leaves_state() {
        let mut p = static_params(2).unwrap();
        p.q = vec![0.1, 0.2];
        let s = KalmanState {
            theta_hat: vec![1.0, -2.0],
            p: vec![2.0, 0.3, 0.3, 1.0],
            t: 4,
        };
        let (pred, next) = kalman_step(&s, &[0.0, 0.0], Some(5.0), &p).unwrap();
        assert_eq!(pred, 0.0);
        assert_eq!(next.theta_hat, s.theta_hat);
        assert_eq!(next.p, vec![2.1, 0.3, 0.3, 1.2]);
    }

    #[test]
    fn missing_observation_only_inflates_covariance() {
        let mut p = static_params(2).unwrap();
        p.q = vec![0.5, 0.0];
        let s = KalmanState::initial(&p);
        let (pred, next) = kalman_step(&s, &[1.0, 2.0], None, &p).unwrap();
        assert_eq!(pred, 0.0);
        assert_eq!(next.theta_hat, vec![0.0, 0.0]);
        assert_eq!(next.p, vec![1.5, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = static_params(2).unwrap();
        let s = KalmanState::initial(&p);
        assert!(kalman_step(&s, &[1.0], Some(1.0), &p).is_err());
        assert!(matches!(
            kalman_step(&s, &[f64::NAN, 1.0], Some(1.0), &p),
            Err(Error::NonFinite(_))
        ));
        assert!(kalman_step(&s, &[1.0, 1.0], Some(f64::INFINITY), &p).is_err());
    }

    #[test]
    fn ridge_hand_values() {
        let m =
            EffectMatrix::new(1, stamps(2), vec![1.0, 1.0], vec![Some(1.0), Some(3.0)]).unwrap();
        let r = ridge_predictions(&m).unwrap();
        assert_eq!(r[0], 0.0);
        assert!((r[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn static_filter_is_online_ridge() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta = [3.0, -1.0, 0.5, 2.0, 0.0];
        let m = random_matrix(&mut rng, 200, 5, &theta, 0.5);
        let k = filter_matrix(&m, &static_params(5).unwrap(), false).unwrap();
        let r = ridge_predictions(&m).unwrap();
        let diff = k
            .predictions
            .iter()
            .zip(&r)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-8, "{diff}");
    }

    #[test]
    fn static_estimate_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta = [5.0, 1.0, -2.0];
        let m = random_matrix(&mut rng, 2000, 3, &theta, 1.0);
        let out = filter_matrix(&m, &static_params(3).unwrap(), true).unwrap();
        let err = |t: usize| {
            out.state(t)
                .iter()
                .zip(&theta)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        assert!(err(50) < err(5));
        assert!(err(500) < err(50));
        assert!(err(1999) < 0.15);
    }

    fn drifting_matrix(seed: u64, n: usize, drift: f64) -> (EffectMatrix, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut theta = vec![2.0, 1.0, -1.0];
        let mut f = Vec::new();
        let mut y = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..n {
            let row = vec![1.0, normal.sample(&mut rng), normal.sample(&mut rng)];
            y.push(Some(dot(&row, &theta) + 0.3 * normal.sample(&mut rng)));
            truth.push(theta[1]);
            f.extend(row);
            theta[1] += drift * normal.sample(&mut rng);
        }
        (EffectMatrix::new(3, stamps(n), f, y).unwrap(), truth)
    }

    #[test]
    fn state_noise_tracks_drift() {
        let (m, truth) = drifting_matrix(3, 1500, 0.1);
        let fixed = filter_matrix(&m, &static_params(3).unwrap(), true).unwrap();
        let mut adaptive_params = static_params(3).unwrap();
        adaptive_params.q[1] = 0.01;
        adaptive_params.sigma2 = 0.09;
        let adaptive = filter_matrix(&m, &adaptive_params, true).unwrap();
        let track_err = |o: &FilterOutput| -> f64 {
            (500..1500).map(|t| (o.state(t)[1] - truth[t]).abs()).sum()
        };
        assert!(track_err(&adaptive) < 0.5 * track_err(&fixed));
    }

    #[test]
    fn log_likelihood_single_observation() {
        let m = EffectMatrix::new(2, stamps(1), vec![0.0, 0.0], vec![Some(3.0)]).unwrap();
        let mut p = static_params(2).unwrap();
        p.sigma2 = 2.0;
        let ll = log_likelihood_matrix(&m, &p).unwrap();
        let expected = -0.5 * ((2.0 * std::f64::consts::PI * 2.0).ln() + 9.0 / 2.0);
        assert!((ll - expected).abs() < 1e-14);
        let empty = EffectMatrix::new(2, vec![], vec![], vec![]).unwrap();
        assert!(log_likelihood_matrix(&empty, &p).is_err());
        assert!(filter_matrix(&empty, &p, true)
            .unwrap()
            .predictions
            .is_empty());
    }

    #[test]
    fn search_never_decreases_likelihood() {
        let (m, _) = drifting_matrix(4, 400, 0.05);
        let init = dynamic_init(3).unwrap();
        let res =
            greedy_variance_search_matrix(&m, &init, &VarianceSearchConfig::default()).unwrap();
        assert!(res.accepted.windows(2).all(|w| w[1] >= w[0]));
        assert!(
            res.log_likelihood >= log_likelihood_matrix(&m, &static_params(3).unwrap()).unwrap()
        );
        assert!(res.log_likelihood >= log_likelihood_matrix(&m, &init).unwrap());
        let again =
            greedy_variance_search_matrix(&m, &init, &VarianceSearchConfig::default()).unwrap();
        assert_eq!(res, again);
    }

    #[test]
    fn search_singles_out_drifting_coordinate() {
        let (m, _) = drifting_matrix(5, 1000, 0.1);
        let res = greedy_variance_search_matrix(
            &m,
            &dynamic_init(3).unwrap(),
            &VarianceSearchConfig::default(),
        )
        .unwrap();
        let q = &res.params.q;
        assert!(q[1] > q[0] && q[1] > q[2], "{q:?}");
    }

    #[test]
    fn search_shrinks_variances_on_constant_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_matrix(&mut rng, 800, 3, &[1.0, 2.0, -0.5], 1.0);
        let init = dynamic_init(3).unwrap();
        let res =
            greedy_variance_search_matrix(&m, &init, &VarianceSearchConfig::default()).unwrap();
        assert!(
            res.params.q.iter().zip(&init.q).all(|(a, b)| a <= b),
            "{:?}",
            res.params.q
        );
    }

    #[test]
    fn zero_sweeps_returns_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_matrix(&mut rng, 100, 2, &[1.0, 1.0], 1.0);
        let init = dynamic_init(2).unwrap();
        let cfg = VarianceSearchConfig {
            max_sweeps: 0,
            ..VarianceSearchConfig::default()
        };
        assert_eq!(
            greedy_variance_search_matrix(&m, &init, &cfg)
                .unwrap()
                .params,
            init
        );
        let short = EffectMatrix::new(2, stamps(5), vec![1.0; 10], vec![Some(1.0); 5]).unwrap();
        assert!(greedy_variance_search_matrix(&short, &init, &cfg).is_err());
    }

    #[test]
    fn zero_variances_can_leave_zero() {
        let (m, _) = drifting_matrix(8, 600, 0.1);
        let init = static_params(3).unwrap();
        let res =
            greedy_variance_search_matrix(&m, &init, &VarianceSearchConfig::default()).unwrap();
        assert!(res.params.q[1] > 0.0);
    }

    #[test]
    fn predictions_are_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_matrix(&mut rng, 100, 3, &[1.0, 2.0, 3.0], 0.5);
        let mut p = static_params(3).unwrap();
        p.q = vec![0.01, 0.02, 0.0];
        let base = filter_matrix(&m, &p, false).unwrap();
        let mut perturbed = m.clone();
        for t in 60..100 {
            perturbed.y[t] = Some(rng.random_range(-100.0..100.0));
        }
        let other = filter_matrix(&perturbed, &p, false).unwrap();
        assert_eq!(base.predictions[..=60], other.predictions[..=60]);
    }

    #[test]
    fn params_json_roundtrip() {
        let mut p = dynamic_init(4).unwrap();
        p.sigma2 = 0.37;
        let json = p.to_json().unwrap();
        assert!(json.contains("kalman_params_v1"));
        assert_eq!(KalmanHyperParams::from_json(&json).unwrap(), p);
        assert!(KalmanHyperParams::from_json(
            r#"{"schema":"kalman_params_v1","sigma2":-1,"q":[0]}"#
        )
        .is_err());
    }

    #[test]
    fn trajectory_csv_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = random_matrix(&mut rng, 3, 2, &[1.0, 1.0], 0.1);
        let out = filter_matrix(&m, &static_params(2).unwrap(), true).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &["Bias".into(), "Temp".into()], &out).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "timestamp,coef_name,value");
        assert_eq!(lines.len(), 1 + 3 * 2);
        assert!(lines[1].starts_with("2018-01-01T06:00:00,Bias,0"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn covariance_stays_symmetric_and_variance_bounded(
            seed in 0u64..1000,
            d in 1usize..6,
            qs in prop::collection::vec(0.0f64..0.5, 6),
            sigma2 in 0.01f64..10.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let m = random_matrix(&mut rng, 60, d, &theta, 1.0);
            let params = KalmanHyperParams { q: qs[..d].to_vec(), sigma2, ..static_params(d).unwrap() };
            let mut state = KalmanState::initial(&params);
            for t in 0..m.len() {
                let f = m.row(t);
                let mut pf = vec![0.0; d];
                let v = state.innovation_variance(f, &mut pf, sigma2);
                prop_assert!(v >= sigma2 * (1.0 - 1e-12));
                state = kalman_step(&state, f, m.y[t], &params).unwrap().1;
                for i in 0..d {
                    prop_assert!(state.p[i * d + i] >= -1e-10);
                    for j in 0..d {
                        prop_assert!((state.p[i * d + j] - state.p[j * d + i]).abs() <= 1e-12);
                    }
                }
            }
        }
    }
}
