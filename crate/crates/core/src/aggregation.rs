//! Online convex aggregation of expert forecasts (ML-Poly), the two fixed
//! oracles it is compared with, and the hybrid state coefficients of an
//! aggregation of Kalman-adapted experts sharing one GAM.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Timestamp;
use crate::linalg::dot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LossKind {
    #[default]
    Squared,
    Absolute,
}

impl LossKind {
    pub fn loss(self, y: f64, pred: f64) -> f64 {
        match self {
            LossKind::Squared => (pred - y).powi(2),
            LossKind::Absolute => (pred - y).abs(),
        }
    }

    /// Derivative of the loss in the prediction.
    pub fn gradient(self, y: f64, pred: f64) -> f64 {
        match self {
            LossKind::Squared => 2.0 * (pred - y),
            LossKind::Absolute => (pred - y).signum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationState {
    pub regrets: Vec<f64>,
    pub squared_regret_sums: Vec<f64>,
    pub weights: Vec<f64>,
    pub loss: LossKind,
    pub gradient_trick: bool,
    pub t: usize,
}

impl AggregationState {
    /// Squared loss with the gradient trick, uniform weights.
    pub fn new(n_experts: usize) -> Result<Self> {
        Self::with_loss(n_experts, LossKind::Squared, true)
    }

    pub fn with_loss(n_experts: usize, loss: LossKind, gradient_trick: bool) -> Result<Self> {
        if n_experts == 0 {
            return Err(Error::invalid("aggregation needs at least one expert"));
        }
        Ok(Self {
            regrets: vec![0.0; n_experts],
            squared_regret_sums: vec![0.0; n_experts],
            weights: vec![1.0 / n_experts as f64; n_experts],
            loss,
            gradient_trick,
            t: 0,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.regrets.len()
    }

    pub fn learning_rates(&self) -> Vec<f64> {
        self.squared_regret_sums
            .iter()
            .map(|s| 1.0 / (1.0 + s))
            .collect()
    }
}

/// `p_e` proportional to `eta_e (R_e)_+`, uniform when every term vanishes.
pub fn mlpoly_weights(state: &AggregationState) -> Vec<f64> {
    let numerators: Vec<f64> = state
        .regrets
        .iter()
        .zip(state.learning_rates())
        .map(|(r, eta)| eta * r.max(0.0))
        .collect();
    let total: f64 = numerators.iter().sum();
    if total > 0.0 && total.is_finite() {
        numerators.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / numerators.len() as f64; numerators.len()]
    }
}

/// Emits the convex combination of `forecasts`, then (if `y` is observed)
/// charges the instantaneous regrets and refreshes the weights.
pub fn aggregate_step(
    state: &mut AggregationState,
    forecasts: &[f64],
    y: Option<f64>,
) -> Result<f64> {
    if forecasts.len() != state.n_experts() {
        return Err(Error::invalid(format!(
            "{} expert forecasts for an aggregation of {}",
            forecasts.len(),
            state.n_experts()
        )));
    }
    if forecasts.iter().any(|f| !f.is_finite()) {
        return Err(Error::NonFinite("expert forecast".into()));
    }
    let pred = dot(&state.weights, forecasts);
    let Some(y) = y else {
        return Ok(pred);
    };
    if !y.is_finite() {
        return Err(Error::NonFinite("observation".into()));
    }
    let agg_loss = state.loss.loss(y, pred);
    let g = state.loss.gradient(y, pred);
    for (e, &fe) in forecasts.iter().enumerate() {
        let r = if state.gradient_trick {
            g * (pred - fe)
        } else {
            agg_loss - state.loss.loss(y, fe)
        };
        state.regrets[e] += r;
        state.squared_regret_sums[e] += r * r;
    }
    state.weights = mlpoly_weights(state);
    state.t += 1;
    Ok(pred)
}

/// Aggregated forecasts and the weights used at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationRun {
    pub predictions: Vec<f64>,
    /// Row-major `T x E`.
    pub weights: Vec<f64>,
    pub n_experts: usize,
    pub state: AggregationState,
}

impl AggregationRun {
    pub fn weights_at(&self, t: usize) -> &[f64] {
        &self.weights[t * self.n_experts..(t + 1) * self.n_experts]
    }
}

/// Replays `aggregate_step` over a `T x E` forecast matrix (row-major).
pub fn aggregate_series(
    state: AggregationState,
    forecasts: &[f64],
    y: &[Option<f64>],
) -> Result<AggregationRun> {
    let e = state.n_experts();
    if forecasts.len() != e * y.len() {
        return Err(Error::invalid(
            "forecast matrix does not match observation count",
        ));
    }
    let mut state = state;
    let mut predictions = Vec::with_capacity(y.len());
    let mut weights = Vec::with_capacity(forecasts.len());
    for (t, yt) in y.iter().enumerate() {
        weights.extend_from_slice(&state.weights);
        predictions.push(aggregate_step(
            &mut state,
            &forecasts[t * e..(t + 1) * e],
            *yt,
        )?);
    }
    Ok(AggregationRun {
        predictions,
        weights,
        n_experts: e,
        state,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OracleKind {
    BestExpert,
    BestConvex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub kind: OracleKind,
    pub weights: Vec<f64>,
    pub cumulative_loss: f64,
}

fn check_matrix(forecasts: &[f64], y: &[f64], n_experts: usize) -> Result<()> {
    if y.is_empty() || n_experts == 0 {
        return Err(Error::Empty(
            "oracle needs at least one step and one expert".into(),
        ));
    }
    if forecasts.len() != n_experts * y.len() {
        return Err(Error::invalid(
            "forecast matrix does not match observation count",
        ));
    }
    Ok(())
}

/// Loss of fixed weights replayed over the horizon.
pub fn fixed_weights_loss(forecasts: &[f64], y: &[f64], weights: &[f64], loss: LossKind) -> f64 {
    let e = weights.len();
    y.iter()
        .enumerate()
        .map(|(t, &yt)| loss.loss(yt, dot(&forecasts[t * e..(t + 1) * e], weights)))
        .sum()
}

/// Best single expert in hindsight; ties go to the lowest index.
pub fn best_expert_oracle(
    forecasts: &[f64],
    y: &[f64],
    n_experts: usize,
    loss: LossKind,
) -> Result<OracleResult> {
    check_matrix(forecasts, y, n_experts)?;
    let mut best = (0, f64::INFINITY);
    for e in 0..n_experts {
        let l: f64 = y
            .iter()
            .enumerate()
            .map(|(t, &yt)| loss.loss(yt, forecasts[t * n_experts + e]))
            .sum();
        if l < best.1 {
            best = (e, l);
        }
    }
    let mut weights = vec![0.0; n_experts];
    weights[best.0] = 1.0;
    Ok(OracleResult {
        kind: OracleKind::BestExpert,
        weights,
        cumulative_loss: best.1,
    })
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            tau = t;
        }
    }
    v.iter().map(|x| (x - tau).max(0.0)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexOracleConfig {
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for ConvexOracleConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10_000,
            tolerance: 1e-10,
        }
    }
}

fn top_eigenvalue(g: &[f64], n: usize) -> f64 {
    let m = nalgebra::DMatrix::from_row_slice(n, n, g);
    m.symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Best fixed convex combination for the squared loss, by projected gradient
/// with step `1/L` started from the best single expert.
pub fn convex_oracle(
    forecasts: &[f64],
    y: &[f64],
    n_experts: usize,
    loss: LossKind,
    config: &ConvexOracleConfig,
) -> Result<OracleResult> {
    if loss != LossKind::Squared {
        return Err(Error::invalid(
            "the convex oracle is only defined for the squared loss",
        ));
    }
    check_matrix(forecasts, y, n_experts)?;
    let e = n_experts;
    let mut gram = vec![0.0; e * e];
    let mut fy = vec![0.0; e];
    for (t, &yt) in y.iter().enumerate() {
        let row = &forecasts[t * e..(t + 1) * e];
        for a in 0..e {
            fy[a] += row[a] * yt;
            for b in 0..e {
                gram[a * e + b] += row[a] * row[b];
            }
        }
    }
    let lipschitz = 2.0 * top_eigenvalue(&gram, e) * (1.0 + 1e-12);
    let mut w = best_expert_oracle(forecasts, y, e, loss)?.weights;
    if lipschitz > 0.0 {
        let step = 1.0 / lipschitz;
        for _ in 0..config.max_iterations {
            let grad: Vec<f64> = (0..e)
                .map(|a| 2.0 * (dot(&gram[a * e..(a + 1) * e], &w) - fy[a]))
                .collect();
            let moved: Vec<f64> = w.iter().zip(&grad).map(|(wi, gi)| wi - step * gi).collect();
            let next = project_simplex(&moved);
            let mapping = next
                .iter()
                .zip(&w)
                .map(|(a, b)| ((b - a) * lipschitz).powi(2))
                .sum::<f64>()
                .sqrt();
            w = next;
            if mapping < config.tolerance {
                break;
            }
        }
    }
    Ok(OracleResult {
        kind: OracleKind::BestConvex,
        cumulative_loss: fixed_weights_loss(forecasts, y, &w, loss),
        weights: w,
    })
}

/// `theta_tilde_d = sum_e p_e theta_{d,e}`; `expert_states` is row-major `E x (D+1)`.
pub fn hybrid_state_coefficients(
    weights: &[f64],
    expert_states: &[f64],
    dim: usize,
) -> Result<Vec<f64>> {
    if dim == 0 || expert_states.len() != weights.len() * dim {
        return Err(Error::invalid(format!(
            "{} weights and {} state entries do not form an E x {dim} matrix",
            weights.len(),
            expert_states.len()
        )));
    }
    let mut out = vec![0.0; dim];
    for (e, p) in weights.iter().enumerate() {
        for d in 0..dim {
            out[d] += p * expert_states[e * dim + d];
        }
    }
    Ok(out)
}

/// Weight trajectory as `timestamp,expert_id,weight` rows.
pub fn write_weights_csv<W: Write>(
    out: W,
    timestamps: &[Timestamp],
    expert_ids: &[String],
    run: &AggregationRun,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["timestamp", "expert_id", "weight"])?;
    write_weight_rows(&mut w, timestamps, expert_ids, run)?;
    w.flush().map_err(|e| Error::io("weights csv", e))?;
    Ok(())
}

pub(crate) fn write_weight_rows<W: Write>(
    w: &mut csv::Writer<W>,
    timestamps: &[Timestamp],
    expert_ids: &[String],
    run: &AggregationRun,
) -> Result<()> {
    if expert_ids.len() != run.n_experts || timestamps.len() != run.predictions.len() {
        return Err(Error::invalid("weights CSV labels do not match the run"));
    }
    for (t, ts) in timestamps.iter().enumerate() {
        let stamp = ts.format_iso();
        for (id, p) in expert_ids.iter().zip(run.weights_at(t)) {
            w.write_record([stamp.as_str(), id.as_str(), &p.to_string()])?;
        }
    }
    Ok(())
}
