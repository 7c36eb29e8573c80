//! Per-instant additive models fitted by penalized least squares, with
//! smoothing parameters chosen by generalized cross-validation.
//!
//! Every smooth term is made identifiable by a sum-to-zero constraint over the
//! fitting rows (absorbed through a Householder reparameterisation), so the
//! intercept carries the level. Fitted coefficients are stored back in the
//! raw basis space, so prediction only needs the bases and the coefficients.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureFrame, FeatureRow, SeriesId, Timestamp};
use crate::linalg::{dot, Cholesky};
use crate::splines::{make_basis, tensor_basis, BasisKind, SplineBasis};

pub const GAM_MODEL_SCHEMA: &str = "gam_model_v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Covariate {
    ToY,
    Trend,
    Temp,
    Temp95,
    Temp99,
    TempMin,
    TempMax,
    Load2D,
    Load1W,
}

impl Covariate {
    pub fn name(self) -> &'static str {
        match self {
            Covariate::ToY => "ToY",
            Covariate::Trend => "Trend",
            Covariate::Temp => "Temp",
            Covariate::Temp95 => "Temp95",
            Covariate::Temp99 => "Temp99",
            Covariate::TempMin => "TempMin",
            Covariate::TempMax => "TempMax",
            Covariate::Load2D => "Load2D",
            Covariate::Load1W => "Load1W",
        }
    }

    pub fn value(self, row: &FeatureRow) -> Option<f64> {
        match self {
            Covariate::ToY => Some(row.toy),
            Covariate::Trend => Some(row.trend),
            Covariate::Temp => Some(row.temp),
            Covariate::Temp95 => Some(row.temp95),
            Covariate::Temp99 => Some(row.temp99),
            Covariate::TempMin => Some(row.temp_min),
            Covariate::TempMax => Some(row.temp_max),
            Covariate::Load2D => row.load_2d,
            Covariate::Load1W => row.load_1w,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Factor {
    DayType,
    /// Bank holiday or vacation day.
    Holiday,
    WorkingDay,
}

impl Factor {
    pub fn levels(self) -> usize {
        match self {
            Factor::DayType => 5,
            Factor::Holiday | Factor::WorkingDay => 2,
        }
    }

    pub fn level(self, row: &FeatureRow) -> usize {
        match self {
            Factor::DayType => row.calendar.day_type.index(),
            Factor::Holiday => row.calendar.holiday() as usize,
            Factor::WorkingDay => row.calendar.working_day as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TermSpec {
    /// Univariate smooth, optionally switched on only at one level of a factor.
    Smooth {
        covariate: Covariate,
        kind: BasisKind,
        dimension: usize,
        domain: Option<(f64, f64)>,
        by: Option<(Factor, usize)>,
    },
    Tensor {
        covariates: [Covariate; 2],
        dimensions: [usize; 2],
    },
    Linear {
        covariate: Covariate,
    },
    /// Dummy columns for every level but the first.
    Categorical {
        factor: Factor,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    pub spec: TermSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Short term: includes the lagged loads.
    ST,
    /// Mid term: no load lags.
    MT,
    Custom,
}

/// Basis sizes of the standard formula.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisDims {
    pub toy: usize,
    pub trend: usize,
    pub temp: usize,
    pub tensor: usize,
}

impl Default for BasisDims {
    fn default() -> Self {
        Self {
            toy: 20,
            trend: 6,
            temp: 10,
            tensor: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GamFormula {
    pub variant: Variant,
    pub terms: Vec<Term>,
}

impl GamFormula {
    pub fn new(variant: Variant, terms: Vec<Term>) -> Result<Self> {
        let mut names: Vec<&str> = terms.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate term names in formula"));
        }
        Ok(Self { variant, terms })
    }

    /// Day type and holiday dummies, time of year by working-day status,
    /// trend, three temperature smooths, a (TempMin, TempMax) tensor, and for
    /// the short-term variant the two lagged loads.
    pub fn standard(variant: Variant, dims: BasisDims) -> Self {
        let smooth = |name: &str, covariate, kind, dimension, domain, by| Term {
            name: name.into(),
            spec: TermSpec::Smooth {
                covariate,
                kind,
                dimension,
                domain,
                by,
            },
        };
        let cr = BasisKind::CubicRegression;
        let mut terms = vec![
            Term {
                name: "DayType".into(),
                spec: TermSpec::Categorical {
                    factor: Factor::DayType,
                },
            },
            Term {
                name: "BankHoliday".into(),
                spec: TermSpec::Categorical {
                    factor: Factor::Holiday,
                },
            },
            smooth(
                "ToY:nonworking",
                Covariate::ToY,
                BasisKind::CyclicCubic,
                dims.toy,
                Some((0.0, 1.0)),
                Some((Factor::WorkingDay, 0)),
            ),
            smooth(
                "ToY:working",
                Covariate::ToY,
                BasisKind::CyclicCubic,
                dims.toy,
                Some((0.0, 1.0)),
                Some((Factor::WorkingDay, 1)),
            ),
            smooth("Trend", Covariate::Trend, cr, dims.trend, None, None),
            smooth("Temp", Covariate::Temp, cr, dims.temp, None, None),
            smooth("Temp95", Covariate::Temp95, cr, dims.temp, None, None),
            smooth("Temp99", Covariate::Temp99, cr, dims.temp, None, None),
            Term {
                name: "TempMin:TempMax".into(),
                spec: TermSpec::Tensor {
                    covariates: [Covariate::TempMin, Covariate::TempMax],
                    dimensions: [dims.tensor, dims.tensor],
                },
            },
        ];
        if variant == Variant::ST {
            for c in [Covariate::Load2D, Covariate::Load1W] {
                terms.push(Term {
                    name: c.name().into(),
                    spec: TermSpec::Linear { covariate: c },
                });
            }
        }
        Self { variant, terms }
    }

    pub fn short_term() -> Self {
        Self::standard(Variant::ST, BasisDims::default())
    }

    pub fn mid_term() -> Self {
        Self::standard(Variant::MT, BasisDims::default())
    }
}

/// Log-spaced smoothing-parameter grid and coordinate-descent schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GamConfig {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lambda_points: usize,
    pub sweeps: usize,
    /// Ridge jitter relative to `tr(X'X) / p`.
    pub jitter: f64,
    /// Trend values beyond `train max + trend_horizon` are clamped there.
    pub trend_horizon: f64,
}

impl Default for GamConfig {
    fn default() -> Self {
        Self {
            lambda_min: 1e-4,
            lambda_max: 1e8,
            lambda_points: 25,
            sweeps: 3,
            jitter: 1e-8,
            trend_horizon: 0.0,
        }
    }
}

impl GamConfig {
    pub fn lambda_grid(&self) -> Vec<f64> {
        let n = self.lambda_points.max(1);
        if n == 1 {
            return vec![self.lambda_min];
        }
        let (a, b) = (self.lambda_min.log10(), self.lambda_max.log10());
        (0..n)
            .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
            .collect()
    }
}

/// Columns of one term inside the design matrix.
#[derive(Debug, Clone)]
pub struct DesignBlock {
    pub term: usize,
    pub name: String,
    pub columns: Range<usize>,
    pub basis: Option<SplineBasis>,
    /// Raw basis dimension -> constrained dimension map (row-major `m x (m-1)`).
    constraint: Option<(usize, Vec<f64>)>,
    /// Scale applied to each raw penalty before it enters the system.
    pub penalty_scales: Vec<f64>,
}

/// Penalty on a contiguous block of columns (row-major `size x size`).
#[derive(Debug, Clone)]
pub struct PenaltyBlock {
    pub block: usize,
    pub offset: usize,
    pub size: usize,
    pub matrix: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Design {
    /// Row-major `n x p`, first column is the intercept.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub n: usize,
    pub p: usize,
    pub blocks: Vec<DesignBlock>,
    pub penalties: Vec<PenaltyBlock>,
    /// Frame rows (indices into the instant slice) used as design rows.
    pub rows: Vec<Timestamp>,
}

impl Design {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }
}

fn covariate_values(rows: &[&FeatureRow], c: Covariate) -> Result<Vec<f64>> {
    rows.iter()
        .map(|r| {
            c.value(r)
                .ok_or_else(|| Error::MissingCovariate(c.name().into()))
        })
        .collect()
}

/// Householder-based basis of the orthogonal complement of `c`.
fn sum_to_zero_constraint(c: &[f64]) -> Vec<f64> {
    let m = c.len();
    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut z = vec![0.0; m * (m - 1)];
    if norm == 0.0 {
        for j in 0..m - 1 {
            z[(j + 1) * (m - 1) + j] = 1.0;
        }
        return z;
    }
    let mut v = c.to_vec();
    v[0] += if c[0] >= 0.0 { norm } else { -norm };
    let vv: f64 = v.iter().map(|a| a * a).sum();
    // H = I - 2 v v' / v'v; Z = H[:, 1..]
    for i in 0..m {
        for j in 1..m {
            let h = if i == j { 1.0 } else { 0.0 } - 2.0 * v[i] * v[j] / vv;
            z[i * (m - 1) + (j - 1)] = h;
        }
    }
    z
}

/// Builds the design at one instant: one row per day with an observed load.
pub fn build_design(frame: &FeatureFrame, formula: &GamFormula, instant: u8) -> Result<Design> {
    let rows: Vec<&FeatureRow> = frame
        .at_instant(instant)
        .into_iter()
        .filter(|r| r.y.is_some())
        .collect();
    if rows.is_empty() {
        return Err(Error::Empty(format!(
            "no observed rows at instant {instant} for substation {}",
            frame.substation_id
        )));
    }
    let n = rows.len();
    let y: Vec<f64> = rows.iter().map(|r| r.y.unwrap()).collect();

    // column-major pieces first, stitched afterwards
    let mut columns: Vec<Vec<f64>> = vec![vec![1.0; n]];
    let mut blocks = Vec::new();
    let mut penalties = Vec::new();

    for (ti, term) in formula.terms.iter().enumerate() {
        let start = columns.len();
        match &term.spec {
            TermSpec::Categorical { factor } => {
                for level in 1..factor.levels() {
                    columns.push(
                        rows.iter()
                            .map(|r| (factor.level(r) == level) as u8 as f64)
                            .collect(),
                    );
                }
                blocks.push(DesignBlock {
                    term: ti,
                    name: term.name.clone(),
                    columns: start..columns.len(),
                    basis: None,
                    constraint: None,
                    penalty_scales: vec![],
                });
            }
            TermSpec::Linear { covariate } => {
                columns.push(covariate_values(&rows, *covariate)?);
                blocks.push(DesignBlock {
                    term: ti,
                    name: term.name.clone(),
                    columns: start..start + 1,
                    basis: None,
                    constraint: None,
                    penalty_scales: vec![],
                });
            }
            TermSpec::Smooth { .. } | TermSpec::Tensor { .. } => {
                let (basis, raw) = smooth_raw_block(&term.name, &term.spec, &rows)?;
                let m = basis.dimension();
                let col_sums: Vec<f64> = (0..m).map(|k| raw.iter().map(|r| r[k]).sum()).collect();
                let z = sum_to_zero_constraint(&col_sums);
                let mc = m - 1;
                for j in 0..mc {
                    columns.push(
                        raw.iter()
                            .map(|r| (0..m).map(|k| r[k] * z[k * mc + j]).sum())
                            .collect(),
                    );
                }
                // X_b' X_b norm for penalty scaling
                let xb: Vec<&[f64]> = columns[start..].iter().map(|c| c.as_slice()).collect();
                let mut gram_norm2 = 0.0;
                for a in 0..mc {
                    for b in 0..mc {
                        let g = dot(xb[a], xb[b]);
                        gram_norm2 += g * g;
                    }
                }
                let mut scales = Vec::new();
                for s in basis.penalties() {
                    let sc = constrain_penalty(&s.matrix, &z, m);
                    let s_norm = sc.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let scale = if s_norm > 0.0 {
                        gram_norm2.sqrt() / s_norm
                    } else {
                        1.0
                    };
                    scales.push(scale);
                    penalties.push(PenaltyBlock {
                        block: blocks.len(),
                        offset: start,
                        size: mc,
                        matrix: sc.into_iter().map(|v| v * scale).collect(),
                    });
                }
                blocks.push(DesignBlock {
                    term: ti,
                    name: term.name.clone(),
                    columns: start..start + mc,
                    basis: Some(basis),
                    constraint: Some((m, z)),
                    penalty_scales: scales,
                });
            }
        }
    }

    let p = columns.len();
    let mut x = vec![0.0; n * p];
    for (j, col) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            x[i * p + j] = *v;
        }
    }
    Ok(Design {
        x,
        y,
        n,
        p,
        blocks,
        penalties,
        rows: rows.iter().map(|r| r.timestamp).collect(),
    })
}

fn constrain_penalty(s: &nalgebra::DMatrix<f64>, z: &[f64], m: usize) -> Vec<f64> {
    let mc = m - 1;
    // Z' S Z
    let mut sz = vec![0.0; m * mc];
    for i in 0..m {
        for j in 0..mc {
            sz[i * mc + j] = (0..m).map(|k| s[(i, k)] * z[k * mc + j]).sum();
        }
    }
    let mut out = vec![0.0; mc * mc];
    for i in 0..mc {
        for j in 0..mc {
            out[i * mc + j] = (0..m).map(|k| z[k * mc + i] * sz[k * mc + j]).sum();
        }
    }
    for i in 0..mc {
        for j in 0..i {
            let avg = 0.5 * (out[i * mc + j] + out[j * mc + i]);
            out[i * mc + j] = avg;
            out[j * mc + i] = avg;
        }
    }
    out
}

fn smooth_covariates(spec: &TermSpec) -> Vec<Covariate> {
    match spec {
        TermSpec::Smooth { covariate, .. } => vec![*covariate],
        TermSpec::Tensor { covariates, .. } => covariates.to_vec(),
        _ => vec![],
    }
}

/// Raw (unconstrained) basis rows of a smooth, zeroed outside its `by` level.
fn smooth_raw_block(
    name: &str,
    spec: &TermSpec,
    rows: &[&FeatureRow],
) -> Result<(SplineBasis, Vec<Vec<f64>>)> {
    let basis = match spec {
        TermSpec::Smooth {
            covariate,
            kind,
            dimension,
            domain,
            by,
        } => {
            let mut vals = covariate_values(rows, *covariate)?;
            if let Some((f, level)) = by {
                vals = vals
                    .into_iter()
                    .zip(rows)
                    .filter(|(_, r)| f.level(r) == *level)
                    .map(|(v, _)| v)
                    .collect();
            }
            SplineBasis::Univariate(make_basis(name, *kind, &vals, *dimension, *domain)?)
        }
        TermSpec::Tensor {
            covariates,
            dimensions,
        } => {
            let a = make_basis(
                name,
                BasisKind::CubicRegression,
                &covariate_values(rows, covariates[0])?,
                dimensions[0],
                None,
            )?;
            let b = make_basis(
                name,
                BasisKind::CubicRegression,
                &covariate_values(rows, covariates[1])?,
                dimensions[1],
                None,
            )?;
            tensor_basis(a, b)
        }
        _ => unreachable!("not a smooth"),
    };
    let covs = smooth_covariates(spec);
    let by = match spec {
        TermSpec::Smooth { by, .. } => *by,
        _ => None,
    };
    let m = basis.dimension();
    let mut raw = Vec::with_capacity(rows.len());
    for r in rows {
        let active = by.is_none_or(|(f, level)| f.level(r) == level);
        if active {
            let x: Vec<f64> = covs.iter().map(|c| c.value(r).unwrap()).collect();
            raw.push(basis.evaluate(&x));
        } else {
            raw.push(vec![0.0; m]);
        }
    }
    Ok((basis, raw))
}

/// Solution of the penalized normal equations at fixed smoothing parameters.
#[derive(Debug, Clone)]
pub struct PenalizedFit {
    pub coefficients: Vec<f64>,
    pub rss: f64,
    /// `tr(A)`, the effective degrees of freedom.
    pub edf: f64,
    pub gcv: f64,
}

/// Cross-products of a design, reused across smoothing parameters.
#[derive(Debug, Clone)]
pub struct PenalizedSystem {
    n: usize,
    p: usize,
    xtx: Vec<f64>,
    xty: Vec<f64>,
    yty: f64,
    jitter: f64,
    penalties: Vec<PenaltyBlock>,
    names: Vec<String>,
}

impl PenalizedSystem {
    pub fn new(
        x: &[f64],
        y: &[f64],
        p: usize,
        penalties: Vec<PenaltyBlock>,
        jitter_rel: f64,
    ) -> Self {
        let n = y.len();
        let mut xtx = vec![0.0; p * p];
        let mut xty = vec![0.0; p];
        for i in 0..n {
            let row = &x[i * p..(i + 1) * p];
            for a in 0..p {
                let ra = row[a];
                if ra == 0.0 {
                    continue;
                }
                xty[a] += ra * y[i];
                for b in 0..=a {
                    xtx[a * p + b] += ra * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xtx[b * p + a] = xtx[a * p + b];
            }
        }
        let trace: f64 = (0..p).map(|a| xtx[a * p + a]).sum();
        Self {
            n,
            p,
            xtx,
            xty,
            yty: dot(y, y),
            jitter: jitter_rel * trace / p as f64,
            penalties,
            names: vec![],
        }
    }

    fn with_names(mut self, names: Vec<String>) -> Self {
        self.names = names;
        self
    }

    pub fn n_penalties(&self) -> usize {
        self.penalties.len()
    }

    fn name_of_column(&self, col: usize) -> String {
        self.penalties
            .iter()
            .find(|pb| (pb.offset..pb.offset + pb.size).contains(&col))
            .and_then(|pb| self.names.get(pb.block).cloned())
            .or_else(|| self.names.get(col).cloned())
            .unwrap_or_else(|| format!("column {col}"))
    }

    fn penalized_matrix(&self, lambdas: &[f64]) -> Vec<f64> {
        let p = self.p;
        let mut m = self.xtx.clone();
        for a in 0..p {
            m[a * p + a] += self.jitter;
        }
        for (pb, &lam) in self.penalties.iter().zip(lambdas) {
            for i in 0..pb.size {
                for j in 0..pb.size {
                    m[(pb.offset + i) * p + pb.offset + j] += lam * pb.matrix[i * pb.size + j];
                }
            }
        }
        m
    }

    fn factor(&self, lambdas: &[f64]) -> Result<Cholesky> {
        let m = self.penalized_matrix(lambdas);
        Cholesky::factor(&m, self.p).map_err(|col| Error::Singular {
            effect: self.name_of_column(col),
        })
    }

    /// Coefficients only.
    pub fn solve(&self, lambdas: &[f64]) -> Result<Vec<f64>> {
        let chol = self.factor(lambdas)?;
        let mut beta = self.xty.clone();
        chol.solve_in_place(&mut beta);
        Ok(beta)
    }

    /// Coefficients plus RSS, `tr(A)` and the GCV score.
    pub fn evaluate(&self, lambdas: &[f64]) -> Result<PenalizedFit> {
        let p = self.p;
        let chol = self.factor(lambdas)?;
        let mut beta = self.xty.clone();
        chol.solve_in_place(&mut beta);
        let mut quad = 0.0;
        for a in 0..p {
            quad += beta[a] * dot(&self.xtx[a * p..(a + 1) * p], &beta);
        }
        let rss = (self.yty - 2.0 * dot(&beta, &self.xty) + quad).max(0.0);
        let inv = chol.inverse();
        let edf = dot(&inv, &self.xtx);
        let n = self.n as f64;
        let gcv = n * rss / (n - edf).powi(2);
        Ok(PenalizedFit {
            coefficients: beta,
            rss,
            edf,
            gcv,
        })
    }
}

/// `argmin ||y - X b||^2 + sum_d lambda_d b' S_d b`.
pub fn fit_penalized(
    x: &[f64],
    y: &[f64],
    p: usize,
    penalties: &[PenaltyBlock],
    lambdas: &[f64],
    jitter_rel: f64,
) -> Result<Vec<f64>> {
    if lambdas.len() != penalties.len() {
        return Err(Error::invalid(format!(
            "{} smoothing parameters for {} penalties",
            lambdas.len(),
            penalties.len()
        )));
    }
    PenalizedSystem::new(x, y, p, penalties.to_vec(), jitter_rel).solve(lambdas)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingSelection {
    pub lambdas: Vec<f64>,
    pub grid_indices: Vec<usize>,
    pub gcv: f64,
    pub edf: f64,
}

/// Coordinate descent over the log-spaced grid, starting every parameter at
/// the middle of the grid. Ties keep the lowest grid index.
pub fn select_smoothing(
    system: &PenalizedSystem,
    config: &GamConfig,
) -> Result<SmoothingSelection> {
    let grid = config.lambda_grid();
    let k = system.n_penalties();
    let mut idx = vec![grid.len() / 2; k];
    let lambdas_of = |idx: &[usize]| idx.iter().map(|&i| grid[i]).collect::<Vec<_>>();
    let mut best = system.evaluate(&lambdas_of(&idx))?;
    if !best.gcv.is_finite() {
        return Err(Error::NonFinite(
            "GCV at initial smoothing parameters".into(),
        ));
    }
    for _ in 0..config.sweeps {
        for j in 0..k {
            let mut trial = idx.clone();
            let mut best_j = (idx[j], best.clone());
            for g in 0..grid.len() {
                trial[j] = g;
                let fit = if g == idx[j] {
                    best.clone()
                } else {
                    system.evaluate(&lambdas_of(&trial))?
                };
                if !fit.gcv.is_finite() {
                    return Err(Error::NonFinite(format!("GCV at lambda {}", grid[g])));
                }
                if fit.gcv < best_j.1.gcv || (fit.gcv == best_j.1.gcv && g < best_j.0) {
                    best_j = (g, fit);
                }
            }
            idx[j] = best_j.0;
            best = best_j.1;
        }
    }
    Ok(SmoothingSelection {
        lambdas: lambdas_of(&idx),
        grid_indices: idx,
        gcv: best.gcv,
        edf: best.edf,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectNorm {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedTerm {
    pub name: String,
    pub spec: TermSpec,
    pub basis: Option<SplineBasis>,
    /// Raw-basis coefficients for smooths, one per dummy or slope otherwise.
    pub coefficients: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub norm: EffectNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GamModel {
    pub schema: String,
    pub formula: GamFormula,
    pub instant: u8,
    pub source_id: SeriesId,
    pub intercept: f64,
    pub terms: Vec<FittedTerm>,
    pub train_span: (Timestamp, Timestamp),
    pub n_train: usize,
    pub gcv: f64,
    pub edf: f64,
    pub trend_max: f64,
    pub trend_horizon: f64,
}

impl GamModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: GamModel = serde_json::from_str(s)?;
        if m.schema != GAM_MODEL_SCHEMA {
            return Err(Error::invalid(format!("unexpected schema `{}`", m.schema)));
        }
        Ok(m)
    }

    /// Number of effects `D` (the effect vector has length `D + 1`).
    pub fn n_effects(&self) -> usize {
        self.terms.len()
    }

    pub fn effect_names(&self) -> Vec<String> {
        std::iter::once("Bias".to_string())
            .chain(self.terms.iter().map(|t| t.name.clone()))
            .collect()
    }

    fn term_value(&self, term: &FittedTerm, row: &FeatureRow) -> Result<f64> {
        let value = |c: Covariate| -> Result<f64> {
            let v = c
                .value(row)
                .ok_or_else(|| Error::MissingCovariate(c.name().into()))?;
            Ok(if c == Covariate::Trend {
                v.min(self.trend_max + self.trend_horizon)
            } else {
                v
            })
        };
        Ok(match &term.spec {
            TermSpec::Categorical { factor } => {
                let level = factor.level(row);
                if level == 0 {
                    0.0
                } else {
                    term.coefficients[level - 1]
                }
            }
            TermSpec::Linear { covariate } => term.coefficients[0] * value(*covariate)?,
            TermSpec::Smooth { covariate, by, .. } => {
                if by.is_some_and(|(f, level)| f.level(row) != level) {
                    0.0
                } else {
                    let basis = term.basis.as_ref().expect("smooth term has a basis");
                    dot(&basis.evaluate(&[value(*covariate)?]), &term.coefficients)
                }
            }
            TermSpec::Tensor { covariates, .. } => {
                let basis = term.basis.as_ref().expect("tensor term has a basis");
                let x = [value(covariates[0])?, value(covariates[1])?];
                dot(&basis.evaluate(&x), &term.coefficients)
            }
        })
    }

    /// Raw (un-normalized) effect values `f_d(x)`.
    pub fn effects(&self, row: &FeatureRow) -> Result<Vec<f64>> {
        self.terms.iter().map(|t| self.term_value(t, row)).collect()
    }

    pub fn predict_row(&self, row: &FeatureRow) -> Result<f64> {
        Ok(self.intercept + self.effects(row)?.iter().sum::<f64>())
    }

    /// `(1, (f_1 - mean_1)/std_1, ..., (f_D - mean_D)/std_D)`.
    pub fn effect_vector(&self, row: &FeatureRow) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.terms.len() + 1);
        out.push(1.0);
        for t in &self.terms {
            let v = self.term_value(t, row)?;
            out.push((v - t.norm.mean) / t.norm.std);
        }
        Ok(out)
    }

    /// State vector for which `theta . effect_vector(row) == predict_row(row)`.
    pub fn reconstruction_theta(&self) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.terms.len() + 1);
        theta.push(self.intercept + self.terms.iter().map(|t| t.norm.mean).sum::<f64>());
        theta.extend(self.terms.iter().map(|t| t.norm.std));
        theta
    }
}

/// Fits the model at one instant. The frame should already be restricted to
/// the training span.
pub fn fit_gam(
    frame: &FeatureFrame,
    formula: &GamFormula,
    instant: u8,
    config: &GamConfig,
) -> Result<GamModel> {
    let design = build_design(frame, formula, instant)?;
    if design.n < 2 * design.p {
        return Err(Error::invalid(format!(
            "substation {} instant {instant}: {} rows for {} columns (need at least twice as many)",
            frame.substation_id, design.n, design.p
        )));
    }
    let block_names: Vec<String> = design.blocks.iter().map(|b| b.name.clone()).collect();
    let system = PenalizedSystem::new(
        &design.x,
        &design.y,
        design.p,
        design.penalties.clone(),
        config.jitter,
    )
    .with_names(block_names);
    let selection = select_smoothing(&system, config)?;
    let beta = system.solve(&selection.lambdas)?;
    Ok(assemble_model(
        frame, formula, instant, config, &design, &beta, &selection,
    ))
}

fn assemble_model(
    frame: &FeatureFrame,
    formula: &GamFormula,
    instant: u8,
    config: &GamConfig,
    design: &Design,
    beta: &[f64],
    selection: &SmoothingSelection,
) -> GamModel {
    let mut terms = Vec::new();
    for (bi, block) in design.blocks.iter().enumerate() {
        let term = &formula.terms[block.term];
        let b = &beta[block.columns.clone()];
        let coefficients = match &block.constraint {
            Some((m, z)) => {
                let mc = m - 1;
                (0..*m)
                    .map(|k| (0..mc).map(|j| z[k * mc + j] * b[j]).sum())
                    .collect()
            }
            None => b.to_vec(),
        };
        // effect values over training rows, from the constrained columns
        let vals: Vec<f64> = (0..design.n)
            .map(|i| dot(&design.row(i)[block.columns.clone()], b))
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        let std = if std > 1e-12 * (1.0 + mean.abs()) {
            std
        } else {
            1.0
        };
        let lambdas: Vec<f64> = design
            .penalties
            .iter()
            .enumerate()
            .filter(|(_, pb)| pb.block == bi)
            .map(|(k, _)| selection.lambdas[k])
            .collect();
        terms.push(FittedTerm {
            name: term.name.clone(),
            spec: term.spec.clone(),
            basis: block.basis.clone(),
            coefficients,
            lambdas,
            norm: EffectNorm { mean, std },
        });
    }
    let rows = frame.at_instant(instant);
    let trend_max = rows
        .iter()
        .map(|r| r.trend)
        .fold(f64::NEG_INFINITY, f64::max);
    GamModel {
        schema: GAM_MODEL_SCHEMA.into(),
        formula: formula.clone(),
        instant,
        source_id: frame.substation_id,
        intercept: beta[0],
        terms,
        train_span: (design.rows[0], *design.rows.last().unwrap()),
        n_train: design.n,
        gcv: selection.gcv,
        edf: selection.edf,
        trend_max,
        trend_horizon: config.trend_horizon,
    }
}

/// Forecasts for every row of the frame at the model's instant, in time order.
pub fn predict_gam(model: &GamModel, frame: &FeatureFrame) -> Result<Vec<(Timestamp, f64)>> {
    frame
        .at_instant(model.instant)
        .into_iter()
        .map(|r| Ok((r.timestamp, model.predict_row(r)?)))
        .collect()
}

pub fn effect_vector(model: &GamModel, row: &FeatureRow) -> Result<Vec<f64>> {
    model.effect_vector(row)
}

/// One model per requested instant.
pub fn fit_gam_instants(
    frame: &FeatureFrame,
    formula: &GamFormula,
    instants: &[u8],
    config: &GamConfig,
) -> Result<BTreeMap<u8, GamModel>> {
    instants
        .iter()
        .map(|&i| fit_gam(frame, formula, i, config).map(|m| (i, m)))
        .collect()
}
