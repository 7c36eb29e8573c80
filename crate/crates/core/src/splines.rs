//! Cubic regression spline bases (natural and cyclic) with closed-form
//! second-derivative penalties, plus their tensor product.
//!
//! A univariate basis is parameterised by the spline values at its knots.
//! The second derivatives at the knots are a linear map of those values,
//! `delta = F beta`, obtained from first-derivative continuity (with natural
//! end conditions, or periodic wrap-around for the cyclic kind). Since `f''`
//! is piecewise linear, `int f''^2 = delta' G delta` for a tridiagonal `G`,
//! which gives the penalty `S = F' G F` without any quadrature.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisKind {
    CubicRegression,
    CyclicCubic,
    TensorProduct,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CubicBasisRepr {
    kind: BasisKind,
    knots: Vec<f64>,
}

/// Univariate cubic regression spline basis. For the cyclic kind the last
/// knot is identified with the first, so `dimension == knots.len() - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CubicBasisRepr", into = "CubicBasisRepr")]
pub struct CubicBasis {
    kind: BasisKind,
    knots: Vec<f64>,
    /// Row-major `dimension x dimension` map from knot values to knot second derivatives.
    second_deriv: DMatrix<f64>,
}

impl TryFrom<CubicBasisRepr> for CubicBasis {
    type Error = Error;

    fn try_from(r: CubicBasisRepr) -> Result<Self> {
        CubicBasis::from_knots(r.kind, r.knots)
    }
}

impl From<CubicBasis> for CubicBasisRepr {
    fn from(b: CubicBasis) -> Self {
        Self {
            kind: b.kind,
            knots: b.knots,
        }
    }
}

impl CubicBasis {
    pub fn from_knots(kind: BasisKind, knots: Vec<f64>) -> Result<Self> {
        if knots.iter().any(|k| !k.is_finite()) || knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(
                "knots must be finite and strictly increasing",
            ));
        }
        let second_deriv = match kind {
            BasisKind::CubicRegression => {
                if knots.len() < 3 {
                    return Err(Error::invalid(
                        "cubic regression basis needs at least 3 knots",
                    ));
                }
                natural_second_deriv_map(&knots)?
            }
            BasisKind::CyclicCubic => {
                if knots.len() < 4 {
                    return Err(Error::invalid(
                        "cyclic basis needs at least 4 knots (dimension 3)",
                    ));
                }
                cyclic_second_deriv_map(&knots)?
            }
            BasisKind::TensorProduct => {
                return Err(Error::invalid(
                    "tensor products are built with tensor_basis",
                ));
            }
        };
        Ok(Self {
            kind,
            knots,
            second_deriv,
        })
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn dimension(&self) -> usize {
        match self.kind {
            BasisKind::CyclicCubic => self.knots.len() - 1,
            _ => self.knots.len(),
        }
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.knots[0], *self.knots.last().unwrap())
    }

    fn is_cyclic(&self) -> bool {
        self.kind == BasisKind::CyclicCubic
    }

    /// True when `x` lies outside the knot range (linear extrapolation or wrapping applies).
    pub fn extrapolates(&self, x: f64) -> bool {
        let (lo, hi) = self.domain();
        x < lo || x > hi
    }

    fn interval(&self, x: f64) -> usize {
        let k = &self.knots;
        let last = k.len() - 2;
        match k.partition_point(|&v| v <= x) {
            0 => 0,
            p => (p - 1).min(last),
        }
    }

    fn wrap(&self, x: f64) -> f64 {
        let (lo, hi) = self.domain();
        let period = hi - lo;
        let w = lo + (x - lo).rem_euclid(period);
        if w >= hi {
            lo
        } else {
            w
        }
    }

    /// Basis row at `x`, i.e. the coefficients `b` such that `f(x) = b . beta`.
    pub fn evaluate(&self, x: f64) -> Vec<f64> {
        self.evaluate_derivative(x, 0)
    }

    /// Row of the `order`-th derivative (0, 1 or 2) at `x`.
    pub fn evaluate_derivative(&self, x: f64, order: u8) -> Vec<f64> {
        let m = self.dimension();
        let mut row = vec![0.0; m];
        let (lo, hi) = self.domain();
        let x = if self.is_cyclic() { self.wrap(x) } else { x };

        if !self.is_cyclic() && (x < lo || x > hi) {
            // Linear continuation from the nearest end.
            let (edge, j) = if x < lo { (lo, 0) } else { (hi, m - 2) };
            let slope = self.slope_row_at(edge, j);
            match order {
                0 => {
                    let end = if x < lo { 0 } else { m - 1 };
                    row[end] = 1.0;
                    for (r, s) in row.iter_mut().zip(&slope) {
                        *r += s * (x - edge);
                    }
                }
                1 => row = slope,
                _ => {}
            }
            return row;
        }

        let j = self.interval(x);
        let (xl, xr) = (self.knots[j], self.knots[j + 1]);
        let h = xr - xl;
        let (jl, jr) = (j, (j + 1) % m);
        let (dl, dr) = (xr - x, x - xl);
        let (a_l, a_r, c_l, c_r) = match order {
            0 => (
                dl / h,
                dr / h,
                (dl * dl * dl / h - h * dl) / 6.0,
                (dr * dr * dr / h - h * dr) / 6.0,
            ),
            1 => (
                -1.0 / h,
                1.0 / h,
                (-3.0 * dl * dl / h + h) / 6.0,
                (3.0 * dr * dr / h - h) / 6.0,
            ),
            2 => (0.0, 0.0, dl / h, dr / h),
            _ => (0.0, 0.0, 0.0, 0.0),
        };
        row[jl] += a_l;
        row[jr] += a_r;
        for c in 0..m {
            row[c] += c_l * self.second_deriv[(jl, c)] + c_r * self.second_deriv[(jr, c)];
        }
        row
    }

    fn slope_row_at(&self, x: f64, interval: usize) -> Vec<f64> {
        // derivative of the interior piece, evaluated at its end knot
        let m = self.dimension();
        let (xl, xr) = (self.knots[interval], self.knots[interval + 1]);
        let h = xr - xl;
        let (dl, dr) = (xr - x, x - xl);
        let mut row = vec![0.0; m];
        row[interval] -= 1.0 / h;
        row[interval + 1] += 1.0 / h;
        let c_l = (-3.0 * dl * dl / h + h) / 6.0;
        let c_r = (3.0 * dr * dr / h - h) / 6.0;
        for (c, r) in row.iter_mut().enumerate() {
            *r +=
                c_l * self.second_deriv[(interval, c)] + c_r * self.second_deriv[(interval + 1, c)];
        }
        row
    }

    /// `S` with `beta' S beta = int f''(x)^2 dx` over the knot range.
    pub fn penalty(&self) -> PenaltyMatrix {
        let m = self.dimension();
        let mut gram = DMatrix::<f64>::zeros(m, m);
        for j in 0..self.knots.len() - 1 {
            let h = self.knots[j + 1] - self.knots[j];
            let (a, b) = (j % m, (j + 1) % m);
            gram[(a, a)] += h / 3.0;
            gram[(b, b)] += h / 3.0;
            gram[(a, b)] += h / 6.0;
            gram[(b, a)] += h / 6.0;
        }
        let f = &self.second_deriv;
        let s = f.transpose() * gram * f;
        PenaltyMatrix::symmetrized(s)
    }
}

fn natural_second_deriv_map(knots: &[f64]) -> Result<DMatrix<f64>> {
    let k = knots.len();
    let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
    let n = k - 2;
    let mut b = DMatrix::<f64>::zeros(n, n);
    let mut d = DMatrix::<f64>::zeros(n, k);
    for i in 0..n {
        b[(i, i)] = (h[i] + h[i + 1]) / 3.0;
        if i + 1 < n {
            b[(i, i + 1)] = h[i + 1] / 6.0;
            b[(i + 1, i)] = h[i + 1] / 6.0;
        }
        d[(i, i)] = 1.0 / h[i];
        d[(i, i + 1)] = -1.0 / h[i] - 1.0 / h[i + 1];
        d[(i, i + 2)] = 1.0 / h[i + 1];
    }
    let inner = b
        .cholesky()
        .ok_or_else(|| Error::invalid("degenerate knot spacing"))?
        .solve(&d);
    let mut f = DMatrix::<f64>::zeros(k, k);
    f.view_mut((1, 0), (n, k)).copy_from(&inner);
    Ok(f)
}

fn cyclic_second_deriv_map(knots: &[f64]) -> Result<DMatrix<f64>> {
    let m = knots.len() - 1;
    let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
    let mut b = DMatrix::<f64>::zeros(m, m);
    let mut d = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        let prev = (i + m - 1) % m;
        let next = (i + 1) % m;
        let (hp, hi) = (h[prev], h[i]);
        b[(i, prev)] += hp / 6.0;
        b[(i, i)] += (hp + hi) / 3.0;
        b[(i, next)] += hi / 6.0;
        d[(i, prev)] += 1.0 / hp;
        d[(i, i)] -= 1.0 / hp + 1.0 / hi;
        d[(i, next)] += 1.0 / hi;
    }
    b.cholesky()
        .ok_or_else(|| Error::invalid("degenerate knot spacing"))
        .map(|c| c.solve(&d))
}

/// Symmetric positive semi-definite penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix {
    pub matrix: DMatrix<f64>,
}

impl PenaltyMatrix {
    pub fn symmetrized(m: DMatrix<f64>) -> Self {
        let s = (&m + m.transpose()) * 0.5;
        Self { matrix: s }
    }

    pub fn dimension(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn quadratic_form(&self, beta: &[f64]) -> f64 {
        let b = DVector::from_column_slice(beta);
        (b.transpose() * &self.matrix * &b)[(0, 0)]
    }
}

/// Univariate basis or a tensor product of two univariate bases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SplineBasis {
    Univariate(CubicBasis),
    Tensor(CubicBasis, CubicBasis),
}

impl SplineBasis {
    pub fn kind(&self) -> BasisKind {
        match self {
            SplineBasis::Univariate(b) => b.kind(),
            SplineBasis::Tensor(..) => BasisKind::TensorProduct,
        }
    }

    pub fn dimension(&self) -> usize {
        match self {
            SplineBasis::Univariate(b) => b.dimension(),
            SplineBasis::Tensor(a, b) => a.dimension() * b.dimension(),
        }
    }

    /// `x` holds one coordinate for univariate bases, two for tensors.
    pub fn evaluate(&self, x: &[f64]) -> Vec<f64> {
        match self {
            SplineBasis::Univariate(b) => b.evaluate(x[0]),
            SplineBasis::Tensor(a, b) => kron(&a.evaluate(x[0]), &b.evaluate(x[1])),
        }
    }

    /// One penalty per smoothing parameter: a single one for univariate
    /// bases, the two marginal penalties `S_a (x) I` and `I (x) S_b` for tensors.
    pub fn penalties(&self) -> Vec<PenaltyMatrix> {
        match self {
            SplineBasis::Univariate(b) => vec![b.penalty()],
            SplineBasis::Tensor(a, b) => {
                let ia = DMatrix::<f64>::identity(a.dimension(), a.dimension());
                let ib = DMatrix::<f64>::identity(b.dimension(), b.dimension());
                vec![
                    PenaltyMatrix::symmetrized(a.penalty().matrix.kronecker(&ib)),
                    PenaltyMatrix::symmetrized(ia.kronecker(&b.penalty().matrix)),
                ]
            }
        }
    }
}

fn kron(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for &u in a {
        out.extend(b.iter().map(|&v| u * v));
    }
    out
}

/// Type-7 quantile of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Builds a univariate basis with knots at quantiles of the distinct covariate
/// values. `domain` overrides the end knots (e.g. `(0, 1)` for a cyclic
/// time-of-year effect); by default the observed range is used.
pub fn make_basis(
    name: &str,
    kind: BasisKind,
    values: &[f64],
    dimension: usize,
    domain: Option<(f64, f64)>,
) -> Result<CubicBasis> {
    let effect_err = |reason: String| Error::Effect {
        effect: name.to_string(),
        reason,
    };
    if dimension < 3 {
        return Err(effect_err(format!("basis dimension {dimension} < 3")));
    }
    let mut uniq: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if let Some((lo, hi)) = domain {
        if !(lo < hi) {
            return Err(effect_err(format!("empty domain [{lo}, {hi}]")));
        }
        uniq.retain(|v| *v >= lo && *v <= hi);
    }
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    if uniq.len() < dimension {
        return Err(effect_err(format!(
            "{} distinct values, basis of dimension {dimension} requested",
            uniq.len()
        )));
    }
    let (lo, hi) = domain.unwrap_or((uniq[0], *uniq.last().unwrap()));
    let n_knots = match kind {
        BasisKind::CubicRegression => dimension,
        BasisKind::CyclicCubic => dimension + 1,
        BasisKind::TensorProduct => {
            return Err(effect_err("use tensor_basis for tensor products".into()))
        }
    };
    let last = n_knots - 1;
    let mut knots: Vec<f64> = (0..n_knots)
        .map(|j| quantile_sorted(&uniq, j as f64 / last as f64))
        .collect();
    knots[0] = lo;
    knots[last] = hi;
    CubicBasis::from_knots(kind, knots).map_err(|e| effect_err(e.to_string()))
}

pub fn tensor_basis(a: CubicBasis, b: CubicBasis) -> SplineBasis {
    SplineBasis::Tensor(a, b)
}
