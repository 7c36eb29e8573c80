//! Forecast scoring: NMAE, fleet quartiles and period-segmented reports.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::aggregation::{best_expert_oracle, convex_oracle, ConvexOracleConfig, LossKind};
use crate::error::{Error, Result};
use crate::features::{SeriesId, Timestamp};

pub const EVAL_REPORT_SCHEMA: &str = "eval_report_v1";

/// Normalized mean absolute error in percent. Rows whose truth is missing
/// are skipped.
pub fn nmae(y: &[Option<f64>], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::invalid(format!(
            "{} observations for {} forecasts",
            y.len(),
            y_hat.len()
        )));
    }
    let (mut err, mut scale) = (0.0, 0.0);
    for (y, f) in y.iter().zip(y_hat) {
        if let Some(y) = y {
            err += (y - f).abs();
            scale += y.abs();
        }
    }
    if scale <= 0.0 {
        return Err(Error::invalid(
            "NMAE is undefined when the observed values sum to zero in absolute value",
        ));
    }
    Ok(100.0 * err / scale)
}

/// Linear-interpolation quantile (type 7) of an ascending slice.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted_finite(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Empty("no scores".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

pub fn median(scores: &[f64]) -> Result<f64> {
    Ok(quantile_sorted(&sorted_finite(scores)?, 0.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

pub fn quartile_report(scores: &[f64]) -> Result<Quartiles> {
    let s = sorted_finite(scores)?;
    Ok(Quartiles {
        q1: quantile_sorted(&s, 0.25),
        median: quantile_sorted(&s, 0.5),
        q3: quantile_sorted(&s, 0.75),
    })
}

/// Inclusive day range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateSpan {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateSpan {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }

    fn overlaps(&self, o: &DateSpan) -> bool {
        self.start <= o.end && o.start <= self.end
    }
}

/// A named evaluation period, possibly made of several disjoint spans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub name: String,
    pub spans: Vec<DateSpan>,
}

impl Window {
    pub fn new(name: impl Into<String>, start: NaiveDate, end: NaiveDate) -> Self {
        Self {
            name: name.into(),
            spans: vec![DateSpan::new(start, end)],
        }
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        self.spans.iter().any(|s| s.contains(d))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodSegmentation {
    pub windows: Vec<Window>,
}

fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid date")
}

impl PeriodSegmentation {
    pub fn new(windows: Vec<Window>) -> Result<Self> {
        let seg = Self { windows };
        seg.validate()?;
        Ok(seg)
    }

    /// 2020 outside the first lockdown, the first lockdown itself, and 2021.
    pub fn default_trio() -> Self {
        Self {
            windows: vec![
                Window {
                    name: "2020-out-of-lockdown".into(),
                    spans: vec![
                        DateSpan::new(ymd(2020, 1, 1), ymd(2020, 3, 15)),
                        DateSpan::new(ymd(2020, 5, 12), ymd(2020, 12, 31)),
                    ],
                },
                Window::new("first-lockdown", ymd(2020, 3, 16), ymd(2020, 5, 11)),
                Window::new("2021", ymd(2021, 1, 1), ymd(2021, 12, 31)),
            ],
        }
    }

    /// One window spanning every date.
    pub fn whole() -> Self {
        Self {
            windows: vec![Window::new("all", NaiveDate::MIN, NaiveDate::MAX)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.windows.is_empty() {
            return Err(Error::Config("no evaluation window".into()));
        }
        let names: BTreeSet<_> = self.windows.iter().map(|w| &w.name).collect();
        if names.len() != self.windows.len() {
            return Err(Error::Config("window names must be unique".into()));
        }
        let spans: Vec<(&str, DateSpan)> = self
            .windows
            .iter()
            .flat_map(|w| w.spans.iter().map(move |s| (w.name.as_str(), *s)))
            .collect();
        for (i, (na, a)) in spans.iter().enumerate() {
            if a.start > a.end {
                return Err(Error::Config(format!("window {na} ends before it starts")));
            }
            for (nb, b) in &spans[i + 1..] {
                if a.overlaps(b) {
                    return Err(Error::Config(format!("windows {na} and {nb} overlap")));
                }
            }
        }
        Ok(())
    }
}

/// Forecasts of one method for one target, aligned with the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSeries {
    pub method: String,
    pub target: SeriesId,
    pub timestamps: Vec<Timestamp>,
    pub y: Vec<Option<f64>>,
    pub forecasts: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetScore {
    pub method: String,
    pub period: String,
    pub target_id: SeriesId,
    pub nmae_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub period: String,
    pub n_targets: usize,
    /// Absent when no target has data in the window.
    pub quartiles: Option<Quartiles>,
    /// Per-target NMAE in ascending order.
    pub sorted_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema: String,
    pub windows: Vec<Window>,
    pub summary: Vec<SummaryRow>,
    pub per_target: Vec<TargetScore>,
    /// `(method, period, target)` combinations without usable data.
    pub flagged: Vec<(String, String, Option<SeriesId>)>,
}

/// Scores every series separately in each window. Windows or targets without
/// data are flagged.
pub fn segment_scores(
    series: &[ScoredSeries],
    segmentation: &PeriodSegmentation,
) -> Result<EvaluationReport> {
    segmentation.validate()?;
    let mut by_method: BTreeMap<&str, Vec<&ScoredSeries>> = BTreeMap::new();
    for s in series {
        if s.timestamps.len() != s.y.len() || s.y.len() != s.forecasts.len() {
            return Err(Error::invalid(format!(
                "misaligned series for target {}",
                s.target
            )));
        }
        by_method.entry(&s.method).or_default().push(s);
    }
    let mut report = EvaluationReport {
        schema: EVAL_REPORT_SCHEMA.into(),
        windows: segmentation.windows.clone(),
        summary: vec![],
        per_target: vec![],
        flagged: vec![],
    };
    for (method, mut list) in by_method {
        list.sort_by_key(|s| s.target);
        for w in &segmentation.windows {
            let mut scores = Vec::new();
            for s in &list {
                let idx: Vec<usize> = (0..s.timestamps.len())
                    .filter(|&t| w.contains(s.timestamps[t].date))
                    .collect();
                let y: Vec<Option<f64>> = idx.iter().map(|&t| s.y[t]).collect();
                let f: Vec<f64> = idx.iter().map(|&t| s.forecasts[t]).collect();
                match nmae(&y, &f) {
                    Ok(v) => {
                        scores.push(v);
                        report.per_target.push(TargetScore {
                            method: method.to_string(),
                            period: w.name.clone(),
                            target_id: s.target,
                            nmae_pct: v,
                        });
                    }
                    Err(_) => {
                        report
                            .flagged
                            .push((method.to_string(), w.name.clone(), Some(s.target)))
                    }
                }
            }
            let quartiles = if scores.is_empty() {
                report
                    .flagged
                    .push((method.to_string(), w.name.clone(), None));
                None
            } else {
                Some(quartile_report(&scores)?)
            };
            scores.sort_by(f64::total_cmp);
            report.summary.push(SummaryRow {
                method: method.to_string(),
                period: w.name.clone(),
                n_targets: scores.len(),
                quartiles,
                sorted_scores: scores,
            });
        }
    }
    Ok(report)
}

impl EvaluationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        if r.schema != EVAL_REPORT_SCHEMA {
            return Err(Error::invalid(format!(
                "unexpected report schema {}",
                r.schema
            )));
        }
        Ok(r)
    }

    /// Flat table `method,period,target_id,nmae_pct`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.per_target {
            w.serialize(row)?;
        }
        if self.per_target.is_empty() {
            w.write_record(["method", "period", "target_id", "nmae_pct"])?;
        }
        w.flush().map_err(|e| Error::io("evaluation csv", e))
    }

    pub fn summary_row(&self, method: &str, period: &str) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.method == method && r.period == period)
    }
}

/// Expert forecasts behind one aggregation (one target, one instant).
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPanel {
    pub method: String,
    pub target: SeriesId,
    pub timestamps: Vec<Timestamp>,
    pub y: Vec<Option<f64>>,
    /// Row-major `T x E`.
    pub forecasts: Vec<f64>,
    pub n_experts: usize,
}

/// Hindsight oracles fitted separately in each window: the best single
/// expert (absolute loss) and the best fixed convex combination (squared
/// loss). Returns series named `<method>+best-expert` and
/// `<method>+convex-oracle`, ready for [`segment_scores`].
pub fn oracle_series(
    panels: &[ExpertPanel],
    segmentation: &PeriodSegmentation,
) -> Result<Vec<ScoredSeries>> {
    let mut acc: BTreeMap<(String, SeriesId), Vec<(Timestamp, Option<f64>, f64)>> = BTreeMap::new();
    for p in panels {
        let e = p.n_experts;
        if e == 0 || p.forecasts.len() != p.timestamps.len() * e || p.y.len() != p.timestamps.len()
        {
            return Err(Error::invalid(format!(
                "malformed expert panel for target {}",
                p.target
            )));
        }
        for w in &segmentation.windows {
            let rows: Vec<usize> = (0..p.timestamps.len())
                .filter(|&t| w.contains(p.timestamps[t].date))
                .collect();
            let observed: Vec<usize> = rows.iter().copied().filter(|&t| p.y[t].is_some()).collect();
            if observed.is_empty() {
                continue;
            }
            let f: Vec<f64> = observed
                .iter()
                .flat_map(|&t| p.forecasts[t * e..(t + 1) * e].to_vec())
                .collect();
            let y: Vec<f64> = observed
                .iter()
                .map(|&t| p.y[t].expect("observed"))
                .collect();
            let best = best_expert_oracle(&f, &y, e, LossKind::Absolute)?;
            let convex =
                convex_oracle(&f, &y, e, LossKind::Squared, &ConvexOracleConfig::default())?;
            for (suffix, weights) in [
                ("best-expert", &best.weights),
                ("convex-oracle", &convex.weights),
            ] {
                let out = acc
                    .entry((format!("{}+{suffix}", p.method), p.target))
                    .or_default();
                for &t in &rows {
                    let pred = crate::linalg::dot(&p.forecasts[t * e..(t + 1) * e], weights);
                    out.push((p.timestamps[t], p.y[t], pred));
                }
            }
        }
    }
    Ok(acc
        .into_iter()
        .map(|((method, target), mut rows)| {
            rows.sort_by_key(|r| r.0);
            ScoredSeries {
                method,
                target,
                timestamps: rows.iter().map(|r| r.0).collect(),
                y: rows.iter().map(|r| r.1).collect(),
                forecasts: rows.iter().map(|r| r.2).collect(),
            }
        })
        .collect())
}
