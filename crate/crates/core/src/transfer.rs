//! Hybrid experts `M(i, j, k)` (GAM trained on series `i`, Kalman variances
//! estimated on series `j`, applied to target `k`), the forecasting methods
//! built from them, and the bookkeeping of how many expensive fits each
//! method needs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use chrono::NaiveDate;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    aggregate_series, hybrid_state_coefficients, AggregationRun, AggregationState,
};
use crate::error::{Error, Result};
use crate::eval::{median, nmae};
use crate::features::{
    assign_closest_station, build_feature_frame, interpolate_weather, Calendar, FeatureFrame,
    LagConfig, LoadSeries, SeriesId, Timestamp, WeatherSeries, INSTANTS_PER_DAY,
};
use crate::gam::{fit_gam, GamConfig, GamFormula, GamModel, Variant};
use crate::kalman::{
    dynamic_init, filter_matrix, greedy_variance_search_matrix, static_params, EffectMatrix,
    KalmanHyperParams, VarianceSearchConfig,
};
use crate::synthgen::derive_seed;

/// Where the Kalman variances of an expert come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum KalmanSource {
    /// No adaptation: the GAM forecast as is.
    None,
    /// `sigma2 = 1`, `Q = 0`, `P1 = I`, `theta1 = 0`.
    Static,
    /// Variances searched on this substation's training data.
    Dynamic(SeriesId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExpertSpec {
    pub gam_source: SeriesId,
    pub kalman: KalmanSource,
    pub target: SeriesId,
}

impl ExpertSpec {
    /// Accepts `M(k,-,k)`, `M(k,0,k)`, `M(k,k,k)`, `M(i,-,k)`, `M(i,i,k)` and `M(k,j,k)`.
    pub fn new(gam_source: SeriesId, kalman: KalmanSource, target: SeriesId) -> Result<Self> {
        let legal = match kalman {
            KalmanSource::None => true,
            KalmanSource::Static => gam_source == target,
            KalmanSource::Dynamic(j) => j == gam_source || gam_source == target,
        };
        if !legal {
            return Err(Error::invalid(format!(
                "expert M({gam_source},{},{target}) is not a supported combination",
                kalman_label(kalman)
            )));
        }
        Ok(Self {
            gam_source,
            kalman,
            target,
        })
    }

    pub fn label(&self) -> String {
        format!(
            "M({},{},{})",
            self.gam_source,
            kalman_label(self.kalman),
            self.target
        )
    }
}

fn kalman_label(k: KalmanSource) -> String {
    match k {
        KalmanSource::None => "-".into(),
        KalmanSource::Static => "0".into(),
        KalmanSource::Dynamic(j) => j.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    StGam,
    MtGam,
    GamKalmanStatic,
    GamKalmanDynamic,
    AggGamTl,
    AggGamKalmanTl,
    AggKalmanTl,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::StGam,
        Method::MtGam,
        Method::GamKalmanStatic,
        Method::GamKalmanDynamic,
        Method::AggGamTl,
        Method::AggGamKalmanTl,
        Method::AggKalmanTl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::StGam => "st-gam",
            Method::MtGam => "mt-gam",
            Method::GamKalmanStatic => "gam-kalman-static",
            Method::GamKalmanDynamic => "gam-kalman-dynamic",
            Method::AggGamTl => "agg-gam-tl",
            Method::AggGamKalmanTl => "agg-gam-kalman-tl",
            Method::AggKalmanTl => "agg-kalman-tl",
        }
    }

    pub fn is_aggregation(self) -> bool {
        matches!(
            self,
            Method::AggGamTl | Method::AggGamKalmanTl | Method::AggKalmanTl
        )
    }

    fn variant(self) -> Variant {
        if self == Method::MtGam {
            Variant::MT
        } else {
            Variant::ST
        }
    }

    /// Cost expression in units of GAM fits (`C1`) and variance searches (`C2`).
    pub fn cost_formula(self) -> &'static str {
        match self {
            Method::StGam | Method::MtGam | Method::GamKalmanStatic => "C1 x mT",
            Method::GamKalmanDynamic => "(C1 + C2) x mT",
            Method::AggGamTl => "C1 x n1",
            Method::AggGamKalmanTl => "(C1 + C2) x n2",
            Method::AggKalmanTl => "C1 x mT + C2 x n3",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelinePlan {
    pub method: Method,
    /// Experts per aggregation; ignored by the individual methods.
    pub n_experts: usize,
    /// Pool the aggregation sources are drawn from.
    pub sources: Vec<SeriesId>,
    pub targets: Vec<SeriesId>,
    pub seed: u64,
    pub instants: Vec<u8>,
}

impl PipelinePlan {
    pub fn new(
        method: Method,
        n_experts: usize,
        sources: Vec<SeriesId>,
        targets: Vec<SeriesId>,
        seed: u64,
    ) -> Self {
        Self {
            method,
            n_experts,
            sources,
            targets,
            seed,
            instants: (0..INSTANTS_PER_DAY as u8).collect(),
        }
    }

    pub fn with_instants(mut self, instants: Vec<u8>) -> Self {
        self.instants = instants;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Config("plan has no targets".into()));
        }
        if self.instants.is_empty()
            || self
                .instants
                .iter()
                .any(|&i| i as usize >= INSTANTS_PER_DAY)
        {
            return Err(Error::Config(
                "plan instants must be a non-empty subset of 0..47".into(),
            ));
        }
        let unique = |v: &[SeriesId]| v.iter().collect::<BTreeSet<_>>().len() == v.len();
        if !unique(&self.sources) || !unique(&self.targets) || !unique_u8(&self.instants) {
            return Err(Error::Config("plan lists contain duplicates".into()));
        }
        if self.method.is_aggregation() {
            if self.n_experts == 0 {
                return Err(Error::Config(
                    "an aggregation needs at least one expert".into(),
                ));
            }
            if self.n_experts > self.sources.len() {
                return Err(Error::Config(format!(
                    "{} experts requested from a pool of {} sources",
                    self.n_experts,
                    self.sources.len()
                )));
            }
        }
        Ok(())
    }

    /// Seeded uniform draw of `n_experts` sources without replacement, sorted.
    /// Each method draws from its own stream of the plan seed.
    pub fn draw_sources(&self) -> Vec<SeriesId> {
        if !self.method.is_aggregation() {
            return vec![];
        }
        let mut pool = self.sources.clone();
        pool.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, self.method.name(), 0));
        let mut drawn: Vec<SeriesId> = sample(&mut rng, pool.len(), self.n_experts.min(pool.len()))
            .into_iter()
            .map(|i| pool[i])
            .collect();
        drawn.sort_unstable();
        drawn
    }

    pub fn experts_for(&self, target: SeriesId, drawn: &[SeriesId]) -> Result<Vec<ExpertSpec>> {
        match self.method {
            Method::StGam | Method::MtGam => {
                Ok(vec![ExpertSpec::new(target, KalmanSource::None, target)?])
            }
            Method::GamKalmanStatic => {
                Ok(vec![ExpertSpec::new(target, KalmanSource::Static, target)?])
            }
            Method::GamKalmanDynamic => Ok(vec![ExpertSpec::new(
                target,
                KalmanSource::Dynamic(target),
                target,
            )?]),
            Method::AggGamTl => drawn
                .iter()
                .map(|&i| ExpertSpec::new(i, KalmanSource::None, target))
                .collect(),
            Method::AggGamKalmanTl => drawn
                .iter()
                .map(|&i| ExpertSpec::new(i, KalmanSource::Dynamic(i), target))
                .collect(),
            Method::AggKalmanTl => drawn
                .iter()
                .map(|&j| ExpertSpec::new(target, KalmanSource::Dynamic(j), target))
                .collect(),
        }
    }

    /// Substations whose GAM (all plan instants) and variances the plan needs.
    pub fn requirements(&self, drawn: &[SeriesId]) -> Requirements {
        let variant = self.method.variant();
        let mut gams = BTreeSet::new();
        let mut searches = BTreeSet::new();
        match self.method {
            Method::StGam | Method::MtGam | Method::GamKalmanStatic => {
                gams.extend(self.targets.iter().copied());
            }
            Method::GamKalmanDynamic => {
                gams.extend(self.targets.iter().copied());
                searches.extend(self.targets.iter().copied());
            }
            Method::AggGamTl => gams.extend(drawn.iter().copied()),
            Method::AggGamKalmanTl => {
                gams.extend(drawn.iter().copied());
                searches.extend(drawn.iter().copied());
            }
            Method::AggKalmanTl => {
                gams.extend(self.targets.iter().copied());
                // a variance search runs the source's own GAM on its data
                gams.extend(drawn.iter().copied());
                searches.extend(drawn.iter().copied());
            }
        }
        Requirements {
            variant,
            gams,
            searches,
            instants: self.instants.clone(),
        }
    }
}

fn unique_u8(v: &[u8]) -> bool {
    v.iter().collect::<BTreeSet<_>>().len() == v.len()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Requirements {
    pub variant: Variant,
    pub gams: BTreeSet<SeriesId>,
    pub searches: BTreeSet<SeriesId>,
    pub instants: Vec<u8>,
}

/// Counts of expensive estimations, per substation (all instants of a
/// substation make one unit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub method: Method,
    pub n_experts: usize,
    pub m_targets: usize,
    /// GAM fits the plan needs (`C1` units).
    pub gam_fits: usize,
    /// Variance searches the plan needs (`C2` units).
    pub variance_searches: usize,
    /// Fits actually executed during this run (zero when the store already
    /// held every model).
    pub executed_gam_fits: usize,
    pub executed_variance_searches: usize,
    pub formula: String,
}

/// Feature frames of every substation plus the train/test split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub frames: BTreeMap<SeriesId, FeatureFrame>,
    /// Last training day (inclusive).
    pub train_end: NaiveDate,
    /// Last forecast day (inclusive); the end of the data when absent.
    pub test_end: Option<NaiveDate>,
}

impl Dataset {
    /// Interpolates weather, assigns each substation its closest station and
    /// builds every frame.
    pub fn build(
        loads: &[LoadSeries],
        weather: &[WeatherSeries],
        calendar: &Calendar,
        lags: LagConfig,
        train_end: NaiveDate,
    ) -> Result<Self> {
        Self::build_for_instants(loads, weather, calendar, lags, train_end, None)
    }

    /// Like [`Dataset::build`], keeping only the rows at `instants` when given.
    pub fn build_for_instants(
        loads: &[LoadSeries],
        weather: &[WeatherSeries],
        calendar: &Calendar,
        lags: LagConfig,
        train_end: NaiveDate,
        instants: Option<&[u8]>,
    ) -> Result<Self> {
        let fine: Vec<WeatherSeries> = weather
            .iter()
            .map(interpolate_weather)
            .collect::<Result<_>>()?;
        let stations: Vec<_> = fine.iter().map(|w| (w.station_id, w.location)).collect();
        let frames = loads
            .par_iter()
            .map(|load| {
                let sid = assign_closest_station(&load.location, &stations)?;
                let w = fine
                    .iter()
                    .find(|w| w.station_id == sid)
                    .expect("station exists");
                let mut frame = build_feature_frame(load, w, calendar, lags)?;
                if let Some(keep) = instants {
                    frame.rows.retain(|r| keep.contains(&r.timestamp.instant));
                }
                Ok((load.substation_id, frame))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            frames: frames.into_iter().collect(),
            train_end,
            test_end: None,
        })
    }

    pub fn ids(&self) -> Vec<SeriesId> {
        self.frames.keys().copied().collect()
    }

    pub fn frame(&self, id: SeriesId) -> Result<&FeatureFrame> {
        self.frames
            .get(&id)
            .ok_or_else(|| Error::MissingArtifact(format!("no data for substation {id}")))
    }

    pub fn training_frame(&self, id: SeriesId) -> Result<FeatureFrame> {
        let f = self.frame(id)?;
        Ok(FeatureFrame {
            substation_id: f.substation_id,
            station_id: f.station_id,
            rows: f
                .rows
                .iter()
                .filter(|r| r.timestamp.date <= self.train_end)
                .cloned()
                .collect(),
            dropped_rows: f.dropped_rows,
        })
    }

    pub fn in_test(&self, ts: &Timestamp) -> bool {
        ts.date > self.train_end && self.test_end.is_none_or(|e| ts.date <= e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub gam: GamConfig,
    pub search: VarianceSearchConfig,
}

/// Outcome of one [`ModelStore::fit`] call.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitSummary {
    pub gam_fits: usize,
    pub variance_searches: usize,
    pub skipped: Vec<(SeriesId, String)>,
}

impl FitSummary {
    fn skip(&mut self, id: SeriesId, what: &str, e: Error) {
        log::warn!("substation {id}: {what} skipped: {e}");
        self.skipped.push((id, format!("{what}: {e}")));
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitCounters {
    pub gam_fits: usize,
    pub variance_searches: usize,
}

/// Fitted GAMs and searched variances, keyed by substation and instant, with
/// counters of the fits this store executed.
#[derive(Debug, Clone, Default)]
pub struct ModelStore {
    gams: BTreeMap<(Variant, SeriesId, u8), Arc<GamModel>>,
    kalman: BTreeMap<(SeriesId, u8), KalmanHyperParams>,
    pub counters: FitCounters,
}

fn variant_tag(v: Variant) -> &'static str {
    match v {
        Variant::ST => "st",
        Variant::MT => "mt",
        Variant::Custom => "custom",
    }
}

impl ModelStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn gam(&self, variant: Variant, id: SeriesId, instant: u8) -> Option<&Arc<GamModel>> {
        self.gams.get(&(variant, id, instant))
    }

    pub fn kalman(&self, id: SeriesId, instant: u8) -> Option<&KalmanHyperParams> {
        self.kalman.get(&(id, instant))
    }

    pub fn insert_gam(&mut self, variant: Variant, model: GamModel) {
        self.gams
            .insert((variant, model.source_id, model.instant), Arc::new(model));
    }

    pub fn insert_kalman(&mut self, id: SeriesId, instant: u8, params: KalmanHyperParams) {
        self.kalman.insert((id, instant), params);
    }

    fn has_gam(&self, variant: Variant, id: SeriesId, instants: &[u8]) -> bool {
        instants
            .iter()
            .all(|&i| self.gams.contains_key(&(variant, id, i)))
    }

    fn has_kalman(&self, id: SeriesId, instants: &[u8]) -> bool {
        instants.iter().all(|&i| self.kalman.contains_key(&(id, i)))
    }

    /// Requirements that are not yet satisfied.
    pub fn missing(&self, req: &Requirements) -> Requirements {
        Requirements {
            variant: req.variant,
            gams: req
                .gams
                .iter()
                .copied()
                .filter(|&id| !self.has_gam(req.variant, id, &req.instants))
                .collect(),
            searches: req
                .searches
                .iter()
                .copied()
                .filter(|&id| !self.has_kalman(id, &req.instants))
                .collect(),
            instants: req.instants.clone(),
        }
    }

    /// Fits whatever `req` needs and the store lacks (everything in `req`
    /// when `force`), in parallel across substations. A substation whose fit
    /// fails is skipped and reported; the others go ahead.
    pub fn fit(
        &mut self,
        req: &Requirements,
        data: &Dataset,
        config: &FitConfig,
        force: bool,
    ) -> FitSummary {
        let todo = if force {
            req.clone()
        } else {
            self.missing(req)
        };
        let formula = GamFormula::standard(req.variant, Default::default());
        let mut summary = FitSummary::default();
        let fitted: Vec<(SeriesId, Result<Vec<GamModel>>)> = todo
            .gams
            .par_iter()
            .map(|&id| {
                let models = data.training_frame(id).and_then(|frame| {
                    req.instants
                        .iter()
                        .map(|&i| fit_gam(&frame, &formula, i, &config.gam))
                        .collect::<Result<Vec<_>>>()
                });
                (id, models)
            })
            .collect();
        for (id, models) in fitted {
            match models {
                Ok(models) => {
                    for m in models {
                        self.insert_gam(req.variant, m);
                    }
                    summary.gam_fits += 1;
                }
                Err(e) => summary.skip(id, "GAM fit", e),
            }
        }

        let store = &*self;
        let searched: Vec<(SeriesId, Result<Vec<KalmanHyperParams>>)> = todo
            .searches
            .par_iter()
            .map(|&id| {
                let params = data.training_frame(id).and_then(|frame| {
                    req.instants
                        .iter()
                        .map(|&i| {
                            let gam = store.gam(Variant::ST, id, i).ok_or_else(|| {
                                Error::MissingArtifact(format!(
                                    "GAM of substation {id} at instant {i}"
                                ))
                            })?;
                            let m = EffectMatrix::from_model(gam, &frame)?;
                            Ok(greedy_variance_search_matrix(
                                &m,
                                &dynamic_init(m.dim)?,
                                &config.search,
                            )?
                            .params)
                        })
                        .collect::<Result<Vec<_>>>()
                });
                (id, params)
            })
            .collect();
        for (id, params) in searched {
            match params {
                Ok(params) => {
                    for (&i, p) in req.instants.iter().zip(params) {
                        self.insert_kalman(id, i, p);
                    }
                    summary.variance_searches += 1;
                }
                Err(e) => summary.skip(id, "variance search", e),
            }
        }
        self.counters.gam_fits += summary.gam_fits;
        self.counters.variance_searches += summary.variance_searches;
        summary
    }

    /// Writes `gam/<variant>_<id>_<instant>.json` and
    /// `kalman/<id>_<instant>.json` under `dir`. Existing files are kept
    /// unless `overwrite`.
    pub fn save(&self, dir: &Path, overwrite: bool) -> Result<usize> {
        let mut written = 0;
        for ((variant, id, inst), model) in &self.gams {
            let path = gam_path(dir, *variant, *id, *inst);
            if overwrite || !path.exists() {
                write_text(&path, &model.to_json()?)?;
                written += 1;
            }
        }
        for ((id, inst), params) in &self.kalman {
            let path = kalman_path(dir, *id, *inst);
            if overwrite || !path.exists() {
                write_text(&path, &params.to_json()?)?;
                written += 1;
            }
        }
        Ok(written)
    }

    /// Loads every model found under `dir` (a missing directory is an empty store).
    pub fn load(dir: &Path) -> Result<Self> {
        let mut store = Self::new();
        let gam_dir = dir.join("gam");
        if gam_dir.is_dir() {
            for path in json_files(&gam_dir)? {
                let model = GamModel::from_json(&read_text(&path)?)?;
                let variant = model.formula.variant;
                store.insert_gam(variant, model);
            }
        }
        let kalman_dir = dir.join("kalman");
        if kalman_dir.is_dir() {
            for path in json_files(&kalman_dir)? {
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or_default();
                let (id, inst) = stem
                    .split_once('_')
                    .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
                    .ok_or_else(|| {
                        Error::invalid(format!("unexpected file name {}", path.display()))
                    })?;
                store.insert_kalman(id, inst, KalmanHyperParams::from_json(&read_text(&path)?)?);
            }
        }
        Ok(store)
    }
}

pub fn gam_path(dir: &Path, variant: Variant, id: SeriesId, instant: u8) -> PathBuf {
    dir.join("gam")
        .join(format!("{}_{id}_{instant:02}.json", variant_tag(variant)))
}

pub fn kalman_path(dir: &Path, id: SeriesId, instant: u8) -> PathBuf {
    dir.join("kalman").join(format!("{id}_{instant:02}.json"))
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Forecasts of one expert over every row of the target frame at `instant`,
/// with the state trajectory when the expert is adapted.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertRun {
    pub predictions: Vec<f64>,
    /// Row-major `len x dim`; empty for unadapted GAMs.
    pub states: Vec<f64>,
    pub dim: usize,
}

pub fn run_expert(
    spec: &ExpertSpec,
    instant: u8,
    store: &ModelStore,
    data: &Dataset,
    variant: Variant,
    keep_states: bool,
) -> Result<ExpertRun> {
    let gam = store
        .gam(variant, spec.gam_source, instant)
        .ok_or_else(|| {
            Error::MissingArtifact(format!(
                "GAM of substation {} at instant {instant} for {}",
                spec.gam_source,
                spec.label()
            ))
        })?;
    let frame = data.frame(spec.target)?;
    let m = EffectMatrix::from_model(gam, frame)?;
    let params = match spec.kalman {
        KalmanSource::None => {
            let theta = gam.reconstruction_theta();
            let predictions = (0..m.len())
                .map(|t| crate::linalg::dot(m.row(t), &theta))
                .collect();
            return Ok(ExpertRun {
                predictions,
                states: vec![],
                dim: m.dim,
            });
        }
        KalmanSource::Static => static_params(m.dim)?,
        KalmanSource::Dynamic(j) => store.kalman(j, instant).cloned().ok_or_else(|| {
            Error::MissingArtifact(format!(
                "variances of substation {j} at instant {instant} for {}",
                spec.label()
            ))
        })?,
    };
    let out = filter_matrix(&m, &params, keep_states)?;
    Ok(ExpertRun {
        predictions: out.predictions,
        states: out.states,
        dim: m.dim,
    })
}

/// Test-period output of one target at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct InstantOutput {
    pub instant: u8,
    pub timestamps: Vec<Timestamp>,
    pub y: Vec<Option<f64>>,
    pub experts: Vec<ExpertSpec>,
    /// Row-major `T x E`.
    pub expert_forecasts: Vec<f64>,
    pub forecasts: Vec<f64>,
    pub aggregation: Option<AggregationRun>,
    /// Weight-averaged expert states (`T x dim`), for aggregations of
    /// Kalman experts sharing one GAM.
    pub hybrid_states: Option<Vec<f64>>,
    /// Effect vectors of the shared GAM (`T x dim`) alongside `hybrid_states`.
    pub effects: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetOutput {
    pub target: SeriesId,
    pub instants: Vec<InstantOutput>,
}

impl TargetOutput {
    /// Forecasts across instants, in time order.
    pub fn forecast_series(&self) -> Vec<(Timestamp, f64, Option<f64>)> {
        let mut out: Vec<_> = self
            .instants
            .iter()
            .flat_map(|o| {
                o.timestamps
                    .iter()
                    .zip(&o.forecasts)
                    .zip(&o.y)
                    .map(|((t, f), y)| (*t, *f, *y))
            })
            .collect();
        out.sort_by_key(|r| r.0);
        out
    }

    /// NMAE over the whole test period, all instants together.
    pub fn nmae(&self) -> Result<f64> {
        let s = self.forecast_series();
        let y: Vec<Option<f64>> = s.iter().map(|r| r.2).collect();
        let f: Vec<f64> = s.iter().map(|r| r.1).collect();
        nmae(&y, &f)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub plan: PipelinePlan,
    pub drawn_sources: Vec<SeriesId>,
    pub targets: Vec<TargetOutput>,
    pub failures: Vec<(SeriesId, String)>,
    /// Substations whose fit failed during this run.
    pub skipped_fits: Vec<(SeriesId, String)>,
    pub cost: CostReport,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub fit: FitConfig,
    /// Fit missing models instead of failing.
    pub fit_missing: bool,
    /// Record weight-averaged states for aggregations of adapted experts.
    pub hybrid_states: bool,
}

/// Expert forecasts shared across runs (grid search, repeated plans).
#[derive(Debug, Default)]
pub struct ExpertCache {
    map: Mutex<HashMap<(ExpertSpec, u8), Arc<ExpertRun>>>,
}

impl ExpertCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn get_or_run(
        &self,
        spec: &ExpertSpec,
        instant: u8,
        store: &ModelStore,
        data: &Dataset,
        variant: Variant,
    ) -> Result<Arc<ExpertRun>> {
        if let Some(hit) = self.map.lock().expect("cache lock").get(&(*spec, instant)) {
            return Ok(hit.clone());
        }
        let run = Arc::new(run_expert(spec, instant, store, data, variant, false)?);
        self.map
            .lock()
            .expect("cache lock")
            .insert((*spec, instant), run.clone());
        Ok(run)
    }
}

fn forecast_target_instant(
    plan: &PipelinePlan,
    experts: &[ExpertSpec],
    instant: u8,
    store: &ModelStore,
    data: &Dataset,
    cache: Option<&ExpertCache>,
    hybrid: bool,
) -> Result<InstantOutput> {
    let target = experts[0].target;
    let frame = data.frame(target)?;
    let rows = frame.at_instant(instant);
    let test: Vec<usize> = (0..rows.len())
        .filter(|&t| data.in_test(&rows[t].timestamp))
        .collect();
    let variant = plan.method.variant();
    let keep_states = hybrid && plan.method == Method::AggKalmanTl;
    let runs: Vec<Arc<ExpertRun>> = experts
        .iter()
        .map(|s| match cache {
            Some(c) if !keep_states => c.get_or_run(s, instant, store, data, variant),
            _ => run_expert(s, instant, store, data, variant, keep_states).map(Arc::new),
        })
        .collect::<Result<_>>()?;
    let e = experts.len();
    let mut matrix = Vec::with_capacity(test.len() * e);
    for &t in &test {
        matrix.extend(runs.iter().map(|r| r.predictions[t]));
    }
    let y: Vec<Option<f64>> = test.iter().map(|&t| rows[t].y).collect();
    let timestamps: Vec<Timestamp> = test.iter().map(|&t| rows[t].timestamp).collect();

    let (forecasts, aggregation) = if plan.method.is_aggregation() {
        let run = aggregate_series(AggregationState::new(e)?, &matrix, &y)?;
        (run.predictions.clone(), Some(run))
    } else {
        (matrix.clone(), None)
    };

    let (hybrid_states, effects) = match (&aggregation, keep_states) {
        (Some(agg), true) => {
            let dim = runs[0].dim;
            let gam = store
                .gam(variant, target, instant)
                .expect("checked by run_expert");
            let mut h = Vec::with_capacity(test.len() * dim);
            let mut f = Vec::with_capacity(test.len() * dim);
            for (k, &t) in test.iter().enumerate() {
                let states: Vec<f64> = runs
                    .iter()
                    .flat_map(|r| r.states[t * dim..(t + 1) * dim].to_vec())
                    .collect();
                h.extend(hybrid_state_coefficients(agg.weights_at(k), &states, dim)?);
                f.extend(gam.effect_vector(rows[t])?);
            }
            (Some(h), Some(f))
        }
        _ => (None, None),
    };

    Ok(InstantOutput {
        instant,
        timestamps,
        y,
        experts: experts.to_vec(),
        expert_forecasts: matrix,
        forecasts,
        aggregation,
        hybrid_states,
        effects,
    })
}

/// Forecasts every target of the plan with the drawn sources, using only
/// models already in the store.
pub fn forecast_targets(
    plan: &PipelinePlan,
    drawn: &[SeriesId],
    store: &ModelStore,
    data: &Dataset,
    cache: Option<&ExpertCache>,
    hybrid: bool,
) -> (Vec<TargetOutput>, Vec<(SeriesId, String)>) {
    let results: Vec<(SeriesId, Result<TargetOutput>)> = plan
        .targets
        .par_iter()
        .map(|&target| {
            let out = plan.experts_for(target, drawn).and_then(|experts| {
                let instants = plan
                    .instants
                    .iter()
                    .map(|&i| {
                        forecast_target_instant(plan, &experts, i, store, data, cache, hybrid)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(TargetOutput { target, instants })
            });
            (target, out)
        })
        .collect();
    let mut outputs = Vec::new();
    let mut failures = Vec::new();
    for (target, r) in results {
        match r {
            Ok(o) => outputs.push(o),
            Err(e) => {
                log::warn!("target {target}: {e}");
                failures.push((target, e.to_string()));
            }
        }
    }
    (outputs, failures)
}

/// Runs one method end to end. Models missing from the store are fitted when
/// `options.fit_missing` is set; otherwise their absence is an error that
/// lists them.
pub fn run_pipeline(
    plan: &PipelinePlan,
    data: &Dataset,
    store: &mut ModelStore,
    options: &RunOptions,
) -> Result<PipelineOutput> {
    run_pipeline_cached(plan, data, store, options, None)
}

pub fn run_pipeline_cached(
    plan: &PipelinePlan,
    data: &Dataset,
    store: &mut ModelStore,
    options: &RunOptions,
    cache: Option<&ExpertCache>,
) -> Result<PipelineOutput> {
    plan.validate()?;
    let drawn = plan.draw_sources();
    let req = plan.requirements(&drawn);
    let executed = if options.fit_missing {
        store.fit(&req, data, &options.fit, false)
    } else {
        let missing = store.missing(&req);
        if !missing.gams.is_empty() || !missing.searches.is_empty() {
            return Err(Error::MissingArtifact(describe_missing(&missing)));
        }
        FitSummary::default()
    };
    let (targets, failures) =
        forecast_targets(plan, &drawn, store, data, cache, options.hybrid_states);
    Ok(PipelineOutput {
        cost: CostReport {
            method: plan.method,
            n_experts: if plan.method.is_aggregation() {
                plan.n_experts
            } else {
                1
            },
            m_targets: plan.targets.len(),
            gam_fits: req.gams.len(),
            variance_searches: req.searches.len(),
            executed_gam_fits: executed.gam_fits,
            executed_variance_searches: executed.variance_searches,
            formula: plan.method.cost_formula().to_string(),
        },
        plan: plan.clone(),
        drawn_sources: drawn,
        targets,
        failures,
        skipped_fits: executed.skipped,
    })
}

pub fn describe_missing(missing: &Requirements) -> String {
    let mut parts = Vec::new();
    if !missing.gams.is_empty() {
        parts.push(format!(
            "GAM (i) for substations {:?}",
            missing.gams.iter().collect::<Vec<_>>()
        ));
    }
    if !missing.searches.is_empty() {
        parts.push(format!(
            "Kalman variances (j) for substations {:?}",
            missing.searches.iter().collect::<Vec<_>>()
        ));
    }
    parts.join("; ")
}

/// Sorts substations by ascending error, drops the `drop_worst` worst, cuts
/// the rest into consecutive rank groups of `group_size` and draws
/// `per_group` ids uniformly from each group. The result is sorted.
pub fn select_source_subsample(
    scores: &[(SeriesId, f64)],
    drop_worst: usize,
    group_size: usize,
    per_group: usize,
    seed: u64,
) -> Result<Vec<SeriesId>> {
    if per_group > group_size {
        return Err(Error::invalid(format!(
            "cannot draw {per_group} from groups of {group_size}"
        )));
    }
    if group_size == 0 || drop_worst + group_size > scores.len() {
        return Err(Error::invalid(format!(
            "need drop_worst + group_size <= {} substations and a positive group size",
            scores.len()
        )));
    }
    let mut ranked = scores.to_vec();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    ranked.truncate(ranked.len() - drop_worst);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "source-subsample", 0));
    let mut out = Vec::new();
    for group in ranked.chunks(group_size) {
        let take = per_group.min(group.len());
        out.extend(
            sample(&mut rng, group.len(), take)
                .into_iter()
                .map(|i| group[i].0),
        );
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub method: Method,
    pub candidates: Vec<usize>,
    /// `medians[c][r]`: median target NMAE of repeat `r` with `candidates[c]` experts.
    pub medians: Vec<Vec<f64>>,
}

impl GridSearchResult {
    /// Median over repeats for each candidate.
    pub fn summary(&self) -> Vec<(usize, f64)> {
        self.candidates
            .iter()
            .zip(&self.medians)
            .map(|(&n, m)| (n, median(m).unwrap_or(f64::NAN)))
            .collect()
    }
}

/// For each candidate expert count, draws `repeats` independent source sets,
/// forecasts `eval_targets` over the test period and records the median NMAE
/// of each repeat. Fits and expert forecasts are shared across draws; the
/// store's counters record every fit.
#[allow(clippy::too_many_arguments)]
pub fn grid_search_experts(
    method: Method,
    candidates: &[usize],
    repeats: usize,
    sources: &[SeriesId],
    eval_targets: &[SeriesId],
    instants: &[u8],
    seed: u64,
    data: &Dataset,
    store: &mut ModelStore,
    fit: &FitConfig,
) -> Result<GridSearchResult> {
    if !method.is_aggregation() {
        return Err(Error::Config(format!(
            "grid search applies to aggregation methods, not {method}"
        )));
    }
    let cache = ExpertCache::new();
    let options = RunOptions {
        fit: fit.clone(),
        fit_missing: true,
        hybrid_states: false,
    };
    let mut medians = Vec::with_capacity(candidates.len());
    for &n in candidates {
        let mut per_repeat = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let plan = PipelinePlan {
                method,
                n_experts: n,
                sources: sources.to_vec(),
                targets: eval_targets.to_vec(),
                seed: derive_seed(seed, "grid-search", ((n as u64) << 32) | r as u64),
                instants: instants.to_vec(),
            };
            let out = run_pipeline_cached(&plan, data, store, &options, Some(&cache))?;
            if let Some((id, e)) = out.failures.first() {
                return Err(Error::invalid(format!(
                    "grid search target {id} failed: {e}"
                )));
            }
            let scores: Vec<f64> = out
                .targets
                .iter()
                .map(|t| t.nmae())
                .collect::<Result<_>>()?;
            per_repeat.push(median(&scores)?);
        }
        medians.push(per_repeat);
    }
    Ok(GridSearchResult {
        method,
        candidates: candidates.to_vec(),
        medians,
    })
}
