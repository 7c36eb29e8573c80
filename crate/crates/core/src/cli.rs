//! Batch driver: `generate`, `featurize`, `fit`, `forecast`, `evaluate` and
//! `grid-search`, configured by one TOML file.
//!
//! Files under the data directory: `load/*.csv`, `weather/*.csv`,
//! `calendar.csv`. The model store holds `gam/*.json` and `kalman/*.json`.
//! Outputs land in `forecasts/`, `weights/`, `experts/`, `cost/`,
//! `features/`, `report/` and `grid_search/` below the output directory.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use chrono::{Days, NaiveDate};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    oracle_series, segment_scores, ExpertPanel, PeriodSegmentation, ScoredSeries, Window,
};
use crate::features::{FeatureFrame, LagConfig, SeriesId, Timestamp};
use crate::io::{
    create_file, open_file, read_calendar_csv, read_forecasts_csv, read_load_dir, read_weather_dir,
};
use crate::synthgen::{generate_fleet, write_fleet, FleetConfig, FleetPaths};
use crate::transfer::{
    grid_search_experts, run_pipeline, select_source_subsample, Dataset, FitConfig, FitSummary,
    Method, ModelStore, PipelineOutput, PipelinePlan, Requirements, RunOptions,
};

#[derive(Debug, Parser)]
#[command(
    name = "frucast",
    version,
    about = "Frugal transfer forecasting of substation loads"
)]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "frucast.toml")]
    pub config: PathBuf,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to the available cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Refit models already in the store.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic fleet (loads, weather, calendar, manifest).
    Generate,
    /// Build the feature frames and write them as CSV.
    Featurize,
    /// Fit the GAMs or the Kalman variances the plan needs.
    Fit {
        #[arg(value_enum)]
        what: FitWhat,
        #[command(flatten)]
        plan: PlanArgs,
    },
    /// Run the plan on the fitted store and write forecasts, weights and costs.
    Forecast {
        #[command(flatten)]
        plan: PlanArgs,
    },
    /// Score the forecasts per period.
    Evaluate {
        /// Add best-expert and convex-oracle rows for aggregations.
        #[arg(long)]
        oracles: bool,
    },
    /// Median validation NMAE against the number of experts.
    GridSearch {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long, value_delimiter = ',')]
        candidates: Option<Vec<usize>>,
        #[arg(long)]
        repeats: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FitWhat {
    Gam,
    Kalman,
}

#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    #[arg(long)]
    pub n_experts: Option<usize>,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        format!(
            "unknown method `{s}` (expected one of {})",
            names.join(", ")
        )
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default = "default_data")]
    pub data_dir: PathBuf,
    #[serde(default = "default_store")]
    pub store_dir: PathBuf,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_data() -> PathBuf {
    "data".into()
}
fn default_store() -> PathBuf {
    "store".into()
}
fn default_output() -> PathBuf {
    "output".into()
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: default_data(),
            store_dir: default_store(),
            output_dir: default_output(),
        }
    }
}

/// Models are trained up to `train_end`; the grid search scores
/// `(train_end, validation_end]`; forecasts are written for
/// `[test_start, test_end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeriodsConfig {
    pub train_end: NaiveDate,
    pub validation_end: Option<NaiveDate>,
    pub test_start: Option<NaiveDate>,
    pub test_end: Option<NaiveDate>,
}

impl PeriodsConfig {
    pub fn test_start(&self) -> NaiveDate {
        self.test_start
            .unwrap_or_else(|| self.validation_end.unwrap_or(self.train_end) + Days::new(1))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self.validation_end {
            if v <= self.train_end {
                return Err(Error::Config("validation_end must follow train_end".into()));
            }
        }
        let start = self.test_start();
        if start <= self.validation_end.unwrap_or(self.train_end) {
            return Err(Error::Config(
                "test_start must follow the training and validation periods".into(),
            ));
        }
        if self.test_end.is_some_and(|e| e < start) {
            return Err(Error::Config("test_end precedes test_start".into()));
        }
        Ok(())
    }
}

/// Stratified variance-search pool: rank substations by the error of a
/// same-slot-last-week forecast over the training period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourcePoolConfig {
    pub drop_worst: usize,
    pub group_size: usize,
    pub per_group: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_n_experts")]
    pub n_experts: usize,
    /// Source pool; every substation when absent.
    pub sources: Option<Vec<SeriesId>>,
    pub source_pool: Option<SourcePoolConfig>,
    /// Targets; every substation when absent.
    pub targets: Option<Vec<SeriesId>>,
    /// Half-hour slots; all 48 when absent.
    pub instants: Option<Vec<u8>>,
}

fn default_method() -> Method {
    Method::AggGamKalmanTl
}
fn default_n_experts() -> usize {
    9
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            method: default_method(),
            n_experts: default_n_experts(),
            sources: None,
            source_pool: None,
            targets: None,
            instants: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSearchConfig {
    #[serde(default = "default_candidates")]
    pub candidates: Vec<usize>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Targets scored by the search; the plan targets when absent.
    pub eval_targets: Option<Vec<SeriesId>>,
}

fn default_candidates() -> Vec<usize> {
    vec![1, 3, 6, 9, 12]
}
fn default_repeats() -> usize {
    10
}

impl Default for GridSearchConfig {
    fn default() -> Self {
        Self {
            candidates: default_candidates(),
            repeats: default_repeats(),
            eval_targets: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Evaluation periods; the 2020/lockdown/2021 trio when absent.
    pub windows: Option<Vec<Window>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    #[serde(default)]
    pub paths: PathsConfig,
    pub fleet: Option<FleetConfig>,
    pub periods: Option<PeriodsConfig>,
    #[serde(default)]
    pub lags: LagConfig,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub grid_search: GridSearchConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
}

impl RunConfig {
    /// Parses the file; relative paths are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut value: toml::Value =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        dates_to_strings(&mut value);
        let mut config: RunConfig = value
            .try_into()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut config.paths.data_dir,
            &mut config.paths.store_dir,
            &mut config.paths.output_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(periods) = &config.periods {
            periods.validate()?;
        }
        Ok(config)
    }

    fn periods(&self) -> Result<&PeriodsConfig> {
        self.periods
            .as_ref()
            .ok_or_else(|| Error::Config("the [periods] section is required".into()))
    }
}

/// Bare TOML dates (`2020-03-16`) become strings so they deserialize as
/// calendar days.
fn dates_to_strings(v: &mut toml::Value) {
    match v {
        toml::Value::Datetime(d) if d.time.is_none() && d.offset.is_none() => {
            *v = toml::Value::String(d.to_string());
        }
        toml::Value::Array(a) => a.iter_mut().for_each(dates_to_strings),
        toml::Value::Table(t) => t.iter_mut().for_each(|(_, v)| dates_to_strings(v)),
        _ => {}
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn init_logging() {
    let level = std::env::var("FRUCAST_LOG").unwrap_or_else(|_| "warn".into());
    let known = ["error", "warn", "info", "debug"];
    let filter = if known.contains(&level.as_str()) {
        level.as_str()
    } else {
        "warn"
    };
    let _ = env_logger::Builder::new()
        .parse_filters(filter)
        .format_timestamp(None)
        .try_init();
    if !known.contains(&level.as_str()) {
        log::warn!("FRUCAST_LOG={level} is not one of error, warn, info, debug; using warn");
    }
}

/// 2 for usage or configuration errors, 3 for missing inputs, 4 for numeric
/// failures, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::MissingArtifact(_) | Error::MissingCovariate(_) | Error::Empty(_) => 3,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
        Error::NonFinite(_) | Error::Singular { .. } | Error::Effect { .. } => 4,
        _ => 1,
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let config = RunConfig::load(&cli.config)?;
    let jobs = match cli.jobs.or(config.jobs) {
        Some(0) => return Err(Error::Config("--jobs must be at least 1".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let ctx = Context {
        seed: cli.seed.or(config.seed),
        force: cli.force,
        config,
    };
    pool.install(|| match &cli.command {
        Command::Generate => cmd_generate(&ctx),
        Command::Featurize => cmd_featurize(&ctx),
        Command::Fit { what, plan } => cmd_fit(&ctx, *what, plan),
        Command::Forecast { plan } => cmd_forecast(&ctx, plan),
        Command::Evaluate { oracles } => cmd_evaluate(&ctx, *oracles),
        Command::GridSearch {
            plan,
            candidates,
            repeats,
        } => cmd_grid_search(&ctx, plan, candidates.as_deref(), *repeats),
    })
}

struct Context {
    config: RunConfig,
    seed: Option<u64>,
    force: bool,
}

impl Context {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn output(&self, parts: &[&str]) -> PathBuf {
        parts
            .iter()
            .fold(self.config.paths.output_dir.clone(), |p, s| p.join(s))
    }
}

fn cmd_generate(ctx: &Context) -> Result<()> {
    let mut fleet_config = ctx
        .config
        .fleet
        .clone()
        .ok_or_else(|| Error::Config("the [fleet] section is required by generate".into()))?;
    if let Some(seed) = ctx.seed {
        fleet_config.seed = seed;
    }
    fleet_config
        .validate()
        .map_err(|e| Error::Config(e.to_string()))?;
    let fleet = generate_fleet(&fleet_config)?;
    write_fleet(&fleet, &ctx.config.paths.data_dir)?;
    println!(
        "generated {} substations and {} weather stations ({} load points, {} clamped) in {}",
        fleet.loads.len(),
        fleet.weather.len(),
        fleet.manifest.total_points,
        fleet.manifest.clamped_points,
        ctx.config.paths.data_dir.display()
    );
    Ok(())
}

/// Builds the frames; only the plan's instants are kept unless `all_instants`.
fn load_dataset(ctx: &Context, all_instants: bool) -> Result<Dataset> {
    let periods = ctx.config.periods()?;
    let dir = &ctx.config.paths.data_dir;
    let loads = read_load_dir(&dir.join(FleetPaths::LOAD_DIR))?;
    if loads.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "no load files under {}",
            dir.display()
        )));
    }
    let weather = read_weather_dir(&dir.join(FleetPaths::WEATHER_DIR))?;
    if weather.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "no weather files under {}",
            dir.display()
        )));
    }
    let calendar = read_calendar_csv(open_file(&dir.join(FleetPaths::CALENDAR))?)?;
    let instants = if all_instants {
        None
    } else {
        ctx.config.plan.instants.as_deref()
    };
    let mut data = Dataset::build_for_instants(
        &loads,
        &weather,
        &calendar,
        ctx.config.lags,
        periods.train_end,
        instants,
    )?;
    data.test_end = periods.test_end;
    Ok(data)
}

#[derive(Serialize)]
struct FeatureCsvRow {
    timestamp: String,
    y: Option<f64>,
    toy: f64,
    trend: f64,
    temp: f64,
    temp95: f64,
    temp99: f64,
    temp_min: f64,
    temp_max: f64,
    load_2d: Option<f64>,
    load_1w: Option<f64>,
    day_type: usize,
    bank_holiday: u8,
    vacation: u8,
    working_day: u8,
}

fn write_features(path: &Path, frame: &FeatureFrame) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    for r in &frame.rows {
        w.serialize(FeatureCsvRow {
            timestamp: r.timestamp.format_iso(),
            y: r.y,
            toy: r.toy,
            trend: r.trend,
            temp: r.temp,
            temp95: r.temp95,
            temp99: r.temp99,
            temp_min: r.temp_min,
            temp_max: r.temp_max,
            load_2d: r.load_2d,
            load_1w: r.load_1w,
            day_type: r.calendar.day_type.index(),
            bank_holiday: r.calendar.bank_holiday as u8,
            vacation: r.calendar.vacation as u8,
            working_day: r.calendar.working_day as u8,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn cmd_featurize(ctx: &Context) -> Result<()> {
    let data = load_dataset(ctx, true)?;
    for (id, frame) in &data.frames {
        write_features(
            &ctx.output(&["features", &format!("substation_{id:05}.csv")]),
            frame,
        )?;
    }
    let rows: usize = data.frames.values().map(|f| f.len()).sum();
    let dropped: usize = data.frames.values().map(|f| f.dropped_rows).sum();
    println!(
        "featurized {} substations: {rows} rows, {dropped} dropped",
        data.frames.len()
    );
    Ok(())
}

/// Same-slot-last-week NMAE over the training period, a cheap difficulty
/// score for ranking substations.
fn persistence_scores(data: &Dataset, ids: &[SeriesId]) -> Result<Vec<(SeriesId, f64)>> {
    ids.iter()
        .map(|&id| {
            let frame = data.frame(id)?;
            let (mut y, mut f) = (Vec::new(), Vec::new());
            for r in frame
                .rows
                .iter()
                .filter(|r| r.timestamp.date <= data.train_end)
            {
                if let (Some(obs), Some(lag)) = (r.y, r.load_1w) {
                    y.push(Some(obs));
                    f.push(lag);
                }
            }
            Ok((id, crate::eval::nmae(&y, &f).unwrap_or(f64::INFINITY)))
        })
        .collect()
}

fn build_plan(ctx: &Context, data: &Dataset, args: &PlanArgs) -> Result<PipelinePlan> {
    let pc = &ctx.config.plan;
    let all = data.ids();
    let check = |ids: &[SeriesId], what: &str| -> Result<()> {
        match ids.iter().find(|id| !data.frames.contains_key(id)) {
            Some(id) => Err(Error::MissingArtifact(format!(
                "{what} {id} has no load data"
            ))),
            None => Ok(()),
        }
    };
    let targets = pc.targets.clone().unwrap_or_else(|| all.clone());
    check(&targets, "target")?;
    let sources = match (&pc.sources, &pc.source_pool) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "give either plan.sources or plan.source_pool".into(),
            ))
        }
        (Some(s), None) => s.clone(),
        (None, Some(pool)) => select_source_subsample(
            &persistence_scores(data, &all)?,
            pool.drop_worst,
            pool.group_size,
            pool.per_group,
            ctx.seed(),
        )
        .map_err(|e| Error::Config(e.to_string()))?,
        (None, None) => all.clone(),
    };
    check(&sources, "source")?;
    let mut plan = PipelinePlan::new(
        args.method.unwrap_or(pc.method),
        args.n_experts.unwrap_or(pc.n_experts),
        sources,
        targets,
        ctx.seed(),
    );
    if let Some(inst) = &pc.instants {
        plan.instants = inst.clone();
    }
    plan.validate()?;
    Ok(plan)
}

#[derive(Serialize)]
struct FitLedgerEntry<'a> {
    command: &'a str,
    method: Method,
    gam_fits: usize,
    variance_searches: usize,
    skipped: &'a [(SeriesId, String)],
}

fn cmd_fit(ctx: &Context, what: FitWhat, args: &PlanArgs) -> Result<()> {
    let data = load_dataset(ctx, false)?;
    let plan = build_plan(ctx, &data, args)?;
    let drawn = plan.draw_sources();
    let full = plan.requirements(&drawn);
    let store_dir = &ctx.config.paths.store_dir;
    let mut store = ModelStore::load(store_dir)?;
    let req = match what {
        FitWhat::Gam => Requirements {
            searches: Default::default(),
            ..full
        },
        FitWhat::Kalman => {
            let req = Requirements {
                gams: Default::default(),
                ..full
            };
            let gams_needed = Requirements {
                gams: req.searches.clone(),
                searches: Default::default(),
                ..req.clone()
            };
            let missing = store.missing(&gams_needed);
            if !missing.gams.is_empty() {
                return Err(Error::MissingArtifact(format!(
                    "variance searches need fitted GAMs first: {}",
                    crate::transfer::describe_missing(&missing)
                )));
            }
            req
        }
    };
    let summary: FitSummary = store.fit(&req, &data, &ctx.config.fit, ctx.force);
    let written = store.save(store_dir, ctx.force)?;
    let command = match what {
        FitWhat::Gam => "fit gam",
        FitWhat::Kalman => "fit kalman",
    };
    let entry = FitLedgerEntry {
        command,
        method: plan.method,
        gam_fits: summary.gam_fits,
        variance_searches: summary.variance_searches,
        skipped: &summary.skipped,
    };
    let line = serde_json::to_string(&entry)?;
    let ledger = store_dir.join("fit_ledger.jsonl");
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&ledger)
        .map_err(|e| Error::io(&ledger, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(&ledger, e))?;
    println!(
        "{command}: {} GAM fits, {} variance searches, {} skipped, {written} files written",
        summary.gam_fits,
        summary.variance_searches,
        summary.skipped.len()
    );
    Ok(())
}

fn write_forecast_outputs(
    ctx: &Context,
    out: &PipelineOutput,
    test_start: NaiveDate,
) -> Result<()> {
    let name = out.plan.method.name();
    let keep = |ts: &Timestamp| ts.date >= test_start;

    let path = ctx.output(&["forecasts", &format!("{name}.csv")]);
    let mut w = csv::Writer::from_writer(create_file(&path)?);
    w.write_record(["target_id", "timestamp", "forecast_mw"])?;
    for t in &out.targets {
        for (ts, f, _) in t.forecast_series().into_iter().filter(|r| keep(&r.0)) {
            w.write_record([t.target.to_string(), ts.format_iso(), f.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = ctx.output(&["cost", &format!("{name}.json")]);
    let mut f = create_file(&path)?;
    f.write_all(serde_json::to_string_pretty(&out.cost)?.as_bytes())
        .map_err(|e| Error::io(&path, e))?;

    if out.plan.method.is_aggregation() {
        let path = ctx.output(&["weights", &format!("{name}.csv")]);
        let mut w = csv::Writer::from_writer(create_file(&path)?);
        w.write_record(["target_id", "timestamp", "expert_id", "weight"])?;
        let path_e = ctx.output(&["experts", &format!("{name}.csv")]);
        let mut we = csv::Writer::from_writer(create_file(&path_e)?);
        we.write_record(["target_id", "timestamp", "expert_id", "forecast_mw"])?;
        for t in &out.targets {
            let mut rows = Vec::new();
            for o in &t.instants {
                let agg = o
                    .aggregation
                    .as_ref()
                    .expect("aggregation methods record weights");
                let e = o.experts.len();
                for (k, ts) in o.timestamps.iter().enumerate().filter(|(_, ts)| keep(ts)) {
                    for (x, spec) in o.experts.iter().enumerate() {
                        rows.push((
                            *ts,
                            x,
                            spec.label(),
                            agg.weights_at(k)[x],
                            o.expert_forecasts[k * e + x],
                        ));
                    }
                }
            }
            rows.sort_by_key(|r| (r.0, r.1));
            let id = t.target.to_string();
            for (ts, _, label, weight, forecast) in rows {
                let stamp = ts.format_iso();
                w.write_record([id.as_str(), &stamp, &label, &weight.to_string()])?;
                we.write_record([id.as_str(), &stamp, &label, &forecast.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        we.flush().map_err(|e| Error::io(&path_e, e))?;
    }
    Ok(())
}

fn cmd_forecast(ctx: &Context, args: &PlanArgs) -> Result<()> {
    let data = load_dataset(ctx, false)?;
    let plan = build_plan(ctx, &data, args)?;
    let mut store = ModelStore::load(&ctx.config.paths.store_dir)?;
    let options = RunOptions {
        fit: ctx.config.fit.clone(),
        fit_missing: false,
        hybrid_states: false,
    };
    let out = run_pipeline(&plan, &data, &mut store, &options)?;
    for (id, e) in &out.failures {
        eprintln!("target {id} failed: {e}");
    }
    if out.targets.is_empty() {
        return Err(Error::NonFinite("every target failed".into()));
    }
    write_forecast_outputs(ctx, &out, ctx.config.periods()?.test_start())?;
    println!(
        "{}: forecasts for {} targets ({} failed); cost {} GAM fits, {} variance searches ({})",
        plan.method,
        out.targets.len(),
        out.failures.len(),
        out.cost.gam_fits,
        out.cost.variance_searches,
        out.cost.formula
    );
    Ok(())
}

type Truth = BTreeMap<SeriesId, BTreeMap<Timestamp, Option<f64>>>;

fn read_truth(ctx: &Context) -> Result<Truth> {
    let loads = read_load_dir(&ctx.config.paths.data_dir.join(FleetPaths::LOAD_DIR))?;
    Ok(loads
        .into_iter()
        .map(|s| {
            (
                s.substation_id,
                s.points.iter().map(|p| (p.timestamp, p.load_mw)).collect(),
            )
        })
        .collect())
}

fn read_expert_panels(path: &Path, method: &str, truth: &Truth) -> Result<Vec<ExpertPanel>> {
    #[derive(Deserialize)]
    struct Row {
        target_id: SeriesId,
        timestamp: String,
        expert_id: String,
        forecast_mw: f64,
    }
    // (target, instant) -> expert order and per-timestamp forecasts
    type Slot = (Vec<String>, BTreeMap<Timestamp, Vec<f64>>);
    let mut slots: BTreeMap<(SeriesId, u8), Slot> = BTreeMap::new();
    for rec in csv::Reader::from_reader(open_file(path)?).deserialize() {
        let r: Row = rec?;
        let ts = Timestamp::parse_iso(&r.timestamp)?;
        let slot = slots.entry((r.target_id, ts.instant)).or_default();
        let k = match slot.0.iter().position(|e| *e == r.expert_id) {
            Some(k) => k,
            None => {
                slot.0.push(r.expert_id);
                slot.0.len() - 1
            }
        };
        let row = slot.1.entry(ts).or_default();
        if row.len() != k {
            return Err(Error::invalid(format!(
                "{}: experts out of order at {}",
                path.display(),
                r.timestamp
            )));
        }
        row.push(r.forecast_mw);
    }
    slots
        .into_iter()
        .map(|((target, _), (experts, rows))| {
            let e = experts.len();
            if rows.values().any(|r| r.len() != e) {
                return Err(Error::invalid(format!(
                    "{}: incomplete expert rows",
                    path.display()
                )));
            }
            let obs = truth.get(&target);
            Ok(ExpertPanel {
                method: method.to_string(),
                target,
                y: rows
                    .keys()
                    .map(|ts| obs.and_then(|o| o.get(ts).copied().flatten()))
                    .collect(),
                timestamps: rows.keys().copied().collect(),
                forecasts: rows.into_values().flatten().collect(),
                n_experts: e,
            })
        })
        .collect()
}

fn cmd_evaluate(ctx: &Context, oracles: bool) -> Result<()> {
    let dir = ctx.output(&["forecasts"]);
    let files = if dir.is_dir() {
        crate::io::csv_files(&dir)?
    } else {
        vec![]
    };
    if files.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "no forecast files under {}",
            dir.display()
        )));
    }
    let truth = read_truth(ctx)?;
    let mut series = Vec::new();
    let mut panels = Vec::new();
    for path in &files {
        let method = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let mut by_target: BTreeMap<SeriesId, Vec<(Timestamp, f64)>> = BTreeMap::new();
        for r in read_forecasts_csv(open_file(path)?)? {
            by_target
                .entry(r.target_id)
                .or_default()
                .push((Timestamp::parse_iso(&r.timestamp)?, r.forecast_mw));
        }
        for (target, rows) in by_target {
            let obs = truth.get(&target);
            series.push(ScoredSeries {
                method: method.clone(),
                target,
                y: rows
                    .iter()
                    .map(|(ts, _)| obs.and_then(|o| o.get(ts).copied().flatten()))
                    .collect(),
                timestamps: rows.iter().map(|r| r.0).collect(),
                forecasts: rows.iter().map(|r| r.1).collect(),
            });
        }
        let experts = ctx.output(&["experts", &format!("{method}.csv")]);
        if oracles && experts.exists() {
            panels.extend(read_expert_panels(&experts, &method, &truth)?);
        }
    }
    let segmentation = match &ctx.config.evaluate.windows {
        Some(w) => PeriodSegmentation::new(w.clone())?,
        None => PeriodSegmentation::default_trio(),
    };
    if oracles {
        series.extend(oracle_series(&panels, &segmentation)?);
    }
    let report = segment_scores(&series, &segmentation)?;
    let path = ctx.output(&["report", "eval_report.json"]);
    create_file(&path)?
        .write_all(report.to_json()?.as_bytes())
        .map_err(|e| Error::io(&path, e))?;
    report.write_csv(create_file(&ctx.output(&["report", "eval_report.csv"]))?)?;
    println!(
        "{:<40} {:<22} {:>4} {:>8} {:>8} {:>8}",
        "method", "period", "n", "Q1", "median", "Q3"
    );
    for row in &report.summary {
        match row.quartiles {
            Some(q) => println!(
                "{:<40} {:<22} {:>4} {:>8.2} {:>8.2} {:>8.2}",
                row.method, row.period, row.n_targets, q.q1, q.median, q.q3
            ),
            None => println!(
                "{:<40} {:<22} {:>4} {:>8}",
                row.method, row.period, 0, "no data"
            ),
        }
    }
    Ok(())
}

fn cmd_grid_search(
    ctx: &Context,
    args: &PlanArgs,
    candidates: Option<&[usize]>,
    repeats: Option<usize>,
) -> Result<()> {
    let periods = ctx.config.periods()?;
    let validation_end = periods
        .validation_end
        .ok_or_else(|| Error::Config("grid-search needs periods.validation_end".into()))?;
    let mut data = load_dataset(ctx, false)?;
    data.test_end = Some(validation_end);
    let plan = build_plan(ctx, &data, args)?;
    let gs = &ctx.config.grid_search;
    let candidates = candidates.unwrap_or(&gs.candidates).to_vec();
    let repeats = repeats.unwrap_or(gs.repeats);
    if candidates.is_empty() || repeats == 0 {
        return Err(Error::Config(
            "grid search needs candidates and at least one repeat".into(),
        ));
    }
    if let Some(n) = candidates
        .iter()
        .find(|&&n| n == 0 || n > plan.sources.len())
    {
        return Err(Error::Config(format!(
            "candidate {n} outside 1..={} sources",
            plan.sources.len()
        )));
    }
    let eval_targets = gs
        .eval_targets
        .clone()
        .unwrap_or_else(|| plan.targets.clone());
    let store_dir = &ctx.config.paths.store_dir;
    let mut store = if ctx.force {
        ModelStore::new()
    } else {
        ModelStore::load(store_dir)?
    };
    let result = grid_search_experts(
        plan.method,
        &candidates,
        repeats,
        &plan.sources,
        &eval_targets,
        &plan.instants,
        plan.seed,
        &data,
        &mut store,
        &ctx.config.fit,
    )
    .map_err(|e| match e {
        Error::InvalidInput(m) => Error::Config(m),
        other => other,
    })?;
    store.save(store_dir, ctx.force)?;
    let name = plan.method.name();
    let path = ctx.output(&["grid_search", &format!("{name}.json")]);
    create_file(&path)?
        .write_all(serde_json::to_string_pretty(&result)?.as_bytes())
        .map_err(|e| Error::io(&path, e))?;
    let path = ctx.output(&["grid_search", &format!("{name}.csv")]);
    let mut w = csv::Writer::from_writer(create_file(&path)?);
    w.write_record(["n_experts", "repeat", "median_nmae_pct"])?;
    for (n, meds) in result.candidates.iter().zip(&result.medians) {
        for (r, m) in meds.iter().enumerate() {
            w.write_record([n.to_string(), r.to_string(), m.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    for (n, m) in result.summary() {
        println!("{name} n={n:<3} median NMAE over repeats {m:.3}%");
    }
    Ok(())
}
