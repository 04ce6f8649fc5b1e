//! The staged forecasting workflow: ingest, select, fit, forecast, combine,
//! score, murphy. Each stage writes its artifacts under the output directory.

use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::ops::Range;
use std::path::{Path, PathBuf};

use chrono::{DateTime, FixedOffset};
use ghicast_core::aggregate::{aggregate_quantiles, write_weights_csv, LearningRate};
use ghicast_core::dataset::{self, CleanReport, Covariate, DatasetSplit, DateWindow, TimeSeriesFrame};
use ghicast_core::quantile::{self, night_hours, CombineMethod, CombineWindows, QuantileForecast};
use ghicast_core::scoring::{self, ModelForecast, ScoreReport};
use ghicast_core::varsel::{self, SelectionMethod, SelectionResult};
use ghicast_core::{Error, Result};
use log::info;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{CombinerKind, DataSource, ModelKind, NightPolicy, PipelineConfig};
use crate::models::{self, fit_model, rolling_forecast, spread_sd, Forecaster, ModelSeries};
use crate::svg;

pub const MANIFEST_VERSION: u32 = 1;
pub const FAILED_MARKER: &str = "FAILED";
const TS_FORMAT: &str = "%Y-%m-%dT%H:%M:%S%:z";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Select,
    Fit,
    Forecast,
    Combine,
    Score,
    Murphy,
}

impl Stage {
    pub const ALL: [Stage; 7] = [Stage::Ingest, Stage::Select, Stage::Fit, Stage::Forecast, Stage::Combine, Stage::Score, Stage::Murphy];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Select => "select",
            Stage::Fit => "fit",
            Stage::Forecast => "forecast",
            Stage::Combine => "combine",
            Stage::Score => "score",
            Stage::Murphy => "murphy",
        }
    }
}

/// A stage failure.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub source: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage '{}' failed: {}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

/// Process exit code for an error: 2 config, 3 data, 4 numerical.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Argument(_) | Error::Spec(_) | Error::Json(_) => 2,
        Error::Schema { .. }
        | Error::Parse { .. }
        | Error::DataQuality(_)
        | Error::Transport(_)
        | Error::HttpStatus { .. }
        | Error::Io(_)
        | Error::Csv(_) => 3,
        Error::Numerical(_) | Error::Sampler(_) | Error::Protocol(_) => 4,
    }
}

/// Chronological windows used by a run.
#[derive(Debug, Clone, Serialize)]
pub struct WindowAudit {
    pub train: [String; 2],
    pub test: [String; 2],
    pub combiner_train: Option<[String; 2]>,
    pub evaluation: [String; 2],
    pub train_precedes_test: bool,
    pub combiner_train_precedes_evaluation: bool,
}

/// Everything produced so far by a run.
#[derive(Debug, Clone, Default)]
pub struct RunState {
    pub cleaned: Option<TimeSeriesFrame>,
    pub clean_report: Option<CleanReport>,
    pub split: Option<DatasetSplit>,
    pub selection: Vec<SelectionResult>,
    pub features: Vec<Covariate>,
    pub models: Vec<Forecaster>,
    /// Individual forecasts over the whole test window.
    pub forecasts: Vec<ModelSeries>,
    /// Combined forecasts over the evaluation window.
    pub combined: Vec<ModelSeries>,
    pub windows: Option<CombineWindows>,
    pub night_hours: Vec<u32>,
    pub scores: Option<ScoreReport>,
    pub scores_individual: Option<ScoreReport>,
    pub completed: Vec<Stage>,
}

/// A configured run writing into `out`.
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
}

fn ts(t: &DateTime<FixedOffset>) -> String {
    t.format(TS_FORMAT).to_string()
}

fn span(frame: &TimeSeriesFrame, r: Range<usize>) -> [String; 2] {
    [ts(&frame.timestamps[r.start]), ts(&frame.timestamps[r.end - 1])]
}

fn write_point_csv(path: &Path, timestamps: &[DateTime<FixedOffset>], point: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["timestamp", "point"])?;
    for (t, p) in timestamps.iter().zip(point) {
        w.write_record([ts(t), format!("{p}")])?;
    }
    w.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn write_series(path: &Path, timestamps: &[DateTime<FixedOffset>], s: &ModelSeries) -> Result<()> {
    match &s.quantiles {
        Some(q) => q.write_csv(timestamps, create(path)?),
        None => write_point_csv(path, timestamps, &s.point),
    }
}

fn select_rows(s: &ModelSeries, rows: &[usize]) -> Result<ModelSeries> {
    let quantiles = match &s.quantiles {
        Some(q) => Some(QuantileForecast::with_point(
            q.levels.clone(),
            DMatrix::from_fn(rows.len(), q.levels.len(), |i, l| q.values[(rows[i], l)]),
            rows.iter().map(|&i| q.point[i]).collect(),
        )?),
        None => None,
    };
    Ok(ModelSeries {
        name: s.name.clone(),
        point: rows.iter().map(|&i| s.point[i]).collect(),
        quantiles,
        sd: s.sd.as_ref().map(|v| rows.iter().map(|&i| v[i]).collect()),
    })
}

/// Scores each series on the given rows of `actuals`.
pub fn score_series(
    series: &[ModelSeries],
    actuals: &[f64],
    rows: &[usize],
    opts: &scoring::ScoringOptions,
    window: String,
    night_policy: NightPolicy,
) -> Result<ScoreReport> {
    let y: Vec<f64> = rows.iter().map(|&i| actuals[i]).collect();
    let picked = series.iter().map(|s| select_rows(s, rows)).collect::<Result<Vec<_>>>()?;
    let rows_out = picked
        .par_iter()
        .map(|s| {
            let mf = ModelForecast { name: &s.name, point: &s.point, quantiles: s.quantiles.as_ref(), sd: s.sd.as_deref() };
            scoring::score_model(&mf, &y, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    let policy = match night_policy {
        NightPolicy::Include => "night hours included",
        NightPolicy::Exclude => "night hours excluded",
    };
    Ok(ScoreReport { window, night_policy: policy.into(), rows: rows_out })
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Self {
        let out = cfg.output_dir.clone();
        Self { cfg, out }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn mkdir(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        fs::create_dir_all(&p)?;
        Ok(p)
    }

    /// Runs every stage up to and including `last`. On failure a FAILED
    /// marker naming the stage and cause is written and earlier outputs kept.
    pub fn run_until(&self, last: Stage) -> std::result::Result<RunState, StageError> {
        let mut st = RunState::default();
        fs::create_dir_all(&self.out).map_err(|e| StageError { stage: "setup", source: e.into() })?;
        let _ = fs::remove_file(self.path(FAILED_MARKER));
        for stage in Stage::ALL.into_iter().filter(|s| *s <= last) {
            info!("stage {}", stage.name());
            let r = match stage {
                Stage::Ingest => self.ingest(&mut st),
                Stage::Select => self.select(&mut st),
                Stage::Fit => self.fit(&mut st),
                Stage::Forecast => self.forecast(&mut st),
                Stage::Combine => self.combine(&mut st),
                Stage::Score => self.score(&mut st),
                Stage::Murphy => self.murphy(&mut st),
            };
            if let Err(source) = r {
                let msg = format!("stage: {}\ncause: {}\n", stage.name(), source);
                let _ = fs::write(self.path(FAILED_MARKER), msg);
                let _ = self.write_manifest(&st);
                return Err(StageError { stage: stage.name(), source });
            }
            st.completed.push(stage);
        }
        self.write_manifest(&st).map_err(|source| StageError { stage: "manifest", source })?;
        Ok(st)
    }

    fn load_raw(&self) -> Result<TimeSeriesFrame> {
        match &self.cfg.data {
            DataSource::Path { path } => dataset::load_csv(path, &self.cfg.schema),
            DataSource::Url { url, start, end } => dataset::fetch_remote(url, DateWindow { start: *start, end: *end }, &self.cfg.schema),
            DataSource::Synthetic { days, seed } => Ok(dataset::synthetic(*days, seed.unwrap_or(self.cfg.seed))),
        }
    }

    fn ingest(&self, st: &mut RunState) -> Result<()> {
        let raw = self.load_raw()?;
        let (clean, report) = dataset::clean(&raw, &self.cfg.gap_policy)?;
        info!("cleaned {} raw rows into {} hourly rows", raw.len(), clean.len());
        clean.save_csv(self.path("cleaned.csv"))?;
        fs::write(self.path("clean_report.json"), serde_json::to_string_pretty(&report)?)?;
        let split = dataset::split(&clean, self.cfg.split_ratio)?;
        if split.train.len() < 2 || split.test.is_empty() {
            return Err(Error::DataQuality(format!("split of {} rows leaves {} train and {} test rows", clean.len(), split.train.len(), split.test.len())));
        }
        st.cleaned = Some(clean);
        st.clean_report = Some(report);
        st.split = Some(split);
        Ok(())
    }

    fn select(&self, st: &mut RunState) -> Result<()> {
        let split = st.split.as_ref().expect("ingest precedes select");
        let sc = &self.cfg.selection.config;
        let mut sc = sc.clone();
        sc.gbr.seed = self.cfg.derived_seed("selection");
        let results = SelectionMethod::ALL.par_iter().map(|&m| varsel::select_and_evaluate(m, split, &sc)).collect::<Result<Vec<_>>>()?;
        varsel::write_summary_csv(&results, create(&self.path("selection.csv"))?)?;
        fs::write(self.path("selection.json"), serde_json::to_string_pretty(&results)?)?;
        let chosen = results
            .iter()
            .find(|r| r.method == self.cfg.selection.method.name())
            .expect("every method is evaluated");
        st.features = dataset::parse_features(&chosen.selected)?;
        info!("{} selected {:?}", chosen.method, chosen.selected);
        st.selection = results;
        Ok(())
    }

    fn fit(&self, st: &mut RunState) -> Result<()> {
        let split = st.split.as_ref().expect("ingest precedes fit");
        let dir = self.mkdir("models")?;
        let fitted = self.cfg.models.par_iter().map(|&k| fit_model(k, &split.train, &st.features, &self.cfg)).collect::<Result<Vec<_>>>()?;
        for f in &fitted {
            models::save_model(f, &dir)?;
        }
        st.models = fitted;
        Ok(())
    }

    fn forecast(&self, st: &mut RunState) -> Result<()> {
        let split = st.split.as_ref().expect("ingest precedes forecast");
        let dir = self.mkdir("forecasts")?;
        let series = st
            .models
            .par_iter()
            .map(|f| rolling_forecast(f, &split.train, &split.test, self.cfg.horizon, self.cfg.covariates, &self.cfg.levels))
            .collect::<Result<Vec<_>>>()?;
        for s in &series {
            write_series(&dir.join(format!("{}.csv", s.name)), &split.test.timestamps, s)?;
        }
        st.forecasts = series;
        Ok(())
    }

    fn series(&self, st: &RunState, kind: ModelKind) -> Result<ModelSeries> {
        st.forecasts
            .iter()
            .find(|s| s.name == kind.name())
            .cloned()
            .ok_or_else(|| Error::Argument(format!("combiner base '{}' was not forecast", kind.name())))
    }

    fn combine(&self, st: &mut RunState) -> Result<()> {
        let split = st.split.as_ref().expect("ingest precedes combine");
        let test = &split.test;
        let n = test.len();
        let windows = CombineWindows::halves(n);
        let hours = test.hours();
        st.night_hours = if windows.train.is_empty() { Vec::new() } else { night_hours(&test.ghi, &hours, windows.train.clone()) };
        if self.cfg.combiners.is_empty() {
            st.windows = Some(windows);
            return Ok(());
        }
        if windows.train.is_empty() {
            return Err(Error::DataQuality(format!("test window of {n} rows is too short to train a combiner")));
        }
        let dir = self.mkdir("combined")?;
        let bases: Vec<ModelSeries> = self.cfg.combine_bases.iter().map(|&k| self.series(st, k)).collect::<Result<_>>()?;
        let base_cols: Vec<(String, Vec<f64>)> = bases.iter().map(|s| (s.name.clone(), s.point.clone())).collect();
        let mut ccfg = self.cfg.combine.clone();
        ccfg.levels = self.cfg.levels.clone();
        ccfg.qrnn.seed = self.cfg.derived_seed("QRNN");
        let eval_ts = &test.timestamps[windows.eval.clone()];

        let combined = self
            .cfg
            .combiners
            .par_iter()
            .map(|&c| -> Result<ModelSeries> {
                let mut q = match c {
                    CombinerKind::Opera => {
                        let names: Vec<String> = bases.iter().map(|s| s.name.clone()).collect();
                        let qs = bases.iter().map(|s| s.quantiles_or_point(&self.cfg.levels)).collect::<Result<Vec<_>>>()?;
                        let refs: Vec<&QuantileForecast> = qs.iter().collect();
                        let (agg, runs) = aggregate_quantiles(&names, &refs, &test.ghi, LearningRate::Auto, self.cfg.opera.fixed_share)?;
                        let median = self.cfg.levels.iter().position(|t| (t - 0.5).abs() < 1e-12).expect("levels include the median");
                        write_weights_csv(&names, &runs[median].weights, create(&dir.join("OPERA_weights.csv"))?)?;
                        agg.slice(windows.eval.clone())
                    }
                    _ => {
                        let method = match c {
                            CombinerKind::Qra => CombineMethod::Qra,
                            CombinerKind::Qrnn => CombineMethod::Qrnn,
                            _ => CombineMethod::Plaqr,
                        };
                        quantile::combine(&base_cols, &test.ghi, Some(&hours), method, &windows, &ccfg)?.forecast
                    }
                };
                q.point = q.level_column(0.5);
                q.clamp_min(0.0);
                q.rearrange();
                let sd = spread_sd(&q);
                Ok(ModelSeries { name: c.name().into(), point: q.point.clone(), quantiles: Some(q), sd: Some(sd) })
            })
            .collect::<Result<Vec<_>>>()?;
        for s in &combined {
            write_series(&dir.join(format!("{}.csv", s.name)), eval_ts, s)?;
        }
        st.combined = combined;
        st.windows = Some(windows);
        Ok(())
    }

    fn score_rows(&self, st: &RunState, range: Range<usize>) -> Vec<usize> {
        let test = &st.split.as_ref().expect("split").test;
        match self.cfg.scoring.night_policy {
            NightPolicy::Include => range.collect(),
            NightPolicy::Exclude => range.filter(|&i| !st.night_hours.contains(&test.hour(i))).collect(),
        }
    }

    fn score(&self, st: &mut RunState) -> Result<()> {
        let split = st.split.as_ref().expect("split");
        let test = &split.test;
        let windows = st.windows.clone().unwrap_or_else(|| CombineWindows::halves(test.len()));
        if windows.eval.is_empty() {
            return Err(Error::DataQuality("evaluation window is empty".into()));
        }
        let opts = &self.cfg.scoring.options;
        let policy = self.cfg.scoring.night_policy;

        // Common window: the evaluation half, where combiners also forecast.
        let eval_rows = self.score_rows(st, windows.eval.clone());
        let mut all: Vec<ModelSeries> = st.forecasts.clone();
        let offset = windows.eval.start;
        for c in &st.combined {
            // Re-index combined forecasts onto test-window rows.
            let mut full = ModelSeries {
                name: c.name.clone(),
                point: vec![f64::NAN; test.len()],
                quantiles: None,
                sd: c.sd.as_ref().map(|_| vec![f64::NAN; test.len()]),
            };
            full.point[offset..].copy_from_slice(&c.point);
            if let (Some(sd), Some(csd)) = (full.sd.as_mut(), c.sd.as_ref()) {
                sd[offset..].copy_from_slice(csd);
            }
            if let Some(q) = &c.quantiles {
                let mut v = DMatrix::from_element(test.len(), q.levels.len(), f64::NAN);
                v.rows_mut(offset, q.len()).copy_from(&q.values);
                full.quantiles = Some(QuantileForecast { levels: q.levels.clone(), values: v, point: full.point.clone() });
            }
            all.push(full);
        }
        let window = format!("{} to {}", ts(&test.timestamps[windows.eval.start]), ts(&test.timestamps[windows.eval.end - 1]));
        let report = score_series(&all, &test.ghi, &eval_rows, opts, window, policy)?;
        report.write_csv(create(&self.path("scores.csv"))?)?;

        let full_rows = self.score_rows(st, 0..test.len());
        let window = format!("{} to {}", ts(&test.timestamps[0]), ts(&test.timestamps[test.len() - 1]));
        let indiv = score_series(&st.forecasts, &test.ghi, &full_rows, opts, window, policy)?;
        indiv.write_csv(create(&self.path("scores_individual.csv"))?)?;

        self.plots(st, &all, &eval_rows)?;
        st.scores = Some(report);
        st.scores_individual = Some(indiv);
        Ok(())
    }

    fn plots(&self, st: &RunState, all: &[ModelSeries], rows: &[usize]) -> Result<()> {
        let test = &st.split.as_ref().expect("split").test;
        let dir = self.mkdir("plots")?;
        let y: Vec<f64> = rows.iter().map(|&i| test.ghi[i]).collect();
        let models: Vec<(String, Vec<f64>)> = all.iter().map(|s| (s.name.clone(), rows.iter().map(|&i| s.point[i]).collect())).collect();
        fs::write(dir.join("density.svg"), svg::render(&svg::density_panels(&y, &models), 3))?;
        let xs: Vec<f64> = (0..rows.len()).map(|i| i as f64).collect();
        let mut series = vec![svg::Series { label: "GHI".into(), xs: xs.clone(), ys: y }];
        series.extend(models.into_iter().map(|(label, ys)| svg::Series { label, xs: xs.clone(), ys }));
        let panel = svg::Panel {
            title: "Forecasts over the evaluation window".into(),
            x_label: "hour".into(),
            y_label: "GHI (W/m²)".into(),
            series,
        };
        fs::write(dir.join("forecasts.svg"), svg::render(&[panel], 1))?;
        Ok(())
    }

    fn murphy(&self, st: &mut RunState) -> Result<()> {
        let test = &st.split.as_ref().expect("split").test;
        let windows = st.windows.clone().unwrap_or_else(|| CombineWindows::halves(test.len()));
        let eval = windows.eval.clone();
        let dir = self.mkdir("murphy")?;
        let y = &test.ghi[eval.clone()];
        for &tau in &self.cfg.murphy.taus {
            let mut cols: Vec<(String, Vec<f64>)> = Vec::new();
            for s in &st.forecasts {
                if let Some(c) = s.slice(eval.clone()).at_level(tau) {
                    cols.push((s.name.clone(), c));
                }
            }
            for s in &st.combined {
                if let Some(c) = s.at_level(tau) {
                    cols.push((s.name.clone(), c));
                }
            }
            let curve = scoring::murphy(&cols, y, tau, self.cfg.murphy.grid)?;
            let stem = format!("murphy_tau{tau}");
            curve.write_csv(create(&dir.join(format!("{stem}.csv")))?)?;
            let mut panels = vec![svg::Panel {
                title: format!("Empirical scores, τ = {tau}"),
                x_label: "θ".into(),
                y_label: "mean elementary score".into(),
                series: curve
                    .models
                    .iter()
                    .zip(&curve.mean_scores)
                    .map(|(m, s)| svg::Series { label: m.clone(), xs: curve.thetas.clone(), ys: s.clone() })
                    .collect(),
            }];
            let (a, b) = &self.cfg.murphy.pair;
            if let Ok(d) = curve.difference(a, b) {
                panels.push(svg::Panel {
                    title: format!("Difference in scores, {a} − {b}"),
                    x_label: "θ".into(),
                    y_label: "score difference".into(),
                    series: vec![svg::Series { label: format!("{a} − {b}"), xs: curve.thetas.clone(), ys: d }],
                });
            }
            fs::write(dir.join(format!("{stem}.svg")), svg::render(&panels, 2))?;
        }
        Ok(())
    }

    fn audit(&self, st: &RunState) -> Option<WindowAudit> {
        let split = st.split.as_ref()?;
        let (train, test) = (&split.train, &split.test);
        let windows = st.windows.clone().unwrap_or_else(|| CombineWindows::halves(test.len()));
        if train.is_empty() || test.is_empty() || windows.eval.is_empty() {
            return None;
        }
        let combiner_train = (!windows.train.is_empty()).then(|| span(test, windows.train.clone()));
        Some(WindowAudit {
            train: span(train, 0..train.len()),
            test: span(test, 0..test.len()),
            combiner_train,
            evaluation: span(test, windows.eval.clone()),
            train_precedes_test: train.timestamps[train.len() - 1] < test.timestamps[0],
            combiner_train_precedes_evaluation: windows.train.is_empty()
                || test.timestamps[windows.train.end - 1] < test.timestamps[windows.eval.start],
        })
    }

    fn write_manifest(&self, st: &RunState) -> Result<()> {
        let audit = self.audit(st);
        if let Some(a) = &audit {
            if !a.train_precedes_test || !a.combiner_train_precedes_evaluation {
                return Err(Error::Protocol("training window does not precede its evaluation window".into()));
            }
        }
        let doc = serde_json::json!({
            "manifest_version": MANIFEST_VERSION,
            "tool": { "name": env!("CARGO_PKG_NAME"), "version": env!("CARGO_PKG_VERSION") },
            "model_formats": {
                "gp": ghicast_core::gp::FORMAT_VERSION,
                "dgp": ghicast_core::dgp::FORMAT_VERSION,
                "bsts": ghicast_core::bsts::FORMAT_VERSION,
                "gbr": ghicast_core::gbr::FORMAT_VERSION,
            },
            "seed": self.cfg.seed,
            "config": self.cfg,
            "completed_stages": st.completed,
            "data": st.cleaned.as_ref().map(|c| serde_json::json!({
                "provenance": c.provenance,
                "rows": c.len(),
                "clean_report": st.clean_report,
            })),
            "features": st.features.iter().map(|f| f.name()).collect::<Vec<_>>(),
            "night_hours": st.night_hours,
            "windows": audit,
        });
        fs::write(self.path("manifest.json"), serde_json::to_string_pretty(&doc)?)?;
        Ok(())
    }
}

/// Artifacts a complete run leaves behind, relative to the output directory.
pub fn expected_artifacts(cfg: &PipelineConfig) -> Vec<String> {
    let mut v: Vec<String> = ["cleaned.csv", "clean_report.json", "selection.csv", "selection.json", "manifest.json"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for m in &cfg.models {
        v.push(format!("models/{}.json", m.name()));
        v.push(format!("forecasts/{}.csv", m.name()));
    }
    for c in &cfg.combiners {
        v.push(format!("combined/{}.csv", c.name()));
    }
    if cfg.combiners.contains(&CombinerKind::Opera) {
        v.push("combined/OPERA_weights.csv".into());
    }
    v.extend(["scores.csv", "scores_individual.csv", "plots/density.svg", "plots/forecasts.svg"].map(String::from));
    for tau in &cfg.murphy.taus {
        v.push(format!("murphy/murphy_tau{tau}.csv"));
        v.push(format!("murphy/murphy_tau{tau}.svg"));
    }
    v
}
