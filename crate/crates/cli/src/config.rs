//! Pipeline configuration: one JSON document, every default explicit.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use ghicast_core::bsts::BstsConfig;
use ghicast_core::dataset::{ColumnMap, GapPolicy};
use ghicast_core::dgp::DgpConfig;
use ghicast_core::gbr::GbrConfig;
use ghicast_core::gp::GpConfig;
use ghicast_core::quantile::{default_levels, CombineConfig};
use ghicast_core::scoring::ScoringOptions;
use ghicast_core::varsel::{SelectionConfig, SelectionMethod};
use ghicast_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Where the raw station record comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    Path { path: PathBuf },
    Url { url: String, start: NaiveDate, end: NaiveDate },
    /// Deterministic generated record; `seed` defaults to the pipeline seed.
    Synthetic { days: usize, seed: Option<u64> },
}

/// Individual forecasters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "GPR")]
    Gpr,
    #[serde(rename = "DGPR")]
    Dgpr,
    #[serde(rename = "BSTS_long")]
    BstsLong,
    #[serde(rename = "BSTS_short")]
    BstsShort,
    #[serde(rename = "GBR")]
    Gbr,
    #[serde(rename = "AQR")]
    Aqr,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] =
        [ModelKind::Gpr, ModelKind::Dgpr, ModelKind::BstsLong, ModelKind::BstsShort, ModelKind::Gbr, ModelKind::Aqr];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Gpr => "GPR",
            ModelKind::Dgpr => "DGPR",
            ModelKind::BstsLong => "BSTS_long",
            ModelKind::BstsShort => "BSTS_short",
            ModelKind::Gbr => "GBR",
            ModelKind::Aqr => "AQR",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Argument(format!("unknown model '{s}'")))
    }
}

/// Forecast combiners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CombinerKind {
    #[serde(rename = "QRA")]
    Qra,
    #[serde(rename = "QRNN")]
    Qrnn,
    #[serde(rename = "PLAQR")]
    Plaqr,
    #[serde(rename = "OPERA")]
    Opera,
}

impl CombinerKind {
    pub const ALL: [CombinerKind; 4] = [CombinerKind::Qra, CombinerKind::Qrnn, CombinerKind::Plaqr, CombinerKind::Opera];

    pub fn name(self) -> &'static str {
        match self {
            CombinerKind::Qra => "QRA",
            CombinerKind::Qrnn => "QRNN",
            CombinerKind::Plaqr => "PLAQR",
            CombinerKind::Opera => "OPERA",
        }
    }
}

/// Covariates supplied to each forecast block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovariateMode {
    /// The block's observed covariates (scenario-conditional forecasting).
    #[default]
    Realized,
    /// The last 24 hours before the origin, repeated.
    Persistence,
}

/// Whether night hours enter the score tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NightPolicy {
    #[default]
    Include,
    Exclude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionSettings {
    /// Method whose selection feeds the models.
    pub method: SelectionMethod,
    pub config: SelectionConfig,
}

impl Default for SelectionSettings {
    fn default() -> Self {
        Self { method: SelectionMethod::Gbr, config: SelectionConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AqrSettings {
    pub basis_dim: usize,
    /// `None` chooses the penalty on a held-out tail of the training set.
    pub penalty: Option<f64>,
}

impl Default for AqrSettings {
    fn default() -> Self {
        Self { basis_dim: 10, penalty: None }
    }
}

/// Per-model hyperparameters. Model seeds are derived from the pipeline seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub gp: GpConfig,
    pub dgp: DgpConfig,
    pub bsts_long: BstsConfig,
    pub bsts_short: BstsConfig,
    /// Posterior draws kept for BSTS forecasting.
    pub bsts_forecast_draws: usize,
    pub gbr: GbrConfig,
    pub aqr: AqrSettings,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            gp: GpConfig::default(),
            dgp: DgpConfig { iterations: 1000, burn_in: 500, thin: 5, max_n: 250, ..Default::default() },
            bsts_long: BstsConfig { iterations: 1000, burn_in: 250, thin: 3, ..Default::default() },
            bsts_short: BstsConfig { iterations: 1000, burn_in: 250, thin: 3, window_hours: Some(720), ..Default::default() },
            bsts_forecast_draws: 100,
            gbr: GbrConfig::default(),
            aqr: AqrSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct OperaSettings {
    pub fixed_share: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringSettings {
    pub options: ScoringOptions,
    pub night_policy: NightPolicy,
}

impl Default for ScoringSettings {
    fn default() -> Self {
        Self { options: ScoringOptions::default(), night_policy: NightPolicy::Include }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MurphySettings {
    pub grid: usize,
    pub taus: Vec<f64>,
    /// Models compared in the difference panel.
    pub pair: (String, String),
}

impl Default for MurphySettings {
    fn default() -> Self {
        Self { grid: 101, taus: vec![0.1, 0.5, 0.9], pair: ("PLAQR".into(), "GPR".into()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub data: DataSource,
    pub schema: ColumnMap,
    pub gap_policy: GapPolicy,
    pub split_ratio: f64,
    pub selection: SelectionSettings,
    pub models: Vec<ModelKind>,
    pub model_settings: ModelSettings,
    /// Forecast block length in hours.
    pub horizon: usize,
    pub covariates: CovariateMode,
    pub combiners: Vec<CombinerKind>,
    /// Individual models whose forecasts feed the combiners.
    pub combine_bases: Vec<ModelKind>,
    pub combine: CombineConfig,
    pub opera: OperaSettings,
    pub levels: Vec<f64>,
    pub scoring: ScoringSettings,
    pub murphy: MurphySettings,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic { days: 30, seed: None },
            schema: ColumnMap::default(),
            gap_policy: GapPolicy::default(),
            split_ratio: 0.8,
            selection: SelectionSettings::default(),
            models: ModelKind::ALL.to_vec(),
            model_settings: ModelSettings::default(),
            horizon: 48,
            covariates: CovariateMode::Realized,
            combiners: CombinerKind::ALL.to_vec(),
            combine_bases: vec![ModelKind::Gpr, ModelKind::BstsLong],
            combine: CombineConfig::default(),
            opera: OperaSettings::default(),
            levels: default_levels(),
            scoring: ScoringSettings::default(),
            murphy: MurphySettings::default(),
            output_dir: PathBuf::from("ghicast-out"),
            seed: 42,
        }
    }
}

impl PipelineConfig {
    /// Reads a config, or the config embedded in a run manifest.
    ///
    /// A relative data path is resolved against the config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text)?;
        if let DataSource::Path { path: data } = &mut cfg.data {
            if data.is_relative() {
                if let Some(dir) = path.parent() {
                    *data = dir.join(&*data);
                }
            }
        }
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let value = match value.get("config") {
            Some(inner) if value.get("manifest_version").is_some() => inner.clone(),
            _ => value,
        };
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.horizon == 0 {
            return bad("horizon must be at least 1 hour".into());
        }
        if self.models.is_empty() {
            return bad("model roster is empty".into());
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split ratio {} outside (0,1)", self.split_ratio));
        }
        if self.levels.is_empty() || self.levels.windows(2).any(|w| w[0] >= w[1]) || self.levels.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return bad("quantile levels must be strictly increasing within (0,1)".into());
        }
        if !self.levels.iter().any(|t| (t - 0.5).abs() < 1e-12) {
            return bad("quantile levels must include the median".into());
        }
        if self.murphy.grid < 2 || self.murphy.taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return bad("Murphy grid needs at least 2 points and levels within (0,1)".into());
        }
        if !self.combiners.is_empty() {
            if self.combine_bases.is_empty() {
                return bad("combiners configured without base models".into());
            }
            for b in &self.combine_bases {
                if !self.models.contains(b) {
                    return bad(format!("combiner base '{}' is not in the model roster", b.name()));
                }
            }
        }
        if let DataSource::Synthetic { days, .. } = self.data {
            if days == 0 {
                return bad("synthetic data needs at least one day".into());
            }
        }
        Ok(())
    }

    /// Seed for a named pipeline component.
    pub fn derived_seed(&self, component: &str) -> u64 {
        // FNV-1a over the component name, mixed with the pipeline seed.
        let mut h: u64 = 0xcbf29ce484222325;
        for b in component.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h ^ self.seed.wrapping_mul(0x9E3779B97F4A7C15)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_document_fills_defaults() {
        let cfg = PipelineConfig::from_json(r#"{"horizon": 24, "models": ["GPR", "GBR"], "combine_bases": ["GPR"]}"#).unwrap();
        assert_eq!(cfg.horizon, 24);
        assert_eq!(cfg.models, vec![ModelKind::Gpr, ModelKind::Gbr]);
        assert_eq!(cfg.levels.len(), 19);
    }

    #[test]
    fn manifest_wrapper_is_unwrapped() {
        let inner = PipelineConfig { seed: 7, ..Default::default() };
        let doc = serde_json::json!({"manifest_version": 1, "config": inner});
        assert_eq!(PipelineConfig::from_json(&doc.to_string()).unwrap().seed, 7);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(PipelineConfig::from_json(r#"{"horizon": 0}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"models": []}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"models": ["GBR"]}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"levels": [0.1, 0.9]}"#).is_err());
        assert!(matches!(PipelineConfig::from_json("{"), Err(Error::Json(_))));
    }

    #[test]
    fn derived_seeds_differ_by_component_and_seed() {
        let a = PipelineConfig::default();
        let b = PipelineConfig { seed: 43, ..Default::default() };
        assert_ne!(a.derived_seed("GPR"), a.derived_seed("GBR"));
        assert_ne!(a.derived_seed("GPR"), b.derived_seed("GPR"));
        assert_eq!(a.derived_seed("GPR"), a.derived_seed("GPR"));
    }
}
