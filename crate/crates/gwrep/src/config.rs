//! Pipeline configuration: a TOML file whose every option can also be set
//! from the command line, with flags taking precedence.

use std::fmt;
use std::path::{Path, PathBuf};

use gwrep_core::credibility::{CalibrationMode, PriorSpec};
use gwrep_core::gate::{DirectionRule, GateConfig};
use gwrep_core::inflation::Thinning;
use gwrep_core::sumstats::{AlignConfig, HarmonizeConfig, ReferencePolicy};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Every problem found while validating, reported together.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub Vec<String>);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration ({} problem(s)):", self.0.len())?;
        for p in &self.0 {
            write!(f, "\n  - {p}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModelSelection {
    Fixed,
    Random,
    #[default]
    Both,
}

impl ModelSelection {
    pub fn fixed(self) -> bool {
        matches!(self, ModelSelection::Fixed | ModelSelection::Both)
    }

    pub fn random(self) -> bool {
        matches!(self, ModelSelection::Random | ModelSelection::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyInput {
    pub id: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    pub or_average: f64,
    pub mode: String,
    pub prior_odds: f64,
    /// Posterior odds a result must reach to be called credible.
    pub target_posterior_odds: f64,
}

impl Default for PriorSection {
    fn default() -> Self {
        Self { or_average: 1.15, mode: "mean_abs".into(), prior_odds: 1.0 / 99_999.0, target_posterior_odds: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateSection {
    pub require_same_variant: bool,
    pub proxy_r2_min: f64,
    pub require_same_model: bool,
    pub replication_alpha: f64,
    pub combined_alpha: f64,
    pub direction_rule: String,
    pub discovery_alpha: f64,
    pub min_power: f64,
    pub ld_table: Option<PathBuf>,
}

impl Default for GateSection {
    fn default() -> Self {
        let g = GateConfig::default();
        Self {
            require_same_variant: g.require_same_variant,
            proxy_r2_min: g.proxy_r2_min,
            require_same_model: g.require_same_model,
            replication_alpha: g.replication_alpha,
            combined_alpha: g.combined_alpha,
            direction_rule: "must_match".into(),
            discovery_alpha: g.discovery_alpha,
            min_power: g.min_power,
            ld_table: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarmonizeSection {
    pub reference_policy: String,
    pub frequency_mismatch: f64,
    pub ambiguous_low: f64,
    pub ambiguous_high: f64,
}

impl Default for HarmonizeSection {
    fn default() -> Self {
        Self { reference_policy: "first_study".into(), frequency_mismatch: 0.2, ambiguous_low: 0.4, ambiguous_high: 0.6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    pub thin_qq: bool,
    pub tail_threshold: f64,
    pub max_bulk_points: usize,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        let t = Thinning::default();
        Self { thin_qq: true, tail_threshold: t.tail_threshold, max_bulk_points: t.max_bulk_points }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub seed: u64,
    pub models: ModelSelection,
    /// Study acting as discovery for the gate; the first study when unset.
    pub discovery_study: Option<String>,
    #[serde(rename = "study")]
    pub studies: Vec<StudyInput>,
    pub prior: PriorSection,
    pub gate: GateSection,
    pub harmonize: HarmonizeSection,
    pub diagnostics: DiagnosticsSection,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

/// Validated configuration with typed values and absolute paths.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub studies: Vec<(String, PathBuf)>,
    pub out: PathBuf,
    pub threads: usize,
    pub models: ModelSelection,
    pub discovery_study: String,
    pub harmonize: HarmonizeConfig,
    pub prior: PriorSpec,
    pub target_posterior_odds: f64,
    pub gate: GateConfig,
    pub ld_table: Option<PathBuf>,
    pub thinning: Option<Thinning>,
    /// SHA-256 of the analysis-relevant settings.
    pub config_sha256: String,
    pub source: PipelineConfig,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(vec![format!("parse error: {}", e.message())]))
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(vec![format!("cannot read config {}: {e}", path.display())]))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    fn resolve_path(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(b) if p.is_relative() => b.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Hash over everything that can change outputs. Thread count and the
    /// output location cannot, so they are left out.
    pub fn analysis_hash(&self) -> String {
        let mut c = self.clone();
        c.threads = None;
        c.out = None;
        let text = serde_json::to_string(&c).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }

    pub fn validate(&self) -> Result<Resolved, ConfigError> {
        let mut p = Vec::new();
        if self.studies.is_empty() {
            p.push("no studies configured (add [[study]] entries)".to_string());
        }
        let mut studies = Vec::new();
        for (i, s) in self.studies.iter().enumerate() {
            if s.id.trim().is_empty() {
                p.push(format!("study #{} has an empty id", i + 1));
            }
            if self.studies[..i].iter().any(|o| o.id == s.id) {
                p.push(format!("duplicate study id {:?}", s.id));
            }
            let path = self.resolve_path(&s.path);
            if !path.is_file() {
                p.push(format!("study {:?}: input file {} does not exist", s.id, path.display()));
            }
            studies.push((s.id.clone(), path));
        }

        let out = match &self.out {
            None => {
                p.push("no output directory (set `out` or pass --out)".into());
                PathBuf::new()
            }
            Some(o) => {
                let o = self.resolve_path(o);
                if o.is_file() {
                    p.push(format!("output path {} is a file", o.display()));
                }
                let parent = parent_of(&o);
                if !parent.is_dir() {
                    p.push(format!("output parent directory {} does not exist", parent.display()));
                } else if std::fs::metadata(&parent).map(|m| m.permissions().readonly()).unwrap_or(true) {
                    p.push(format!("output parent directory {} is not writable", parent.display()));
                }
                o
            }
        };
        let threads = match self.threads {
            Some(0) => {
                p.push("threads must be at least 1".into());
                1
            }
            Some(n) => n,
            None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        };

        let h = &self.harmonize;
        let policy = h.reference_policy.parse::<ReferencePolicy>().unwrap_or_else(|e| {
            p.push(format!("harmonize.reference_policy: {e}"));
            ReferencePolicy::default()
        });
        if !(0.0 <= h.ambiguous_low && h.ambiguous_low <= h.ambiguous_high && h.ambiguous_high <= 1.0) {
            p.push("harmonize: need 0 <= ambiguous_low <= ambiguous_high <= 1".into());
        }
        if !(h.frequency_mismatch > 0.0 && h.frequency_mismatch <= 1.0) {
            p.push("harmonize.frequency_mismatch must lie in (0, 1]".into());
        }

        let mode = self.prior.mode.parse::<CalibrationMode>().unwrap_or_else(|e| {
            p.push(format!("prior.mode: {e}"));
            CalibrationMode::default()
        });
        let prior = PriorSpec::new(self.prior.or_average, mode, self.prior.prior_odds).unwrap_or_else(|e| {
            p.push(format!("prior: {e}"));
            PriorSpec::default()
        });
        if !(self.prior.target_posterior_odds > 0.0 && self.prior.target_posterior_odds.is_finite()) {
            p.push("prior.target_posterior_odds must be positive".into());
        }

        let g = &self.gate;
        let direction_rule = g.direction_rule.parse::<DirectionRule>().unwrap_or_else(|e| {
            p.push(format!("gate.direction_rule: {e}"));
            DirectionRule::default()
        });
        let gate = GateConfig {
            require_same_variant: g.require_same_variant,
            proxy_r2_min: g.proxy_r2_min,
            require_same_model: g.require_same_model,
            replication_alpha: g.replication_alpha,
            combined_alpha: g.combined_alpha,
            direction_rule,
            discovery_alpha: g.discovery_alpha,
            min_power: g.min_power,
        };
        if let Err(e) = gate.validate() {
            p.push(format!("gate: {e}"));
        }
        let ld_table = g.ld_table.as_ref().map(|l| self.resolve_path(l));
        if let Some(l) = &ld_table {
            if !l.is_file() {
                p.push(format!("gate.ld_table {} does not exist", l.display()));
            }
        }

        let discovery_study = match &self.discovery_study {
            Some(d) => {
                if !self.studies.iter().any(|s| &s.id == d) {
                    p.push(format!("discovery_study {d:?} is not a configured study"));
                }
                d.clone()
            }
            None => self.studies.first().map(|s| s.id.clone()).unwrap_or_default(),
        };

        let d = &self.diagnostics;
        if d.thin_qq && !(d.tail_threshold >= 0.0) {
            p.push("diagnostics.tail_threshold must be nonnegative".into());
        }

        if !p.is_empty() {
            return Err(ConfigError(p));
        }
        Ok(Resolved {
            studies,
            out,
            threads,
            models: self.models,
            discovery_study,
            harmonize: HarmonizeConfig {
                policy,
                align: AlignConfig { ambiguous_band: (h.ambiguous_low, h.ambiguous_high) },
                frequency_mismatch: h.frequency_mismatch,
            },
            prior,
            target_posterior_odds: self.prior.target_posterior_odds,
            gate,
            ld_table,
            thinning: d.thin_qq.then_some(Thinning { tail_threshold: d.tail_threshold, max_bulk_points: d.max_bulk_points }),
            config_sha256: self.analysis_hash(),
            source: self.clone(),
        })
    }
}

pub(crate) fn parent_of(p: &Path) -> PathBuf {
    match p.parent() {
        Some(q) if !q.as_os_str().is_empty() => q.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
