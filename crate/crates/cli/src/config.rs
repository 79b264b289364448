use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vavae_core::diagnostics::Bandwidth;
use vavae_core::foundation::FeatureSource;
use vavae_core::lightningdit::{DitConfig, DitTrainConfig, SamplerConfig};
use vavae_core::tokenizer::{TokenizerConfig, TokenizerTrainConfig};
use vavae_core::vfloss::{Ablation, Margins, VfConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub tokenizer: TokenizerSection,
    pub dit: DitSection,
    pub sampler: SamplerSection,
    pub analyze: AnalyzeSection,
    pub paths: PathsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub factor: usize,
    pub d_z: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub w_kl: f64,
    pub vf: bool,
    pub m1: f64,
    pub m2: f64,
    pub w_hyper: f64,
    /// full | mcos_only | mdms_only | no_margin
    pub ablation: String,
    pub mdms_on_projected: bool,
    /// synthetic | file
    pub foundation: String,
    pub foundation_seed: u64,
    pub d_f: usize,
    /// Patch side of the synthetic foundation; 0 means the downsampling factor.
    pub patch: usize,
    pub features_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DitSection {
    pub depth: usize,
    pub heads: usize,
    pub width: usize,
    pub patch: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_dir: f64,
    pub label_dropout: f64,
    pub lognorm: bool,
    /// 0 keeps logit-normal sampling for the whole run.
    pub lognorm_until_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub steps: usize,
    pub cfg_scale: f64,
    pub cfg_interval: [f64; 2],
    pub shift_s: f64,
    /// Class of every sample; -1 cycles through the classes.
    pub label: i64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    pub max_points: usize,
    /// "scott" or a positive number used on both axes.
    pub bandwidth: String,
    /// Optional `x y` embedding file analyzed alongside the latents.
    pub embedding: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub dataset: String,
    pub tokenizer: String,
    pub dit: String,
    pub reports: String,
    pub samples: String,
}


impl Default for DataSection {
    fn default() -> Self {
        Self { n: 512, size: 32, seed: 0 }
    }
}

impl Default for TokenizerSection {
    fn default() -> Self {
        let t = TokenizerTrainConfig::default();
        let m = Margins::default();
        Self {
            factor: t.model.factor,
            d_z: t.model.d_z,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            w_kl: t.w_kl,
            vf: true,
            m1: m.m1,
            m2: m.m2,
            w_hyper: m.w_hyper,
            ablation: Ablation::Full.to_string(),
            mdms_on_projected: false,
            foundation: "synthetic".into(),
            foundation_seed: 1,
            d_f: 64,
            patch: 0,
            features_path: String::new(),
        }
    }
}

impl Default for DitSection {
    fn default() -> Self {
        let d = DitTrainConfig::default();
        Self {
            depth: d.model.depth,
            heads: d.model.heads,
            width: d.model.width,
            patch: d.model.patch,
            steps: d.steps,
            batch_size: d.batch_size,
            lr: d.lr,
            lambda_dir: d.lambda_dir,
            label_dropout: d.label_dropout,
            lognorm: d.lognorm,
            lognorm_until_step: 0,
        }
    }
}

impl Default for SamplerSection {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            steps: s.steps,
            cfg_scale: s.cfg_scale,
            cfg_interval: [s.cfg_interval.0, s.cfg_interval.1],
            shift_s: s.shift,
            label: -1,
            count: 8,
        }
    }
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            max_points: 4096,
            bandwidth: "scott".into(),
            embedding: String::new(),
        }
    }
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            dataset: "data/shapes.vimg".into(),
            tokenizer: "checkpoints/tokenizer.vavk".into(),
            dit: "checkpoints/dit.vavk".into(),
            reports: "reports".into(),
            samples: "samples/grid.ppm".into(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn unit(name: &str, v: f64) -> Result<(), CliError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(invalid(format!("{name}={v} must lie in [0, 1]")))
    }
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{name}={v} must be positive")))
    }
}

fn nonzero(name: &str, v: usize) -> Result<(), CliError> {
    if v == 0 {
        Err(invalid(format!("{name} must be at least 1")))
    } else {
        Ok(())
    }
}

impl RunConfig {
    /// Parses TOML text, applies `key=value` overrides and validates. A run
    /// manifest is accepted too; its `[config]` section is used.
    pub fn from_sources(text: Option<&str>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: toml::Table = match text {
            Some(t) => toml::from_str(t).map_err(|e| invalid(one_line(&e.to_string())))?,
            None => toml::Table::new(),
        };
        if table.contains_key("command") {
            table = match table.remove("config") {
                Some(toml::Value::Table(c)) => c,
                _ => return Err(invalid("manifest has no [config] table")),
            };
        }
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| invalid(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        nonzero("data.n", self.data.n)?;
        if self.data.size < 4 {
            return Err(invalid(format!("data.size={} must be at least 4", self.data.size)));
        }
        let t = &self.tokenizer;
        unit("tokenizer.m1", t.m1)?;
        unit("tokenizer.m2", t.m2)?;
        if !(t.w_hyper >= 0.0 && t.w_hyper.is_finite()) {
            return Err(invalid(format!("tokenizer.w_hyper={} must be >= 0", t.w_hyper)));
        }
        if !(t.w_kl >= 0.0 && t.w_kl.is_finite()) {
            return Err(invalid(format!("tokenizer.w_kl={} must be >= 0", t.w_kl)));
        }
        positive("tokenizer.lr", t.lr)?;
        nonzero("tokenizer.epochs", t.epochs)?;
        nonzero("tokenizer.batch_size", t.batch_size)?;
        nonzero("tokenizer.d_z", t.d_z)?;
        nonzero("tokenizer.d_f", t.d_f)?;
        if !t.factor.is_power_of_two() || t.factor < 2 {
            return Err(invalid(format!("tokenizer.factor={} must be a power of two >= 2", t.factor)));
        }
        if !self.data.size.is_multiple_of(t.factor) {
            return Err(invalid(format!("data.size={} not divisible by tokenizer.factor={}", self.data.size, t.factor)));
        }
        t.ablation.parse::<Ablation>().map_err(invalid)?;
        match t.foundation.as_str() {
            "synthetic" => {}
            "file" if !t.features_path.is_empty() => {}
            "file" => return Err(invalid("tokenizer.foundation=file needs tokenizer.features_path")),
            other => return Err(invalid(format!("tokenizer.foundation='{other}' (synthetic|file)"))),
        }
        let d = &self.dit;
        nonzero("dit.depth", d.depth)?;
        nonzero("dit.heads", d.heads)?;
        nonzero("dit.steps", d.steps)?;
        nonzero("dit.batch_size", d.batch_size)?;
        nonzero("dit.patch", d.patch)?;
        if d.width == 0 || !d.width.is_multiple_of(4 * d.heads) {
            return Err(invalid(format!("dit.width={} must be a positive multiple of 4*heads", d.width)));
        }
        positive("dit.lr", d.lr)?;
        unit("dit.label_dropout", d.label_dropout)?;
        if !(d.lambda_dir >= 0.0 && d.lambda_dir.is_finite()) {
            return Err(invalid(format!("dit.lambda_dir={} must be >= 0", d.lambda_dir)));
        }
        let s = &self.sampler;
        nonzero("sampler.steps", s.steps)?;
        nonzero("sampler.count", s.count)?;
        let [lo, hi] = s.cfg_interval;
        unit("sampler.cfg_interval[0]", lo)?;
        unit("sampler.cfg_interval[1]", hi)?;
        if lo > hi {
            return Err(invalid(format!("sampler.cfg_interval [{lo}, {hi}] has t_lo > t_hi")));
        }
        positive("sampler.shift_s", s.shift_s)?;
        if !s.cfg_scale.is_finite() {
            return Err(invalid("sampler.cfg_scale must be finite"));
        }
        if s.label < -1 || s.label >= vavae_core::data::NUM_CLASSES as i64 {
            return Err(invalid(format!(
                "sampler.label={} must be -1 or a class below {}",
                s.label,
                vavae_core::data::NUM_CLASSES
            )));
        }
        nonzero("analyze.max_points", self.analyze.max_points)?;
        self.bandwidth()?;
        Ok(())
    }

    pub fn bandwidth(&self) -> Result<Bandwidth, CliError> {
        match self.analyze.bandwidth.as_str() {
            "scott" => Ok(Bandwidth::Scott),
            other => {
                let h: f64 = other
                    .parse()
                    .map_err(|_| invalid(format!("analyze.bandwidth='{other}' (scott or a number)")))?;
                positive("analyze.bandwidth", h)?;
                Ok(Bandwidth::Fixed(h))
            }
        }
    }

    pub fn tokenizer_train(&self) -> TokenizerTrainConfig {
        let t = &self.tokenizer;
        TokenizerTrainConfig {
            model: TokenizerConfig {
                factor: t.factor,
                d_z: t.d_z,
            },
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            w_kl: t.w_kl,
            seed: self.seed,
            vf: t.vf.then(|| VfConfig {
                margins: Margins {
                    m1: t.m1,
                    m2: t.m2,
                    w_hyper: t.w_hyper,
                },
                ablation: t.ablation.parse().expect("validated"),
                mdms_on_projected: t.mdms_on_projected,
            }),
        }
    }

    pub fn feature_source(&self, root: &Path) -> Option<FeatureSource> {
        let t = &self.tokenizer;
        if !t.vf {
            return None;
        }
        Some(match t.foundation.as_str() {
            "file" => FeatureSource::File {
                path: resolve(root, &t.features_path),
            },
            _ => FeatureSource::Synthetic {
                seed: t.foundation_seed,
                d_f: t.d_f,
                patch: if t.patch == 0 { t.factor } else { t.patch },
            },
        })
    }

    pub fn dit_train(&self) -> DitTrainConfig {
        let d = &self.dit;
        DitTrainConfig {
            model: DitConfig {
                depth: d.depth,
                heads: d.heads,
                width: d.width,
                patch: d.patch,
                ..DitConfig::default()
            },
            steps: d.steps,
            batch_size: d.batch_size,
            lr: d.lr,
            lambda_dir: d.lambda_dir,
            label_dropout: d.label_dropout,
            lognorm: d.lognorm,
            lognorm_until_step: (d.lognorm_until_step > 0).then_some(d.lognorm_until_step),
            seed: self.seed,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        let s = &self.sampler;
        SamplerConfig {
            steps: s.steps,
            cfg_scale: s.cfg_scale,
            cfg_interval: (s.cfg_interval[0], s.cfg_interval[1]),
            shift: s.shift_s,
        }
    }
}

/// Relative paths live under the output root.
pub fn resolve(root: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

pub fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// `section.key=value`; the value is read as TOML and falls back to a bare string.
fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), CliError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| invalid(format!("override '{item}' is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(invalid(format!("override key '{key}' is malformed")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| invalid(format!("override key '{key}': '{part}' is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
