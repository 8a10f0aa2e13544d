//! Run configuration: `section.key = value` text, command-line overrides and
//! the typed per-stage settings derived from them.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::regressor::{format_conv_blocks, parse_conv_blocks, LossKind, RegressorConfig};
use crate::volume::{Split, SynthConfig};
use crate::vit::ViTConfig;

/// Which manifest splits a stage reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitSel {
    One(Split),
    All,
}

impl SplitSel {
    pub fn contains(&self, split: Split) -> bool {
        match self {
            SplitSel::One(s) => *s == split,
            SplitSel::All => true,
        }
    }
}

impl FromStr for SplitSel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => Ok(SplitSel::All),
            other => other
                .parse()
                .map(SplitSel::One)
                .map_err(|_| Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl std::fmt::Display for SplitSel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitSel::One(s) => s.fmt(f),
            SplitSel::All => f.write_str("all"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpretConfig {
    pub band_edges: Vec<f64>,
    /// `None` generates the synthetic box atlas on the attention grid.
    pub atlas: Option<PathBuf>,
    pub atlas_labels: Option<PathBuf>,
    pub split: SplitSel,
    /// 0 means every subject in the split.
    pub max_subjects: usize,
    pub montage_panels: usize,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        InterpretConfig {
            band_edges: (1..=9).map(|k| k as f64 * 10.0).collect(),
            atlas: None,
            atlas_labels: None,
            split: SplitSel::One(Split::Val),
            max_subjects: 0,
            montage_panels: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub threshold_sd: f64,
    pub split: SplitSel,
    pub case_label: u8,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold_sd: 1.0,
            split: SplitSel::One(Split::Test),
            case_label: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// External cohort manifest; when unset the synthetic cohort under `out` is used.
    pub cohort: Option<PathBuf>,
    pub synth: SynthConfig,
    pub vit: ViTConfig,
    pub regressor: RegressorConfig,
    pub interpret: InterpretConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out: PathBuf::from("out"),
            cohort: None,
            synth: SynthConfig::default(),
            vit: ViTConfig::default(),
            regressor: RegressorConfig::default(),
            interpret: InterpretConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{value}` for {key}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str, sep: char) -> Result<Vec<T>> {
    value.split(sep).map(|v| parse(key, v)).collect()
}

fn join<T: Display>(items: &[T], sep: &str) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(sep)
}

fn opt_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty() && v != "synthetic" && v != "none").then(|| PathBuf::from(v))
}

/// Parses config text into raw key/value pairs. Accepts `section.key = value`
/// lines and `[section]` headers followed by `key = value`.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    let mut section = String::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let k = k.trim();
        let key = if section.is_empty() || k.contains('.') {
            k.to_string()
        } else {
            format!("{section}.{k}")
        };
        let v = v.trim().trim_matches('"').to_string();
        map.insert(key, v);
    }
    Ok(map)
}

impl RunConfig {
    /// Applies raw entries on top of the defaults. Profile keys go first so
    /// individual keys can refine them.
    pub fn from_entries(entries: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for key in ["vit.profile", "regressor.profile"] {
            if let Some(v) = entries.get(key) {
                cfg.set(key, v)?;
            }
        }
        for (k, v) in entries {
            if !k.ends_with(".profile") {
                cfg.set(k, v)?;
            }
        }
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut entries = parse_config_text(&text)?;
        for (k, v) in overrides {
            entries.insert(k.clone(), v.clone());
        }
        Self::from_entries(&entries)
    }

    fn propagate_seed(&mut self) {
        self.synth.seed = self.seed;
        self.vit.seed = self.seed;
        self.regressor.seed = self.seed;
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.propagate_seed();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.vit.validate()?;
        self.regressor.validate()?;
        let e = &self.interpret.band_edges;
        if e.len() < 2 || e.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("interpret.bands must be increasing edges".into()));
        }
        if self.interpret.atlas.is_some() != self.interpret.atlas_labels.is_some() {
            return Err(Error::Config(
                "interpret.atlas and interpret.atlas_labels must be given together".into(),
            ));
        }
        if !(self.eval.threshold_sd >= 0.0) {
            return Err(Error::Config("eval.threshold_sd must be non-negative".into()));
        }
        if self.eval.case_label > 1 {
            return Err(Error::Config("eval.case_label must be 0 or 1".into()));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => {
                self.seed = parse(key, v)?;
                self.propagate_seed();
            }
            "io.out" => self.out = PathBuf::from(v.trim()),
            "io.cohort" => self.cohort = opt_path(v),

            "synth.count" => self.synth.count = parse(key, v)?,
            "synth.dims" => {
                let d: Vec<usize> = parse_list(key, v, 'x')?;
                self.synth.dims = d
                    .try_into()
                    .map_err(|_| Error::Config(format!("synth.dims needs SxHxW, got `{v}`")))?;
            }
            "synth.age_min" => self.synth.age_range[0] = parse(key, v)?,
            "synth.age_max" => self.synth.age_range[1] = parse(key, v)?,
            "synth.case_fraction" => self.synth.case_fraction = parse(key, v)?,
            "synth.case_atrophy_boost" => self.synth.case_atrophy_boost = parse(key, v)?,
            "synth.noise_sigma" => self.synth.noise_sigma = parse(key, v)?,
            "synth.sex_asymmetry" => self.synth.sex_asymmetry = parse(key, v)?,
            "synth.sex_age_offset" => self.synth.sex_age_offset = parse(key, v)?,
            "synth.size_jitter" => self.synth.size_jitter = parse(key, v)?,
            "synth.val_fraction" => self.synth.val_fraction = parse(key, v)?,
            "synth.test_fraction" => self.synth.test_fraction = parse(key, v)?,

            "vit.profile" => {
                self.vit = match v.trim() {
                    "toy" => ViTConfig::toy(),
                    "default" => ViTConfig::default(),
                    other => return Err(Error::Config(format!("unknown vit.profile `{other}`"))),
                }
            }
            "vit.patch_size" => self.vit.patch_size = parse(key, v)?,
            "vit.embed_dim" => self.vit.embed_dim = parse(key, v)?,
            "vit.depth" => self.vit.depth = parse(key, v)?,
            "vit.heads" => self.vit.heads = parse(key, v)?,
            "vit.mlp_ratio" => self.vit.mlp_ratio = parse(key, v)?,
            "vit.bin_width" => self.vit.bin_width = parse(key, v)?,
            "vit.slices" => self.vit.slices_per_volume = parse(key, v)?,
            "vit.lr" => self.vit.lr = parse(key, v)?,
            "vit.epochs" => self.vit.epochs = parse(key, v)?,
            "vit.batch_size" => self.vit.batch_size = parse(key, v)?,

            "regressor.profile" => {
                self.regressor = match v.trim() {
                    "toy" => RegressorConfig::toy(),
                    "default" => RegressorConfig::default(),
                    other => return Err(Error::Config(format!("unknown regressor.profile `{other}`"))),
                }
            }
            "regressor.conv_blocks" => self.regressor.conv_blocks = parse_conv_blocks(v)?,
            "regressor.activation" => self.regressor.activation = v.parse::<Activation>()?,
            "regressor.fc1" => self.regressor.fc_dims.0 = parse(key, v)?,
            "regressor.fc2" => self.regressor.fc_dims.1 = parse(key, v)?,
            "regressor.dropout" => self.regressor.dropout = parse(key, v)?,
            "regressor.sex_fusion" => self.regressor.sex_fusion = parse_bool(key, v)?,
            "regressor.residual" => self.regressor.residual = parse_bool(key, v)?,
            "regressor.loss" => self.regressor.loss = v.parse::<LossKind>()?,
            "regressor.lr" => self.regressor.lr = parse(key, v)?,
            "regressor.max_epochs" => self.regressor.max_epochs = parse(key, v)?,
            "regressor.patience" => self.regressor.patience = parse(key, v)?,
            "regressor.batch_size" => self.regressor.batch_size = parse(key, v)?,

            "interpret.bands" => self.interpret.band_edges = parse_list(key, v, ',')?,
            "interpret.atlas" => self.interpret.atlas = opt_path(v),
            "interpret.atlas_labels" => self.interpret.atlas_labels = opt_path(v),
            "interpret.split" => self.interpret.split = v.parse()?,
            "interpret.max_subjects" => self.interpret.max_subjects = parse(key, v)?,
            "interpret.montage_panels" => self.interpret.montage_panels = parse(key, v)?,

            "eval.threshold_sd" => self.eval.threshold_sd = parse(key, v)?,
            "eval.split" => self.eval.split = v.parse()?,
            "eval.case_label" => self.eval.case_label = parse(key, v)?,

            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// The full effective configuration as sorted key/value pairs.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let s = &self.synth;
        let v = &self.vit;
        let r = &self.regressor;
        let i = &self.interpret;
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("io.out", self.out.display().to_string()),
            ("io.cohort", path(&self.cohort)),
            ("synth.count", s.count.to_string()),
            ("synth.dims", join(&s.dims, "x")),
            ("synth.age_min", s.age_range[0].to_string()),
            ("synth.age_max", s.age_range[1].to_string()),
            ("synth.case_fraction", s.case_fraction.to_string()),
            ("synth.case_atrophy_boost", s.case_atrophy_boost.to_string()),
            ("synth.noise_sigma", s.noise_sigma.to_string()),
            ("synth.sex_asymmetry", s.sex_asymmetry.to_string()),
            ("synth.sex_age_offset", s.sex_age_offset.to_string()),
            ("synth.size_jitter", s.size_jitter.to_string()),
            ("synth.val_fraction", s.val_fraction.to_string()),
            ("synth.test_fraction", s.test_fraction.to_string()),
            ("vit.patch_size", v.patch_size.to_string()),
            ("vit.embed_dim", v.embed_dim.to_string()),
            ("vit.depth", v.depth.to_string()),
            ("vit.heads", v.heads.to_string()),
            ("vit.mlp_ratio", v.mlp_ratio.to_string()),
            ("vit.bin_width", v.bin_width.to_string()),
            ("vit.slices", v.slices_per_volume.to_string()),
            ("vit.lr", v.lr.to_string()),
            ("vit.epochs", v.epochs.to_string()),
            ("vit.batch_size", v.batch_size.to_string()),
            ("regressor.conv_blocks", format_conv_blocks(&r.conv_blocks)),
            ("regressor.activation", r.activation.to_string()),
            ("regressor.fc1", r.fc_dims.0.to_string()),
            ("regressor.fc2", r.fc_dims.1.to_string()),
            ("regressor.dropout", r.dropout.to_string()),
            ("regressor.sex_fusion", r.sex_fusion.to_string()),
            ("regressor.residual", r.residual.to_string()),
            ("regressor.loss", r.loss.to_string()),
            ("regressor.lr", r.lr.to_string()),
            ("regressor.max_epochs", r.max_epochs.to_string()),
            ("regressor.patience", r.patience.to_string()),
            ("regressor.batch_size", r.batch_size.to_string()),
            ("interpret.bands", join(&i.band_edges, ",")),
            ("interpret.atlas", path(&i.atlas)),
            ("interpret.atlas_labels", path(&i.atlas_labels)),
            ("interpret.split", i.split.to_string()),
            ("interpret.max_subjects", i.max_subjects.to_string()),
            ("interpret.montage_panels", i.montage_panels.to_string()),
            ("eval.threshold_sd", self.eval.threshold_sd.to_string()),
            ("eval.split", self.eval.split.to_string()),
            ("eval.case_label", self.eval.case_label.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Config text that parses back to the same configuration.
    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_dotted_keys_agree() {
        let a = parse_config_text("[vit]\ndepth = 3\n# note\nregressor.loss = nll\n").unwrap();
        let b = parse_config_text("vit.depth = 3\nregressor.loss = nll").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn text_round_trip() {
        let mut entries = BTreeMap::new();
        entries.insert("vit.profile".to_string(), "toy".to_string());
        entries.insert("regressor.sex_fusion".to_string(), "off".to_string());
        entries.insert("seed".to_string(), "7".to_string());
        let cfg = RunConfig::from_entries(&entries).unwrap();
        assert_eq!(cfg.vit.seed, 7);
        assert!(!cfg.regressor.sex_fusion);
        let again = RunConfig::from_entries(&parse_config_text(&cfg.to_text()).unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        let mut entries = BTreeMap::new();
        entries.insert("vit.depht".to_string(), "3".to_string());
        assert_eq!(RunConfig::from_entries(&entries).unwrap_err().exit_code(), 3);
    }
}
