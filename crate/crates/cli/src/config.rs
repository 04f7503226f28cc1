//! Flat INI-style experiment configuration.
//!
//! ```text
//! # comment
//! [margin]
//! m = 0.20
//! train.epochs = 10
//! ```
//!
//! Keys are `section.key`; inside a `[section]` block the prefix may be
//! omitted. Unknown keys and malformed values are rejected with the line
//! number.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dualmargin::{ScoreKind, SyntheticSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
    #[default]
    Both,
}

impl ReportFormat {
    pub fn csv(self) -> bool {
        self != ReportFormat::Json
    }

    pub fn json(self) -> bool {
        self != ReportFormat::Csv
    }
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "both" => Ok(Self::Both),
            other => Err(format!("expected `csv`, `json` or `both`, got `{other}`")),
        }
    }
}

impl Display for ReportFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
            ReportFormat::Both => "both",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub target_tpr: f64,
    pub score: ScoreKind,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            target_tpr: 0.95,
            score: ScoreKind::MaxCosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    /// Random instances per scale in the gradient check.
    pub instances: usize,
    /// Random probes per proposition.
    pub probes: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            instances: 50,
            probes: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: SyntheticSpec,
    /// Train, validation and test fractions.
    pub split: (f64, f64, f64),
    pub train: TrainConfig<f64>,
    pub eval: EvalOptions,
    pub verify: VerifyOptions,
    pub out_dir: PathBuf,
    pub format: ReportFormat,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: SyntheticSpec::default(),
            split: (0.7, 0.15, 0.15),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            verify: VerifyOptions::default(),
            out_dir: PathBuf::from("out"),
            format: ReportFormat::Both,
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("data.num_classes", "number of classes"),
    ("data.dim", "feature dimension"),
    ("data.imbalance_ratio", "largest over smallest class count"),
    ("data.head_count", "samples in the largest class"),
    ("data.decay", "class-size decay: geometric | zipf"),
    ("data.cluster_spread", "per-coordinate noise around class means"),
    ("data.unknown_class_count", "classes held out as unknown"),
    ("data.min_separation_deg", "minimum angle between class means"),
    ("data.seed", "dataset seed"),
    ("split.train", "training fraction"),
    ("split.val", "validation fraction"),
    ("split.test", "test fraction"),
    ("train.epochs", "training epochs"),
    ("train.base_lr", "initial learning rate"),
    ("train.weight_decay", "decoupled weight decay"),
    ("train.lr_decay_epochs", "comma-separated epochs where the rate decays"),
    ("train.lr_decay_factor", "multiplicative rate decay"),
    ("train.seed", "training seed"),
    ("train.optimizer", "adaptive_decoupled | sgd"),
    (
        "train.head_threshold",
        "head classes have more training samples than this",
    ),
    (
        "train.tail_threshold",
        "tail classes have fewer training samples than this",
    ),
    ("train.gamma_lr_scale", "learning-rate multiplier for gamma"),
    ("train.gamma_weight_decay", "apply weight decay to gamma: true | false"),
    ("sampler.batch_size", "base batch size B"),
    ("sampler.oversample", "oversampled tail samples b"),
    ("sampler.oversample_prob", "probability p that a batch is oversampled"),
    ("sampler.perturb_prob", "probability an oversampled sample is perturbed"),
    ("sampler.perturb_strength", "perturbation strength"),
    ("sampler.selection", "norm_guided | random"),
    ("margin.s", "logit scale"),
    ("margin.m", "base margin"),
    ("margin.beta", "effective-number smoothing"),
    ("margin.epsilon", "log-prior offset"),
    ("margin.lambda", "margin regularizer weight"),
    ("margin.gamma", "initial power-scaling parameter"),
    ("margin.mode", "dual_margin | am_softmax | ce"),
    ("margin.scaled_sign", "literal | magnitude"),
    ("margin.power_scaling", "learn the margin exponent: true | false"),
    ("margin.prior_source", "effective | empirical"),
    ("encoder.hidden", "comma-separated hidden widths"),
    ("encoder.embed_dim", "embedding dimension"),
    ("encoder.activation", "tanh | relu"),
    ("eval.target_tpr", "open-set calibration TPR"),
    ("eval.score", "max_cosine | max_softmax"),
    ("verify.instances", "gradient-check instances per scale"),
    ("verify.probes", "probes per proposition check"),
    ("verify.seed", "verification seed"),
    ("output.dir", "output directory"),
    ("output.format", "csv | json | both"),
];

fn parse<V: FromStr>(value: &str) -> Result<V, String>
where
    V::Err: Display,
{
    value.parse::<V>().map_err(|e| format!("cannot parse `{value}`: {e}"))
}

fn parse_list(value: &str) -> Result<Vec<usize>, String> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse::<usize>(v.trim())).collect()
}

fn join<V: Display>(xs: &[V]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn enum_name<V: Serialize>(v: &V) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_owned))
        .unwrap_or_default()
}

impl ExperimentConfig {
    /// Sets one key. Errors carry no line number; [`parse_config`] adds it.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let d = &mut self.data;
        let t = &mut self.train;
        match key {
            "data.num_classes" => d.num_classes = parse(value)?,
            "data.dim" => d.dim = parse(value)?,
            "data.imbalance_ratio" => d.imbalance_ratio = parse(value)?,
            "data.head_count" => d.head_count = parse(value)?,
            "data.decay" => d.decay = parse(value)?,
            "data.cluster_spread" => d.cluster_spread = parse(value)?,
            "data.unknown_class_count" => d.unknown_class_count = parse(value)?,
            "data.min_separation_deg" => d.min_separation_deg = parse(value)?,
            "data.seed" => d.seed = parse(value)?,
            "split.train" => self.split.0 = parse(value)?,
            "split.val" => self.split.1 = parse(value)?,
            "split.test" => self.split.2 = parse(value)?,
            "train.epochs" => t.epochs = parse(value)?,
            "train.base_lr" => t.base_lr = parse(value)?,
            "train.weight_decay" => t.weight_decay = parse(value)?,
            "train.lr_decay_epochs" => t.lr_decay_epochs = parse_list(value)?,
            "train.lr_decay_factor" => t.lr_decay_factor = parse(value)?,
            "train.seed" => t.seed = parse(value)?,
            "train.optimizer" => t.optimizer = parse(value)?,
            "train.head_threshold" => t.head_threshold = parse(value)?,
            "train.tail_threshold" => t.tail_threshold = parse(value)?,
            "train.gamma_lr_scale" => t.gamma_lr_scale = parse(value)?,
            "train.gamma_weight_decay" => t.gamma_weight_decay = parse(value)?,
            "sampler.batch_size" => t.sampler.batch_size = parse(value)?,
            "sampler.oversample" => t.sampler.oversample = parse(value)?,
            "sampler.oversample_prob" => t.sampler.oversample_prob = parse(value)?,
            "sampler.perturb_prob" => t.sampler.perturb_prob = parse(value)?,
            "sampler.perturb_strength" => t.sampler.perturb_strength = parse(value)?,
            "sampler.selection" => t.sampler.selection = parse(value)?,
            "margin.s" => t.margin.s = parse(value)?,
            "margin.m" => t.margin.m = parse(value)?,
            "margin.beta" => t.margin.beta = parse(value)?,
            "margin.epsilon" => t.margin.epsilon = parse(value)?,
            "margin.lambda" => t.margin.lambda = parse(value)?,
            "margin.gamma" => t.margin.gamma = parse(value)?,
            "margin.mode" => t.margin.mode = parse(value)?,
            "margin.scaled_sign" => t.margin.scaled_sign = parse(value)?,
            "margin.power_scaling" => t.margin.power_scaling = parse(value)?,
            "margin.prior_source" => t.margin.prior_source = parse(value)?,
            "encoder.hidden" => t.hidden = parse_list(value)?,
            "encoder.embed_dim" => t.embed_dim = parse(value)?,
            "encoder.activation" => t.activation = parse(value)?,
            "eval.target_tpr" => self.eval.target_tpr = parse(value)?,
            "eval.score" => self.eval.score = parse(value)?,
            "verify.instances" => self.verify.instances = parse(value)?,
            "verify.probes" => self.verify.probes = parse(value)?,
            "verify.seed" => self.verify.seed = parse(value)?,
            "output.dir" => self.out_dir = PathBuf::from(value),
            "output.format" => self.format = parse(value)?,
            other => {
                let valid: Vec<&str> = KEYS.iter().map(|(k, _)| *k).collect();
                return Err(format!("unknown key `{other}`; valid keys: {}", valid.join(", ")));
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let d = &self.data;
        let t = &self.train;
        Some(match key {
            "data.num_classes" => d.num_classes.to_string(),
            "data.dim" => d.dim.to_string(),
            "data.imbalance_ratio" => d.imbalance_ratio.to_string(),
            "data.head_count" => d.head_count.to_string(),
            "data.decay" => enum_name(&d.decay),
            "data.cluster_spread" => d.cluster_spread.to_string(),
            "data.unknown_class_count" => d.unknown_class_count.to_string(),
            "data.min_separation_deg" => d.min_separation_deg.to_string(),
            "data.seed" => d.seed.to_string(),
            "split.train" => self.split.0.to_string(),
            "split.val" => self.split.1.to_string(),
            "split.test" => self.split.2.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.base_lr" => t.base_lr.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.lr_decay_epochs" => join(&t.lr_decay_epochs),
            "train.lr_decay_factor" => t.lr_decay_factor.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.optimizer" => enum_name(&t.optimizer),
            "train.head_threshold" => t.head_threshold.to_string(),
            "train.tail_threshold" => t.tail_threshold.to_string(),
            "train.gamma_lr_scale" => t.gamma_lr_scale.to_string(),
            "train.gamma_weight_decay" => t.gamma_weight_decay.to_string(),
            "sampler.batch_size" => t.sampler.batch_size.to_string(),
            "sampler.oversample" => t.sampler.oversample.to_string(),
            "sampler.oversample_prob" => t.sampler.oversample_prob.to_string(),
            "sampler.perturb_prob" => t.sampler.perturb_prob.to_string(),
            "sampler.perturb_strength" => t.sampler.perturb_strength.to_string(),
            "sampler.selection" => enum_name(&t.sampler.selection),
            "margin.s" => t.margin.s.to_string(),
            "margin.m" => t.margin.m.to_string(),
            "margin.beta" => t.margin.beta.to_string(),
            "margin.epsilon" => t.margin.epsilon.to_string(),
            "margin.lambda" => t.margin.lambda.to_string(),
            "margin.gamma" => t.margin.gamma.to_string(),
            "margin.mode" => t.margin.mode.name().to_string(),
            "margin.scaled_sign" => enum_name(&t.margin.scaled_sign),
            "margin.power_scaling" => t.margin.power_scaling.to_string(),
            "margin.prior_source" => enum_name(&t.margin.prior_source),
            "encoder.hidden" => join(&t.hidden),
            "encoder.embed_dim" => t.embed_dim.to_string(),
            "encoder.activation" => enum_name(&t.activation),
            "eval.target_tpr" => self.eval.target_tpr.to_string(),
            "eval.score" => enum_name(&self.eval.score),
            "verify.instances" => self.verify.instances.to_string(),
            "verify.probes" => self.verify.probes.to_string(),
            "verify.seed" => self.verify.seed.to_string(),
            "output.dir" => self.out_dir.display().to_string(),
            "output.format" => self.format.to_string(),
            _ => return None,
        })
    }

    /// Resolved configuration in the accepted syntax, one `[section]` per prefix.
    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, _) in KEYS {
            let (sec, name) = key.split_once('.').expect("keys are sectioned");
            if sec != section {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{sec}]\n"));
                section = sec;
            }
            out.push_str(&format!("{name} = {}\n", self.get(key).expect("listed key")));
        }
        out
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data
            .validate()
            .map_err(|e| CliError::config(None, e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| CliError::config(None, e.to_string()))?;
        let (a, b, c) = self.split;
        if !(a > 0.0 && b > 0.0 && c > 0.0 && a + b + c <= 1.0 + 1e-12) {
            return Err(CliError::config(
                None,
                format!("split fractions must be positive and sum to at most 1, got ({a}, {b}, {c})"),
            ));
        }
        if !(self.eval.target_tpr > 0.0 && self.eval.target_tpr <= 1.0) {
            return Err(CliError::config(None, "eval.target_tpr must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Drops a trailing ` # ...` or ` ; ...` comment; the marker must follow whitespace.
fn strip_inline_comment(line: &str) -> &str {
    let bytes = line.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if (b == b'#' || b == b';') && i > 0 && bytes[i - 1].is_ascii_whitespace() {
            return &line[..i];
        }
    }
    line
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::default();
    let mut section: Option<String> = None;
    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        let line = strip_inline_comment(raw).trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| CliError::config(Some(line_no), format!("malformed section header `{line}`")))?
                .trim();
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(CliError::config(
                    Some(line_no),
                    format!("malformed section header `{line}`"),
                ));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::config(Some(line_no), format!("expected `key = value`, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(CliError::config(Some(line_no), "empty key".into()));
        }
        let full = match (&section, key.contains('.')) {
            (Some(s), false) => format!("{s}.{key}"),
            _ => key.to_string(),
        };
        cfg.set(&full, value)
            .map_err(|msg| CliError::config(Some(line_no), msg))?;
    }
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(None, format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text)
}

/// Defaults table for `--help`.
pub fn keys_help() -> String {
    let defaults = ExperimentConfig::default();
    let mut out = String::from("Config keys (default):\n");
    for (key, doc) in KEYS {
        out.push_str(&format!(
            "  {key:<28} {doc} ({})\n",
            defaults.get(key).unwrap_or_default()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use dualmargin::LossMode;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config_str("").unwrap();
        let m = &cfg.train.margin;
        assert_eq!((m.s, m.m, m.lambda, m.beta), (32.0, 0.15, 5.0, 0.9));
        let s = &cfg.train.sampler;
        assert_eq!((s.batch_size, s.oversample, s.oversample_prob), (32, 8, 0.1));
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn single_override() {
        let cfg = parse_config_str("margin.m = 0.20\n").unwrap();
        let mut expected = ExperimentConfig::default();
        expected.train.margin.m = 0.20;
        assert_eq!(cfg, expected);
    }

    #[test]
    fn sections_and_comments() {
        let text = "# run\n[margin]\nmode = ce\n; note\n\n[train]\nepochs = 3\nlr_decay_epochs = 1,2\nsampler.batch_size = 16\n";
        let cfg = parse_config_str(text).unwrap();
        assert_eq!(cfg.train.margin.mode, LossMode::Ce);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr_decay_epochs, vec![1, 2]);
        assert_eq!(cfg.train.sampler.batch_size, 16);
    }

    #[test]
    fn typed_error_has_line_number() {
        let err = parse_config_str("[data]\ndim = 8\nmargin.m = banana\n").unwrap_err();
        match err {
            CliError::Config { line, message } => {
                assert_eq!(line, Some(3));
                assert!(message.contains("banana"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = parse_config_str("\nmargin.q = 1\n").unwrap_err();
        let text = err.to_string();
        assert!(text.contains("line 2"), "{text}");
        assert!(text.contains("margin.m"), "{text}");
    }

    #[test]
    fn inline_comments() {
        let cfg = parse_config_str("[margin]\nmode = ce   # baseline\nm = 0.2 ; wider\n").unwrap();
        assert_eq!(cfg.train.margin.mode, LossMode::Ce);
        assert_eq!(cfg.train.margin.m, 0.2);
        let cfg = parse_config_str("output.dir = runs/a#1\n").unwrap();
        assert_eq!(cfg.out_dir, PathBuf::from("runs/a#1"));
    }

    #[test]
    fn malformed_lines() {
        assert!(parse_config_str("just words\n").is_err());
        assert!(parse_config_str("[open\n").is_err());
        assert!(parse_config_str(" = 3\n").is_err());
    }

    #[test]
    fn ini_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.margin.m = 0.05;
        cfg.train.margin.lambda = 1e-4;
        cfg.train.hidden = vec![12];
        cfg.train.lr_decay_epochs = vec![];
        cfg.data.cluster_spread = 0.1 + 0.2;
        cfg.format = ReportFormat::Csv;
        let back = parse_config_str(&cfg.to_ini()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn every_key_is_settable_and_readable() {
        let mut cfg = ExperimentConfig::default();
        for (key, _) in KEYS {
            let v = cfg.get(key).unwrap();
            cfg.set(key, &v).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
        assert_eq!(cfg, ExperimentConfig::default());
    }
}
