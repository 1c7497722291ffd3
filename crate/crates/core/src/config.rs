//! Model, training and ablation configuration.
//!
//! Configuration files are flat `key = value` text with `#` comments. The same
//! keys are accepted as `--key value` overrides on the command line.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which view branches are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    #[default]
    Full,
    OnlyClose,
    OnlyRemote,
}

/// Direction(s) of the cross-view window exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExchangeMode {
    #[default]
    Bidirectional,
    /// Global semantics flow into the close branch only.
    #[serde(rename = "remote2close")]
    Remote2Close,
    /// Detail cues flow into the remote branch only.
    #[serde(rename = "close2remote")]
    Close2Remote,
    None,
}

/// What sits between backbone stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CvwinVariant {
    #[default]
    Cvwin,
    /// Pixel-word style fusion: vision modulated by a broadcast sentence vector.
    PwamStub,
    /// Plain concatenation of vision and a broadcast sentence vector.
    IimStub,
    /// Identity; the backbone runs without language or cross-view fusion.
    DirectSum,
    /// Gate replaced by direct summation of the aligned language feature.
    NoGate,
}

/// How many decoding steps to drop from the end of the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecoderTruncate {
    #[default]
    None,
    D4,
    D4d3,
    D4d3d2,
}

impl DecoderTruncate {
    /// Number of decoding steps (D2..D4) that still run.
    pub fn steps(self) -> usize {
        match self {
            DecoderTruncate::None => 3,
            DecoderTruncate::D4 => 2,
            DecoderTruncate::D4d3 => 1,
            DecoderTruncate::D4d3d2 => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    #[default]
    Cdad,
    /// Named for ablation tables only; building it fails.
    Arc,
}

/// Ablation axes. Each axis holds exactly one value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSwitches {
    pub view_mode: ViewMode,
    pub exchange_mode: ExchangeMode,
    pub cvwin_variant: CvwinVariant,
    pub decoder_truncate: DecoderTruncate,
    pub decoder: DecoderKind,
    pub cda_enabled: bool,
    pub skip_enabled: bool,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        Self {
            view_mode: ViewMode::Full,
            exchange_mode: ExchangeMode::Bidirectional,
            cvwin_variant: CvwinVariant::Cvwin,
            decoder_truncate: DecoderTruncate::None,
            decoder: DecoderKind::Cdad,
            cda_enabled: true,
            skip_enabled: true,
        }
    }
}

impl AblationSwitches {
    pub fn has_remote(&self) -> bool {
        self.view_mode != ViewMode::OnlyClose
    }

    pub fn has_close(&self) -> bool {
        self.view_mode != ViewMode::OnlyRemote
    }

    /// Close-to-remote exchange (detail into the remote branch) is active.
    pub fn close_to_remote(&self) -> bool {
        self.view_mode == ViewMode::Full
            && matches!(
                self.exchange_mode,
                ExchangeMode::Bidirectional | ExchangeMode::Close2Remote
            )
    }

    /// Remote-to-close exchange (global semantics into the close branch) is active.
    pub fn remote_to_close(&self) -> bool {
        self.view_mode == ViewMode::Full
            && matches!(
                self.exchange_mode,
                ExchangeMode::Bidirectional | ExchangeMode::Remote2Close
            )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side of the remote view and of every close-view patch.
    pub input_side: usize,
    /// Close-view grid factor.
    pub n_view: usize,
    pub stage_channels: [usize; 4],
    pub lang_dim: usize,
    pub lang_len: usize,
    pub vocab_size: usize,
    /// Window side for the cross-view exchange and the backbone, per stage.
    pub win_size: [usize; 4],
    pub slice_size: usize,
    pub dilation_density: usize,
    pub cmp_channels: usize,
    pub heads: usize,
    /// Transformer blocks per backbone stage.
    pub backbone_depth: usize,
    /// Transformer blocks in the text encoder.
    pub text_depth: usize,
    /// Hidden width multiplier of feed-forward blocks.
    pub mlp_ratio: usize,
    /// Use the exchanged window tokens directly as query/key/value (no projections).
    pub raw_qkv: bool,
    pub text_position_embedding: bool,
    pub switches: AblationSwitches,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_side: 384,
            n_view: 2,
            stage_channels: [32, 64, 128, 256],
            lang_dim: 64,
            lang_len: 20,
            vocab_size: crate::text::Vocab::builtin().len(),
            win_size: [4; 4],
            slice_size: 5,
            dilation_density: 3,
            cmp_channels: 128,
            heads: 1,
            backbone_depth: 2,
            text_depth: 2,
            mlp_ratio: 2,
            raw_qkv: true,
            text_position_embedding: true,
            switches: AblationSwitches::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// 32x32 input with narrow channels; used for full-model gradient checks.
    pub fn tiny() -> Self {
        Self {
            input_side: 32,
            stage_channels: [4, 6, 8, 10],
            lang_dim: 6,
            lang_len: 6,
            win_size: [2; 4],
            slice_size: 3,
            dilation_density: 2,
            cmp_channels: 5,
            backbone_depth: 1,
            text_depth: 1,
            ..Self::default()
        }
    }

    /// 64x64 input; the desk-scale training configuration.
    pub fn small() -> Self {
        Self {
            input_side: 64,
            stage_channels: [16, 32, 48, 64],
            lang_dim: 32,
            lang_len: 12,
            win_size: [4; 4],
            slice_size: 5,
            dilation_density: 3,
            cmp_channels: 32,
            ..Self::default()
        }
    }

    /// Side of stage `i` (1-based): H / 2^(i+1).
    pub fn stage_side(&self, stage: usize) -> usize {
        self.input_side >> (stage + 1)
    }

    /// Side of the supervision raster: N^view * H.
    pub fn full_side(&self) -> usize {
        self.n_view * self.input_side
    }

    /// Images per sample flowing through the backbone: one remote plus the patches.
    pub fn views_per_sample(&self) -> usize {
        1 + self.n_view * self.n_view
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.input_side == 0 || self.input_side % 32 != 0 {
            v.push("H mod 32 != 0".to_string());
        }
        if self.n_view < 1 {
            v.push("n_view must be >= 1".into());
        }
        if self.dilation_density < 1 {
            v.push("dilation_density (J) must be >= 1".into());
        }
        if self.slice_size < 1 {
            v.push("slice_size must be >= 1".into());
        }
        if self.win_size.iter().any(|&w| w < 1) {
            v.push("win_size must be >= 1 at every stage".into());
        }
        if self.cmp_channels < 1 {
            v.push("cmp_channels must be >= 1".into());
        }
        if self.stage_channels[0] == 0 || self.stage_channels.windows(2).any(|w| w[0] >= w[1]) {
            v.push("stage_channels must be positive and strictly increasing".into());
        }
        if self.lang_dim == 0 || self.lang_len == 0 {
            v.push("lang_dim and lang_len must be >= 1".into());
        }
        if self.vocab_size < 2 {
            v.push("vocab_size must cover PAD and UNK".into());
        }
        if self.backbone_depth == 0 || self.text_depth == 0 || self.mlp_ratio == 0 {
            v.push("backbone_depth, text_depth and mlp_ratio must be >= 1".into());
        }
        if self.heads == 0 {
            v.push("heads must be >= 1".into());
        } else if self.lang_dim % self.heads != 0
            || self.stage_channels.iter().any(|c| c % self.heads != 0)
        {
            v.push("heads must divide lang_dim and every stage channel width".into());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Total optimizer steps; derived from epochs when unset.
    pub steps: Option<usize>,
    pub dice_weight: f64,
    pub bce_weight: f64,
    pub threshold: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            weight_decay: 0.01,
            poly_power: 0.9,
            epochs: 40,
            batch_size: 8,
            steps: None,
            dice_weight: 0.9,
            bce_weight: 0.1,
            threshold: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lr > 0.0) {
            v.push("lr must be > 0".into());
        }
        if (self.dice_weight + self.bce_weight - 1.0).abs() > 1e-12 {
            v.push("weights do not sum to 1".into());
        }
        if self.batch_size == 0 {
            v.push("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.threshold) {
            v.push("threshold must lie in [0, 1)".into());
        }
        if self.weight_decay < 0.0 || self.poly_power < 0.0 {
            v.push("weight_decay and poly_power must be >= 0".into());
        }
        v
    }
}

/// Everything a run needs: model shape, optimizer recipe, seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Returns every invariant violation; empty iff the configuration is usable.
pub fn validate_config(cfg: &Config) -> Vec<String> {
    let mut v = cfg.model.validate();
    v.extend(cfg.train.validate());
    v
}

/// Every key accepted by [`Config::set`].
pub const KEYS: &[&str] = &[
    "input_side",
    "n_view",
    "stage_channels",
    "lang_dim",
    "lang_len",
    "vocab_size",
    "win_size",
    "slice_size",
    "dilation_density",
    "cmp_channels",
    "heads",
    "backbone_depth",
    "text_depth",
    "mlp_ratio",
    "raw_qkv",
    "text_position_embedding",
    "seed",
    "view_mode",
    "exchange_mode",
    "cvwin_variant",
    "decoder_truncate",
    "decoder",
    "cda_enabled",
    "skip_enabled",
    "lr",
    "weight_decay",
    "poly_power",
    "epochs",
    "batch_size",
    "steps",
    "dice_weight",
    "bce_weight",
    "threshold",
    "beta1",
    "beta2",
    "eps",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(vec![format!("bad value for {key}: {value:?}")]))
}

fn parse_list<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
    let items: Vec<usize> = value
        .split(',')
        .map(|s| parse(key, s.trim()))
        .collect::<Result<_>>()?;
    match items.len() {
        1 => Ok([items[0]; N]),
        n if n == N => Ok(std::array::from_fn(|i| items[i])),
        _ => Err(Error::Config(vec![format!(
            "{key} expects 1 or {N} comma-separated values"
        )])),
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(vec![format!(
            "bad boolean for {key}: {value:?}"
        )])),
    }
}

fn parse_enum<T: for<'de> Deserialize<'de>>(key: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| Error::Config(vec![format!("unknown value for {key}: {value:?}")]))
}

impl Config {
    /// The desk-scale training preset: the small model with a raised learning rate.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::small(),
            train: TrainConfig {
                lr: 1e-3,
                batch_size: 8,
                ..TrainConfig::default()
            },
        }
    }

    /// Named presets: `default`, `small`, `tiny`, `toy`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "small" => Ok(Self {
                model: ModelConfig::small(),
                ..Self::default()
            }),
            "tiny" => Ok(Self {
                model: ModelConfig::tiny(),
                ..Self::default()
            }),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(vec![format!("unknown preset: {other}")])),
        }
    }

    /// Apply a single `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let value = value.trim();
        match key.trim().replace('-', "_").as_str() {
            "input_side" => m.input_side = parse(key, value)?,
            "n_view" => m.n_view = parse(key, value)?,
            "stage_channels" => m.stage_channels = parse_list(key, value)?,
            "lang_dim" => m.lang_dim = parse(key, value)?,
            "lang_len" => m.lang_len = parse(key, value)?,
            "vocab_size" => m.vocab_size = parse(key, value)?,
            "win_size" => m.win_size = parse_list(key, value)?,
            "slice_size" => m.slice_size = parse(key, value)?,
            "dilation_density" => m.dilation_density = parse(key, value)?,
            "cmp_channels" => m.cmp_channels = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "backbone_depth" => m.backbone_depth = parse(key, value)?,
            "text_depth" => m.text_depth = parse(key, value)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "raw_qkv" => m.raw_qkv = parse_bool(key, value)?,
            "text_position_embedding" => m.text_position_embedding = parse_bool(key, value)?,
            "seed" => m.seed = parse(key, value)?,
            "view_mode" => m.switches.view_mode = parse_enum(key, value)?,
            "exchange_mode" => m.switches.exchange_mode = parse_enum(key, value)?,
            "cvwin_variant" => m.switches.cvwin_variant = parse_enum(key, value)?,
            "decoder_truncate" => m.switches.decoder_truncate = parse_enum(key, value)?,
            "decoder" => m.switches.decoder = parse_enum(key, value)?,
            "cda_enabled" => m.switches.cda_enabled = parse_bool(key, value)?,
            "skip_enabled" => m.switches.skip_enabled = parse_bool(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "poly_power" => t.poly_power = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "steps" => t.steps = Some(parse(key, value)?),
            "dice_weight" => t.dice_weight = parse(key, value)?,
            "bce_weight" => t.bce_weight = parse(key, value)?,
            "threshold" => t.threshold = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "eps" => t.eps = parse(key, value)?,
            other => return Err(Error::Config(vec![format!("unknown key: {other}")])),
        }
        Ok(())
    }

    /// Apply every setting of a `key = value` document.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(vec![format!("line {}: expected `key = value`", lineno + 1)])
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Config::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Settings as `key = value` lines; `apply_text` on the output reproduces `self`.
    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

fn enum_str<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => unreachable!("switch enums serialize to strings"),
    }
}

fn list(xs: &[usize]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.model;
        let t = &self.train;
        let s = &m.switches;
        writeln!(f, "input_side = {}", m.input_side)?;
        writeln!(f, "n_view = {}", m.n_view)?;
        writeln!(f, "stage_channels = {}", list(&m.stage_channels))?;
        writeln!(f, "lang_dim = {}", m.lang_dim)?;
        writeln!(f, "lang_len = {}", m.lang_len)?;
        writeln!(f, "vocab_size = {}", m.vocab_size)?;
        writeln!(f, "win_size = {}", list(&m.win_size))?;
        writeln!(f, "slice_size = {}", m.slice_size)?;
        writeln!(f, "dilation_density = {}", m.dilation_density)?;
        writeln!(f, "cmp_channels = {}", m.cmp_channels)?;
        writeln!(f, "heads = {}", m.heads)?;
        writeln!(f, "backbone_depth = {}", m.backbone_depth)?;
        writeln!(f, "text_depth = {}", m.text_depth)?;
        writeln!(f, "mlp_ratio = {}", m.mlp_ratio)?;
        writeln!(f, "raw_qkv = {}", m.raw_qkv)?;
        writeln!(f, "text_position_embedding = {}", m.text_position_embedding)?;
        writeln!(f, "seed = {}", m.seed)?;
        writeln!(f, "view_mode = {}", enum_str(&s.view_mode))?;
        writeln!(f, "exchange_mode = {}", enum_str(&s.exchange_mode))?;
        writeln!(f, "cvwin_variant = {}", enum_str(&s.cvwin_variant))?;
        writeln!(f, "decoder_truncate = {}", enum_str(&s.decoder_truncate))?;
        writeln!(f, "decoder = {}", enum_str(&s.decoder))?;
        writeln!(f, "cda_enabled = {}", s.cda_enabled)?;
        writeln!(f, "skip_enabled = {}", s.skip_enabled)?;
        // `{:?}` prints the shortest string that parses back to the same f64.
        writeln!(f, "lr = {:?}", t.lr)?;
        writeln!(f, "weight_decay = {:?}", t.weight_decay)?;
        writeln!(f, "poly_power = {:?}", t.poly_power)?;
        writeln!(f, "epochs = {}", t.epochs)?;
        writeln!(f, "batch_size = {}", t.batch_size)?;
        if let Some(steps) = t.steps {
            writeln!(f, "steps = {steps}")?;
        }
        writeln!(f, "dice_weight = {:?}", t.dice_weight)?;
        writeln!(f, "bce_weight = {:?}", t.bce_weight)?;
        writeln!(f, "threshold = {:?}", t.threshold)?;
        writeln!(f, "beta1 = {:?}", t.beta1)?;
        writeln!(f, "beta2 = {:?}", t.beta2)?;
        writeln!(f, "eps = {:?}", t.eps)
    }
}
