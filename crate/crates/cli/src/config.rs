//! Run configuration: one TOML file plus `--set key=value` overrides.
//!
//! Resolution order: built-in defaults (with the data preset's generator
//! settings), then the config file, then overrides. Keys that do not map to
//! a field are rejected. A few values follow others unless set explicitly:
//! `encoder.channels` follows the data preset, `diffusion.denoiser.token_dim`
//! follows `encoder.latent_dim` and `diffusion.denoiser.latent_dims` follows
//! `data.synth.latent_dims`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use eeg2img::clddm::{DenoiserConfig, DiffusionTrainConfig, ScheduleConfig};
use eeg2img::data::SynthConfig;
use eeg2img::evalsuite::fingerprint;
use eeg2img::stencoder::EncoderConfig;
use eeg2img::triplet::ContrastiveConfig;
use eeg2img::windows::{stride_for_tokens, WindowSpec};
use eeg2img::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// `thoughtviz-like` or `cvpr40-like`; supplies the generator defaults.
    pub preset: String,
    /// Load a `BGN1` file instead of generating. Split tags stored in the file
    /// are kept.
    pub path: Option<PathBuf>,
    /// Train, validation, test fractions.
    pub split: Vec<f64>,
    /// Per-channel z-normalization of every recording.
    pub normalize: bool,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            preset: "thoughtviz-like".into(),
            path: None,
            split: vec![0.8, 0.1, 0.1],
            normalize: true,
            synth: SynthConfig::thoughtviz_like(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    /// Training-window stride; half the window length when unset. The window
    /// length itself is `encoder.window_len`.
    pub stride: Option<usize>,
    /// Windows per recording. When set, the stride is the largest giving
    /// exactly this many, whatever the window length; `stride` must be unset.
    pub per_recording: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub knn_k: usize,
    pub head_hidden: usize,
    pub head_epochs: usize,
    pub head_lr: f64,
    pub head_batch: usize,
    /// Write per-window test embeddings to `embeddings.csv`.
    pub export_embeddings: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            knn_k: eeg2img::evalsuite::DEFAULT_KNN_K,
            head_hidden: 64,
            head_epochs: 30,
            head_lr: 1e-3,
            head_batch: 32,
            export_embeddings: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZeroShotConfig {
    /// Classes excluded from training; every other class is seen.
    pub held_out: Vec<u32>,
}

impl Default for ZeroShotConfig {
    fn default() -> Self {
        Self { held_out: vec![7, 8, 9] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: DiffusionTrainConfig,
    /// Conditioning tokens per recording; the token stride is the largest one
    /// giving exactly this many windows.
    pub tokens: usize,
    /// Respaced ancestral sampling steps.
    pub sample_steps: usize,
    /// Negative control: pair each latent with another recording's tokens.
    pub shuffle_conditioning: bool,
    pub oracle_hidden: usize,
    pub oracle_epochs: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            train: DiffusionTrainConfig::default(),
            tokens: 7,
            sample_steps: 50,
            shuffle_conditioning: false,
            oracle_hidden: 32,
            oracle_epochs: 30,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Harness {
    /// Encoder training, then k-means, KNN and classification on the test split.
    #[default]
    Representation,
    /// Encoder and denoiser training, then sampling metrics on the test split.
    Generation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateConfig {
    pub harness: Harness,
    /// Parallel cells.
    pub workers: usize,
    /// Cartesian product over dotted keys.
    pub grid: BTreeMap<String, Vec<Value>>,
    /// Explicit cells, each a table of dotted keys; run after the grid cells.
    pub cells: Vec<BTreeMap<String, Value>>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            harness: Harness::Representation,
            workers: 2,
            grid: BTreeMap::new(),
            cells: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub training: ContrastiveConfig,
    pub window: WindowConfig,
    pub eval: EvalConfig,
    pub zero_shot: ZeroShotConfig,
    pub diffusion: DiffusionConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            training: ContrastiveConfig::default(),
            window: WindowConfig::default(),
            eval: EvalConfig::default(),
            zero_shot: ZeroShotConfig::default(),
            diffusion: DiffusionConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Parses `key=value`; the value is read as a TOML literal, or as a bare
/// string when it is not one.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (key, raw) = s.split_once('=').ok_or_else(|| config_err(format!("override {s:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(config_err(format!("bad override key {key:?}")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((key.to_string(), value))
}

/// Sets a dotted key, creating intermediate tables.
pub fn set_path(root: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("{key}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn get_path<'a>(root: &'a Table, key: &str) -> Option<&'a Value> {
    let mut parts = key.split('.');
    let mut cur = root.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut Table, top: &Table) {
    for (k, v) in top {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Dotted keys present in `user` but absent from `resolved`.
fn unknown_keys(user: &Table, resolved: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (resolved.get(k), v) {
            (None, _) => out.push(path),
            // Free-form maps: their keys are checked when the cell is resolved.
            (Some(_), _) if path == "ablate.grid" || path == "ablate.cells" => {}
            (Some(Value::Table(r)), Value::Table(u)) => unknown_keys(u, r, &path, out),
            _ => {}
        }
    }
}

/// Parses a config file; no file gives an empty table.
pub fn read_table(path: Option<&Path>) -> Result<Table> {
    let Some(p) = path else { return Ok(Table::new()) };
    let text = std::fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
    toml::from_str::<Table>(&text).map_err(|e| config_err(format!("{}: {}", p.display(), e.message())))
}

fn to_table<T: Serialize>(v: &T) -> Result<Table> {
    Table::try_from(v).map_err(|e| config_err(e.to_string()))
}

impl RunConfig {
    /// Defaults, then `user` (file contents), then `overrides`.
    pub fn resolve(user: &Table, overrides: &[(String, Value)]) -> Result<Self> {
        let mut layered = user.clone();
        for (k, v) in overrides {
            set_path(&mut layered, k, v.clone())?;
        }
        let mut base = RunConfig::default();
        if let Some(p) = get_path(&layered, "data.preset") {
            let name = p.as_str().ok_or_else(|| config_err("data.preset must be a string"))?;
            base.data.preset = name.to_string();
            base.data.synth = SynthConfig::preset(name)?;
            base.encoder.channels = base.data.synth.channels;
        }
        let mut merged = to_table(&base)?;
        merge(&mut merged, &layered);
        let mut cfg: RunConfig = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.message().to_string()))?;
        let explicit = |k: &str| get_path(&layered, k).is_some();
        if !explicit("diffusion.denoiser.token_dim") {
            cfg.diffusion.denoiser.token_dim = cfg.encoder.latent_dim;
        }
        if !explicit("diffusion.denoiser.latent_dims") {
            cfg.diffusion.denoiser.latent_dims = cfg.data.synth.latent_dims;
        }
        let mut unknown = Vec::new();
        unknown_keys(&layered, &to_table(&cfg)?, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(config_err(format!("unknown config keys: {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        Self::resolve(&read_table(path)?, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of the resolved config, recorded with every metric.
    pub fn fingerprint(&self) -> String {
        fingerprint(&self.to_toml())
    }

    /// Training and evaluation windows for recordings of `recording_len`.
    pub fn window_spec(&self, recording_len: usize) -> Result<WindowSpec> {
        let l = self.encoder.window_len;
        match (self.window.stride, self.window.per_recording) {
            (Some(_), Some(_)) => Err(config_err("set at most one of window.stride and window.per_recording")),
            (_, Some(n)) => WindowSpec::new(l, stride_for_tokens(recording_len, l, n)?),
            (s, None) => WindowSpec::new(l, s.unwrap_or((l / 2).max(1))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.training.validate()?;
        if self.data.path.is_none() {
            self.data.synth.validate()?;
            if self.data.synth.channels != self.encoder.channels {
                return Err(config_err(format!(
                    "encoder.channels {} does not match data.synth.channels {}",
                    self.encoder.channels, self.data.synth.channels
                )));
            }
            if self.encoder.window_len > self.data.synth.length {
                return Err(config_err(format!(
                    "encoder.window_len {} exceeds recording length {}",
                    self.encoder.window_len, self.data.synth.length
                )));
            }
        }
        let split = &self.data.split;
        if split.is_empty() || split.len() > 3 || split.iter().any(|f| !(0.0..=1.0).contains(f)) || (split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(config_err(format!("data.split {split:?} must hold 1 to 3 fractions summing to 1")));
        }
        // A loaded dataset's length is known only at run time.
        if self.data.path.is_none() {
            self.window_spec(self.data.synth.length)?;
        }
        if self.eval.knn_k == 0 || self.eval.head_hidden == 0 || self.eval.head_batch == 0 || !(self.eval.head_lr > 0.0) {
            return Err(config_err("eval.knn_k, head_hidden, head_batch and head_lr must be positive"));
        }
        let d = &self.diffusion;
        d.denoiser.validate()?;
        if d.denoiser.token_dim != self.encoder.latent_dim {
            return Err(config_err(format!(
                "diffusion.denoiser.token_dim {} does not match encoder.latent_dim {}",
                d.denoiser.token_dim, self.encoder.latent_dim
            )));
        }
        if d.tokens == 0 || d.sample_steps == 0 || d.sample_steps > d.schedule.steps {
            return Err(config_err(format!(
                "diffusion.tokens must be positive and sample_steps in 1..={}",
                d.schedule.steps
            )));
        }
        if d.train.batch == 0 || !(d.train.lr > 0.0) || d.oracle_hidden == 0 {
            return Err(config_err("diffusion.train.batch, train.lr and oracle_hidden must be positive"));
        }
        if self.ablate.workers == 0 {
            return Err(config_err("ablate.workers must be at least 1"));
        }
        Ok(())
    }
}
