//! Run configuration.
//!
//! A config file is a JSON object whose keys may be nested or dotted
//! (`"schedule.steps": 100` and `{"schedule": {"steps": 100}}` are the same
//! setting). Keys are merged onto the defaults one leaf at a time and any key
//! that does not name a default leaf is rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::metrics::MetricsConfig;
use crate::outpaint::{LatentCodec, OutpaintConfig};
use crate::schedule::{NoiseSchedule, SamplerConfig, ScheduleConfig};
use crate::synth::{DataConfig, Split};
use crate::trainer::TrainConfig;
use crate::conditioning::{heatmap_sigma, FINGER_CHANNELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditioningConfig {
    /// Heatmap standard deviation in crop pixels; `null` scales 2 px per 64.
    pub heatmap_sigma: Option<f64>,
    /// Latent downsampling factor shared by both stages; 1 is the identity codec.
    pub codec_factor: usize,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self {
            heatmap_sigma: None,
            codec_factor: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    /// Number of frames to generate; 0 takes the whole split.
    pub count: usize,
    pub split: Split,
    /// Frames per network batch.
    pub batch_size: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            count: 0,
            split: Split::Test,
            batch_size: 8,
        }
    }
}

/// Where the canvas hands of the blending ablation come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HandSource {
    /// Stage-I samples, as in generation.
    #[default]
    Generated,
    /// Ground-truth hand pixels of the test frame.
    Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub count: usize,
    pub bootstrap: usize,
    pub confidence: f64,
    pub hand_source: HandSource,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            count: 200,
            bootstrap: 2000,
            confidence: 0.9,
            hand_source: HandSource::Generated,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every component seed is mixed with it.
    pub seed: u64,
    /// Run directory.
    pub output_dir: PathBuf,
    /// Dataset root holding `hands/` and `bodies/`.
    pub data_dir: PathBuf,
    pub hand_data: DataConfig,
    pub body_data: DataConfig,
    pub schedule: ScheduleConfig,
    pub hand_model: DenoiserConfig,
    pub outpaint_model: DenoiserConfig,
    pub train_hand: TrainConfig,
    pub train_outpaint: TrainConfig,
    pub hand_sampler: SamplerConfig,
    pub outpaint: OutpaintConfig,
    pub conditioning: ConditioningConfig,
    pub metrics: MetricsConfig,
    pub generate: GenerateConfig,
    pub ablation: AblationConfig,
    pub exec: ExecMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = |n| DataConfig {
            n,
            hand_size: 32,
            body_width: 32,
            body_height: 48,
            ..DataConfig::default()
        };
        let model = DenoiserConfig {
            base_channels: 16,
            emb_dim: 64,
            ..DenoiserConfig::default()
        };
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data_dir: PathBuf::from("data"),
            hand_data: data(2000),
            body_data: data(1000),
            schedule: ScheduleConfig {
                beta_end: 0.1,
                ..ScheduleConfig::default()
            },
            outpaint_model: DenoiserConfig {
                cond_channels: 4,
                mask_head: false,
                ..model.clone()
            },
            hand_model: model,
            train_hand: TrainConfig::default(),
            train_outpaint: TrainConfig::default(),
            hand_sampler: SamplerConfig {
                clip_x0: Some(1.0),
                ..SamplerConfig::default()
            },
            outpaint: OutpaintConfig::default(),
            conditioning: ConditioningConfig::default(),
            metrics: MetricsConfig::default(),
            generate: GenerateConfig::default(),
            ablation: AblationConfig::default(),
            exec: ExecMode::default(),
        }
    }
}

/// Component tags for seed mixing. Part of the reproducibility contract.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum SeedTag {
    HandData = 1,
    BodyData = 2,
    TrainHand = 3,
    TrainOutpaint = 4,
    HandSampler = 5,
    OutpaintSampler = 6,
    Metrics = 7,
    Ablation = 8,
    Subset = 9,
}

/// Derive a child seed: the first 8 bytes of sha256 over the three words.
pub fn mix_seed(parent: u64, tag: u64, local: u64) -> u64 {
    let mut h = Sha256::new();
    for w in [parent, tag, local] {
        h.update(w.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("defaults keep objects and leaves apart");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    /// Every leaf setting under its dotted key.
    pub fn to_flat(&self) -> Result<BTreeMap<String, Value>> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self)?, &mut out);
        Ok(out)
    }

    /// Apply `overrides` (dotted or nested keys) on top of `self`.
    pub fn merged(&self, overrides: &Value) -> Result<Self> {
        let Value::Object(_) = overrides else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let mut flat = self.to_flat()?;
        let mut given = BTreeMap::new();
        flatten("", overrides, &mut given);
        for (k, v) in given {
            if k.is_empty() {
                continue;
            }
            match flat.get_mut(&k) {
                Some(slot) => *slot = v,
                None => return Err(Error::Config(format!("unknown config key `{k}`"))),
            }
        }
        let cfg: RunConfig = serde_json::from_value(unflatten(&flat)).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `key=value` assignments. Values are parsed as JSON and fall back
    /// to plain strings.
    pub fn with_sets(&self, sets: &[String]) -> Result<Self> {
        let mut m = Map::new();
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{s}`")))?;
            let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            m.insert(k.trim().to_string(), v);
        }
        self.merged(&Value::Object(m))
    }

    /// Defaults, then the file at `path` if any, then `sets`.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            cfg = cfg.merged(&v)?;
        }
        cfg.with_sets(sets)
    }

    pub fn validate(&self) -> Result<()> {
        let schedule = self.schedule.build()?;
        self.hand_sampler.timesteps(&schedule)?;
        self.outpaint.sampler.timesteps(&schedule)?;
        self.hand_data.validate()?;
        self.body_data.validate()?;
        self.train_hand.validate()?;
        self.train_outpaint.validate()?;
        self.metrics.validate()?;
        self.hand_model.validate()?;
        self.outpaint_model.validate()?;
        let codec = self.codec()?;
        for (name, size) in [
            ("hand_data.hand_size", self.hand_data.hand_size),
            ("body_data.body_width", self.body_data.body_width),
            ("body_data.body_height", self.body_data.body_height),
        ] {
            if size % codec.factor != 0 {
                return Err(Error::Config(format!("{name} must be divisible by codec_factor {}", codec.factor)));
            }
        }
        if self.hand_model.cond_channels != FINGER_CHANNELS + 1 || !self.hand_model.mask_head {
            return Err(Error::Config(format!(
                "hand_model needs cond_channels = {} and a mask head",
                FINGER_CHANNELS + 1
            )));
        }
        if self.hand_model.mask_upsample != codec.factor {
            return Err(Error::Config("hand_model.mask_upsample must equal conditioning.codec_factor".into()));
        }
        if self.outpaint_model.cond_channels != 4 {
            return Err(Error::Config("outpaint_model needs cond_channels = 4".into()));
        }
        if let Some(s) = self.conditioning.heatmap_sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config("conditioning.heatmap_sigma must be positive".into()));
            }
        }
        if self.generate.batch_size == 0 {
            return Err(Error::Config("generate.batch_size must be positive".into()));
        }
        if self.ablation.count == 0 || self.ablation.bootstrap == 0 || !(0.0..1.0).contains(&self.ablation.confidence) {
            return Err(Error::Config("ablation needs count, bootstrap > 0 and confidence in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn codec(&self) -> Result<LatentCodec> {
        LatentCodec::new(self.conditioning.codec_factor)
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }

    pub fn sigma(&self) -> f64 {
        self.conditioning.heatmap_sigma.unwrap_or_else(|| heatmap_sigma(self.hand_data.hand_size))
    }

    /// Seed of a component, mixed from the master seed and its local seed.
    pub fn seed_for(&self, tag: SeedTag) -> u64 {
        let local = match tag {
            SeedTag::HandData => self.hand_data.seed,
            SeedTag::BodyData => self.body_data.seed,
            SeedTag::TrainHand => self.train_hand.seed,
            SeedTag::TrainOutpaint => self.train_outpaint.seed,
            SeedTag::HandSampler => self.hand_sampler.seed,
            SeedTag::OutpaintSampler => self.outpaint.sampler.seed,
            SeedTag::Metrics => self.metrics.feature_seed,
            SeedTag::Ablation | SeedTag::Subset => 0,
        };
        mix_seed(self.seed, tag as u64, local)
    }

    /// Canonical JSON: sorted keys, no whitespace.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&unflatten(&self.to_flat()?))?)
    }

    /// sha256 of the canonical JSON with `output_dir` left out, so moving a
    /// run does not change its identity.
    pub fn hash(&self) -> Result<String> {
        let mut flat = self.to_flat()?;
        flat.remove("output_dir");
        let text = serde_json::to_string(&unflatten(&flat))?;
        Ok(Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
    }
}
