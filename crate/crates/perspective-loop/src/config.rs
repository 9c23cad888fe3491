//! Configuration schema, validation and shipped presets.
//!
//! Config files are UTF-8 JSON with a flat top level; unknown keys are
//! rejected so typos fail loudly instead of silently falling back to
//! defaults. `load_config` fills every omitted key with its default and
//! checks all cross-field invariants.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gating architecture variants, in the fixed ablation-table column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Single 3x3 branch, no gating.
    Baseline,
    /// B branches sharing one kernel, averaged uniformly.
    TiedAvg,
    /// B tied branches gated by quantized ground-truth depth.
    GtGateTied,
    /// B untied branches gated by quantized ground-truth depth.
    GtGateUntied,
    /// B untied branches gated by a softmax attention head trained without
    /// depth supervision.
    AttentionUntied,
    /// B untied branches gated by the predicted depth-bin distribution.
    PredGateUntied,
}

/// The six ablation variants in the order they are tabulated.
pub const ABLATION_ORDER: [Variant; 6] = [
    Variant::Baseline,
    Variant::TiedAvg,
    Variant::GtGateTied,
    Variant::GtGateUntied,
    Variant::AttentionUntied,
    Variant::PredGateUntied,
];

impl Variant {
    /// All B branches alias a single kernel parameter.
    pub fn tied_branches(&self) -> bool {
        matches!(self, Variant::TiedAvg | Variant::GtGateTied)
    }

    /// Depth regression and depth-bin classification heads exist.
    pub fn has_depth_heads(&self) -> bool {
        matches!(
            self,
            Variant::GtGateTied | Variant::GtGateUntied | Variant::PredGateUntied
        )
    }

    /// A softmax gate head trained without any depth loss.
    pub fn has_attention_head(&self) -> bool {
        matches!(self, Variant::AttentionUntied)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::TiedAvg => "tied_avg",
            Variant::GtGateTied => "gt_gate_tied",
            Variant::GtGateUntied => "gt_gate_untied",
            Variant::AttentionUntied => "attention_untied",
            Variant::PredGateUntied => "pred_gate_untied",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Multi-task objective weights (segmentation, depth regression, depth bins).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "one")]
    pub lambda_s: f64,
    #[serde(default = "one")]
    pub lambda_r: f64,
    #[serde(default = "one")]
    pub lambda_c: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_s: 1.0,
            lambda_r: 1.0,
            lambda_c: 1.0,
        }
    }
}

impl LossWeights {
    /// Segmentation-only weights, used by the final fine-tune stage.
    pub fn seg_only() -> Self {
        LossWeights {
            lambda_s: 1.0,
            lambda_r: 0.0,
            lambda_c: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("lambda_s", self.lambda_s),
            ("lambda_r", self.lambda_r),
            ("lambda_c", self.lambda_c),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{k}: must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Architecture selector and sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// One dilation rate per depth bin, ordered near-to-far.
    pub dilation_rates: Vec<usize>,
    /// Number of quantized depth scales B.
    pub num_bins: usize,
    /// Number of semantic classes C.
    pub num_classes: usize,
    /// Recurrent unroll depth L; 0 means feed-forward only.
    pub unroll_depth: usize,
    pub backbone_channels: usize,
    pub recurrent_channels: usize,
    /// Ratio of input to feature resolution; fixed at 8.
    pub output_stride: usize,
}

impl ModelConfig {
    /// Defaults for everything except the variant.
    pub fn with_variant(variant: Variant) -> Self {
        ModelConfig {
            variant,
            dilation_rates: vec![1, 2, 4, 8, 16],
            num_bins: 5,
            num_classes: 4,
            unroll_depth: 0,
            backbone_channels: 32,
            recurrent_channels: 64,
            output_stride: 8,
        }
    }

    /// Branches actually instantiated: the baseline keeps a single branch.
    pub fn branch_count(&self) -> usize {
        if self.variant == Variant::Baseline {
            1
        } else {
            self.num_bins
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_bins < 2 {
            return Err(Error::Config(format!(
                "num_bins: must be >= 2, got {}",
                self.num_bins
            )));
        }
        if self.dilation_rates.len() != self.num_bins {
            return Err(Error::Config(format!(
                "dilation_rates: length {} does not match num_bins {}",
                self.dilation_rates.len(),
                self.num_bins
            )));
        }
        if self.dilation_rates.iter().any(|&r| r == 0) {
            return Err(Error::Config("dilation_rates: rates must be >= 1".into()));
        }
        if self.num_classes < 2 || self.num_classes > 254 {
            return Err(Error::Config(format!(
                "num_classes: must lie in 2..=254, got {}",
                self.num_classes
            )));
        }
        if self.output_stride != 8 {
            return Err(Error::Config(format!(
                "output_stride: fixed at 8, got {}",
                self.output_stride
            )));
        }
        if self.backbone_channels == 0 || self.recurrent_channels == 0 {
            return Err(Error::Config(
                "backbone_channels/recurrent_channels: must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Hash of the canonical serialized form; checkpoints embed it so a
    /// checkpoint can only be loaded under the architecture that wrote it.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::with_variant(Variant::Baseline)
    }
}

/// One stage of the stage-wise training procedure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    #[serde(default)]
    pub loss_weights: LossWeights,
    /// Unroll depth used during this stage; must not decrease across stages.
    #[serde(default)]
    pub unroll_depth: usize,
    pub max_iter: usize,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
}

fn default_base_lr() -> f64 {
    2.5e-4
}

/// Optimizer hyperparameters and the ordered stage list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub stages: Vec<StageConfig>,
    /// Poly learning-rate exponent; fixed at 0.9.
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Checkpoint every this many iterations (and at stage end).
    pub checkpoint_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            stages: vec![StageConfig {
                name: "joint".into(),
                loss_weights: LossWeights::default(),
                unroll_depth: 0,
                max_iter: 1000,
                base_lr: default_base_lr(),
            }],
            power: 0.9,
            momentum: 0.9,
            weight_decay: 5e-4,
            checkpoint_every: 500,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("stages: must not be empty".into()));
        }
        if self.power != 0.9 {
            return Err(Error::Config(format!(
                "power: fixed at 0.9, got {}",
                self.power
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum: must lie in [0,1), got {}",
                self.momentum
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay: must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every: must be >= 1".into()));
        }
        let mut prev = 0usize;
        for (i, st) in self.stages.iter().enumerate() {
            st.loss_weights.validate()?;
            if st.max_iter == 0 {
                return Err(Error::Config(format!(
                    "stages[{i}].max_iter: must be >= 1"
                )));
            }
            if !st.base_lr.is_finite() || st.base_lr <= 0.0 {
                return Err(Error::Config(format!(
                    "stages[{i}].base_lr: must be > 0, got {}",
                    st.base_lr
                )));
            }
            if i > 0 && st.unroll_depth < prev {
                return Err(Error::Config(format!(
                    "stages[{i}].unroll_depth: {} decreases from {} (must be nondecreasing)",
                    st.unroll_depth, prev
                )));
            }
            if st.unroll_depth > model.unroll_depth {
                return Err(Error::Config(format!(
                    "stages[{i}].unroll_depth: {} exceeds model unroll_depth {}",
                    st.unroll_depth, model.unroll_depth
                )));
            }
            prev = st.unroll_depth;
        }
        Ok(())
    }
}

/// Training-time augmentation strengths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Crop target (H, W); both divisible by 8. Padding fills with
    /// ignore/invalid when the source is smaller.
    pub crop: [usize; 2],
    /// Random scale factor range, within [0.5, 2].
    pub scale_range: [f64; 2],
    /// Maximum in-plane rotation magnitude in degrees, within [0, 10].
    pub rotate_deg: f64,
    /// Left-right flip probability.
    pub flip_prob: f64,
    /// Per-channel multiplicative jitter: gain drawn from [1-g, 1+g].
    pub jitter_gain: f64,
    /// Per-channel additive jitter: shift drawn from [-s, s].
    pub jitter_shift: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop: [64, 256],
            scale_range: [0.5, 2.0],
            rotate_deg: 10.0,
            flip_prob: 0.5,
            jitter_gain: 0.1,
            jitter_shift: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop[0] == 0 || self.crop[1] == 0 || self.crop[0] % 8 != 0 || self.crop[1] % 8 != 0
        {
            return Err(Error::Config(format!(
                "crop: dimensions must be positive and divisible by 8, got {:?}",
                self.crop
            )));
        }
        let [lo, hi] = self.scale_range;
        if !(0.5..=2.0).contains(&lo) || !(0.5..=2.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!(
                "scale_range: must satisfy 0.5 <= lo <= hi <= 2, got {:?}",
                self.scale_range
            )));
        }
        if !(0.0..=10.0).contains(&self.rotate_deg) {
            return Err(Error::Config(format!(
                "rotate_deg: must lie in [0, 10], got {}",
                self.rotate_deg
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!(
                "flip_prob: must lie in [0, 1], got {}",
                self.flip_prob
            )));
        }
        if !(0.0..1.0).contains(&self.jitter_gain) || !(0.0..1.0).contains(&self.jitter_shift) {
            return Err(Error::Config(
                "jitter_gain/jitter_shift: must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Raw file schema: flat keys, everything optional except `variant`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    variant: Variant,
    dilation_rates: Option<Vec<usize>>,
    num_bins: Option<usize>,
    num_classes: Option<usize>,
    unroll_depth: Option<usize>,
    backbone_channels: Option<usize>,
    recurrent_channels: Option<usize>,
    output_stride: Option<usize>,
    lambda_s: Option<f64>,
    lambda_r: Option<f64>,
    lambda_c: Option<f64>,
    stages: Option<Vec<StageConfig>>,
    power: Option<f64>,
    momentum: Option<f64>,
    weight_decay: Option<f64>,
    checkpoint_every: Option<usize>,
    augment: Option<AugmentConfig>,
}

/// Fully validated configuration: architecture, schedule, default objective
/// weights and augmentation strengths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadedConfig {
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    /// Objective weights used where no stage overrides them.
    pub loss_weights: LossWeights,
    pub augment: AugmentConfig,
}

impl LoadedConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate(&self.model)?;
        self.loss_weights.validate()?;
        self.augment.validate()
    }
}

fn build(raw: RawConfig) -> Result<LoadedConfig> {
    let defaults = ModelConfig::with_variant(raw.variant);
    let model = ModelConfig {
        variant: raw.variant,
        dilation_rates: raw.dilation_rates.unwrap_or(defaults.dilation_rates),
        num_bins: raw.num_bins.unwrap_or(defaults.num_bins),
        num_classes: raw.num_classes.unwrap_or(defaults.num_classes),
        unroll_depth: raw.unroll_depth.unwrap_or(defaults.unroll_depth),
        backbone_channels: raw.backbone_channels.unwrap_or(defaults.backbone_channels),
        recurrent_channels: raw
            .recurrent_channels
            .unwrap_or(defaults.recurrent_channels),
        output_stride: raw.output_stride.unwrap_or(defaults.output_stride),
    };
    let loss_weights = LossWeights {
        lambda_s: raw.lambda_s.unwrap_or(1.0),
        lambda_r: raw.lambda_r.unwrap_or(1.0),
        lambda_c: raw.lambda_c.unwrap_or(1.0),
    };
    let sched_defaults = TrainSchedule::default();
    let schedule = TrainSchedule {
        stages: raw.stages.unwrap_or_else(|| {
            vec![StageConfig {
                name: "joint".into(),
                loss_weights,
                unroll_depth: model.unroll_depth,
                max_iter: sched_defaults.stages[0].max_iter,
                base_lr: sched_defaults.stages[0].base_lr,
            }]
        }),
        power: raw.power.unwrap_or(sched_defaults.power),
        momentum: raw.momentum.unwrap_or(sched_defaults.momentum),
        weight_decay: raw.weight_decay.unwrap_or(sched_defaults.weight_decay),
        checkpoint_every: raw
            .checkpoint_every
            .unwrap_or(sched_defaults.checkpoint_every),
    };
    let cfg = LoadedConfig {
        model,
        schedule,
        loss_weights,
        augment: raw.augment.unwrap_or_default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Parses and validates a configuration from JSON text.
pub fn parse_config(text: &str) -> Result<LoadedConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            Error::Config(format!("{}", e.into_inner()))
        } else {
            Error::Config(format!("key `{path}`: {}", e.into_inner()))
        }
    })?;
    build(raw)
}

/// Loads a configuration from a file path or a shipped preset name.
pub fn load_config(path: impl AsRef<Path>) -> Result<LoadedConfig> {
    let path = path.as_ref();
    let text = if path.exists() {
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?
    } else if let Some(name) = path.to_str().and_then(|s| preset_json(s)) {
        name.to_string()
    } else {
        return Err(Error::Config(format!(
            "{}: no such file and not a preset (presets: {})",
            path.display(),
            PRESET_NAMES.join(", ")
        )));
    };
    parse_config(&text)
}

/// Expands a base configuration into the six ablation variants, in the fixed
/// table column order. Only the variant changes; sizes are shared.
pub fn ablation_grid(base: &ModelConfig) -> Vec<ModelConfig> {
    ABLATION_ORDER
        .iter()
        .map(|&variant| ModelConfig {
            variant,
            ..base.clone()
        })
        .collect()
}

pub const PRESET_NAMES: [&str; 3] = ["smoke", "paper4stage", "ablate"];

/// JSON text of a shipped preset, if `name` matches one.
pub fn preset_json(name: &str) -> Option<&'static str> {
    match name {
        "smoke" => Some(include_str!("../configs/smoke.json")),
        "paper4stage" => Some(include_str!("../configs/paper4stage.json")),
        "ablate" => Some(include_str!("../configs/ablate.json")),
        _ => None,
    }
}
