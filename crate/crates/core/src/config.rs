//! Architecture and training configuration, plus the flat `key = value`
//! text format used by config files, `--set` overrides and checkpoint
//! snapshots.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::DatasetSpec;
use crate::error::{Error, Result};

/// Feature scale consumed by a color decoder block, as an input stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scale {
    Sixteenth,
    Eighth,
    Quarter,
}

impl Scale {
    pub fn stride(self) -> usize {
        match self {
            Scale::Sixteenth => 16,
            Scale::Eighth => 8,
            Scale::Quarter => 4,
        }
    }

    pub fn from_stride(stride: usize) -> Result<Self> {
        match stride {
            16 => Ok(Scale::Sixteenth),
            8 => Ok(Scale::Eighth),
            4 => Ok(Scale::Quarter),
            other => Err(Error::Config(format!("unsupported feature scale 1/{other}"))),
        }
    }
}

/// Sublayer ordering inside a color decoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockOrder {
    CrossSelf,
    SelfCross,
    CrossCross,
    SelfSelf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attention {
    Cross,
    Self_,
}

impl BlockOrder {
    pub const ALL: [BlockOrder; 4] = [
        BlockOrder::SelfSelf,
        BlockOrder::CrossCross,
        BlockOrder::SelfCross,
        BlockOrder::CrossSelf,
    ];

    pub fn sublayers(self) -> [Attention; 2] {
        match self {
            BlockOrder::CrossSelf => [Attention::Cross, Attention::Self_],
            BlockOrder::SelfCross => [Attention::Self_, Attention::Cross],
            BlockOrder::CrossCross => [Attention::Cross, Attention::Cross],
            BlockOrder::SelfSelf => [Attention::Self_, Attention::Self_],
        }
    }
}

impl fmt::Display for BlockOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockOrder::CrossSelf => "cross_self",
            BlockOrder::SelfCross => "self_cross",
            BlockOrder::CrossCross => "cross_cross",
            BlockOrder::SelfSelf => "self_self",
        })
    }
}

impl FromStr for BlockOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_self" => Ok(BlockOrder::CrossSelf),
            "self_cross" => Ok(BlockOrder::SelfCross),
            "cross_cross" => Ok(BlockOrder::CrossCross),
            "self_self" => Ok(BlockOrder::SelfSelf),
            _ => Err(Error::Config(format!("unknown block order {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub stage_widths: [usize; 4],
    pub blocks_per_stage: [usize; 4],
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.contains(&0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelDecoderConfig {
    /// Output widths of the four upsampling stages; the last one is the
    /// channel count of the image embedding.
    pub stage_out_widths: [usize; 4],
    /// Channel layer norm ahead of each shortcut convolution.
    pub shortcut_norm: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorDecoderConfig {
    pub queries: usize,
    pub embed_dim: usize,
    pub repeats: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub scale_schedule: Vec<Scale>,
    pub block_order: BlockOrder,
    /// Divide attention logits by sqrt(head dim).
    pub cross_attention_scaled: bool,
    /// Use one head for cross-attention instead of `heads`.
    pub cross_attention_single_head: bool,
}

impl ColorDecoderConfig {
    pub fn num_blocks(&self) -> usize {
        self.repeats * self.scale_schedule.len()
    }

    /// The scale consumed by each block, in execution order.
    pub fn block_scales(&self) -> Vec<Scale> {
        (0..self.repeats)
            .flat_map(|_| self.scale_schedule.iter().copied())
            .collect()
    }

    pub fn cross_heads(&self) -> usize {
        if self.cross_attention_single_head {
            1
        } else {
            self.heads
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.queries == 0 || self.embed_dim == 0 || self.repeats == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("color decoder sizes must be positive".into()));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.scale_schedule.is_empty() {
            return Err(Error::Config("empty scale schedule".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub pixel_decoder: PixelDecoderConfig,
    pub color_decoder: ColorDecoderConfig,
    /// Without the color decoder the head maps the image embedding straight
    /// to AB.
    pub use_color_decoder: bool,
    /// Concatenate the luminance input to the fused map before the final
    /// 1x1 convolution.
    pub fusion_concat_input: bool,
}

impl ModelConfig {
    /// Small enough to train on a workstation CPU in minutes.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig {
                stage_widths: [8, 16, 32, 64],
                blocks_per_stage: [1, 1, 1, 1],
            },
            pixel_decoder: PixelDecoderConfig {
                stage_out_widths: [64, 64, 32, 32],
                shortcut_norm: true,
            },
            color_decoder: ColorDecoderConfig {
                queries: 16,
                embed_dim: 32,
                repeats: 1,
                heads: 4,
                ffn_dim: 64,
                scale_schedule: vec![Scale::Sixteenth, Scale::Eighth, Scale::Quarter],
                block_order: BlockOrder::CrossSelf,
                cross_attention_scaled: true,
                cross_attention_single_head: false,
            },
            use_color_decoder: true,
            fusion_concat_input: true,
        }
    }

    /// The full-size layer plan: tiny-backbone stage widths, 512/512/256/256
    /// decoder, 100 queries of width 256, nine blocks.
    pub fn reference() -> Self {
        Self {
            encoder: EncoderConfig {
                stage_widths: [96, 192, 384, 768],
                blocks_per_stage: [3, 3, 9, 3],
            },
            pixel_decoder: PixelDecoderConfig {
                stage_out_widths: [512, 512, 256, 256],
                shortcut_norm: true,
            },
            color_decoder: ColorDecoderConfig {
                queries: 100,
                embed_dim: 256,
                repeats: 3,
                heads: 8,
                ffn_dim: 2048,
                scale_schedule: vec![Scale::Sixteenth, Scale::Eighth, Scale::Quarter],
                block_order: BlockOrder::CrossSelf,
                cross_attention_scaled: true,
                cross_attention_single_head: false,
            },
            use_color_decoder: true,
            fusion_concat_input: true,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.color_decoder.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.color_decoder.validate()?;
        let pd = &self.pixel_decoder.stage_out_widths;
        if pd.contains(&0) {
            return Err(Error::Config("pixel decoder widths must be positive".into()));
        }
        // Inputs to the three x2 shuffles.
        let shuffled = [self.encoder.stage_widths[3], pd[0], pd[1]];
        if let Some(w) = shuffled.iter().find(|w| *w % 4 != 0) {
            return Err(Error::Config(format!(
                "width {w} feeds a x2 pixel shuffle and must be divisible by 4"
            )));
        }
        if pd[3] != self.color_decoder.embed_dim {
            return Err(Error::Config(format!(
                "image embedding width {} must equal color embedding width {}",
                pd[3], self.color_decoder.embed_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorConfig {
    pub width: usize,
    /// Number of stride-2 layers.
    pub layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { width: 8, layers: 2 }
    }
}

/// Balancing weights of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub pixel: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub colorfulness: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pixel: 0.1,
            perceptual: 5.0,
            adversarial: 1.0,
            colorfulness: 0.5,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            pixel: 0.0,
            perceptual: 0.0,
            adversarial: 0.0,
            colorfulness: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.pixel, self.perceptual, self.adversarial, self.colorfulness];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.01,
            eps: 1e-8,
        }
    }
}

/// Step decay: multiply by `gamma` at `first_milestone`, then every
/// `interval` iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub first_milestone: u64,
    pub interval: u64,
    pub gamma: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            first_milestone: 80_000,
            interval: 40_000,
            gamma: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub disc: DiscriminatorConfig,
    pub loss: LossWeights,
    /// Seed of the fixed random perceptual feature extractor.
    pub extractor_seed: u64,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub data: DatasetSpec,
    pub iters: u64,
    pub batch: usize,
    pub seed: u64,
    /// Discriminator updates per generator update; 0 freezes it.
    pub disc_steps: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub log_every: u64,
    /// 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            disc: DiscriminatorConfig::default(),
            loss: LossWeights::default(),
            extractor_seed: 1234,
            optim: OptimConfig::default(),
            schedule: ScheduleConfig::default(),
            data: DatasetSpec::default(),
            iters: 2000,
            batch: 8,
            seed: 0,
            disc_steps: 1,
            grad_clip: 0.0,
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

/// Every key accepted by [`TrainConfig::set`], in serialisation order.
pub const KEYS: &[&str] = &[
    "model.encoder_widths",
    "model.encoder_blocks",
    "model.decoder_widths",
    "model.shortcut_norm",
    "model.queries",
    "model.embed_dim",
    "model.repeats",
    "model.heads",
    "model.ffn_dim",
    "model.scales",
    "model.block_order",
    "model.cross_attention_scaled",
    "model.cross_attention_single_head",
    "model.color_decoder",
    "model.fusion_concat_input",
    "disc.width",
    "disc.layers",
    "loss.pixel",
    "loss.perceptual",
    "loss.adversarial",
    "loss.colorfulness",
    "loss.extractor_seed",
    "optim.lr",
    "optim.beta1",
    "optim.beta2",
    "optim.weight_decay",
    "optim.eps",
    "schedule.first_milestone",
    "schedule.interval",
    "schedule.gamma",
    "train.iters",
    "train.batch",
    "train.seed",
    "train.disc_steps",
    "train.grad_clip",
    "train.log_every",
    "train.checkpoint_every",
    "data.root",
    "data.manifest",
    "data.resolution",
    "data.augment",
    "data.augment_strength",
    "data.procedural_count",
    "data.seed",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_four(key: &str, value: &str) -> Result<[usize; 4]> {
    let parts: Vec<usize> = value.split(',').map(|p| parse(key, p)).collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("{key} needs exactly four integers, got {value:?}")))
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn opt_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let cd = &mut self.model.color_decoder;
        match key {
            "model.encoder_widths" => self.model.encoder.stage_widths = parse_four(key, value)?,
            "model.encoder_blocks" => self.model.encoder.blocks_per_stage = parse_four(key, value)?,
            "model.decoder_widths" => self.model.pixel_decoder.stage_out_widths = parse_four(key, value)?,
            "model.shortcut_norm" => self.model.pixel_decoder.shortcut_norm = parse(key, value)?,
            "model.queries" => cd.queries = parse(key, value)?,
            "model.embed_dim" => cd.embed_dim = parse(key, value)?,
            "model.repeats" => cd.repeats = parse(key, value)?,
            "model.heads" => cd.heads = parse(key, value)?,
            "model.ffn_dim" => cd.ffn_dim = parse(key, value)?,
            "model.scales" => {
                cd.scale_schedule = value
                    .split(',')
                    .map(|s| parse::<usize>(key, s).and_then(Scale::from_stride))
                    .collect::<Result<_>>()?
            }
            "model.block_order" => cd.block_order = value.trim().parse()?,
            "model.cross_attention_scaled" => cd.cross_attention_scaled = parse(key, value)?,
            "model.cross_attention_single_head" => cd.cross_attention_single_head = parse(key, value)?,
            "model.color_decoder" => self.model.use_color_decoder = parse(key, value)?,
            "model.fusion_concat_input" => self.model.fusion_concat_input = parse(key, value)?,
            "disc.width" => self.disc.width = parse(key, value)?,
            "disc.layers" => self.disc.layers = parse(key, value)?,
            "loss.pixel" => self.loss.pixel = parse(key, value)?,
            "loss.perceptual" => self.loss.perceptual = parse(key, value)?,
            "loss.adversarial" => self.loss.adversarial = parse(key, value)?,
            "loss.colorfulness" => self.loss.colorfulness = parse(key, value)?,
            "loss.extractor_seed" => self.extractor_seed = parse(key, value)?,
            "optim.lr" => self.optim.lr = parse(key, value)?,
            "optim.beta1" => self.optim.beta1 = parse(key, value)?,
            "optim.beta2" => self.optim.beta2 = parse(key, value)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, value)?,
            "optim.eps" => self.optim.eps = parse(key, value)?,
            "schedule.first_milestone" => self.schedule.first_milestone = parse(key, value)?,
            "schedule.interval" => self.schedule.interval = parse(key, value)?,
            "schedule.gamma" => self.schedule.gamma = parse(key, value)?,
            "train.iters" => self.iters = parse(key, value)?,
            "train.batch" => self.batch = parse(key, value)?,
            "train.seed" => self.seed = parse(key, value)?,
            "train.disc_steps" => self.disc_steps = parse(key, value)?,
            "train.grad_clip" => self.grad_clip = parse(key, value)?,
            "train.log_every" => self.log_every = parse(key, value)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "data.root" => self.data.root = opt_path(value),
            "data.manifest" => self.data.manifest = opt_path(value),
            "data.resolution" => self.data.resolution = parse(key, value)?,
            "data.augment" => self.data.augment = parse(key, value)?,
            "data.augment_strength" => self.data.augment_strength = parse(key, value)?,
            "data.procedural_count" => self.data.procedural_count = parse(key, value)?,
            "data.seed" => self.data.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let cd = &self.model.color_decoder;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Ok(match key {
            "model.encoder_widths" => join(&self.model.encoder.stage_widths),
            "model.encoder_blocks" => join(&self.model.encoder.blocks_per_stage),
            "model.decoder_widths" => join(&self.model.pixel_decoder.stage_out_widths),
            "model.shortcut_norm" => self.model.pixel_decoder.shortcut_norm.to_string(),
            "model.queries" => cd.queries.to_string(),
            "model.embed_dim" => cd.embed_dim.to_string(),
            "model.repeats" => cd.repeats.to_string(),
            "model.heads" => cd.heads.to_string(),
            "model.ffn_dim" => cd.ffn_dim.to_string(),
            "model.scales" => join(&cd.scale_schedule.iter().map(|s| s.stride()).collect::<Vec<_>>()),
            "model.block_order" => cd.block_order.to_string(),
            "model.cross_attention_scaled" => cd.cross_attention_scaled.to_string(),
            "model.cross_attention_single_head" => cd.cross_attention_single_head.to_string(),
            "model.color_decoder" => self.model.use_color_decoder.to_string(),
            "model.fusion_concat_input" => self.model.fusion_concat_input.to_string(),
            "disc.width" => self.disc.width.to_string(),
            "disc.layers" => self.disc.layers.to_string(),
            "loss.pixel" => self.loss.pixel.to_string(),
            "loss.perceptual" => self.loss.perceptual.to_string(),
            "loss.adversarial" => self.loss.adversarial.to_string(),
            "loss.colorfulness" => self.loss.colorfulness.to_string(),
            "loss.extractor_seed" => self.extractor_seed.to_string(),
            "optim.lr" => self.optim.lr.to_string(),
            "optim.beta1" => self.optim.beta1.to_string(),
            "optim.beta2" => self.optim.beta2.to_string(),
            "optim.weight_decay" => self.optim.weight_decay.to_string(),
            "optim.eps" => self.optim.eps.to_string(),
            "schedule.first_milestone" => self.schedule.first_milestone.to_string(),
            "schedule.interval" => self.schedule.interval.to_string(),
            "schedule.gamma" => self.schedule.gamma.to_string(),
            "train.iters" => self.iters.to_string(),
            "train.batch" => self.batch.to_string(),
            "train.seed" => self.seed.to_string(),
            "train.disc_steps" => self.disc_steps.to_string(),
            "train.grad_clip" => self.grad_clip.to_string(),
            "train.log_every" => self.log_every.to_string(),
            "train.checkpoint_every" => self.checkpoint_every.to_string(),
            "data.root" => path(&self.data.root),
            "data.manifest" => path(&self.data.manifest),
            "data.resolution" => self.data.resolution.to_string(),
            "data.augment" => self.data.augment.to_string(),
            "data.augment_strength" => self.data.augment_strength.to_string(),
            "data.procedural_count" => self.data.procedural_count.to_string(),
            "data.seed" => self.data.seed.to_string(),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        })
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn to_kv_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.data.validate()?;
        if self.optim.lr <= 0.0 || !self.optim.lr.is_finite() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.schedule.interval == 0 {
            return Err(Error::Config("schedule interval must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.disc.width == 0 || self.disc.layers == 0 {
            return Err(Error::Config("discriminator sizes must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.set("model.scales", "4,4,4").unwrap();
        cfg.set("model.block_order", "self_cross").unwrap();
        cfg.set("optim.lr", "0.00037").unwrap();
        cfg.set("data.root", "/tmp/images").unwrap();
        let text = cfg.to_kv_text();
        let back = TrainConfig::from_kv_text(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(text.lines().count(), KEYS.len());
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.apply_override("model.nope=3").is_err());
        assert!(cfg.apply_override("model.queries").is_err());
        assert!(TrainConfig::from_kv_text("train.iters = many").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = TrainConfig::from_kv_text("# hi\n\ntrain.iters = 7\n  model.queries=5 \n").unwrap();
        assert_eq!(cfg.iters, 7);
        assert_eq!(cfg.model.color_decoder.queries, 5);
    }

    #[test]
    fn defaults() {
        let cfg = TrainConfig::default();
        assert_eq!(
            cfg.loss,
            LossWeights {
                pixel: 0.1,
                perceptual: 5.0,
                adversarial: 1.0,
                colorfulness: 0.5
            }
        );
        assert_eq!(cfg.optim.lr, 1e-4);
        assert_eq!(
            (cfg.optim.beta1, cfg.optim.beta2, cfg.optim.weight_decay),
            (0.9, 0.99, 0.01)
        );
        cfg.validate().unwrap();
        ModelConfig::reference().validate().unwrap();
        assert_eq!(ModelConfig::reference().color_decoder.num_blocks(), 9);
    }

    #[test]
    fn validation_catches_bad_shapes() {
        let mut m = ModelConfig::desk();
        m.color_decoder.heads = 5;
        assert!(m.validate().is_err());
        let mut m = ModelConfig::desk();
        m.encoder.stage_widths[3] = 30;
        assert!(m.validate().is_err());
        let mut m = ModelConfig::desk();
        m.pixel_decoder.stage_out_widths[3] = 16;
        assert!(m.validate().is_err());
    }

    #[test]
    fn block_schedule_round_robin() {
        let mut cd = ModelConfig::desk().color_decoder;
        cd.repeats = 3;
        use Scale::*;
        assert_eq!(
            cd.block_scales(),
            vec![Sixteenth, Eighth, Quarter, Sixteenth, Eighth, Quarter, Sixteenth, Eighth, Quarter]
        );
    }
}
