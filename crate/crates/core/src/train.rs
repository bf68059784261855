//! Adversarial training loop: AdamW, step-decay schedule, checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use serde::Serialize;

use crate::config::{OptimConfig, ScheduleConfig, TrainConfig};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::fusion::Generator;
use crate::losses::{
    discriminator_loss, display_rgb, generator_loss, LossTerms, PatchDiscriminator, RandomConvExtractor,
};
use crate::nn::scalar;

pub const CHECKPOINT_FORMAT: &str = "1";

/// Learning rate at `iter`: constant until the first milestone, then
/// multiplied by `gamma` at it and after every further `interval`.
pub fn lr_at(base: f64, schedule: &ScheduleConfig, iter: u64) -> f64 {
    if iter < schedule.first_milestone {
        return base;
    }
    let k = 1 + (iter - schedule.first_milestone) / schedule.interval.max(1);
    base * schedule.gamma.powi(k as i32)
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone)]
pub struct AdamW {
    cfg: OptimConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter; a missing gradient counts as
    /// zero, so decay still applies. `scale` multiplies the gradients first
    /// (for clipping).
    pub fn step(&mut self, params: &BTreeMap<String, Var>, grads: &GradStore, lr: f64, scale: f64) -> Result<()> {
        let OptimConfig {
            beta1,
            beta2,
            weight_decay,
            eps,
            ..
        } = self.cfg;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, var) in params {
            let g = match grads.get(var.as_tensor()) {
                Some(g) if scale == 1.0 => g.clone(),
                Some(g) => (g * scale)?,
                None => var.as_tensor().zeros_like()?,
            };
            let m = match self.m.get(name) {
                Some(m) => ((m * beta1)? + (&g * (1.0 - beta1))?)?,
                None => (&g * (1.0 - beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?,
                None => (g.sqr()? * (1.0 - beta2))?,
            };
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + eps)?)?;
            let theta = var.as_tensor();
            let next = ((theta - (theta * (lr * weight_decay))?)? - (update * lr)?)?;
            var.set(&next)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    fn export(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (name, m) in &self.m {
            out.push((format!("{prefix}.m.{name}"), m.clone()));
        }
        for (name, v) in &self.v {
            out.push((format!("{prefix}.v.{name}"), v.clone()));
        }
    }

    fn import(&mut self, prefix: &str, tensors: &HashMap<String, Tensor>, step: u64) {
        let m_prefix = format!("{prefix}.m.");
        let v_prefix = format!("{prefix}.v.");
        for (key, t) in tensors {
            if let Some(name) = key.strip_prefix(&m_prefix) {
                self.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = key.strip_prefix(&v_prefix) {
                self.v.insert(name.to_string(), t.clone());
            }
        }
        self.step = step;
    }
}

fn global_norm(params: &BTreeMap<String, Var>, grads: &GradStore) -> Result<f64> {
    let mut sum = 0.0;
    for var in params.values() {
        if let Some(g) = grads.get(var.as_tensor()) {
            sum += scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    Ok(sum.sqrt())
}

/// One logged training step.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepLog {
    pub iter: u64,
    pub lr: f64,
    pub pixel: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub colorfulness: f64,
    pub total: f64,
    pub discriminator: f64,
}

impl StepLog {
    fn new(iter: u64, lr: f64, terms: LossTerms, discriminator: f64) -> Self {
        Self {
            iter,
            lr,
            pixel: terms.pixel,
            perceptual: terms.perceptual,
            adversarial: terms.adversarial,
            colorfulness: terms.colorfulness,
            total: terms.total,
            discriminator,
        }
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    generator: Generator,
    discriminator: PatchDiscriminator,
    extractor: RandomConvExtractor,
    opt_g: AdamW,
    opt_d: AdamW,
    iter: u64,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let dtype = DType::F32;
        Ok(Self {
            generator: Generator::new(&cfg.model, dtype, cfg.seed)?,
            discriminator: PatchDiscriminator::new(&cfg.disc, dtype, cfg.seed.wrapping_add(1))?,
            extractor: RandomConvExtractor::new(cfg.extractor_seed, dtype)?,
            opt_g: AdamW::new(cfg.optim),
            opt_d: AdamW::new(cfg.optim),
            iter: 0,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &PatchDiscriminator {
        &self.discriminator
    }

    pub fn iteration(&self) -> u64 {
        self.iter
    }

    fn snapshot(vars: &BTreeMap<String, Var>) -> Result<Vec<Tensor>> {
        Ok(vars
            .values()
            .map(|v| v.as_tensor().copy())
            .collect::<candle_core::Result<_>>()?)
    }

    fn restore(vars: &BTreeMap<String, Var>, saved: &[Tensor]) -> Result<()> {
        for (v, t) in vars.values().zip(saved) {
            v.set(t)?;
        }
        Ok(())
    }

    fn clip_scale(&self, params: &BTreeMap<String, Var>, grads: &GradStore) -> Result<f64> {
        if self.cfg.grad_clip <= 0.0 {
            return Ok(1.0);
        }
        let norm = global_norm(params, grads)?;
        Ok(if norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        })
    }

    /// Discriminator update(s) followed by one generator update. On a
    /// non-finite loss nothing is modified.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepLog> {
        let lr = lr_at(self.cfg.optim.lr, &self.cfg.schedule, self.iter);
        let dtype = self.generator.dtype();
        let l = batch.x_l.to_dtype(dtype)?;
        let target_ab = batch.y_ab.to_dtype(dtype)?;
        let out = self.generator.forward(&l)?;

        let d_vars = self.discriminator.params().vars().clone();
        let d_saved = Self::snapshot(&d_vars)?;
        let opt_d_saved = self.opt_d.clone();
        let mut d_value = f64::NAN;
        if self.cfg.disc_steps > 0 {
            let real = display_rgb(&l, &target_ab)?.detach();
            let fake = display_rgb(&l, &out.ab.detach())?;
            for _ in 0..self.cfg.disc_steps {
                let d_loss =
                    discriminator_loss(&self.discriminator.forward(&real)?, &self.discriminator.forward(&fake)?)?;
                d_value = scalar(&d_loss)?;
                if !d_value.is_finite() {
                    Self::restore(&d_vars, &d_saved)?;
                    self.opt_d = opt_d_saved;
                    return Err(Error::NonFiniteLoss {
                        iter: self.iter,
                        detail: format!("discriminator loss {d_value}"),
                    });
                }
                let grads = d_loss.backward()?;
                let scale = self.clip_scale(&d_vars, &grads)?;
                self.opt_d.step(&d_vars, &grads, lr, scale)?;
            }
        }

        let loss = generator_loss(
            &self.cfg.loss,
            &self.extractor,
            &self.discriminator,
            &l,
            &out.ab,
            &target_ab,
        )?;
        if !loss.terms.is_finite() {
            Self::restore(&d_vars, &d_saved)?;
            self.opt_d = opt_d_saved;
            return Err(Error::NonFiniteLoss {
                iter: self.iter,
                detail: format!("{:?}", loss.terms),
            });
        }
        let g_vars = self.generator.params().vars();
        let grads = loss.total.backward()?;
        let scale = self.clip_scale(g_vars, &grads)?;
        self.opt_g.step(g_vars, &grads, lr, scale)?;

        let log = StepLog::new(self.iter, lr, loss.terms, d_value);
        self.iter += 1;
        Ok(log)
    }

    /// Trains until `self.iteration() == until`, drawing batches from the
    /// dataset by iteration number. `on_step` sees every step.
    pub fn run(
        &mut self,
        dataset: &Dataset,
        until: u64,
        mut on_step: impl FnMut(&Self, &StepLog) -> Result<()>,
    ) -> Result<()> {
        while self.iter < until {
            let batch = dataset.batch_at(self.iter, self.cfg.batch, DType::F32)?;
            let log = self.train_step(&batch)?;
            on_step(self, &log)?;
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (name, var) in self.generator.params().vars() {
            tensors.push((name.clone(), var.as_tensor().clone()));
        }
        for (name, var) in self.discriminator.params().vars() {
            tensors.push((name.clone(), var.as_tensor().clone()));
        }
        self.opt_g.export("opt.gen", &mut tensors);
        self.opt_d.export("opt.disc", &mut tensors);
        let metadata: HashMap<String, String> = [
            ("format_version".to_string(), CHECKPOINT_FORMAT.to_string()),
            ("iteration".to_string(), self.iter.to_string()),
            ("opt_gen_steps".to_string(), self.opt_g.steps().to_string()),
            ("opt_disc_steps".to_string(), self.opt_d.steps().to_string()),
            ("config".to_string(), self.cfg.to_kv_text()),
        ]
        .into_iter()
        .collect();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        safetensors::serialize_to_file(tensors, Some(metadata), path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Restores the generator, discriminator, optimizer state and iteration
    /// counter saved by [`Trainer::save_checkpoint`].
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::read(path)?;
        let mut trainer = Trainer::new(&ckpt.config)?;
        ckpt.assign(trainer.generator.params().vars())?;
        ckpt.assign(trainer.discriminator.params().vars())?;
        trainer
            .opt_g
            .import("opt.gen", &ckpt.tensors, ckpt.meta_u64("opt_gen_steps")?);
        trainer
            .opt_d
            .import("opt.disc", &ckpt.tensors, ckpt.meta_u64("opt_disc_steps")?);
        trainer.iter = ckpt.meta_u64("iteration")?;
        Ok(trainer)
    }
}

/// Parsed checkpoint contents.
pub struct Checkpoint {
    path: std::path::PathBuf,
    pub config: TrainConfig,
    pub metadata: HashMap<String, String>,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| fail(e.to_string()))?;
        let metadata = header.metadata().clone().unwrap_or_default();
        match metadata.get("format_version") {
            Some(v) if v == CHECKPOINT_FORMAT => {}
            other => return Err(fail(format!("unsupported format version {other:?}"))),
        }
        let config_text = metadata.get("config").ok_or_else(|| fail("missing config".into()))?;
        let config = TrainConfig::from_kv_text(config_text)?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu).map_err(|e| fail(e.to_string()))?;
        Ok(Self {
            path: path.to_path_buf(),
            config,
            metadata,
            tensors,
        })
    }

    fn meta_u64(&self, key: &str) -> Result<u64> {
        self.metadata
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint {
                path: self.path.clone(),
                reason: format!("missing or bad {key}"),
            })
    }

    fn assign(&self, vars: &BTreeMap<String, Var>) -> Result<()> {
        for (name, var) in vars {
            let t = self.tensors.get(name).ok_or_else(|| Error::Checkpoint {
                path: self.path.clone(),
                reason: format!("missing tensor {name}"),
            })?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint {
                    path: self.path.clone(),
                    reason: format!("tensor {name} has shape {:?}, expected {:?}", t.dims(), var.dims()),
                });
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    /// Builds the generator alone, for inference.
    pub fn generator(&self) -> Result<Generator> {
        let generator = Generator::new(&self.config.model, DType::F32, self.config.seed)?;
        self.assign(generator.params().vars())?;
        Ok(generator)
    }
}

pub fn load_generator(path: &Path) -> Result<Generator> {
    Checkpoint::read(path)?.generator()
}
