//! Runnable ablation sweeps. Every variant of a sweep trains from the same
//! seed for the same number of iterations and is scored on the same images.

use std::fmt;
use std::str::FromStr;

use candle_core::DType;
use serde::Serialize;

use crate::colorspace::RgbImage;
use crate::config::{BlockOrder, Scale, TrainConfig};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::fusion::Generator;
use crate::losses::display_rgb;
use crate::metrics::{colorfulness_score, delta_cf};
use crate::train::{StepLog, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    ColorDecoderOnOff,
    ColorfulnessOnOff,
    Scales,
    DecoderOrder,
    QueryCount,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::ColorDecoderOnOff,
        Ablation::ColorfulnessOnOff,
        Ablation::Scales,
        Ablation::DecoderOrder,
        Ablation::QueryCount,
    ];

    pub const QUERY_COUNTS: [usize; 5] = [20, 50, 100, 200, 500];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::ColorDecoderOnOff => "color_decoder_on_off",
            Ablation::ColorfulnessOnOff => "colorfulness_on_off",
            Ablation::Scales => "scales",
            Ablation::DecoderOrder => "decoder_order",
            Ablation::QueryCount => "query_count",
        }
    }

    /// The configurations of this sweep, each with a short label.
    pub fn variants(self, base: &TrainConfig) -> Result<Vec<(String, TrainConfig)>> {
        let mut out = Vec::new();
        let mut push = |label: String, edit: &dyn Fn(&mut TrainConfig)| {
            let mut cfg = base.clone();
            edit(&mut cfg);
            out.push((label, cfg));
        };
        match self {
            Ablation::ColorDecoderOnOff => {
                push("color_decoder=off".into(), &|c| c.model.use_color_decoder = false);
                push("color_decoder=on".into(), &|c| c.model.use_color_decoder = true);
            }
            Ablation::ColorfulnessOnOff => {
                let on = if base.loss.colorfulness > 0.0 {
                    base.loss.colorfulness
                } else {
                    0.5
                };
                push("colorfulness=0".into(), &|c| c.loss.colorfulness = 0.0);
                push(format!("colorfulness={on}"), &|c| c.loss.colorfulness = on);
            }
            Ablation::Scales => {
                for scale in [Scale::Sixteenth, Scale::Eighth, Scale::Quarter] {
                    push(format!("single_scale=1/{}", scale.stride()), &|c| {
                        c.model.color_decoder.scale_schedule = vec![scale; 3]
                    });
                }
                push("multi_scale".into(), &|c| {
                    c.model.color_decoder.scale_schedule = vec![Scale::Sixteenth, Scale::Eighth, Scale::Quarter]
                });
            }
            Ablation::DecoderOrder => {
                for order in [
                    BlockOrder::SelfSelf,
                    BlockOrder::CrossCross,
                    BlockOrder::SelfCross,
                    BlockOrder::CrossSelf,
                ] {
                    push(format!("order={order}"), &|c| c.model.color_decoder.block_order = order);
                }
            }
            Ablation::QueryCount => {
                for k in Self::QUERY_COUNTS {
                    push(format!("queries={k}"), &|c| c.model.color_decoder.queries = k);
                }
            }
        }
        for (label, cfg) in &out {
            cfg.validate()
                .map_err(|e| Error::Config(format!("ablation variant {label}: {e}")))?;
        }
        Ok(out)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|a| a.name()).collect();
            Error::Input(format!("unknown ablation {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantReport {
    pub label: String,
    pub iterations: u64,
    /// Mean colorfulness of the colorized evaluation images.
    pub output_cf: f64,
    /// Mean colorfulness of the evaluation ground truth.
    pub ground_truth_cf: f64,
    pub delta_cf: f64,
    pub final_total: f64,
    pub finite: bool,
    /// Set when training stopped early.
    pub error: Option<String>,
    pub trace: Vec<StepLog>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub ablation: String,
    pub variants: Vec<VariantReport>,
}

/// Colorizes `images` from their luminance in batches and returns the
/// per-image colorfulness of the outputs.
pub fn output_colorfulness(generator: &Generator, images: &[RgbImage]) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        let batch = Batch::from_images(chunk, (0..chunk.len()).collect(), generator.dtype())?;
        let ab = generator.forward(&batch.x_l)?.ab;
        let rgb = display_rgb(&batch.x_l, &ab)?.to_dtype(DType::F32)?;
        for i in 0..chunk.len() {
            let planes = rgb.get(i)?;
            let (_, h, w) = planes.dims3()?;
            let px = planes.permute((1, 2, 0))?.flatten_all()?.to_vec1::<f32>()?;
            scores.push(colorfulness_score(&RgbImage::new(h, w, px)?)?);
        }
    }
    Ok(scores)
}

/// Trains one variant for `cfg.iters` iterations and scores it on
/// `eval`. A non-finite loss ends the run and is recorded, not returned.
pub fn run_variant(label: &str, cfg: &TrainConfig, dataset: &Dataset, eval: &[RgbImage]) -> Result<VariantReport> {
    let mut trainer = Trainer::new(cfg)?;
    let mut trace = Vec::new();
    let outcome = trainer.run(dataset, cfg.iters, |_, log| {
        if log.iter % cfg.log_every.max(1) == 0 {
            log::info!("{label} iter {} total {:.4}", log.iter, log.total);
        }
        trace.push(*log);
        Ok(())
    });
    let error = match outcome {
        Ok(()) => None,
        Err(e @ Error::NonFiniteLoss { .. }) => Some(e.to_string()),
        Err(e) => return Err(e),
    };
    let output = output_colorfulness(trainer.generator(), eval)?;
    let truth = eval.iter().map(colorfulness_score).collect::<Result<Vec<_>>>()?;
    let finite = error.is_none() && trace.iter().all(|s| s.total.is_finite());
    Ok(VariantReport {
        label: label.to_string(),
        iterations: trainer.iteration(),
        output_cf: output.iter().sum::<f64>() / output.len() as f64,
        ground_truth_cf: truth.iter().sum::<f64>() / truth.len() as f64,
        delta_cf: delta_cf(&output, &truth)?,
        final_total: trace.last().map_or(f64::NAN, |s| s.total),
        finite,
        error,
        trace,
    })
}

/// Runs every variant of `ablation` on the dataset described by `base`,
/// scoring on its first `eval_count` images.
pub fn run_ablation(ablation: Ablation, base: &TrainConfig, eval_count: usize) -> Result<AblationReport> {
    let variants = ablation.variants(base)?;
    let dataset = Dataset::build(&base.data)?;
    let eval = &dataset.images()[..eval_count.clamp(1, dataset.len())];
    let mut reports = Vec::with_capacity(variants.len());
    for (label, cfg) in &variants {
        log::info!("ablation {ablation}: variant {label}");
        reports.push(run_variant(label, cfg, &dataset, eval)?);
    }
    Ok(AblationReport {
        ablation: ablation.name().to_string(),
        variants: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_sizes() {
        let base = TrainConfig::default();
        let sizes: Vec<usize> = Ablation::ALL.iter().map(|a| a.variants(&base).unwrap().len()).collect();
        assert_eq!(sizes, vec![2, 2, 4, 4, 5]);
    }

    #[test]
    fn names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("bogus".parse::<Ablation>().is_err());
    }

    #[test]
    fn query_sweep_sets_counts() {
        let v = Ablation::QueryCount.variants(&TrainConfig::default()).unwrap();
        let ks: Vec<usize> = v.iter().map(|(_, c)| c.model.color_decoder.queries).collect();
        assert_eq!(ks, Ablation::QUERY_COUNTS);
    }

    #[test]
    fn tiny_variant_runs() {
        let mut cfg = TrainConfig {
            iters: 2,
            batch: 2,
            ..TrainConfig::default()
        };
        cfg.data.procedural_count = 4;
        let ds = Dataset::build(&cfg.data).unwrap();
        let r = run_variant("tiny", &cfg, &ds, &ds.images()[..2]).unwrap();
        assert_eq!(r.iterations, 2);
        assert_eq!(r.trace.len(), 2);
        assert!(r.finite && r.output_cf.is_finite());
    }
}
