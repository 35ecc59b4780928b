//! Training loop and evaluation.

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, RngState};
use crate::config::Config;
use crate::data::{augment, FramesClip};
use crate::error::{contract, Error, Result};
use crate::loss::{total_loss, FeatureExtractor};
use crate::metrics::{psnr, ssim};
use crate::model::Vdtr;
use crate::optim::Adam;
use crate::param::Module;

/// Stream of the data-sampling RNG; stream 0 of the same seed initializes
/// the weights.
const SAMPLER_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub step: u64,
    pub total: f64,
    pub charbonnier: f64,
    pub perceptual: f64,
}

pub struct Trainer {
    pub config: Config,
    pub model: Vdtr,
    adam: Adam,
    rng: ChaCha8Rng,
    step: u64,
    extractor: FeatureExtractor,
}

fn optimizer(config: &Config) -> Adam {
    Adam {
        lr: config.train.lr,
        beta1: config.train.beta1,
        beta2: config.train.beta2,
        eps: config.train.adam_eps,
    }
}

impl Trainer {
    pub fn new(config: &Config) -> Result<Trainer> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        rng.set_stream(SAMPLER_STREAM);
        Ok(Trainer {
            config: *config,
            model: Vdtr::new(&config.model, config.train.seed)?,
            adam: optimizer(config),
            rng,
            step: 0,
            extractor: FeatureExtractor::default(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Trainer> {
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        rng.set_stream(ckpt.rng.stream);
        rng.set_word_pos(ckpt.rng.word_pos);
        Ok(Trainer {
            config: ckpt.config,
            model: ckpt.model()?,
            adam: optimizer(&ckpt.config),
            rng,
            step: ckpt.step,
            extractor: FeatureExtractor::default(),
        })
    }

    /// Completed optimizer steps.
    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config,
            step: self.step,
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
            params: Checkpoint::records(&self.model),
        }
    }

    /// One optimizer step on a randomly chosen, cropped and flipped clip. A
    /// non-finite loss leaves the trainer exactly as it was before the call
    /// and reports it together with that state.
    pub fn train_step(&mut self, data: &[FramesClip]) -> Result<StepLoss> {
        if data.is_empty() {
            return Err(contract("training needs at least one clip"));
        }
        let before = self.rng.clone();
        let t = &self.config.train;
        let clip = &data[self.rng.gen_range(0..data.len())];
        let sample = augment(clip, t.crop, t.flip_h, t.flip_v, &mut self.rng)?;
        let frames = sample.blurry_tensors();
        let target = sample.sharp.to_tensor();

        self.model.zero_grad();
        let pred = self.model.forward(&frames)?;
        let loss = total_loss(&pred, &target, t.lambda, &self.extractor)?;
        let value = loss.total.item();
        if !value.is_finite() {
            self.rng = before;
            return Err(Error::NonFiniteLoss {
                step: self.step,
                last_good: Box::new(self.checkpoint()),
            });
        }
        loss.total.backward()?;
        self.adam.step(self.model.parameters_mut());
        let record = StepLoss {
            step: self.step,
            total: value,
            charbonnier: loss.charbonnier,
            perceptual: loss.perceptual,
        };
        self.step += 1;
        debug!("step {} loss {:.6e}", record.step, record.total);
        Ok(record)
    }

    pub fn run(
        &mut self,
        data: &[FramesClip],
        steps: u64,
        mut on_step: impl FnMut(&StepLoss),
    ) -> Result<Vec<StepLoss>> {
        let mut trace = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let s = self.train_step(data)?;
            on_step(&s);
            trace.push(s);
        }
        Ok(trace)
    }
}

/// Trains a fresh model for `config.train.steps` steps.
pub fn train_loop(config: &Config, data: &[FramesClip]) -> Result<(Checkpoint, Vec<StepLoss>)> {
    let mut trainer = Trainer::new(config)?;
    let trace = trainer.run(data, config.train.steps, |_| {})?;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        info!(
            "trained {} steps: loss {:.4e} → {:.4e}",
            trace.len(),
            first.total,
            last.total
        );
    }
    Ok((trainer.checkpoint(), trace))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipMetrics {
    pub clip_id: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub clips: Vec<ClipMetrics>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

impl EvalReport {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.clips.iter().map(|c| c.psnr))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.clips.iter().map(|c| c.ssim))
    }

    pub fn mean_baseline_psnr(&self) -> f64 {
        mean(self.clips.iter().map(|c| c.baseline_psnr))
    }

    pub fn mean_baseline_ssim(&self) -> f64 {
        mean(self.clips.iter().map(|c| c.baseline_ssim))
    }

    pub const CSV_HEADER: &'static str = "frame_index,psnr_db,ssim";

    /// One row per clip, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for c in &self.clips {
            s.push_str(&format!("{},{:.6},{:.6}\n", c.clip_id, c.psnr, c.ssim));
        }
        s.push_str(&format!(
            "mean,{:.6},{:.6}\n",
            self.mean_psnr(),
            self.mean_ssim()
        ));
        s
    }
}

/// Full-frame inference on every clip, clamped, scored against the sharp
/// frame next to the blurry central frame's own scores.
pub fn evaluate(model: &Vdtr, data: &[FramesClip]) -> Result<EvalReport> {
    let frames = model.config.frames();
    let mut report = EvalReport::default();
    for clip in data {
        if clip.blurry.len() != frames {
            return Err(contract(format!(
                "clip {} has {} frames, model expects {frames}",
                clip.id,
                clip.blurry.len()
            )));
        }
        let restored = model.restore(&clip.blurry_tensors())?;
        let sharp = clip.sharp.to_tensor();
        let center = clip.center().to_tensor();
        report.clips.push(ClipMetrics {
            clip_id: clip.id,
            psnr: psnr(restored.data(), sharp.data(), 1.0),
            ssim: ssim(&restored, &sharp)?,
            baseline_psnr: psnr(center.data(), sharp.data(), 1.0),
            baseline_ssim: ssim(&center, &sharp)?,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
