//! The full restoration network: shared per-frame extractor, temporal fusion
//! and reconstruction with a global residual on the central frame.

use crate::config::ModelConfig;
use crate::error::{contract, Result};
use crate::impl_module;
use crate::nn::chw_dims;
use crate::param::Init;
use crate::reconstruction::{Reconstruction, ReconstructionConfig};
use crate::spatial::{EncoderDecoderConfig, SpatialExtractor};
use crate::temporal::{TemporalConfig, TemporalTransformer};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Vdtr {
    pub config: ModelConfig,
    pub spatial: SpatialExtractor,
    pub temporal: TemporalTransformer,
    pub reconstruction: Reconstruction,
}
impl_module!(Vdtr {
    spatial,
    temporal,
    reconstruction
});

impl Vdtr {
    /// Fresh model seeded by `seed`. The RGB projection and temporal
    /// embedding start at zero, so the initial model returns the central frame
    /// unchanged. The residual branches of the temporal attention blocks also
    /// start at zero: a fresh G2/G3 model computes the same function as G1
    /// with the same seed.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Vdtr> {
        config.validate()?;
        let mut init = Init::new(seed);
        let block = config.block_options();
        let encdec = EncoderDecoderConfig {
            d: config.d,
            stages: config.stages,
            blocks_per_stage: config.blocks_per_stage,
            window: config.window,
            heads: config.heads,
            block,
        };
        let spatial = SpatialExtractor::new("spatial", config.patch, &encdec, &mut init)?;
        let mut temporal = TemporalTransformer::new(
            "temporal",
            &TemporalConfig {
                d: config.d,
                frames: config.frames(),
                window: config.window,
                heads: config.heads,
                mode: config.temporal_mode,
                depth: config.temporal_depth,
                block,
            },
            &mut init,
        )?;
        for b in &mut temporal.attention {
            b.zero_residual_branches();
        }
        let reconstruction = Reconstruction::new(
            "recon",
            &ReconstructionConfig {
                d: config.d,
                patch: config.patch,
                blocks: config.recon_blocks,
                window: config.window,
                heads: config.heads,
                block,
            },
            &mut init,
        )?;
        Ok(Vdtr {
            config: *config,
            spatial,
            temporal,
            reconstruction,
        })
    }

    /// Per-frame features `F_{t+i}`, each `d×⌈H/p⌉×⌈W/p⌉`.
    pub fn frame_features(&self, frames: &[Tensor]) -> Result<Vec<Tensor>> {
        self.check_clip(frames)?;
        frames.iter().map(|f| self.spatial.forward(f)).collect()
    }

    /// Unclamped restored central frame `3×H×W`.
    pub fn forward(&self, frames: &[Tensor]) -> Result<Tensor> {
        let features = self.frame_features(frames)?;
        let fused = self.temporal.forward(&features)?;
        self.reconstruction
            .forward(&fused, &frames[frames.len() / 2])
    }

    /// Evaluation-time output clamped to `[0, 1]`, detached from the graph.
    pub fn restore(&self, frames: &[Tensor]) -> Result<Tensor> {
        let out = self.forward(frames)?;
        Tensor::new(
            out.shape(),
            out.data().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        )
    }

    fn check_clip(&self, frames: &[Tensor]) -> Result<()> {
        let want = self.config.frames();
        if frames.len() != want {
            return Err(contract(format!(
                "model expects {want} frames, got {}",
                frames.len()
            )));
        }
        let (c, _, _) = chw_dims(&frames[0])?;
        if c != 3 {
            return Err(contract(format!("frames must be RGB, got {c} channels")));
        }
        if let Some(f) = frames.iter().find(|f| f.shape() != frames[0].shape()) {
            return Err(contract(format!(
                "frame shapes differ: {:?} vs {:?}",
                f.shape(),
                frames[0].shape()
            )));
        }
        Ok(())
    }
}
