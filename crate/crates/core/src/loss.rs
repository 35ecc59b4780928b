//! Training objective: Charbonnier reconstruction loss plus a weighted
//! perceptual term computed on a frozen feature extractor.

use crate::error::{contract, Result};
use crate::nn::{chw_dims, tokens_to_chw};
use crate::param::Init;
use crate::spatial::space_to_channels;
use crate::tensor::Tensor;

pub const CHARBONNIER_EPS: f64 = 1e-3;
pub const PERCEPTUAL_WEIGHT: f64 = 1e-4;

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(contract(format!(
            "{op}: prediction {:?} and target {:?} differ in shape",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean over elements of `√((pred − target)² + ε)`.
pub fn charbonnier(pred: &Tensor, target: &Tensor, eps: f64) -> Result<Tensor> {
    same_shape("charbonnier", pred, target)?;
    Ok(pred.sub(target)?.square().add_scalar(eps).sqrt().mean())
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape("mse", pred, target)?;
    Ok(pred.sub(target)?.square().mean())
}

/// One frozen stage: 2×2 space-to-depth, affine `4c → c_out`, tanh.
#[derive(Debug, Clone)]
pub struct ExtractorStage {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Fixed feature map used by the perceptual loss. The seeded variant holds
/// constant (untracked) tensors, so gradients only flow to its input.
#[derive(Debug, Clone)]
pub enum FeatureExtractor {
    Identity,
    Seeded {
        stages: Vec<ExtractorStage>,
        tap: usize,
    },
}

pub const EXTRACTOR_WIDTHS: [usize; 3] = [8, 16, 32];
pub const EXTRACTOR_TAP: usize = 2;
pub const EXTRACTOR_SEED: u64 = 0x5eed_f00d;

impl FeatureExtractor {
    pub fn seeded(seed: u64) -> FeatureExtractor {
        let mut init = Init::new(seed);
        let mut cin = 3;
        let stages = EXTRACTOR_WIDTHS
            .iter()
            .map(|&cout| {
                let w = init.weight("fx", 4 * cin, cout);
                let b = init.uniform("fx", &[cout], 0.1);
                cin = cout;
                ExtractorStage {
                    weight: w.tensor().detach(),
                    bias: b.tensor().detach(),
                }
            })
            .collect();
        FeatureExtractor::Seeded {
            stages,
            tap: EXTRACTOR_TAP,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            FeatureExtractor::Identity => Ok(x.clone()),
            FeatureExtractor::Seeded { stages, tap } => {
                chw_dims(x)?;
                let mut f = x.clone();
                for stage in &stages[..=*tap] {
                    let (grouped, h, w) = space_to_channels(&f)?;
                    let y = grouped.matmul(&stage.weight)?.add(&stage.bias)?.tanh();
                    f = tokens_to_chw(&y, h, w)?;
                }
                Ok(f)
            }
        }
    }
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        FeatureExtractor::seeded(EXTRACTOR_SEED)
    }
}

/// MSE between extractor features of `pred` and `target`; the target branch
/// is detached.
pub fn perceptual(pred: &Tensor, target: &Tensor, fx: &FeatureExtractor) -> Result<Tensor> {
    same_shape("perceptual", pred, target)?;
    mse(&fx.forward(pred)?, &fx.forward(&target.detach())?)
}

#[derive(Debug, Clone)]
pub struct LossValue {
    pub total: Tensor,
    pub charbonnier: f64,
    pub perceptual: f64,
}

/// `charbonnier + λ·perceptual`. The perceptual branch is skipped entirely
/// when `λ = 0`.
pub fn total_loss(
    pred: &Tensor,
    target: &Tensor,
    lambda: f64,
    fx: &FeatureExtractor,
) -> Result<LossValue> {
    let c = charbonnier(pred, target, CHARBONNIER_EPS)?;
    if lambda == 0.0 {
        return Ok(LossValue {
            charbonnier: c.item(),
            perceptual: 0.0,
            total: c,
        });
    }
    let p = perceptual(pred, target, fx)?;
    Ok(LossValue {
        charbonnier: c.item(),
        perceptual: p.item(),
        total: c.add(&p.scale(lambda))?,
    })
}
