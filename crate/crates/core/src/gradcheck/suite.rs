//! Finite-difference checks over every block type at d = 4.

use crate::config::ModelConfig;
use crate::error::Result;
use crate::gradcheck::{check_module, GradCheckOptions, GradCheckReport};
use crate::loss::{
    charbonnier, perceptual, total_loss, FeatureExtractor, CHARBONNIER_EPS, PERCEPTUAL_WEIGHT,
};
use crate::model::Vdtr;
use crate::param::{Init, Module, Parameter};
use crate::reconstruction::{Reconstruction, ReconstructionConfig};
use crate::spatial::{EncoderDecoderConfig, SpatialExtractor};
use crate::temporal::{TemporalConfig, TemporalMode, TemporalTransformer};
use crate::tensor::Tensor;
use crate::window::{run_blocks, BlockOptions, LocalTransformerBlock, WindowSpec};

const D: usize = 4;
const HEADS: usize = 2;

#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl SuiteCase {
    pub fn summary(&self) -> String {
        format!(
            "{:<16} entries {:>5}  max rel err {:.3e}  {}",
            self.name,
            self.report.entries_checked,
            self.report.max_rel_err,
            if self.report.passed() { "ok" } else { "FAILED" }
        )
    }
}

/// Replaces every all-zero parameter (biases, positional tables, the RGB
/// projection) with small random values so no path is trivially dead.
fn activate<M: Module>(module: &mut M, init: &mut Init, scale: f64) {
    for p in module.parameters_mut() {
        if p.data().iter().all(|&v| v == 0.0) {
            let v = init
                .normal_vec(p.data().len())
                .iter()
                .map(|x| scale * x)
                .collect();
            p.set_data(v).expect("same size");
        }
    }
}

fn normal(init: &mut Init, shape: &[usize]) -> Result<Tensor> {
    Tensor::new(shape, init.normal_vec(shape.iter().product()))
}

fn capped(n: usize) -> GradCheckOptions {
    GradCheckOptions {
        max_entries_per_param: Some(n),
        ..GradCheckOptions::default()
    }
}

fn temporal_case(mode: TemporalMode, init: &mut Init) -> Result<GradCheckReport> {
    let cfg = TemporalConfig {
        d: D,
        frames: 3,
        window: 4,
        heads: HEADS,
        mode,
        depth: 1,
        block: BlockOptions::default(),
    };
    let mut t = TemporalTransformer::new("temporal", &cfg, init)?;
    activate(&mut t, init, 0.3);
    let frames = (0..3)
        .map(|_| normal(init, &[D, 8, 8]))
        .collect::<Result<Vec<_>>>()?;
    let r = normal(init, &[D, 8, 8])?;
    check_module(&mut t, &GradCheckOptions::default(), |t| {
        Ok(t.forward(&frames)?.mul(&r)?.sum())
    })
}

fn input_case(init: &mut Init, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<GradCheckReport> {
    let n = 3 * 8 * 8;
    let values = init
        .uniform("x", &[n], 0.5)
        .data()
        .iter()
        .map(|v| v + 0.5)
        .collect();
    let mut pred = Parameter::new("pred", &[3, 8, 8], values)?;
    check_module(&mut pred, &GradCheckOptions::default(), |p| f(p.tensor()))
}

/// Runs every case from one seeded stream; a case fails when its maximum
/// relative error reaches the tolerance.
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut init = Init::new(seed);
    let init = &mut init;
    let mut cases = Vec::new();

    let mut blocks = (0..2)
        .map(|i| {
            LocalTransformerBlock::new(
                &format!("block{i}"),
                D,
                WindowSpec::alternating(4, HEADS, i),
                BlockOptions::default(),
                init,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    activate(&mut blocks, init, 0.3);
    let f = normal(init, &[D, 8, 8])?;
    let r = normal(init, &[D, 8, 8])?;
    cases.push(SuiteCase {
        name: "local_block",
        report: check_module(&mut blocks, &GradCheckOptions::default(), |b| {
            Ok(run_blocks(b, &f)?.mul(&r)?.sum())
        })?,
    });

    let encdec = EncoderDecoderConfig {
        d: D,
        stages: 2,
        blocks_per_stage: 2,
        window: 2,
        heads: HEADS,
        block: BlockOptions::default(),
    };
    let mut fx = SpatialExtractor::new("spatial", 4, &encdec, init)?;
    activate(&mut fx, init, 0.3);
    let frame = normal(init, &[3, 16, 16])?;
    let r = normal(init, &[D, 4, 4])?;
    cases.push(SuiteCase {
        name: "encoder_decoder",
        report: check_module(&mut fx, &capped(12), |fx| {
            Ok(fx.forward(&frame)?.mul(&r)?.sum())
        })?,
    });

    for (name, mode) in [
        ("temporal_g1", TemporalMode::G1),
        ("temporal_g2", TemporalMode::G2),
        ("temporal_g3", TemporalMode::G3),
    ] {
        cases.push(SuiteCase {
            name,
            report: temporal_case(mode, init)?,
        });
    }

    let rc = ReconstructionConfig {
        d: D,
        patch: 4,
        blocks: 2,
        window: 4,
        heads: HEADS,
        block: BlockOptions::default(),
    };
    let mut rec = Reconstruction::new("recon", &rc, init)?;
    activate(&mut rec, init, 0.5);
    let fused = normal(init, &[D, 4, 4])?;
    let center = normal(init, &[3, 16, 16])?;
    let sharp = normal(init, &[3, 16, 16])?;
    cases.push(SuiteCase {
        name: "reconstruction",
        report: check_module(&mut rec, &capped(16), |r| {
            charbonnier(&r.forward(&fused, &center)?, &sharp, CHARBONNIER_EPS)
        })?,
    });

    let target = normal(init, &[3, 8, 8])?;
    cases.push(SuiteCase {
        name: "charbonnier",
        report: input_case(init, |p| charbonnier(p, &target, CHARBONNIER_EPS))?,
    });
    let fx = FeatureExtractor::default();
    cases.push(SuiteCase {
        name: "perceptual",
        report: input_case(init, |p| perceptual(p, &target, &fx))?,
    });

    let mc = ModelConfig {
        d: D,
        heads: HEADS,
        window: 2,
        neighbors: 1,
        blocks_per_stage: 1,
        recon_blocks: 1,
        ..ModelConfig::desk()
    };
    let mut model = Vdtr::new(&mc, seed)?;
    activate(&mut model, init, 0.3);
    let frames = (0..3)
        .map(|_| normal(init, &[3, 16, 16]))
        .collect::<Result<Vec<_>>>()?;
    let sharp = normal(init, &[3, 16, 16])?;
    cases.push(SuiteCase {
        name: "full_model",
        report: check_module(&mut model, &capped(3), |m| {
            Ok(total_loss(&m.forward(&frames)?, &sharp, PERCEPTUAL_WEIGHT, &fx)?.total)
        })?,
    });
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes() {
        let cases = gradient_suite(7).unwrap();
        assert_eq!(cases.len(), 9);
        for c in &cases {
            assert!(c.report.passed(), "{}", c.summary());
        }
    }
}
