//! Fused features back to an RGB frame: a block stack, `log2(p)` pixel-shuffle
//! upsampling stages, a projection to three channels and the global residual
//! with the central blurry frame.

use crate::error::{contract, Error, Result};
use crate::impl_module;
use crate::nn::{chw_dims, crop_chw, project_channels, Linear};
use crate::param::Init;
use crate::tensor::Tensor;
use crate::window::{run_blocks, BlockOptions, LocalTransformerBlock, WindowSpec};

/// Channel-to-space rearrangement
/// `out[c, r·y + dy, r·x + dx] = in[c·r² + dy·r + dx, y, x]`.
pub fn pixel_shuffle(f: &Tensor, r: usize) -> Result<Tensor> {
    let (cin, h, w) = chw_dims(f)?;
    if r == 0 || cin % (r * r) != 0 {
        return Err(contract(format!(
            "pixel_shuffle: {cin} channels not divisible by {r}²"
        )));
    }
    let c = cin / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut index = Vec::with_capacity(cin * h * w);
    for ch in 0..c {
        for yy in 0..ho {
            for xx in 0..wo {
                let (y, dy, x, dx) = (yy / r, yy % r, xx / r, xx % r);
                index.push(((ch * r * r + dy * r + dx) * h + y) * w + x);
            }
        }
    }
    f.gather(&[c, ho, wo], index.into())
}

#[derive(Debug, Clone, Copy)]
pub struct ReconstructionConfig {
    pub d: usize,
    /// Total upsampling factor; must be a power of two.
    pub patch: usize,
    pub blocks: usize,
    pub window: usize,
    pub heads: usize,
    pub block: BlockOptions,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub blocks: Vec<LocalTransformerBlock>,
    /// One `d → 4d` projection before each ×2 shuffle.
    pub upsamplers: Vec<Linear>,
    /// Zero at initialization, so the model starts as the identity on the
    /// central frame.
    pub to_rgb: Linear,
}
impl_module!(Reconstruction {
    blocks,
    upsamplers,
    to_rgb
});

impl Reconstruction {
    pub fn new(name: &str, cfg: &ReconstructionConfig, init: &mut Init) -> Result<Reconstruction> {
        if !cfg.patch.is_power_of_two() {
            return Err(Error::Config(format!(
                "upsampling factor {} is not a power of two",
                cfg.patch
            )));
        }
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let spec = WindowSpec::alternating(cfg.window, cfg.heads, i);
                LocalTransformerBlock::new(
                    &format!("{name}.block{i}"),
                    cfg.d,
                    spec,
                    cfg.block,
                    init,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let stages = cfg.patch.trailing_zeros() as usize;
        let upsamplers = (0..stages)
            .map(|i| Linear::new(&format!("{name}.up{i}"), cfg.d, 4 * cfg.d, init))
            .collect();
        Ok(Reconstruction {
            blocks,
            upsamplers,
            to_rgb: Linear::zeroed(&format!("{name}.to_rgb"), cfg.d, 3),
        })
    }

    pub fn upsampling_factor(&self) -> usize {
        1 << self.upsamplers.len()
    }

    /// Residual image before the skip connection, `3×(p·H')×(p·W')`.
    pub fn residual(&self, fused: &Tensor) -> Result<Tensor> {
        let mut x = run_blocks(&self.blocks, fused)?;
        for up in &self.upsamplers {
            x = pixel_shuffle(&project_channels(&x, up)?, 2)?;
        }
        project_channels(&x, &self.to_rgb)
    }

    /// `L_t = G_r(F_fused) + B_t`. The output is not clamped.
    pub fn forward(&self, fused: &Tensor, center: &Tensor) -> Result<Tensor> {
        let (c, h, w) = chw_dims(center)?;
        let (_, fh, fw) = chw_dims(fused)?;
        let p = self.upsampling_factor();
        if c != 3 || fh != h.div_ceil(p) || fw != w.div_ceil(p) {
            return Err(contract(format!(
                "fused features {:?} do not match a {c}×{h}×{w} frame at factor {p}",
                fused.shape()
            )));
        }
        crop_chw(&self.residual(fused)?, h, w)?.add(center)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_module, GradCheckOptions};
    use crate::loss::charbonnier;
    use crate::testutil::{randn, randomize_biases, uniform01};

    fn config(d: usize, blocks: usize) -> ReconstructionConfig {
        ReconstructionConfig {
            d,
            patch: 4,
            blocks,
            window: 4,
            heads: 2,
            block: BlockOptions::default(),
        }
    }

    #[test]
    fn minimal_shuffle_is_row_major() {
        let f = Tensor::new(&[4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = pixel_shuffle(&f, 2).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shuffle_shapes_and_errors() {
        assert_eq!(
            pixel_shuffle(&randn(&[16, 2, 2], 1), 2).unwrap().shape(),
            &[4, 4, 4]
        );
        assert!(matches!(
            pixel_shuffle(&randn(&[6, 2, 2], 1), 2),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn two_shuffles_match_factor_four_enumeration() {
        let (c, h, w) = (2, 3, 2);
        let f = randn(&[16 * c, h, w], 2);
        let twice = pixel_shuffle(&pixel_shuffle(&f, 2).unwrap(), 2).unwrap();
        assert_eq!(twice.shape(), &[c, 4 * h, 4 * w]);
        // output row 4y + 2a + b, column 4x + 2e + g reads input channel
        // (c0·4 + b·2 + g)·4 + a·2 + e at (y, x)
        let mut permuted = vec![0.0; f.numel()];
        for c0 in 0..c {
            for (a, b, e, g) in (0..16).map(|k| (k >> 3 & 1, k >> 2 & 1, k >> 1 & 1, k & 1)) {
                let src_c = (c0 * 4 + b * 2 + g) * 4 + a * 2 + e;
                let (dy, dx) = (2 * a + b, 2 * e + g);
                for y in 0..h {
                    for x in 0..w {
                        let want = f.data()[(src_c * h + y) * w + x];
                        let (oy, ox) = (4 * y + dy, 4 * x + dx);
                        assert_eq!(twice.data()[(c0 * 4 * h + oy) * 4 * w + ox], want);
                        permuted[((c0 * 16 + dy * 4 + dx) * h + y) * w + x] = want;
                    }
                }
            }
        }
        // equal to one factor-4 shuffle once channels are reordered
        let once = pixel_shuffle(&Tensor::new(f.shape(), permuted).unwrap(), 4).unwrap();
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn shuffle_preserves_the_value_multiset() {
        let f = randn(&[12, 3, 5], 3);
        let mut a = f.to_vec();
        let mut b = pixel_shuffle(&f, 2).unwrap().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_projection_returns_the_blurry_frame() {
        let rec = Reconstruction::new("rec", &config(8, 2), &mut Init::new(4)).unwrap();
        let center = uniform01(&[3, 32, 32], 5);
        let out = rec.forward(&randn(&[8, 8, 8], 6), &center).unwrap();
        assert_eq!(out.shape(), &[3, 32, 32]);
        assert_eq!(out.data(), center.data());
    }

    #[test]
    fn padded_frames_are_cropped() {
        let rec = Reconstruction::new("rec", &config(4, 1), &mut Init::new(7)).unwrap();
        let center = uniform01(&[3, 10, 13], 8);
        assert_eq!(
            rec.forward(&randn(&[4, 3, 4], 9), &center).unwrap().shape(),
            &[3, 10, 13]
        );
        assert!(rec.forward(&randn(&[4, 3, 3], 9), &center).is_err());
    }

    #[test]
    fn blocks_alternate_shift() {
        let rec = Reconstruction::new("rec", &config(8, 4), &mut Init::new(10)).unwrap();
        let shifts: Vec<usize> = rec.blocks.iter().map(|b| b.spec.shift).collect();
        assert_eq!(shifts, vec![0, 2, 0, 2]);
        assert_eq!(rec.upsamplers.len(), 2);
    }

    #[test]
    fn charbonnier_gradient_matches_finite_differences() {
        let mut rec = Reconstruction::new("rec", &config(4, 2), &mut Init::new(11)).unwrap();
        let n = rec.to_rgb.weight.data().len();
        rec.to_rgb
            .weight
            .set_data(Init::new(12).normal_vec(n))
            .unwrap();
        randomize_biases(&mut rec, 13, 0.1);
        let fused = randn(&[4, 4, 4], 14);
        let center = uniform01(&[3, 16, 16], 15);
        let sharp = uniform01(&[3, 16, 16], 16);
        let opts = GradCheckOptions {
            max_entries_per_param: Some(16),
            ..Default::default()
        };
        let report = check_module(&mut rec, &opts, |r| {
            charbonnier(&r.forward(&fused, &center)?, &sharp, 1e-3)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
