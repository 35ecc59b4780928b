//! Per-frame feature extraction: patch embedding, a windowed-attention
//! encoder-decoder with skip fusion, and multi-scale aggregation.

use crate::error::{contract, Error, Result};
use crate::impl_module;
use crate::nn::{chw_dims, crop_chw, pad_chw, tokens_to_chw, Linear};
use crate::param::Init;
use crate::tensor::Tensor;
use crate::window::{run_blocks, BlockOptions, LocalTransformerBlock, WindowSpec};

pub const PATCH_SIZES: [usize; 5] = [1, 2, 4, 8, 16];

/// Splits each non-overlapping `p×p×3` patch into a `3p²` vector (feature
/// order `c·p² + dy·p + dx`) and projects it to `d`.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub patch: usize,
}
impl_module!(PatchEmbed { proj });

impl PatchEmbed {
    pub fn new(name: &str, patch: usize, d: usize, init: &mut Init) -> Result<PatchEmbed> {
        if !PATCH_SIZES.contains(&patch) {
            return Err(Error::Config(format!(
                "patch size must be one of {PATCH_SIZES:?}, got {patch}"
            )));
        }
        Ok(PatchEmbed {
            proj: Linear::new(&format!("{name}.proj"), 3 * patch * patch, d, init),
            patch,
        })
    }

    /// `3×H×W → d×⌈H/p⌉×⌈W/p⌉`; extents are zero-padded to multiples of `p`.
    pub fn forward(&self, frame: &Tensor) -> Result<Tensor> {
        let (c, h, w) = chw_dims(frame)?;
        let p = self.patch;
        let (ho, wo) = (h.div_ceil(p), w.div_ceil(p));
        let padded = pad_chw(frame, ho * p, wo * p)?;
        let (hp, wp) = (ho * p, wo * p);
        let feat = c * p * p;
        let mut index = Vec::with_capacity(ho * wo * feat);
        for y in 0..ho {
            for x in 0..wo {
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            index.push((ch * hp + y * p + dy) * wp + x * p + dx);
                        }
                    }
                }
            }
        }
        let patches = padded.gather(&[ho * wo, feat], index.into())?;
        tokens_to_chw(&self.proj.forward(&patches)?, ho, wo)
    }
}

/// Space-to-channel regrouping used by the encoder: `d×H×W → (H/2·W/2)×4d`,
/// channel `(dy·2 + dx)·d + c`.
pub(crate) fn space_to_channels(f: &Tensor) -> Result<(Tensor, usize, usize)> {
    let (d, h, w) = chw_dims(f)?;
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let f = pad_chw(f, 2 * ho, 2 * wo)?;
    let (hp, wp) = (2 * ho, 2 * wo);
    let mut index = Vec::with_capacity(ho * wo * 4 * d);
    for y in 0..ho {
        for x in 0..wo {
            for dy in 0..2 {
                for dx in 0..2 {
                    for c in 0..d {
                        index.push((c * hp + 2 * y + dy) * wp + 2 * x + dx);
                    }
                }
            }
        }
    }
    Ok((f.gather(&[ho * wo, 4 * d], index.into())?, ho, wo))
}

/// Inverse of [`space_to_channels`]: `(H·W)×4d → d×2H×2W`.
fn channels_to_space(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let d4 = t.shape()[1];
    if !d4.is_multiple_of(4) || t.shape()[0] != h * w {
        return Err(contract(format!(
            "cannot redistribute tokens {:?} onto a {h}×{w} grid",
            t.shape()
        )));
    }
    let d = d4 / 4;
    let (ho, wo) = (2 * h, 2 * w);
    let mut index = Vec::with_capacity(d * ho * wo);
    for c in 0..d {
        for yy in 0..ho {
            for xx in 0..wo {
                let (y, dy, x, dx) = (yy / 2, yy % 2, xx / 2, xx % 2);
                index.push((y * w + x) * d4 + (dy * 2 + dx) * d + c);
            }
        }
    }
    t.gather(&[d, ho, wo], index.into())
}

#[derive(Debug, Clone)]
pub struct EmbeddingReduction {
    pub proj: Linear,
}
impl_module!(EmbeddingReduction { proj });

impl EmbeddingReduction {
    pub fn new(name: &str, d: usize, init: &mut Init) -> EmbeddingReduction {
        EmbeddingReduction {
            proj: Linear::new(&format!("{name}.proj"), 4 * d, d, init),
        }
    }

    /// `d×H×W → d×⌈H/2⌉×⌈W/2⌉`.
    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let (grouped, ho, wo) = space_to_channels(f)?;
        tokens_to_chw(&self.proj.forward(&grouped)?, ho, wo)
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingExpansion {
    pub proj: Linear,
}
impl_module!(EmbeddingExpansion { proj });

impl EmbeddingExpansion {
    pub fn new(name: &str, d: usize, init: &mut Init) -> EmbeddingExpansion {
        EmbeddingExpansion {
            proj: Linear::new(&format!("{name}.proj"), d, 4 * d, init),
        }
    }

    /// `d×H×W → d×2H×2W`.
    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let (_, h, w) = chw_dims(f)?;
        let tokens = crate::nn::chw_to_tokens(f)?;
        channels_to_space(&self.proj.forward(&tokens)?, h, w)
    }
}

/// Per-stage outputs, finest first: stage `s` is `d×(H/2ˢ)×(W/2ˢ)`.
pub type StageFeatures = Vec<Tensor>;

#[derive(Debug, Clone, Copy)]
pub struct EncoderDecoderConfig {
    pub d: usize,
    pub stages: usize,
    pub blocks_per_stage: usize,
    pub window: usize,
    pub heads: usize,
    pub block: BlockOptions,
}

/// Symmetric encoder-decoder. Encoder stage `s` runs its blocks and, except
/// for the coarsest stage, reduces; decoder stage `s` expands the stage below,
/// fuses it with the encoder output of stage `s` (concat + affine `2d→d`) and
/// runs its blocks.
#[derive(Debug, Clone)]
pub struct EncoderDecoder {
    pub encoder: Vec<Vec<LocalTransformerBlock>>,
    pub reductions: Vec<EmbeddingReduction>,
    pub expansions: Vec<EmbeddingExpansion>,
    pub skip_fusions: Vec<Linear>,
    pub decoder: Vec<Vec<LocalTransformerBlock>>,
}
impl_module!(EncoderDecoder {
    encoder,
    reductions,
    expansions,
    skip_fusions,
    decoder
});

fn block_stack(
    name: &str,
    cfg: &EncoderDecoderConfig,
    init: &mut Init,
) -> Result<Vec<LocalTransformerBlock>> {
    (0..cfg.blocks_per_stage)
        .map(|i| {
            let spec = WindowSpec::alternating(cfg.window, cfg.heads, i);
            LocalTransformerBlock::new(&format!("{name}.block{i}"), cfg.d, spec, cfg.block, init)
        })
        .collect()
}

impl EncoderDecoder {
    pub fn new(name: &str, cfg: &EncoderDecoderConfig, init: &mut Init) -> Result<EncoderDecoder> {
        if cfg.stages == 0 {
            return Err(Error::Config(
                "encoder-decoder needs at least one stage".into(),
            ));
        }
        let s = cfg.stages;
        let mut net = EncoderDecoder {
            encoder: Vec::new(),
            reductions: Vec::new(),
            expansions: Vec::new(),
            skip_fusions: Vec::new(),
            decoder: Vec::new(),
        };
        for i in 0..s {
            net.encoder
                .push(block_stack(&format!("{name}.enc{i}"), cfg, init)?);
            if i + 1 < s {
                net.reductions.push(EmbeddingReduction::new(
                    &format!("{name}.reduce{i}"),
                    cfg.d,
                    init,
                ));
            }
        }
        // decoder stages are stored finest first
        for i in 0..s - 1 {
            net.expansions.push(EmbeddingExpansion::new(
                &format!("{name}.expand{i}"),
                cfg.d,
                init,
            ));
            net.skip_fusions.push(Linear::new(
                &format!("{name}.skip{i}"),
                2 * cfg.d,
                cfg.d,
                init,
            ));
            net.decoder
                .push(block_stack(&format!("{name}.dec{i}"), cfg, init)?);
        }
        Ok(net)
    }

    pub fn stages(&self) -> usize {
        self.encoder.len()
    }

    /// Extent multiple needed so every reduction halves exactly.
    pub fn alignment(&self) -> usize {
        1 << (self.stages() - 1)
    }

    /// Runs the network on `embed` after zero-padding it to a multiple of
    /// [`alignment`](Self::alignment); stage features keep the padded extents.
    pub fn forward(&self, embed: &Tensor) -> Result<StageFeatures> {
        let (_, h, w) = chw_dims(embed)?;
        let a = self.alignment();
        let mut x = pad_chw(embed, h.div_ceil(a) * a, w.div_ceil(a) * a)?;
        let s = self.stages();
        let mut skips = Vec::with_capacity(s);
        for i in 0..s {
            x = run_blocks(&self.encoder[i], &x)?;
            if i + 1 < s {
                skips.push(x.clone());
                x = self.reductions[i].forward(&x)?;
            }
        }
        let mut out = vec![x.clone(); s];
        for i in (0..s - 1).rev() {
            let up = self.expansions[i].forward(&x)?;
            let joined = Tensor::concat(&[skips[i].clone(), up], 0)?;
            let fused = crate::nn::project_channels(&joined, &self.skip_fusions[i])?;
            x = run_blocks(&self.decoder[i], &fused)?;
            out[i] = x.clone();
        }
        Ok(out)
    }
}

/// Bilinear interpolation weights `out×in` with half-pixel centers and edge
/// clamping. Rows sum to one.
pub fn bilinear_matrix(n_out: usize, n_in: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = src - i0 as f64;
        m[o * n_in + i0] += 1.0 - frac;
        m[o * n_in + i1] += frac;
    }
    m
}

/// `d×H×W → d×ho×wo` bilinear resampling.
pub fn bilinear_upsample(f: &Tensor, ho: usize, wo: usize) -> Result<Tensor> {
    let (_, h, w) = chw_dims(f)?;
    if (h, w) == (ho, wo) {
        return Ok(f.clone());
    }
    let rows = Tensor::new(&[ho, h], bilinear_matrix(ho, h))?;
    let cols_t = Tensor::new(&[w, wo], transpose(&bilinear_matrix(wo, w), wo, w))?;
    rows.matmul(f)?.matmul(&cols_t)
}

fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; m.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = m[r * cols + c];
        }
    }
    t
}

/// Upsamples every stage to the finest resolution, concatenates channels and
/// projects `S·d → d`.
#[derive(Debug, Clone)]
pub struct MultiscaleFuse {
    pub proj: Linear,
}
impl_module!(MultiscaleFuse { proj });

impl MultiscaleFuse {
    pub fn new(name: &str, d: usize, stages: usize, init: &mut Init) -> MultiscaleFuse {
        MultiscaleFuse {
            proj: Linear::new(&format!("{name}.proj"), stages * d, d, init),
        }
    }

    pub fn forward(&self, stages: &[Tensor]) -> Result<Tensor> {
        let first = stages
            .first()
            .ok_or_else(|| contract("multiscale_fuse needs at least one stage"))?;
        let (_, h, w) = chw_dims(first)?;
        let parts = stages
            .iter()
            .map(|s| bilinear_upsample(s, h, w))
            .collect::<Result<Vec<_>>>()?;
        crate::nn::project_channels(&Tensor::concat(&parts, 0)?, &self.proj)
    }
}

/// Shared per-frame extractor: `3×H×W → d×⌈H/p⌉×⌈W/p⌉`.
#[derive(Debug, Clone)]
pub struct SpatialExtractor {
    pub embed: PatchEmbed,
    pub encdec: EncoderDecoder,
    pub fuse: MultiscaleFuse,
}
impl_module!(SpatialExtractor {
    embed,
    encdec,
    fuse
});

impl SpatialExtractor {
    pub fn new(
        name: &str,
        patch: usize,
        cfg: &EncoderDecoderConfig,
        init: &mut Init,
    ) -> Result<SpatialExtractor> {
        Ok(SpatialExtractor {
            embed: PatchEmbed::new(&format!("{name}.embed"), patch, cfg.d, init)?,
            encdec: EncoderDecoder::new(&format!("{name}.encdec"), cfg, init)?,
            fuse: MultiscaleFuse::new(&format!("{name}.fuse"), cfg.d, cfg.stages, init),
        })
    }

    pub fn forward(&self, frame: &Tensor) -> Result<Tensor> {
        let embed = self.embed.forward(frame)?;
        let (_, h, w) = chw_dims(&embed)?;
        let fused = self.fuse.forward(&self.encdec.forward(&embed)?)?;
        crop_chw(&fused, h, w)
    }
}
