//! Spatio-temporal fusion of per-frame features.
//!
//! The `2N+1` feature maps are cut into spatio-temporal windows holding the
//! same `m×m` region of every frame. Temporal attention blocks let all
//! `(2N+1)·m²` tokens of a window attend to each other; a final
//! cross-attention block takes queries from the reference (central) frame
//! only and writes the fused reference tokens back to a single map.

use std::fmt;
use std::str::FromStr;

use crate::error::{contract, Error, Result};
use crate::impl_module;
use crate::nn::{chw_dims, maybe_norm, FeedForward, LayerNorm};
use crate::param::{Init, Parameter};
use crate::tensor::Tensor;
use crate::window::{
    merge_index, partition_index, BlockOptions, Layout, MultiHeadAttention, PositionalEncoding2D,
    WindowSpec,
};

/// Temporal stack variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalMode {
    /// Cross-attention only, `m×m` windows.
    G1,
    /// Temporal attention and cross-attention, `1×1` windows.
    G2,
    /// Temporal attention and cross-attention, `m×m` windows.
    G3,
}

impl TemporalMode {
    pub fn window_size(self, m: usize) -> usize {
        match self {
            TemporalMode::G2 => 1,
            TemporalMode::G1 | TemporalMode::G3 => m,
        }
    }

    pub fn uses_attention(self) -> bool {
        self != TemporalMode::G1
    }
}

impl FromStr for TemporalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "G1" => Ok(TemporalMode::G1),
            "G2" => Ok(TemporalMode::G2),
            "G3" => Ok(TemporalMode::G3),
            _ => Err(Error::Config(format!(
                "unknown temporal mode {s:?} (expected G1, G2 or G3)"
            ))),
        }
    }
}

impl fmt::Display for TemporalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TemporalMode::G1 => "G1",
            TemporalMode::G2 => "G2",
            TemporalMode::G3 => "G3",
        };
        f.write_str(s)
    }
}

/// All spatio-temporal windows of a clip: `tokens` is `nW×(F·m²)×d`, frame
/// major inside each window.
#[derive(Debug, Clone)]
pub struct SpatioTemporalWindows {
    pub tokens: Tensor,
    pub frames: usize,
    pub size: usize,
}

impl SpatioTemporalWindows {
    pub fn num_windows(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn reference_frame(&self) -> usize {
        self.frames / 2
    }

    /// The `nW×m²×d` tokens of the central frame.
    pub fn reference(&self) -> Result<Tensor> {
        let n = self.size * self.size;
        self.tokens.narrow(1, self.reference_frame() * n, n)
    }

    fn with_tokens(&self, tokens: Tensor) -> SpatioTemporalWindows {
        SpatioTemporalWindows { tokens, ..*self }
    }
}

fn common_shape(features: &[Tensor]) -> Result<(usize, usize, usize)> {
    let first = features
        .first()
        .ok_or_else(|| contract("no frame features"))?;
    let dims = chw_dims(first)?;
    for (i, f) in features.iter().enumerate() {
        if f.shape() != first.shape() {
            return Err(contract(format!(
                "frame {i} features have shape {:?}, frame 0 has {:?}",
                f.shape(),
                first.shape()
            )));
        }
    }
    Ok(dims)
}

/// Gathers the same `m×m` region of every frame into one window.
pub fn st_window_partition(features: &[Tensor], m: usize) -> Result<SpatioTemporalWindows> {
    let (d, h, w) = common_shape(features)?;
    let spec = WindowSpec::plain(m, 1);
    let stacked = Tensor::concat(features, 0)?;
    let (index, shape) = partition_index(Layout::ChannelFirst, features.len(), d, h, w, &spec);
    Ok(SpatioTemporalWindows {
        tokens: stacked.gather(&shape, index.into())?,
        frames: features.len(),
        size: m,
    })
}

/// Scatters every frame of the windows back to `d×H×W` maps.
pub fn st_window_merge(windows: &SpatioTemporalWindows, h: usize, w: usize) -> Result<Vec<Tensor>> {
    let spec = WindowSpec::plain(windows.size, 1);
    let d = windows.tokens.shape()[2];
    (0..windows.frames)
        .map(|f| {
            let index = merge_index(Layout::ChannelFirst, windows.frames, f, d, h, w, &spec);
            windows.tokens.gather(&[d, h, w], index.into())
        })
        .collect()
}

/// `nW×m²×d` reference tokens back to a `d×H×W` map.
fn merge_reference(tokens: &Tensor, m: usize, h: usize, w: usize) -> Result<Tensor> {
    let d = tokens.shape()[2];
    let index = merge_index(
        Layout::ChannelFirst,
        1,
        0,
        d,
        h,
        w,
        &WindowSpec::plain(m, 1),
    );
    tokens.gather(&[d, h, w], index.into())
}

/// Positional codes for `frames` stacked windows: the 2D encoding tiled over
/// frames plus the per-frame temporal embedding. `(frames·m²)×d`.
fn position_codes(
    pos: &PositionalEncoding2D,
    temporal: &Tensor,
    frames: &[usize],
) -> Result<Tensor> {
    let spatial = pos.forward()?;
    let (n, d) = (spatial.shape()[0], spatial.shape()[1]);
    let count = frames.len() * n;
    let tiled: Vec<usize> = (0..count)
        .flat_map(|t| (0..d).map(move |c| (t % n) * d + c))
        .collect();
    let per_frame: Vec<usize> = frames
        .iter()
        .flat_map(|&f| (0..n).flat_map(move |_| (0..d).map(move |c| f * d + c)))
        .collect();
    spatial
        .gather(&[count, d], tiled.into())?
        .add(&temporal.gather(&[count, d], per_frame.into())?)
}

/// Self-attention over all tokens of each spatio-temporal window, followed by
/// the feed-forward sublayer; both residual.
#[derive(Debug, Clone)]
pub struct TemporalAttentionBlock {
    pub norm1: Option<LayerNorm>,
    pub pos: PositionalEncoding2D,
    pub attn: MultiHeadAttention,
    pub norm2: Option<LayerNorm>,
    pub ffn: FeedForward,
}
impl_module!(TemporalAttentionBlock {
    norm1,
    pos,
    attn,
    norm2,
    ffn
});

impl TemporalAttentionBlock {
    pub fn new(
        name: &str,
        d: usize,
        m: usize,
        heads: usize,
        opts: BlockOptions,
        init: &mut Init,
    ) -> Result<Self> {
        Ok(TemporalAttentionBlock {
            norm1: opts
                .layer_norm
                .then(|| LayerNorm::new(&format!("{name}.norm1"), d)),
            pos: PositionalEncoding2D::new(&format!("{name}.lpe"), m, d, init)?,
            attn: MultiHeadAttention::new(&format!("{name}.attn"), d, heads, init)?,
            norm2: opts
                .layer_norm
                .then(|| LayerNorm::new(&format!("{name}.norm2"), d)),
            ffn: FeedForward::new(&format!("{name}.ffn"), d, opts.ffn_ratio, init),
        })
    }

    /// Attention branch alone: `MHSA(norm(x) + codes)`.
    pub fn attention(&self, w: &SpatioTemporalWindows, temporal: &Tensor) -> Result<Tensor> {
        let frames: Vec<usize> = (0..w.frames).collect();
        let z = maybe_norm(&self.norm1, &w.tokens)?
            .add(&position_codes(&self.pos, temporal, &frames)?)?;
        self.attn.forward(&z, &z, None)
    }

    pub fn forward(
        &self,
        w: &SpatioTemporalWindows,
        temporal: &Tensor,
    ) -> Result<SpatioTemporalWindows> {
        let x = w.tokens.add(&self.attention(w, temporal)?)?;
        let x = x.add(&self.ffn.forward(&maybe_norm(&self.norm2, &x)?)?)?;
        Ok(w.with_tokens(x))
    }

    pub fn zero_residual_branches(&mut self) {
        self.attn.output.zero();
        self.ffn.contract.zero();
    }
}

/// Queries from the reference frame, keys and values from every frame; the
/// result residually updates the reference tokens.
#[derive(Debug, Clone)]
pub struct TemporalCrossAttentionBlock {
    pub norm1: Option<LayerNorm>,
    pub pos: PositionalEncoding2D,
    pub attn: MultiHeadAttention,
    pub norm2: Option<LayerNorm>,
    pub ffn: FeedForward,
}
impl_module!(TemporalCrossAttentionBlock {
    norm1,
    pos,
    attn,
    norm2,
    ffn
});

impl TemporalCrossAttentionBlock {
    pub fn new(
        name: &str,
        d: usize,
        m: usize,
        heads: usize,
        opts: BlockOptions,
        init: &mut Init,
    ) -> Result<Self> {
        Ok(TemporalCrossAttentionBlock {
            norm1: opts
                .layer_norm
                .then(|| LayerNorm::new(&format!("{name}.norm1"), d)),
            pos: PositionalEncoding2D::new(&format!("{name}.lpe"), m, d, init)?,
            attn: MultiHeadAttention::new(&format!("{name}.attn"), d, heads, init)?,
            norm2: opts
                .layer_norm
                .then(|| LayerNorm::new(&format!("{name}.norm2"), d)),
            ffn: FeedForward::new(&format!("{name}.ffn"), d, opts.ffn_ratio, init),
        })
    }

    /// Attention branch alone, `nW×m²×d`.
    pub fn attention(&self, w: &SpatioTemporalWindows, temporal: &Tensor) -> Result<Tensor> {
        let all: Vec<usize> = (0..w.frames).collect();
        let context =
            maybe_norm(&self.norm1, &w.tokens)?.add(&position_codes(&self.pos, temporal, &all)?)?;
        let queries = maybe_norm(&self.norm1, &w.reference()?)?.add(&position_codes(
            &self.pos,
            temporal,
            &[w.reference_frame()],
        )?)?;
        self.attn.forward(&queries, &context, None)
    }

    pub fn forward(&self, w: &SpatioTemporalWindows, temporal: &Tensor) -> Result<Tensor> {
        let x = w.reference()?.add(&self.attention(w, temporal)?)?;
        x.add(&self.ffn.forward(&maybe_norm(&self.norm2, &x)?)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TemporalConfig {
    pub d: usize,
    pub frames: usize,
    pub window: usize,
    pub heads: usize,
    pub mode: TemporalMode,
    /// Temporal attention blocks before the cross-attention block; ignored
    /// for [`TemporalMode::G1`].
    pub depth: usize,
    pub block: BlockOptions,
}

/// `{F_{t+i}} → F_fused`.
#[derive(Debug, Clone)]
pub struct TemporalTransformer {
    /// Per-frame embedding `(2N+1)×d`, zero at initialization.
    pub temporal_embed: Parameter,
    pub attention: Vec<TemporalAttentionBlock>,
    pub cross: TemporalCrossAttentionBlock,
    pub mode: TemporalMode,
    pub window: usize,
}
impl_module!(TemporalTransformer {
    temporal_embed,
    attention,
    cross
});

impl TemporalTransformer {
    pub fn new(name: &str, cfg: &TemporalConfig, init: &mut Init) -> Result<TemporalTransformer> {
        if cfg.frames.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "temporal fusion needs an odd frame count, got {}",
                cfg.frames
            )));
        }
        let m = cfg.mode.window_size(cfg.window);
        let depth = if cfg.mode.uses_attention() {
            cfg.depth
        } else {
            0
        };
        let attention = (0..depth)
            .map(|i| {
                TemporalAttentionBlock::new(
                    &format!("{name}.attn{i}"),
                    cfg.d,
                    m,
                    cfg.heads,
                    cfg.block,
                    init,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TemporalTransformer {
            temporal_embed: Parameter::zeros(
                format!("{name}.temporal_embed"),
                &[cfg.frames, cfg.d],
            ),
            attention,
            cross: TemporalCrossAttentionBlock::new(
                &format!("{name}.cross"),
                cfg.d,
                m,
                cfg.heads,
                cfg.block,
                init,
            )?,
            mode: cfg.mode,
            window: m,
        })
    }

    pub fn frames(&self) -> usize {
        self.temporal_embed.shape()[0]
    }

    pub fn forward(&self, features: &[Tensor]) -> Result<Tensor> {
        if features.len() != self.frames() {
            return Err(contract(format!(
                "temporal fusion built for {} frames, got {}",
                self.frames(),
                features.len()
            )));
        }
        let (_, h, w) = common_shape(features)?;
        let te = self.temporal_embed.tensor();
        let mut windows = st_window_partition(features, self.window)?;
        for block in &self.attention {
            windows = block.forward(&windows, te)?;
        }
        merge_reference(&self.cross.forward(&windows, te)?, self.window, h, w)
    }
}
