//! Local window multi-head self-attention.
//!
//! Feature maps are cut into non-overlapping `m×m` token windows (optionally
//! after a cyclic shift of `m/2`), attention runs inside each window with a
//! learnable 2D positional encoding, and the windows are stitched back. The
//! cost of one attention application is `2·m²·H·W·d` multiply-accumulates,
//! against `2·(H·W)²·d` for global attention.

use std::rc::Rc;

use crate::error::{contract, Error, Result};
use crate::impl_module;
use crate::nn::{
    chw_dims, chw_to_tokens, maybe_norm, tokens_to_chw, FeedForward, LayerNorm, Linear,
};
use crate::param::{Init, Parameter};
use crate::tensor::{count_matmul_macs, Tensor, GATHER_ZERO};

/// Additive logit for token pairs that must not attend to each other.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    /// Window side `m` in tokens.
    pub size: usize,
    /// Cyclic shift in tokens, `0` or `m/2`.
    pub shift: usize,
    pub heads: usize,
}

impl WindowSpec {
    pub fn new(size: usize, shift: usize, heads: usize) -> Result<WindowSpec> {
        if size == 0 || heads == 0 {
            return Err(Error::Config(format!(
                "window size {size} and head count {heads} must be positive"
            )));
        }
        if shift != 0 && shift != size / 2 {
            return Err(Error::Config(format!(
                "window shift must be 0 or {}, got {shift}",
                size / 2
            )));
        }
        Ok(WindowSpec { size, shift, heads })
    }

    pub fn plain(size: usize, heads: usize) -> WindowSpec {
        WindowSpec::new(size, 0, heads).expect("valid window")
    }

    /// Spec for block `index` of a stack: odd blocks use the half-window shift.
    pub fn alternating(size: usize, heads: usize, index: usize) -> WindowSpec {
        let shift = if index % 2 == 1 { size / 2 } else { 0 };
        WindowSpec::new(size, shift, heads).expect("valid window")
    }

    pub fn check_channels(&self, d: usize) -> Result<()> {
        if !d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "channel count {d} is not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }

    /// Extents rounded up to multiples of the window size.
    pub fn padded(&self, h: usize, w: usize) -> (usize, usize) {
        (
            h.div_ceil(self.size) * self.size,
            w.div_ceil(self.size) * self.size,
        )
    }

    pub fn num_windows(&self, h: usize, w: usize) -> usize {
        let (hp, wp) = self.padded(h, w);
        (hp / self.size) * (wp / self.size)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.size * self.size
    }

    /// A map that fits in a single window gains nothing from shifting.
    pub fn effective(&self, h: usize, w: usize) -> WindowSpec {
        let (hp, wp) = self.padded(h, w);
        if hp <= self.size && wp <= self.size {
            WindowSpec { shift: 0, ..*self }
        } else {
            *self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Layout {
    /// `d×H×W`
    ChannelFirst,
    /// `H×W×d` (token rows)
    ChannelLast,
}

fn source_offset(
    layout: Layout,
    d: usize,
    h: usize,
    w: usize,
    c: usize,
    y: usize,
    x: usize,
) -> usize {
    match layout {
        Layout::ChannelFirst => (c * h + y) * w + x,
        Layout::ChannelLast => (y * w + x) * d + c,
    }
}

/// Gather index taking a `d×H×W` (or `H×W×d`) map of `frames` stacked maps to
/// `nW × (frames·m²) × d` windows, frame-major inside each window.
pub(crate) fn partition_index(
    layout: Layout,
    frames: usize,
    d: usize,
    h: usize,
    w: usize,
    spec: &WindowSpec,
) -> (Vec<usize>, [usize; 3]) {
    let m = spec.size;
    let s = spec.shift;
    let (hp, wp) = spec.padded(h, w);
    let (nwy, nwx) = (hp / m, wp / m);
    let per_frame = h * w * d;
    let tokens = frames * m * m;
    let mut index = Vec::with_capacity(nwy * nwx * tokens * d);
    for wy in 0..nwy {
        for wx in 0..nwx {
            for f in 0..frames {
                for ty in 0..m {
                    for tx in 0..m {
                        let sy = (wy * m + ty + s) % hp;
                        let sx = (wx * m + tx + s) % wp;
                        for c in 0..d {
                            if sy < h && sx < w {
                                index.push(
                                    f * per_frame + source_offset(layout, d, h, w, c, sy, sx),
                                );
                            } else {
                                index.push(GATHER_ZERO);
                            }
                        }
                    }
                }
            }
        }
    }
    (index, [nwy * nwx, tokens, d])
}

/// Inverse of [`partition_index`] for frame `frame` of the windows; output is
/// a `d×H×W` (or `H×W×d`) map.
pub(crate) fn merge_index(
    layout: Layout,
    frames: usize,
    frame: usize,
    d: usize,
    h: usize,
    w: usize,
    spec: &WindowSpec,
) -> Vec<usize> {
    let m = spec.size;
    let s = spec.shift;
    let (hp, wp) = spec.padded(h, w);
    let nwx = wp / m;
    let tokens = frames * m * m;
    let mut index = vec![0usize; d * h * w];
    for y in 0..h {
        let yy = (y + hp - s) % hp;
        for x in 0..w {
            let xx = (x + wp - s) % wp;
            let win = (yy / m) * nwx + xx / m;
            let tok = frame * m * m + (yy % m) * m + xx % m;
            for c in 0..d {
                index[source_offset(layout, d, h, w, c, y, x)] = (win * tokens + tok) * d + c;
            }
        }
    }
    index
}

/// `d×H×W → nW×m²×d`. Pads bottom/right with zeros to a multiple of `m` and
/// applies the cyclic shift before cutting; tokens are row-major in a window.
pub fn window_partition(f: &Tensor, spec: &WindowSpec) -> Result<Tensor> {
    let (d, h, w) = chw_dims(f)?;
    let (index, shape) = partition_index(Layout::ChannelFirst, 1, d, h, w, spec);
    f.gather(&shape, index.into())
}

/// Exact inverse of [`window_partition`] back to `d×H×W`.
pub fn window_merge(windows: &Tensor, spec: &WindowSpec, h: usize, w: usize) -> Result<Tensor> {
    let d = *windows.shape().last().unwrap();
    let want = [spec.num_windows(h, w), spec.tokens_per_window(), d];
    if windows.shape() != want {
        return Err(contract(format!(
            "window_merge: windows of shape {:?} do not tile {h}×{w} with {:?} (expected {want:?})",
            windows.shape(),
            spec
        )));
    }
    let index = merge_index(Layout::ChannelFirst, 1, 0, d, h, w, spec);
    windows.gather(&[d, h, w], index.into())
}

/// Token-layout variants used inside blocks: `(H·W)×d ↔ nW×m²×d`.
pub(crate) fn partition_tokens(
    tokens: &Tensor,
    h: usize,
    w: usize,
    spec: &WindowSpec,
) -> Result<Tensor> {
    let d = *tokens.shape().last().unwrap();
    let (index, shape) = partition_index(Layout::ChannelLast, 1, d, h, w, spec);
    tokens.gather(&shape, index.into())
}

pub(crate) fn merge_tokens(
    windows: &Tensor,
    h: usize,
    w: usize,
    spec: &WindowSpec,
) -> Result<Tensor> {
    let d = *windows.shape().last().unwrap();
    let index = merge_index(Layout::ChannelLast, 1, 0, d, h, w, spec);
    windows.gather(&[h * w, d], index.into())
}

/// Region label of every token of every shifted window; tokens may attend to
/// each other only when their labels agree.
pub fn shifted_window_regions(h: usize, w: usize, spec: &WindowSpec) -> Vec<Vec<usize>> {
    let m = spec.size;
    let s = spec.shift;
    let (hp, wp) = spec.padded(h, w);
    let band = |v: usize, ext: usize| -> usize {
        if s == 0 || v < ext - m {
            0
        } else if v < ext - s {
            1
        } else {
            2
        }
    };
    let (nwy, nwx) = (hp / m, wp / m);
    let mut out = Vec::with_capacity(nwy * nwx);
    for wy in 0..nwy {
        for wx in 0..nwx {
            let mut labels = Vec::with_capacity(m * m);
            for ty in 0..m {
                for tx in 0..m {
                    labels.push(band(wy * m + ty, hp) * 3 + band(wx * m + tx, wp));
                }
            }
            out.push(labels);
        }
    }
    out
}

/// Additive masks `nW×m²×m²`: `0` inside a region, [`MASK_VALUE`] across
/// regions. All zeros when the spec is unshifted.
pub fn shifted_window_mask(h: usize, w: usize, spec: &WindowSpec) -> Result<Tensor> {
    let regions = shifted_window_regions(h, w, spec);
    let n = spec.tokens_per_window();
    let mut data = Vec::with_capacity(regions.len() * n * n);
    for labels in &regions {
        for i in 0..n {
            for j in 0..n {
                data.push(if labels[i] == labels[j] {
                    0.0
                } else {
                    MASK_VALUE
                });
            }
        }
    }
    Tensor::new(&[regions.len(), n, n], data)
}

/// Learnable 2D positional encoding: a row table and a column table, each
/// `m × d/2`, concatenated per token.
#[derive(Debug, Clone)]
pub struct PositionalEncoding2D {
    pub row_embed: Parameter,
    pub col_embed: Parameter,
}
impl_module!(PositionalEncoding2D {
    row_embed,
    col_embed
});

impl PositionalEncoding2D {
    pub fn new(name: &str, m: usize, d: usize, init: &mut Init) -> Result<PositionalEncoding2D> {
        if !d.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "positional encoding needs even d, got {d}"
            )));
        }
        Ok(PositionalEncoding2D {
            row_embed: init.uniform(format!("{name}.row"), &[m, d / 2], 0.02),
            col_embed: init.uniform(format!("{name}.col"), &[m, d / 2], 0.02),
        })
    }

    pub fn size(&self) -> usize {
        self.row_embed.shape()[0]
    }

    /// `m²×d` grid, token `(r, c)` at row `r·m + c`.
    pub fn forward(&self) -> Result<Tensor> {
        let m = self.size();
        let half = self.row_embed.shape()[1];
        let rows: Vec<usize> = (0..m * m)
            .flat_map(|t| (0..half).map(move |j| (t / m) * half + j))
            .collect();
        let cols: Vec<usize> = (0..m * m)
            .flat_map(|t| (0..half).map(move |j| (t % m) * half + j))
            .collect();
        let r = self
            .row_embed
            .tensor()
            .gather(&[m * m, half], rows.into())?;
        let c = self
            .col_embed
            .tensor()
            .gather(&[m * m, half], cols.into())?;
        Tensor::concat(&[r, c], 1)
    }

    pub fn zero(&mut self) {
        let n = self.row_embed.data().len();
        self.row_embed.set_data(vec![0.0; n]).expect("same size");
        self.col_embed.set_data(vec![0.0; n]).expect("same size");
    }
}

/// `softmax(QKᵀ/√d_head + mask)·V` on head-split tensors.
///
/// `q`: `B×h×nq×dh`, `k`, `v`: `B×h×nk×dh`, `mask`: `B×h×nq×nk`. Returns the
/// attended values and the attention weights. The two products here are the
/// only ones counted by [`attention_flop_count`].
pub fn scaled_dot_product_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let dh = *q.shape().last().unwrap();
    let kt = k.transpose_last2()?;
    let mut logits = q.matmul(&kt)?.scale(1.0 / (dh as f64).sqrt());
    if let Some(mask) = mask {
        if mask.shape() != logits.shape() {
            return Err(contract(format!(
                "attention mask shape {:?} does not match logits {:?}",
                mask.shape(),
                logits.shape()
            )));
        }
        logits = logits.add(mask)?;
    }
    let weights = logits.softmax_lastdim();
    let out = weights.matmul(v)?;
    Ok((out, weights))
}

/// Q/K/V/output projections of multi-head attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}
impl_module!(MultiHeadAttention {
    query,
    key,
    value,
    output
});

impl MultiHeadAttention {
    pub fn new(name: &str, d: usize, heads: usize, init: &mut Init) -> Result<MultiHeadAttention> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "d={d} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(&format!("{name}.wq"), d, d, init),
            key: Linear::new(&format!("{name}.wk"), d, d, init),
            value: Linear::new(&format!("{name}.wv"), d, d, init),
            output: Linear::new(&format!("{name}.wo"), d, d, init),
            heads,
        })
    }

    /// `B×n×d → B×h×n×dh`
    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        x.reshape(&[b, n, self.heads, d / self.heads])?
            .permute(&[0, 2, 1, 3])
    }

    /// Attention of `queries` (`B×nq×d`) over `context` (`B×nk×d`) with an
    /// optional per-batch additive mask `B×nq×nk`. Returns output and weights
    /// (`B×h×nq×nk`).
    pub fn forward_with_weights(
        &self,
        queries: &Tensor,
        context: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let (b, nq, d) = match queries.shape() {
            [b, n, d] => (*b, *n, *d),
            s => {
                return Err(contract(format!(
                    "attention queries must be B×n×d, got {s:?}"
                )))
            }
        };
        let nk = context.shape()[1];
        let q = self.split_heads(&self.query.forward(queries)?)?;
        let k = self.split_heads(&self.key.forward(context)?)?;
        let v = self.split_heads(&self.value.forward(context)?)?;
        let mask = match mask {
            None => None,
            Some(m) => {
                if m.shape() != [b, nq, nk] {
                    return Err(contract(format!(
                        "attention mask shape {:?}, expected {:?}",
                        m.shape(),
                        [b, nq, nk]
                    )));
                }
                Some(broadcast_heads(m, self.heads)?)
            }
        };
        let (attended, weights) = scaled_dot_product_attention(&q, &k, &v, mask.as_ref())?;
        let merged = attended.permute(&[0, 2, 1, 3])?.reshape(&[b, nq, d])?;
        Ok((self.output.forward(&merged)?, weights))
    }

    pub fn forward(
        &self,
        queries: &Tensor,
        context: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        Ok(self.forward_with_weights(queries, context, mask)?.0)
    }
}

/// `B×nq×nk → B×h×nq×nk` (constant masks only).
fn broadcast_heads(mask: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, nq, nk) = (mask.shape()[0], mask.shape()[1], mask.shape()[2]);
    let per = nq * nk;
    let index: Rc<[usize]> = (0..b)
        .flat_map(|bi| (0..heads).flat_map(move |_| bi * per..(bi + 1) * per))
        .collect();
    mask.gather(&[b, heads, nq, nk], index)
}

/// Window attention: `Z = X + LPE`, then multi-head self-attention of `Z`
/// within each window. `x` is `nW×m²×d` (or a single window `m²×d`); `mask`
/// is `nW×m²×m²`.
pub fn window_mhsa(
    x: &Tensor,
    pe: &PositionalEncoding2D,
    attn: &MultiHeadAttention,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    let single = x.rank() == 2;
    let x = if single {
        x.reshape(&[1, x.shape()[0], x.shape()[1]])?
    } else {
        x.clone()
    };
    let z = x.add(&pe.forward()?)?;
    let out = attn.forward(&z, &z, mask)?;
    if single {
        out.reshape(&out.shape()[1..])
    } else {
        Ok(out)
    }
}

/// Pre-norm local Transformer block:
/// `x ← x + W-MSA(norm(x))`, `x ← x + FFN(norm(x))`.
#[derive(Debug, Clone)]
pub struct LocalTransformerBlock {
    pub norm1: Option<LayerNorm>,
    pub pos: PositionalEncoding2D,
    pub attn: MultiHeadAttention,
    pub norm2: Option<LayerNorm>,
    pub ffn: FeedForward,
    pub spec: WindowSpec,
}
impl_module!(LocalTransformerBlock {
    norm1,
    pos,
    attn,
    norm2,
    ffn
});

#[derive(Debug, Clone, Copy)]
pub struct BlockOptions {
    pub ffn_ratio: usize,
    pub layer_norm: bool,
}

impl Default for BlockOptions {
    fn default() -> Self {
        BlockOptions {
            ffn_ratio: 4,
            layer_norm: true,
        }
    }
}

impl LocalTransformerBlock {
    pub fn new(
        name: &str,
        d: usize,
        spec: WindowSpec,
        opts: BlockOptions,
        init: &mut Init,
    ) -> Result<Self> {
        spec.check_channels(d)?;
        Ok(LocalTransformerBlock {
            norm1: opts
                .layer_norm
                .then(|| LayerNorm::new(&format!("{name}.norm1"), d)),
            pos: PositionalEncoding2D::new(&format!("{name}.lpe"), spec.size, d, init)?,
            attn: MultiHeadAttention::new(&format!("{name}.attn"), d, spec.heads, init)?,
            norm2: opts
                .layer_norm
                .then(|| LayerNorm::new(&format!("{name}.norm2"), d)),
            ffn: FeedForward::new(&format!("{name}.ffn"), d, opts.ffn_ratio, init),
            spec,
        })
    }

    /// `d×H×W → d×H×W`.
    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let (_, h, w) = chw_dims(f)?;
        tokens_to_chw(&self.forward_tokens(&chw_to_tokens(f)?, h, w)?, h, w)
    }

    /// Same block on an `(H·W)×d` token map.
    pub fn forward_tokens(&self, tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let spec = self.spec.effective(h, w);
        let normed = maybe_norm(&self.norm1, tokens)?;
        let windows = partition_tokens(&normed, h, w, &spec)?;
        let mask = if spec.shift > 0 {
            Some(shifted_window_mask(h, w, &spec)?)
        } else {
            None
        };
        let attended = window_mhsa(&windows, &self.pos, &self.attn, mask.as_ref())?;
        let x = tokens.add(&merge_tokens(&attended, h, w, &spec)?)?;
        x.add(&self.ffn.forward(&maybe_norm(&self.norm2, &x)?)?)
    }

    /// Zeroes both residual branches so the block is the identity map.
    pub fn zero_residual_branches(&mut self) {
        self.attn.output.zero();
        self.ffn.contract.zero();
    }
}

/// Runs a block stack on a `d×H×W` map with a single layout conversion.
pub fn run_blocks(blocks: &[LocalTransformerBlock], f: &Tensor) -> Result<Tensor> {
    if blocks.is_empty() {
        return Ok(f.clone());
    }
    let (_, h, w) = chw_dims(f)?;
    let mut t = chw_to_tokens(f)?;
    for b in blocks {
        t = b.forward_tokens(&t, h, w)?;
    }
    tokens_to_chw(&t, h, w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMode {
    Global,
    Window,
}

impl AttnMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttnMode::Global => "global",
            AttnMode::Window => "window",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnCostConfig {
    pub mode: AttnMode,
    pub height: usize,
    pub width: usize,
    pub d: usize,
    /// Window side; ignored for global attention.
    pub window: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnCostReport {
    pub config: AttnCostConfig,
    pub analytic_macs: u64,
    pub measured_macs: u64,
}

impl AttnCostReport {
    pub const CSV_HEADER: &'static str = "mode,H,W,d,m,analytic_macs,measured_macs";

    pub fn csv_row(&self) -> String {
        let c = &self.config;
        let m = match c.mode {
            AttnMode::Global => c.height.max(c.width),
            AttnMode::Window => c.window,
        };
        format!(
            "{},{},{},{},{},{},{}",
            c.mode.as_str(),
            c.height,
            c.width,
            c.d,
            m,
            self.analytic_macs,
            self.measured_macs
        )
    }
}

/// Analytic cost from the closed forms (`2(HW)²d` global, `2m²HWd`
/// windowed, on the padded map) next to the cost measured by running the
/// attention core once on random features.
pub fn attention_flop_count(config: AttnCostConfig) -> Result<AttnCostReport> {
    let AttnCostConfig {
        height: h,
        width: w,
        d,
        ..
    } = config;
    if h == 0 || w == 0 || d == 0 {
        return Err(Error::Config(
            "attention cost needs positive H, W, d".into(),
        ));
    }
    let tokens = Tensor::new(&[h * w, d], Init::new(0).normal_vec(h * w * d))?;
    let (grouped, analytic) = match config.mode {
        AttnMode::Global => {
            let hw = (h * w) as u64;
            (tokens.reshape(&[1, 1, h * w, d])?, 2 * hw * hw * d as u64)
        }
        AttnMode::Window => {
            let spec = WindowSpec::new(config.window, 0, 1)?;
            let (hp, wp) = spec.padded(h, w);
            let windows = partition_tokens(&tokens, h, w, &spec)?;
            let s = windows.shape().to_vec();
            let m2 = (config.window * config.window) as u64;
            (
                windows.reshape(&[s[0], 1, s[1], s[2]])?,
                2 * m2 * (hp * wp) as u64 * d as u64,
            )
        }
    };
    let (result, measured) =
        count_matmul_macs(|| scaled_dot_product_attention(&grouped, &grouped, &grouped, None));
    result?;
    Ok(AttnCostReport {
        config,
        analytic_macs: analytic,
        measured_macs: measured,
    })
}

#[cfg(test)]
mod tests;
