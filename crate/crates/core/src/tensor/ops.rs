use std::rc::Rc;

use super::{record_macs, Op, Tensor, GATHER_ZERO};
use crate::error::{contract, Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Batch layout of a matrix product: how many independent products and the
/// per-batch offsets into each operand.
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub n: usize,
    pub k: usize,
    pub p: usize,
    pub a_stride: usize,
    pub b_stride: usize,
    pub out_shape: Vec<usize>,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    let mismatch = || Error::Dimension {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (n, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, p) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let a_lead = &a[..a.len() - 2];
    let b_lead = &b[..b.len() - 2];
    let lead = if a_lead == b_lead || b_lead.is_empty() {
        a_lead
    } else if a_lead.is_empty() {
        b_lead
    } else {
        return Err(mismatch());
    };
    let batch = lead.iter().product();
    let mut out_shape = lead.to_vec();
    out_shape.extend([n, p]);
    Ok(MatmulDims {
        batch,
        n,
        k,
        p,
        a_stride: if a_lead.is_empty() { 0 } else { n * k },
        b_stride: if b_lead.is_empty() { 0 } else { k * p },
        out_shape,
    })
}

fn matmul_kernel(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, p: usize) {
    for i in 0..n {
        let row = &mut out[i * p..(i + 1) * p];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

impl Tensor {
    /// Batched matrix product over the trailing two axes. Leading axes must
    /// agree, or one operand may be a plain matrix shared by every batch.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let dims = matmul_dims(self.shape(), other.shape())?;
        let MatmulDims { batch, n, k, p, .. } = dims;
        let mut out = vec![0.0; batch * n * p];
        for bi in 0..batch {
            let a = &self.data()[bi * dims.a_stride..][..n * k];
            let b = &other.data()[bi * dims.b_stride..][..k * p];
            matmul_kernel(a, b, &mut out[bi * n * p..(bi + 1) * n * p], n, k, p);
        }
        record_macs((batch * n * k * p) as u64);
        Ok(Tensor::from_op(
            dims.out_shape,
            out,
            Op::MatMul(self.clone(), other.clone()),
        ))
    }

    /// Elementwise sum; `other` may have the shape of any trailing suffix of
    /// `self` and is then repeated over the leading axes.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (s, o) = (self.shape(), other.shape());
        if o.len() > s.len() || s[s.len() - o.len()..] != *o {
            return Err(Error::Dimension {
                op: "add",
                lhs: s.to_vec(),
                rhs: o.to_vec(),
            });
        }
        let b = other.data();
        let nb = b.len();
        let out = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i % nb])
            .collect();
        Ok(Tensor::from_op(
            s.to_vec(),
            out,
            Op::AddBroadcast(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let out = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "mul")?;
        let out = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn scale(&self, k: f64) -> Tensor {
        let out = self.data().iter().map(|x| x * k).collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Scale(self.clone(), k))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|x| x + c).collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::AddScalar(self.clone()))
    }

    pub fn square(&self) -> Tensor {
        let out = self.data().iter().map(|x| x * x).collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Square(self.clone()))
    }

    pub fn sqrt(&self) -> Tensor {
        let out = self.data().iter().map(|x| x.sqrt()).collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Sqrt(self.clone()))
    }

    pub fn tanh(&self) -> Tensor {
        let out = self.data().iter().map(|x| x.tanh()).collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Tanh(self.clone()))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Tensor {
        let out = self.data().iter().map(|&x| gelu_scalar(x)).collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Gelu(self.clone()))
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax_lastdim(&self) -> Tensor {
        let d = *self.shape().last().unwrap();
        let mut out = self.to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Tensor::from_op(self.shape().to_vec(), out, Op::Softmax(self.clone()))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        let d = *self.shape().last().unwrap();
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let rows = self.numel() / d;
        let mut xhat = vec![0.0; self.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; self.numel()];
        let (g, b) = (gamma.data(), beta.data());
        for r in 0..rows {
            let x = &self.data()[r * d..(r + 1) * d];
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (x[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                rstd,
            },
        ))
    }

    /// Re-layout: output element `i` is `self[index[i]]`, or zero where the
    /// index is [`GATHER_ZERO`]. Covers permutes, pads, crops, rolls and
    /// window re-groupings.
    pub fn gather(&self, shape: &[usize], index: Rc<[usize]>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(contract(format!(
                "gather: index of length {} for output shape {shape:?}",
                index.len()
            )));
        }
        let src = self.data();
        let mut out = Vec::with_capacity(n);
        for &i in index.iter() {
            if i == GATHER_ZERO {
                out.push(0.0);
            } else if i < src.len() {
                out.push(src[i]);
            } else {
                return Err(contract(format!(
                    "gather: index {i} out of range {}",
                    src.len()
                )));
            }
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            out,
            Op::Gather {
                src: self.clone(),
                index,
            },
        ))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes
                .iter()
                .any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
        {
            return Err(contract(format!(
                "permute: {axes:?} is not a permutation of rank {rank}"
            )));
        }
        let mut strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
        let n = self.numel();
        let mut index = Vec::with_capacity(n);
        let mut coord = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..n {
            index.push(offset);
            for ax in (0..rank).rev() {
                coord[ax] += 1;
                offset += out_strides[ax];
                if coord[ax] < out_shape[ax] {
                    break;
                }
                offset -= out_strides[ax] * out_shape[ax];
                coord[ax] = 0;
            }
        }
        self.gather(&out_shape, index.into())
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let rank = self.rank();
        if rank < 2 {
            return Err(contract("transpose_last2 needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(contract(format!(
                "narrow: axis {axis} range {start}+{len} out of shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            index.extend(base..base + len * inner);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        self.gather(&out_shape, index.into())
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| contract("concat of zero tensors"))?;
        let shape = first.shape();
        if axis >= shape.len() {
            return Err(contract(format!(
                "concat: axis {axis} out of rank {}",
                shape.len()
            )));
        }
        for p in parts {
            let s = p.shape();
            let agrees = s.len() == shape.len()
                && s.iter()
                    .zip(shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: shape.to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let block = p.shape()[axis] * inner;
                out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = total_axis;
        Ok(Tensor::from_op(
            out_shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![1], vec![s], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            Op::Reshape(self.clone()),
        ))
    }
}
