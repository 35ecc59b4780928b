//! Shared layers: affine projection, layer norm, feed-forward network, and
//! channel-first/token layout conversion.

use crate::error::{Error, Result};
use crate::impl_module;
use crate::param::{Init, Parameter};
use crate::tensor::{Tensor, GATHER_ZERO};

/// `y = xW + b` over the last axis of `x`.
pub fn affine_project(x: &Tensor, weight: &Parameter, bias: &Parameter) -> Result<Tensor> {
    let (k, p) = match weight.shape() {
        [k, p] => (*k, *p),
        s => {
            return Err(Error::Dimension {
                op: "affine_project",
                lhs: x.shape().to_vec(),
                rhs: s.to_vec(),
            })
        }
    };
    if x.shape().last() != Some(&k) || bias.shape() != [p] {
        return Err(Error::Dimension {
            op: "affine_project",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    x.matmul(weight.tensor())?.add(bias.tensor())
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}
impl_module!(Linear { weight, bias });

impl Linear {
    /// Uniform(±1/√fan_in) weight, zero bias.
    pub fn new(name: &str, fan_in: usize, fan_out: usize, init: &mut Init) -> Linear {
        Linear {
            weight: init.weight(format!("{name}.weight"), fan_in, fan_out),
            bias: Parameter::zeros(format!("{name}.bias"), &[fan_out]),
        }
    }

    pub fn zeroed(name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            weight: Parameter::zeros(format!("{name}.weight"), &[fan_in, fan_out]),
            bias: Parameter::zeros(format!("{name}.bias"), &[fan_out]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        affine_project(x, &self.weight, &self.bias)
    }

    /// Zeroes weight and bias so the layer outputs exactly zero.
    pub fn zero(&mut self) {
        let (w, b) = (self.weight.data().len(), self.bias.data().len());
        self.weight.set_data(vec![0.0; w]).expect("same size");
        self.bias.set_data(vec![0.0; b]).expect("same size");
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
}
impl_module!(LayerNorm { gamma, beta });

impl LayerNorm {
    pub fn new(name: &str, d: usize) -> LayerNorm {
        LayerNorm {
            gamma: Parameter::new(format!("{name}.gamma"), &[d], vec![1.0; d]).expect("positive d"),
            beta: Parameter::zeros(format!("{name}.beta"), &[d]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(self.gamma.tensor(), self.beta.tensor())
    }
}

/// Pre-norm slot: identity when normalization is switched off.
pub fn maybe_norm(norm: &Option<LayerNorm>, x: &Tensor) -> Result<Tensor> {
    match norm {
        Some(n) => n.forward(x),
        None => Ok(x.clone()),
    }
}

/// Two-layer MLP `d → ratio·d → d` with GELU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub expand: Linear,
    pub contract: Linear,
}
impl_module!(FeedForward { expand, contract });

impl FeedForward {
    pub fn new(name: &str, d: usize, ratio: usize, init: &mut Init) -> FeedForward {
        FeedForward {
            expand: Linear::new(&format!("{name}.fc1"), d, ratio * d, init),
            contract: Linear::new(&format!("{name}.fc2"), ratio * d, d, init),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.contract.forward(&self.expand.forward(x)?.gelu())
    }
}

/// `d×H×W → (H·W)×d`.
pub fn chw_to_tokens(f: &Tensor) -> Result<Tensor> {
    let (d, h, w) = chw_dims(f)?;
    f.permute(&[1, 2, 0])?.reshape(&[h * w, d])
}

/// `(H·W)×d → d×H×W`.
pub fn tokens_to_chw(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let d = *t.shape().last().unwrap();
    t.reshape(&[h, w, d])?.permute(&[2, 0, 1])
}

pub fn chw_dims(f: &Tensor) -> Result<(usize, usize, usize)> {
    match f.shape() {
        [d, h, w] => Ok((*d, *h, *w)),
        s => Err(crate::error::contract(format!(
            "expected a d×H×W feature map, got shape {s:?}"
        ))),
    }
}

/// Affine map over the channel axis of a `d×H×W` map.
pub fn project_channels(f: &Tensor, layer: &Linear) -> Result<Tensor> {
    let (_, h, w) = chw_dims(f)?;
    tokens_to_chw(&layer.forward(&chw_to_tokens(f)?)?, h, w)
}

/// Zero-pads a `d×H×W` map at the bottom/right to `d×hp×wp`.
pub fn pad_chw(f: &Tensor, hp: usize, wp: usize) -> Result<Tensor> {
    let (d, h, w) = chw_dims(f)?;
    if hp < h || wp < w {
        return Err(crate::error::contract(format!(
            "cannot pad {h}×{w} down to {hp}×{wp}"
        )));
    }
    if (hp, wp) == (h, w) {
        return Ok(f.clone());
    }
    let mut index = Vec::with_capacity(d * hp * wp);
    for c in 0..d {
        for y in 0..hp {
            for x in 0..wp {
                index.push(if y < h && x < w {
                    (c * h + y) * w + x
                } else {
                    GATHER_ZERO
                });
            }
        }
    }
    f.gather(&[d, hp, wp], index.into())
}

/// Top-left `d×h×w` window of a `d×H×W` map.
pub fn crop_chw(f: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, fh, fw) = chw_dims(f)?;
    if (fh, fw) == (h, w) {
        return Ok(f.clone());
    }
    f.narrow(1, 0, h)?.narrow(2, 0, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weight_outputs_bias() {
        let mut init = Init::new(1);
        let x = Tensor::new(&[4, 3], init.normal_vec(12)).unwrap();
        let w = Parameter::zeros("w", &[3, 2]);
        let b = Parameter::new("b", &[2], vec![1.0, 2.0]).unwrap();
        let y = affine_project(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[4, 2]);
        for row in y.data().chunks(2) {
            assert_eq!(row, &[1.0, 2.0]);
        }
    }

    #[test]
    fn identity_weight_returns_input() {
        let mut init = Init::new(2);
        let x = Tensor::new(&[2, 5, 3], init.normal_vec(30)).unwrap();
        let eye = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        let w = Parameter::new("w", &[3, 3], eye).unwrap();
        let b = Parameter::zeros("b", &[3]);
        let y = affine_project(&x, &w, &b).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn matches_matmul_plus_bias_oracle() {
        let mut init = Init::new(3);
        let x = init.normal_vec(6);
        let w = init.normal_vec(6);
        let b = init.normal_vec(2);
        let y = affine_project(
            &Tensor::new(&[2, 3], x.clone()).unwrap(),
            &Parameter::new("w", &[3, 2], w.clone()).unwrap(),
            &Parameter::new("b", &[2], b.clone()).unwrap(),
        )
        .unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want: f64 = (0..3).map(|k| x[i * 3 + k] * w[k * 2 + j]).sum::<f64>() + b[j];
                assert!((y.data()[i * 2 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inner_extent_mismatch_is_a_dimension_error() {
        let x = Tensor::zeros(&[2, 4]);
        let w = Parameter::zeros("w", &[3, 2]);
        let b = Parameter::zeros("b", &[2]);
        assert!(matches!(
            affine_project(&x, &w, &b),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn token_layout_round_trip() {
        let mut init = Init::new(4);
        let f = Tensor::new(&[3, 2, 5], init.normal_vec(30)).unwrap();
        let t = chw_to_tokens(&f).unwrap();
        assert_eq!(t.shape(), &[10, 3]);
        // token (y=1, x=2) channel 2
        assert_eq!(t.data()[(5 + 2) * 3 + 2], f.data()[2 * 10 + 5 + 2]);
        assert_eq!(tokens_to_chw(&t, 2, 5).unwrap().data(), f.data());
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let mut init = Init::new(5);
        let f = Tensor::new(&[2, 3, 5], init.normal_vec(30)).unwrap();
        let p = pad_chw(&f, 4, 8).unwrap();
        assert_eq!(p.shape(), &[2, 4, 8]);
        assert_eq!(p.data()[3 * 8], 0.0);
        assert_eq!(p.data()[7], 0.0);
        assert_eq!(crop_chw(&p, 3, 5).unwrap().data(), f.data());
    }
}
