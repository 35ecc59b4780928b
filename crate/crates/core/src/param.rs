//! Trainable parameters and the [`Module`] traversal used by the optimizer,
//! the gradient checker and checkpointing.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// A named trainable tensor with its ADAM moment accumulators.
#[derive(Debug, Clone)]
pub struct Parameter {
    name: String,
    value: Tensor,
    pub(crate) adam_m: Vec<f64>,
    pub(crate) adam_v: Vec<f64>,
    pub(crate) step_count: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<Parameter> {
        let value = Tensor::leaf(shape, data)?;
        let n = value.numel();
        Ok(Parameter {
            name: name.into(),
            value,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step_count: 0,
        })
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Parameter {
        let n = shape.iter().product();
        Parameter::new(name, shape, vec![0.0; n]).expect("zeros: invalid shape")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// The tracked leaf tensor to feed into a forward pass.
    pub fn tensor(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.value.grad()
    }

    pub fn zero_grad(&self) {
        self.value.zero_grad();
    }

    pub fn adam_m(&self) -> &[f64] {
        &self.adam_m
    }

    pub fn adam_v(&self) -> &[f64] {
        &self.adam_v
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Replaces the value with a fresh leaf. Graphs built from the old value
    /// keep seeing the old data; the gradient is cleared.
    pub fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.value.numel() {
            return Err(contract(format!(
                "parameter {}: {} values for shape {:?}",
                self.name,
                data.len(),
                self.shape()
            )));
        }
        self.value = Tensor::leaf(self.value.shape(), data)?;
        Ok(())
    }

    pub(crate) fn set_adam_state(
        &mut self,
        m: Vec<f64>,
        v: Vec<f64>,
        step_count: u64,
    ) -> Result<()> {
        if m.len() != self.value.numel() || v.len() != self.value.numel() {
            return Err(contract(format!(
                "parameter {}: moment size mismatch",
                self.name
            )));
        }
        self.adam_m = m;
        self.adam_v = v;
        self.step_count = step_count;
        Ok(())
    }
}

/// Anything that owns parameters. Traversal order is fixed and defines the
/// order parameters appear in checkpoints.
pub trait Module {
    fn visit_params<'a>(&'a self, out: &mut Vec<&'a Parameter>);
    fn visit_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter>);

    fn parameters(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        self.visit_params(&mut out);
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        self.visit_params_mut(&mut out);
        out
    }

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.data().len()).sum()
    }

    fn zero_grad(&self) {
        self.parameters().iter().for_each(|p| p.zero_grad());
    }
}

impl Module for Parameter {
    fn visit_params<'a>(&'a self, out: &mut Vec<&'a Parameter>) {
        out.push(self);
    }
    fn visit_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter>) {
        out.push(self);
    }
}

impl<T: Module> Module for Vec<T> {
    fn visit_params<'a>(&'a self, out: &mut Vec<&'a Parameter>) {
        self.iter().for_each(|m| m.visit_params(out));
    }
    fn visit_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter>) {
        self.iter_mut().for_each(|m| m.visit_params_mut(out));
    }
}

impl<T: Module> Module for Option<T> {
    fn visit_params<'a>(&'a self, out: &mut Vec<&'a Parameter>) {
        if let Some(m) = self {
            m.visit_params(out);
        }
    }
    fn visit_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter>) {
        if let Some(m) = self {
            m.visit_params_mut(out);
        }
    }
}

/// Implements [`Module`] by visiting the listed fields in order.
#[macro_export]
macro_rules! impl_module {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::param::Module for $ty {
            fn visit_params<'a>(&'a self, out: &mut Vec<&'a $crate::param::Parameter>) {
                $( $crate::param::Module::visit_params(&self.$field, out); )*
            }
            fn visit_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut $crate::param::Parameter>) {
                $( $crate::param::Module::visit_params_mut(&mut self.$field, out); )*
            }
        }
    };
}

/// Seeded source of initial parameter values.
///
/// Named draws come from a stream keyed by the name, so a parameter's initial
/// value does not depend on which other parameters were built before it.
pub struct Init {
    seed: u64,
    rng: ChaCha8Rng,
    seen: HashMap<String, u64>,
}

/// FNV-1a over the name and its repeat index.
fn stream_key(name: &str, repeat: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes().chain(repeat.to_le_bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Init {
    pub fn new(seed: u64) -> Init {
        Init {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            seen: HashMap::new(),
        }
    }

    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64) -> Parameter {
        let name = name.into();
        let repeat = self.seen.entry(name.clone()).or_insert(0);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream_key(&name, *repeat));
        *repeat += 1;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Parameter::new(name, shape, data).expect("uniform: invalid shape")
    }

    /// Projection weight `fan_in × fan_out`, uniform in ±1/√fan_in.
    pub fn weight(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize) -> Parameter {
        self.uniform(name, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.rng.sample(StandardNormal)).collect()
    }
}
