use rand::Rng;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::graph::{Graph, Mode, NodeId};
use super::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Square `k×k` convolution with "same" padding for odd `k`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add_kaiming(format!("{name}.weight"), &[cout, cin, k, k], cin * k * k, rng)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            pad: k / 2,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn out_channels<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.value(self.weight).shape()[0]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()), true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[channels], T::one()), false)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId, mode: Mode) -> Result<NodeId> {
        g.batch_norm(store, x, self.gamma, self.beta, self.running_mean, self.running_var, mode)
    }
}

/// `conv → BN → relu`; the convolution carries no bias.
#[derive(Debug, Clone, Copy)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, k, stride, false, rng)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId, mode: Mode) -> Result<NodeId> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y, mode)?;
        Ok(g.relu(y))
    }
}
