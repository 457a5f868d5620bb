//! Feedforward change detector: twin shared-weight extractor, bi-temporal
//! fusion, spatial pyramid and change head.

mod backbone;
mod fusion;
mod spb;

pub use backbone::Backbone;
pub use fusion::{Fusion, FusionMode, FusionParts};
pub use spb::{branch_widths, SpatialPyramid};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::layers::Conv2d;
use crate::diffcore::{Graph, Mode, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub reduction: usize,
    pub spb_scales: Vec<usize>,
    pub use_spb: bool,
    pub head_hidden: usize,
    pub num_classes: usize,
    pub fusion: FusionMode,
    /// Probabilities at or above this value are called "changed".
    pub threshold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 32,
            reduction: 4,
            spb_scales: vec![1, 2, 4],
            use_spb: true,
            head_hidden: 32,
            num_classes: 4,
            fusion: FusionMode::Dam,
            threshold: 0.5,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height % 4 != 0 || self.width % 4 != 0 || self.height < 8 || self.width < 8 {
            return Err(Error::config("height/width", "must be multiples of 4 and at least 8"));
        }
        if self.channels < 2 || self.channels % 2 != 0 {
            return Err(Error::config("channels", "must be even and at least 2"));
        }
        if self.reduction == 0 || self.channels % self.reduction != 0 {
            return Err(Error::config("reduction", "channels must be divisible by the reduction"));
        }
        let limit = self.height.min(self.width) / 4;
        if self.use_spb && (self.spb_scales.is_empty() || self.spb_scales.iter().any(|&s| s == 0 || s > limit)) {
            return Err(Error::config("spb_scales", format!("scales must lie in 1..={limit}")));
        }
        if self.head_hidden == 0 {
            return Err(Error::config("head_hidden", "must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (self.height / 4, self.width / 4)
    }
}

/// Nodes produced by one detector pass.
#[derive(Debug, Clone, Copy)]
pub struct DetectorOutputs {
    /// `2N×C×h×w`: t1 features stacked above t2 features.
    pub features: NodeId,
    pub features_t1: NodeId,
    pub features_t2: NodeId,
    pub fusion: FusionParts,
    /// `N×C×h×w` fused change features.
    pub change_features: NodeId,
    /// `N×1×h×w` logits before upsampling.
    pub change_logits_low: NodeId,
    /// `N×1×H×W`.
    pub change_logits: NodeId,
    pub change_prob: NodeId,
}

/// `conv3×3 → relu → conv1×1` to one change logit per position.
#[derive(Debug, Clone)]
pub struct ChangeHead {
    hidden: Conv2d,
    out: Conv2d,
}

impl ChangeHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Conv2d::new(store, &format!("{prefix}.hidden"), cin, hidden, 3, 1, true, rng)?,
            out: Conv2d::new(store, &format!("{prefix}.out"), hidden, 1, 1, 1, true, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.relu(h);
        self.out.forward(g, store, h)
    }
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub config: DetectorConfig,
    pub backbone: Backbone,
    pub fusion: Fusion,
    pub spb: Option<SpatialPyramid>,
    pub head: ChangeHead,
}

impl Detector {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &DetectorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let backbone = Backbone::new(store, "detector.backbone", c, rng)?;
        let fusion = Fusion::new(store, "detector.fusion", config.fusion, c, config.reduction, rng)?;
        let spb = if config.use_spb {
            Some(SpatialPyramid::new(store, "detector.spb", c, &config.spb_scales, rng)?)
        } else {
            None
        };
        let head_in = spb.as_ref().map_or(c, SpatialPyramid::out_channels);
        Ok(Self {
            config: config.clone(),
            backbone,
            fusion,
            spb,
            head: ChangeHead::new(store, "detector.head", head_in, config.head_hidden, rng)?,
        })
    }

    /// Runs the shared extractor once over both dates stacked on the batch axis.
    pub fn extract_pair<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x1: NodeId,
        x2: NodeId,
        mode: Mode,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        if g.value(x1).shape() != g.value(x2).shape() {
            return Err(Error::shape(
                "detect",
                format!("{:?} vs {:?}", g.value(x1).shape(), g.value(x2).shape()),
            ));
        }
        let n = g.value(x1).shape()[0];
        let both = g.concat(&[x1, x2], 0)?;
        let f = self.backbone.forward(g, store, both, mode)?;
        let f1 = g.narrow(f, 0, 0, n)?;
        let f2 = g.narrow(f, 0, n, n)?;
        Ok((f, f1, f2))
    }

    pub fn detect<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x1: NodeId,
        x2: NodeId,
        mode: Mode,
    ) -> Result<DetectorOutputs> {
        let (_, _, h, w) = g.value(x1).dims4()?;
        let (features, f1, f2) = self.extract_pair(g, store, x1, x2, mode)?;
        let fusion = self.fusion.forward(g, store, f1, f2, mode)?;
        let cf = fusion.output;
        let pyramid = match &self.spb {
            Some(spb) => spb.forward(g, store, cf, mode)?,
            None => cf,
        };
        let low = self.head.forward(g, store, pyramid)?;
        let logits = g.upsample_bilinear(low, h, w)?;
        let prob = g.sigmoid(logits);
        Ok(DetectorOutputs {
            features,
            features_t1: f1,
            features_t2: f2,
            fusion,
            change_features: cf,
            change_logits_low: low,
            change_logits: logits,
            change_prob: prob,
        })
    }

    /// Inference on `N×3×H×W` image batches; returns `N×1×H×W` probabilities.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, x1: Tensor<T>, x2: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let a = g.constant(x1);
        let b = g.constant(x2);
        let out = self.detect(&mut g, store, a, b, Mode::Eval)?;
        Ok(g.value(out.change_prob).clone())
    }
}

/// `H×W×3` interleaved image(s) to an `N×3×H×W` tensor.
pub fn images_to_tensor<T: Scalar>(images: &[&[f32]], h: usize, w: usize) -> Result<Tensor<T>> {
    let n = images.len();
    let mut data = vec![T::zero(); n * 3 * h * w];
    for (s, img) in images.iter().enumerate() {
        if img.len() != h * w * 3 {
            return Err(Error::shape("images_to_tensor", format!("image has {} values for {h}x{w}x3", img.len())));
        }
        for p in 0..h * w {
            for c in 0..3 {
                data[(s * 3 + c) * h * w + p] = T::lit(img[p * 3 + c] as f64);
            }
        }
    }
    Tensor::from_vec(&[n, 3, h, w], data)
}

/// Binary change map with ties at the threshold counted as changed.
pub fn binarize<T: Scalar>(prob: &[T], threshold: f64) -> Vec<u8> {
    prob.iter().map(|&p| u8::from(p.as_f64() >= threshold)).collect()
}
