use rand::Rng;

use crate::diffcore::layers::{BatchNorm2d, Conv2d, ConvBnRelu};
use crate::diffcore::{Graph, Mode, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Small two-resolution extractor: a stride-2 stem, parallel branches at
/// strides 4 and 8 with one exchange between them, merged back at stride 4.
#[derive(Debug, Clone)]
pub struct Backbone {
    stem: ConvBnRelu,
    to_high: ConvBnRelu,
    to_low: ConvBnRelu,
    high_block: ConvBnRelu,
    low_block: ConvBnRelu,
    low_to_high: (Conv2d, BatchNorm2d),
    high_to_low: (Conv2d, BatchNorm2d),
    merge: ConvBnRelu,
    pub channels: usize,
}

impl Backbone {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let c = channels;
        let half = (c / 2).max(1);
        let n = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            stem: ConvBnRelu::new(store, &n("stem"), 3, half, 3, 2, rng)?,
            to_high: ConvBnRelu::new(store, &n("to_high"), half, c, 3, 2, rng)?,
            to_low: ConvBnRelu::new(store, &n("to_low"), c, c, 3, 2, rng)?,
            high_block: ConvBnRelu::new(store, &n("high_block"), c, c, 3, 1, rng)?,
            low_block: ConvBnRelu::new(store, &n("low_block"), c, c, 3, 1, rng)?,
            low_to_high: (
                Conv2d::new(store, &n("low_to_high.conv"), c, c, 1, 1, false, rng)?,
                BatchNorm2d::new(store, &n("low_to_high.bn"), c)?,
            ),
            high_to_low: (
                Conv2d::new(store, &n("high_to_low.conv"), c, c, 3, 2, false, rng)?,
                BatchNorm2d::new(store, &n("high_to_low.bn"), c)?,
            ),
            merge: ConvBnRelu::new(store, &n("merge"), 2 * c, c, 1, 1, rng)?,
            channels,
        })
    }

    /// `N×3×H×W → N×C×(H/4)×(W/4)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId, mode: Mode) -> Result<NodeId> {
        let (_, cin, h, w) = g.value(x).dims4()?;
        if cin != 3 {
            return Err(Error::shape("extract_features", format!("expected 3 input channels, got {cin}")));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape("extract_features", format!("{h}x{w} is not divisible by 4")));
        }
        let s = self.stem.forward(g, store, x, mode)?;
        let high = self.to_high.forward(g, store, s, mode)?;
        let low = self.to_low.forward(g, store, high, mode)?;
        let high = self.high_block.forward(g, store, high, mode)?;
        let low = self.low_block.forward(g, store, low, mode)?;

        let (_, _, hh, hw) = g.value(high).dims4()?;
        let (_, _, lh, lw) = g.value(low).dims4()?;
        let l2h = self.low_to_high.0.forward(g, store, low)?;
        let l2h = self.low_to_high.1.forward(g, store, l2h, mode)?;
        let l2h = g.upsample_bilinear(l2h, hh, hw)?;
        let h2l = self.high_to_low.0.forward(g, store, high)?;
        let h2l = self.high_to_low.1.forward(g, store, h2l, mode)?;
        if g.value(h2l).shape()[2..] != [lh, lw] {
            return Err(Error::shape("extract_features", "branch resolutions disagree"));
        }
        let high = g.add(high, l2h)?;
        let high = g.relu(high);
        let low = g.add(low, h2l)?;
        let low = g.relu(low);

        let low_up = g.upsample_bilinear(low, hh, hw)?;
        let cat = g.concat(&[high, low_up], 1)?;
        self.merge.forward(g, store, cat, mode)
    }
}
