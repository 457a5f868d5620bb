//! Bi-temporal fusion blocks: the differential attention module and the two
//! plain baselines it is ablated against.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::layers::{Conv2d, ConvBnRelu};
use crate::diffcore::{Graph, Mode, NodeId, ParamStore, Reduce};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Dam,
    Concat,
    Subtract,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Dam, FusionMode::Concat, FusionMode::Subtract];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Dam => "dam",
            FusionMode::Concat => "concat",
            FusionMode::Subtract => "subtract",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dam" => Ok(FusionMode::Dam),
            "concat" => Ok(FusionMode::Concat),
            "subtract" => Ok(FusionMode::Subtract),
            other => Err(Error::config("fusion", format!("unknown mode `{other}`"))),
        }
    }
}

/// Two-layer difference branch `conv3×3 → BN → relu → conv3×3`.
#[derive(Debug, Clone)]
struct DiffBranch {
    first: ConvBnRelu,
    second: Conv2d,
}

impl DiffBranch {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, c: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            first: ConvBnRelu::new(store, &format!("{name}.first"), cin, c, 3, 1, rng)?,
            second: Conv2d::new(store, &format!("{name}.second"), c, c, 3, 1, true, rng)?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId, mode: Mode) -> Result<NodeId> {
        let y = self.first.forward(g, store, x, mode)?;
        self.second.forward(g, store, y)
    }
}

#[derive(Debug, Clone)]
struct Attention {
    squeeze: Conv2d,
    excite: Conv2d,
    positional: Conv2d,
}

#[derive(Debug, Clone)]
pub struct Fusion {
    pub mode: FusionMode,
    diff: DiffBranch,
    attention: Option<Attention>,
}

/// Intermediate maps of one fusion pass, exposed for tests and diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct FusionParts {
    pub difference: NodeId,
    pub channel_attention: Option<NodeId>,
    pub positional_attention: Option<NodeId>,
    pub output: NodeId,
}

impl Fusion {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        mode: FusionMode,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = channels;
        let diff_in = if mode == FusionMode::Subtract { c } else { 2 * c };
        let diff = DiffBranch::new(store, &format!("{prefix}.diff"), diff_in, c, rng)?;
        let attention = if mode == FusionMode::Dam {
            let mid = (c / reduction).max(1);
            Some(Attention {
                squeeze: Conv2d::new(store, &format!("{prefix}.channel.squeeze"), 2 * c, mid, 1, 1, true, rng)?,
                excite: Conv2d::new(store, &format!("{prefix}.channel.excite"), mid, c, 1, 1, true, rng)?,
                positional: Conv2d::new(store, &format!("{prefix}.positional"), 2, 1, 7, 1, true, rng)?,
            })
        } else {
            None
        };
        Ok(Self { mode, diff, attention })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f1: NodeId,
        f2: NodeId,
        mode: Mode,
    ) -> Result<FusionParts> {
        if g.value(f1).shape() != g.value(f2).shape() {
            return Err(Error::shape(
                "dam",
                format!("{:?} vs {:?}", g.value(f1).shape(), g.value(f2).shape()),
            ));
        }
        match self.mode {
            FusionMode::Concat => {
                let cat = g.concat(&[f1, f2], 1)?;
                let d = self.diff.forward(g, store, cat, mode)?;
                Ok(FusionParts {
                    difference: d,
                    channel_attention: None,
                    positional_attention: None,
                    output: d,
                })
            }
            FusionMode::Subtract => {
                let delta = g.sub(f1, f2)?;
                let delta = g.abs(delta);
                let d = self.diff.forward(g, store, delta, mode)?;
                Ok(FusionParts {
                    difference: d,
                    channel_attention: None,
                    positional_attention: None,
                    output: d,
                })
            }
            FusionMode::Dam => {
                let att = self.attention.as_ref().expect("dam carries attention");
                let cat = g.concat(&[f1, f2], 1)?;
                let d = self.diff.forward(g, store, cat, mode)?;

                let pooled = g.spatial_reduce(cat, Reduce::Mean)?;
                let squeezed = att.squeeze.forward(g, store, pooled)?;
                let squeezed = g.relu(squeezed);
                let excited = att.excite.forward(g, store, squeezed)?;
                let channel = g.sigmoid(excited);

                let delta = g.sub(f1, f2)?;
                let delta = g.abs(delta);
                let mean = g.channel_reduce(delta, Reduce::Mean)?;
                let max = g.channel_reduce(delta, Reduce::Max)?;
                let stats = g.concat(&[mean, max], 1)?;
                let pos = att.positional.forward(g, store, stats)?;
                let positional = g.sigmoid(pos);

                let y = g.mul(d, channel)?;
                let out = g.mul(y, positional)?;
                Ok(FusionParts {
                    difference: d,
                    channel_attention: Some(channel),
                    positional_attention: Some(positional),
                    output: out,
                })
            }
        }
    }
}
