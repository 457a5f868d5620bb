use rand::Rng;

use crate::diffcore::layers::{BatchNorm2d, Conv2d};
use crate::diffcore::{Graph, Mode, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Output widths of the pyramid branches: `channels` split as evenly as
/// possible, earlier branches taking the remainder, so the block always
/// emits `2·channels` maps.
pub fn branch_widths(channels: usize, branches: usize) -> Vec<usize> {
    (0..branches)
        .map(|i| channels / branches + usize::from(i < channels % branches))
        .collect()
}

#[derive(Debug, Clone)]
struct Branch {
    scale: usize,
    conv: Conv2d,
    bn: BatchNorm2d,
}

/// Spatial pyramid: per scale `s`, pool to `s×s`, project, normalize, upsample
/// back, then concatenate all branches with the input.
#[derive(Debug, Clone)]
pub struct SpatialPyramid {
    branches: Vec<Branch>,
    pub channels: usize,
}

impl SpatialPyramid {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        scales: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if scales.is_empty() || scales.contains(&0) {
            return Err(Error::config("spb_scales", "need at least one positive scale"));
        }
        let widths = branch_widths(channels, scales.len());
        if widths.contains(&0) {
            return Err(Error::config("spb_scales", "more scales than channels"));
        }
        let branches = scales
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (&scale, &width))| {
                Ok(Branch {
                    scale,
                    conv: Conv2d::new(store, &format!("{prefix}.branch{i}.conv"), channels, width, 1, 1, false, rng)?,
                    bn: BatchNorm2d::new(store, &format!("{prefix}.branch{i}.bn"), width)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { branches, channels })
    }

    pub fn out_channels(&self) -> usize {
        2 * self.channels
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId, mode: Mode) -> Result<NodeId> {
        let (_, _, h, w) = g.value(x).dims4()?;
        let mut parts = vec![x];
        for b in &self.branches {
            if b.scale > h || b.scale > w {
                return Err(Error::config("spb_scales", format!("scale {} exceeds feature map {h}x{w}", b.scale)));
            }
            let p = g.adaptive_avg_pool(x, b.scale, b.scale)?;
            let p = b.conv.forward(g, store, p)?;
            let p = b.bn.forward(g, store, p, mode)?;
            let p = g.relu(p);
            parts.push(g.upsample_bilinear(p, h, w)?);
        }
        g.concat(&parts, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths_sum_to_channels() {
        assert_eq!(branch_widths(32, 3), vec![11, 11, 10]);
        assert_eq!(branch_widths(12, 3), vec![4, 4, 4]);
        for c in 3..64 {
            for b in 1..=3 {
                assert_eq!(branch_widths(c, b).iter().sum::<usize>(), c);
            }
        }
    }
}
