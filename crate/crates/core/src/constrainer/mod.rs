//! Training-time constraints on the detector: change BCE, semantic
//! cross-entropy, pixel/region contrastive learning and the phenology-aware
//! contrastive term with its per-class centroid bank.

pub mod cluster;
pub mod contrast;
pub mod network;
pub mod sampling;

pub use cluster::{cluster_phenology, spherical_kmeans, ClassCentroids, ClusterConfig, PhenoCentroidBank, Reservoir};
pub use contrast::{
    clem_graph, clem_loss, infonce, plm_graph, plm_loss, region_prototypes, CentroidRow, ClemForm, ClemParams,
    GroupLayout, RegionPrototype,
};
pub use network::{Network, NetworkOutputs, Projection, SemanticHead};
pub use sampling::{select_samples, AnchorSample, ContrastiveBatch, PixelField, SampleMode, SamplingConfig, Task};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scenegen::SceneSample;

/// Feature stride of the extractor.
pub const STRIDE: usize = 4;
const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstrainerConfig {
    pub embed_dim: usize,
    pub proj_hidden: usize,
    pub sem_hidden: usize,
    pub tau: f64,
    pub min_region_pixels: usize,
    pub lambda_pp: f64,
    pub lambda_rr: f64,
    pub lambda_pr: f64,
    pub clem_form: ClemForm,
    pub sampling: SamplingConfig,
    pub cluster: ClusterConfig,
}

impl Default for ConstrainerConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            proj_hidden: 128,
            sem_hidden: 32,
            tau: 0.1,
            min_region_pixels: 8,
            lambda_pp: 1.0,
            lambda_rr: 1.0,
            lambda_pr: 1.0,
            clem_form: ClemForm::Separate,
            sampling: SamplingConfig::default(),
            cluster: ClusterConfig::default(),
        }
    }
}

impl ConstrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.proj_hidden == 0 || self.sem_hidden == 0 {
            return Err(Error::config("embed_dim/proj_hidden/sem_hidden", "must be positive"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau", "must be positive"));
        }
        for (name, v) in [
            ("lambda_pp", self.lambda_pp),
            ("lambda_rr", self.lambda_rr),
            ("lambda_pr", self.lambda_pr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be non-negative"));
            }
        }
        self.sampling.validate()?;
        self.cluster.validate()
    }

    pub fn clem_params(&self) -> ClemParams {
        ClemParams {
            tau: self.tau,
            lambda_pp: self.lambda_pp,
            lambda_rr: self.lambda_rr,
            lambda_pr: self.lambda_pr,
            form: self.clem_form,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_cd: f64,
    pub w_sem: f64,
    pub w_clem: f64,
    pub w_plm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_cd: 1.0,
            w_sem: 1.0,
            w_clem: 0.2,
            w_plm: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w_cd", self.w_cd),
            ("w_sem", self.w_sem),
            ("w_clem", self.w_clem),
            ("w_plm", self.w_plm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be non-negative"));
            }
        }
        if self.w_cd + self.w_sem + self.w_clem + self.w_plm <= 0.0 {
            return Err(Error::config("loss_weights", "at least one weight must be positive"));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy of probabilities against a binary map, with
/// probabilities clamped to `[1e-7, 1 − 1e-7]`.
pub fn cdcm_loss<T: Scalar>(prob: &[T], gt: &[u8]) -> Result<f64> {
    if prob.len() != gt.len() || prob.is_empty() {
        return Err(Error::shape("cdcm_loss", format!("{} probabilities vs {} labels", prob.len(), gt.len())));
    }
    let mut total = 0.0;
    for (&p, &y) in prob.iter().zip(gt) {
        let p = p.as_f64().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total -= match y {
            1 => p.ln(),
            0 => (1.0 - p).ln(),
            v => return Err(Error::Validation(format!("change label {v} is not binary"))),
        };
    }
    Ok(total / prob.len() as f64)
}

/// Mean softmax cross-entropy of `N×K×H×W` logits against class ids.
pub fn scm_loss<T: Scalar>(logits: &crate::Tensor<T>, targets: &[usize]) -> Result<f64> {
    let (n, k, h, w) = logits.dims4()?;
    let hw = h * w;
    if targets.len() != n * hw {
        return Err(Error::shape("scm_loss", format!("{} targets for {n}x{h}x{w}", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::Validation(format!("class id {bad} >= num_classes {k}")));
    }
    let v = logits.data();
    let mut total = 0.0;
    for s in 0..n {
        for p in 0..hw {
            let z: Vec<f64> = (0..k).map(|c| v[(s * k + c) * hw + p].as_f64()).collect();
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - z[targets[s * hw + p]];
        }
    }
    Ok(total / (n * hw) as f64)
}

/// Label of the pixel at the center of each `stride×stride` block.
pub fn downsample_labels(map: &[u8], h: usize, w: usize, stride: usize) -> Vec<u8> {
    let (lh, lw) = (h / stride, w / stride);
    let c = stride / 2;
    let mut out = Vec::with_capacity(lh * lw);
    for y in 0..lh {
        for x in 0..lw {
            out.push(map[(y * stride + c) * w + x * stride + c]);
        }
    }
    out
}

/// Full- and feature-resolution targets of a batch of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLabels {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    /// `N·H·W`.
    pub change: Vec<u8>,
    /// `2N·H·W`, all t1 maps then all t2 maps.
    pub sem: Vec<usize>,
    /// `N·h·w`.
    pub change_low: Vec<usize>,
    /// `2N·h·w`.
    pub sem_low: Vec<usize>,
    /// `2N·h·w`.
    pub stage_low: Vec<usize>,
}

impl BatchLabels {
    pub fn from_samples(samples: &[&SceneSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Validation("empty batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut labels = BatchLabels {
            batch: samples.len(),
            height: h,
            width: w,
            change: Vec::new(),
            sem: Vec::new(),
            change_low: Vec::new(),
            sem_low: Vec::new(),
            stage_low: Vec::new(),
        };
        for s in samples {
            if (s.height, s.width) != (h, w) {
                return Err(Error::Ingestion {
                    sample: s.sample_id.clone(),
                    message: format!("{}x{} differs from batch size {h}x{w}", s.height, s.width),
                });
            }
            labels.change.extend_from_slice(&s.change);
            labels
                .change_low
                .extend(downsample_labels(&s.change, h, w, STRIDE).into_iter().map(usize::from));
        }
        for t in 0..2 {
            for s in samples {
                let (sem, stage) = if t == 0 { (&s.sem_t1, &s.stage_t1) } else { (&s.sem_t2, &s.stage_t2) };
                labels.sem.extend(sem.iter().map(|&c| usize::from(c)));
                labels.sem_low.extend(downsample_labels(sem, h, w, STRIDE).into_iter().map(usize::from));
                labels
                    .stage_low
                    .extend(downsample_labels(stage, h, w, STRIDE).into_iter().map(usize::from));
            }
        }
        Ok(labels)
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (self.height / STRIDE, self.width / STRIDE)
    }
}

/// Rows of a `N×D×h×w` embedding tensor as `f64`, matching [`Graph::to_rows`].
pub fn embedding_rows<T: Scalar>(emb: &crate::Tensor<T>) -> Result<Vec<f64>> {
    let (n, d, h, w) = emb.dims4()?;
    let hw = h * w;
    let v = emb.data();
    let mut out = vec![0.0; n * hw * d];
    for s in 0..n {
        for c in 0..d {
            for p in 0..hw {
                out[(s * hw + p) * d + c] = v[(s * d + c) * hw + p].as_f64();
            }
        }
    }
    Ok(out)
}

/// Softmax probability of each row's true class from `N×K×h×w` logits.
pub fn true_class_probability<T: Scalar>(logits: &crate::Tensor<T>, labels: &[usize]) -> Result<Vec<f64>> {
    let (n, k, h, w) = logits.dims4()?;
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(Error::shape("true_class_probability", format!("{} labels for {n}x{h}x{w}", labels.len())));
    }
    let v = logits.data();
    Ok((0..n * hw)
        .map(|r| {
            let (s, p) = (r / hw, r % hw);
            let z: Vec<f64> = (0..k).map(|c| v[(s * k + c) * hw + p].as_f64()).collect();
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|x| (x - m).exp()).sum();
            (z[labels[r]] - m).exp() / sum
        })
        .collect())
}

/// Probability of each row's true change state from `N×1×h×w` logits.
pub fn true_change_probability<T: Scalar>(logits: &crate::Tensor<T>, labels: &[usize]) -> Vec<f64> {
    logits
        .data()
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let p = 1.0 / (1.0 + (-z.as_f64()).exp());
            if y == 1 {
                p
            } else {
                1.0 - p
            }
        })
        .collect()
}

/// Contrastive loss nodes of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ContrastiveNodes {
    pub clem: Option<NodeId>,
    pub plm: Option<NodeId>,
    /// Anchors drawn per task, for diagnostics.
    pub anchors: Vec<(Task, usize)>,
}

/// Samples the contrastive batches of all tasks and records their losses.
///
/// The segmentation-task CLEM batch and the PLM batch are drawn from the same
/// RNG state, so with one centroid per class both contain the same rows.
#[allow(clippy::too_many_arguments)]
pub fn contrastive_losses<T: Scalar>(
    g: &mut Graph<T>,
    out: &NetworkOutputs,
    labels: &BatchLabels,
    config: &ConstrainerConfig,
    bank: Option<&PhenoCentroidBank>,
    with_clem: bool,
    with_plm: bool,
    rng: &mut (impl Rng + Clone),
) -> Result<ContrastiveNodes> {
    let mut nodes = ContrastiveNodes::default();
    if !with_clem && !with_plm {
        return Ok(nodes);
    }
    let (h, w) = labels.feature_size();
    let dim = config.embed_dim;
    let n = labels.batch;
    let params = config.clem_params();
    let centroid_rows = bank.map(PhenoCentroidBank::negative_rows).unwrap_or_default();

    let seg_rows = g.to_rows(out.emb_seg)?;
    let seg_values = embedding_rows(g.value(out.emb_seg))?;
    let seg_hard = true_class_probability(g.value(out.sem_logits_low), &labels.sem_low)?;
    let seg_layout = GroupLayout {
        rows_per_group: h * w,
        images: n,
        temporals: 2,
    };
    let plm_rng = rng.clone();

    if with_clem {
        let mut task_losses = Vec::new();
        let seg_field = PixelField {
            dim,
            embeddings: &seg_values,
            labels: &labels.sem_low,
            hardness: &seg_hard,
            centroids: None,
        };
        let batch = select_samples(&seg_field, Task::Segmentation, SampleMode::Clem, &config.sampling, rng)?;
        nodes.anchors.push((Task::Segmentation, batch.samples.len()));
        if !batch.is_empty() {
            let protos =
                region_prototypes(&seg_values, dim, &labels.sem_low, seg_layout, config.min_region_pixels)?;
            task_losses.push(clem_graph(
                g,
                seg_rows,
                seg_layout,
                &batch,
                &protos.prototypes,
                &centroid_rows,
                &params,
            )?);
        }

        let cd_rows = g.to_rows(out.emb_cd)?;
        let cd_values = embedding_rows(g.value(out.emb_cd))?;
        let cd_hard = true_change_probability(g.value(out.detector.change_logits_low), &labels.change_low);
        let cd_layout = GroupLayout {
            rows_per_group: h * w,
            images: n,
            temporals: 1,
        };
        let cd_field = PixelField {
            dim,
            embeddings: &cd_values,
            labels: &labels.change_low,
            hardness: &cd_hard,
            centroids: None,
        };
        let cd_protos = region_prototypes(&cd_values, dim, &labels.change_low, cd_layout, config.min_region_pixels)?;
        for task in [Task::CdChanged, Task::CdUnchanged] {
            let batch = select_samples(&cd_field, task, SampleMode::Clem, &config.sampling, rng)?;
            nodes.anchors.push((task, batch.samples.len()));
            if !batch.is_empty() {
                task_losses.push(clem_graph(
                    g,
                    cd_rows,
                    cd_layout,
                    &batch,
                    &cd_protos.prototypes,
                    &[],
                    &params,
                )?);
            }
        }
        if !task_losses.is_empty() {
            let wgt = T::lit(1.0 / task_losses.len() as f64);
            let terms: Vec<(T, NodeId)> = task_losses.iter().map(|&l| (wgt, l)).collect();
            nodes.clem = Some(g.weighted_sum(&terms)?);
        }
    }

    if with_plm {
        let bank = bank.ok_or_else(|| Error::Precondition("plm loss needs a centroid bank".into()))?;
        let assignment = bank.assign(&seg_values, dim, &labels.sem_low);
        let field = PixelField {
            dim,
            embeddings: &seg_values,
            labels: &labels.sem_low,
            hardness: &seg_hard,
            centroids: Some(&assignment),
        };
        let mut prng = plm_rng;
        let batch = select_samples(&field, Task::Segmentation, SampleMode::Plm, &config.sampling, &mut prng)?;
        if !batch.is_empty() {
            nodes.plm = Some(plm_graph(g, seg_rows, &batch, &centroid_rows, config.tau)?);
        }
    }
    Ok(nodes)
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;
    use crate::Tensor;

    #[test]
    fn cdcm_worked_values() {
        assert_relative_eq!(cdcm_loss(&[0.5f64; 4], &[0, 1, 1, 0]).unwrap(), 2f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(cdcm_loss(&[0.9f64], &[1]).unwrap(), 0.105_360_515_657_826_3, epsilon = 1e-12);
        let near = cdcm_loss(&[1.0f64, 0.0], &[1, 0]).unwrap();
        assert!(near > 0.0 && near < 1e-6);
        assert!(matches!(cdcm_loss(&[0.5f64], &[2]), Err(Error::Validation(_))));
    }

    #[test]
    fn scm_worked_values() {
        let uniform = Tensor::<f64>::zeros(&[1, 4, 2, 2]);
        assert_relative_eq!(scm_loss(&uniform, &[0, 1, 2, 3]).unwrap(), 4f64.ln(), epsilon = 1e-12);
        let gap = Tensor::from_vec(&[1, 2, 1, 1], vec![1.0f64, 0.0]).unwrap();
        assert_relative_eq!(scm_loss(&gap, &[0]).unwrap(), 0.313_261_687_518_222_8, epsilon = 1e-12);
        let sure = Tensor::from_vec(&[1, 2, 1, 1], vec![20.0f64, -20.0]).unwrap();
        assert!(scm_loss(&sure, &[0]).unwrap() < 1e-15);
        assert!(matches!(scm_loss(&gap, &[2]), Err(Error::Validation(_))));
    }

    #[test]
    fn downsample_takes_block_centers() {
        let map: Vec<u8> = (0..64).map(|i| i as u8).collect();
        assert_eq!(downsample_labels(&map, 8, 8, 4), vec![18, 22, 50, 54]);
    }

    #[test]
    fn weights_reject_all_zero() {
        let w = LossWeights {
            w_cd: 0.0,
            w_sem: 0.0,
            w_clem: 0.0,
            w_plm: 0.0,
        };
        assert!(w.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
