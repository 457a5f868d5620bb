use rand::Rng;
use serde::Serialize;

use crate::constrainer::{contrastive_losses, BatchLabels, LossWeights, Network, PhenoCentroidBank};
use crate::detector::{binarize, images_to_tensor};
use crate::diffcore::{Graph, Mode, NodeId, Sgd};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::scalar::Scalar;
use crate::scenegen::SceneSample;

/// Which loss terms an objective includes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveLosses {
    pub cd: bool,
    pub sem: bool,
    pub clem: bool,
    pub plm: bool,
}

impl ActiveLosses {
    pub fn for_stage(weights: &LossWeights, plm_stage: bool) -> Self {
        Self {
            cd: weights.w_cd > 0.0,
            sem: weights.w_sem > 0.0,
            clem: weights.w_clem > 0.0,
            plm: plm_stage && weights.w_plm > 0.0,
        }
    }
}

/// Per-component loss values; inactive components are `None` and omitted
/// from the log.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossComponents {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sem: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clem: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plm: Option<f64>,
    pub total: f64,
}

impl LossComponents {
    pub fn is_finite(&self) -> bool {
        [self.cd, self.sem, self.clem, self.plm]
            .iter()
            .flatten()
            .chain(std::iter::once(&self.total))
            .all(|v| v.is_finite())
    }

    fn add(&mut self, other: &LossComponents) {
        let sum = |a: &mut Option<f64>, b: Option<f64>| {
            if let Some(b) = b {
                *a = Some(a.unwrap_or(0.0) + b);
            }
        };
        sum(&mut self.cd, other.cd);
        sum(&mut self.sem, other.sem);
        sum(&mut self.clem, other.clem);
        sum(&mut self.plm, other.plm);
        self.total += other.total;
    }

    fn scale(&mut self, s: f64) {
        for v in [&mut self.cd, &mut self.sem, &mut self.clem, &mut self.plm].into_iter().flatten() {
            *v *= s;
        }
        self.total *= s;
    }
}

/// Stacks the two dates of `samples` into input tensors.
pub fn batch_inputs<T: Scalar>(samples: &[&SceneSample]) -> Result<(crate::Tensor<T>, crate::Tensor<T>)> {
    let first = samples.first().ok_or_else(|| Error::Validation("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let t1: Vec<&[f32]> = samples.iter().map(|s| s.image_t1.as_slice()).collect();
    let t2: Vec<&[f32]> = samples.iter().map(|s| s.image_t2.as_slice()).collect();
    Ok((images_to_tensor(&t1, h, w)?, images_to_tensor(&t2, h, w)?))
}

/// A recorded objective ready for a backward pass.
pub struct Objective<T> {
    pub graph: Graph<T>,
    pub total: NodeId,
    pub components: LossComponents,
}

/// Builds `w_cd·L_cd + w_sem·L_sem + w_clem·L_clem + w_plm·L_plm` over the
/// active terms.
#[allow(clippy::too_many_arguments)]
pub fn build_objective<T: Scalar>(
    net: &Network<T>,
    samples: &[&SceneSample],
    weights: &LossWeights,
    active: ActiveLosses,
    bank: Option<&PhenoCentroidBank>,
    mode: Mode,
    rng: &mut (impl Rng + Clone),
) -> Result<Objective<T>> {
    let labels = BatchLabels::from_samples(samples)?;
    let (x1, x2) = batch_inputs::<T>(samples)?;
    let mut g = Graph::new();
    let a = g.constant(x1);
    let b = g.constant(x2);
    let out = net.forward(&mut g, a, b, mode)?;
    let mut terms = Vec::new();
    let mut comps = LossComponents::default();
    if active.cd {
        let targets: Vec<T> = labels.change.iter().map(|&c| T::lit(f64::from(c))).collect();
        let l = g.bce_with_logits(out.detector.change_logits, &targets)?;
        comps.cd = Some(g.value(l).item().as_f64());
        terms.push((T::lit(weights.w_cd), l));
    }
    if active.sem {
        let l = g.softmax_cross_entropy(out.sem_logits, &labels.sem)?;
        comps.sem = Some(g.value(l).item().as_f64());
        terms.push((T::lit(weights.w_sem), l));
    }
    if active.clem || active.plm {
        let nodes = contrastive_losses(
            &mut g,
            &out,
            &labels,
            &net.constrainer_config,
            bank,
            active.clem,
            active.plm,
            rng,
        )?;
        if active.clem {
            comps.clem = Some(nodes.clem.map_or(0.0, |n| g.value(n).item().as_f64()));
            if let Some(n) = nodes.clem {
                terms.push((T::lit(weights.w_clem), n));
            }
        }
        if active.plm {
            comps.plm = Some(nodes.plm.map_or(0.0, |n| g.value(n).item().as_f64()));
            if let Some(n) = nodes.plm {
                terms.push((T::lit(weights.w_plm), n));
            }
        }
    }
    let total = g.weighted_sum(&terms)?;
    comps.total = g.value(total).item().as_f64();
    Ok(Objective {
        graph: g,
        total,
        components: comps,
    })
}

/// One SGD step on `samples`.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar>(
    net: &mut Network<T>,
    sgd: &mut Sgd<T>,
    samples: &[&SceneSample],
    weights: &LossWeights,
    active: ActiveLosses,
    bank: Option<&PhenoCentroidBank>,
    bn_momentum: f64,
    rng: &mut (impl Rng + Clone),
) -> Result<LossComponents> {
    let mut obj = build_objective(net, samples, weights, active, bank, Mode::Train, rng)?;
    if !obj.components.is_finite() {
        let ids: Vec<&str> = samples.iter().map(|s| s.sample_id.as_str()).collect();
        return Err(Error::Numeric(format!(
            "non-finite loss on batch [{}]: {:?}",
            ids.join(", "),
            obj.components
        )));
    }
    let grads = obj.graph.backward(obj.total)?;
    net.store.accumulate_grads(&obj.graph, &grads);
    net.store.apply_bn_updates(obj.graph.take_bn_updates(), T::lit(bn_momentum));
    sgd.step(&mut net.store)?;
    Ok(obj.components)
}

/// One pass over `order`, in chunks of `batch_size`; returns the mean
/// components over batches.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<T: Scalar>(
    net: &mut Network<T>,
    sgd: &mut Sgd<T>,
    data: &[SceneSample],
    batch_size: usize,
    weights: &LossWeights,
    active: ActiveLosses,
    bank: Option<&PhenoCentroidBank>,
    bn_momentum: f64,
    rng: &mut (impl Rng + Clone),
) -> Result<LossComponents> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut mean = LossComponents::default();
    let mut batches = 0;
    for chunk in order.chunks(batch_size.max(1)) {
        let samples: Vec<&SceneSample> = chunk.iter().map(|&i| &data[i]).collect();
        let c = train_step(net, sgd, &samples, weights, active, bank, bn_momentum, rng)?;
        mean.add(&c);
        batches += 1;
    }
    if batches > 0 {
        mean.scale(1.0 / batches as f64);
    }
    Ok(mean)
}

/// Eval-mode change probabilities of one sample, `H·W` values.
pub fn predict_sample<T: Scalar>(net: &Network<T>, sample: &SceneSample) -> Result<Vec<T>> {
    let (x1, x2) = batch_inputs::<T>(&[sample])?;
    Ok(net.detector.predict(&net.store, x1, x2)?.into_data())
}

/// Cumulative confusion matrix of thresholded predictions over `samples`.
pub fn confusion<T: Scalar>(net: &Network<T>, samples: &[SceneSample], threshold: f64) -> Result<ConfusionMatrix> {
    if samples.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty split".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for s in samples {
        let prob = predict_sample(net, s)?;
        let pred = binarize(&prob, threshold);
        cm.accumulate(&pred, &s.change).map_err(|e| Error::Ingestion {
            sample: s.sample_id.clone(),
            message: e.to_string(),
        })?;
    }
    Ok(cm)
}
