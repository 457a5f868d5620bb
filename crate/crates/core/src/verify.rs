//! Brute-force oracles and finite-difference checks.
//!
//! The oracles recompute prototypes, negative sets, partitions and confusion
//! counts with their own loops; nothing here calls the loss, clustering or
//! metric code it is compared against.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::constrainer::{
    clem_graph, clem_loss, plm_graph, plm_loss, region_prototypes, select_samples, spherical_kmeans, AnchorSample,
    CentroidRow, ClemForm, ClemParams, ContrastiveBatch, GroupLayout, PixelField, Projection, SampleMode,
    SamplingConfig, SemanticHead, Task,
};
use crate::detector::{Backbone, ChangeHead, Fusion, FusionMode, SpatialPyramid};
use crate::diffcore::{
    finite_diff_check, project_to_scalar, BatchNorm2d, ContrastTerm, GradCheckOptions, GradCheckReport, Graph, Mode, NodeId,
    ParamStore, Reduce,
};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::tensor::Tensor;

/// Tolerance for loss oracles (64-bit, absolute).
pub const LOSS_TOLERANCE: f64 = 1e-6;
/// Tolerance for gradient checks (max relative error).
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Largest instance `oracle_kmeans` will enumerate.
pub const KMEANS_MAX_POINTS: usize = 12;
pub const KMEANS_MAX_K: usize = 3;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

/// `−log(e^{a·p/τ} / (e^{a·p/τ} + Σ_j e^{a·n_j/τ}))` summed term by term,
/// with every exponent shifted by the largest one.
pub fn oracle_infonce(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>], tau: f64) -> f64 {
    let pos = dot(anchor, positive) / tau;
    let negs: Vec<f64> = negatives.iter().map(|n| dot(anchor, n) / tau).collect();
    let mut shift = pos;
    for &l in &negs {
        if l > shift {
            shift = l;
        }
    }
    let numerator = (pos - shift).exp();
    let mut denominator = numerator;
    for &l in &negs {
        denominator += (l - shift).exp();
    }
    -(numerator / denominator).ln()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct OracleClem {
    pub pp: f64,
    pub rr: f64,
    pub pr: f64,
    /// Single-softmax form over the pooled negatives.
    pub union: f64,
    /// `λ_pp·pp + λ_rr·rr + λ_pr·pr`.
    pub separate: f64,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Region prototypes keyed by `(image, date, class)`.
fn oracle_prototypes(
    embeddings: &[f64],
    dim: usize,
    labels: &[usize],
    layout: GroupLayout,
    min_pixels: usize,
) -> BTreeMap<(usize, usize, usize), Vec<f64>> {
    let mut sums: BTreeMap<(usize, usize, usize), (Vec<f64>, usize)> = BTreeMap::new();
    for r in 0..labels.len() {
        let group = r / layout.rows_per_group;
        let key = (group % layout.images, group / layout.images, labels[r]);
        let entry = sums.entry(key).or_insert_with(|| (vec![0.0; dim], 0));
        for c in 0..dim {
            entry.0[c] += embeddings[r * dim + c];
        }
        entry.1 += 1;
    }
    sums.into_iter()
        .filter(|(_, (_, n))| *n >= min_pixels.max(1))
        .map(|(k, (s, n))| (k, unit(&s.iter().map(|v| v / n as f64).collect::<Vec<_>>())))
        .collect()
}

/// All CLEM variants by direct enumeration. Anchors without negatives do not
/// count towards a mean.
#[allow(clippy::too_many_arguments)]
pub fn oracle_clem(
    embeddings: &[f64],
    dim: usize,
    labels: &[usize],
    layout: GroupLayout,
    min_pixels: usize,
    samples: &[AnchorSample],
    centroids: &[CentroidRow],
    tau: f64,
    lambdas: (f64, f64, f64),
) -> OracleClem {
    let row = |i: usize| embeddings[i * dim..(i + 1) * dim].to_vec();
    let protos = oracle_prototypes(embeddings, dim, labels, layout, min_pixels);
    let other_protos = |class: usize| -> Vec<Vec<f64>> {
        protos
            .iter()
            .filter(|((_, _, c), _)| *c != class)
            .map(|(_, v)| v.clone())
            .collect()
    };

    let mut pp = Vec::new();
    let mut pr = Vec::new();
    let mut union = Vec::new();
    for s in samples {
        let class = labels[s.anchor];
        let a = row(s.anchor);
        let negs: Vec<Vec<f64>> = s.negatives.iter().map(|&j| row(j)).collect();
        if !negs.is_empty() {
            pp.push(oracle_infonce(&a, &row(s.positive), &negs, tau));
        }
        let group = s.anchor / layout.rows_per_group;
        if let Some(own) = protos.get(&(group % layout.images, group / layout.images, class)) {
            let pn = other_protos(class);
            if !pn.is_empty() {
                pr.push(oracle_infonce(&a, own, &pn, tau));
            }
        }
        let mut all = negs;
        all.extend(other_protos(class));
        all.extend(centroids.iter().filter(|c| c.class != class).map(|c| c.vector.clone()));
        if !all.is_empty() {
            union.push(oracle_infonce(&a, &row(s.positive), &all, tau));
        }
    }

    let mut rr = Vec::new();
    for (&(image, date, class), v) in &protos {
        let partner = protos
            .iter()
            .find(|((i, d, c), _)| *i == image && *c == class && *d != date)
            .map(|(_, p)| p.clone());
        let Some(partner) = partner else { continue };
        let negs = other_protos(class);
        if !negs.is_empty() {
            rr.push(oracle_infonce(v, &partner, &negs, tau));
        }
    }

    let (pp, rr, pr) = (mean(&pp), mean(&rr), mean(&pr));
    OracleClem {
        pp,
        rr,
        pr,
        union: mean(&union),
        separate: lambdas.0 * pp + lambdas.1 * rr + lambdas.2 * pr,
    }
}

/// PLM loss by enumeration: sampled negatives plus every other-class centroid.
pub fn oracle_plm(
    embeddings: &[f64],
    dim: usize,
    labels: &[usize],
    samples: &[AnchorSample],
    centroids: &[CentroidRow],
    tau: f64,
) -> f64 {
    let row = |i: usize| embeddings[i * dim..(i + 1) * dim].to_vec();
    let mut terms = Vec::new();
    for s in samples {
        let class = labels[s.anchor];
        let mut negs: Vec<Vec<f64>> = s.negatives.iter().map(|&j| row(j)).collect();
        negs.extend(centroids.iter().filter(|c| c.class != class).map(|c| c.vector.clone()));
        if !negs.is_empty() {
            terms.push(oracle_infonce(&row(s.anchor), &row(s.positive), &negs, tau));
        }
    }
    mean(&terms)
}

/// A random contrastive batch with everything the losses consume.
#[derive(Debug, Clone)]
pub struct ContrastCase {
    pub dim: usize,
    pub embeddings: Vec<f64>,
    pub labels: Vec<usize>,
    pub layout: GroupLayout,
    pub min_region_pixels: usize,
    pub clem: ContrastiveBatch,
    pub plm: ContrastiveBatch,
    pub centroids: Vec<CentroidRow>,
    pub tau: f64,
    pub lambdas: (f64, f64, f64),
}

impl ContrastCase {
    /// At most 64 unit embeddings over two dates, 2–8 classes, 1–3 centroids
    /// per class.
    pub fn random(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = rng.random_range(2..=8);
        let images = rng.random_range(1..=2);
        let rows_per_group = rng.random_range(4..=64 / (2 * images));
        let layout = GroupLayout {
            rows_per_group,
            images,
            temporals: 2,
        };
        let rows = layout.rows();
        let dim = rng.random_range(3..=8);
        let mut embeddings = Vec::with_capacity(rows * dim);
        for _ in 0..rows {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            embeddings.extend(unit(&v));
        }
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        let hardness: Vec<f64> = (0..rows).map(|_| rng.random::<f64>()).collect();

        let mut centroids = Vec::new();
        let mut per_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for class in 0..classes {
            for _ in 0..rng.random_range(1..=3) {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                per_class.entry(class).or_default().push(centroids.len());
                centroids.push(CentroidRow {
                    class,
                    vector: unit(&v),
                });
            }
        }
        let assignment: Vec<usize> = (0..rows)
            .map(|r| {
                let e = &embeddings[r * dim..(r + 1) * dim];
                let own = &per_class[&labels[r]];
                (0..own.len())
                    .max_by(|&a, &b| dot(e, &centroids[own[a]].vector).total_cmp(&dot(e, &centroids[own[b]].vector)))
                    .unwrap_or(0)
            })
            .collect();

        let cfg = SamplingConfig {
            anchors_per_class: rng.random_range(1..=4),
            positive_candidates: rng.random_range(1..=4),
            negatives: rng.random_range(2..=12),
            strict_class_negatives: rng.random_bool(0.5),
        };
        let mut field = PixelField {
            dim,
            embeddings: &embeddings,
            labels: &labels,
            hardness: &hardness,
            centroids: None,
        };
        let clem = select_samples(&field, Task::Segmentation, SampleMode::Clem, &cfg, &mut rng)?;
        field.centroids = Some(&assignment);
        let plm = select_samples(&field, Task::Segmentation, SampleMode::Plm, &cfg, &mut rng)?;
        let tau = [0.1, 0.5, 1.0][rng.random_range(0..3)];
        let lambdas = (rng.random_range(0.0..2.0), rng.random_range(0.0..2.0), rng.random_range(0.0..2.0));
        Ok(Self {
            dim,
            embeddings,
            labels,
            layout,
            min_region_pixels: rng.random_range(1..=3),
            clem,
            plm,
            centroids,
            tau,
            lambdas,
        })
    }

    pub fn params(&self, form: ClemForm) -> ClemParams {
        ClemParams {
            tau: self.tau,
            lambda_pp: self.lambdas.0,
            lambda_rr: self.lambdas.1,
            lambda_pr: self.lambdas.2,
            form,
        }
    }

    pub fn oracle(&self) -> OracleClem {
        oracle_clem(
            &self.embeddings,
            self.dim,
            &self.labels,
            self.layout,
            self.min_region_pixels,
            &self.clem.samples,
            &self.centroids,
            self.tau,
            self.lambdas,
        )
    }

    pub fn oracle_plm(&self) -> f64 {
        oracle_plm(&self.embeddings, self.dim, &self.labels, &self.plm.samples, &self.centroids, self.tau)
    }
}

/// Largest absolute difference between the loss implementations (values and
/// tape forward passes) and the oracles on one case.
pub fn loss_discrepancy(case: &ContrastCase) -> Result<f64> {
    let protos = region_prototypes(&case.embeddings, case.dim, &case.labels, case.layout, case.min_region_pixels)?;
    let oracle = case.oracle();
    let sep = clem_loss(
        &case.embeddings,
        case.dim,
        case.layout,
        &case.clem,
        &protos.prototypes,
        &case.centroids,
        &case.params(ClemForm::Separate),
    );
    let uni = clem_loss(
        &case.embeddings,
        case.dim,
        case.layout,
        &case.clem,
        &protos.prototypes,
        &case.centroids,
        &case.params(ClemForm::Union),
    );
    let plm = plm_loss(&case.embeddings, case.dim, &case.plm, &case.centroids, case.tau);
    let oracle_plm = case.oracle_plm();
    let mut worst = [
        sep.pp - oracle.pp,
        sep.rr - oracle.rr,
        sep.pr - oracle.pr,
        sep.total - oracle.separate,
        uni.total - oracle.union,
        plm - oracle_plm,
    ]
    .iter()
    .fold(0.0f64, |m, d| m.max(d.abs()));

    let rows = case.labels.len();
    let tensor = Tensor::from_vec(&[rows, case.dim], case.embeddings.clone())?;
    for (form, expected) in [(ClemForm::Separate, oracle.separate), (ClemForm::Union, oracle.union)] {
        let mut g = Graph::<f64>::new();
        let x = g.constant(tensor.clone());
        let l = clem_graph(&mut g, x, case.layout, &case.clem, &protos.prototypes, &case.centroids, &case.params(form))?;
        worst = worst.max((g.value(l).item() - expected).abs());
    }
    let mut g = Graph::<f64>::new();
    let x = g.constant(tensor);
    let l = plm_graph(&mut g, x, &case.plm, &case.centroids, case.tau)?;
    worst = worst.max((g.value(l).item() - oracle_plm).abs());
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleKMeans {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// `Σ_i (1 − cos(x_i, c_{a(i)}))` of the optimal partition.
    pub inertia: f64,
}

/// Globally optimal spherical k-means by enumerating every partition of the
/// (normalized) points into exactly `k` non-empty clusters.
pub fn oracle_kmeans(points: &[Vec<f64>], k: usize) -> Result<OracleKMeans> {
    let n = points.len();
    if n > KMEANS_MAX_POINTS || k > KMEANS_MAX_K {
        return Err(Error::Precondition(format!(
            "exhaustive k-means is limited to {KMEANS_MAX_POINTS} points and k <= {KMEANS_MAX_K}, got {n} and {k}"
        )));
    }
    if k == 0 || k > n {
        return Err(Error::Precondition(format!("k = {k} for {n} points")));
    }
    let dim = points[0].len();
    let pts: Vec<Vec<f64>> = points.iter().map(|p| unit(p)).collect();
    let mut labels = vec![0usize; n];
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        // canonical labelings only: each new label is one past the largest so far
        let mut top = 0;
        let mut canonical = labels[0] == 0;
        for &l in &labels[1..] {
            if l > top + 1 {
                canonical = false;
                break;
            }
            top = top.max(l);
        }
        if canonical && top + 1 == k {
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0.0; k];
            for (p, &l) in pts.iter().zip(&labels) {
                counts[l] += 1.0;
                for c in 0..dim {
                    sums[l][c] += p[c];
                }
            }
            let inertia: f64 = (0..k).map(|c| counts[c] - dot(&sums[c], &sums[c]).sqrt()).sum();
            if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
                best = Some((inertia, labels.clone()));
            }
        }
        // next labeling in base k
        let mut i = n;
        loop {
            if i == 0 {
                let (inertia, assignment) = best.expect("k <= n admits a partition");
                let mut centroids = vec![vec![0.0; dim]; k];
                for (p, &l) in pts.iter().zip(&assignment) {
                    for c in 0..dim {
                        centroids[l][c] += p[c];
                    }
                }
                let centroids = centroids.iter().map(|c| unit(c)).collect();
                return Ok(OracleKMeans {
                    assignment,
                    centroids,
                    inertia,
                });
            }
            i -= 1;
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
        }
    }
}

/// Confusion counts by a direct pixel scan (any nonzero value is "changed")
/// and the four scores from their defining ratios.
pub fn oracle_metrics(pred: &[u8], gt: &[u8]) -> MetricsReport {
    let (mut tp, mut tn, mut fp, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..pred.len().min(gt.len()) {
        match (pred[i] != 0, gt[i] != 0) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    let frac = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    MetricsReport {
        precision: frac(tp, tp + fp),
        recall: frac(tp, tp + fn_),
        f1: frac(2 * tp, 2 * tp + fp + fn_),
        iou: frac(tp, tp + fp + fn_),
        confusion: ConfusionMatrix { tp, tn, fp, fn_ },
        split: String::new(),
        checkpoint: String::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Fail,
}

/// One selftest line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub status: CheckStatus,
    pub max_error: f64,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl CheckRecord {
    pub fn passed(&self) -> bool {
        self.status == CheckStatus::Pass
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Times `f`, which returns the worst error, and compares it with `tol`.
fn run_check(name: &str, tol: f64, f: impl FnOnce() -> Result<f64>) -> CheckRecord {
    let start = Instant::now();
    let outcome = f();
    let seconds = start.elapsed().as_secs_f64();
    match outcome {
        Ok(err) => CheckRecord {
            name: name.to_string(),
            status: if err <= tol { CheckStatus::Pass } else { CheckStatus::Fail },
            max_error: err,
            seconds,
            detail: None,
        },
        Err(e) => CheckRecord {
            name: name.to_string(),
            status: CheckStatus::Fail,
            max_error: f64::INFINITY,
            seconds,
            detail: Some(e.to_string()),
        },
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

type Fragment = Box<dyn FnMut(&mut Graph<f64>, &ParamStore<f64>, &[NodeId]) -> Result<NodeId>>;

/// A model fragment ready for [`finite_diff_check`].
pub struct GradCase {
    pub name: &'static str,
    pub store: ParamStore<f64>,
    pub inputs: Vec<Tensor<f64>>,
    pub max_per_tensor: Option<usize>,
    f: Fragment,
}

impl GradCase {
    fn new(
        name: &'static str,
        store: ParamStore<f64>,
        inputs: Vec<Tensor<f64>>,
        f: impl FnMut(&mut Graph<f64>, &ParamStore<f64>, &[NodeId]) -> Result<NodeId> + 'static,
    ) -> Self {
        Self {
            name,
            store,
            inputs,
            max_per_tensor: None,
            f: Box::new(f),
        }
    }

    fn sampled(mut self, per_tensor: usize) -> Self {
        self.max_per_tensor = Some(per_tensor);
        self
    }

    /// Max relative error of the analytic gradient (eps 1e-5).
    pub fn run(self, seed: u64) -> Result<f64> {
        Ok(self.report(seed)?.max_rel_error)
    }

    pub fn report(mut self, seed: u64) -> Result<GradCheckReport> {
        let opts = GradCheckOptions {
            eps: 1e-5,
            max_per_tensor: self.max_per_tensor,
            seed,
        };
        finite_diff_check(&mut self.store, &mut self.inputs, opts, self.f)
    }
}

/// Output reduced to a scalar through a fixed random functional.
fn scalarize(g: &mut Graph<f64>, node: NodeId) -> Result<NodeId> {
    if g.value(node).len() == 1 {
        Ok(node)
    } else {
        project_to_scalar(g, node, 0x5CA1)
    }
}

/// Differentiable primitives, each on a small random input.
pub fn op_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| randn(shape, &mut rng);
    let empty = ParamStore::<f64>::new;
    let mut cases = vec![
        GradCase::new("conv2d", empty(), vec![r(&[2, 3, 5, 5]), r(&[4, 3, 3, 3]), r(&[4])], |g, _, x| {
            let y = g.conv2d(x[0], x[1], Some(x[2]), 1, 1)?;
            scalarize(g, y)
        }),
        GradCase::new("conv2d_stride2", empty(), vec![r(&[2, 2, 6, 6]), r(&[3, 2, 3, 3])], |g, _, x| {
            let y = g.conv2d(x[0], x[1], None, 2, 1)?;
            scalarize(g, y)
        }),
        GradCase::new("relu", empty(), vec![r(&[2, 3, 4])], |g, _, x| {
            let y = g.relu(x[0]);
            scalarize(g, y)
        }),
        GradCase::new("sigmoid", empty(), vec![r(&[2, 3, 4])], |g, _, x| {
            let y = g.sigmoid(x[0]);
            scalarize(g, y)
        }),
        GradCase::new("abs", empty(), vec![r(&[2, 3, 4])], |g, _, x| {
            let y = g.abs(x[0]);
            scalarize(g, y)
        }),
        GradCase::new("add_sub_mul", empty(), vec![r(&[2, 3, 4]), r(&[2, 3, 4])], |g, _, x| {
            let a = g.add(x[0], x[1])?;
            let s = g.sub(x[0], x[1])?;
            let m = g.mul(a, s)?;
            let m = g.scale(m, 0.7);
            scalarize(g, m)
        }),
        GradCase::new("weighted_sum_mean_all", empty(), vec![r(&[3, 2]), r(&[4])], |g, _, x| {
            let a = g.mean_all(x[0]);
            let b = g.mean_all(x[1]);
            g.weighted_sum(&[(0.3, a), (-1.7, b)])
        }),
        GradCase::new("adaptive_avg_pool", empty(), vec![r(&[2, 2, 6, 6])], |g, _, x| {
            let a = g.adaptive_avg_pool(x[0], 3, 3)?;
            let b = g.adaptive_avg_pool(x[0], 1, 1)?;
            let a = scalarize(g, a)?;
            let b = scalarize(g, b)?;
            g.add(a, b)
        }),
        GradCase::new("upsample_bilinear", empty(), vec![r(&[2, 2, 3, 3])], |g, _, x| {
            let y = g.upsample_bilinear(x[0], 7, 5)?;
            scalarize(g, y)
        }),
        GradCase::new("concat_narrow", empty(), vec![r(&[2, 2, 3, 3]), r(&[2, 3, 3, 3])], |g, _, x| {
            let c = g.concat(&[x[0], x[1]], 1)?;
            let n = g.narrow(c, 1, 1, 2)?;
            let s = g.concat(&[n, x[0]], 0)?;
            scalarize(g, s)
        }),
        GradCase::new("matmul", empty(), vec![r(&[3, 4]), r(&[4, 2])], |g, _, x| {
            let y = g.matmul(x[0], x[1])?;
            scalarize(g, y)
        }),
        GradCase::new("l2_normalize", empty(), vec![r(&[2, 4, 3, 3])], |g, _, x| {
            let y = g.l2_normalize(x[0])?;
            scalarize(g, y)
        }),
        GradCase::new("channel_reduce", empty(), vec![r(&[2, 4, 3, 3])], |g, _, x| {
            let a = g.channel_reduce(x[0], Reduce::Mean)?;
            let b = g.channel_reduce(x[0], Reduce::Max)?;
            let c = g.concat(&[a, b], 1)?;
            scalarize(g, c)
        }),
        GradCase::new("spatial_reduce", empty(), vec![r(&[2, 4, 3, 3])], |g, _, x| {
            let a = g.spatial_reduce(x[0], Reduce::Mean)?;
            let b = g.spatial_reduce(x[0], Reduce::Max)?;
            let c = g.concat(&[a, b], 1)?;
            scalarize(g, c)
        }),
        GradCase::new("to_rows_segment_mean", empty(), vec![r(&[2, 3, 2, 2])], |g, _, x| {
            let rows = g.to_rows(x[0])?;
            let m = g.segment_mean(rows, &[vec![0, 3, 5], vec![1], vec![2, 4, 6, 7]])?;
            scalarize(g, m)
        }),
    ];

    let targets: Vec<usize> = (0..2 * 9).map(|_| rng.random_range(0..3)).collect();
    cases.push(GradCase::new("softmax_cross_entropy", empty(), vec![randn(&[2, 3, 3, 3], &mut rng)], move |g, _, x| {
        g.softmax_cross_entropy(x[0], &targets)
    }));
    let targets: Vec<f64> = (0..2 * 9).map(|_| f64::from(rng.random_range(0..2u8))).collect();
    cases.push(GradCase::new("bce_with_logits", empty(), vec![randn(&[2, 1, 3, 3], &mut rng)], move |g, _, x| {
        g.bce_with_logits(x[0], &targets)
    }));
    let terms = vec![
        ContrastTerm {
            anchor: 0,
            positive: 1,
            negatives: vec![2, 3, 4],
        },
        ContrastTerm {
            anchor: 3,
            positive: 4,
            negatives: vec![0, 5],
        },
    ];
    cases.push(GradCase::new("contrastive", empty(), vec![randn(&[6, 3], &mut rng)], move |g, _, x| {
        let n = g.l2_normalize(x[0])?;
        g.contrastive(n, terms.clone(), 0.5)
    }));

    for (name, mode) in [("batch_norm_train", Mode::Train), ("batch_norm_eval", Mode::Eval)] {
        let mut store = ParamStore::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 3)?;
        let x = randn(&[2, 3, 3, 3], &mut rng);
        cases.push(GradCase::new(name, store, vec![x], move |g, s, x| {
            let y = bn.forward(g, s, x[0], mode)?;
            scalarize(g, y)
        }));
    }
    Ok(cases)
}

/// Detector and constrainer fragments plus the four losses.
pub fn fragment_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();

    for (name, mode) in [
        ("dam", FusionMode::Dam),
        ("fusion_concat", FusionMode::Concat),
        ("fusion_subtract", FusionMode::Subtract),
    ] {
        let mut store = ParamStore::new();
        let fusion = Fusion::new(&mut store, "fusion", mode, 4, 2, &mut rng)?;
        let inputs = vec![randn(&[2, 4, 6, 6], &mut rng), randn(&[2, 4, 6, 6], &mut rng)];
        cases.push(
            GradCase::new(name, store, inputs, move |g, s, x| {
                let parts = fusion.forward(g, s, x[0], x[1], Mode::Train)?;
                scalarize(g, parts.output)
            })
            .sampled(24),
        );
    }

    let mut store = ParamStore::new();
    let spb = SpatialPyramid::new(&mut store, "spb", 4, &[1, 2, 4], &mut rng)?;
    let x = randn(&[2, 4, 8, 8], &mut rng);
    cases.push(
        GradCase::new("spb", store, vec![x], move |g, s, x| {
            let y = spb.forward(g, s, x[0], Mode::Train)?;
            scalarize(g, y)
        })
        .sampled(24),
    );

    let mut store = ParamStore::new();
    let backbone = Backbone::new(&mut store, "backbone", 4, &mut rng)?;
    let x = randn(&[2, 3, 16, 16], &mut rng);
    cases.push(
        GradCase::new("backbone", store, vec![x], move |g, s, x| {
            let y = backbone.forward(g, s, x[0], Mode::Train)?;
            scalarize(g, y)
        })
        .sampled(12),
    );

    let mut store = ParamStore::new();
    let head = ChangeHead::new(&mut store, "head", 8, 4, &mut rng)?;
    let x = randn(&[2, 8, 3, 3], &mut rng);
    cases.push(GradCase::new("change_head", store, vec![x], move |g, s, x| {
        let low = head.forward(g, s, x[0])?;
        let up = g.upsample_bilinear(low, 8, 8)?;
        let p = g.sigmoid(up);
        scalarize(g, p)
    }));

    let mut store = ParamStore::new();
    let head = SemanticHead::new(&mut store, "sem", 4, 4, 3, &mut rng)?;
    let x = randn(&[2, 4, 3, 3], &mut rng);
    cases.push(GradCase::new("semantic_head", store, vec![x], move |g, s, x| {
        let low = head.forward(g, s, x[0])?;
        let up = g.upsample_bilinear(low, 8, 8)?;
        scalarize(g, up)
    }));

    let mut store = ParamStore::new();
    let proj = Projection::new(&mut store, "proj", 4, 6, 5, &mut rng)?;
    let x = randn(&[2, 4, 3, 3], &mut rng);
    cases.push(GradCase::new("projection", store, vec![x], move |g, s, x| {
        let y = proj.forward(g, s, x[0])?;
        scalarize(g, y)
    }));

    let targets: Vec<f64> = (0..2 * 16).map(|_| f64::from(rng.random_range(0..2u8))).collect();
    let x = randn(&[2, 1, 4, 4], &mut rng);
    cases.push(GradCase::new("cdcm_loss", ParamStore::new(), vec![x], move |g, _, x| {
        g.bce_with_logits(x[0], &targets)
    }));
    let targets: Vec<usize> = (0..2 * 16).map(|_| rng.random_range(0..3)).collect();
    let x = randn(&[2, 3, 4, 4], &mut rng);
    cases.push(GradCase::new("scm_loss", ParamStore::new(), vec![x], move |g, _, x| {
        g.softmax_cross_entropy(x[0], &targets)
    }));

    // contrastive losses on a case with at most 32 rows
    let mut case_seed = seed;
    let case = loop {
        let c = ContrastCase::random(case_seed)?;
        if c.labels.len() <= 32 && !c.clem.is_empty() && !c.plm.is_empty() {
            break c;
        }
        case_seed = case_seed.wrapping_add(1);
    };
    let rows = case.labels.len();
    let protos = region_prototypes(&case.embeddings, case.dim, &case.labels, case.layout, case.min_region_pixels)?;
    for (name, form) in [("clem_loss_separate", ClemForm::Separate), ("clem_loss_union", ClemForm::Union)] {
        let case = case.clone();
        let protos = protos.prototypes.clone();
        let x = Tensor::from_vec(&[rows, case.dim], case.embeddings.clone())?;
        cases.push(
            GradCase::new(name, ParamStore::new(), vec![x], move |g, _, x| {
                let n = g.l2_normalize(x[0])?;
                clem_graph(g, n, case.layout, &case.clem, &protos, &case.centroids, &case.params(form))
            })
            .sampled(64),
        );
    }
    let x = Tensor::from_vec(&[rows, case.dim], case.embeddings.clone())?;
    cases.push(
        GradCase::new("plm_loss", ParamStore::new(), vec![x], move |g, _, x| {
            let n = g.l2_normalize(x[0])?;
            plm_graph(g, n, &case.plm, &case.centroids, case.tau)
        })
        .sampled(64),
    );
    Ok(cases)
}

/// Finite-difference check of every primitive and fragment.
pub fn gradcheck_all() -> Vec<CheckRecord> {
    let mut out = Vec::new();
    for cases in [op_cases(11), fragment_cases(12)] {
        match cases {
            Ok(cases) => {
                for case in cases {
                    let name = format!("grad:{}", case.name);
                    out.push(run_check(&name, GRAD_TOLERANCE, || case.run(7)));
                }
            }
            Err(e) => out.push(run_check("grad:setup", GRAD_TOLERANCE, || Err(e))),
        }
    }
    out
}

/// Worst loss discrepancy over `cases` random batches.
pub fn loss_oracle_check(cases: usize, seed: u64) -> CheckRecord {
    run_check("oracle:losses", LOSS_TOLERANCE, || {
        let mut worst: f64 = 0.0;
        for i in 0..cases {
            worst = worst.max(loss_discrepancy(&ContrastCase::random(seed.wrapping_add(i as u64))?)?);
        }
        Ok(worst)
    })
}

/// Worked InfoNCE values.
pub fn infonce_check() -> CheckRecord {
    run_check("oracle:infonce_worked", 1e-5, || {
        let a = vec![1.0, 0.0];
        let equal = oracle_infonce(&a, &a, &[a.clone(), a.clone(), a.clone()], 1.0);
        let far = oracle_infonce(&a, &a, &[vec![-1.0, 0.0]], 1.0);
        Ok((equal - 4.0f64.ln()).abs().max((far - 0.12693).abs()))
    })
}

/// Random clustered instances: the main clusterer's inertia relative to the
/// enumerated optimum (must stay within 5%).
pub fn kmeans_check(instances: usize, seed: u64) -> CheckRecord {
    run_check("oracle:kmeans", 0.05, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let n = rng.random_range(4..=KMEANS_MAX_POINTS);
            let k = rng.random_range(1..=KMEANS_MAX_K.min(n));
            let centers: Vec<Vec<f64>> = (0..k).map(|_| unit(&randn(&[3], &mut rng).into_data())).collect();
            let points: Vec<Vec<f64>> = (0..n)
                .map(|j| {
                    let c = &centers[j % k];
                    let noise: Vec<f64> = (0..3).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); 0.3 * z }).collect();
                    unit(&c.iter().zip(&noise).map(|(a, b)| a + b).collect::<Vec<_>>())
                })
                .collect();
            let best = oracle_kmeans(&points, k)?;
            let run = spherical_kmeans(&points, k, 4, seed.wrapping_add(i as u64))?;
            let excess = (run.inertia() - best.inertia) / best.inertia.max(1e-9);
            worst = worst.max(excess);
        }
        Ok(worst)
    })
}

/// Counter equality on random maps, the F1/IoU identity on random matrices
/// and the worked example.
pub fn metrics_check(maps: usize, matrices: usize, seed: u64) -> CheckRecord {
    run_check("oracle:metrics", 1e-12, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..maps {
            let density = rng.random::<f64>();
            let pred: Vec<u8> = (0..64 * 64).map(|_| u8::from(rng.random_bool(density))).collect();
            let gt: Vec<u8> = (0..64 * 64).map(|_| u8::from(rng.random_bool(0.3))).collect();
            let main = ConfusionMatrix::from_maps(&pred, &gt)?.report();
            let oracle = oracle_metrics(&pred, &gt);
            if main.confusion != oracle.confusion {
                return Err(Error::Validation(format!("{:?} vs {:?}", main.confusion, oracle.confusion)));
            }
            for (a, b) in [
                (main.precision, oracle.precision),
                (main.recall, oracle.recall),
                (main.f1, oracle.f1),
                (main.iou, oracle.iou),
            ] {
                worst = worst.max((a - b).abs());
            }
        }
        for _ in 0..matrices {
            let cm = ConfusionMatrix {
                tp: rng.random_range(0..5000),
                tn: rng.random_range(0..5000),
                fp: rng.random_range(0..5000),
                fn_: rng.random_range(0..5000),
            };
            let r = cm.report();
            worst = worst.max((r.f1 - 2.0 * r.iou / (1.0 + r.iou)).abs());
        }
        let r = ConfusionMatrix {
            tp: 50,
            tn: 0,
            fp: 10,
            fn_: 15,
        }
        .report();
        let expected = [0.83333, 0.76923, 0.80000, 0.66667];
        for (got, want) in [r.precision, r.recall, r.f1, r.iou].into_iter().zip(expected) {
            if (got - want).abs() > 5e-6 {
                return Err(Error::Validation(format!("worked example gave {got}, expected {want}")));
            }
        }
        Ok(worst)
    })
}

/// Every oracle and gradient check; one record per check.
pub fn selftest() -> Vec<CheckRecord> {
    let mut out = vec![
        infonce_check(),
        loss_oracle_check(100, 1000),
        kmeans_check(20, 2000),
        metrics_check(100, 1000, 3000),
    ];
    out.extend(gradcheck_all());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infonce_symmetric_batch() {
        let a = vec![0.6, 0.8];
        let v = oracle_infonce(&a, &a, &[a.clone(), a.clone(), a.clone()], 1.0);
        assert!((v - 4.0f64.ln()).abs() < 1e-12);
        assert_eq!(oracle_infonce(&a, &a, &[], 1.0), 0.0);
    }

    #[test]
    fn kmeans_oracle_splits_tight_pairs() {
        let pts = vec![vec![1.0, 0.01], vec![1.0, -0.01], vec![0.01, 1.0], vec![-0.01, 1.0]];
        let best = oracle_kmeans(&pts, 2).unwrap();
        assert_eq!(best.assignment[0], best.assignment[1]);
        assert_eq!(best.assignment[2], best.assignment[3]);
        assert_ne!(best.assignment[0], best.assignment[2]);
        assert!(oracle_kmeans(&pts[..3], 3).unwrap().inertia.abs() < 1e-12);
        assert!(oracle_kmeans(&pts, 4).is_err());
        assert!(oracle_kmeans(&vec![vec![1.0]; 13], 2).is_err());
    }

    #[test]
    fn metrics_oracle_forced_counts() {
        let r = oracle_metrics(&[1; 4096], &[0; 4096]);
        assert_eq!(r.confusion, ConfusionMatrix { tp: 0, tn: 0, fp: 4096, fn_: 0 });
    }

    #[test]
    fn random_cases_respect_size_limits() {
        for seed in 0..20 {
            let c = ContrastCase::random(seed).unwrap();
            assert!(c.labels.len() <= 64);
            let classes: std::collections::BTreeSet<_> = c.centroids.iter().map(|r| r.class).collect();
            assert!((2..=8).contains(&classes.len()));
        }
    }
}
