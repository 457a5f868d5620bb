//! Pixel, region and centroid contrastive objectives.
//!
//! Every loss is a mean of InfoNCE terms over one row matrix laid out as
//! `[pixel rows | prototype rows | centroid rows]`. The term lists are built
//! once and evaluated either directly on `f64` values or on the tape.

use serde::{Deserialize, Serialize};

use crate::diffcore::{ContrastTerm, Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::sampling::ContrastiveBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClemForm {
    /// `λ_pp·L_PP + λ_rr·L_RR + λ_pr·L_PR`.
    Separate,
    /// One softmax per anchor over the union of pixel, prototype and centroid
    /// negatives.
    Union,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClemParams {
    pub tau: f64,
    pub lambda_pp: f64,
    pub lambda_rr: f64,
    pub lambda_pr: f64,
    pub form: ClemForm,
}

/// How pixel rows map to (image, date) groups: row `r` belongs to group
/// `r / rows_per_group`, and group `g` is image `g % images` at date
/// `g / images`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupLayout {
    pub rows_per_group: usize,
    pub images: usize,
    pub temporals: usize,
}

impl GroupLayout {
    pub fn group_of(&self, row: usize) -> usize {
        row / self.rows_per_group
    }

    pub fn groups(&self) -> usize {
        self.images * self.temporals
    }

    pub fn rows(&self) -> usize {
        self.groups() * self.rows_per_group
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionPrototype {
    pub class: usize,
    pub group: usize,
    pub image: usize,
    pub temporal: usize,
    pub members: Vec<usize>,
    /// Unit-norm mean of the member embeddings.
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrototypeSet {
    pub prototypes: Vec<RegionPrototype>,
    /// Regions dropped for having fewer than the minimum pixel count.
    pub skipped: usize,
}

/// A fixed (non-trainable) centroid usable as a negative.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidRow {
    pub class: usize,
    pub vector: Vec<f64>,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One prototype per (group, class) with at least `min_pixels` members, in
/// group-major, class-ascending order.
pub fn region_prototypes(
    embeddings: &[f64],
    dim: usize,
    labels: &[usize],
    layout: GroupLayout,
    min_pixels: usize,
) -> Result<PrototypeSet> {
    if labels.len() != layout.rows() || embeddings.len() != labels.len() * dim {
        return Err(Error::shape(
            "region_prototypes",
            format!("{} labels, {} values, layout {:?}", labels.len(), embeddings.len(), layout),
        ));
    }
    let mut set = PrototypeSet::default();
    for group in 0..layout.groups() {
        let rows = group * layout.rows_per_group..(group + 1) * layout.rows_per_group;
        let mut classes: Vec<usize> = labels[rows.clone()].to_vec();
        classes.sort_unstable();
        classes.dedup();
        for class in classes {
            let members: Vec<usize> = rows.clone().filter(|&r| labels[r] == class).collect();
            if members.len() < min_pixels.max(1) {
                set.skipped += 1;
                continue;
            }
            let mut vector = vec![0.0; dim];
            for &m in &members {
                for (v, e) in vector.iter_mut().zip(&embeddings[m * dim..(m + 1) * dim]) {
                    *v += e;
                }
            }
            let inv = 1.0 / members.len() as f64;
            vector.iter_mut().for_each(|v| *v *= inv);
            normalize(&mut vector);
            set.prototypes.push(RegionPrototype {
                class,
                group,
                image: group % layout.images,
                temporal: group / layout.images,
                members,
                vector,
            });
        }
    }
    Ok(set)
}

/// `−log(exp(a·p/τ) / (exp(a·p/τ) + Σ_j exp(a·n_j/τ)))`; zero without negatives.
pub fn infonce(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> f64 {
    if negatives.is_empty() {
        log::debug!("infonce called with an empty negative set");
        return 0.0;
    }
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(dot(anchor, positive) / tau);
    logits.extend(negatives.iter().map(|n| dot(anchor, n) / tau));
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[0]
}

/// Row-index offsets of the prototype and centroid blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowBlocks {
    pub pixels: usize,
    pub prototypes: usize,
    pub centroids: usize,
}

impl RowBlocks {
    pub fn proto(&self, i: usize) -> usize {
        self.pixels + i
    }

    pub fn centroid(&self, i: usize) -> usize {
        self.pixels + self.prototypes + i
    }
}

pub fn pp_terms(batch: &ContrastiveBatch) -> Vec<ContrastTerm> {
    batch
        .samples
        .iter()
        .filter(|s| !s.negatives.is_empty())
        .map(|s| ContrastTerm {
            anchor: s.anchor,
            positive: s.positive,
            negatives: s.negatives.clone(),
        })
        .collect()
}

/// Prototype anchors; the positive is the same class of the same image at
/// the other date.
pub fn rr_terms(protos: &[RegionPrototype], blocks: RowBlocks) -> Vec<ContrastTerm> {
    let mut terms = Vec::new();
    for (i, p) in protos.iter().enumerate() {
        let Some(j) = protos
            .iter()
            .position(|q| q.class == p.class && q.image == p.image && q.temporal != p.temporal)
        else {
            continue;
        };
        let negatives: Vec<usize> = (0..protos.len())
            .filter(|&k| protos[k].class != p.class)
            .map(|k| blocks.proto(k))
            .collect();
        if negatives.is_empty() {
            continue;
        }
        terms.push(ContrastTerm {
            anchor: blocks.proto(i),
            positive: blocks.proto(j),
            negatives,
        });
    }
    terms
}

/// Pixel anchors against the prototype of their own region.
pub fn pr_terms(
    batch: &ContrastiveBatch,
    protos: &[RegionPrototype],
    layout: GroupLayout,
    blocks: RowBlocks,
) -> Vec<ContrastTerm> {
    let mut terms = Vec::new();
    for s in &batch.samples {
        let group = layout.group_of(s.anchor);
        let Some(own) = protos.iter().position(|p| p.group == group && p.class == s.class) else {
            continue;
        };
        let negatives: Vec<usize> = (0..protos.len())
            .filter(|&k| protos[k].class != s.class)
            .map(|k| blocks.proto(k))
            .collect();
        if negatives.is_empty() {
            continue;
        }
        terms.push(ContrastTerm {
            anchor: s.anchor,
            positive: blocks.proto(own),
            negatives,
        });
    }
    terms
}

fn centroid_negatives(class: usize, centroids: &[CentroidRow], blocks: RowBlocks) -> impl Iterator<Item = usize> + '_ {
    centroids
        .iter()
        .enumerate()
        .filter(move |(_, c)| c.class != class)
        .map(move |(k, _)| blocks.centroid(k))
}

/// Pixel positive; negatives are pixel, other-class prototype and other-class
/// centroid rows together.
pub fn union_terms(
    batch: &ContrastiveBatch,
    protos: &[RegionPrototype],
    centroids: &[CentroidRow],
    blocks: RowBlocks,
) -> Vec<ContrastTerm> {
    let mut terms = Vec::new();
    for s in &batch.samples {
        let mut negatives = s.negatives.clone();
        negatives.extend(
            (0..protos.len())
                .filter(|&k| protos[k].class != s.class)
                .map(|k| blocks.proto(k)),
        );
        negatives.extend(centroid_negatives(s.class, centroids, blocks));
        if negatives.is_empty() {
            continue;
        }
        terms.push(ContrastTerm {
            anchor: s.anchor,
            positive: s.positive,
            negatives,
        });
    }
    terms
}

/// PLM-mode pixel terms plus other-class centroid negatives.
pub fn plm_terms(batch: &ContrastiveBatch, centroids: &[CentroidRow], blocks: RowBlocks) -> Vec<ContrastTerm> {
    let mut terms = Vec::new();
    for s in &batch.samples {
        let mut negatives = s.negatives.clone();
        negatives.extend(centroid_negatives(s.class, centroids, blocks));
        if negatives.is_empty() {
            continue;
        }
        terms.push(ContrastTerm {
            anchor: s.anchor,
            positive: s.positive,
            negatives,
        });
    }
    terms
}

/// Mean InfoNCE of `terms` over a row-major `rows×dim` matrix; zero when
/// there are no terms.
pub fn mean_infonce(matrix: &[f64], dim: usize, terms: &[ContrastTerm], tau: f64) -> f64 {
    if terms.is_empty() {
        return 0.0;
    }
    let row = |i: usize| &matrix[i * dim..(i + 1) * dim];
    let total: f64 = terms
        .iter()
        .map(|t| {
            let negs: Vec<&[f64]> = t.negatives.iter().map(|&j| row(j)).collect();
            infonce(row(t.anchor), row(t.positive), &negs, tau)
        })
        .sum();
    total / terms.len() as f64
}

/// Stacks pixel, prototype and centroid rows into one matrix.
pub fn stack_rows(
    embeddings: &[f64],
    protos: &[RegionPrototype],
    centroids: &[CentroidRow],
) -> Vec<f64> {
    let mut m = embeddings.to_vec();
    for p in protos {
        m.extend_from_slice(&p.vector);
    }
    for c in centroids {
        m.extend_from_slice(&c.vector);
    }
    m
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClemBreakdown {
    pub pp: f64,
    pub rr: f64,
    pub pr: f64,
    pub union: f64,
    pub total: f64,
}

/// CLEM loss of one task evaluated on plain values.
#[allow(clippy::too_many_arguments)]
pub fn clem_loss(
    embeddings: &[f64],
    dim: usize,
    layout: GroupLayout,
    batch: &ContrastiveBatch,
    protos: &[RegionPrototype],
    centroids: &[CentroidRow],
    params: &ClemParams,
) -> ClemBreakdown {
    let blocks = RowBlocks {
        pixels: embeddings.len() / dim,
        prototypes: protos.len(),
        centroids: centroids.len(),
    };
    let m = stack_rows(embeddings, protos, centroids);
    match params.form {
        ClemForm::Separate => {
            let pp = mean_infonce(&m, dim, &pp_terms(batch), params.tau);
            let rr = mean_infonce(&m, dim, &rr_terms(protos, blocks), params.tau);
            let pr = mean_infonce(&m, dim, &pr_terms(batch, protos, layout, blocks), params.tau);
            ClemBreakdown {
                pp,
                rr,
                pr,
                union: 0.0,
                total: params.lambda_pp * pp + params.lambda_rr * rr + params.lambda_pr * pr,
            }
        }
        ClemForm::Union => {
            let u = mean_infonce(&m, dim, &union_terms(batch, protos, centroids, blocks), params.tau);
            ClemBreakdown {
                union: u,
                total: u,
                ..ClemBreakdown::default()
            }
        }
    }
}

/// PLM loss of a PLM-mode batch evaluated on plain values.
pub fn plm_loss(
    embeddings: &[f64],
    dim: usize,
    batch: &ContrastiveBatch,
    centroids: &[CentroidRow],
    tau: f64,
) -> f64 {
    let blocks = RowBlocks {
        pixels: embeddings.len() / dim,
        prototypes: 0,
        centroids: centroids.len(),
    };
    let m = stack_rows(embeddings, &[], centroids);
    mean_infonce(&m, dim, &plm_terms(batch, centroids, blocks), tau)
}

/// Appends normalized prototype rows and constant centroid rows below the
/// unit-norm pixel rows `rows` (`R×D`).
pub fn stack_graph_rows<T: Scalar>(
    g: &mut Graph<T>,
    rows: NodeId,
    protos: &[RegionPrototype],
    centroids: &[CentroidRow],
) -> Result<NodeId> {
    let (_, d) = g.value(rows).dims2()?;
    let mut parts = vec![rows];
    if !protos.is_empty() {
        let groups: Vec<Vec<usize>> = protos.iter().map(|p| p.members.clone()).collect();
        let means = g.segment_mean(rows, &groups)?;
        parts.push(g.l2_normalize(means)?);
    }
    if !centroids.is_empty() {
        let data: Vec<T> = centroids.iter().flat_map(|c| c.vector.iter().map(|&v| T::lit(v))).collect();
        parts.push(g.constant(Tensor::from_vec(&[centroids.len(), d], data)?));
    }
    if parts.len() == 1 {
        Ok(rows)
    } else {
        g.concat(&parts, 0)
    }
}

/// Tape version of [`clem_loss`].
pub fn clem_graph<T: Scalar>(
    g: &mut Graph<T>,
    rows: NodeId,
    layout: GroupLayout,
    batch: &ContrastiveBatch,
    protos: &[RegionPrototype],
    centroids: &[CentroidRow],
    params: &ClemParams,
) -> Result<NodeId> {
    let (r, _) = g.value(rows).dims2()?;
    let blocks = RowBlocks {
        pixels: r,
        prototypes: protos.len(),
        centroids: centroids.len(),
    };
    let m = stack_graph_rows(g, rows, protos, centroids)?;
    let tau = T::lit(params.tau);
    match params.form {
        ClemForm::Separate => {
            let pp = g.contrastive(m, pp_terms(batch), tau)?;
            let rr = g.contrastive(m, rr_terms(protos, blocks), tau)?;
            let pr = g.contrastive(m, pr_terms(batch, protos, layout, blocks), tau)?;
            g.weighted_sum(&[
                (T::lit(params.lambda_pp), pp),
                (T::lit(params.lambda_rr), rr),
                (T::lit(params.lambda_pr), pr),
            ])
        }
        ClemForm::Union => g.contrastive(m, union_terms(batch, protos, centroids, blocks), tau),
    }
}

/// Tape version of [`plm_loss`].
pub fn plm_graph<T: Scalar>(
    g: &mut Graph<T>,
    rows: NodeId,
    batch: &ContrastiveBatch,
    centroids: &[CentroidRow],
    tau: f64,
) -> Result<NodeId> {
    let (r, _) = g.value(rows).dims2()?;
    let blocks = RowBlocks {
        pixels: r,
        prototypes: 0,
        centroids: centroids.len(),
    };
    let m = stack_graph_rows(g, rows, &[], centroids)?;
    g.contrastive(m, plm_terms(batch, centroids, blocks), T::lit(tau))
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;
    use crate::constrainer::sampling::{AnchorSample, SampleMode, Task};

    #[test]
    fn infonce_worked_values() {
        let a = [1.0, 0.0];
        let n = [0.0, 1.0];
        assert_relative_eq!(infonce(&a, &a, &[&n], 1.0), (1.0 + (-1.0f64).exp()).ln(), epsilon = 1e-12);
        assert_relative_eq!(infonce(&a, &a, &[&a, &a, &a], 1.0), 4.0f64.ln(), epsilon = 1e-12);
        let far = [-1.0, 0.0];
        assert_relative_eq!(infonce(&a, &a, &[&far], 1.0), 0.126_928_011, epsilon = 1e-8);
        assert_eq!(infonce(&a, &a, &[], 1.0), 0.0);
    }

    #[test]
    fn infonce_high_temperature_limit() {
        let a = [0.6, 0.8];
        let p = [1.0, 0.0];
        let n1 = [0.0, 1.0];
        let n2 = [-0.6, 0.8];
        let v = infonce(&a, &p, &[&n1, &n2], 1e6);
        assert!((v - 3.0f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn prototype_mean_is_renormalized() {
        let emb = [1.0, 0.0, 0.0, 1.0];
        let layout = GroupLayout {
            rows_per_group: 2,
            images: 1,
            temporals: 1,
        };
        let set = region_prototypes(&emb, 2, &[0, 0], layout, 1).unwrap();
        assert_eq!(set.prototypes.len(), 1);
        let v = &set.prototypes[0].vector;
        assert_relative_eq!(v[0], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        assert_relative_eq!(v[1], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
    }

    #[test]
    fn small_regions_are_counted_as_skipped() {
        let emb = [1.0, 0.0, 0.0, 1.0, 0.6, 0.8];
        let layout = GroupLayout {
            rows_per_group: 3,
            images: 1,
            temporals: 1,
        };
        let set = region_prototypes(&emb, 2, &[0, 0, 1], layout, 2).unwrap();
        assert_eq!(set.prototypes.len(), 1);
        assert_eq!(set.skipped, 1);
    }

    #[test]
    fn graph_and_value_losses_agree() {
        // two images x two dates x 4 rows, 2-d embeddings
        let layout = GroupLayout {
            rows_per_group: 4,
            images: 2,
            temporals: 2,
        };
        let dim = 3;
        let emb: Vec<f64> = (0..16 * dim)
            .map(|i| ((i * 7919 % 97) as f64 / 97.0) - 0.4)
            .collect::<Vec<_>>()
            .chunks(dim)
            .flat_map(|r| {
                let mut r = r.to_vec();
                normalize(&mut r);
                r
            })
            .collect();
        let labels: Vec<usize> = (0..16).map(|i| (i / 2) % 2).collect();
        let protos = region_prototypes(&emb, dim, &labels, layout, 1).unwrap().prototypes;
        let batch = ContrastiveBatch {
            task: Task::Segmentation,
            mode: SampleMode::Clem,
            samples: vec![
                AnchorSample {
                    anchor: 0,
                    class: 0,
                    centroid: None,
                    positive: 1,
                    negatives: vec![2, 3, 6],
                },
                AnchorSample {
                    anchor: 10,
                    class: 1,
                    centroid: None,
                    positive: 11,
                    negatives: vec![8, 9],
                },
            ],
        };
        let centroids = vec![CentroidRow {
            class: 1,
            vector: vec![0.0, 1.0, 0.0],
        }];
        for form in [ClemForm::Separate, ClemForm::Union] {
            let params = ClemParams {
                tau: 0.5,
                lambda_pp: 1.0,
                lambda_rr: 0.5,
                lambda_pr: 2.0,
                form,
            };
            let v = clem_loss(&emb, dim, layout, &batch, &protos, &centroids, &params).total;
            let mut g = Graph::<f64>::new();
            let rows = g.constant(Tensor::from_vec(&[16, dim], emb.clone()).unwrap());
            let n = clem_graph(&mut g, rows, layout, &batch, &protos, &centroids, &params).unwrap();
            assert_relative_eq!(g.value(n).item(), v, epsilon = 1e-12);
        }
        let v = plm_loss(&emb, dim, &batch, &centroids, 0.3);
        let mut g = Graph::<f64>::new();
        let rows = g.constant(Tensor::from_vec(&[16, dim], emb.clone()).unwrap());
        let n = plm_graph(&mut g, rows, &batch, &centroids, 0.3).unwrap();
        assert_relative_eq!(g.value(n).item(), v, epsilon = 1e-12);
    }
}
