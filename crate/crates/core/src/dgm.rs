//! Discrete differentiable graph module: geodesic edge logits, Gumbel top-k
//! edge sampling and the score-function loss that trains the sampler.
//!
//! Edge probabilities are the row softmax of `-T d(x_i, x_j)` over `j != i`.
//! Sampling is hard; gradients reach the embedding, the temperature and the
//! curvatures only through the log-probabilities of the sampled edges.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // Float math is inherent on std targets only.
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Gumbel};

use crate::autodiff::{softplus, softplus_inverse, NodeId, Tape, Tensor};
use crate::data::Adjacency;
use crate::manifolds::{check_membership, DOMAIN_TOL};
use crate::product::{product_dist, ManifoldSignature, ProductPoint};
use crate::{Error, Result};

/// Sampler settings and the learnable temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct DgmParams {
    /// Unconstrained temperature parameter; `T = softplus(temperature_pre)`.
    pub temperature_pre: f64,
    pub k: usize,
    pub signature: ManifoldSignature,
}

impl DgmParams {
    pub fn new(signature: ManifoldSignature, k: usize, temperature: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(alloc::format!(
                "temperature {temperature} must be positive"
            )));
        }
        Ok(DgmParams {
            temperature_pre: softplus_inverse(temperature),
            k,
            signature,
        })
    }

    pub fn temperature(&self) -> f64 {
        softplus(self.temperature_pre)
    }
}

/// `k` distinct targets per node with their log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSample {
    targets: Vec<Vec<usize>>,
    log_probs: Vec<Vec<f64>>,
}

impl EdgeSample {
    /// Checks row lengths, self-loops, duplicates and `log_prob <= 0`.
    pub fn new(targets: Vec<Vec<usize>>, log_probs: Vec<Vec<f64>>) -> Result<Self> {
        let n = targets.len();
        if log_probs.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: log_probs.len(),
            });
        }
        let k = targets.first().map_or(0, Vec::len);
        if k == 0 {
            return Err(Error::Config("an edge sample needs k >= 1 targets per node".into()));
        }
        for (i, (row, lp)) in targets.iter().zip(&log_probs).enumerate() {
            if row.len() != k || lp.len() != k {
                return Err(Error::Dimension {
                    expected: k,
                    got: if row.len() != k { row.len() } else { lp.len() },
                }
                .at_node(i));
            }
            for (a, &j) in row.iter().enumerate() {
                if j >= n || j == i || row[..a].contains(&j) {
                    return Err(Error::Graph(alloc::format!("invalid target {j} in row {i}")));
                }
            }
            if lp.iter().any(|&p| !(p <= 0.0)) {
                return Err(Error::Graph(alloc::format!("row {i} has a log-probability above 0")));
            }
        }
        Ok(EdgeSample { targets, log_probs })
    }

    pub fn n(&self) -> usize {
        self.targets.len()
    }

    pub fn k(&self) -> usize {
        self.targets[0].len()
    }

    pub fn targets(&self, i: usize) -> &[usize] {
        &self.targets[i]
    }

    pub fn log_probs(&self, i: usize) -> &[f64] {
        &self.log_probs[i]
    }

    /// All sampled `(source, target)` pairs in row order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.targets
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&j| (i, j)))
    }
}

/// `-T d(x_i, x_j)` with `-inf` on the diagonal.
pub fn edge_logits(points: &[ProductPoint], sig: &ManifoldSignature, temperature: f64) -> Result<Tensor> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Graph("edge logits need at least two nodes".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(alloc::format!(
            "temperature {temperature} must be positive"
        )));
    }
    for (i, p) in points.iter().enumerate() {
        if p.parts.len() != sig.len() {
            return Err(Error::Dimension {
                expected: sig.len(),
                got: p.parts.len(),
            }
            .at_node(i));
        }
        for (c, (spec, part)) in sig.components().iter().zip(&p.parts).enumerate() {
            if !check_membership(&part.coords, spec.kind, spec.curvature, DOMAIN_TOL) {
                return Err(Error::Domain {
                    kind: spec.kind,
                    detail: "coordinates fail the membership test".into(),
                }
                .in_component(c)
                .at_node(i));
            }
        }
    }
    let mut out = Tensor::full(&[n, n], f64::NEG_INFINITY);
    for i in 0..n {
        for j in i + 1..n {
            let d = product_dist(sig, &points[i], &points[j]).map_err(|e| e.at_node(i))?;
            out.set(i, j, -temperature * d);
            out.set(j, i, -temperature * d);
        }
    }
    Ok(out)
}

fn row_log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v - lse).collect()
}

fn top_k(row: usize, scores: &[f64], finite: usize, k: usize) -> Result<Vec<usize>> {
    if finite < k {
        return Err(Error::Sampling { row, finite, k });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

fn sample_rows(logits: &Tensor, k: usize, mut perturb: impl FnMut(f64) -> f64) -> Result<EdgeSample> {
    let (n, m) = logits.dims2();
    if n != m {
        return Err(Error::Shape(alloc::format!("logits must be square, got {n}x{m}")));
    }
    let mut targets = Vec::with_capacity(n);
    let mut log_probs = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = logits.row_slice(i).to_vec();
        row[i] = f64::NEG_INFINITY;
        if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::NonFinite { op: "edge_logits" });
        }
        let finite = row.iter().filter(|v| v.is_finite()).count();
        let scores: Vec<f64> = row
            .iter()
            .map(|&v| {
                if v.is_finite() {
                    v + perturb(v)
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let chosen = top_k(i, &scores, finite, k)?;
        let lsm = row_log_softmax(&row);
        log_probs.push(chosen.iter().map(|&j| lsm[j].min(0.0)).collect());
        targets.push(chosen);
    }
    Ok(EdgeSample { targets, log_probs })
}

/// Gumbel top-k: per row, the `k` largest of `logit + g` with `g` standard
/// Gumbel noise, i.e. `k` draws without replacement from the row softmax.
/// The diagonal and `-inf` entries are never selected.
pub fn gumbel_topk<R: Rng + ?Sized>(logits: &Tensor, k: usize, rng: &mut R) -> Result<EdgeSample> {
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit scale is valid");
    sample_rows(logits, k, |_| gumbel.sample(rng))
}

/// The `k` highest-probability targets per row, without noise.
pub fn deterministic_topk(logits: &Tensor, k: usize) -> Result<EdgeSample> {
    sample_rows(logits, k, |_| 0.0)
}

/// Directed 0/1 adjacency of the sampled edges.
pub fn adjacency_from_sample(sample: &EdgeSample, symmetrize: bool) -> Adjacency {
    let rows = (0..sample.n()).map(|i| sample.targets(i).to_vec()).collect();
    let adj = Adjacency::from_rows(sample.n(), rows).expect("sample targets are in range");
    if symmetrize {
        adj.symmetrized()
    } else {
        adj
    }
}

/// How edges are drawn from the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    Gumbel,
    /// Noise-free top-k.
    Greedy,
}

/// An [`EdgeSample`] together with the tape node of its log-probabilities.
#[derive(Debug, Clone)]
pub struct TapeSample {
    pub sample: EdgeSample,
    /// `[n k, 1]` column of sampled-edge log-probabilities, row-major by source node.
    pub log_probs: NodeId,
}

/// Samples edges from a `[n, n]` logits node and records the masked row
/// log-softmax, gathered at the sampled edges, on the tape.
pub fn sample_on_tape<R: Rng + ?Sized>(
    tape: &mut Tape,
    logits: NodeId,
    k: usize,
    mode: SamplerMode,
    rng: &mut R,
) -> Result<TapeSample> {
    let (n, m) = tape.value(logits).dims2();
    if n != m {
        return Err(Error::Shape(alloc::format!("logits must be square, got {n}x{m}")));
    }
    if k >= n {
        return Err(Error::Config(alloc::format!(
            "k = {k} must be below the node count {n}"
        )));
    }
    let values = tape.value(logits);
    let sample = match mode {
        SamplerMode::Gumbel => gumbel_topk(values, k, rng)?,
        SamplerMode::Greedy => deterministic_topk(values, k)?,
    };
    let mask: Vec<bool> = (0..n * n).map(|e| e / n != e % n).collect();
    let lsm = tape.log_softmax_rows(logits, Some(mask))?;
    let log_probs = tape.gather(lsm, sample.edges().collect())?;
    Ok(TapeSample { sample, log_probs })
}

/// `sum_layers sum_{i in nodes} (baseline_i - correct_i) sum_j log p_ij`.
///
/// `correct` and `baseline` are indexed by node; only the rows listed in
/// `nodes` contribute.
pub fn graph_reward_loss(
    tape: &mut Tape,
    samples: &[&TapeSample],
    nodes: &[usize],
    correct: &[bool],
    baseline: &[f64],
) -> Result<NodeId> {
    if correct.len() != baseline.len() {
        return Err(Error::Dimension {
            expected: baseline.len(),
            got: correct.len(),
        });
    }
    if let Some(b) = baseline.iter().find(|b| !(0.0..=1.0).contains(*b)) {
        return Err(Error::Config(alloc::format!("baseline {b} is outside [0, 1]")));
    }
    let mut total = tape.scalar(0.0);
    for s in samples {
        let (n, k) = (s.sample.n(), s.sample.k());
        if correct.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: correct.len(),
            });
        }
        let mut weights = vec![0.0; n * k];
        for &i in nodes {
            if i >= n {
                return Err(Error::Dimension { expected: n, got: i });
            }
            let adv = baseline[i] - if correct[i] { 1.0 } else { 0.0 };
            weights[i * k..(i + 1) * k].fill(adv);
        }
        let w = tape.leaf(Tensor::column(weights));
        let weighted = tape.mul(w, s.log_probs)?;
        let layer = tape.sum(weighted)?;
        total = tape.add(total, layer)?;
    }
    Ok(total)
}
