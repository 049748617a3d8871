//! Diffusion layers (GCN, single-head GAT, MLP) and the end-to-end forward
//! pass of the plain baselines and the latent-graph models.
//!
//! A latent-graph model embeds node features into tangent space with `f_Θ`,
//! maps them onto the product manifold, samples `k` neighbours per node from
//! the geodesic edge logits, and then runs the diffusion layers over the
//! sampled graph. `f_Θ` is a GCN over the input graph for `dDGM` and an MLP
//! for `dDGM*`.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

#[allow(unused_imports)] // Float math is inherent on std targets only.
use num_traits::Float;
use rand::Rng;

use crate::autodiff::{softplus, softplus_inverse, Csr, NodeId, Tape, Tensor};
use crate::data::Adjacency;
use crate::dgm::{adjacency_from_sample, sample_on_tape, DgmParams, SamplerMode, TapeSample};
use crate::geometry::{curvature_from_pre, product_pairwise_distance};
use crate::manifolds::SpaceKind;
use crate::product::{parse_signature, ManifoldSignature, DEFAULT_DIM};
use crate::{Error, Result};

/// Slope of the leaky ReLU inside GAT attention scores.
pub const GAT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backbone {
    Gcn,
    Gat,
    Mlp,
}

impl Backbone {
    pub fn name(self) -> &'static str {
        match self {
            Backbone::Gcn => "GCN",
            Backbone::Gat => "GAT",
            Backbone::Mlp => "MLP",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "GCN" => Some(Backbone::Gcn),
            "GAT" => Some(Backbone::Gat),
            "MLP" => Some(Backbone::Mlp),
            _ => None,
        }
    }
}

/// The latent-graph part of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSpec {
    pub signature: ManifoldSignature,
    pub k: usize,
    /// `dDGM` (true) conditions the embedding on the input graph; `dDGM*` does not.
    pub use_input_graph: bool,
}

/// Architecture named like `GCN`, `GCN-dDGM-E` or `GAT-dDGM*-EHP`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub backbone: Backbone,
    pub latent: Option<LatentSpec>,
}

impl ModelSpec {
    /// Parses `(GCN|GAT|MLP)(-dDGM(\*)?-<signature>)?`. `k` is used only by
    /// latent-graph models.
    pub fn parse(name: &str, k: usize) -> Result<Self> {
        let bad = || Error::Config(format!("unrecognised model name {name:?}"));
        let mut parts = name.splitn(3, '-');
        let backbone = Backbone::from_name(parts.next().ok_or_else(bad)?).ok_or_else(bad)?;
        let latent = match (parts.next(), parts.next()) {
            (None, _) => None,
            (Some(module), Some(sig)) => {
                let use_input_graph = match module {
                    "dDGM" => true,
                    "dDGM*" => false,
                    _ => return Err(bad()),
                };
                if k == 0 {
                    return Err(Error::Config("k must be at least 1".into()));
                }
                Some(LatentSpec {
                    signature: parse_signature(sig, DEFAULT_DIM)?,
                    k,
                    use_input_graph,
                })
            }
            (Some(_), None) => return Err(bad()),
        };
        Ok(ModelSpec { backbone, latent })
    }

    /// Whether the forward pass reads the dataset's edges.
    pub fn needs_input_graph(&self) -> bool {
        match &self.latent {
            Some(l) => l.use_input_graph,
            None => self.backbone != Backbone::Mlp,
        }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.backbone.name())?;
        if let Some(l) = &self.latent {
            let star = if l.use_input_graph { "" } else { "*" };
            write!(f, "-dDGM{star}-")?;
            if l.signature.components().iter().all(|c| c.dim == DEFAULT_DIM) {
                f.write_str(&l.signature.letters())?;
            } else {
                write!(f, "{}", l.signature)?;
            }
        }
        Ok(())
    }
}

/// Weight `[in, out]`, bias `[1, out]` and, for GAT, attention `[1, 2 out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub attention: Option<Tensor>,
}

impl LayerParams {
    /// Glorot-uniform weights and attention, zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, attention: bool, rng: &mut R) -> Self {
        let mut glorot = |rows: usize, cols: usize, fan: usize| {
            let limit = (6.0 / fan as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
            Tensor::matrix(rows, cols, data).expect("sizes match")
        };
        let weight = glorot(input, output, input + output);
        let attention = attention.then(|| glorot(1, 2 * output, 2 * output + 1));
        LayerParams {
            weight,
            bias: Tensor::zeros(&[1, output]),
            attention,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Normalised propagation matrix and attention mask of one graph.
#[derive(Debug, Clone)]
pub struct PreparedGraph {
    n: usize,
    norm: Rc<Csr>,
    mask: Vec<bool>,
}

impl PreparedGraph {
    /// `D^{-1/2} (A + I) D^{-1/2}` with `D` the row degrees of `A + I`, and
    /// the `[n, n]` mask of `A + I` for attention.
    pub fn new(adj: &Adjacency) -> Self {
        let n = adj.n();
        let rows_with_self: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut r: Vec<usize> = adj.neighbors(i).to_vec();
                if r.binary_search(&i).is_err() {
                    r.push(i);
                }
                r
            })
            .collect();
        let inv_sqrt: Vec<f64> = rows_with_self.iter().map(|r| 1.0 / (r.len() as f64).sqrt()).collect();
        let entries: Vec<Vec<(usize, f64)>> = rows_with_self
            .iter()
            .enumerate()
            .map(|(i, r)| r.iter().map(|&j| (j, inv_sqrt[i] * inv_sqrt[j])).collect())
            .collect();
        let mut mask = vec![false; n * n];
        for (i, r) in rows_with_self.iter().enumerate() {
            for &j in r {
                mask[i * n + j] = true;
            }
        }
        PreparedGraph {
            n,
            norm: Rc::new(Csr::from_rows(n, &entries).expect("indices come from a valid adjacency")),
            mask,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn normalized(&self) -> &Csr {
        &self.norm
    }
}

fn check_layer(tape: &Tape, h: NodeId, w: NodeId, graph: Option<&PreparedGraph>) -> Result<()> {
    let (rows, cols) = tape.value(h).dims2();
    let in_dim = tape.value(w).rows();
    if cols != in_dim {
        return Err(Error::Dimension {
            expected: in_dim,
            got: cols,
        });
    }
    if let Some(g) = graph {
        if g.n != rows {
            return Err(Error::Dimension {
                expected: g.n,
                got: rows,
            });
        }
    }
    Ok(())
}

fn activate(tape: &mut Tape, x: NodeId, relu: bool) -> Result<NodeId> {
    if relu {
        tape.relu(x)
    } else {
        Ok(x)
    }
}

/// `relu(H W + b)`, or the affine map alone when `relu` is false.
pub fn mlp_layer(tape: &mut Tape, h: NodeId, w: NodeId, b: NodeId, relu: bool) -> Result<NodeId> {
    check_layer(tape, h, w, None)?;
    let hw = tape.matmul(h, w)?;
    let z = tape.add(hw, b)?;
    activate(tape, z, relu)
}

/// `relu(Â H W + b)` with `Â` the normalised adjacency with self-loops.
pub fn gcn_layer(
    tape: &mut Tape,
    h: NodeId,
    graph: &PreparedGraph,
    w: NodeId,
    b: NodeId,
    relu: bool,
) -> Result<NodeId> {
    check_layer(tape, h, w, Some(graph))?;
    let hw = tape.matmul(h, w)?;
    let agg = tape.sp_matmul(graph.norm.clone(), hw)?;
    let z = tape.add(agg, b)?;
    activate(tape, z, relu)
}

/// Single-head attention: `relu(sum_j α_ij h_j W + b)` over `j ∈ N(i) ∪ {i}`,
/// `α_i = softmax_j leaky_relu(a · [h_i W ‖ h_j W])`.
pub fn gat_layer(
    tape: &mut Tape,
    h: NodeId,
    graph: &PreparedGraph,
    w: NodeId,
    b: NodeId,
    a: NodeId,
    relu: bool,
) -> Result<NodeId> {
    check_layer(tape, h, w, Some(graph))?;
    let out = tape.value(w).cols();
    if tape.value(a).len() != 2 * out {
        return Err(Error::Dimension {
            expected: 2 * out,
            got: tape.value(a).len(),
        });
    }
    let z = tape.matmul(h, w)?;
    let a_src = tape.slice_cols(a, 0, out)?;
    let a_dst = tape.slice_cols(a, out, 2 * out)?;
    let a_src = tape.transpose(a_src)?;
    let a_dst = tape.transpose(a_dst)?;
    let s_src = tape.matmul(z, a_src)?;
    let s_dst = tape.matmul(z, a_dst)?;
    let s_dst = tape.transpose(s_dst)?;
    let scores = tape.add(s_src, s_dst)?;
    let scores = tape.leaky_relu(scores, GAT_LEAKY_SLOPE)?;
    let alpha = tape.softmax_rows(scores, Some(graph.mask.clone()))?;
    let agg = tape.matmul(alpha, z)?;
    let y = tape.add(agg, b)?;
    activate(tape, y, relu)
}

/// Hidden width, depth and initial values of the learnable scalars.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitOptions {
    pub hidden: usize,
    pub diffusion_layers: usize,
    pub temperature: f64,
    /// Initial `|K|` of every curved component.
    pub curvature_magnitude: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions {
            hidden: 32,
            diffusion_layers: 2,
            temperature: 1.0,
            curvature_magnitude: 1.0,
        }
    }
}

/// Every learnable parameter of a model.
///
/// The canonical parameter order, used by [`ModelParams::flatten`] and the
/// tape leaves, is: `dgm_transform` layers, temperature, curvatures,
/// `diffusion` layers, `head`. Each layer contributes weight, bias, then
/// attention if present.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub dgm_transform: Vec<LayerParams>,
    pub diffusion: Vec<LayerParams>,
    pub head: LayerParams,
    pub dgm: Option<DgmParams>,
    /// One unconstrained value per curved component, in signature order.
    pub curvature_pre: Vec<f64>,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(
        spec: &ModelSpec,
        n_features: usize,
        n_classes: usize,
        opts: &InitOptions,
        rng: &mut R,
    ) -> Result<Self> {
        if n_features == 0 || n_classes == 0 || opts.hidden == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(opts.curvature_magnitude > 0.0) {
            return Err(Error::Config("initial curvature magnitude must be positive".into()));
        }
        let mut dgm_transform = Vec::new();
        let mut dgm = None;
        let mut curvature_pre = Vec::new();
        if let Some(l) = &spec.latent {
            dgm_transform.push(LayerParams::init(n_features, l.signature.tangent_dim(), false, rng));
            dgm = Some(DgmParams::new(l.signature.clone(), l.k, opts.temperature)?);
            for c in l.signature.components() {
                if c.kind != SpaceKind::Euclidean {
                    curvature_pre.push(softplus_inverse(opts.curvature_magnitude));
                }
            }
        }
        let gat = spec.backbone == Backbone::Gat;
        let mut diffusion = Vec::with_capacity(opts.diffusion_layers);
        let mut width = n_features;
        for _ in 0..opts.diffusion_layers {
            diffusion.push(LayerParams::init(width, opts.hidden, gat, rng));
            width = opts.hidden;
        }
        let head = LayerParams::init(width, n_classes, false, rng);
        Ok(ModelParams {
            spec: spec.clone(),
            dgm_transform,
            diffusion,
            head,
            dgm,
            curvature_pre,
        })
    }

    fn visit(&self, mut f: impl FnMut(&[f64], &[usize])) {
        let layer = |l: &LayerParams, f: &mut dyn FnMut(&[f64], &[usize])| {
            f(l.weight.data(), l.weight.shape());
            f(l.bias.data(), l.bias.shape());
            if let Some(a) = &l.attention {
                f(a.data(), a.shape());
            }
        };
        for l in &self.dgm_transform {
            layer(l, &mut f);
        }
        if let Some(d) = &self.dgm {
            f(core::slice::from_ref(&d.temperature_pre), &[1, 1]);
        }
        for c in &self.curvature_pre {
            f(core::slice::from_ref(c), &[1, 1]);
        }
        for l in &self.diffusion {
            layer(l, &mut f);
        }
        layer(&self.head, &mut f);
    }

    fn visit_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        let layer = |l: &mut LayerParams, f: &mut dyn FnMut(&mut [f64])| {
            f(l.weight.data_mut());
            f(l.bias.data_mut());
            if let Some(a) = &mut l.attention {
                f(a.data_mut());
            }
        };
        for l in &mut self.dgm_transform {
            layer(l, &mut f);
        }
        if let Some(d) = &mut self.dgm {
            f(core::slice::from_mut(&mut d.temperature_pre));
        }
        for c in &mut self.curvature_pre {
            f(core::slice::from_mut(c));
        }
        for l in &mut self.diffusion {
            layer(l, &mut f);
        }
        layer(&mut self.head, &mut f);
    }

    /// Shapes of the parameter groups in canonical order.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        self.visit(|_, s| out.push(s.to_vec()));
        out
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit(|d, _| n += d.len());
        n
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.visit(|d, _| out.extend_from_slice(d));
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.n_params();
        if flat.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: flat.len(),
            });
        }
        let mut offset = 0;
        self.visit_mut(|d| {
            d.copy_from_slice(&flat[offset..offset + d.len()]);
            offset += d.len();
        });
        Ok(())
    }

    /// One tape leaf per parameter group.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<NodeId> {
        let mut out = Vec::new();
        self.visit(|d, s| out.push(tape.leaf(Tensor::new(s.to_vec(), d.to_vec()).expect("consistent shape"))));
        out
    }

    /// Parameter groups carved out of a single `[1, n_params]` node.
    pub fn leaves_from_flat(&self, tape: &mut Tape, flat: NodeId) -> Result<Vec<NodeId>> {
        let mut ids = Vec::new();
        let mut offset = 0;
        for shape in self.shapes() {
            let len: usize = shape.iter().product();
            let piece = tape.slice_cols(flat, offset, offset + len)?;
            ids.push(tape.reshape(piece, &shape)?);
            offset += len;
        }
        Ok(ids)
    }

    /// Realised curvature of every component (0 for Euclidean ones).
    pub fn curvatures(&self) -> Vec<f64> {
        let Some(l) = &self.spec.latent else {
            return Vec::new();
        };
        let mut pre = self.curvature_pre.iter();
        l.signature
            .components()
            .iter()
            .map(|c| match c.kind.curvature_sign() {
                0 => 0.0,
                s => f64::from(s) * softplus(*pre.next().expect("one value per curved component")),
            })
            .collect()
    }

    pub fn temperature(&self) -> Option<f64> {
        self.dgm.as_ref().map(DgmParams::temperature)
    }
}

/// Result of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[n, C]` class log-probabilities.
    pub log_probs: NodeId,
    /// One entry per latent graph module.
    pub samples: Vec<TapeSample>,
}

struct Params<'a> {
    ids: core::slice::Iter<'a, NodeId>,
}

impl Params<'_> {
    fn next(&mut self) -> Result<NodeId> {
        self.ids
            .next()
            .copied()
            .ok_or_else(|| Error::Graph("fewer parameter nodes than parameter groups".into()))
    }

    fn layer(&mut self, l: &LayerParams) -> Result<(NodeId, NodeId, Option<NodeId>)> {
        let w = self.next()?;
        let b = self.next()?;
        let a = if l.attention.is_some() {
            Some(self.next()?)
        } else {
            None
        };
        Ok((w, b, a))
    }
}

fn apply_layer(
    tape: &mut Tape,
    backbone: Backbone,
    h: NodeId,
    graph: Option<&PreparedGraph>,
    (w, b, a): (NodeId, NodeId, Option<NodeId>),
    relu: bool,
) -> Result<NodeId> {
    let need = || Error::Config(format!("{} layers need a graph", backbone.name()));
    match backbone {
        Backbone::Mlp => mlp_layer(tape, h, w, b, relu),
        Backbone::Gcn => gcn_layer(tape, h, graph.ok_or_else(need)?, w, b, relu),
        Backbone::Gat => {
            let a = a.ok_or_else(|| Error::Config("GAT layer without attention parameters".into()))?;
            gat_layer(tape, h, graph.ok_or_else(need)?, w, b, a, relu)
        }
    }
}

/// Embeds, samples a latent graph when the model has one, diffuses and
/// classifies. `nodes` are the parameter nodes in canonical order (see
/// [`ModelParams::leaves`]).
pub fn forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &ModelParams,
    nodes: &[NodeId],
    x: &Tensor,
    input: Option<&Adjacency>,
    mode: SamplerMode,
    rng: &mut R,
) -> Result<Forward> {
    let n = x.rows();
    if n == 0 {
        return Err(Error::Data("no nodes to classify".into()));
    }
    if let Some(adj) = input {
        if adj.n() != n {
            return Err(Error::Dimension {
                expected: n,
                got: adj.n(),
            });
        }
    }
    if params.spec.needs_input_graph() && input.is_none() {
        return Err(Error::Config(format!(
            "{} needs the dataset's input graph",
            params.spec
        )));
    }
    let input_graph = input.map(PreparedGraph::new);
    let mut p = Params { ids: nodes.iter() };
    let features = tape.leaf(x.clone());
    let mut samples = Vec::new();

    let latent_graph = match (&params.spec.latent, &params.dgm) {
        (Some(latent), Some(dgm)) => {
            let f_backbone = if latent.use_input_graph {
                Backbone::Gcn
            } else {
                Backbone::Mlp
            };
            let mut tangent = features;
            let depth = params.dgm_transform.len();
            for (i, l) in params.dgm_transform.iter().enumerate() {
                let ids = p.layer(l)?;
                tangent = apply_layer(tape, f_backbone, tangent, input_graph.as_ref(), ids, i + 1 < depth)?;
            }
            let (graph, sample) = sample_graph(tape, &mut p, &dgm.signature, dgm.k, tangent, mode, rng)?;
            samples.push(sample);
            Some(graph)
        }
        (None, None) => None,
        _ => return Err(Error::Config("latent settings and parameters disagree".into())),
    };
    let graph = latent_graph.as_ref().or(input_graph.as_ref());

    let mut h = features;
    for l in &params.diffusion {
        let ids = p.layer(l)?;
        h = apply_layer(tape, params.spec.backbone, h, graph, ids, true)?;
    }
    let ids = p.layer(&params.head)?;
    let logits = mlp_layer(tape, h, ids.0, ids.1, false)?;
    let log_probs = tape.log_softmax_rows(logits, None)?;
    if p.ids.next().is_some() {
        return Err(Error::Graph("more parameter nodes than parameter groups".into()));
    }
    Ok(Forward { log_probs, samples })
}

fn sample_graph<R: Rng + ?Sized>(
    tape: &mut Tape,
    p: &mut Params<'_>,
    sig: &ManifoldSignature,
    k: usize,
    tangent: NodeId,
    mode: SamplerMode,
    rng: &mut R,
) -> Result<(PreparedGraph, TapeSample)> {
    let t_pre = p.next()?;
    let temperature = tape.softplus(t_pre)?;
    let mut curvatures = Vec::with_capacity(sig.len());
    for c in sig.components() {
        curvatures.push(if c.kind == SpaceKind::Euclidean {
            tape.scalar(0.0)
        } else {
            let pre = p.next()?;
            curvature_from_pre(tape, c.kind, pre)?
        });
    }
    let dist = product_pairwise_distance(tape, sig, tangent, &curvatures)?;
    let scaled = tape.mul(dist, temperature)?;
    let logits = tape.neg(scaled)?;
    let sample = sample_on_tape(tape, logits, k, mode, rng)?;
    let graph = PreparedGraph::new(&adjacency_from_sample(&sample.sample, false));
    Ok((graph, sample))
}
