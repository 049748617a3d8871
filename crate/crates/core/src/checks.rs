//! Randomised invariant suites over the model spaces, product distances and
//! the edge sampler.
//!
//! Every suite draws its samples from a seeded generator and reports the seed,
//! so a failure can be replayed exactly. The distance function is a parameter
//! so that a deliberately broken implementation can be checked against the
//! suites.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // Float math is inherent on std targets only.
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::dgm::gumbel_topk;
use crate::manifolds::{check_membership, exp_map, ComponentSpec, SpaceKind};
use crate::product::{ManifoldSignature, ProductPoint};
use crate::{Error, Result};

/// Signature of a component distance `d(kind, x, y, K)`.
pub type DistanceFn<'a> = &'a dyn Fn(SpaceKind, &[f64], &[f64], f64) -> Result<f64>;

/// Curvature magnitudes exercised when none is given.
pub const CURVATURE_MAGNITUDES: [f64; 3] = [0.25, 1.0, 4.0];
/// Curvature magnitudes of the flat-limit suite.
pub const SMALL_CURVATURES: [f64; 3] = [1e-2, 1e-4, 1e-6];
pub const TRIANGLE_SLACK: f64 = 1e-9;
pub const IDENTITY_TOL: f64 = 1e-10;
pub const MEMBERSHIP_TOL: f64 = 1e-8;
pub const PRODUCT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOptions {
    /// Restrict to one model space; also skips the product and sampler suites.
    pub space: Option<SpaceKind>,
    /// Single curvature to use instead of [`CURVATURE_MAGNITUDES`].
    pub curvature: Option<f64>,
    /// Pairs, triples or vectors per suite and curvature.
    pub samples: usize,
    pub gumbel_draws: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            space: None,
            curvature: None,
            samples: 1000,
            gumbel_draws: 200_000,
            seed: 0,
        }
    }
}

/// Outcome of one suite at one setting.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub suite: &'static str,
    /// Space and curvature the suite ran on, e.g. `P K=-1`.
    pub scope: String,
    pub passed: bool,
    /// First violation, or a summary statistic when passing.
    pub detail: String,
    pub seed: u64,
}

/// Point dimension used by the model-space suites.
const DIM: usize = 3;

fn random_tangent<R: Rng>(rng: &mut R, dim: usize, max_norm: f64) -> Vec<f64> {
    let dir: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let n = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let r = max_norm * rng.random::<f64>();
    dir.iter().map(|d| d / n * r).collect()
}

/// Largest tangent norm used for point sampling, in units of `1/sqrt|K|`.
fn reach(kind: SpaceKind, k: f64) -> f64 {
    let unit = if k == 0.0 { 1.0 } else { 1.0 / k.abs().sqrt() };
    match kind {
        SpaceKind::StereoSphere => 1.5 * unit,
        _ => 3.0 * unit,
    }
}

fn random_point<R: Rng>(rng: &mut R, kind: SpaceKind, k: f64) -> Result<Vec<f64>> {
    let v = random_tangent(rng, DIM, reach(kind, k));
    Ok(exp_map(kind, &v, k)?.coords)
}

fn scope(kind: SpaceKind, k: f64) -> String {
    format!("{} K={k}", kind.letter())
}

struct Suite {
    name: &'static str,
    scope: String,
    seed: u64,
}

impl Suite {
    fn pass(self, detail: String) -> SuiteResult {
        SuiteResult {
            suite: self.name,
            scope: self.scope,
            passed: true,
            detail,
            seed: self.seed,
        }
    }

    fn fail(self, detail: String) -> SuiteResult {
        SuiteResult {
            suite: self.name,
            scope: self.scope,
            passed: false,
            detail,
            seed: self.seed,
        }
    }

    /// Runs `body` and turns an error into a failure.
    fn run(self, body: impl FnOnce() -> Result<core::result::Result<String, String>>) -> SuiteResult {
        match body() {
            Ok(Ok(d)) => self.pass(d),
            Ok(Err(d)) => self.fail(d),
            Err(e) => self.fail(format!("error: {e}")),
        }
    }
}

fn axioms(dist: DistanceFn, kind: SpaceKind, k: f64, samples: usize, seed: u64) -> Vec<SuiteResult> {
    let suite = |name| Suite {
        name,
        scope: scope(kind, k),
        seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triples = Vec::with_capacity(samples);
    for _ in 0..samples {
        let pts: Result<Vec<Vec<f64>>> = (0..3).map(|_| random_point(&mut rng, kind, k)).collect();
        match pts {
            Ok(p) => triples.push(p),
            Err(e) => return vec![suite("sampling").fail(format!("error: {e}"))],
        }
    }
    let d = |a: &[f64], b: &[f64]| dist(kind, a, b, k);
    vec![
        suite("symmetry").run(|| {
            for (i, t) in triples.iter().enumerate() {
                let (ab, ba) = (d(&t[0], &t[1])?, d(&t[1], &t[0])?);
                if ab != ba {
                    return Ok(Err(format!("sample {i}: d(x,y) = {ab} but d(y,x) = {ba}")));
                }
            }
            Ok(Ok(format!("{samples} pairs")))
        }),
        suite("identity").run(|| {
            let mut worst = 0.0f64;
            for (i, t) in triples.iter().enumerate() {
                let v = d(&t[0], &t[0])?;
                if !(v.abs() <= IDENTITY_TOL) {
                    return Ok(Err(format!("sample {i}: d(x,x) = {v}")));
                }
                worst = worst.max(v.abs());
            }
            Ok(Ok(format!("max d(x,x) = {worst:.1e}")))
        }),
        suite("non-negativity").run(|| {
            for (i, t) in triples.iter().enumerate() {
                let v = d(&t[0], &t[1])?;
                if !(v >= 0.0) {
                    return Ok(Err(format!("sample {i}: d(x,y) = {v}")));
                }
            }
            Ok(Ok(format!("{samples} pairs")))
        }),
        suite("triangle-inequality").run(|| {
            let mut margin = f64::INFINITY;
            for (i, t) in triples.iter().enumerate() {
                let (xy, yz, xz) = (d(&t[0], &t[1])?, d(&t[1], &t[2])?, d(&t[0], &t[2])?);
                if !(xz <= xy + yz + TRIANGLE_SLACK) {
                    return Ok(Err(format!(
                        "sample {i}: d(x,z) = {xz} > d(x,y) + d(y,z) = {}",
                        xy + yz
                    )));
                }
                margin = margin.min(xy + yz - xz);
            }
            Ok(Ok(format!("min slack {margin:.1e}")))
        }),
    ]
}

/// Relative deviation from `2|x - y|` on `[-0.5, 0.5]^2` must stay below
/// `10|K|` and shrink with `|K|`.
fn flat_limit(dist: DistanceFn, kind: SpaceKind, samples: usize, seed: u64) -> SuiteResult {
    let sign = f64::from(kind.curvature_sign());
    Suite {
        name: "zero-curvature-limit",
        scope: format!("{}", kind.letter()),
        seed,
    }
    .run(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs: Vec<([f64; 2], [f64; 2])> = (0..samples)
            .map(|_| {
                let mut p = || [rng.random_range(-0.5..=0.5), rng.random_range(-0.5..=0.5)];
                (p(), p())
            })
            .collect();
        let mut worst = Vec::new();
        for mag in SMALL_CURVATURES {
            let k = sign * mag;
            let mut w = 0.0f64;
            for (x, y) in &pairs {
                let flat = 2.0 * ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt();
                let v = dist(kind, x, y, k)?;
                let rel = if flat > 0.0 { (v - flat).abs() / flat } else { v.abs() };
                if !(rel <= 10.0 * mag) {
                    return Ok(Err(format!(
                        "|K| = {mag}: relative deviation {rel:.3e} > {:.1e}",
                        10.0 * mag
                    )));
                }
                w = w.max(rel);
            }
            worst.push(w);
        }
        if worst.windows(2).all(|p| p[1] < p[0]) {
            Ok(Ok(format!(
                "max deviations {:.1e} {:.1e} {:.1e}",
                worst[0], worst[1], worst[2]
            )))
        } else {
            Ok(Err(format!("deviation not decreasing: {worst:?}")))
        }
    })
}

fn containment(kind: SpaceKind, k: f64, samples: usize, seed: u64) -> SuiteResult {
    Suite {
        name: "exp-containment",
        scope: scope(kind, k),
        seed,
    }
    .run(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let max_norm = 5.0 * if k == 0.0 { 1.0 } else { 1.0 / k.abs().sqrt() };
        for i in 0..samples {
            let v = random_tangent(&mut rng, DIM, max_norm);
            let p = exp_map(kind, &v, k)?.coords;
            if !check_membership(&p, kind, k, MEMBERSHIP_TOL) {
                return Ok(Err(format!("sample {i}: exp({v:?}) = {p:?} is off the manifold")));
            }
            if kind == SpaceKind::PoincareBall {
                let sq: f64 = p.iter().map(|a| a * a).sum();
                if !(sq < -1.0 / k) {
                    return Ok(Err(format!("sample {i}: |x|^2 = {sq} reaches the boundary")));
                }
            }
        }
        Ok(Ok(format!("{samples} vectors")))
    })
}

/// Stereographic projection `x -> x_{1..} / (1 + sqrt|K| x_0)` from `H` to `P`
/// and from `S` to `D`.
pub fn stereographic_projection(x: &[f64], k: f64) -> Vec<f64> {
    let denom = 1.0 + k.abs().sqrt() * x[0];
    x[1..].iter().map(|a| a / denom).collect()
}

/// Distances on `H` (`S`) agree with distances between the projected points
/// on `P` (`D`).
fn projection_isometry(dist: DistanceFn, kind: SpaceKind, k: f64, samples: usize, seed: u64) -> SuiteResult {
    let (source, target) = match kind {
        SpaceKind::Hyperboloid | SpaceKind::PoincareBall => (SpaceKind::Hyperboloid, SpaceKind::PoincareBall),
        _ => (SpaceKind::Hypersphere, SpaceKind::StereoSphere),
    };
    Suite {
        name: "stereographic-isometry",
        scope: scope(kind, k),
        seed,
    }
    .run(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for i in 0..samples {
            // Stay inside the hemisphere that projects to a bounded region.
            let r = 1.4 / k.abs().sqrt();
            let x = exp_map(source, &random_tangent(&mut rng, DIM, r), k)?.coords;
            let y = exp_map(source, &random_tangent(&mut rng, DIM, r), k)?.coords;
            let a = dist(source, &x, &y, k)?;
            let b = dist(
                target,
                &stereographic_projection(&x, k),
                &stereographic_projection(&y, k),
                k,
            )?;
            let err = (a - b).abs() / a.max(1.0);
            if !(err <= 1e-9) {
                return Ok(Err(format!(
                    "sample {i}: {} distance {a} vs projected {b}",
                    source.letter()
                )));
            }
            worst = worst.max(err);
        }
        Ok(Ok(format!("max relative gap {worst:.1e}")))
    })
}

/// `d_{K'}(c x, c y) = c d_K(x, y)` with `c = sqrt(K / K')`.
fn curvature_rescaling(dist: DistanceFn, kind: SpaceKind, k: f64, samples: usize, seed: u64) -> SuiteResult {
    Suite {
        name: "curvature-rescaling",
        scope: scope(kind, k),
        seed,
    }
    .run(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for i in 0..samples {
            let x = random_point(&mut rng, kind, k)?;
            let y = random_point(&mut rng, kind, k)?;
            let k2 = k * rng.random_range(0.1..10.0);
            let c = (k / k2).sqrt();
            let scale = |p: &[f64]| p.iter().map(|a| a * c).collect::<Vec<_>>();
            let a = c * dist(kind, &x, &y, k)?;
            let b = dist(kind, &scale(&x), &scale(&y), k2)?;
            let err = (a - b).abs() / a.max(1.0);
            if !(err <= 1e-8) {
                return Ok(Err(format!("sample {i}: {a} vs {b} at K' = {k2}")));
            }
            worst = worst.max(err);
        }
        Ok(Ok(format!("max relative gap {worst:.1e}")))
    })
}

/// Random signature of 1 to 5 components over all kinds with random
/// curvatures and dimensions 1 to 4.
pub fn random_signature<R: Rng>(rng: &mut R) -> ManifoldSignature {
    let len = rng.random_range(1..=5);
    let comps = (0..len)
        .map(|_| {
            let kind = SpaceKind::ALL[rng.random_range(0..5)];
            let mag = rng.random_range(0.1..4.0);
            let k = f64::from(kind.curvature_sign()) * mag;
            ComponentSpec::new(kind, rng.random_range(1..=4), k).expect("curvature has the right sign")
        })
        .collect();
    ManifoldSignature::new(comps).expect("non-empty")
}

fn random_product_point<R: Rng>(rng: &mut R, sig: &ManifoldSignature) -> Result<ProductPoint> {
    let parts = sig
        .components()
        .iter()
        .map(|c| {
            let v = random_tangent(rng, c.dim, reach(c.kind, c.curvature));
            exp_map(c.kind, &v, c.curvature)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProductPoint { parts })
}

/// Product distance against the square root of summed squared component
/// distances, and invariance under reordering the components.
fn product_suites(dist: DistanceFn, samples: usize, seed: u64) -> Vec<SuiteResult> {
    let oracle = |sig: &ManifoldSignature, a: &ProductPoint, b: &ProductPoint| -> Result<f64> {
        let mut acc = 0.0;
        for (c, (x, y)) in sig.components().iter().zip(a.parts.iter().zip(&b.parts)) {
            let d = dist(c.kind, &x.coords, &y.coords, c.curvature)?;
            acc += d * d;
        }
        Ok(acc.sqrt())
    };
    let product = |sig: &ManifoldSignature, a: &ProductPoint, b: &ProductPoint| -> Result<f64> {
        crate::product::product_dist(sig, a, b)
    };
    let equivalence = Suite {
        name: "product-oracle",
        scope: "product".into(),
        seed,
    }
    .run(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..samples {
            let sig = random_signature(&mut rng);
            let a = random_product_point(&mut rng, &sig)?;
            let b = random_product_point(&mut rng, &sig)?;
            let (p, o) = (product(&sig, &a, &b)?, oracle(&sig, &a, &b)?);
            if !((p - o).abs() <= PRODUCT_TOL * o.max(1.0)) {
                return Ok(Err(format!("sample {i} ({}): {p} vs oracle {o}", sig.letters())));
            }
        }
        Ok(Ok(format!("{samples} signatures")))
    });
    let permutation = Suite {
        name: "product-permutation",
        scope: "product".into(),
        seed,
    }
    .run(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..samples {
            let sig = random_signature(&mut rng);
            let a = random_product_point(&mut rng, &sig)?;
            let b = random_product_point(&mut rng, &sig)?;
            let mut order: Vec<usize> = (0..sig.len()).collect();
            for j in (1..order.len()).rev() {
                order.swap(j, rng.random_range(0..=j));
            }
            let psig = ManifoldSignature::new(order.iter().map(|&j| sig.components()[j]).collect())?;
            let perm = |p: &ProductPoint| ProductPoint {
                parts: order.iter().map(|&j| p.parts[j].clone()).collect(),
            };
            let (d1, d2) = (product(&sig, &a, &b)?, product(&psig, &perm(&a), &perm(&b))?);
            if d1.to_bits() != d2.to_bits() {
                return Ok(Err(format!("sample {i}: {d1} vs {d2} after reordering")));
            }
        }
        Ok(Ok(format!("{samples} signatures")))
    });
    vec![equivalence, permutation]
}

/// Fixed 5-logit row used by the sampler fidelity suite.
pub const GUMBEL_LOGITS: [f64; 5] = [0.5, -1.0, 2.0, 0.0, 1.2];

/// Frequencies of `k = 1` samples against the row softmax, each within three
/// binomial standard deviations.
pub fn gumbel_fidelity(draws: usize, seed: u64) -> SuiteResult {
    Suite {
        name: "gumbel-fidelity",
        scope: "sampler".into(),
        seed,
    }
    .run(|| {
        let n = GUMBEL_LOGITS.len() + 1;
        // Row 0 holds the logits behind its own (excluded) diagonal entry.
        let mut logits = Tensor::zeros(&[n, n]);
        for (j, &l) in GUMBEL_LOGITS.iter().enumerate() {
            logits.set(0, j + 1, l);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts = [0usize; GUMBEL_LOGITS.len()];
        for _ in 0..draws {
            let s = gumbel_topk(&logits, 1, &mut rng)?;
            counts[s.targets(0)[0] - 1] += 1;
        }
        let max = GUMBEL_LOGITS.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = GUMBEL_LOGITS.iter().map(|l| (l - max).exp()).sum();
        let mut worst = 0.0f64;
        for (j, &c) in counts.iter().enumerate() {
            let p = (GUMBEL_LOGITS[j] - max).exp() / z;
            let sigma = (p * (1.0 - p) / draws as f64).sqrt();
            let dev = (c as f64 / draws as f64 - p).abs() / sigma;
            if !(dev <= 3.0) {
                return Ok(Err(format!("entry {j}: frequency off by {dev:.2} sigma")));
            }
            worst = worst.max(dev);
        }
        Ok(Ok(format!("max deviation {worst:.2} sigma over {draws} draws")))
    })
}

/// No sampled row ever contains its own node.
pub fn no_self_loops(draws: usize, seed: u64) -> SuiteResult {
    Suite {
        name: "no-self-loops",
        scope: "sampler".into(),
        seed,
    }
    .run(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 5;
        for d in 0..draws {
            // Finite diagonal: the sampler must exclude it by itself.
            let data = (0..n * n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let logits = Tensor::matrix(n, n, data)?;
            let k = rng.random_range(1..n);
            let s = gumbel_topk(&logits, k, &mut rng)?;
            let looped = s.edges().find(|(i, j)| i == j);
            if let Some((i, _)) = looped {
                return Ok(Err(format!("draw {d}: self-loop on node {i}")));
            }
        }
        Ok(Ok(format!("{draws} draws")))
    })
}

fn curvatures_for(kind: SpaceKind, fixed: Option<f64>) -> Result<Vec<f64>> {
    if let Some(k) = fixed {
        kind.check_curvature(k)?;
        return Ok(vec![k]);
    }
    let sign = f64::from(kind.curvature_sign());
    Ok(if sign == 0.0 {
        vec![0.0]
    } else {
        CURVATURE_MAGNITUDES.iter().map(|m| sign * m).collect()
    })
}

/// Runs every suite selected by `opts` against `dist`.
pub fn run_checks(opts: &CheckOptions, dist: DistanceFn) -> Result<Vec<SuiteResult>> {
    if opts.samples == 0 {
        return Err(Error::Config("samples must be positive".into()));
    }
    if opts.curvature.is_some() && opts.space.is_none() {
        return Err(Error::Config("a curvature needs a space to go with it".into()));
    }
    let spaces: Vec<SpaceKind> = match opts.space {
        Some(s) => vec![s],
        None => SpaceKind::ALL.to_vec(),
    };
    let mut out = Vec::new();
    let seed = opts.seed;
    for &kind in &spaces {
        for k in curvatures_for(kind, opts.curvature)? {
            out.extend(axioms(dist, kind, k, opts.samples, seed));
            out.push(containment(kind, k, opts.samples, seed));
            if kind != SpaceKind::Euclidean {
                out.push(projection_isometry(dist, kind, k, opts.samples, seed));
                out.push(curvature_rescaling(dist, kind, k, opts.samples, seed));
            }
        }
        if matches!(kind, SpaceKind::PoincareBall | SpaceKind::StereoSphere) && opts.curvature.is_none() {
            out.push(flat_limit(dist, kind, opts.samples, seed));
        }
    }
    if opts.space.is_none() {
        out.extend(product_suites(dist, opts.samples, seed));
        out.push(gumbel_fidelity(opts.gumbel_draws, seed));
        out.push(no_self_loops(opts.samples.max(10_000), seed));
    }
    Ok(out)
}
