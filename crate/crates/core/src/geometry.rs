//! Differentiable, batched versions of the model-space formulas.
//!
//! Points are rows of a tape node; curvatures are scalar tape nodes so that
//! gradients reach them. The pairwise distance matrices first form a
//! curvature-scaled squared distance `z` that is exactly zero for coincident
//! points, then apply `acosh` or `acos` to `1 - z` (`1 - 2z` for the projected
//! models) and divide by `sqrt|K|`. Coincident points therefore land in the clamped region and get
//! a zero gradient instead of an infinite one.
//!
//! [`pair_distance`] evaluates the textbook formulas (for example
//! `arccosh(K <x, y>_L)` on the hyperboloid) for a single pair and serves as
//! an independent route in the tests.

use alloc::vec::Vec;

use crate::autodiff::{NodeId, Tape, Tensor, Unary};
use crate::manifolds::{SpaceKind, FLAT_CURVATURE, STEREO_SPHERE_MAX_ANGLE};
use crate::product::ManifoldSignature;
use crate::{Error, Result};

fn curvature_value(tape: &Tape, k: NodeId) -> Result<f64> {
    tape.value(k).item()
}

/// `sqrt|K|` as a tape node, after checking the sign against `kind`.
fn sqrt_abs_curvature(tape: &mut Tape, kind: SpaceKind, k: NodeId) -> Result<NodeId> {
    let kv = curvature_value(tape, k)?;
    kind.check_curvature(kv)?;
    let abs = if kv < 0.0 { tape.neg(k)? } else { k };
    tape.sqrt(abs)
}

/// Curvature realised from an unconstrained parameter: `-softplus(p)` for
/// `H`/`P`, `+softplus(p)` for `S`/`D`. Euclidean components have no parameter.
pub fn curvature_from_pre(tape: &mut Tape, kind: SpaceKind, pre: NodeId) -> Result<NodeId> {
    let sp = tape.softplus(pre)?;
    match kind.curvature_sign() {
        -1 => tape.neg(sp),
        1 => Ok(sp),
        _ => Err(Error::Config("Euclidean components have a fixed curvature".into())),
    }
}

/// Exponential map at the base point for every row of the `[n, d]` node `v`.
/// Returns `[n, ambient]`.
pub fn exp_map_rows(tape: &mut Tape, kind: SpaceKind, v: NodeId, k: NodeId) -> Result<NodeId> {
    if kind == SpaceKind::Euclidean {
        kind.check_curvature(curvature_value(tape, k)?)?;
        return Ok(v);
    }
    let sk = sqrt_abs_curvature(tape, kind, k)?;
    let r = tape.norm2_rows(v)?;
    let s = tape.mul(r, sk)?;
    match kind {
        SpaceKind::PoincareBall | SpaceKind::StereoSphere => {
            let ratio = if kind == SpaceKind::PoincareBall {
                Unary::TanhC
            } else {
                Unary::TanCClamped(STEREO_SPHERE_MAX_ANGLE)
            };
            let f = tape.unary(ratio, s)?;
            tape.mul(v, f)
        }
        _ => {
            let (head, ratio) = if kind == SpaceKind::Hyperboloid {
                (tape.cosh(s)?, Unary::SinhC)
            } else {
                (tape.cos(s)?, Unary::SinC)
            };
            let head = tape.div(head, sk)?;
            let f = tape.unary(ratio, s)?;
            let tail = tape.mul(v, f)?;
            tape.concat_cols(&[head, tail])
        }
    }
}

/// `[n, n]` matrix of geodesic distances between the rows of `x`.
pub fn pairwise_distance(tape: &mut Tape, kind: SpaceKind, x: NodeId, k: NodeId) -> Result<NodeId> {
    let kv = curvature_value(tape, k)?;
    kind.check_curvature(kv)?;
    let flat = kind == SpaceKind::Euclidean
        || (matches!(kind, SpaceKind::PoincareBall | SpaceKind::StereoSphere) && kv.abs() < FLAT_CURVATURE);
    let sq = tape.pairwise_sq_dist(x)?;
    if flat {
        let d = tape.sqrt(sq)?;
        return if kind == SpaceKind::Euclidean {
            Ok(d)
        } else {
            tape.scale(d, 2.0)
        };
    }
    // K-scaled squared distance; zero on the diagonal.
    let z = match kind {
        SpaceKind::PoincareBall | SpaceKind::StereoSphere => {
            let xx = tape.mul(x, x)?;
            let n = tape.sum_cols(xx)?;
            let kn = tape.mul(n, k)?;
            let a = tape.add_scalar(kn, 1.0)?;
            let at = tape.transpose(a)?;
            let denom = tape.mul(a, at)?;
            let num = tape.div(sq, denom)?;
            tape.mul(num, k)?
        }
        SpaceKind::Hyperboloid => {
            let lsq = tape.pairwise_lorentz_sq_dist(x)?;
            let half = tape.mul(lsq, k)?;
            tape.scale(half, 0.5)?
        }
        SpaceKind::Hypersphere => {
            let half = tape.mul(sq, k)?;
            tape.scale(half, 0.5)?
        }
        SpaceKind::Euclidean => unreachable!(),
    };
    let sk = sqrt_abs_curvature(tape, kind, k)?;
    let angle = match kind {
        SpaceKind::PoincareBall => {
            let arg = tape.scale(z, -2.0)?;
            let arg = tape.add_scalar(arg, 1.0)?;
            tape.acosh(arg)?
        }
        SpaceKind::Hyperboloid => {
            let arg = tape.neg(z)?;
            let arg = tape.add_scalar(arg, 1.0)?;
            tape.acosh(arg)?
        }
        SpaceKind::StereoSphere => {
            let arg = tape.scale(z, -2.0)?;
            let arg = tape.add_scalar(arg, 1.0)?;
            tape.acos(arg)?
        }
        _ => {
            let arg = tape.neg(z)?;
            let arg = tape.add_scalar(arg, 1.0)?;
            tape.acos(arg)?
        }
    };
    tape.div(angle, sk)
}

/// Distance between two `[1, ambient]` rows using the textbook formulas.
pub fn pair_distance(tape: &mut Tape, kind: SpaceKind, x: NodeId, y: NodeId, k: NodeId) -> Result<NodeId> {
    let kv = curvature_value(tape, k)?;
    kind.check_curvature(kv)?;
    let cols = tape.value(x).cols();
    let diff = tape.sub(x, y)?;
    let d2 = tape.mul(diff, diff)?;
    let sq = tape.sum(d2)?;
    let flat = matches!(kind, SpaceKind::PoincareBall | SpaceKind::StereoSphere) && kv.abs() < FLAT_CURVATURE;
    if kind == SpaceKind::Euclidean || flat {
        let d = tape.sqrt(sq)?;
        return if flat { tape.scale(d, 2.0) } else { Ok(d) };
    }
    let sk = sqrt_abs_curvature(tape, kind, k)?;
    let angle = match kind {
        SpaceKind::PoincareBall | SpaceKind::StereoSphere => {
            let norm1 = |tape: &mut Tape, p: NodeId| -> Result<NodeId> {
                let pp = tape.mul(p, p)?;
                let n = tape.sum(pp)?;
                let kn = tape.mul(n, k)?;
                tape.add_scalar(kn, 1.0)
            };
            let a = norm1(tape, x)?;
            let b = norm1(tape, y)?;
            let denom = tape.mul(a, b)?;
            let num = tape.mul(sq, k)?;
            let num = tape.scale(num, 2.0)?;
            let frac = tape.div(num, denom)?;
            let one = tape.scalar(1.0);
            let arg = tape.sub(one, frac)?;
            if kind == SpaceKind::PoincareBall {
                tape.acosh(arg)?
            } else {
                tape.acos(arg)?
            }
        }
        SpaceKind::Hyperboloid | SpaceKind::Hypersphere => {
            let mut signs = alloc::vec![1.0; cols];
            if kind == SpaceKind::Hyperboloid {
                signs[0] = -1.0;
            }
            let j = tape.leaf(Tensor::row(signs));
            let xy = tape.mul(x, y)?;
            let xy = tape.mul(xy, j)?;
            let inner = tape.sum(xy)?;
            let arg = tape.mul(inner, k)?;
            if kind == SpaceKind::Hyperboloid {
                tape.acosh(arg)?
            } else {
                tape.acos(arg)?
            }
        }
        SpaceKind::Euclidean => unreachable!(),
    };
    tape.div(angle, sk)
}

/// Maps `[n, tangent_dim]` features onto the product manifold and returns the
/// `[n, n]` product distance matrix `sqrt(sum_i D_i^2)`.
///
/// `curvatures` holds one scalar node per component (Euclidean ones included,
/// holding 0).
pub fn product_pairwise_distance(
    tape: &mut Tape,
    sig: &ManifoldSignature,
    tangent: NodeId,
    curvatures: &[NodeId],
) -> Result<NodeId> {
    if curvatures.len() != sig.len() {
        return Err(Error::Dimension {
            expected: sig.len(),
            got: curvatures.len(),
        });
    }
    let width = tape.value(tangent).cols();
    if width != sig.tangent_dim() {
        return Err(Error::Dimension {
            expected: sig.tangent_dim(),
            got: width,
        });
    }
    let dims: Vec<usize> = sig.components().iter().map(|c| c.dim).collect();
    let blocks = tape.split_cols(tangent, &dims)?;
    let mut parts = Vec::with_capacity(sig.len());
    for (i, (c, (&block, &k))) in sig.components().iter().zip(blocks.iter().zip(curvatures)).enumerate() {
        let run = |tape: &mut Tape| -> Result<NodeId> {
            let pts = exp_map_rows(tape, c.kind, block, k)?;
            pairwise_distance(tape, c.kind, pts, k)
        };
        parts.push(run(tape).map_err(|e| e.in_component(i))?);
    }
    if let [single] = parts[..] {
        return Ok(single);
    }
    let mut acc = tape.mul(parts[0], parts[0])?;
    for &d in &parts[1..] {
        let d2 = tape.mul(d, d)?;
        acc = tape.add(acc, d2)?;
    }
    tape.sqrt(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::manifolds;
    use crate::product::{parse_signature, product_dist, product_exp};
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tangent(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-scale..scale)).collect())
            .collect()
    }

    #[test]
    fn exp_rows_match_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in SpaceKind::ALL {
            for &mag in &[0.25, 1.0, 4.0] {
                let kv = kind.default_curvature() * mag;
                let rows = random_tangent(&mut rng, 6, 3, 1.5);
                let mut tape = Tape::new();
                let v = tape.leaf(Tensor::from_rows(&rows).unwrap());
                let k = tape.scalar(kv);
                let out = exp_map_rows(&mut tape, kind, v, k).unwrap();
                for (i, r) in rows.iter().enumerate() {
                    let want = manifolds::exp_map(kind, r, kv).unwrap();
                    let got = tape.value(out).row_slice(i);
                    for (a, b) in got.iter().zip(&want.coords) {
                        assert!((a - b).abs() < 1e-12, "{kind} {a} {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn pairwise_matches_reference_and_pair_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kind in SpaceKind::ALL {
            let kv = kind.default_curvature() * 0.7;
            let rows = random_tangent(&mut rng, 5, 2, 1.0);
            let pts: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| manifolds::exp_map(kind, r, kv).unwrap().coords)
                .collect();
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_rows(&pts).unwrap());
            let k = tape.scalar(kv);
            let d = pairwise_distance(&mut tape, kind, x, k).unwrap();
            for i in 0..5 {
                assert_eq!(tape.value(d).get(i, i), 0.0);
                for j in 0..5 {
                    let want = manifolds::distance(kind, &pts[i], &pts[j], kv).unwrap();
                    let got = tape.value(d).get(i, j);
                    assert!((got - want).abs() < 1e-10, "{kind} ({i},{j}) {got} {want}");
                    if i != j {
                        let xi = tape.leaf(Tensor::row(pts[i].clone()));
                        let xj = tape.leaf(Tensor::row(pts[j].clone()));
                        let p = pair_distance(&mut tape, kind, xi, xj, k).unwrap();
                        let pv = tape.value(p).item().unwrap();
                        assert!((pv - want).abs() < 1e-8, "{kind} pair {pv} {want}");
                    }
                }
            }
        }
    }

    #[test]
    fn flat_limit_branch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.1]]).unwrap());
        let k = tape.scalar(-1e-9);
        let d = pairwise_distance(&mut tape, SpaceKind::PoincareBall, x, k).unwrap();
        assert!((tape.value(d).get(0, 1) - 2.0 * 0.05f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn product_matrix_matches_product_dist() {
        let sig = parse_signature("EHSPD", 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows = random_tangent(&mut rng, 4, sig.tangent_dim(), 1.0);
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::from_rows(&rows).unwrap());
        let ks: Vec<NodeId> = sig.curvatures().iter().map(|&c| tape.scalar(c)).collect();
        let d = product_pairwise_distance(&mut tape, &sig, v, &ks).unwrap();
        let pts: Vec<_> = rows.iter().map(|r| product_exp(&sig, r).unwrap()).collect();
        for i in 0..4 {
            for j in 0..4 {
                let want = product_dist(&sig, &pts[i], &pts[j]).unwrap();
                assert!((tape.value(d).get(i, j) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn distance_gradients_match_finite_differences() {
        // Parameters: x (ambient), y (ambient), K.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for kind in [SpaceKind::PoincareBall, SpaceKind::StereoSphere] {
            for _ in 0..10 {
                let kv = kind.default_curvature() * rng.random_range(0.3..2.0);
                let x = manifolds::exp_map(kind, &random_tangent(&mut rng, 1, 2, 1.0)[0], kv)
                    .unwrap()
                    .coords;
                let y = manifolds::exp_map(kind, &random_tangent(&mut rng, 1, 2, 1.0)[0], kv)
                    .unwrap()
                    .coords;
                let params: Vec<f64> = x.iter().chain(&y).copied().chain([kv]).collect();
                let f = |t: &mut Tape, p: NodeId| {
                    let a = t.slice_cols(p, 0, 2)?;
                    let b = t.slice_cols(p, 2, 4)?;
                    let k = t.slice_cols(p, 4, 5)?;
                    pair_distance(t, kind, a, b, k)
                };
                let err = finite_diff_check(f, &params, 1e-6).unwrap();
                assert!(err < 1e-5, "{kind}: {err}");
            }
        }
    }
}
