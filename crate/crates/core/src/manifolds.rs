//! The five constant-curvature model spaces.
//!
//! Points of the hyperboloid `H` and hypersphere `S` live in an ambient space
//! one dimension larger than the manifold; the Euclidean plane `E`, the
//! Poincaré ball `P` and the projected sphere `D` use their own coordinates.
//!
//! Every exponential map here is anchored at the canonical base point: the
//! origin for `E`, `P` and `D`, and `(1/sqrt|K|, 0, ..., 0)` for `H` and `S`.
//!
//! The distance formulas are evaluated through the half-angle identities
//! `arccosh(1 + z) = 2 asinh(sqrt(z / 2))` and `arccos(1 - z) = 2 asin(sqrt(z / 2))`.
//! Both are exact rewrites; they avoid the cancellation in `1 + z` when the
//! two points are close, and `z` is clamped to the valid branch first.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;
use core::fmt;

#[allow(unused_imports)]
use num_traits::Float;

use crate::{Error, Result};

/// Below this `|K|` the curved formulas switch to their flat limit.
pub const FLAT_CURVATURE: f64 = 1e-8;

/// Largest `sqrt(K) * |v|` fed to `tan` in the projected-sphere exponential map.
pub const STEREO_SPHERE_MAX_ANGLE: f64 = FRAC_PI_2 - 1e-3;

/// Membership tolerance applied by the distance functions.
pub const DOMAIN_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SpaceKind {
    /// `E`, flat, `K = 0`.
    Euclidean,
    /// `H`, the upper sheet of `<x, x>_L = 1/K`, `K < 0`.
    Hyperboloid,
    /// `S`, the sphere `<x, x> = 1/K`, `K > 0`.
    Hypersphere,
    /// `P`, the open ball of radius `1/sqrt(-K)`, `K < 0`.
    PoincareBall,
    /// `D`, the stereographic projection of `S` onto its tangent plane, `K > 0`.
    StereoSphere,
}

impl SpaceKind {
    pub const ALL: [SpaceKind; 5] = [
        SpaceKind::Euclidean,
        SpaceKind::Hyperboloid,
        SpaceKind::Hypersphere,
        SpaceKind::PoincareBall,
        SpaceKind::StereoSphere,
    ];

    pub fn from_letter(c: char) -> Option<SpaceKind> {
        match c {
            'E' => Some(SpaceKind::Euclidean),
            'H' => Some(SpaceKind::Hyperboloid),
            'S' => Some(SpaceKind::Hypersphere),
            'P' => Some(SpaceKind::PoincareBall),
            'D' => Some(SpaceKind::StereoSphere),
            _ => None,
        }
    }

    pub fn letter(self) -> char {
        match self {
            SpaceKind::Euclidean => 'E',
            SpaceKind::Hyperboloid => 'H',
            SpaceKind::Hypersphere => 'S',
            SpaceKind::PoincareBall => 'P',
            SpaceKind::StereoSphere => 'D',
        }
    }

    /// Sign the curvature must have: -1, 0 or +1.
    pub fn curvature_sign(self) -> i8 {
        match self {
            SpaceKind::Euclidean => 0,
            SpaceKind::Hyperboloid | SpaceKind::PoincareBall => -1,
            SpaceKind::Hypersphere | SpaceKind::StereoSphere => 1,
        }
    }

    /// `H` and `S` are embedded one dimension up.
    pub fn ambient_dim(self, dim: usize) -> usize {
        match self {
            SpaceKind::Hyperboloid | SpaceKind::Hypersphere => dim + 1,
            _ => dim,
        }
    }

    /// Unit-magnitude starting curvature (0 for `E`).
    pub fn default_curvature(self) -> f64 {
        f64::from(self.curvature_sign())
    }

    pub fn accepts_curvature(self, k: f64) -> bool {
        match self.curvature_sign() {
            0 => k == 0.0,
            -1 => k < 0.0,
            _ => k > 0.0,
        }
    }

    pub fn check_curvature(self, k: f64) -> Result<()> {
        if self.accepts_curvature(k) {
            Ok(())
        } else {
            Err(Error::CurvatureSign {
                kind: self,
                curvature: k,
            })
        }
    }
}

impl fmt::Display for SpaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            SpaceKind::Euclidean => "Euclidean",
            SpaceKind::Hyperboloid => "hyperboloid",
            SpaceKind::Hypersphere => "hypersphere",
            SpaceKind::PoincareBall => "Poincaré ball",
            SpaceKind::StereoSphere => "projected sphere",
        };
        write!(f, "{} ({})", self.letter(), name)
    }
}

/// One factor of a product manifold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentSpec {
    pub kind: SpaceKind,
    /// Tangent (intrinsic) dimension.
    pub dim: usize,
    pub curvature: f64,
}

impl ComponentSpec {
    pub fn new(kind: SpaceKind, dim: usize, curvature: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Signature(format!(
                "component {} must have a positive dimension",
                kind.letter()
            )));
        }
        kind.check_curvature(curvature)?;
        Ok(ComponentSpec { kind, dim, curvature })
    }

    pub fn with_default_curvature(kind: SpaceKind, dim: usize) -> Result<Self> {
        Self::new(kind, dim, kind.default_curvature())
    }

    pub fn ambient_dim(&self) -> usize {
        self.kind.ambient_dim(self.dim)
    }

    pub fn distance(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        distance(self.kind, x, y, self.curvature)
    }

    pub fn exp_map(&self, v: &[f64]) -> Result<ManifoldPoint> {
        if v.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: v.len(),
            });
        }
        exp_map(self.kind, v, self.curvature)
    }
}

/// Ambient coordinates of a point on a single model space.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldPoint {
    pub coords: Vec<f64>,
}

impl ManifoldPoint {
    pub fn new(coords: Vec<f64>) -> Self {
        ManifoldPoint { coords }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coords
    }
}

impl From<Vec<f64>> for ManifoldPoint {
    fn from(coords: Vec<f64>) -> Self {
        ManifoldPoint { coords }
    }
}

fn same_len(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            got: y.len(),
        });
    }
    Ok(())
}

fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum()
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `-x0*y0 + sum_{i>=1} xi*yi`.
pub fn lorentz_inner(x: &[f64], y: &[f64]) -> Result<f64> {
    same_len(x, y)?;
    if x.len() < 2 {
        return Err(Error::Dimension {
            expected: 2,
            got: x.len(),
        });
    }
    Ok(-x[0] * y[0] + x[1..].iter().zip(&y[1..]).map(|(a, b)| a * b).sum::<f64>())
}

/// `arccosh(1 + z)` for `z >= 0` (negative `z` is clamped to 0).
fn acosh_1p(z: f64) -> f64 {
    2.0 * (z.max(0.0) * 0.5).sqrt().asinh()
}

/// `arccos(1 - z)` for `z` in `[0, 2]` (clamped).
fn acos_1m(z: f64) -> f64 {
    2.0 * (z.clamp(0.0, 2.0) * 0.5).sqrt().asin()
}

pub fn dist_euclidean(x: &[f64], y: &[f64]) -> Result<f64> {
    same_len(x, y)?;
    Ok(sq_dist(x, y).sqrt())
}

/// Geodesic distance in the Poincaré ball of curvature `k < 0`.
pub fn dist_poincare(x: &[f64], y: &[f64], k: f64) -> Result<f64> {
    SpaceKind::PoincareBall.check_curvature(k)?;
    same_len(x, y)?;
    let nx = sq_norm(x);
    let ny = sq_norm(y);
    let (cx, cy) = (1.0 + k * nx, 1.0 + k * ny);
    for (p, c) in [(nx, cx), (ny, cy)] {
        if !(c > 0.0) {
            return Err(Error::Domain {
                kind: SpaceKind::PoincareBall,
                detail: format!("squared norm {p} is not below -1/K = {}", -1.0 / k),
            });
        }
    }
    let dxy = sq_dist(x, y);
    if -k < FLAT_CURVATURE {
        return Ok(2.0 * dxy.sqrt());
    }
    let z = -2.0 * k * dxy / (cx * cy);
    Ok(acosh_1p(z) / (-k).sqrt())
}

/// Geodesic distance in the stereographically projected sphere of curvature `k > 0`.
pub fn dist_stereo_sphere(x: &[f64], y: &[f64], k: f64) -> Result<f64> {
    SpaceKind::StereoSphere.check_curvature(k)?;
    same_len(x, y)?;
    let dxy = sq_dist(x, y);
    if k < FLAT_CURVATURE {
        return Ok(2.0 * dxy.sqrt());
    }
    let z = 2.0 * k * dxy / ((1.0 + k * sq_norm(x)) * (1.0 + k * sq_norm(y)));
    Ok(acos_1m(z) / k.sqrt())
}

/// Geodesic distance on the hyperboloid `<x, x>_L = 1/k`.
///
/// Uses `K<x, y>_L = 1 - K<x - y, x - y>_L / 2`, which holds on the manifold.
pub fn dist_hyperboloid(x: &[f64], y: &[f64], k: f64) -> Result<f64> {
    SpaceKind::Hyperboloid.check_curvature(k)?;
    same_len(x, y)?;
    require_member(x, SpaceKind::Hyperboloid, k)?;
    require_member(y, SpaceKind::Hyperboloid, k)?;
    let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let z = -0.5 * k * lorentz_inner(&diff, &diff)?;
    Ok(acosh_1p(z) / (-k).sqrt())
}

/// Geodesic distance on the sphere `<x, x> = 1/k`.
pub fn dist_hypersphere(x: &[f64], y: &[f64], k: f64) -> Result<f64> {
    SpaceKind::Hypersphere.check_curvature(k)?;
    same_len(x, y)?;
    require_member(x, SpaceKind::Hypersphere, k)?;
    require_member(y, SpaceKind::Hypersphere, k)?;
    let z = 0.5 * k * sq_dist(x, y);
    Ok(acos_1m(z) / k.sqrt())
}

/// Dispatch on the space kind.
pub fn distance(kind: SpaceKind, x: &[f64], y: &[f64], k: f64) -> Result<f64> {
    match kind {
        SpaceKind::Euclidean => {
            kind.check_curvature(k)?;
            dist_euclidean(x, y)
        }
        SpaceKind::Hyperboloid => dist_hyperboloid(x, y, k),
        SpaceKind::Hypersphere => dist_hypersphere(x, y, k),
        SpaceKind::PoincareBall => dist_poincare(x, y, k),
        SpaceKind::StereoSphere => dist_stereo_sphere(x, y, k),
    }
}

fn require_member(p: &[f64], kind: SpaceKind, k: f64) -> Result<()> {
    if check_membership(p, kind, k, DOMAIN_TOL) {
        Ok(())
    } else {
        Err(Error::Domain {
            kind,
            detail: format!("{p:?} violates the membership constraint for K = {k}"),
        })
    }
}

/// `f(s) / s` with the removable singularity at 0 filled in from the series.
fn ratio_at(s: f64, f: impl Fn(f64) -> f64, second_order: f64) -> f64 {
    if s.abs() < 1e-6 {
        1.0 + second_order * s * s
    } else {
        f(s) / s
    }
}

/// The canonical base point of a component: origin, or the pole for `H`/`S`.
pub fn base_point(kind: SpaceKind, dim: usize, k: f64) -> Vec<f64> {
    let mut p = alloc::vec![0.0; kind.ambient_dim(dim)];
    if matches!(kind, SpaceKind::Hyperboloid | SpaceKind::Hypersphere) {
        p[0] = 1.0 / k.abs().sqrt();
    }
    p
}

/// Exponential map at the canonical base point.
pub fn exp_map(kind: SpaceKind, v: &[f64], k: f64) -> Result<ManifoldPoint> {
    kind.check_curvature(k)?;
    if v.iter().any(|a| !a.is_finite()) {
        return Err(Error::Domain {
            kind,
            detail: format!("tangent vector {v:?} is not finite"),
        });
    }
    let r = sq_norm(v).sqrt();
    let sk = k.abs().sqrt();
    let s = sk * r;
    let coords = match kind {
        SpaceKind::Euclidean => v.to_vec(),
        SpaceKind::PoincareBall => {
            let f = ratio_at(s, |t| t.tanh(), -1.0 / 3.0);
            v.iter().map(|a| f * a).collect()
        }
        SpaceKind::StereoSphere => {
            let f = if s > STEREO_SPHERE_MAX_ANGLE {
                STEREO_SPHERE_MAX_ANGLE.tan() / s
            } else {
                ratio_at(s, |t| t.tan(), 1.0 / 3.0)
            };
            v.iter().map(|a| f * a).collect()
        }
        SpaceKind::Hyperboloid | SpaceKind::Hypersphere => {
            let (head, f) = if kind == SpaceKind::Hyperboloid {
                (s.cosh(), ratio_at(s, |t| t.sinh(), 1.0 / 6.0))
            } else {
                (s.cos(), ratio_at(s, |t| t.sin(), -1.0 / 6.0))
            };
            let mut out = Vec::with_capacity(v.len() + 1);
            out.push(head / sk);
            out.extend(v.iter().map(|a| f * a));
            out
        }
    };
    Ok(ManifoldPoint::new(coords))
}

/// Whether `p` lies on the model space `kind` with curvature `k`.
///
/// For `H` the quadric residual `|K<x,x>_L - 1|` is compared against
/// `tol * (1 + |K| |x|^2)` so that points far up the hyperboloid are judged
/// relative to the size of the terms that cancel. `S` compares `|K|x|^2 - 1|`
/// against `tol`. `P` is a strict interior test and ignores `tol`.
pub fn check_membership(p: &[f64], kind: SpaceKind, k: f64, tol: f64) -> bool {
    if !kind.accepts_curvature(k) || p.iter().any(|a| !a.is_finite()) {
        return false;
    }
    match kind {
        SpaceKind::Euclidean | SpaceKind::StereoSphere => true,
        SpaceKind::PoincareBall => 1.0 + k * sq_norm(p) > 0.0,
        SpaceKind::Hyperboloid => {
            if p.len() < 2 || !(p[0] > 0.0) {
                return false;
            }
            let q = -p[0] * p[0] + sq_norm(&p[1..]);
            (k * q - 1.0).abs() <= tol * (1.0 + k.abs() * sq_norm(p))
        }
        SpaceKind::Hypersphere => !p.is_empty() && (k * sq_norm(p) - 1.0).abs() <= tol,
    }
}
