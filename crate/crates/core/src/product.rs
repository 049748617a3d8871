//! Product manifolds built from a signature string.
//!
//! A signature lists model spaces in order, each optionally followed by its
//! tangent dimension: `"EHP"` is `E² × H² × P²` with the default dimension 2,
//! `"E4H2"` overrides the first. Tangent vectors are split into per-component
//! blocks in signature order, and the product distance is the root of the sum
//! of squared component distances.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

#[allow(unused_imports)]
use num_traits::Float;

use crate::manifolds::{self, ComponentSpec, ManifoldPoint, SpaceKind};
use crate::{Error, Result};

pub const DEFAULT_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldSignature {
    components: Vec<ComponentSpec>,
}

/// Parse `([EHSPD][0-9]*)+`; curvatures start at their unit defaults.
pub fn parse_signature(text: &str, default_dim: usize) -> Result<ManifoldSignature> {
    if text.is_empty() {
        return Err(Error::Signature("empty signature".into()));
    }
    let mut components = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some((position, c)) = chars.next() {
        let kind = SpaceKind::from_letter(c).ok_or(Error::Parse { position, found: c })?;
        let mut digits = String::new();
        while let Some(&(_, d)) = chars.peek() {
            if !d.is_ascii_digit() {
                break;
            }
            digits.push(d);
            chars.next();
        }
        let dim = if digits.is_empty() {
            default_dim
        } else {
            digits
                .parse()
                .map_err(|_| Error::Signature(alloc::format!("dimension {digits:?} out of range")))?
        };
        components.push(ComponentSpec::with_default_curvature(kind, dim)?);
    }
    Ok(ManifoldSignature { components })
}

impl ManifoldSignature {
    pub fn new(components: Vec<ComponentSpec>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Signature("a signature needs at least one component".into()));
        }
        for (i, c) in components.iter().enumerate() {
            ComponentSpec::new(c.kind, c.dim, c.curvature).map_err(|e| e.in_component(i))?;
        }
        Ok(ManifoldSignature { components })
    }

    pub fn components(&self) -> &[ComponentSpec] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn tangent_dim(&self) -> usize {
        self.components.iter().map(|c| c.dim).sum()
    }

    pub fn ambient_dim(&self) -> usize {
        self.components.iter().map(|c| c.ambient_dim()).sum()
    }

    /// The kind letters only, e.g. `"EHP"`.
    pub fn letters(&self) -> String {
        self.components.iter().map(|c| c.kind.letter()).collect()
    }

    pub fn curvatures(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.curvature).collect()
    }

    /// Replace the curvature of component `index`, checking its sign.
    pub fn set_curvature(&mut self, index: usize, curvature: f64) -> Result<()> {
        let c = self.components.get_mut(index).ok_or(Error::Dimension {
            expected: index + 1,
            got: 0,
        })?;
        c.kind.check_curvature(curvature).map_err(|e| e.in_component(index))?;
        c.curvature = curvature;
        Ok(())
    }

    /// Tangent offsets of each component block.
    pub fn tangent_offsets(&self) -> Vec<usize> {
        offsets(self.components.iter().map(|c| c.dim))
    }

    pub fn ambient_offsets(&self) -> Vec<usize> {
        offsets(self.components.iter().map(|c| c.ambient_dim()))
    }
}

fn offsets(sizes: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut acc = 0;
    sizes
        .map(|s| {
            let o = acc;
            acc += s;
            o
        })
        .collect()
}

impl fmt::Display for ManifoldSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.components {
            write!(f, "{}{}", c.kind.letter(), c.dim)?;
        }
        Ok(())
    }
}

impl core::str::FromStr for ManifoldSignature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_signature(s, DEFAULT_DIM)
    }
}

/// A point on a product manifold, one part per component.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductPoint {
    pub parts: Vec<ManifoldPoint>,
}

impl ProductPoint {
    /// Split concatenated ambient coordinates by the signature's layout.
    pub fn from_ambient(sig: &ManifoldSignature, coords: &[f64]) -> Result<Self> {
        if coords.len() != sig.ambient_dim() {
            return Err(Error::Dimension {
                expected: sig.ambient_dim(),
                got: coords.len(),
            });
        }
        let mut rest = coords;
        let parts = sig
            .components()
            .iter()
            .map(|c| {
                let (head, tail) = rest.split_at(c.ambient_dim());
                rest = tail;
                ManifoldPoint::new(head.to_vec())
            })
            .collect();
        Ok(ProductPoint { parts })
    }

    pub fn to_ambient(&self) -> Vec<f64> {
        self.parts.iter().flat_map(|p| p.coords.iter().copied()).collect()
    }
}

/// Concatenated exponential map: block `i` of `v` goes through component `i`.
pub fn product_exp(sig: &ManifoldSignature, v: &[f64]) -> Result<ProductPoint> {
    if v.len() != sig.tangent_dim() {
        return Err(Error::Dimension {
            expected: sig.tangent_dim(),
            got: v.len(),
        });
    }
    let mut rest = v;
    let parts = sig
        .components()
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let (block, tail) = rest.split_at(c.dim);
            rest = tail;
            c.exp_map(block).map_err(|e| e.in_component(i))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProductPoint { parts })
}

/// Per-component distances between `a` and `b`.
pub fn component_distances(sig: &ManifoldSignature, a: &ProductPoint, b: &ProductPoint) -> Result<Vec<f64>> {
    for p in [a, b] {
        if p.parts.len() != sig.len() {
            return Err(Error::Dimension {
                expected: sig.len(),
                got: p.parts.len(),
            });
        }
    }
    sig.components()
        .iter()
        .zip(a.parts.iter().zip(&b.parts))
        .enumerate()
        .map(|(i, (c, (x, y)))| {
            if x.coords.len() != c.ambient_dim() || y.coords.len() != c.ambient_dim() {
                let got = if x.coords.len() != c.ambient_dim() {
                    x.coords.len()
                } else {
                    y.coords.len()
                };
                return Err(Error::Dimension {
                    expected: c.ambient_dim(),
                    got,
                }
                .in_component(i));
            }
            manifolds::distance(c.kind, &x.coords, &y.coords, c.curvature).map_err(|e| e.in_component(i))
        })
        .collect()
}

/// `sqrt(sum_i d_i(a_i, b_i)^2)`.
///
/// The squares are summed in ascending order, so reordering components
/// leaves the result bit-identical.
pub fn product_dist(sig: &ManifoldSignature, a: &ProductPoint, b: &ProductPoint) -> Result<f64> {
    let parts = component_distances(sig, a, b)?;
    if let [single] = parts[..] {
        return Ok(single);
    }
    let mut squares: Vec<f64> = parts.iter().map(|d| d * d).collect();
    squares.sort_unstable_by(f64::total_cmp);
    Ok(squares.iter().sum::<f64>().sqrt())
}
