//! Node-classification datasets, synthetic block-model graphs and splits.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // Float math is inherent on std targets only.
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::{Error, Result};

/// A graph over `n` nodes stored as sorted, de-duplicated neighbour lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    n: usize,
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    /// Directed graph from per-node target lists.
    pub fn from_rows(n: usize, rows: Vec<Vec<usize>>) -> Result<Self> {
        if rows.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: rows.len(),
            });
        }
        let mut neighbors = rows;
        for (i, row) in neighbors.iter_mut().enumerate() {
            if let Some(&j) = row.iter().find(|&&j| j >= n) {
                return Err(Error::Data(format!("edge ({i}, {j}) points outside {n} nodes")));
            }
            row.sort_unstable();
            row.dedup();
        }
        Ok(Adjacency { n, neighbors })
    }

    /// Undirected graph: every edge is inserted in both directions.
    pub fn symmetric(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut rows = vec![Vec::new(); n];
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::Data(format!("edge ({i}, {j}) points outside {n} nodes")));
            }
            rows[i].push(j);
            rows[j].push(i);
        }
        Self::from_rows(n, rows)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// Number of directed entries.
    pub fn nnz(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    pub fn symmetrized(&self) -> Self {
        let mut rows = self.neighbors.clone();
        for (i, row) in self.neighbors.iter().enumerate() {
            for &j in row {
                rows[j].push(i);
            }
        }
        Self::from_rows(self.n, rows).expect("indices already validated")
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.n, self.n]);
        for (i, row) in self.neighbors.iter().enumerate() {
            for &j in row {
                t.set(i, j, 1.0);
            }
        }
        t
    }
}

/// Features, labels and an optional input graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub n_classes: usize,
    features: Tensor,
    labels: Vec<usize>,
    edges: Option<Vec<(usize, usize)>>,
}

impl Dataset {
    /// Validates labels, feature shape and finiteness, and the edge list.
    pub fn new(
        name: impl Into<String>,
        n_classes: usize,
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        edges: Option<Vec<(usize, usize)>>,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::Data("dataset has no nodes".into()));
        }
        if n_classes == 0 {
            return Err(Error::Data("n_classes must be positive".into()));
        }
        if features.len() != n {
            return Err(Error::Data(format!("{} feature rows for {n} labels", features.len())));
        }
        let features =
            Tensor::from_rows(&features).map_err(|_| Error::Data("feature rows have different lengths".into()))?;
        if features.cols() == 0 {
            return Err(Error::Data("nodes need at least one feature".into()));
        }
        if !features.all_finite() {
            return Err(Error::Data("features must be finite".into()));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= n_classes) {
            return Err(Error::Data(format!("label {l} of node {i} is outside 0..{n_classes}")));
        }
        if let Some(edges) = &edges {
            for &(i, j) in edges {
                if i >= n || j >= n {
                    return Err(Error::Data(format!("edge ({i}, {j}) references a missing node")));
                }
                if i == j {
                    return Err(Error::Data(format!("self-loop on node {i}")));
                }
            }
        }
        Ok(Dataset {
            name: name.into(),
            n_classes,
            features,
            labels,
            edges,
        })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn edges(&self) -> Option<&[(usize, usize)]> {
        self.edges.as_deref()
    }

    /// The input graph, symmetrised.
    pub fn input_adjacency(&self) -> Option<Adjacency> {
        self.edges
            .as_ref()
            .map(|e| Adjacency::symmetric(self.n(), e).expect("edges validated on construction"))
    }

    /// Accuracy of guessing uniformly at random.
    pub fn chance_accuracy(&self) -> f64 {
        1.0 / self.n_classes as f64
    }
}

/// Stochastic block model parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SbmConfig {
    pub n: usize,
    pub n_classes: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SbmConfig {
    /// 300 nodes, 3 classes, mostly intra-class edges.
    pub fn homophilic(seed: u64) -> Self {
        SbmConfig {
            n: 300,
            n_classes: 3,
            p_in: 0.1,
            p_out: 0.01,
            feature_dim: 16,
            noise: 0.5,
            seed,
        }
    }

    /// Same size as [`SbmConfig::homophilic`] with the edge probabilities swapped.
    pub fn heterophilic(seed: u64) -> Self {
        SbmConfig {
            p_in: 0.01,
            p_out: 0.1,
            ..Self::homophilic(seed)
        }
    }
}

/// Balanced labels (`i mod C`), undirected edges with probability `p_in`
/// inside a class and `p_out` across, and features equal to the one-hot
/// class centroid plus `noise` times standard normal noise.
pub fn generate_sbm(cfg: &SbmConfig) -> Result<Dataset> {
    for (name, p) in [("p_in", cfg.p_in), ("p_out", cfg.p_out)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("{name} = {p} is not a probability")));
        }
    }
    if cfg.n_classes == 0 || cfg.n < cfg.n_classes {
        return Err(Error::Config(format!(
            "need n >= n_classes >= 1, got n = {}, n_classes = {}",
            cfg.n, cfg.n_classes
        )));
    }
    if cfg.feature_dim == 0 {
        return Err(Error::Config("feature_dim must be positive".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::Config(format!(
            "noise = {} must be finite and non-negative",
            cfg.noise
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels: Vec<usize> = (0..cfg.n).map(|i| i % cfg.n_classes).collect();
    let mut edges = Vec::new();
    for i in 0..cfg.n {
        for j in i + 1..cfg.n {
            let p = if labels[i] == labels[j] { cfg.p_in } else { cfg.p_out };
            if rng.random_bool(p) {
                edges.push((i, j));
            }
        }
    }
    let features = labels
        .iter()
        .map(|&l| {
            (0..cfg.feature_dim)
                .map(|f| {
                    let centroid = if f == l % cfg.feature_dim { 1.0 } else { 0.0 };
                    let z: f64 = rng.sample(StandardNormal);
                    centroid + cfg.noise * z
                })
                .collect()
        })
        .collect();
    Dataset::new("sbm", cfg.n_classes, features, labels, Some(edges))
}

/// Fraction of edges joining nodes of the same class.
pub fn homophily(data: &Dataset) -> Option<f64> {
    let edges = data.edges()?;
    if edges.is_empty() {
        return None;
    }
    let same = edges
        .iter()
        .filter(|&&(i, j)| data.labels()[i] == data.labels()[j])
        .count();
    Some(same as f64 / edges.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Train,
    Val,
    Test,
}

/// Assignment of every node to train, validation or test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMask {
    roles: Vec<Role>,
}

impl SplitMask {
    pub fn from_roles(roles: Vec<Role>) -> Self {
        SplitMask { roles }
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn indices(&self, role: Role) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == role)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, role: Role) -> usize {
        self.roles.iter().filter(|&&r| r == role).count()
    }
}

pub fn check_fractions(fractions: [f64; 3]) -> Result<()> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must lie in [0, 1] and sum to 1"
        )));
    }
    Ok(())
}

/// Stratified random partition into train/val/test.
///
/// Global sizes are `round(f_train n)`, `round(f_val n)` and the remainder.
/// Nodes are shuffled within their class and then ordered by their relative
/// position inside the class, so every prefix of the ordering is close to
/// class-proportional and the first `C` entries cover all classes.
pub fn make_splits(n: usize, fractions: [f64; 3], labels: &[usize], seed: u64) -> Result<SplitMask> {
    check_fractions(fractions)?;
    if labels.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: labels.len(),
        });
    }
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut keyed: Vec<(f64, u64, usize)> = Vec::with_capacity(n);
    for members in &mut by_class {
        members.shuffle(&mut rng);
        let size = members.len() as f64;
        for (rank, &node) in members.iter().enumerate() {
            keyed.push((rank as f64 / size, rng.random(), node));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut roles = vec![Role::Test; n];
    for (pos, &(_, _, node)) in keyed.iter().enumerate() {
        roles[node] = if pos < n_train {
            Role::Train
        } else if pos < n_train + n_val {
            Role::Val
        } else {
            Role::Test
        };
    }
    let present = by_class.iter().filter(|m| !m.is_empty()).count();
    if n_train >= present {
        for (c, members) in by_class.iter().enumerate() {
            if !members.is_empty() && members.iter().all(|&i| roles[i] != Role::Train) {
                return Err(Error::Split(format!("class {c} has no training node")));
            }
        }
    }
    Ok(SplitMask { roles })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_validation() {
        let d = Dataset::new("tiny", 2, vec![vec![0.5], vec![-1.0]], vec![0, 1], None).unwrap();
        assert_eq!((d.n(), d.n_features(), d.edges()), (2, 1, None));
        assert!(Dataset::new("x", 2, vec![vec![0.5], vec![1.0]], vec![0, 2], None).is_err());
        assert!(Dataset::new("x", 2, vec![vec![0.5], vec![1.0]], vec![0, 1], Some(vec![(0, 0)])).is_err());
        assert!(Dataset::new("x", 2, vec![vec![0.5], vec![1.0]], vec![0, 1], Some(vec![(0, 2)])).is_err());
        assert!(Dataset::new("x", 2, vec![vec![f64::NAN], vec![1.0]], vec![0, 1], None).is_err());
        assert!(Dataset::new("x", 2, vec![vec![0.5]], vec![0, 1], None).is_err());
    }

    #[test]
    fn adjacency_is_symmetrised() {
        let a = Adjacency::symmetric(3, &[(0, 1), (1, 2), (1, 0)]).unwrap();
        assert!(a.contains(1, 0) && a.contains(0, 1) && a.contains(2, 1));
        assert_eq!(a.nnz(), 4);
        let d = Adjacency::from_rows(2, vec![vec![1], vec![]]).unwrap();
        assert_eq!(d.symmetrized().nnz(), 2);
        assert!(Adjacency::from_rows(2, vec![vec![2], vec![]]).is_err());
    }

    #[test]
    fn sbm_extremes() {
        let cfg = SbmConfig {
            n: 12,
            n_classes: 3,
            p_in: 1.0,
            p_out: 0.0,
            feature_dim: 4,
            noise: 0.0,
            seed: 1,
        };
        let d = generate_sbm(&cfg).unwrap();
        // Three disjoint 4-cliques.
        assert_eq!(d.edges().unwrap().len(), 3 * 6);
        assert_eq!(homophily(&d), Some(1.0));
        assert_eq!(d.features().row_slice(4), &[0.0, 1.0, 0.0, 0.0]);
        assert!(generate_sbm(&SbmConfig { p_in: 2.0, ..cfg }).is_err());
        assert!(generate_sbm(&SbmConfig { p_out: -0.1, ..cfg }).is_err());
        assert!(generate_sbm(&SbmConfig { n: 2, ..cfg }).is_err());
        assert_eq!(generate_sbm(&cfg).unwrap(), d);
    }

    #[test]
    fn splits_have_exact_sizes() {
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let s = make_splits(10, [0.6, 0.2, 0.2], &labels, 3).unwrap();
        assert_eq!(
            (s.count(Role::Train), s.count(Role::Val), s.count(Role::Test)),
            (6, 2, 2)
        );
        let all = make_splits(10, [1.0, 0.0, 0.0], &labels, 3).unwrap();
        assert_eq!(all.count(Role::Train), 10);
        let other = make_splits(10, [0.6, 0.2, 0.2], &labels, 4).unwrap();
        assert_ne!(s, other);
        assert_eq!(other.count(Role::Train), 6);
        assert_eq!(make_splits(10, [0.6, 0.2, 0.2], &labels, 3).unwrap(), s);
        assert!(make_splits(10, [0.6, 0.2, 0.3], &labels, 3).is_err());
        assert!(make_splits(9, [0.6, 0.2, 0.2], &labels, 3).is_err());
    }

    #[test]
    fn splits_are_stratified() {
        let labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
        for seed in 0..5 {
            let s = make_splits(300, [0.6, 0.2, 0.2], &labels, seed).unwrap();
            for c in 0..3 {
                let train_c = s.indices(Role::Train).iter().filter(|&&i| labels[i] == c).count();
                assert_eq!(train_c, 60);
            }
        }
        // Tiny training set still covers every class.
        let s = make_splits(300, [0.01, 0.0, 0.99], &labels, 9).unwrap();
        let mut seen = [false; 3];
        for i in s.indices(Role::Train) {
            seen[labels[i]] = true;
        }
        assert_eq!(seen, [true; 3]);
    }
}
