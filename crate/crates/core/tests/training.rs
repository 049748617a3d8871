use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stereograph_core::autodiff::{finite_diff_check, Tape, Tensor};
use stereograph_core::data::{generate_sbm, homophily, make_splits, Adjacency, Dataset, Role, SbmConfig};
use stereograph_core::dgm::SamplerMode;
use stereograph_core::gnn::{forward, InitOptions, ModelParams, ModelSpec};
use stereograph_core::trainer::{total_loss, train, TrainConfig};

const TOY_N: usize = 12;

struct Toy {
    params: ModelParams,
    x: Tensor,
    adj: Adjacency,
    labels: Vec<usize>,
    train: Vec<usize>,
    correct: Vec<bool>,
    baseline: Vec<f64>,
}

fn toy(model: &str, seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ModelSpec::parse(model, 3).unwrap();
    let init = InitOptions {
        hidden: 5,
        ..InitOptions::default()
    };
    let mut params = ModelParams::init(&spec, 4, 3, &init, &mut rng).unwrap();
    // Off the zero-bias initialisation, where dead ReLU rows sit exactly on a kink.
    let jittered: Vec<f64> = params
        .flatten()
        .iter()
        .map(|p| p + rng.random_range(-0.1..0.1))
        .collect();
    params.set_flat(&jittered).unwrap();
    let rows: Vec<Vec<f64>> = (0..TOY_N)
        .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let ring: Vec<(usize, usize)> = (0..TOY_N)
        .map(|i| (i, (i + 1) % TOY_N))
        .chain([(0, 6), (3, 9)])
        .collect();
    Toy {
        params,
        x: Tensor::from_rows(&rows).unwrap(),
        adj: Adjacency::symmetric(TOY_N, &ring).unwrap(),
        labels: (0..TOY_N).map(|i| i % 3).collect(),
        train: (0..8).collect(),
        correct: (0..TOY_N).map(|i| i % 4 != 1).collect(),
        baseline: (0..TOY_N).map(|i| 0.2 + 0.05 * i as f64).collect(),
    }
}

impl Toy {
    /// Loss with the sampler replaced by deterministic top-k.
    fn loss(
        &self,
        tape: &mut Tape,
        nodes: &[stereograph_core::autodiff::NodeId],
    ) -> stereograph_core::Result<stereograph_core::autodiff::NodeId> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = forward(
            tape,
            &self.params,
            nodes,
            &self.x,
            Some(&self.adj),
            SamplerMode::Greedy,
            &mut rng,
        )?;
        let samples: Vec<_> = out.samples.iter().collect();
        total_loss(
            tape,
            out.log_probs,
            &self.labels,
            &self.train,
            &samples,
            &self.correct,
            &self.baseline,
            1.0,
        )
    }
}

const MODELS: [&str; 8] = [
    "GCN",
    "GAT",
    "MLP",
    "GCN-dDGM*-E",
    "GCN-dDGM-P",
    "GAT-dDGM*-D",
    "GCN-dDGM*-EHSPD",
    "MLP-dDGM-HS",
];

#[test]
fn full_loss_gradient_matches_finite_differences() {
    for (i, model) in MODELS.iter().enumerate() {
        let t = toy(model, 100 + i as u64);
        let f = |tape: &mut Tape, flat| {
            let nodes = t.params.leaves_from_flat(tape, flat)?;
            t.loss(tape, &nodes)
        };
        let err = finite_diff_check(f, &t.params.flatten(), 1e-5).unwrap();
        assert!(err <= 1e-4, "{model}: {err}");
    }
}

#[test]
fn gradients_reach_every_parameter_group() {
    let t = toy("GAT-dDGM-EPD", 7);
    let mut tape = Tape::new();
    let nodes = t.params.leaves(&mut tape);
    let loss = t.loss(&mut tape, &nodes).unwrap();
    let grads = tape.backward(loss).unwrap();
    let shapes = t.params.shapes();
    assert_eq!(shapes.len(), nodes.len());
    for (id, shape) in nodes.iter().zip(&shapes) {
        let g = grads.get(*id);
        // GAT source-side attention cancels in the softmax; every other group must move.
        let moving = g.data().iter().any(|v| *v != 0.0);
        assert!(
            moving || shape == &vec![1, 10],
            "parameter of shape {shape:?} has no gradient"
        );
    }
    // Temperature and both curvature parameters are scalars.
    let scalars: Vec<_> = nodes
        .iter()
        .zip(&shapes)
        .filter(|(_, s)| s.iter().product::<usize>() == 1)
        .collect();
    assert_eq!(scalars.len(), 3);
    for (id, _) in scalars {
        assert!(grads.get(*id).data()[0] != 0.0);
    }
}

#[test]
fn sbm_edge_counts_match_binomial_expectation() {
    let cfg = SbmConfig::homophilic(0);
    let per_class = cfg.n / cfg.n_classes;
    let pairs_in = (cfg.n_classes * per_class * (per_class - 1) / 2) as f64;
    let pairs_out = (cfg.n * (cfg.n - 1) / 2) as f64 - pairs_in;
    for seed in 0..20 {
        let data = generate_sbm(&SbmConfig { seed, ..cfg }).unwrap();
        let labels = data.labels();
        let edges = data.edges().unwrap();
        let intra = edges.iter().filter(|(i, j)| labels[*i] == labels[*j]).count() as f64;
        let inter = edges.len() as f64 - intra;
        for (count, pairs, p) in [(intra, pairs_in, cfg.p_in), (inter, pairs_out, cfg.p_out)] {
            let sigma = (pairs * p * (1.0 - p)).sqrt();
            assert!(
                (count - pairs * p).abs() <= 3.0 * sigma,
                "seed {seed}: {count} vs {}",
                pairs * p
            );
        }
    }
}

#[test]
fn sbm_homophily_ratio_follows_probabilities() {
    for (cfg, lo, hi) in [
        (SbmConfig::homophilic(1), 0.75, 0.95),
        (SbmConfig::heterophilic(1), 0.0, 0.1),
    ] {
        let h = homophily(&generate_sbm(&cfg).unwrap()).unwrap();
        let expected = {
            let within = 3.0 * 100.0 * 99.0 / 2.0 * cfg.p_in;
            let across = 3.0 * 100.0 * 100.0 * cfg.p_out;
            within / (within + across)
        };
        assert!(h > lo && h < hi && (h - expected).abs() < 0.05, "{h} vs {expected}");
    }
}

#[test]
fn splits_vary_with_seed_but_keep_sizes() {
    let labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
    let a = make_splits(300, [0.6, 0.2, 0.2], &labels, 1).unwrap();
    let b = make_splits(300, [0.6, 0.2, 0.2], &labels, 2).unwrap();
    assert_ne!(a, b);
    for role in [Role::Train, Role::Val, Role::Test] {
        assert_eq!(a.count(role), b.count(role));
    }
    assert_eq!(
        (a.count(Role::Train), a.count(Role::Val), a.count(Role::Test)),
        (180, 60, 60)
    );
    assert_eq!(a, make_splits(300, [0.6, 0.2, 0.2], &labels, 1).unwrap());
}

#[test]
fn selected_epoch_is_no_worse_than_the_start() {
    let data = generate_sbm(&SbmConfig {
        n: 90,
        ..SbmConfig::homophilic(4)
    })
    .unwrap();
    for model in ["GCN-dDGM*-P", "GCN-dDGM-SD", "GAT"] {
        let cfg = TrainConfig {
            epochs: 25,
            ..TrainConfig::new(ModelSpec::parse(model, 3).unwrap())
        };
        let (_, m) = train(&cfg, &data).unwrap();
        assert!(m.val_acc[m.best_epoch] >= m.val_acc[0], "{model}");
        assert!(m.temperatures.iter().all(|t| *t > 0.0));
    }
}

#[test]
fn first_update_lowers_the_classification_loss() {
    let features: Vec<Vec<f64>> = (0..40)
        .map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }, (i % 5) as f64 * 0.1])
        .collect();
    let data = Dataset::new("separable", 2, features, (0..40).map(|i| i % 2).collect(), None).unwrap();
    for model in ["MLP", "MLP-dDGM*-E", "GCN-dDGM*-P"] {
        let cfg = TrainConfig {
            epochs: 1,
            graph_loss_weight: 0.0,
            splits: [1.0, 0.0, 0.0],
            ..TrainConfig::new(ModelSpec::parse(model, 2).unwrap())
        };
        let (_, m) = train(&cfg, &data).unwrap();
        assert!(m.train_loss[1] < m.train_loss[0], "{model}: {:?}", m.train_loss);
    }
}
