use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crystalmt::graph::{build_graph, CrystalGraph, CrystalStructure, GraphConfig};
use crystalmt::model::{predict_batch, ConvVariant, ModelConfig, ModelParams};
use crystalmt::numerics::softplus;

fn config() -> GraphConfig {
    GraphConfig {
        cutoff: 4.5,
        max_neighbors: 6,
        gauss_step: 0.5,
        gauss_width: None,
        z_max: 10,
    }
}

fn graph(seed: u64, atoms: usize) -> CrystalGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rng.gen_range(3.0..4.5);
    let s = CrystalStructure {
        id: "p".into(),
        lattice: [[a, 0.0, 0.0], [0.3, a, 0.0], [0.0, -0.2, a]],
        frac_coords: (0..atoms).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect(),
        atomic_numbers: (0..atoms).map(|_| rng.gen_range(1..=10)).collect(),
    };
    build_graph(&s, &config(), None).unwrap()
}

fn model(variant: ConvVariant, seed: u64) -> ModelConfig {
    ModelConfig {
        conv_variant: variant,
        n_conv: 2,
        atom_len: 5,
        hidden_len: 6,
        n_hidden_per_task: 1,
        n_tasks: 2,
        seed,
    }
}

fn variant(gated: bool) -> ConvVariant {
    if gated {
        ConvVariant::Gated
    } else {
        ConvVariant::Simple
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn relabeling_atoms_leaves_predictions_unchanged(seed in 0u64..10_000, atoms in 1usize..7, gated: bool) {
        let g = graph(seed, atoms);
        let cfg = model(variant(gated), seed);
        let params = ModelParams::init(&cfg, 10, config().bond_len()).unwrap();
        let mut perm: Vec<usize> = (0..atoms).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 7));
        let a = predict_batch(&[&g], &params, &cfg).unwrap().remove(0);
        let b = predict_batch(&[&g.permuted(&perm)], &params, &cfg).unwrap().remove(0);
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "{} vs {}", x, y);
        }
    }

    #[test]
    fn batching_does_not_mix_graphs(seed in 0u64..10_000, gated: bool) {
        let gs = [graph(seed, 2), graph(seed + 1, 3), graph(seed + 2, 1)];
        let cfg = model(variant(gated), seed);
        let params = ModelParams::init(&cfg, 10, config().bond_len()).unwrap();
        let together = predict_batch(&[&gs[0], &gs[1], &gs[2]], &params, &cfg).unwrap();
        for (g, joint) in gs.iter().zip(&together) {
            let alone = predict_batch(&[g], &params, &cfg).unwrap().remove(0);
            for (x, y) in alone.values.iter().zip(&joint.values) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }
}

/// Independent loop over edges for one gated layer followed by pooling and
/// a linear head, with all dense weights set to constants.
#[test]
fn constant_weight_network_matches_hand_loop() {
    let g = graph(3, 3);
    let cfg = ModelConfig {
        conv_variant: ConvVariant::Gated,
        n_conv: 1,
        atom_len: 2,
        hidden_len: 2,
        n_hidden_per_task: 0,
        n_tasks: 1,
        seed: 0,
    };
    let mut params = ModelParams::zeros(&cfg, 10, config().bond_len()).unwrap();
    let c = 0.01;
    for t in params.tensors_mut() {
        for x in t.data_mut() {
            *x = c;
        }
    }
    // Embedding: every atom row has a single one, so each entry is c + c.
    let v0 = 2.0 * c;
    let mut state = vec![v0; g.n_atoms()];
    for e in &g.edges {
        let bond_sum: f64 = e.bond_feature.iter().sum();
        let z = c * (v0 * (2 * cfg.atom_len) as f64 + bond_sum) + c;
        let gate = 1.0 / (1.0 + (-z).exp());
        state[e.center] += gate * softplus(z);
    }
    let pooled = state.iter().sum::<f64>() / g.n_atoms() as f64;
    let want = c * pooled * cfg.atom_len as f64 + c;
    let got = predict_batch(&[&g], &params, &cfg).unwrap().remove(0).values[0];
    assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
}
