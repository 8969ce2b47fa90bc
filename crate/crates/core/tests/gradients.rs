//! Autodiff gradients against central finite differences in 64-bit mode.

use gamlab_core::gam::{gam_block_forward, GamBlockParams, GamVariant};
use gamlab_core::gradcheck::{check, weighted_sum};
use gamlab_core::nn::{linear, LinearParams};
use gamlab_core::transformer::{transformer_block_forward, TransformerBlockParams};
use gamlab_core::{rng_from_seed, Graph, Mode, ParamStore, Result, Tensor, Var};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const TOL: f64 = 1e-4;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 0.0, 1.0, &mut rng_from_seed(seed))
}

fn op_check<F>(name: &str, inputs: impl Fn(u64) -> Vec<Tensor<f64>>, f: F)
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    for seed in SEEDS {
        let store = ParamStore::new();
        let r = check(&store, &inputs(seed), Mode::Train { seed }, 64, |g, v| {
            let y = f(g, v)?;
            weighted_sum(g, y, seed)
        })
        .unwrap();
        assert!(
            r.max_rel_err < TOL,
            "{name} seed {seed}: rel err {} at {}",
            r.max_rel_err,
            r.worst
        );
    }
}

#[test]
fn matmul() {
    op_check(
        "matmul",
        |s| vec![randn(&[4, 5], s), randn(&[5, 3], s + 100)],
        |g, v| g.matmul(v[0], v[1]),
    );
    op_check(
        "matmul batched",
        |s| vec![randn(&[2, 3, 4], s), randn(&[2, 4, 3], s + 100)],
        |g, v| g.matmul(v[0], v[1]),
    );
    op_check(
        "matmul shared rhs",
        |s| vec![randn(&[2, 3, 4], s), randn(&[4, 5], s + 100)],
        |g, v| g.matmul(v[0], v[1]),
    );
}

#[test]
fn matmul_nt() {
    op_check(
        "matmul_nt shared",
        |s| vec![randn(&[2, 3, 4], s), randn(&[6, 4], s + 1)],
        |g, v| g.matmul_nt(v[0], v[1]),
    );
    op_check(
        "matmul_nt batched",
        |s| vec![randn(&[2, 2, 3, 4], s), randn(&[2, 2, 5, 4], s + 1)],
        |g, v| g.matmul_nt(v[0], v[1]),
    );
}

#[test]
fn elementwise() {
    let two = |s| vec![randn(&[3, 4], s), randn(&[3, 4], s + 7)];
    let bcast = |s| vec![randn(&[2, 3, 4], s), randn(&[4], s + 7)];
    op_check("add", two, |g, v| g.add(v[0], v[1]));
    op_check("add broadcast", bcast, |g, v| g.add(v[0], v[1]));
    op_check("sub", two, |g, v| g.sub(v[0], v[1]));
    op_check("mul", two, |g, v| g.mul(v[0], v[1]));
    op_check("mul broadcast", bcast, |g, v| g.mul(v[0], v[1]));
    let one = |s| vec![randn(&[3, 5], s)];
    op_check("scale", one, |g, v| Ok(g.scale(v[0], -1.7)));
    op_check("sigmoid", one, |g, v| Ok(g.sigmoid(v[0])));
    op_check("gelu", one, |g, v| Ok(g.gelu(v[0])));
    op_check("sum", one, |g, v| Ok(g.sum(v[0])));
}

#[test]
fn softmaxes() {
    op_check(
        "softmax",
        |s| vec![randn(&[3, 6], s)],
        |g, v| g.softmax(v[0]),
    );
    op_check(
        "causal_softmax",
        |s| vec![randn(&[2, 5, 5], s)],
        |g, v| g.causal_softmax(v[0], 0.5),
    );
}

#[test]
fn layer_norm() {
    op_check(
        "layer_norm",
        |s| {
            let mut scale = randn(&[6], s + 1);
            scale.data_mut().iter_mut().for_each(|x| *x += 1.0);
            vec![randn(&[2, 3, 6], s), scale, randn(&[6], s + 2)]
        },
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
    );
}

#[test]
fn embedding_with_repeats() {
    op_check(
        "embedding",
        |s| vec![randn(&[5, 4], s)],
        |g, v| g.embedding(v[0], &[0, 3, 3, 1, 4, 0], &[2, 3]),
    );
}

#[test]
fn slicing_and_heads() {
    op_check(
        "slice_rows",
        |s| vec![randn(&[6, 3], s)],
        |g, v| g.slice_rows(v[0], 2, 3),
    );
    op_check(
        "slice_last",
        |s| vec![randn(&[2, 3, 6], s)],
        |g, v| g.slice_last(v[0], 1, 4),
    );
    op_check(
        "split_heads",
        |s| vec![randn(&[2, 3, 6], s)],
        |g, v| g.split_heads(v[0], 3),
    );
    op_check(
        "merge_heads",
        |s| vec![randn(&[2, 3, 4, 2], s)],
        |g, v| g.merge_heads(v[0]),
    );
}

#[test]
fn dropout_train_mode() {
    op_check(
        "dropout",
        |s| vec![randn(&[4, 8], s)],
        |g, v| g.dropout(v[0], 0.3),
    );
}

#[test]
fn causal_conv() {
    op_check(
        "causal_conv1d",
        |s| {
            vec![
                randn(&[2, 5, 3], s),
                randn(&[3, 3], s + 1),
                randn(&[3], s + 2),
            ]
        },
        |g, v| g.causal_conv1d(v[0], v[1], v[2]),
    );
}

#[test]
fn cross_entropy() {
    for seed in SEEDS {
        let store = ParamStore::new();
        let r = check(
            &store,
            &[randn(&[2, 3, 7], seed)],
            Mode::Eval,
            64,
            |g, v| g.cross_entropy(v[0], &[0, 6, 2, 2, 5, 1]),
        )
        .unwrap();
        assert!(r.max_rel_err < TOL, "seed {seed}: {r:?}");
    }
}

#[test]
fn linear_layer() {
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let p = LinearParams::init(&mut store, "lin", 4, 5, true, &mut rng_from_seed(seed));
        // Default init is too small for a meaningful check.
        let w = store.get_mut(p.weight);
        *w = randn(&[4, 5], seed + 9);
        let r = check(&store, &[randn(&[3, 4], seed)], Mode::Eval, 64, |g, v| {
            let y = linear(g, &p, v[0])?;
            weighted_sum(g, y, seed)
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "seed {seed}: {r:?}");
    }
}

/// Replaces every parameter by unit-scale noise so all paths carry signal.
fn perturb(store: &mut ParamStore<f64>, seed: u64, std: f64) {
    let mut rng = rng_from_seed(seed);
    for e in store.entries_mut() {
        let n = Tensor::randn(e.value.shape(), 0.0, std, &mut rng);
        for (x, d) in e.value.data_mut().iter_mut().zip(n.data()) {
            *x += d;
        }
    }
}

#[test]
fn gam_block_all_variants() {
    let (d, s, k) = (8, 6, 3);
    for variant in GamVariant::ALL {
        for seed in SEEDS {
            let mut store = ParamStore::new();
            let p =
                GamBlockParams::init(&mut store, "b", d, s, k, variant, &mut rng_from_seed(seed));
            perturb(&mut store, seed, 0.3);
            let x = randn(&[1, 4, d], seed + 50);
            let r = check(&store, &[x], Mode::Train { seed }, 48, |g, v| {
                let y = gam_block_forward(g, &p, v[0], 0.1)?;
                weighted_sum(g, y, seed)
            })
            .unwrap();
            assert!(r.max_rel_err < TOL, "{variant} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn transformer_block() {
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let p =
            TransformerBlockParams::init(&mut store, "b", 8, 2, &mut rng_from_seed(seed)).unwrap();
        perturb(&mut store, seed, 0.3);
        let x = randn(&[1, 4, 8], seed + 50);
        let r = check(&store, &[x], Mode::Train { seed }, 48, |g, v| {
            let y = transformer_block_forward(g, &p, v[0], 0.1)?;
            weighted_sum(g, y, seed)
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "seed {seed}: {r:?}");
    }
}

#[test]
fn tiny_language_models() {
    use gamlab_core::{Arch, Model, ModelConfig};
    for arch in [Arch::Gam, Arch::Transformer] {
        for seed in SEEDS {
            let cfg = ModelConfig {
                arch,
                vocab_size: 11,
                block_size: 8,
                d_model: 16,
                n_layers: 2,
                num_slots: 8,
                n_head: 2,
                seed,
                ..Default::default()
            };
            let mut model = Model::<f64>::new(cfg).unwrap();
            perturb(&mut model.params, seed, 0.2);
            let ids: Vec<u32> = (0..18)
                .map(|i| ((i * 5 + seed as usize) % 11) as u32)
                .collect();
            let r = check(&model.params, &[], Mode::Train { seed }, 24, |g, _| {
                model.loss(g, &ids, 2)
            })
            .unwrap();
            assert!(r.max_rel_err < TOL, "{arch} seed {seed}: {r:?}");
        }
    }
}
