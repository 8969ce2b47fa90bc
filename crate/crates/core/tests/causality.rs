//! Future tokens never influence earlier outputs.

use gamlab_core::gam::{gam_block_forward, GamBlockParams, GamVariant};
use gamlab_core::{rng_from_seed, Arch, Graph, Mode, Model, ModelConfig, ParamStore, Tensor};

fn configs() -> Vec<ModelConfig> {
    let mut out = Vec::new();
    for n_layers in [1, 2, 6] {
        let base = ModelConfig {
            vocab_size: 32,
            block_size: 12,
            d_model: 16,
            num_slots: 8,
            n_head: 4,
            n_layers,
            seed: n_layers as u64,
            ..Default::default()
        };
        out.push(ModelConfig {
            arch: Arch::Transformer,
            ..base.clone()
        });
        for variant in GamVariant::ALL {
            out.push(ModelConfig {
                arch: Arch::Gam,
                variant,
                ..base.clone()
            });
        }
    }
    out
}

#[test]
fn perturbing_a_token_leaves_earlier_logits_identical() {
    for cfg in configs() {
        let model = Model::<f32>::new(cfg.clone()).unwrap();
        let n = cfg.block_size;
        let ids: Vec<u32> = (0..n as u32).map(|i| (i * 7 + 3) % 32).collect();
        let base = model.logits(&ids, 1).unwrap();
        let v = cfg.vocab_size;
        for t in 0..n {
            let mut other = ids.clone();
            other[t] = (other[t] + 1) % 32;
            let out = model.logits(&other, 1).unwrap();
            assert_eq!(
                &base.data()[..t * v],
                &out.data()[..t * v],
                "{:?} L={} t={t}",
                (cfg.arch, cfg.variant),
                cfg.n_layers
            );
            assert_ne!(&base.data()[t * v..], &out.data()[t * v..]);
        }
    }
}

#[test]
fn gam_block_suffix_perturbation() {
    let (d, n) = (8, 10);
    for variant in GamVariant::ALL {
        let mut store = ParamStore::<f64>::new();
        let p = GamBlockParams::init(&mut store, "b", d, 6, 3, variant, &mut rng_from_seed(1));
        let x = Tensor::<f64>::randn(&[2, n, d], 0.0, 1.0, &mut rng_from_seed(2));
        let run = |x: Tensor<f64>| {
            let mut g = Graph::new(Mode::Eval);
            g.bind(&store, false);
            let xv = g.input(x);
            let y = gam_block_forward(&mut g, &p, xv, 0.1).unwrap();
            g.value(y).clone()
        };
        let y = run(x.clone());
        for t in 0..n {
            let mut x2 = x.clone();
            let noise = Tensor::<f64>::randn(&[2, n, d], 0.0, 5.0, &mut rng_from_seed(t as u64));
            for b in 0..2 {
                for i in t * d..n * d {
                    x2.data_mut()[b * n * d + i] += noise.data()[b * n * d + i];
                }
            }
            let y2 = run(x2);
            for b in 0..2 {
                let r = b * n * d..b * n * d + t * d;
                assert_eq!(&y.data()[r.clone()], &y2.data()[r], "{variant} t={t}");
            }
        }
    }
}
