//! Property tests for the tokenizer, retrieval, data pipeline and optimizer.

use gamlab_core::data::TokenDataset;
use gamlab_core::gam::memory_retrieve;
use gamlab_core::optim::clip_grad_norm;
use gamlab_core::{Bpe, Graph, Mode, Tensor};
use proptest::prelude::*;
use std::sync::OnceLock;

fn trained() -> &'static Bpe {
    static BPE: OnceLock<Bpe> = OnceLock::new();
    BPE.get_or_init(|| {
        let text = "Über café naïve — 東京 and the théâtre; the cat sat on the mat. ".repeat(30);
        Bpe::train(text.as_bytes(), 400).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn utf8_round_trip(s in "\\PC{0,64}") {
        let bpe = trained();
        prop_assert_eq!(bpe.decode(&bpe.encode(s.as_bytes())).unwrap(), s.as_bytes());
    }

    #[test]
    fn byte_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..128)) {
        let bpe = trained();
        let ids = bpe.encode(&bytes);
        prop_assert!(ids.iter().all(|&i| (i as usize) < bpe.vocab_size()));
        prop_assert_eq!(bpe.decode(&ids).unwrap(), bytes);
    }

    #[test]
    fn training_is_deterministic(s in "[ab c]{2,40}", extra in 1usize..20) {
        let a = Bpe::train(s.as_bytes(), 256 + extra).unwrap();
        let b = Bpe::train(s.as_bytes(), 256 + extra).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.vocab_size() <= 256 + extra);
    }

    #[test]
    fn retrieval_rows_are_convex_combinations(
        seed in 0u64..1000, s in 1usize..9, d in 1usize..9, n in 1usize..6, scale in 0.1f64..10.0,
    ) {
        let mut rng = gamlab_core::rng_from_seed(seed);
        let mut g = Graph::<f64>::new(Mode::Eval);
        let m = g.input(Tensor::randn(&[s, d], 0.0, 1.0, &mut rng));
        let x = g.input(Tensor::randn(&[2, n, d], 0.0, scale, &mut rng));
        let (global, w) = memory_retrieve(&mut g, m, x).unwrap();
        let (wv, mv, gv) = (g.value(w).data(), g.value(m).data(), g.value(global).data());
        for (r, row) in wv.chunks(s).enumerate() {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            for c in 0..d {
                let expect: f64 = (0..s).map(|j| row[j] * mv[j * d + c]).sum();
                prop_assert!((gv[r * d + c] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn targets_are_inputs_shifted_by_one(len in 2usize..400, block in 1usize..50, seed in 0u64..50) {
        prop_assume!(len > block);
        let tokens: Vec<u32> = (0..len as u32).collect();
        let ds = TokenDataset::new(tokens, block).unwrap();
        for b in ds.batches(3, true, seed, 1, false) {
            for row in b.ids.chunks(block + 1) {
                for t in 0..block {
                    prop_assert_eq!(row[t + 1], row[t] + 1);
                }
            }
        }
        let served: usize = ds.batches(3, true, seed, 1, false).map(|b| b.rows).sum();
        prop_assert_eq!(served, ds.num_chunks());
    }

    #[test]
    fn clipping_never_increases_norm(v in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
        let t = Tensor::<f64>::new(&[v.len()], v.clone()).unwrap();
        let mut g = vec![Some(t)];
        let before = clip_grad_norm(&mut g, 1.0);
        let after: f64 = g[0].as_ref().unwrap().data().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(after <= before + 1e-12);
        prop_assert!(after <= 1.0 + 1e-6);
        if before <= 1.0 {
            prop_assert_eq!(g[0].as_ref().unwrap().data(), &v[..]);
        }
    }
}

#[test]
fn saturated_query_selects_one_memory_row() {
    let mut rng = gamlab_core::rng_from_seed(7);
    let mut g = Graph::<f64>::new(Mode::Eval);
    let mem = Tensor::<f64>::randn(&[5, 4], 0.0, 1.0, &mut rng);
    let target = mem.data()[8..12].to_vec();
    let m = g.input(mem);
    // Scale the query until the top score leads the runner-up by at least 20.
    let mut alpha = 1.0;
    loop {
        let q: Vec<f64> = target.iter().map(|x| x * alpha).collect();
        let x = g.input(Tensor::new(&[1, 1, 4], q).unwrap());
        let (global, w) = memory_retrieve(&mut g, m, x).unwrap();
        let scores: Vec<f64> = g.value(w).data().to_vec();
        let top = scores.iter().cloned().fold(0.0, f64::max);
        if scores[2] == top {
            let logs: Vec<f64> = scores.iter().map(|p| p.ln()).collect();
            let gap = logs[2]
                - logs
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != 2)
                    .map(|(_, l)| *l)
                    .fold(f64::MIN, f64::max);
            if gap >= 20.0 {
                for (a, b) in g.value(global).data().iter().zip(&target) {
                    assert!((a - b).abs() < 1e-3);
                }
                return;
            }
        }
        alpha *= 1.5;
        assert!(alpha < 1e6, "row 2 never dominates");
    }
}
