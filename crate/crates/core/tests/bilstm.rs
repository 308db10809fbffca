use std::sync::Arc;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slstm_core::autodiff::{grad_check, ParamStore, Segments, Tape};
use slstm_core::bilstm::{self, graph, BiLstmParams, LstmParams};
use slstm_core::tensor::Tensor;

fn randomise_biases(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        let name = &store.get(id).name;
        if name.contains(".b_") || name.ends_with("c_init") {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = Tensor::uniform(&shape, 0.4, rng);
        }
    }
}

fn build(input: usize, d: usize, layers: usize, seed: u64) -> (ParamStore, Vec<BiLstmParams>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let params = bilstm::register_stack(&mut store, "enc", input, d, layers, &mut rng).unwrap();
    randomise_biases(&mut store, &mut rng);
    (store, params)
}

fn embeddings(rows: usize, input: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[rows, input], 1.0, &mut rng)
}

fn oracle_step(h: &[f64], c: &[f64], x: &[f64], p: &LstmParams, store: &ParamStore) -> (Vec<f64>, Vec<f64>) {
    let d = h.len();
    let gate = |g: usize| -> Vec<f64> {
        let w = store.value(p.w[g]);
        let u = store.value(p.u[g]);
        let b = store.value(p.b[g]);
        (0..d)
            .map(|k| {
                let mut z = b.data()[k];
                for (j, xj) in x.iter().enumerate() {
                    z += w.get(k, j) * xj;
                }
                for (j, hj) in h.iter().enumerate() {
                    z += u.get(k, j) * hj;
                }
                z
            })
            .collect()
    };
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let (ih, fh, oh, uh) = (gate(0), gate(1), gate(2), gate(3));
    let mut hn = vec![0.0; d];
    let mut cn = vec![0.0; d];
    for k in 0..d {
        let (a, b) = (sig(ih[k]).exp(), sig(fh[k]).exp());
        let (i, f) = (a / (a + b), b / (a + b));
        cn[k] = c[k] * f + uh[k].tanh() * i;
        hn[k] = sig(oh[k]) * cn[k].tanh();
    }
    (hn, cn)
}

#[test]
fn lstm_step_matches_scalar_oracle() {
    let (store, layers) = build(2, 3, 1, 5);
    let p = layers[0].forward;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = Tensor::uniform(&[3], 0.9, &mut rng).into_data();
    let c = Tensor::uniform(&[3], 2.0, &mut rng).into_data();
    let x = Tensor::uniform(&[2], 1.0, &mut rng).into_data();
    let (h1, c1) = bilstm::lstm_step(&h, &c, &x, &p, &store).unwrap();
    let (h2, c2) = oracle_step(&h, &c, &x, &p, &store);
    for k in 0..3 {
        assert_abs_diff_eq!(h1[k], h2[k], epsilon = 1e-14);
        assert_abs_diff_eq!(c1[k], c2[k], epsilon = 1e-14);
    }
}

#[test]
fn zero_parameters_give_zero_outputs() {
    let (mut store, layers) = build(3, 4, 2, 0);
    for id in store.ids().collect::<Vec<_>>() {
        store.value_mut(id).fill(0.0);
    }
    let (i, f) = bilstm::input_forget_gates(&[0.0; 4], &[0.0; 3], &layers[0].forward, &store);
    assert!(i.iter().chain(&f).all(|&v| v == 0.5));
    let (h, g) = bilstm::stack(&layers, &embeddings(5, 3, 1), &store).unwrap();
    assert!(h.data().iter().all(|&v| v == 0.0));
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn boundary_only_input_takes_one_step_each_way() {
    let (store, layers) = build(2, 3, 1, 9);
    let l = &layers[0];
    let x = embeddings(2, 2, 3);
    let (h, g) = bilstm::bilstm_encode(&x, l, &store).unwrap();
    let h_fw0 = store.value(l.forward.h_init).data().to_vec();
    let c_fw0 = store.value(l.forward.c_init).data().to_vec();
    let h_bw0 = store.value(l.backward.h_init).data().to_vec();
    let c_bw0 = store.value(l.backward.c_init).data().to_vec();
    let (f1, _) = oracle_step(&h_fw0, &c_fw0, x.row(1), &l.forward, &store);
    let (b0, _) = oracle_step(&h_bw0, &c_bw0, x.row(0), &l.backward, &store);
    let mut expected_g = f1.clone();
    expected_g.extend(&b0);
    for (a, b) in g.iter().zip(&expected_g) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-14);
    }
    assert_eq!(&h.row(0)[..3], &h_fw0[..]);
    assert_eq!(&h.row(1)[3..], &h_bw0[..]);
}

#[test]
fn reversal_with_swapped_directions_mirrors_output() {
    let (store, layers) = build(3, 4, 1, 2);
    let l = layers[0];
    let swapped = BiLstmParams {
        forward: l.backward,
        backward: l.forward,
    };
    let x = embeddings(7, 3, 4);
    let rows: Vec<Vec<f64>> = (0..7).rev().map(|r| x.row(r).to_vec()).collect();
    let xr = Tensor::from_rows(&rows).unwrap();
    let (h, g) = bilstm::bilstm_encode(&x, &l, &store).unwrap();
    let (hr, gr) = bilstm::bilstm_encode(&xr, &swapped, &store).unwrap();
    for t in 0..7 {
        let a = h.row(t);
        let b = hr.row(6 - t);
        assert_eq!(&a[..4], &b[4..]);
        assert_eq!(&a[4..], &b[..4]);
    }
    assert_eq!(&g[..4], &gr[4..]);
    assert_eq!(&g[4..], &gr[..4]);
}

#[test]
fn stack_is_composition_of_layers() {
    let (store, layers) = build(3, 2, 2, 6);
    let x = embeddings(6, 3, 8);
    let (h1, _) = bilstm::bilstm_encode(&x, &layers[0], &store).unwrap();
    let (h2, g2) = bilstm::bilstm_encode(&h1, &layers[1], &store).unwrap();
    let (h, g) = bilstm::stack(&layers, &x, &store).unwrap();
    assert_eq!(h, h2);
    assert_eq!(g, g2);
    let (h_one, g_one) = bilstm::stack(&layers[..1], &x, &store).unwrap();
    assert_eq!(h_one, h1);
    assert_eq!(g_one.len(), 4);
}

#[test]
fn zero_top_layer_zeroes_the_stack() {
    let (mut store, layers) = build(3, 2, 2, 6);
    for id in layers[1].param_ids() {
        store.value_mut(id).fill(0.0);
    }
    let (h, g) = bilstm::stack(&layers, &embeddings(5, 3, 0), &store).unwrap();
    assert!(h.data().iter().all(|&v| v == 0.0));
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn size_chain_mismatch_is_a_config_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let a = BiLstmParams::register(&mut store, "a", 3, 2, &mut rng).unwrap();
    let b = BiLstmParams::register(&mut store, "b", 3, 2, &mut rng).unwrap();
    let err = bilstm::stack(&[a, b], &embeddings(4, 3, 0), &store).unwrap_err();
    assert!(matches!(err, slstm_core::Error::Config(_)), "{err}");
    assert!(bilstm::lstm_step(&[0.0; 3], &[0.0; 2], &[0.0; 3], &a.forward, &store).is_err());
}

#[test]
fn taped_batch_matches_pure_path() {
    let (store, layers) = build(3, 4, 2, 12);
    let lens = [5usize, 2, 8, 3];
    let xs: Vec<Tensor> = lens.iter().enumerate().map(|(b, &l)| embeddings(l, 3, 40 + b as u64)).collect();
    let total: usize = lens.iter().sum();
    let packed = Tensor::matrix(total, 3, xs.iter().flat_map(|t| t.data().to_vec()).collect()).unwrap();
    let segs = Arc::new(Segments::from_lengths(&lens).unwrap());
    let mut tape = Tape::new();
    let e = tape.constant(packed);
    let out = graph::stack_forward(&mut tape, &store, &layers, e, &segs, |_, v, _| Ok(v)).unwrap();
    let wh = tape.value(out.word_h);
    let g = tape.value(out.g);
    let pure = bilstm::stack_batch(&layers, &xs, &store, 3).unwrap();
    for (b, (h, gv)) in pure.iter().enumerate() {
        for (r, row) in segs.range(b).enumerate() {
            for k in 0..8 {
                assert_abs_diff_eq!(wh.get(row, k), h.get(r, k), epsilon = 1e-13);
            }
        }
        for k in 0..8 {
            assert_abs_diff_eq!(g.get(b, k), gv[k], epsilon = 1e-13);
        }
    }
}

#[test]
fn taped_gradients_pass_finite_differences() {
    for layers_n in [1, 2] {
        let (mut store, layers) = build(2, 3, layers_n, 3);
        let lens = [4usize, 7];
        let segs = Arc::new(Segments::from_lengths(&lens).unwrap());
        let x = embeddings(11, 2, 2);
        let report = grad_check(
            &mut store,
            |s| {
                let mut tape = Tape::new();
                let e = tape.constant(x.clone());
                let out = graph::stack_forward(&mut tape, s, &layers, e, &segs, |_, v, _| Ok(v))?;
                let a = tape.sum(out.word_h)?;
                let sq = tape.mul(out.g, out.g)?;
                let b = tape.sum(sq)?;
                let loss = tape.add(a, b)?;
                Ok((tape, loss))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gates_normalise_and_states_are_bounded(seed in 0u64..1000, rows in 2usize..9) {
        let (store, layers) = build(3, 4, 1, seed);
        let x = embeddings(rows, 3, seed).map(|v| v * 6.0);
        let mut h = store.value(layers[0].forward.h_init).data().to_vec();
        let mut c = store.value(layers[0].forward.c_init).data().to_vec();
        for t in 1..rows {
            let (i, f) = bilstm::input_forget_gates(&h, x.row(t), &layers[0].forward, &store);
            for (a, b) in i.iter().zip(&f) {
                prop_assert!((a + b - 1.0).abs() < 1e-12);
            }
            (h, c) = bilstm::lstm_step(&h, &c, x.row(t), &layers[0].forward, &store).unwrap();
        }
        let (wh, _) = bilstm::bilstm_encode(&x, &layers[0], &store).unwrap();
        prop_assert!(wh.data().iter().all(|v| v.abs() < 1.0));
    }

    /// The forward half at row t reacts to every earlier input it reads and
    /// to no later one.
    #[test]
    fn forward_half_depends_on_prefix_only(seed in 0u64..1000, j in 0usize..8, t in 0usize..8) {
        let (store, layers) = build(2, 3, 1, seed);
        let x = embeddings(8, 2, seed);
        let mut y = x.clone();
        y.row_mut(j).iter_mut().for_each(|v| *v += 0.5);
        let (a, _) = bilstm::bilstm_encode(&x, &layers[0], &store).unwrap();
        let (b, _) = bilstm::bilstm_encode(&y, &layers[0], &store).unwrap();
        let (fa, fb) = (&a.row(t)[..3], &b.row(t)[..3]);
        if j >= 1 && j <= t {
            prop_assert_ne!(fa, fb);
        } else {
            prop_assert_eq!(fa, fb);
        }
    }
}
