//! Dense-tensor reverse-mode differentiation core and the layer set the
//! model needs: affine layers, activations, an LSTM cell, strided 2D
//! convolutions, region-aligned feature pooling, losses and Adam.
//!
//! Arithmetic is 64-bit throughout; checkpoints store 32-bit floats.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;

pub use adam::{clip_global_norm, Adam};
pub use gradcheck::{grad_check, GradCheckReport, FD_STEP};
pub use layers::{roi_align, sanitize_box, Activation, ConvEncoder, Dense, LstmCell, Mlp};
pub use params::{Init, ParamEntry, ParameterStore};
pub use tape::{Tape, Var, PROB_EPS};

/// Loss kinds of the training objective.
pub mod losses {
    use super::tape::{Tape, Var};

    /// `sum(|pred - target|)`.
    pub fn l1(tape: &mut Tape, pred: Var, target: &[f64]) -> Var {
        let (m, n) = tape.dims(pred);
        assert_eq!(m * n, target.len(), "l1 target length mismatch");
        let t = tape.constant(m, n, target.to_vec());
        tape.l1_sum(pred, t)
    }

    /// Smooth-L1 (Huber, transition 1.0) summed over elements.
    pub fn smooth_l1(tape: &mut Tape, pred: Var, target: &[f64]) -> Var {
        let (m, n) = tape.dims(pred);
        assert_eq!(m * n, target.len(), "smooth_l1 target length mismatch");
        let t = tape.constant(m, n, target.to_vec());
        let d = tape.sub(pred, t);
        tape.smooth_l1_sum(d)
    }

    /// Cross entropy of a probability row against a class index.
    pub fn cross_entropy(tape: &mut Tape, probs: Var, class: usize) -> Var {
        tape.cross_entropy(probs, class)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fill_random(store: &mut ParameterStore, name: &str, rng: &mut ChaCha8Rng, scale: f64) {
        let e = store.get_mut(name).unwrap();
        for v in &mut e.values {
            *v = rng.gen_range(-scale..scale);
        }
    }

    #[test]
    fn dense_zero_weights_relu_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParameterStore::new();
        let layer = Dense::init(&mut store, &mut rng, "d", 3, 2, Activation::Relu);
        for v in &mut store.get_mut("d.w").unwrap().values {
            *v = 0.0;
        }
        let mut tape = Tape::new();
        let x = tape.constant(1, 3, vec![1.0, -2.0, 0.5]);
        let y = layer.forward(&mut tape, &store, x, false).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0]);
    }

    #[test]
    fn dense_identity_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParameterStore::new();
        let layer = Dense::init(&mut store, &mut rng, "d", 3, 3, Activation::None);
        let w = store.get_mut("d.w").unwrap();
        w.values = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let mut tape = Tape::new();
        let x = tape.constant(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]);
        let y = layer.forward(&mut tape, &store, x, false).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn dense_rejects_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParameterStore::new();
        let layer = Dense::init(&mut store, &mut rng, "d", 3, 2, Activation::None);
        let mut tape = Tape::new();
        let x = tape.constant(1, 4, vec![0.0; 4]);
        assert!(layer.forward(&mut tape, &store, x, false).is_err());
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParameterStore::new();
            let layer = Dense::init(&mut store, &mut rng, "d", 5, 4, Activation::Relu);
            store.add("x", 2, 5, Init::UniformFanIn, &mut rng);
            let names: Vec<String> = vec!["d.w".into(), "d.b".into(), "x".into()];
            let report = grad_check(
                &mut store,
                &names,
                |t, s| {
                    let x = t.param(s, "x", true);
                    let y = layer.forward(t, s, x, true).unwrap();
                    let sq = t.mul(y, y);
                    t.sum_all(sq)
                },
                &mut rng,
                200,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "got {}", report.max_rel_error);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..12).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let x = tape.constant(3, 4, vals);
        let y = tape.softmax_rows(x);
        for i in 0..3 {
            let row = &tape.value(y)[i * 4..(i + 1) * 4];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParameterStore::new();
        store.add("x", 2, 5, Init::UniformFanIn, &mut rng);
        let names = vec!["x".to_string()];
        let report = grad_check(
            &mut store,
            &names,
            |t, s| {
                let x = t.param(s, "x", true);
                let p = t.softmax_rows(x);
                // weighted sum so the gradient is not trivially zero
                let w = t.constant(2, 5, (0..10).map(|i| i as f64 * 0.3 - 1.0).collect());
                let wp = t.mul(p, w);
                t.sum_all(wp)
            },
            &mut rng,
            200,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "got {}", report.max_rel_error);
    }

    #[test]
    fn lstm_zero_weights_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParameterStore::new();
        let cell = LstmCell::init(&mut store, &mut rng, "lstm", 3, 4);
        for name in store.names().map(String::from).collect::<Vec<_>>() {
            for v in &mut store.get_mut(&name).unwrap().values {
                *v = 0.0;
            }
        }
        let mut tape = Tape::new();
        let x = tape.constant(1, 3, vec![0.3, -0.6, 1.0]);
        let c0 = vec![0.5, -1.0, 0.25, 2.0];
        let h = tape.constant(1, 4, vec![0.1, 0.2, 0.3, 0.4]);
        let c = tape.constant(1, 4, c0.clone());
        let (h1, c1) = cell.forward(&mut tape, &store, x, h, c, false).unwrap();
        for i in 0..4 {
            let want_c = 0.5 * c0[i];
            assert!((tape.value(c1)[i] - want_c).abs() < 1e-15);
            let want_h = 0.5 * want_c.tanh();
            assert!((tape.value(h1)[i] - want_h).abs() < 1e-15);
        }
    }

    #[test]
    fn lstm_zero_input_and_state_gives_zero_h() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParameterStore::new();
        let cell = LstmCell::init(&mut store, &mut rng, "lstm", 3, 4);
        let mut tape = Tape::new();
        let x = tape.constant(1, 3, vec![0.0; 3]);
        let h = tape.constant(1, 4, vec![0.0; 4]);
        let c = tape.constant(1, 4, vec![0.0; 4]);
        let (h1, _) = cell.forward(&mut tape, &store, x, h, c, false).unwrap();
        // c' = i*g with g = tanh(0) = 0, so h' = o * tanh(0) = 0.
        for &v in tape.value(h1) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn lstm_all_weight_blocks_pass_finite_differences() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut store = ParameterStore::new();
            let cell = LstmCell::init(&mut store, &mut rng, "lstm", 4, 3);
            store.add("x", 2, 4, Init::UniformFanIn, &mut rng);
            store.add("h0", 2, 3, Init::UniformFanIn, &mut rng);
            store.add("c0", 2, 3, Init::UniformFanIn, &mut rng);
            let names: Vec<String> = store.names().map(String::from).collect();
            assert_eq!(names.len(), 12 + 3); // 8 weight blocks + 4 biases + 3 inputs
            let report = grad_check(
                &mut store,
                &names,
                |t, s| {
                    let x = t.param(s, "x", true);
                    let h = t.param(s, "h0", true);
                    let c = t.param(s, "c0", true);
                    let (h1, c1) = cell.forward(t, s, x, h, c, true).unwrap();
                    let (h2, _) = cell.forward(t, s, x, h1, c1, true).unwrap();
                    let sq = t.mul(h2, h2);
                    t.sum_all(sq)
                },
                &mut rng,
                200,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "got {}", report.max_rel_error);
        }
    }

    #[test]
    fn conv_encoder_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParameterStore::new();
        let enc = ConvEncoder::init(&mut store, &mut rng, "enc", 64, 64, 32, 256).unwrap();
        let mut tape = Tape::new();
        let img = tape.constant(1, 64 * 64, vec![0.1; 64 * 64]);
        let (gamma, xg) = enc.forward(&mut tape, &store, img, false).unwrap();
        assert_eq!(tape.dims(gamma), (32, 8 * 8));
        assert_eq!(tape.dims(xg), (1, 256));
        assert!(ConvEncoder::init(&mut store, &mut rng, "bad", 60, 64, 32, 256).is_err());
    }

    #[test]
    fn conv_encoder_zero_image_zero_bias_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParameterStore::new();
        let enc = ConvEncoder::init(&mut store, &mut rng, "enc", 32, 32, 8, 16).unwrap();
        let mut tape = Tape::new();
        let img = tape.constant(1, 32 * 32, vec![0.0; 32 * 32]);
        let (gamma, xg) = enc.forward(&mut tape, &store, img, false).unwrap();
        assert!(tape.value(gamma).iter().all(|&v| v == 0.0));
        assert!(tape.value(xg).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_encoder_end_to_end_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParameterStore::new();
        let enc = ConvEncoder::init(&mut store, &mut rng, "enc", 16, 16, 8, 12).unwrap();
        store.add("img", 1, 16 * 16, Init::UniformFanIn, &mut rng);
        let names: Vec<String> = store.names().map(String::from).collect();
        let report = grad_check(
            &mut store,
            &names,
            |t, s| {
                let img = t.param(s, "img", true);
                let (gamma, xg) = enc.forward(t, s, img, true).unwrap();
                let g2 = t.mul(gamma, gamma);
                let sg = t.sum_all(g2);
                let x2 = t.mul(xg, xg);
                let sx = t.sum_all(x2);
                t.add(sg, sx)
            },
            &mut rng,
            200,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "got {}", report.max_rel_error);
    }

    #[test]
    fn roi_align_constant_map_is_constant() {
        let mut tape = Tape::new();
        let gamma = tape.constant(2, 6 * 6, vec![0.75; 2 * 36]);
        let v = roi_align(&mut tape, gamma, 6, 6, [0.2, 0.3, 0.9, 0.8], 3).unwrap();
        assert_eq!(tape.dims(v), (1, 2 * 9));
        for &x in tape.value(v) {
            assert!((x - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn roi_align_whole_map_matches_direct_bilinear() {
        // Box (0,0,1,1) with k = Hf = Wf samples halfway between anchors.
        let hf = 4;
        let wf = 4;
        let vals: Vec<f64> = (0..hf * wf).map(|i| (i as f64) * 0.37 - 1.0).collect();
        let mut tape = Tape::new();
        let gamma = tape.constant(1, hf * wf, vals.clone());
        let v = roi_align(&mut tape, gamma, hf, wf, [0.0, 0.0, 1.0, 1.0], 4).unwrap();
        let at = |ix: usize, iy: usize| vals[iy * wf + ix];
        for gy in 0..4 {
            for gx in 0..4 {
                let u = (gx as f64 + 0.5).min((wf - 1) as f64);
                let vv = (gy as f64 + 0.5).min((hf - 1) as f64);
                let ix0 = u.floor() as usize;
                let iy0 = vv.floor() as usize;
                let fu = u - ix0 as f64;
                let fv = vv - iy0 as f64;
                let ix1 = (ix0 + 1).min(wf - 1);
                let iy1 = (iy0 + 1).min(hf - 1);
                let want = at(ix0, iy0) * (1.0 - fu) * (1.0 - fv)
                    + at(ix1, iy0) * fu * (1.0 - fv)
                    + at(ix0, iy1) * (1.0 - fu) * fv
                    + at(ix1, iy1) * fu * fv;
                let got = tape.value(v)[gy * 4 + gx];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn roi_align_rejects_non_finite_box() {
        let mut tape = Tape::new();
        let gamma = tape.constant(1, 16, vec![0.0; 16]);
        assert!(roi_align(&mut tape, gamma, 4, 4, [0.0, f64::NAN, 1.0, 1.0], 2).is_err());
    }

    #[test]
    fn roi_align_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParameterStore::new();
        store.add("gamma", 3, 5 * 5, Init::UniformFanIn, &mut rng);
        fill_random(&mut store, "gamma", &mut rng, 1.0);
        let names = vec!["gamma".to_string()];
        let report = grad_check(
            &mut store,
            &names,
            |t, s| {
                let g = t.param(s, "gamma", true);
                let v = roi_align(t, g, 5, 5, [0.1, 0.25, 0.7, 0.9], 3).unwrap();
                let sq = t.mul(v, v);
                t.sum_all(sq)
            },
            &mut rng,
            200,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "got {}", report.max_rel_error);
    }

    #[test]
    fn sanitize_box_contracts() {
        assert_eq!(
            sanitize_box([0.2, 0.1, 0.8, 0.9]).unwrap(),
            [0.2, 0.1, 0.8, 0.9]
        );
        // reversed coordinates get ordered
        let b = sanitize_box([0.8, 0.9, 0.2, 0.1]).unwrap();
        assert_eq!(b, [0.2, 0.1, 0.8, 0.9]);
        // degenerate box expands to width 1e-3
        let b = sanitize_box([0.5, 0.5, 0.5, 0.5]).unwrap();
        assert!((b[2] - b[0] - 1e-3).abs() < 1e-12);
        assert!((b[3] - b[1] - 1e-3).abs() < 1e-12);
        // clamped to the unit square
        let b = sanitize_box([-0.5, 0.0, 1.5, 1.0]).unwrap();
        assert_eq!(b, [0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn loss_closed_forms() {
        let mut tape = Tape::new();
        // cross entropy of a (nearly) one-hot correct distribution
        let p = tape.constant(1, 3, vec![1e-9, 1.0 - 2e-9, 1e-9]);
        let ce = losses::cross_entropy(&mut tape, p, 1);
        assert!(tape.scalar_value(ce) <= 1e-6);

        let x = tape.constant(1, 4, vec![0.5, -0.25, 0.0, 2.0]);
        let l = losses::l1(&mut tape, x, &[0.5, -0.25, 0.0, 2.0]);
        assert_eq!(tape.scalar_value(l), 0.0);

        // smooth l1 at residual 0.5 -> 0.125 per element
        let y = tape.constant(1, 2, vec![0.5, -0.5]);
        let s = losses::smooth_l1(&mut tape, y, &[0.0, 0.0]);
        assert!((tape.scalar_value(s) - 0.25).abs() < 1e-15);

        // linear branch: residual 2.0 -> 1.5
        let z = tape.constant(1, 1, vec![2.0]);
        let s2 = losses::smooth_l1(&mut tape, z, &[0.0]);
        assert!((tape.scalar_value(s2) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParameterStore::new();
        store.add("x", 1, 6, Init::UniformFanIn, &mut rng);
        let target: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let names = vec!["x".to_string()];
        let t1 = target.clone();
        let report = grad_check(
            &mut store,
            &names,
            move |t, s| {
                let x = t.param(s, "x", true);
                let a = losses::l1(t, x, &t1);
                let b = losses::smooth_l1(t, x, &t1);
                let p = t.softmax_rows(x);
                let c = losses::cross_entropy(t, p, 2);
                let ab = t.add(a, b);
                t.add(ab, c)
            },
            &mut rng,
            200,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "got {}", report.max_rel_error);
    }

    #[test]
    fn forward_is_pure_given_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParameterStore::new();
        let enc = ConvEncoder::init(&mut store, &mut rng, "enc", 16, 16, 8, 12).unwrap();
        let img: Vec<f64> = (0..256).map(|_| rng.gen_range(0.0..1.0)).collect();
        let run = |store: &ParameterStore| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.constant(1, 256, img.clone());
            let (gamma, xg) = enc.forward(&mut tape, store, x, false).unwrap();
            let mut out = tape.value(gamma).to_vec();
            out.extend_from_slice(tape.value(xg));
            out
        };
        let a = run(&store);
        let b = run(&store);
        assert_eq!(a, b); // bitwise
    }
}
