//! Forward-pass invariants of the GRU and TCGRU networks.

use emodim_core::model::{EmotionModel, ModelConfig};
use emodim_core::nnstack::{DepthwiseTConvParams, ParamSet, SeqMask};
use emodim_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_seq(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Matrix {
    Matrix::from_vec(t, d, (0..t * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn small(input_dim: usize, use_tconv: bool, seed: u64) -> EmotionModel {
    EmotionModel::new(ModelConfig::new(input_dim, use_tconv).with_widths(6, 5), seed).unwrap()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `x (1 x n) * m (n x k)` written out as loops.
fn vecmat(x: &[f64], m: &Matrix) -> Vec<f64> {
    let (n, k) = m.shape();
    assert_eq!(x.len(), n);
    let a = m.as_slice();
    (0..k).map(|j| (0..n).map(|i| x[i] * a[i * k + j]).sum()).collect()
}

/// Independent forward pass over plain vectors: no graph, no batching.
fn scalar_forward(model: &EmotionModel, seq: &Matrix) -> (Vec<f64>, [f64; 3], Vec<f64>) {
    let p = model.params();
    let get = |name: &str| p.get(p.index_of(name).unwrap());
    let (t_len, d) = seq.shape();
    let mut frames: Vec<Vec<f64>> = (0..t_len).map(|t| seq.row(t).to_vec()).collect();
    if model.config().use_tconv {
        let (k, b) = (get("tconv.kernel"), get("tconv.bias"));
        let at = |t: isize, c: usize| if t < 0 || t >= t_len as isize { 0.0 } else { seq.row(t as usize)[c] };
        for (t, frame) in frames.iter_mut().enumerate() {
            let t = t as isize;
            for c in 0..d {
                let kc = k.row(c);
                frame.push(b.as_slice()[c] + kc[0] * at(t - 1, c) + kc[1] * at(t, c) + kc[2] * at(t + 1, c));
            }
        }
    }
    let hidden = model.config().hidden;
    for l in 0..model.config().layers {
        let (w, u, b) = (get(&format!("gru{l}.w")), get(&format!("gru{l}.u")), get(&format!("gru{l}.b")));
        let ublock = |k: usize| {
            Matrix::from_vec(
                hidden,
                hidden,
                (0..hidden).flat_map(|i| u.row(i)[k * hidden..(k + 1) * hidden].to_vec()).collect(),
            )
            .unwrap()
        };
        let (uz, ur, uh) = (ublock(0), ublock(1), ublock(2));
        let mut h = vec![0.0; hidden];
        for frame in frames.iter_mut() {
            let xw = vecmat(frame, w);
            let (hz, hr) = (vecmat(&h, &uz), vecmat(&h, &ur));
            let z: Vec<f64> = (0..hidden).map(|j| sigmoid(xw[j] + hz[j] + b.as_slice()[j])).collect();
            let r: Vec<f64> =
                (0..hidden).map(|j| sigmoid(xw[hidden + j] + hr[j] + b.as_slice()[hidden + j])).collect();
            let rh: Vec<f64> = r.iter().zip(&h).map(|(a, b)| a * b).collect();
            let hh = vecmat(&rh, &uh);
            h = (0..hidden)
                .map(|j| {
                    let c = (xw[2 * hidden + j] + hh[j] + b.as_slice()[2 * hidden + j]).tanh();
                    (1.0 - z[j]) * h[j] + z[j] * c
                })
                .collect();
            *frame = h.clone();
        }
    }
    let pooled: Vec<f64> = (0..hidden).map(|j| frames.iter().map(|f| f[j]).sum::<f64>() / t_len as f64).collect();
    let emb: Vec<f64> = vecmat(&pooled, get("embed.w"))
        .iter()
        .zip(get("embed.b").as_slice())
        .map(|(a, b)| (a + b).tanh())
        .collect();
    let s: Vec<f64> = vecmat(&emb, get("regress.w")).iter().zip(get("regress.b").as_slice()).map(|(a, b)| a + b).collect();
    let logits = vecmat(&emb, get("classify.w")).iter().zip(get("classify.b").as_slice()).map(|(a, b)| a + b).collect();
    (emb, [s[0], s[1], s[2]], logits)
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

#[test]
fn forward_matches_a_loop_level_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for use_tconv in [false, true] {
        for seed in 0..4 {
            let model = small(4, use_tconv, seed);
            let seq = random_seq(&mut rng, 1 + seed as usize * 5, 4);
            let out = model.forward_utterance(&seq).unwrap();
            let (emb, scores, logits) = scalar_forward(&model, &seq);
            assert_close(&out.embedding, &emb, 1e-10);
            assert_close(&out.scores, &scores, 1e-10);
            assert_close(&out.class_logits, &logits, 1e-10);
        }
    }
}

#[test]
fn padding_content_never_reaches_the_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let lengths = vec![7, 3, 1, 5];
    let b = lengths.len();
    let t_max = 7;
    let seqs: Vec<Matrix> = lengths.iter().map(|&t| random_seq(&mut rng, t, 3)).collect();
    for use_tconv in [false, true] {
        let model = small(3, use_tconv, 2);
        let mut batch = Matrix::zeros(t_max * b, 3);
        for t in 0..t_max {
            for (bi, s) in seqs.iter().enumerate() {
                let row = batch.row_mut(t * b + bi);
                if t < s.rows() {
                    row.copy_from_slice(s.row(t));
                } else {
                    row.iter_mut().for_each(|v| *v = 1e3 * rng.random_range(-1.0..1.0));
                }
            }
        }
        let mask = SeqMask::new(lengths.clone()).unwrap();
        let padded = model.forward_padded(&batch, &mask).unwrap();
        for (bi, s) in seqs.iter().enumerate() {
            let alone = model.forward_utterance(s).unwrap();
            assert_close(&padded[bi].embedding, &alone.embedding, 1e-12);
            assert_close(&padded[bi].scores, &alone.scores, 1e-12);
        }
    }
}

#[test]
fn frame_order_matters() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = small(3, true, 9);
    let seq = random_seq(&mut rng, 6, 3);
    let rev = Matrix::from_vec(6, 3, (0..6).rev().flat_map(|t| seq.row(t).to_vec()).collect()).unwrap();
    let a = model.forward_utterance(&seq).unwrap();
    let b = model.forward_utterance(&rev).unwrap();
    let diff: f64 = a.embedding.iter().zip(&b.embedding).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-6, "reversed sequence gave the same embedding ({diff})");
}

#[test]
fn identity_kernel_tcgru_equals_gru_on_duplicated_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let d = 3;
    let mut tc = small(d, true, 4);
    tc.set_tconv_params(&DepthwiseTConvParams::identity(d)).unwrap();
    let mut rest = ParamSet::new();
    for (name, t) in tc.params().iter().filter(|(n, _)| !n.starts_with("tconv.")) {
        rest.push(name, t.clone()).unwrap();
    }
    let gru = EmotionModel::from_params(ModelConfig::new(2 * d, false).with_widths(6, 5), rest).unwrap();
    let seq = random_seq(&mut rng, 9, d);
    let doubled = Matrix::from_vec(9, 2 * d, (0..9).flat_map(|t| [seq.row(t), seq.row(t)].concat()).collect()).unwrap();
    let a = tc.forward_utterance(&seq).unwrap();
    let b = gru.forward_utterance(&doubled).unwrap();
    assert_close(&a.embedding, &b.embedding, 1e-12);
    assert_close(&a.scores, &b.scores, 1e-12);
    assert_close(&a.class_logits, &b.class_logits, 1e-12);
}

#[test]
fn zero_parameters_ignore_the_input() {
    let mut model = small(4, true, 1);
    for t in model.params_mut().tensors_mut() {
        t.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for len in [1, 4, 13] {
        let out = model.forward_utterance(&random_seq(&mut rng, len, 4)).unwrap();
        assert!(out.embedding.iter().all(|&v| v == 0.0));
        assert_eq!(out.scores, [0.0; 3]);
    }
}

#[test]
fn repeated_frames_of_a_constant_sequence_converge() {
    // A GRU driven by the same frame approaches a fixed point, so doubling
    // a long constant sequence barely moves the pooled state.
    let model = small(2, false, 6);
    let frame = [0.4, -0.3];
    let seq = |t: usize| Matrix::from_vec(t, 2, frame.repeat(t)).unwrap();
    let a = model.forward_utterance(&seq(400)).unwrap();
    let b = model.forward_utterance(&seq(800)).unwrap();
    assert_close(&a.scores, &b.scores, 1e-2);
}

#[test]
fn parameter_names_follow_the_layer_order() {
    let model = small(3, true, 0);
    let names: Vec<&str> = model.params().names().iter().map(String::as_str).collect();
    assert_eq!(
        names,
        [
            "tconv.kernel", "tconv.bias", "gru0.w", "gru0.u", "gru0.b", "gru1.w", "gru1.u", "gru1.b", "embed.w",
            "embed.b", "regress.w", "regress.b", "classify.w", "classify.b"
        ]
    );
    let report = model.param_report();
    assert_eq!(report.total, model.params().numel());
    assert_eq!(report.heads, 5 * 3 + 3 + 5 * 7 + 7);
    assert_eq!(report.bytes_f32, 4 * report.total);
}

#[test]
fn widths_must_be_positive_and_match() {
    assert!(EmotionModel::new(ModelConfig::new(0, false), 0).is_err());
    let model = small(3, false, 0);
    assert!(model.forward_utterance(&Matrix::zeros(4, 5)).is_err());
    assert!(model.forward_utterance(&Matrix::zeros(0, 3)).is_err());
}
