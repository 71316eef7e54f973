//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use emodim_core::data::{Dataset, FeatureSequence, Split};
use emodim_core::losses::{
    ccc_loss, cross_entropy, distillation_loss, total_loss, CccWeights, LossTerms, ScheduleState,
};
use emodim_core::model::{EmotionModel, ModelConfig};
use emodim_core::nnstack::{check_graph_report, finite_diff_report, gru_cell, FdReport, Graph, SeqMask, Var};
use emodim_core::synth::SynthCorpus;
use emodim_core::{Matrix, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-5;

pub fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduce any tensor to a scalar through fixed random weights.
fn probe(g: &mut Graph, v: Var, w: &Matrix) -> Result<Var> {
    let c = g.constant(w.clone());
    let m = g.mul(v, c)?;
    Ok(g.sum(m))
}

/// Rows with entries in [-4, 4] and norm at least 2. Cosine curvature grows
/// like 1/|s|^2, so small rows make central differences, not the analytic
/// gradient, the dominant error.
fn away_from_origin(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let mut m = rand_matrix(rng, rows, cols, -4.0, 4.0);
    for r in 0..rows {
        let norm = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 2.0 {
            m.row_mut(r).iter_mut().for_each(|v| *v *= 2.0 / norm);
        }
    }
    m
}

fn classes(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..7)).collect()
}

type Case = fn(&mut ChaCha8Rng) -> Result<FdReport>;

fn case_elementwise(rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let pts = [rand_matrix(rng, 3, 4, -1.0, 1.0), rand_matrix(rng, 3, 4, -1.0, 1.0)];
    let w = rand_matrix(rng, 3, 4, -1.0, 1.0);
    check_graph_report(&pts, FD_EPS, |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(v[0], v[1])?;
        let p = g.mul(s, d)?;
        let p = g.scale(p, 0.7);
        let c = g.concat_cols(p, v[1])?;
        let wc = g.constant(Matrix::from_vec(3, 8, w.as_slice().iter().chain(w.as_slice()).copied().collect())?);
        let m = g.mul(c, wc)?;
        Ok(g.sum(m))
    })
}

fn case_dense(rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let pts = [
        rand_matrix(rng, 4, 3, -1.0, 1.0),
        rand_matrix(rng, 3, 5, -1.0, 1.0),
        rand_matrix(rng, 1, 5, -1.0, 1.0),
    ];
    let w = rand_matrix(rng, 4, 5, -1.0, 1.0);
    check_graph_report(&pts, FD_EPS, |g, v| {
        let m = g.matmul(v[0], v[1])?;
        let a = g.add_row(m, v[2])?;
        let t = g.tanh(a);
        let s = g.sigmoid(a);
        let o = g.add(t, s)?;
        probe(g, o, &w)
    })
}

fn case_gru_cell(rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let (b, d, h) = (2, 3, 4);
    let pts = [
        rand_matrix(rng, b, d, -1.0, 1.0),
        rand_matrix(rng, b, h, -1.0, 1.0),
        rand_matrix(rng, d, 3 * h, -0.5, 0.5),
        rand_matrix(rng, h, 3 * h, -0.5, 0.5),
        rand_matrix(rng, 1, 3 * h, -0.5, 0.5),
    ];
    let w = rand_matrix(rng, b, h, -1.0, 1.0);
    check_graph_report(&pts, FD_EPS, |g, v| {
        let out = gru_cell(g, v[0], v[1], v[2], v[3], v[4])?;
        probe(g, out, &w)
    })
}

fn ragged_mask(rng: &mut ChaCha8Rng, b: usize, t_max: usize) -> SeqMask {
    let mut lengths: Vec<usize> = (0..b).map(|_| rng.random_range(1..=t_max)).collect();
    lengths[0] = t_max;
    SeqMask::new(lengths).unwrap()
}

fn case_gru_sequence(rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let (b, t, d, h) = (3, 5, 3, 4);
    let mask = ragged_mask(rng, b, t);
    let pts = [
        rand_matrix(rng, t * b, d, -0.5, 0.5),
        rand_matrix(rng, d, 3 * h, -0.3, 0.3),
        rand_matrix(rng, h, 3 * h, -0.3, 0.3),
        rand_matrix(rng, 1, 3 * h, -0.5, 0.5),
    ];
    let w = rand_matrix(rng, t * b, h, -1.0, 1.0);
    check_graph_report(&pts, FD_EPS, |g, v| {
        let out = g.gru_sequence(v[0], v[1], v[2], v[3], &mask)?;
        probe(g, out, &w)
    })
}

fn case_tconv(rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let (b, t, d) = (3, 6, 4);
    let mask = ragged_mask(rng, b, t);
    let pts = [
        rand_matrix(rng, t * b, d, -1.0, 1.0),
        rand_matrix(rng, d, 3, -1.0, 1.0),
        rand_matrix(rng, 1, d, -1.0, 1.0),
    ];
    let w = rand_matrix(rng, t * b, d, -1.0, 1.0);
    check_graph_report(&pts, FD_EPS, |g, v| {
        let out = g.tconv(v[0], v[1], v[2], &mask)?;
        let sq = g.mul(out, out)?;
        probe(g, sq, &w)
    })
}

fn case_masked_mean(rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let (b, t, d) = (4, 5, 3);
    let mask = ragged_mask(rng, b, t);
    let pts = [rand_matrix(rng, t * b, d, -1.0, 1.0)];
    let w = rand_matrix(rng, b, d, -1.0, 1.0);
    check_graph_report(&pts, FD_EPS, |g, v| {
        let m = g.masked_mean(v[0], &mask)?;
        let t = g.tanh(m);
        probe(g, t, &w)
    })
}

fn case_ccc(rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let n = rng.random_range(8..=32);
    let labels = rand_matrix(rng, n, 3, 1.0, 7.0);
    let weights = CccWeights {
        alpha: rng.random_range(0.0..0.5),
        beta: rng.random_range(0.0..0.5),
    };
    check_graph_report(&[rand_matrix(rng, n, 3, 1.0, 7.0)], FD_EPS, |g, v| ccc_loss(g, v[0], &labels, weights))
}

fn case_cross_entropy(rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let n = rng.random_range(1..6);
    let cls = classes(rng, n);
    check_graph_report(&[rand_matrix(rng, n, 7, -3.0, 3.0)], FD_EPS, |g, v| cross_entropy(g, v[0], &cls))
}

fn case_distillation(rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let n = rng.random_range(1..6);
    let teacher = rand_matrix(rng, n, 5, -1.0, 1.0);
    let gamma: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
    check_graph_report(&[away_from_origin(rng, n, 5)], FD_EPS, |g, v| {
        distillation_loss(g, &teacher, v[0], &gamma)
    })
}

fn case_total(rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let n = 8;
    let labels = rand_matrix(rng, n, 3, 1.0, 7.0);
    let cls = classes(rng, n);
    let teacher = rand_matrix(rng, n, 5, -1.0, 1.0);
    let gamma: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
    let state = ScheduleState {
        epoch: 0,
        kappa: rng.random_range(0.0..1.0),
        lambda: rng.random_range(0.0..1.0),
    };
    let pts = [
        rand_matrix(rng, n, 3, 1.0, 7.0),
        rand_matrix(rng, n, 7, -2.0, 2.0),
        away_from_origin(rng, n, 5),
    ];
    check_graph_report(&pts, FD_EPS, |g, v| {
        let terms = LossTerms {
            ccc: ccc_loss(g, v[0], &labels, CccWeights::default())?,
            ce: cross_entropy(g, v[1], &cls)?,
            distill: Some(distillation_loss(g, &teacher, v[2], &gamma)?),
        };
        total_loss(g, terms, &state)
    })
}

/// Whole TCGRU model under the full objective, all parameters at once.
pub fn case_model(rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let (b, t, d) = (3, 4, 2);
    let cfg = ModelConfig::new(d, true).with_widths(3, 3);
    let mut model = EmotionModel::new(cfg, rng.random())?;
    // keep student embeddings away from the origin, where cosine is singular
    let eb = model.params().index_of("embed.b").expect("embedding bias");
    *model.params_mut().get_mut(eb) = rand_matrix(rng, 1, 3, -1.0, 1.0);
    let mask = ragged_mask(rng, b, t);
    let x = rand_matrix(rng, t * b, d, -1.0, 1.0);
    let labels = rand_matrix(rng, b, 3, 1.0, 7.0);
    let cls = classes(rng, b);
    let teacher = rand_matrix(rng, b, 3, -1.0, 1.0);
    let gamma = vec![1.0, 0.5, 0.25];
    let state = ScheduleState {
        epoch: 0,
        kappa: 0.5,
        lambda: 0.5,
    };
    let objective = |g: &mut Graph, m: &EmotionModel, trainable: bool| -> Result<(Var, Vec<Var>)> {
        let out = m.forward_batch(g, &x, &mask, trainable)?;
        let terms = LossTerms {
            ccc: ccc_loss(g, out.scores, &labels, CccWeights::default())?,
            ce: cross_entropy(g, out.logits, &cls)?,
            distill: Some(distillation_loss(g, &teacher, out.embedding, &gamma)?),
        };
        Ok((total_loss(g, terms, &state)?, out.params))
    };
    let mut g = Graph::new();
    let (root, params) = objective(&mut g, &model, true)?;
    g.backward(root)?;
    let analytic: Vec<Matrix> = params.iter().map(|&p| g.grad_or_zeros(p)).collect();
    let mut probe_model = model.clone();
    finite_diff_report(model.params().tensors(), &analytic, FD_EPS, |p| {
        for (dst, src) in probe_model.params_mut().tensors_mut().iter_mut().zip(p) {
            *dst = src.clone();
        }
        let mut g = Graph::new();
        let (root, _) = objective(&mut g, &probe_model, false)?;
        Ok(g.scalar_value(root))
    })
}

/// Layer primitives and losses, each checked with the central-difference
/// checker. The fused GRU sequence op is verified against an unrolled chain
/// of GRU cells instead, and the whole model with a five-point stencil.
pub const GRADIENT_CASES: [(&str, Case); 9] = [
    ("elementwise ops", case_elementwise),
    ("dense + tanh/sigmoid", case_dense),
    ("GRU cell", case_gru_cell),
    ("temporal conv (masked)", case_tconv),
    ("masked mean pooling", case_masked_mean),
    ("CCC loss", case_ccc),
    ("cross-entropy", case_cross_entropy),
    ("distillation loss", case_distillation),
    ("total loss", case_total),
];

#[derive(Debug, Clone, Copy)]
pub struct CaseResult {
    pub name: &'static str,
    /// Worst per-coordinate relative error over all points.
    pub max_relative: f64,
    /// Worst norm-wise relative error over all points.
    pub normwise: f64,
}

/// Worst errors of every case over `points` random points.
pub fn gradient_suite(points: usize, seed: u64) -> Vec<CaseResult> {
    GRADIENT_CASES
        .iter()
        .enumerate()
        .map(|(i, (name, case))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let mut res = CaseResult {
                name,
                max_relative: 0.0,
                normwise: 0.0,
            };
            for _ in 0..points {
                let r = case(&mut rng).expect(name);
                res.max_relative = res.max_relative.max(r.max_relative);
                res.normwise = res.normwise.max(r.normwise);
            }
            res
        })
        .collect()
}

/// Neumaier-compensated sum.
fn compensated_sum(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        c += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + c
}

/// Independent CCC: compensated two-pass moments.
pub fn ccc_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = compensated_sum(x.iter().copied()) / n;
    let my = compensated_sum(y.iter().copied()) / n;
    let vx = compensated_sum(x.iter().map(|a| (a - mx) * (a - mx))) / n;
    let vy = compensated_sum(y.iter().map(|b| (b - my) * (b - my))) / n;
    let cov = compensated_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my))) / n;
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    2.0 * cov / (vx + vy + (mx - my) * (mx - my))
}

/// One split of a synthetic corpus, read from the student stream or a teacher view.
pub fn split_of(c: &SynthCorpus, split: Split, streams: &[&[FeatureSequence]]) -> Dataset {
    let idx: Vec<usize> = (0..c.records.len()).filter(|&i| c.records[i].split == split).collect();
    let recs: Vec<_> = idx.iter().map(|&i| &c.records[i]).collect();
    let feats = idx
        .iter()
        .map(|&i| {
            let parts: Vec<FeatureSequence> = streams.iter().map(|s| s[i].clone()).collect();
            if parts.len() == 1 {
                parts.into_iter().next().unwrap()
            } else {
                emodim_core::data::fuse_streams(&parts).unwrap()
            }
        })
        .collect();
    Dataset::from_records(&recs, feats).unwrap()
}
