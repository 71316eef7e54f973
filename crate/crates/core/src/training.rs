//! Adam, the multi-task epoch loop, early stopping and teacher caching.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{inference_batches, make_batches, Dataset, DEFAULT_BATCH_SIZE};
use crate::error::{Error, Result};
use crate::losses::{
    ccc_loss, ccc_per_dim, cross_entropy, distillation_loss, gamma_confidence, total_loss, CccWeights, LossTerms,
    Schedule, ScheduleState, LABEL_RANGE,
};
use crate::model::EmotionModel;
use crate::nnstack::{Graph, ParamSet};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub config: AdamConfig,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl OptState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros = || params.tensors().iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect();
        OptState {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// Bias-corrected Adam update. Non-finite gradients abort the step untouched.
pub fn adam_step(params: &mut ParamSet, grads: &[Matrix], state: &mut OptState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (i, (p, g)) in params.tensors().iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", format!("tensor {i}: {:?} vs grad {:?}", p.shape(), g.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of `{}`", params.names()[i])));
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(beta1, t as f64);
    let bc2 = 1.0 - libm::pow(beta2, t as f64);
    for (i, g) in grads.iter().enumerate() {
        let p = params.get_mut(i).as_mut_slice();
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        for (k, &gk) in g.as_slice().iter().enumerate() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
            v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= lr * m_hat / (libm::sqrt(v_hat) + eps);
        }
    }
    Ok(())
}

/// Rescale `grads` so their global L2 norm is at most `max_norm`; reports whether it clipped.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> bool {
    let norm = libm::sqrt(grads.iter().map(Matrix::sum_squares).sum::<f64>());
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.as_mut_slice().iter_mut().for_each(|x| *x *= s);
        }
        true
    } else {
        false
    }
}

/// Frozen teacher outputs for one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherEntry {
    pub embedding: Vec<f64>,
    pub scores: [f64; 3],
    pub gamma: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TeacherCache {
    dim: usize,
    entries: BTreeMap<String, TeacherEntry>,
}

impl TeacherCache {
    pub fn new(dim: usize) -> Self {
        TeacherCache {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn insert(&mut self, id: String, entry: TeacherEntry) -> Result<()> {
        if entry.embedding.len() != self.dim {
            return Err(Error::shape(
                "TeacherCache",
                format!("embedding of `{id}` has {} values, cache holds {}", entry.embedding.len(), self.dim),
            ));
        }
        if !entry.embedding.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("teacher embedding of `{id}`")));
        }
        self.entries.insert(id, entry);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&TeacherEntry> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in id order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &TeacherEntry)> {
        self.entries.iter()
    }

    pub fn mean_gamma(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.values().map(|e| e.gamma).sum::<f64>() / self.entries.len() as f64
    }

    /// Teacher embeddings and γ for a batch of ids, in order.
    pub fn lookup(&self, ids: &[String]) -> Result<(Matrix, Vec<f64>)> {
        let mut emb = Matrix::zeros(ids.len(), self.dim);
        let mut gamma = Vec::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            let e = self.entries.get(id).ok_or_else(|| Error::MissingTeacher(id.clone()))?;
            emb.row_mut(i).copy_from_slice(&e.embedding);
            gamma.push(e.gamma);
        }
        Ok((emb, gamma))
    }
}

/// One forward pass of the teacher per utterance; γ from its residuals against the labels.
pub fn prepare_teacher_cache(teacher: &EmotionModel, data: &Dataset) -> Result<TeacherCache> {
    let mut cache = TeacherCache::new(teacher.config().embed_dim);
    for batch in inference_batches(data, DEFAULT_BATCH_SIZE)? {
        let outs = teacher.forward_padded(&batch.features, &batch.mask)?;
        for (b, out) in outs.into_iter().enumerate() {
            let labels = [batch.labels.get(b, 0), batch.labels.get(b, 1), batch.labels.get(b, 2)];
            let gamma = gamma_confidence(&labels, &out.scores, LABEL_RANGE)?;
            cache.insert(
                batch.ids[b].clone(),
                TeacherEntry {
                    embedding: out.embedding,
                    scores: out.scores,
                    gamma,
                },
            )?;
        }
    }
    Ok(cache)
}

/// Per-epoch training log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub epoch: usize,
    pub kappa: f64,
    pub lambda: f64,
    pub l_ccc: f64,
    pub l_ce: f64,
    pub l_dis: f64,
    pub total: f64,
    pub mean_gamma: f64,
    pub train_ccc: [f64; 3],
    pub val_ccc: [f64; 3],
    pub clipped_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub weights: CccWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: DEFAULT_BATCH_SIZE,
            adam: AdamConfig::default(),
            clip_norm: 5.0,
            weights: CccWeights::default(),
        }
    }
}

/// Gradients of the combined objective on one batch.
pub struct BatchGrads {
    pub grads: Vec<Matrix>,
    pub terms: [f64; 4],
    pub scores: Matrix,
}

/// Forward + backward of the multi-task (and optionally distillation) objective on one batch.
pub fn batch_gradients(
    model: &EmotionModel,
    batch: &crate::data::Batch,
    state: &ScheduleState,
    teacher: Option<&TeacherCache>,
    weights: CccWeights,
) -> Result<BatchGrads> {
    let mut g = Graph::new();
    let fwd = model.forward_batch(&mut g, &batch.features, &batch.mask, true)?;
    let l_ccc = ccc_loss(&mut g, fwd.scores, &batch.labels, weights)?;
    let l_ce = cross_entropy(&mut g, fwd.logits, &batch.classes)?;
    let l_dis = match teacher {
        Some(cache) => {
            let (t_emb, gamma) = cache.lookup(&batch.ids)?;
            Some(distillation_loss(&mut g, &t_emb, fwd.embedding, &gamma)?)
        }
        None => None,
    };
    let root = total_loss(
        &mut g,
        LossTerms {
            ccc: l_ccc,
            ce: l_ce,
            distill: l_dis,
        },
        state,
    )?;
    let total = g.scalar_value(root);
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("loss on batch starting with `{}`", batch.ids[0])));
    }
    g.backward(root)?;
    Ok(BatchGrads {
        grads: fwd.params.iter().map(|&v| g.grad_or_zeros(v)).collect(),
        terms: [
            g.scalar_value(l_ccc),
            g.scalar_value(l_ce),
            l_dis.map_or(0.0, |v| g.scalar_value(v)),
            total,
        ],
        scores: g.value(fwd.scores).clone(),
    })
}

/// One pass over `batches`: forward, combined loss, backward, clip, Adam.
///
/// `val_ccc` of the returned record is left at zero for the caller to fill.
pub fn train_epoch(
    model: &mut EmotionModel,
    batches: &[crate::data::Batch],
    opt: &mut OptState,
    state: ScheduleState,
    teacher: Option<&TeacherCache>,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let mut sums = [0.0; 4];
    let mut n = 0usize;
    let mut gamma_sum = 0.0;
    let mut clipped = 0;
    let mut preds: Vec<f64> = Vec::new();
    let mut labels: Vec<f64> = Vec::new();
    for batch in batches {
        let mut bg = batch_gradients(model, batch, &state, teacher, cfg.weights)?;
        if clip_global_norm(&mut bg.grads, cfg.clip_norm) {
            clipped += 1;
        }
        adam_step(model.params_mut(), &bg.grads, opt)?;
        let b = batch.size();
        for (s, t) in sums.iter_mut().zip(bg.terms) {
            *s += t * b as f64;
        }
        n += b;
        if let Some(cache) = teacher {
            gamma_sum += cache.lookup(&batch.ids)?.1.iter().sum::<f64>();
        }
        preds.extend_from_slice(bg.scores.as_slice());
        labels.extend_from_slice(batch.labels.as_slice());
    }
    let nf = n.max(1) as f64;
    let train_ccc = if n >= 2 {
        ccc_per_dim(&Matrix::from_vec(n, 3, preds)?, &Matrix::from_vec(n, 3, labels)?)?
    } else {
        [0.0; 3]
    };
    let (kappa, lambda) = if teacher.is_some() { (state.kappa, state.lambda) } else { (1.0, 0.0) };
    Ok(LossBreakdown {
        epoch: state.epoch,
        kappa,
        lambda,
        l_ccc: sums[0] / nf,
        l_ce: sums[1] / nf,
        l_dis: sums[2] / nf,
        total: sums[3] / nf,
        mean_gamma: if teacher.is_some() { gamma_sum / nf } else { 0.0 },
        train_ccc,
        val_ccc: [0.0; 3],
        clipped_steps: clipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_epochs: usize,
    pub patience: usize,
    /// Early stopping is not considered before this many epochs have run.
    pub min_epochs: usize,
    pub seed: u64,
    pub schedule: Schedule,
    pub train: TrainConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_epochs: 100,
            patience: 10,
            min_epochs: 0,
            seed: 0,
            schedule: Schedule::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: Vec<LossBreakdown>,
    pub best_val_ccc: [f64; 3],
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Mean of the three validation CCCs; the early-stopping criterion.
pub fn mean_ccc(c: &[f64; 3]) -> f64 {
    (c[0] + c[1] + c[2]) / 3.0
}

/// Train with per-epoch validation and early stopping.
///
/// On return `model` holds the parameters of the best validation epoch.
/// `on_epoch` sees every record as soon as it is complete.
pub fn fit(
    model: &mut EmotionModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &FitConfig,
    teacher: Option<&TeacherCache>,
    mut on_epoch: impl FnMut(&LossBreakdown),
) -> Result<FitReport> {
    if train.len() < 2 || val.len() < 2 {
        return Err(Error::Input(format!(
            "train and validation splits need at least 2 utterances (got {} and {})",
            train.len(),
            val.len()
        )));
    }
    if let Some(cache) = teacher {
        if cache.dim() != model.config().embed_dim {
            return Err(Error::shape(
                "fit",
                format!("teacher embeddings are {}-dim, student {}", cache.dim(), model.config().embed_dim),
            ));
        }
        if let Some(e) = train.examples().iter().find(|e| cache.get(&e.id).is_none()) {
            return Err(Error::MissingTeacher(e.id.clone()));
        }
    }
    let mut opt = OptState::new(model.params(), cfg.train.adam);
    let val_batches = inference_batches(val, cfg.train.batch_size)?;
    let mut epochs = Vec::new();
    let mut best: Option<(f64, [f64; 3], usize, ParamSet)> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        let batches = make_batches(train, cfg.train.batch_size, epoch_seed(cfg.seed, epoch))?;
        let state = cfg.schedule.at(epoch);
        let mut rec = match train_epoch(model, &batches, &mut opt, state, teacher, &cfg.train) {
            Ok(r) => r,
            Err(Error::NonFinite(what)) => {
                return Err(Error::Diverged {
                    epoch,
                    last_good: best.as_ref().map(|b| b.2),
                    detail: what,
                })
            }
            Err(e) => return Err(e),
        };
        rec.val_ccc = evaluate_batches(model, &val_batches)?;
        let score = mean_ccc(&rec.val_ccc);
        on_epoch(&rec);
        epochs.push(rec.clone());
        if !score.is_finite() {
            return Err(Error::Diverged {
                epoch,
                last_good: best.as_ref().map(|b| b.2),
                detail: "validation CCC".into(),
            });
        }
        match &mut best {
            Some(b) if score <= b.0 => since_best += 1,
            _ => {
                best = Some((score, rec.val_ccc, epoch, model.params().clone()));
                since_best = 0;
            }
        }
        if since_best > cfg.patience && epoch + 1 >= cfg.min_epochs {
            stopped_early = epoch + 1 < cfg.max_epochs;
            break;
        }
    }
    let (_, best_val_ccc, best_epoch, params) = best.ok_or_else(|| Error::Config("max_epochs must be positive".into()))?;
    model.params_mut().copy_from(&params)?;
    Ok(FitReport {
        epochs,
        best_val_ccc,
        best_epoch,
        stopped_early,
    })
}

/// Seed of the batch shuffle for one epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64)
}

/// Split-level per-dimension CCC over pre-built inference batches.
pub fn evaluate_batches(model: &EmotionModel, batches: &[crate::data::Batch]) -> Result<[f64; 3]> {
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for b in batches {
        for out in model.forward_padded(&b.features, &b.mask)? {
            preds.extend_from_slice(&out.scores);
        }
        labels.extend_from_slice(b.labels.as_slice());
    }
    let n = preds.len() / 3;
    ccc_per_dim(&Matrix::from_vec(n, 3, preds)?, &Matrix::from_vec(n, 3, labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn adam_first_step() {
        let mut p = ParamSet::new();
        p.push("x", Matrix::scalar(1.0)).unwrap();
        let mut st = OptState::new(&p, AdamConfig::default());
        adam_step(&mut p, &[Matrix::scalar(0.1)], &mut st).unwrap();
        let delta = p.get(0).get(0, 0) - 1.0;
        // m_hat = 0.1, v_hat = 0.01 -> -lr * 0.1 / (0.1 + 1e-8)
        let want = -0.0005 * 0.1 / (0.1 + 1e-8);
        assert!((delta - want).abs() < 1e-15, "{delta} vs {want}");
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_grad_is_noop_and_rejects_nan() {
        let mut p = ParamSet::new();
        p.push("x", Matrix::from_rows(&[&[1.0, -2.0]]).unwrap()).unwrap();
        let before = p.clone();
        let mut st = OptState::new(&p, AdamConfig::default());
        adam_step(&mut p, &[Matrix::zeros(1, 2)], &mut st).unwrap();
        assert_eq!(p, before);
        let err = adam_step(&mut p, &[Matrix::from_rows(&[&[f64::NAN, 0.0]]).unwrap()], &mut st);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = ParamSet::new();
        p.push("theta", Matrix::filled(1, 4, 1.0)).unwrap();
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut st = OptState::new(&p, cfg);
        for _ in 0..2000 {
            let grad = p.get(0).clone();
            adam_step(&mut p, &[grad], &mut st).unwrap();
        }
        let norm = libm::sqrt(p.get(0).sum_squares());
        assert!(norm < 1e-3, "norm {norm}");
    }

    #[test]
    fn clipping() {
        let mut g = vec![Matrix::filled(1, 4, 5.0)];
        assert!(clip_global_norm(&mut g, 5.0));
        assert!((libm::sqrt(g[0].sum_squares()) - 5.0).abs() < 1e-12);
        assert!(!clip_global_norm(&mut g, 6.0));
    }

    #[test]
    fn cache_lookup_reports_missing_id() {
        let mut c = TeacherCache::new(2);
        c.insert(
            "a".into(),
            TeacherEntry {
                embedding: vec![1.0, 0.0],
                scores: [4.0; 3],
                gamma: 0.5,
            },
        )
        .unwrap();
        assert!(c
            .insert(
                "b".into(),
                TeacherEntry {
                    embedding: vec![1.0],
                    scores: [4.0; 3],
                    gamma: 0.5
                }
            )
            .is_err());
        assert_eq!(c.lookup(&["z".into()]), Err(Error::MissingTeacher("z".into())));
    }
}
