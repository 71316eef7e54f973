//! Split-level reports: CCC per dimension, valence-binned RMSE, embeddings.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{inference_batches, Dataset, DEFAULT_BATCH_SIZE};
use crate::error::{Error, Result};
use crate::losses::ccc;
use crate::model::EmotionModel;
use crate::VAL;

/// Model output for one utterance next to its labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub scores: [f64; 3],
    pub labels: [f64; 3],
    pub embedding: Vec<f64>,
}

/// Run the model over a split; results sorted by id.
pub fn predict(model: &EmotionModel, data: &Dataset) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(data.len());
    for batch in inference_batches(data, DEFAULT_BATCH_SIZE)? {
        let outs = model.forward_padded(&batch.features, &batch.mask)?;
        for (b, o) in outs.into_iter().enumerate() {
            let l = batch.labels.row(b);
            out.push(Prediction {
                id: batch.ids[b].clone(),
                scores: o.scores,
                labels: [l[0], l[1], l[2]],
                embedding: o.embedding,
            });
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// Per-dimension CCC over a whole set of predictions.
pub fn ccc_report(preds: &[Prediction]) -> Result<[f64; 3]> {
    if preds.len() < 2 {
        return Err(Error::Input(format!("evaluation needs at least 2 utterances, got {}", preds.len())));
    }
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let x: Vec<f64> = preds.iter().map(|p| p.scores[k]).collect();
        let y: Vec<f64> = preds.iter().map(|p| p.labels[k]).collect();
        *o = ccc(&x, &y)?;
    }
    Ok(out)
}

/// CCC of activation, valence and dominance over an entire split.
pub fn evaluate(model: &EmotionModel, data: &Dataset) -> Result<[f64; 3]> {
    if data.len() < 2 {
        return Err(Error::Input(format!("evaluation needs at least 2 utterances, got {}", data.len())));
    }
    ccc_report(&predict(model, data)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRmse {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// `None` for an empty bin.
    pub rmse: Option<f64>,
    pub mse: Option<f64>,
}

/// Index of the equal-width bin over `[1, 7]` holding `v`; 7 lands in the last bin.
pub fn valence_bin(v: f64, n_bins: usize) -> usize {
    let width = 6.0 / n_bins as f64;
    let idx = libm::floor((v - 1.0) / width);
    if idx < 0.0 {
        0
    } else {
        (idx as usize).min(n_bins - 1)
    }
}

/// RMSE of valence estimates grouped by true-valence interval.
pub fn rmse_by_valence_bin(preds: &[Prediction], n_bins: usize) -> Result<Vec<BinRmse>> {
    if n_bins < 2 {
        return Err(Error::Input(format!("need at least 2 bins, got {n_bins}")));
    }
    let mut sq = alloc::vec![0.0; n_bins];
    let mut counts = alloc::vec![0usize; n_bins];
    for p in preds {
        let b = valence_bin(p.labels[VAL], n_bins);
        let e = p.scores[VAL] - p.labels[VAL];
        sq[b] += e * e;
        counts[b] += 1;
    }
    let width = 6.0 / n_bins as f64;
    Ok((0..n_bins)
        .map(|b| {
            let mse = (counts[b] > 0).then(|| sq[b] / counts[b] as f64);
            BinRmse {
                lo: 1.0 + b as f64 * width,
                hi: 1.0 + (b + 1) as f64 * width,
                count: counts[b],
                rmse: mse.map(libm::sqrt),
                mse,
            }
        })
        .collect())
}

/// Valence MSE over all predictions.
pub fn valence_mse(preds: &[Prediction]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds
        .iter()
        .map(|p| {
            let e = p.scores[VAL] - p.labels[VAL];
            e * e
        })
        .sum::<f64>()
        / preds.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn pred(v_true: f64, v_est: f64) -> Prediction {
        Prediction {
            id: String::new(),
            scores: [4.0, v_est, 4.0],
            labels: [4.0, v_true, 4.0],
            embedding: vec![],
        }
    }

    #[test]
    fn bins_cover_scale() {
        assert_eq!(valence_bin(1.0, 6), 0);
        assert_eq!(valence_bin(1.999, 6), 0);
        assert_eq!(valence_bin(2.0, 6), 1);
        assert_eq!(valence_bin(7.0, 6), 5);
    }

    #[test]
    fn perfect_and_offset_predictors() {
        let preds: Vec<Prediction> = [1.5, 2.5, 6.9, 7.0].iter().map(|&v| pred(v, v)).collect();
        let bins = rmse_by_valence_bin(&preds, 6).unwrap();
        assert!(bins.iter().filter(|b| b.count > 0).all(|b| b.rmse == Some(0.0)));
        assert!(bins.iter().filter(|b| b.count == 0).all(|b| b.rmse.is_none()));

        let preds: Vec<Prediction> = [1.5, 2.5, 6.9].iter().map(|&v| pred(v, v + 1.0)).collect();
        for b in rmse_by_valence_bin(&preds, 6).unwrap().iter().filter(|b| b.count > 0) {
            assert!((b.rmse.unwrap() - 1.0).abs() < 1e-12);
        }
        assert!(rmse_by_valence_bin(&preds, 1).is_err());
    }

    #[test]
    fn ccc_report_needs_two() {
        assert!(ccc_report(&[pred(1.0, 1.0)]).is_err());
    }
}
