//! Evaluation reports (table + JSON) and embedding export (CSV).

use std::fmt::Write as _;
use std::path::Path;

use emodim_core::data::Split;
use emodim_core::evaluation::{ccc_report, rmse_by_valence_bin, valence_mse, BinRmse, Prediction};
use serde::{Deserialize, Serialize};

use crate::error::{EmodimError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CccTriple {
    pub act: f64,
    pub val: f64,
    pub dom: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub utterances: usize,
    pub ccc: CccTriple,
    pub valence_mse: f64,
    pub valence_bins: Vec<BinRmse>,
}

impl EvalReport {
    pub fn from_predictions(split: Split, preds: &[Prediction], n_bins: usize) -> Result<Self> {
        let [act, val, dom] = ccc_report(preds)?;
        Ok(EvalReport {
            split,
            utterances: preds.len(),
            ccc: CccTriple { act, val, dom },
            valence_mse: valence_mse(preds),
            valence_bins: rmse_by_valence_bin(preds, n_bins)?,
        })
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "split {} ({} utterances)", self.split.as_str(), self.utterances);
        let _ = writeln!(s, "{:<12}{:>10}{:>10}{:>10}", "", "act", "val", "dom");
        let _ = writeln!(s, "{:<12}{:>10.4}{:>10.4}{:>10.4}", "CCC", self.ccc.act, self.ccc.val, self.ccc.dom);
        let _ = writeln!(s, "\nvalence RMSE by true-valence interval");
        for b in &self.valence_bins {
            let rmse = b.rmse.map_or_else(|| "-".to_string(), |r| format!("{r:.4}"));
            let _ = writeln!(s, "  [{:.2}, {:.2}) {:>6} {:>10}", b.lo, b.hi, b.count, rmse);
        }
        let _ = writeln!(s, "  overall MSE {:.4}", self.valence_mse);
        s
    }
}

/// CSV bytes: header `id,act,val,dom,e0..`, one row per prediction in the given order.
pub fn embeddings_csv(preds: &[Prediction]) -> Result<Vec<u8>, csv::Error> {
    let width = preds.first().map_or(0, |p| p.embedding.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "act".into(), "val".into(), "dom".into()];
    header.extend((0..width).map(|i| format!("e{i}")));
    w.write_record(&header)?;
    for p in preds {
        let mut row = vec![p.id.clone()];
        row.extend(p.labels.iter().map(f64::to_string));
        row.extend(p.embedding.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
}

pub fn write_embeddings(path: &Path, preds: &[Prediction]) -> Result<()> {
    let bytes = embeddings_csv(preds).map_err(|source| EmodimError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    crate::write_bytes(path, &bytes)
}
