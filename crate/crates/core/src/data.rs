//! Feature sequences, utterance records, stream fusion and batching.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnstack::SeqMask;
use crate::tensor::Matrix;

/// Frame period of every feature stream the pipeline produces.
pub const DEFAULT_FRAME_PERIOD_MS: f32 = 20.0;
/// Utterances whose lengths differ by at most this many frames share a bucket.
pub const BUCKET_TOLERANCE: usize = 50;
/// Largest frame-count difference tolerated when fusing streams.
pub const FUSE_MAX_SKEW: usize = 2;
pub const DEFAULT_BATCH_SIZE: usize = 32;

/// `frames x dim` per-frame features stored at 32 bits.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    dim: usize,
    frames: usize,
    frame_period_ms: f32,
    data: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(dim: usize, frames: usize, frame_period_ms: f32, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Input("feature dimension must be positive".into()));
        }
        if frames == 0 {
            return Err(Error::Input("feature sequence must have at least one frame".into()));
        }
        if !(frame_period_ms > 0.0) {
            return Err(Error::Input(format!("frame period must be positive, got {frame_period_ms}")));
        }
        if data.len() != dim * frames {
            return Err(Error::shape(
                "FeatureSequence",
                format!("{} values for {frames} frames of dim {dim}", data.len()),
            ));
        }
        Ok(FeatureSequence {
            dim,
            frames,
            frame_period_ms,
            data,
        })
    }

    /// Narrow a 64-bit matrix to a stored sequence.
    pub fn from_matrix(m: &Matrix, frame_period_ms: f32) -> Result<Self> {
        let data = m.as_slice().iter().map(|&v| v as f32).collect();
        FeatureSequence::new(m.cols(), m.rows(), frame_period_ms, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn frame_period_ms(&self) -> f32 {
        self.frame_period_ms
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    /// Promote to 64-bit for training and inference.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.frames, self.dim, self.data.iter().map(|&v| v as f64).collect()).expect("sized")
    }
}

/// Frame-wise concatenation of several streams of the same utterance.
///
/// The result is truncated to the shortest stream; streams may differ by at
/// most [`FUSE_MAX_SKEW`] frames.
pub fn fuse_streams(seqs: &[FeatureSequence]) -> Result<FeatureSequence> {
    if seqs.len() < 2 {
        return Err(Error::Input(format!("fusion needs at least 2 streams, got {}", seqs.len())));
    }
    let period = seqs[0].frame_period_ms;
    if let Some(s) = seqs.iter().find(|s| s.frame_period_ms != period) {
        return Err(Error::Input(format!(
            "frame periods differ: {period} ms vs {} ms",
            s.frame_period_ms
        )));
    }
    let min = seqs.iter().map(|s| s.frames).min().unwrap_or(0);
    let max = seqs.iter().map(|s| s.frames).max().unwrap_or(0);
    if max - min > FUSE_MAX_SKEW {
        return Err(Error::Input(format!(
            "stream lengths {min}..{max} differ by more than {FUSE_MAX_SKEW} frames"
        )));
    }
    let dim: usize = seqs.iter().map(|s| s.dim).sum();
    let mut data = Vec::with_capacity(dim * min);
    for t in 0..min {
        for s in seqs {
            data.extend_from_slice(s.frame(t));
        }
    }
    FeatureSequence::new(dim, min, period, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split `{other}`"))),
        }
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub feature_paths: Vec<String>,
    pub act: f64,
    pub val: f64,
    pub dom: f64,
    pub emo_class: usize,
    pub split: Split,
}

impl UtteranceRecord {
    pub fn labels(&self) -> [f64; 3] {
        [self.act, self.val, self.dom]
    }
}

/// Check manifest invariants: unique ids, labels in [1, 7], class in [0, 7).
pub fn validate_manifest(records: &[UtteranceRecord]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Input(format!("duplicate utterance id `{}`", r.id)));
        }
        if r.feature_paths.is_empty() {
            return Err(Error::Input(format!("`{}` lists no feature files", r.id)));
        }
        if r.labels().iter().any(|v| !(1.0..=7.0).contains(v)) {
            return Err(Error::Input(format!("labels of `{}` outside [1, 7]: {:?}", r.id, r.labels())));
        }
        if r.emo_class >= crate::N_CLASSES {
            return Err(Error::Input(format!("class {} of `{}` outside [0, 7)", r.emo_class, r.id)));
        }
    }
    Ok(())
}

/// A labelled utterance with its (possibly fused) features.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub labels: [f64; 3],
    pub class: usize,
    pub features: FeatureSequence,
}

/// Examples of one split sharing a feature width.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        if let Some(first) = examples.first() {
            let d = first.features.dim();
            if let Some(e) = examples.iter().find(|e| e.features.dim() != d) {
                return Err(Error::shape(
                    "Dataset",
                    format!("`{}` has width {} but `{}` has {d}", e.id, e.features.dim(), first.id),
                ));
            }
        }
        Ok(Dataset { examples })
    }

    /// Pair records with their features, in the given order.
    pub fn from_records(records: &[&UtteranceRecord], features: Vec<FeatureSequence>) -> Result<Self> {
        if records.len() != features.len() {
            return Err(Error::Input(format!("{} records but {} feature sequences", records.len(), features.len())));
        }
        Dataset::new(
            records
                .iter()
                .zip(features)
                .map(|(r, f)| Example {
                    id: r.id.clone(),
                    labels: r.labels(),
                    class: r.emo_class,
                    features: f,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.examples.first().map(|e| e.features.dim())
    }

    pub fn labels(&self) -> Matrix {
        let mut m = Matrix::zeros(self.len(), 3);
        for (i, e) in self.examples.iter().enumerate() {
            m.row_mut(i).copy_from_slice(&e.labels);
        }
        m
    }
}

/// Padded time-major mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `(T_max * B) x D`, row `t * B + b`; padded frames are zero.
    pub features: Matrix,
    pub mask: SeqMask,
    /// `B x 3`
    pub labels: Matrix,
    pub classes: Vec<usize>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.ids.len()
    }

    /// Assemble examples (in order) into one padded batch.
    pub fn from_examples(examples: &[&Example]) -> Result<Batch> {
        let first = examples.first().ok_or_else(|| Error::Input("empty batch".into()))?;
        let dim = first.features.dim();
        let lengths: Vec<usize> = examples.iter().map(|e| e.features.frames()).collect();
        let mask = SeqMask::new(lengths)?;
        let b = examples.len();
        let mut features = Matrix::zeros(mask.t_max() * b, dim);
        let mut labels = Matrix::zeros(b, 3);
        for (bi, e) in examples.iter().enumerate() {
            if e.features.dim() != dim {
                return Err(Error::shape("Batch", "examples have different feature widths"));
            }
            for t in 0..e.features.frames() {
                for (o, v) in features.row_mut(t * b + bi).iter_mut().zip(e.features.frame(t)) {
                    *o = *v as f64;
                }
            }
            labels.row_mut(bi).copy_from_slice(&e.labels);
        }
        Ok(Batch {
            features,
            mask,
            labels,
            classes: examples.iter().map(|e| e.class).collect(),
            ids: examples.iter().map(|e| e.id.clone()).collect(),
        })
    }
}

/// Indices sorted by (frames, id), grouped so each group spans at most
/// [`BUCKET_TOLERANCE`] frames.
fn length_buckets(data: &Dataset) -> Vec<Vec<usize>> {
    let ex = data.examples();
    let mut order: Vec<usize> = (0..ex.len()).collect();
    order.sort_by(|&a, &b| {
        ex[a]
            .features
            .frames()
            .cmp(&ex[b].features.frames())
            .then_with(|| ex[a].id.cmp(&ex[b].id))
    });
    let mut buckets: Vec<Vec<usize>> = Vec::new();
    let mut start_len = 0;
    for i in order {
        let len = ex[i].features.frames();
        match buckets.last_mut() {
            Some(b) if len - start_len <= BUCKET_TOLERANCE => b.push(i),
            _ => {
                start_len = len;
                buckets.push(alloc::vec![i]);
            }
        }
    }
    buckets
}

/// Training batches for one epoch.
///
/// Utterances are bucketed by length, shuffled within buckets, cut into
/// batches of `batch_size`, and the batch order is shuffled. Every utterance
/// appears exactly once. A trailing single-utterance remainder is merged into
/// the previous batch so every batch has at least two utterances.
pub fn make_batches(data: &Dataset, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::Input(format!("batch size must be at least 2, got {batch_size}")));
    }
    if data.len() < 2 {
        return Err(Error::Input(format!("need at least 2 utterances to form a batch, got {}", data.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::with_capacity(data.len());
    for mut bucket in length_buckets(data) {
        bucket.shuffle(&mut rng);
        order.extend(bucket);
    }
    let mut groups: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if groups.len() > 1 && groups.last().is_some_and(|g| g.len() == 1) {
        let tail = groups.pop().unwrap_or_default();
        if let Some(prev) = groups.last_mut() {
            prev.extend(tail);
        }
    }
    groups.shuffle(&mut rng);
    groups
        .iter()
        .map(|g| {
            let ex: Vec<&Example> = g.iter().map(|&i| &data.examples()[i]).collect();
            Batch::from_examples(&ex)
        })
        .collect()
}

/// Deterministic length-sorted batches for inference; any batch size ≥ 1.
pub fn inference_batches(data: &Dataset, batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Input("batch size must be positive".into()));
    }
    let order: Vec<usize> = length_buckets(data).into_iter().flatten().collect();
    order
        .chunks(batch_size)
        .map(|g| {
            let ex: Vec<&Example> = g.iter().map(|&i| &data.examples()[i]).collect();
            Batch::from_examples(&ex)
        })
        .collect()
}
