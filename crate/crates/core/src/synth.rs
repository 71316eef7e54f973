//! Seeded synthetic corpus with a rich "teacher" view and a weak "student" view.
//!
//! Every utterance draws latent activation, valence and dominance on the
//! 1..7 scale. Teacher channels are fixed random mixtures of all three
//! latents plus a slow per-channel sinusoid and white noise. Student channels
//! carry activation and dominance the same way, but valence only through a
//! proxy mixed with an utterance-level nuisance (correlation 0.5 with the
//! latent) and through the amplitude of a zero-mean fluctuation channel,
//! which a frame average cannot see.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSequence, Split, UtteranceRecord, DEFAULT_FRAME_PERIOD_MS};
use crate::error::{Error, Result};

/// Valence weight of the student's linear proxy; the rest is nuisance.
pub const PROXY_VALENCE_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelDist {
    /// Each dimension uniform on [1, 7].
    #[default]
    Uniform,
    /// Mean of three uniforms on [1, 7]: concentrated around 4.
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_utts: usize,
    pub seed: u64,
    pub teacher_dim: usize,
    pub student_dim: usize,
    /// Standard deviation of per-frame white noise on every channel.
    pub noise: f64,
    /// Validation utterances (default: a sixth of the corpus).
    #[serde(default)]
    pub n_val: Option<usize>,
    /// Test utterances (default: a sixth of the corpus).
    #[serde(default)]
    pub n_test: Option<usize>,
    /// Number of teacher views; each adds its own utterance-level valence perturbation.
    #[serde(default = "one")]
    pub teacher_views: usize,
    /// Standard deviation (latent units) of the per-view valence perturbation.
    #[serde(default)]
    pub view_noise: f64,
    /// Standard deviation of grader noise added to labels (clamped to [1, 7]).
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default)]
    pub label_dist: LabelDist,
    /// How strongly valence modulates the student's fluctuation channel.
    #[serde(default = "fluct_gain")]
    pub fluctuation_gain: f64,
    #[serde(default = "min_dur")]
    pub min_duration_s: f64,
    #[serde(default = "max_dur")]
    pub max_duration_s: f64,
    #[serde(default = "period")]
    pub frame_period_ms: f32,
}

fn one() -> usize {
    1
}
fn fluct_gain() -> f64 {
    0.75
}
fn min_dur() -> f64 {
    2.75
}
fn max_dur() -> f64 {
    11.0
}
fn period() -> f32 {
    DEFAULT_FRAME_PERIOD_MS
}

impl SynthSpec {
    pub fn new(n_utts: usize, seed: u64, teacher_dim: usize, student_dim: usize, noise: f64) -> Self {
        SynthSpec {
            n_utts,
            seed,
            teacher_dim,
            student_dim,
            noise,
            n_val: None,
            n_test: None,
            teacher_views: 1,
            view_noise: 0.0,
            label_noise: 0.0,
            label_dist: LabelDist::Uniform,
            fluctuation_gain: fluct_gain(),
            min_duration_s: min_dur(),
            max_duration_s: max_dur(),
            frame_period_ms: period(),
        }
    }

    fn split_sizes(&self) -> Result<(usize, usize)> {
        let n_val = self.n_val.unwrap_or(self.n_utts / 6);
        let n_test = self.n_test.unwrap_or(self.n_utts / 6);
        if n_val + n_test > self.n_utts {
            return Err(Error::Config(format!(
                "{n_val} validation + {n_test} test utterances exceed corpus size {}",
                self.n_utts
            )));
        }
        Ok((n_val, n_test))
    }

    pub fn validate(&self) -> Result<()> {
        if self.teacher_dim < 4 || self.student_dim < 4 {
            return Err(Error::Config(format!(
                "feature dims must be at least 4 (teacher {}, student {})",
                self.teacher_dim, self.student_dim
            )));
        }
        if self.teacher_views == 0 {
            return Err(Error::Config("at least one teacher view is required".into()));
        }
        if !(self.noise >= 0.0 && self.view_noise >= 0.0 && self.label_noise >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        if !(self.min_duration_s > 0.0 && self.max_duration_s >= self.min_duration_s) || !(self.frame_period_ms > 0.0) {
            return Err(Error::Config("invalid duration range or frame period".into()));
        }
        self.split_sizes().map(|_| ())
    }
}

/// Generated corpus: records plus one student stream and `teacher_views` teacher streams per utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub records: Vec<UtteranceRecord>,
    /// Latent scores before grader noise.
    pub latents: Vec<[f64; 3]>,
    pub student: Vec<FeatureSequence>,
    /// `teacher[view][utterance]`
    pub teacher: Vec<Vec<FeatureSequence>>,
}

/// Stream directory names used for each view.
pub fn student_stream() -> &'static str {
    "mfb"
}

pub fn teacher_stream(view: usize) -> String {
    match view {
        0 => "embed".into(),
        v => format!("embed{}", v + 1),
    }
}

/// Discrete class from the (a, v, d) octant around the scale centre, with the
/// all-high octant folded into class 6.
pub fn octant_class(labels: &[f64; 3]) -> usize {
    let bit = |v: f64| usize::from(v > 4.0);
    let oct = bit(labels[0]) * 4 + bit(labels[1]) * 2 + bit(labels[2]);
    oct.min(crate::N_CLASSES - 1)
}

struct Channel {
    mix: [f64; 3],
    amp: f64,
    period: f64,
}

fn channels(n: usize, rng: &mut ChaCha8Rng) -> Vec<Channel> {
    (0..n)
        .map(|_| {
            let mut mix = [0.0; 3];
            for m in mix.iter_mut() {
                *m = rng.random_range(-1.0..1.0);
            }
            Channel {
                mix,
                amp: rng.random_range(0.1..0.4),
                period: rng.random_range(25.0..100.0),
            }
        })
        .collect()
}

/// Write `frames` of mixed latents plus a slow sinusoid and white noise.
fn render(chans: &[Channel], latent: &[f64; 3], frames: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let phases: Vec<f64> = chans.iter().map(|_| rng.random_range(0.0..core::f64::consts::TAU)).collect();
    let mut out = Vec::with_capacity(frames * chans.len());
    for t in 0..frames {
        for (c, ph) in chans.iter().zip(&phases) {
            let base: f64 = c.mix.iter().zip(latent).map(|(m, z)| m * z).sum();
            let wave = c.amp * libm::sin(core::f64::consts::TAU * t as f64 / c.period + ph);
            let n: f64 = StandardNormal.sample(rng);
            out.push((base + wave + noise * n) as f32);
        }
    }
    out
}

fn draw_label(dist: LabelDist, rng: &mut ChaCha8Rng) -> f64 {
    match dist {
        LabelDist::Uniform => rng.random_range(1.0..=7.0),
        LabelDist::Neutral => (0..3).map(|_| rng.random_range(1.0..=7.0)).sum::<f64>() / 3.0,
    }
}

/// Generate a corpus deterministically from `spec.seed`.
///
/// Splits are assigned in generation order: training first, then validation,
/// then test. Ids are `synth_00000`, `synth_00001`, ...
pub fn gen_synthetic(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let (n_val, n_test) = spec.split_sizes()?;
    let n_train = spec.n_utts - n_val - n_test;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let teacher_chans: Vec<Vec<Channel>> = (0..spec.teacher_views).map(|_| channels(spec.teacher_dim, &mut rng)).collect();
    // student: linear channels over (a, proxy, d) and one fluctuation channel
    let student_chans = channels(spec.student_dim - 1, &mut rng);

    let mut corpus = SynthCorpus {
        records: Vec::with_capacity(spec.n_utts),
        latents: Vec::with_capacity(spec.n_utts),
        student: Vec::with_capacity(spec.n_utts),
        teacher: (0..spec.teacher_views).map(|_| Vec::with_capacity(spec.n_utts)).collect(),
    };
    let period_s = spec.frame_period_ms as f64 / 1000.0;
    let proxy_nuisance = libm::sqrt(1.0 - PROXY_VALENCE_WEIGHT * PROXY_VALENCE_WEIGHT);
    for i in 0..spec.n_utts {
        let latent = [
            draw_label(spec.label_dist, &mut rng),
            draw_label(spec.label_dist, &mut rng),
            draw_label(spec.label_dist, &mut rng),
        ];
        let z = latent.map(|l| (l - 4.0) / 3.0);
        let dur = rng.random_range(spec.min_duration_s..=spec.max_duration_s);
        let frames = ((dur / period_s) as usize).max(1);

        for (view, chans) in teacher_chans.iter().enumerate() {
            let mut zv = z;
            if spec.view_noise > 0.0 {
                let n: f64 = StandardNormal.sample(&mut rng);
                zv[1] += spec.view_noise * n;
            }
            let data = render(chans, &zv, frames, spec.noise, &mut rng);
            corpus.teacher[view].push(FeatureSequence::new(spec.teacher_dim, frames, spec.frame_period_ms, data)?);
        }

        let nuisance: f64 = rng.random_range(-1.0..1.0);
        let proxy = PROXY_VALENCE_WEIGHT * z[1] + proxy_nuisance * nuisance;
        let linear = render(&student_chans, &[z[0], proxy, z[2]], frames, spec.noise, &mut rng);
        let spread = 0.25 + 0.5 * spec.fluctuation_gain * (z[1] + 1.0);
        let ds = spec.student_dim;
        let mut data = Vec::with_capacity(frames * ds);
        for t in 0..frames {
            data.extend_from_slice(&linear[t * (ds - 1)..(t + 1) * (ds - 1)]);
            let n: f64 = StandardNormal.sample(&mut rng);
            let floor: f64 = StandardNormal.sample(&mut rng);
            data.push((spread * n + spec.noise * floor) as f32);
        }
        corpus.student.push(FeatureSequence::new(ds, frames, spec.frame_period_ms, data)?);

        let mut labels = latent;
        if spec.label_noise > 0.0 {
            for l in labels.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *l = (*l + spec.label_noise * n).clamp(1.0, 7.0);
            }
        }
        let id = format!("synth_{i:05}");
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let mut feature_paths = alloc::vec![format!("{}/{id}.emof", student_stream())];
        feature_paths.extend((0..spec.teacher_views).map(|v| format!("{}/{id}.emof", teacher_stream(v))));
        corpus.records.push(UtteranceRecord {
            id,
            feature_paths,
            act: labels[0],
            val: labels[1],
            dom: labels[2],
            emo_class: octant_class(&labels),
            split,
        });
        corpus.latents.push(latent);
    }
    Ok(corpus)
}
