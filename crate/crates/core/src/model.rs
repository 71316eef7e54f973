//! GRU and TCGRU multi-task emotion networks.
//!
//! ```text
//! features ─┬─────────────────────┐
//!           └─ depthwise TC (k=3) ─┴─ concat ─ GRU ─ GRU ─ masked mean ─ tanh dense ─┬─ scores (3)
//!                                                                                     └─ logits (7)
//! ```
//! Without the TC layer the features feed the first GRU directly.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnstack::{init_uniform, DepthwiseTConvParams, GruCellParams, Graph, ParamSet, SeqMask, Var};
use crate::tensor::Matrix;
use crate::{N_CLASSES, N_DIMS};

/// Regression bias at initialization: centre of the 1..7 label scale.
pub const SCORE_BIAS_INIT: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub use_tconv: bool,
    #[serde(default = "default_width")]
    pub hidden: usize,
    #[serde(default = "default_width")]
    pub embed_dim: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_dims")]
    pub n_dims: usize,
    #[serde(default = "default_classes")]
    pub n_classes: usize,
}

fn default_width() -> usize {
    128
}
fn default_layers() -> usize {
    2
}
fn default_dims() -> usize {
    N_DIMS
}
fn default_classes() -> usize {
    N_CLASSES
}

impl ModelConfig {
    /// Two 128-unit recurrent layers, 128-dim embedding.
    pub fn new(input_dim: usize, use_tconv: bool) -> Self {
        ModelConfig {
            input_dim,
            use_tconv,
            hidden: default_width(),
            embed_dim: default_width(),
            layers: default_layers(),
            n_dims: N_DIMS,
            n_classes: N_CLASSES,
        }
    }

    pub fn with_widths(mut self, hidden: usize, embed_dim: usize) -> Self {
        self.hidden = hidden;
        self.embed_dim = embed_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.embed_dim == 0 {
            return Err(Error::Config(format!(
                "dimensions must be positive (input {}, hidden {}, embed {})",
                self.input_dim, self.hidden, self.embed_dim
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("at least one recurrent layer is required".into()));
        }
        if self.n_dims != N_DIMS || self.n_classes != N_CLASSES {
            return Err(Error::Config(format!(
                "heads are fixed at {N_DIMS} scores and {N_CLASSES} classes, got {} and {}",
                self.n_dims, self.n_classes
            )));
        }
        Ok(())
    }

    /// Width of the first recurrent layer's input.
    pub fn recurrent_input_dim(&self) -> usize {
        if self.use_tconv {
            2 * self.input_dim
        } else {
            self.input_dim
        }
    }
}

/// Indices of each parameter tensor inside the model's [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    tconv: Option<(usize, usize)>,
    gru: Vec<(usize, usize, usize)>,
    embed: (usize, usize),
    regress: (usize, usize),
    classify: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmotionModel {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
}

/// Per-utterance network outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceOutput {
    pub embedding: Vec<f64>,
    /// Activation, valence, dominance on the raw label scale.
    pub scores: [f64; 3],
    pub class_logits: Vec<f64>,
}

/// Graph nodes of one batched forward pass.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub params: Vec<Var>,
    pub embedding: Var,
    pub scores: Var,
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    /// Bytes when stored as 32-bit floats.
    pub bytes_f32: usize,
    pub heads: usize,
    pub per_tensor: Vec<(String, usize)>,
}

impl EmotionModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let tconv = if config.use_tconv {
            let p = DepthwiseTConvParams::init(config.input_dim, &mut rng);
            Some((params.push("tconv.kernel", p.kernel)?, params.push("tconv.bias", p.bias)?))
        } else {
            None
        };
        let mut gru = Vec::with_capacity(config.layers);
        let mut d_in = config.recurrent_input_dim();
        for l in 0..config.layers {
            let p = GruCellParams::init(d_in, config.hidden, &mut rng);
            gru.push((
                params.push(format!("gru{l}.w"), p.w)?,
                params.push(format!("gru{l}.u"), p.u)?,
                params.push(format!("gru{l}.b"), p.b)?,
            ));
            d_in = config.hidden;
        }
        let (h, e) = (config.hidden, config.embed_dim);
        let embed = (
            params.push("embed.w", init_uniform(h, e, h, &mut rng))?,
            params.push("embed.b", Matrix::zeros(1, e))?,
        );
        let regress = (
            params.push("regress.w", init_uniform(e, N_DIMS, e, &mut rng))?,
            params.push("regress.b", Matrix::filled(1, N_DIMS, SCORE_BIAS_INIT))?,
        );
        let classify = (
            params.push("classify.w", init_uniform(e, N_CLASSES, e, &mut rng))?,
            params.push("classify.b", Matrix::zeros(1, N_CLASSES))?,
        );
        Ok(EmotionModel {
            config,
            params,
            layout: Layout {
                tconv,
                gru,
                embed,
                regress,
                classify,
            },
        })
    }

    /// Rebuild a model around loaded parameters; names and shapes must match `config`.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let mut model = EmotionModel::new(config, 0)?;
        if model.params.names() != params.names() {
            return Err(Error::Input(format!(
                "parameter names {:?} do not match configuration {:?}",
                params.names(),
                model.params.names()
            )));
        }
        model.params.copy_from(&params)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn tconv_params(&self) -> Option<DepthwiseTConvParams> {
        self.layout.tconv.map(|(k, b)| DepthwiseTConvParams {
            kernel: self.params.get(k).clone(),
            bias: self.params.get(b).clone(),
        })
    }

    pub fn set_tconv_params(&mut self, p: &DepthwiseTConvParams) -> Result<()> {
        let (k, b) = self
            .layout
            .tconv
            .ok_or_else(|| Error::Config("model has no TC layer".into()))?;
        if p.kernel.shape() != self.params.get(k).shape() || p.bias.shape() != self.params.get(b).shape() {
            return Err(Error::shape("set_tconv_params", "channel count differs"));
        }
        *self.params.get_mut(k) = p.kernel.clone();
        *self.params.get_mut(b) = p.bias.clone();
        Ok(())
    }

    pub fn gru_params(&self, layer: usize) -> GruCellParams {
        let (w, u, b) = self.layout.gru[layer];
        GruCellParams {
            w: self.params.get(w).clone(),
            u: self.params.get(u).clone(),
            b: self.params.get(b).clone(),
        }
    }

    /// Register parameters on `g` as leaves (`trainable`) or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .tensors()
            .iter()
            .map(|t| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    /// Forward a time-major padded batch `(T*B) x input_dim`.
    pub fn forward_batch(&self, g: &mut Graph, features: &Matrix, mask: &SeqMask, trainable: bool) -> Result<BatchForward> {
        if features.cols() != self.config.input_dim {
            return Err(Error::shape(
                "forward",
                format!("feature width {} but model expects {}", features.cols(), self.config.input_dim),
            ));
        }
        let params = self.bind(g, trainable);
        let p = |i: usize| params[i];
        let x = g.constant(features.clone());
        let mut seq = match self.layout.tconv {
            Some((k, b)) => {
                let conv = g.tconv(x, p(k), p(b), mask)?;
                g.concat_cols(x, conv)?
            }
            None => x,
        };
        for &(w, u, b) in &self.layout.gru {
            seq = g.gru_sequence(seq, p(w), p(u), p(b), mask)?;
        }
        let pooled = g.masked_mean(seq, mask)?;
        let (ew, eb) = self.layout.embed;
        let e = g.matmul(pooled, p(ew))?;
        let e = g.add_row(e, p(eb))?;
        let embedding = g.tanh(e);
        let (rw, rb) = self.layout.regress;
        let s = g.matmul(embedding, p(rw))?;
        let scores = g.add_row(s, p(rb))?;
        let (cw, cb) = self.layout.classify;
        let l = g.matmul(embedding, p(cw))?;
        let logits = g.add_row(l, p(cb))?;
        Ok(BatchForward {
            params,
            embedding,
            scores,
            logits,
        })
    }

    /// Inference on one `T x input_dim` sequence.
    pub fn forward_utterance(&self, seq: &Matrix) -> Result<UtteranceOutput> {
        if seq.rows() == 0 {
            return Err(Error::Input("empty feature sequence".into()));
        }
        let mask = SeqMask::single(seq.rows())?;
        let mut g = Graph::new();
        let out = self.forward_batch(&mut g, seq, &mask, false)?;
        let s = g.value(out.scores).as_slice();
        Ok(UtteranceOutput {
            embedding: g.value(out.embedding).as_slice().to_vec(),
            scores: [s[0], s[1], s[2]],
            class_logits: g.value(out.logits).as_slice().to_vec(),
        })
    }

    /// Inference on a padded batch, one output per sequence.
    pub fn forward_padded(&self, features: &Matrix, mask: &SeqMask) -> Result<Vec<UtteranceOutput>> {
        let mut g = Graph::new();
        let out = self.forward_batch(&mut g, features, mask, false)?;
        let (emb, sc, lg) = (g.value(out.embedding), g.value(out.scores), g.value(out.logits));
        Ok((0..mask.batch())
            .map(|b| {
                let s = sc.row(b);
                UtteranceOutput {
                    embedding: emb.row(b).to_vec(),
                    scores: [s[0], s[1], s[2]],
                    class_logits: lg.row(b).to_vec(),
                }
            })
            .collect())
    }

    /// Scores from an embedding through the regression head alone.
    pub fn score_head(&self, embedding: &[f64]) -> Result<[f64; 3]> {
        let (rw, rb) = self.layout.regress;
        let e = Matrix::row_vector(embedding);
        let mut s = e.matmul(self.params.get(rw))?;
        s.add_assign(self.params.get(rb));
        let v = s.as_slice();
        Ok([v[0], v[1], v[2]])
    }

    pub fn param_report(&self) -> ParamReport {
        let per_tensor: Vec<(String, usize)> = self.params.iter().map(|(n, t)| (n.into(), t.len())).collect();
        let total = self.params.numel();
        let heads = [self.layout.regress, self.layout.classify]
            .iter()
            .map(|&(w, b)| self.params.get(w).len() + self.params.get(b).len())
            .sum();
        ParamReport {
            total,
            bytes_f32: 4 * total,
            heads,
            per_tensor,
        }
    }
}
