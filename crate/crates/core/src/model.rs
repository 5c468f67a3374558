//! Convolutional encoder-decoder with gated linear units and multi-step
//! attention.
//!
//! Encoder: token + position embeddings, dropout, a linear map into the
//! hidden width, `k` blocks of (same-padded convolution → GLU → residual),
//! and a linear map back to the embedding width. Each source position
//! yields a key (the block output) and a value (key plus input embedding).
//!
//! Decoder: the same stack with causal convolutions. After every block an
//! attention layer queries the encoder keys with the block output plus the
//! target embedding and adds the projected context back. A final pair of
//! linear layers maps to target-vocabulary logits.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, PadMode, Var};
use crate::error::ModelError;
use crate::subword::BOS_ID;
use crate::tensor::{Scalar, Tensor};

type Result<T> = std::result::Result<T, ModelError>;

/// Named model parameters, ordered by name.
pub type ParamStore<T> = BTreeMap<String, Tensor<T>>;

const HALF_SQRT: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub kernel_width: usize,
    /// Blocks per side.
    pub layers: usize,
    pub dropout: f64,
    pub source_vocab: usize,
    pub target_vocab: usize,
    pub max_positions: usize,
    /// Multiply each residual sum by √0.5.
    pub residual_scaling: bool,
    /// Per decoder block: attend after this block. Empty means every block.
    pub attention: Vec<bool>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            hidden_dim: 64,
            kernel_width: 3,
            layers: 2,
            dropout: 0.1,
            source_vocab: 8000,
            target_vocab: 8000,
            max_positions: 256,
            residual_scaling: true,
            attention: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.kernel_width == 0 || self.kernel_width % 2 == 0 {
            return bad(format!("kernel width must be odd, got {}", self.kernel_width));
        }
        if self.layers == 0 {
            return bad("need at least one layer".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.max_positions == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.source_vocab == 0 || self.target_vocab == 0 {
            return bad("vocabularies must be non-empty".into());
        }
        if !self.attention.is_empty() && self.attention.len() != self.layers {
            return bad(format!(
                "attention toggles ({}) must match layers ({})",
                self.attention.len(),
                self.layers
            ));
        }
        Ok(())
    }

    pub fn attends(&self, layer: usize) -> bool {
        self.attention.get(layer).copied().unwrap_or(true)
    }

    /// Shapes of every parameter, by name.
    pub fn parameter_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let (e, h, w) = (self.embed_dim, self.hidden_dim, self.kernel_width);
        let mut shapes = BTreeMap::new();
        let mut linear = |name: &str, i: usize, o: usize| {
            shapes.insert(format!("{name}.w"), vec![i, o]);
            shapes.insert(format!("{name}.b"), vec![o]);
        };
        for side in ["enc", "dec"] {
            linear(&format!("{side}.fc1"), e, h);
            linear(&format!("{side}.fc2"), h, e);
        }
        for l in 0..self.layers {
            if self.attends(l) {
                linear(&format!("dec.att{l}.in"), h, e);
                linear(&format!("dec.att{l}.out"), e, h);
            }
        }
        linear("dec.fc3", e, self.target_vocab);
        for side in ["enc", "dec"] {
            for l in 0..self.layers {
                shapes.insert(format!("{side}.conv{l}.w"), vec![w, h, 2 * h]);
                shapes.insert(format!("{side}.conv{l}.b"), vec![2 * h]);
            }
        }
        shapes.insert("enc.embed".into(), vec![self.source_vocab, e]);
        shapes.insert("dec.embed".into(), vec![self.target_vocab, e]);
        shapes.insert("enc.pos".into(), vec![self.max_positions, e]);
        shapes.insert("dec.pos".into(), vec![self.max_positions, e]);
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .values()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

/// Span of input positions one output position can see through `k` stacked
/// width-`w` convolutions along a single direction.
pub fn receptive_field(w: usize, k: usize) -> usize {
    k * (w - 1) + 1
}

/// Elementwise `a · σ(b)`.
pub fn glu<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (a, b) = (g.input(a.clone()), g.input(b.clone()));
    let out = glu_var(&mut g, a, b)?;
    Ok(g.value(out).clone())
}

pub fn glu_var<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let gate = g.sigmoid(b)?;
    Ok(g.mul(a, gate)?)
}

/// Encoder output for one source sentence, as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub keys: Var,
    pub values: Var,
}

/// Encoder output detached from any graph, for reuse across decoding steps.
#[derive(Debug, Clone)]
pub struct EncoderStates<T> {
    pub keys: Tensor<T>,
    pub values: Tensor<T>,
}

impl<T: Scalar> EncoderStates<T> {
    pub fn bind(&self, g: &mut Graph<T>) -> EncoderVars {
        EncoderVars {
            keys: g.input(self.keys.clone()),
            values: g.input(self.values.clone()),
        }
    }
}

pub struct DecoderOutput {
    /// `[prefix length × target vocab]`.
    pub logits: Var,
    /// Attention weights `[prefix length × source length]` per attending block.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvS2S<T> {
    config: ModelConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> ConvS2S<T> {
    /// Fresh model: linear and convolution weights uniform in
    /// `±√(6 / fan_in)`, biases zero, embeddings `N(0, 0.1²)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed_init = Normal::new(0.0, 0.1).expect("valid normal");
        let params = config
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".b") {
                    Tensor::zeros(&shape)
                } else if name.ends_with(".embed") || name.ends_with(".pos") {
                    Tensor::from_fn(&shape, |_| T::of(embed_init.sample(&mut rng)))
                } else {
                    let fan_in: usize = shape[..shape.len() - 1].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(&shape, |_| T::of(rng.gen_range(-bound..bound)))
                };
                (name, t)
            })
            .collect();
        Ok(ConvS2S { config, params })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let shapes = config.parameter_shapes();
        for (name, shape) in &shapes {
            match params.get(name) {
                None => return Err(ModelError::MissingParameter(name.clone())),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(ModelError::Config(format!(
                        "parameter '{name}' has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(t) if !t.is_finite() => {
                    return Err(ModelError::Config(format!("parameter '{name}' is not finite")))
                }
                _ => {}
            }
        }
        if let Some(extra) = params.keys().find(|k| !shapes.contains_key(*k)) {
            return Err(ModelError::Config(format!("unexpected parameter '{extra}'")));
        }
        Ok(ConvS2S { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    fn param(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        let t = self
            .params
            .get(name)
            .ok_or_else(|| ModelError::MissingParameter(name.to_string()))?;
        Ok(g.param(name, t))
    }

    fn linear(&self, g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
        let w = self.param(g, &format!("{name}.w"))?;
        let b = self.param(g, &format!("{name}.b"))?;
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, b)?)
    }

    fn residual(&self, g: &mut Graph<T>, x: Var, r: Var) -> Result<Var> {
        let s = g.add(x, r)?;
        Ok(if self.config.residual_scaling {
            g.scale(s, HALF_SQRT)?
        } else {
            s
        })
    }

    fn dropout(&self, g: &mut Graph<T>, x: Var, rng: &mut Option<&mut dyn RngCore>) -> Result<Var> {
        match rng {
            Some(r) => Ok(g.dropout(x, self.config.dropout, &mut **r)?),
            None => Ok(x),
        }
    }

    /// Token plus position embeddings for one side.
    fn embed(&self, g: &mut Graph<T>, side: &str, ids: &[usize], vocab: usize) -> Result<Var> {
        if ids.is_empty() {
            return Err(ModelError::Empty);
        }
        if ids.len() > self.config.max_positions {
            return Err(ModelError::TooLong {
                len: ids.len(),
                max: self.config.max_positions,
            });
        }
        if let Some(&id) = ids.iter().find(|&&i| i >= vocab) {
            return Err(ModelError::IdOutOfRange {
                side: if side == "enc" { "source" } else { "target" },
                id,
                size: vocab,
            });
        }
        let table = self.param(g, &format!("{side}.embed"))?;
        let pos = self.param(g, &format!("{side}.pos"))?;
        let tok = g.gather(table, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let p = g.gather(pos, &positions)?;
        Ok(g.add(tok, p)?)
    }

    fn conv_block(
        &self,
        g: &mut Graph<T>,
        name: &str,
        x: Var,
        pad: PadMode,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let h = self.config.hidden_dim;
        let d = self.dropout(g, x, rng)?;
        let w = self.param(g, &format!("{name}.w"))?;
        let b = self.param(g, &format!("{name}.b"))?;
        let c = g.conv1d(d, w, pad)?;
        let c = g.add_row(c, b)?;
        let a = g.slice_cols(c, 0, h)?;
        let gate = g.slice_cols(c, h, 2 * h)?;
        let y = glu_var(g, a, gate)?;
        self.residual(g, y, x)
    }

    /// Encodes one source sentence. Passing an RNG enables dropout.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        source: &[usize],
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<EncoderVars> {
        let emb = self.embed(g, "enc", source, self.config.source_vocab)?;
        let emb = self.dropout(g, emb, &mut rng)?;
        let mut x = self.linear(g, "enc.fc1", emb)?;
        for l in 0..self.config.layers {
            x = self.conv_block(g, &format!("enc.conv{l}"), x, PadMode::Same, &mut rng)?;
        }
        let keys = self.linear(g, "enc.fc2", x)?;
        let values = self.residual(g, keys, emb)?;
        Ok(EncoderVars { keys, values })
    }

    /// Encoder output as plain tensors, dropout off.
    pub fn encode_states(&self, source: &[usize]) -> Result<EncoderStates<T>> {
        let mut g = Graph::new();
        let enc = self.encode(&mut g, source, None)?;
        Ok(EncoderStates {
            keys: g.value(enc.keys).clone(),
            values: g.value(enc.values).clone(),
        })
    }

    /// Logits for every position of a bos-initial target prefix.
    pub fn decode_forward(
        &self,
        g: &mut Graph<T>,
        enc: EncoderVars,
        prefix: &[usize],
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<DecoderOutput> {
        if prefix.first() != Some(&BOS_ID) {
            return Err(ModelError::MissingBos);
        }
        let emb = self.embed(g, "dec", prefix, self.config.target_vocab)?;
        let emb = self.dropout(g, emb, &mut rng)?;
        let mut x = self.linear(g, "dec.fc1", emb)?;
        let keys_t = g.transpose(enc.keys)?;
        let mut attention = Vec::new();
        for l in 0..self.config.layers {
            x = self.conv_block(g, &format!("dec.conv{l}"), x, PadMode::Causal, &mut rng)?;
            if !self.config.attends(l) {
                continue;
            }
            let q = self.linear(g, &format!("dec.att{l}.in"), x)?;
            let q = self.residual(g, q, emb)?;
            let scores = g.matmul(q, keys_t)?;
            let weights = g.softmax(scores)?;
            attention.push(weights);
            let context = g.matmul(weights, enc.values)?;
            let out = self.linear(g, &format!("dec.att{l}.out"), context)?;
            x = self.residual(g, out, x)?;
        }
        let y = self.linear(g, "dec.fc2", x)?;
        let y = self.dropout(g, y, &mut rng)?;
        let logits = self.linear(g, "dec.fc3", y)?;
        Ok(DecoderOutput { logits, attention })
    }

    /// Full forward pass without dropout; returns `[prefix × vocab]` logits.
    pub fn logits(&self, source: &[usize], prefix: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let enc = self.encode(&mut g, source, None)?;
        let out = self.decode_forward(&mut g, enc, prefix, None)?;
        Ok(g.value(out.logits).clone())
    }

    /// Log-probabilities of the token following `prefix`.
    pub fn next_log_probs(&self, enc: &EncoderStates<T>, prefix: &[usize]) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let vars = enc.bind(&mut g);
        let out = self.decode_forward(&mut g, vars, prefix, None)?;
        let t = prefix.len();
        let last = g.slice_rows(out.logits, t - 1, t)?;
        let lp = g.log_softmax(last)?;
        Ok(g.value(lp).data().to_vec())
    }
}
