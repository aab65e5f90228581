//! Transformer encoder backbone, classifier head, and the training/inference
//! paths, including entry at an arbitrary boundary layer.
//!
//! Layers are numbered from the input side: layer 0 is the embedding output
//! and layers `1..=D` are transformer blocks. A block runs attention and
//! add & norm, then the feed-forward sublayer and add & norm, then its adapter
//! stack (if any). The classifier reads the first token of layer `D`.

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, AdapterStack, MetaAdapterCache, Stacking};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{
    self, Activation, AttentionCache, AttentionParams, LayerNormCache, LAYER_NORM_EPS,
};
use crate::rng::SeededRng;
use crate::tensor::{Parameter, Tensor};

/// Standard deviation of the classifier head at initialization.
pub const CLASSIFIER_INIT_STD: f64 = 0.02;

/// Shape of the transformer encoder and its classification head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    /// Number of transformer blocks, `D`.
    pub num_layers: usize,
    /// Hidden size, `n`.
    pub hidden: usize,
    pub heads: usize,
    /// Feed-forward inner size; 0 means `4 * hidden`.
    #[serde(default)]
    pub ffn_dim: usize,
    pub vocab: usize,
    /// Maximum sequence length.
    pub seqlen: usize,
    pub num_labels: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

fn default_eps() -> f64 {
    LAYER_NORM_EPS
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden: 32,
            heads: 2,
            ffn_dim: 0,
            vocab: 64,
            seqlen: 16,
            num_labels: 4,
            activation: Activation::Relu,
            layer_norm_eps: LAYER_NORM_EPS,
        }
    }
}

impl ModelSpec {
    /// BERT-base shape (no pooler, no token-type embeddings).
    pub fn bert_base(num_labels: usize) -> Self {
        Self {
            num_layers: 12,
            hidden: 768,
            heads: 12,
            ffn_dim: 3072,
            vocab: 30_522,
            seqlen: 512,
            num_labels,
            ..Self::default()
        }
    }

    pub fn distilbert(num_labels: usize) -> Self {
        Self {
            num_layers: 6,
            ..Self::bert_base(num_labels)
        }
    }

    pub fn ffn(&self) -> usize {
        if self.ffn_dim == 0 {
            4 * self.hidden
        } else {
            self.ffn_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_layers == 0 {
            return bad("model needs at least one transformer layer".into());
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!(
                "hidden size {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            ));
        }
        if self.seqlen == 0 {
            return bad("seqlen must be at least 1".into());
        }
        if self.vocab == 0 {
            return bad("vocab must be non-empty".into());
        }
        if self.num_labels < 2 {
            return bad(format!("need at least 2 labels, got {}", self.num_labels));
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Closed-form scalar count of one transformer block.
    pub fn block_param_count(&self) -> usize {
        let n = self.hidden;
        let f = self.ffn();
        4 * (n * n + n) + 2 * n + (n * f + f) + (f * n + n) + 2 * n
    }

    /// Embedding tables plus their layer norm.
    pub fn embedding_param_count(&self) -> usize {
        (self.vocab + self.seqlen) * self.hidden + 2 * self.hidden
    }

    /// Everything except the classifier head and adapters.
    pub fn backbone_param_count(&self) -> usize {
        self.embedding_param_count() + self.num_layers * self.block_param_count()
    }

    pub fn classifier_param_count(&self) -> usize {
        self.hidden * self.num_labels + self.num_labels
    }
}

/// Which parameters are updated during local training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TuningMode {
    /// Adapters and classifier; backbone frozen.
    Adapter,
    /// Bottom `frozen` blocks and the embeddings frozen; the rest trains.
    LayerFreeze { frozen: usize },
    /// Every parameter trains.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub tokens: Parameter,
    pub positions: Parameter,
    pub norm_gain: Parameter,
    pub norm_shift: Parameter,
}

impl Embedding {
    fn parameters(&self) -> [&Parameter; 4] {
        [&self.tokens, &self.positions, &self.norm_gain, &self.norm_shift]
    }

    fn parameters_mut(&mut self) -> [&mut Parameter; 4] {
        [
            &mut self.tokens,
            &mut self.positions,
            &mut self.norm_gain,
            &mut self.norm_shift,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attention: AttentionParams,
    pub attn_norm_gain: Parameter,
    pub attn_norm_shift: Parameter,
    pub ffn_in: Parameter,
    pub ffn_in_bias: Parameter,
    pub ffn_out: Parameter,
    pub ffn_out_bias: Parameter,
    pub ffn_norm_gain: Parameter,
    pub ffn_norm_shift: Parameter,
}

impl Block {
    fn parameters(&self) -> impl Iterator<Item = &Parameter> {
        self.attention.parameters().into_iter().chain([
            &self.attn_norm_gain,
            &self.attn_norm_shift,
            &self.ffn_in,
            &self.ffn_in_bias,
            &self.ffn_out,
            &self.ffn_out_bias,
            &self.ffn_norm_gain,
            &self.ffn_norm_shift,
        ])
    }

    fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.attention.parameters_mut().into_iter().chain([
            &mut self.attn_norm_gain,
            &mut self.attn_norm_shift,
            &mut self.ffn_in,
            &mut self.ffn_in_bias,
            &mut self.ffn_out,
            &mut self.ffn_out_bias,
            &mut self.ffn_norm_gain,
            &mut self.ffn_norm_shift,
        ])
    }

    fn is_trainable(&self) -> bool {
        self.ffn_in.trainable
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub weight: Parameter,
    pub bias: Parameter,
}

/// Frozen backbone, adapter stacks, and classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    spec: ModelSpec,
    embedding: Embedding,
    blocks: Vec<Block>,
    /// One stack per block, index `l - 1` for layer `l`.
    adapters: Vec<AdapterStack>,
    classifier: Classifier,
    adapter_config: AdapterConfig,
    stacking: Stacking,
    mode: TuningMode,
}

/// Where a forward pass starts.
#[derive(Debug, Clone, Copy)]
pub enum ModelInput<'a> {
    Tokens(&'a [Vec<usize>]),
    /// Output of layer `layer`, shaped `[B, S, n]`.
    Boundary { layer: usize, activations: &'a Tensor },
}

fn gaussian(rng: &mut SeededRng, name: String, shape: Vec<usize>, std: f64) -> Parameter {
    let len = shape.iter().product();
    Parameter::new(
        name,
        Tensor::new(shape, rng.normal_vec(len, 0.0, std)).expect("shape"),
        false,
    )
}

fn constant(name: String, shape: Vec<usize>, value: f64) -> Parameter {
    let len = shape.iter().product();
    Parameter::new(name, Tensor::new(shape, vec![value; len]).expect("shape"), false)
}

/// Build a model with a randomly initialized frozen backbone standing in for
/// pre-trained weights, a N(0, 0.02) classifier, and no adapters.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ModelState> {
    spec.validate()?;
    let root = SeededRng::new(seed);
    let mut rng = root.fork("backbone");
    let n = spec.hidden;
    let f = spec.ffn();
    let inv = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    let embedding = Embedding {
        tokens: gaussian(&mut rng, "embed.tokens".into(), vec![spec.vocab, n], 1.0),
        positions: gaussian(&mut rng, "embed.positions".into(), vec![spec.seqlen, n], 1.0),
        norm_gain: constant("embed.norm_gain".into(), vec![n], 1.0),
        norm_shift: constant("embed.norm_shift".into(), vec![n], 0.0),
    };
    let blocks = (1..=spec.num_layers)
        .map(|l| {
            let name = |s: &str| format!("layer{l}.{s}");
            let attention = AttentionParams {
                query: gaussian(&mut rng, name("attn.query"), vec![n, n], inv(n)),
                query_bias: constant(name("attn.query_bias"), vec![n], 0.0),
                key: gaussian(&mut rng, name("attn.key"), vec![n, n], inv(n)),
                key_bias: constant(name("attn.key_bias"), vec![n], 0.0),
                value: gaussian(&mut rng, name("attn.value"), vec![n, n], inv(n)),
                value_bias: constant(name("attn.value_bias"), vec![n], 0.0),
                output: gaussian(&mut rng, name("attn.output"), vec![n, n], inv(n)),
                output_bias: constant(name("attn.output_bias"), vec![n], 0.0),
            };
            Block {
                attention,
                attn_norm_gain: constant(name("attn_norm.gain"), vec![n], 1.0),
                attn_norm_shift: constant(name("attn_norm.shift"), vec![n], 0.0),
                ffn_in: gaussian(&mut rng, name("ffn.in"), vec![n, f], inv(n)),
                ffn_in_bias: constant(name("ffn.in_bias"), vec![f], 0.0),
                ffn_out: gaussian(&mut rng, name("ffn.out"), vec![f, n], inv(f)),
                ffn_out_bias: constant(name("ffn.out_bias"), vec![n], 0.0),
                ffn_norm_gain: constant(name("ffn_norm.gain"), vec![n], 1.0),
                ffn_norm_shift: constant(name("ffn_norm.shift"), vec![n], 0.0),
            }
        })
        .collect();
    let mut head_rng = root.fork("classifier");
    let classifier = Classifier {
        weight: gaussian(
            &mut head_rng,
            "classifier.weight".into(),
            vec![n, spec.num_labels],
            CLASSIFIER_INIT_STD,
        ),
        bias: constant("classifier.bias".into(), vec![spec.num_labels], 0.0),
    };
    let mut model = ModelState {
        spec: spec.clone(),
        embedding,
        blocks,
        adapters: vec![AdapterStack::default(); spec.num_layers],
        classifier,
        adapter_config: AdapterConfig::new(0, 0),
        stacking: Stacking::Vertical { step: 8 },
        mode: TuningMode::Adapter,
    };
    model.refresh_trainable();
    Ok(model)
}

struct EmbedCache {
    tokens: Vec<Vec<usize>>,
    norm: LayerNormCache,
}

struct BlockCache {
    attention: AttentionCache,
    attn_norm: LayerNormCache,
    attn_normed: Tensor,
    ffn_pre: Tensor,
    ffn_act: Tensor,
    ffn_norm: LayerNormCache,
    adapters: Vec<MetaAdapterCache>,
}

impl ModelState {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        self.adapter_config
    }

    pub fn stacking(&self) -> Stacking {
        self.stacking
    }

    pub fn mode(&self) -> TuningMode {
        self.mode
    }

    pub fn embedding(&self) -> &Embedding {
        &self.embedding
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut Classifier {
        &mut self.classifier
    }

    pub fn adapter_stacks(&self) -> &[AdapterStack] {
        &self.adapters
    }

    /// Stack at 1-indexed `layer`.
    pub fn adapter_stack(&self, layer: usize) -> &AdapterStack {
        &self.adapters[layer - 1]
    }

    pub fn adapter_stack_mut(&mut self, layer: usize) -> &mut AdapterStack {
        &mut self.adapters[layer - 1]
    }

    pub(crate) fn set_adapter_config(&mut self, config: AdapterConfig) {
        self.adapter_config = config;
    }

    pub(crate) fn set_stacking(&mut self, stacking: Stacking) {
        self.stacking = stacking;
    }

    pub fn set_tuning_mode(&mut self, mode: TuningMode) -> Result<()> {
        if let TuningMode::LayerFreeze { frozen } = mode {
            if frozen > self.spec.num_layers {
                return Err(Error::Config(format!(
                    "cannot freeze {frozen} of {} layers",
                    self.spec.num_layers
                )));
            }
        }
        self.mode = mode;
        self.refresh_trainable();
        Ok(())
    }

    /// Swap in a fresh N(0, 0.02) classifier over `num_labels` classes.
    pub fn replace_classifier(&mut self, num_labels: usize, rng: &mut SeededRng) -> Result<()> {
        if num_labels < 2 {
            return Err(Error::Config(format!("need at least 2 labels, got {num_labels}")));
        }
        self.spec.num_labels = num_labels;
        self.classifier = Classifier {
            weight: gaussian(
                rng,
                "classifier.weight".into(),
                vec![self.spec.hidden, num_labels],
                CLASSIFIER_INIT_STD,
            ),
            bias: constant("classifier.bias".into(), vec![num_labels], 0.0),
        };
        self.refresh_trainable();
        Ok(())
    }

    /// Copy embedding and block weights from `donor`. Adapters, classifier,
    /// and tuning mode stay as they are.
    pub fn adopt_backbone(&mut self, donor: &ModelState) -> Result<()> {
        let (a, b) = (&self.spec, &donor.spec);
        let same = a.num_layers == b.num_layers
            && a.hidden == b.hidden
            && a.heads == b.heads
            && a.ffn() == b.ffn()
            && a.vocab == b.vocab
            && a.seqlen == b.seqlen;
        if !same {
            return Err(Error::Config("donor backbone has a different shape".into()));
        }
        self.embedding = donor.embedding.clone();
        self.blocks = donor.blocks.clone();
        self.refresh_trainable();
        Ok(())
    }

    /// Re-derive every parameter's trainable flag from the tuning mode.
    pub(crate) fn refresh_trainable(&mut self) {
        let mode = self.mode;
        let emb = matches!(mode, TuningMode::Full);
        for p in self.embedding.parameters_mut() {
            p.trainable = emb;
        }
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let layer = i + 1;
            let on = match mode {
                TuningMode::Adapter => false,
                TuningMode::LayerFreeze { frozen } => layer > frozen,
                TuningMode::Full => true,
            };
            for p in block.parameters_mut() {
                p.trainable = on;
            }
        }
        for stack in &mut self.adapters {
            for p in stack.parameters_mut() {
                p.trainable = true;
            }
        }
        self.classifier.weight.trainable = true;
        self.classifier.bias.trainable = true;
        for p in self.parameters_mut() {
            if !p.trainable {
                p.grad = None;
            }
        }
    }

    /// All parameters in canonical order: embeddings, then per layer the
    /// block followed by its adapters, then the classifier.
    pub fn parameters(&self) -> impl Iterator<Item = &Parameter> {
        let layers = self
            .blocks
            .iter()
            .zip(&self.adapters)
            .flat_map(|(b, a)| b.parameters().chain(a.parameters()));
        self.embedding
            .parameters()
            .into_iter()
            .chain(layers)
            .chain([&self.classifier.weight, &self.classifier.bias])
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        let layers = self
            .blocks
            .iter_mut()
            .zip(self.adapters.iter_mut())
            .flat_map(|(b, a)| b.parameters_mut().chain(a.parameters_mut()));
        self.embedding
            .parameters_mut()
            .into_iter()
            .chain(layers)
            .chain([&mut self.classifier.weight, &mut self.classifier.bias])
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.parameters().find(|p| p.name == name)
    }

    /// Lowest layer holding a trainable parameter; `D + 1` means only the
    /// classifier trains.
    pub fn lowest_trainable_layer(&self) -> usize {
        if self.embedding.tokens.trainable {
            return 0;
        }
        (1..=self.spec.num_layers)
            .find(|&l| self.blocks[l - 1].is_trainable() || !self.adapters[l - 1].is_empty())
            .unwrap_or(self.spec.num_layers + 1)
    }

    /// Deepest layer whose output stays fixed during training.
    pub fn max_boundary(&self) -> usize {
        self.lowest_trainable_layer().saturating_sub(1)
    }

    /// Trainable values in canonical order.
    pub fn trainable_values(&self) -> Vec<f64> {
        self.parameters()
            .filter(|p| p.trainable)
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn load_trainable_values(&mut self, values: &[f64]) -> Result<()> {
        let expected: usize = self.parameters().filter(|p| p.trainable).map(Parameter::len).sum();
        if expected != values.len() {
            return Err(Error::Protocol(format!(
                "payload carries {} values but the model has {expected} trainable scalars",
                values.len()
            )));
        }
        let mut offset = 0;
        for p in self.parameters_mut().filter(|p| p.trainable) {
            let len = p.len();
            p.value.data_mut().copy_from_slice(&values[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        nn::sgd_step(self.parameters_mut(), lr)
    }

    // -- forward pieces ----------------------------------------------------

    fn check_tokens(&self, tokens: &[Vec<usize>]) -> Result<usize> {
        let seq = tokens.first().map_or(0, Vec::len);
        if tokens.is_empty() || seq == 0 {
            return Err(Error::Data("empty token batch".into()));
        }
        if seq > self.spec.seqlen {
            return Err(Error::Data(format!(
                "sequence length {seq} exceeds the model maximum {}",
                self.spec.seqlen
            )));
        }
        for (b, row) in tokens.iter().enumerate() {
            if row.len() != seq {
                return Err(Error::Data(format!("sample {b} has ragged length {}", row.len())));
            }
            if let Some(&t) = row.iter().find(|&&t| t >= self.spec.vocab) {
                return Err(Error::Data(format!(
                    "sample {b} has token {t} outside the vocabulary of {}",
                    self.spec.vocab
                )));
            }
        }
        Ok(seq)
    }

    fn embed_raw(&self, tokens: &[Vec<usize>], seq: usize) -> Tensor {
        let n = self.spec.hidden;
        let tok = self.embedding.tokens.value.data();
        let pos = self.embedding.positions.value.data();
        let mut out = vec![0.0; tokens.len() * seq * n];
        for (b, row) in tokens.iter().enumerate() {
            for (s, &t) in row.iter().enumerate() {
                let o = &mut out[(b * seq + s) * n..][..n];
                let e = &tok[t * n..][..n];
                let p = &pos[s * n..][..n];
                for j in 0..n {
                    o[j] = e[j] + p[j];
                }
            }
        }
        Tensor::new(vec![tokens.len(), seq, n], out).expect("shape")
    }

    fn embed(&self, tokens: &[Vec<usize>]) -> Result<Tensor> {
        let seq = self.check_tokens(tokens)?;
        let raw = self.embed_raw(tokens, seq);
        Ok(nn::layer_norm(
            &raw,
            &self.embedding.norm_gain,
            &self.embedding.norm_shift,
            self.spec.layer_norm_eps,
        ))
    }

    fn embed_train(&self, tokens: &[Vec<usize>]) -> Result<(Tensor, EmbedCache)> {
        let seq = self.check_tokens(tokens)?;
        let raw = self.embed_raw(tokens, seq);
        let (y, norm) = nn::layer_norm_train(
            &raw,
            &self.embedding.norm_gain,
            &self.embedding.norm_shift,
            self.spec.layer_norm_eps,
        );
        Ok((
            y,
            EmbedCache {
                tokens: tokens.to_vec(),
                norm,
            },
        ))
    }

    fn block_forward(&self, layer: usize, x: Tensor) -> Tensor {
        let b = &self.blocks[layer - 1];
        let eps = self.spec.layer_norm_eps;
        let act = self.spec.activation;
        let a = nn::multi_head_attention(&x, &b.attention, self.spec.heads).expect("validated");
        let h1 = nn::layer_norm(&nn::add(&x, &a), &b.attn_norm_gain, &b.attn_norm_shift, eps);
        let pre = nn::linear_forward(&h1, &b.ffn_in, &b.ffn_in_bias).expect("shape");
        let f = nn::linear_forward(&nn::activate(&pre, act), &b.ffn_out, &b.ffn_out_bias)
            .expect("shape");
        let h2 = nn::layer_norm(&nn::add(&h1, &f), &b.ffn_norm_gain, &b.ffn_norm_shift, eps);
        self.adapters[layer - 1].forward(h2, act)
    }

    fn block_forward_train(&self, layer: usize, x: Tensor) -> (Tensor, BlockCache) {
        let b = &self.blocks[layer - 1];
        let eps = self.spec.layer_norm_eps;
        let act = self.spec.activation;
        let (a, attention) =
            nn::multi_head_attention_train(&x, &b.attention, self.spec.heads).expect("validated");
        let (h1, attn_norm) =
            nn::layer_norm_train(&nn::add(&x, &a), &b.attn_norm_gain, &b.attn_norm_shift, eps);
        let pre = nn::linear_forward(&h1, &b.ffn_in, &b.ffn_in_bias).expect("shape");
        let post = nn::activate(&pre, act);
        let f = nn::linear_forward(&post, &b.ffn_out, &b.ffn_out_bias).expect("shape");
        let (h2, ffn_norm) =
            nn::layer_norm_train(&nn::add(&h1, &f), &b.ffn_norm_gain, &b.ffn_norm_shift, eps);
        let (out, adapters) = self.adapters[layer - 1].forward_train(h2, act);
        (
            out,
            BlockCache {
                attention,
                attn_norm,
                attn_normed: h1,
                ffn_pre: pre,
                ffn_act: post,
                ffn_norm,
                adapters,
            },
        )
    }

    fn pool(&self, h: &Tensor) -> Tensor {
        let (batch, seq, n) = (h.shape()[0], h.shape()[1], h.shape()[2]);
        let mut out = Vec::with_capacity(batch * n);
        for b in 0..batch {
            out.extend_from_slice(&h.data()[b * seq * n..][..n]);
        }
        Tensor::new(vec![batch, n], out).expect("shape")
    }

    fn head(&self, h: &Tensor) -> Tensor {
        nn::linear_forward(&self.pool(h), &self.classifier.weight, &self.classifier.bias)
            .expect("shape")
    }

    fn check_boundary(&self, layer: usize, activations: &Tensor) -> Result<()> {
        let lowest = self.lowest_trainable_layer();
        if layer > self.spec.num_layers || layer >= lowest {
            return Err(Error::Boundary {
                boundary: layer,
                lowest_trainable: lowest,
            });
        }
        let s = activations.shape();
        if s.len() != 3 || s[2] != self.spec.hidden || s[1] == 0 || s[1] > self.spec.seqlen {
            return Err(Error::Dimension {
                op: "boundary activations",
                left: s.to_vec(),
                right: vec![0, self.spec.seqlen, self.spec.hidden],
            });
        }
        Ok(())
    }

    /// Output of `layer` for a token batch (`0` = embeddings).
    pub fn layer_output(&self, tokens: &[Vec<usize>], layer: usize) -> Result<Tensor> {
        if layer > self.spec.num_layers {
            return Err(Error::Config(format!(
                "layer {layer} exceeds model depth {}",
                self.spec.num_layers
            )));
        }
        let x = self.embed(tokens)?;
        Ok((1..=layer).fold(x, |x, l| self.block_forward(l, x)))
    }

    /// Apply block `layer` (and its adapters) to the output of `layer - 1`.
    pub fn apply_layer(&self, layer: usize, input: Tensor) -> Result<Tensor> {
        if layer == 0 || layer > self.spec.num_layers {
            return Err(Error::Config(format!(
                "layer {layer} is outside 1..={}",
                self.spec.num_layers
            )));
        }
        Ok(self.block_forward(layer, input))
    }

    /// Logits for a token batch, `[B, num_labels]`.
    pub fn forward(&self, tokens: &[Vec<usize>]) -> Result<Tensor> {
        let h = self.layer_output(tokens, self.spec.num_layers)?;
        Ok(self.head(&h))
    }

    /// Logits when the output of `layer` is already known.
    ///
    /// Fails unless every layer up to `layer` is frozen and adapter-free.
    pub fn forward_from_boundary(&self, layer: usize, activations: &Tensor) -> Result<Tensor> {
        self.check_boundary(layer, activations)?;
        let h = ((layer + 1)..=self.spec.num_layers)
            .fold(activations.clone(), |x, l| self.block_forward(l, x));
        Ok(self.head(&h))
    }

    pub fn logits(&self, input: ModelInput<'_>) -> Result<Tensor> {
        match input {
            ModelInput::Tokens(t) => self.forward(t),
            ModelInput::Boundary { layer, activations } => {
                self.forward_from_boundary(layer, activations)
            }
        }
    }

    /// Mean cross-entropy for a batch, with gradients of every trainable
    /// parameter written into their (zeroed) gradient buffers.
    pub fn loss_and_grads(&mut self, input: ModelInput<'_>, labels: &[usize]) -> Result<f64> {
        self.zero_grads();
        let lowest = self.lowest_trainable_layer();
        let d = self.spec.num_layers;
        let (mut x, start, embed_cache) = match input {
            ModelInput::Tokens(tokens) => {
                if lowest == 0 {
                    let (x, c) = self.embed_train(tokens)?;
                    (x, 0, Some(c))
                } else {
                    (self.embed(tokens)?, 0, None)
                }
            }
            ModelInput::Boundary { layer, activations } => {
                self.check_boundary(layer, activations)?;
                (activations.clone(), layer, None)
            }
        };
        let mut caches: Vec<Option<BlockCache>> = Vec::with_capacity(d);
        for l in (start + 1)..=d {
            if l >= lowest {
                let (y, c) = self.block_forward_train(l, x);
                caches.push(Some(c));
                x = y;
            } else {
                x = self.block_forward(l, x);
                caches.push(None);
            }
        }
        let pooled = self.pool(&x);
        let logits = nn::linear_forward(&pooled, &self.classifier.weight, &self.classifier.bias)?;
        let (loss, grad_logits) = nn::cross_entropy_loss(&logits, labels)?;

        let Classifier { weight, bias } = &mut self.classifier;
        let grad_pooled = nn::linear_backward(&pooled, weight, bias, &grad_logits, lowest <= d);
        let Some(grad_pooled) = grad_pooled else {
            return Ok(loss);
        };
        let (batch, seq, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut g = vec![0.0; batch * seq * n];
        for b in 0..batch {
            g[b * seq * n..][..n].copy_from_slice(&grad_pooled.data()[b * n..][..n]);
        }
        let mut grad = Tensor::new(vec![batch, seq, n], g)?;

        for l in ((start + 1).max(lowest)..=d).rev() {
            let cache = caches[l - start - 1].take().expect("recorded above lowest");
            let need_below = l > lowest;
            match self.block_backward(l, cache, grad, need_below) {
                Some(g) => grad = g,
                None => return Ok(loss),
            }
        }
        if let Some(cache) = embed_cache {
            self.embed_backward(cache, &grad);
        }
        Ok(loss)
    }

    fn block_backward(
        &mut self,
        layer: usize,
        cache: BlockCache,
        grad_out: Tensor,
        need_below: bool,
    ) -> Option<Tensor> {
        let act = self.spec.activation;
        let heads = self.spec.heads;
        let block = &mut self.blocks[layer - 1];
        let block_trainable = block.is_trainable();
        let through_block = block_trainable || need_below;
        let g = self.adapters[layer - 1].backward(&cache.adapters, grad_out, act, through_block);
        let g = g?;
        let g_sum = nn::layer_norm_backward(
            &cache.ffn_norm,
            &mut block.ffn_norm_gain,
            &mut block.ffn_norm_shift,
            &g,
            true,
        )
        .expect("requested");
        let d_post = nn::linear_backward(
            &cache.ffn_act,
            &mut block.ffn_out,
            &mut block.ffn_out_bias,
            &g_sum,
            true,
        )
        .expect("requested");
        let d_pre = nn::activate_backward(&cache.ffn_pre, &d_post, act);
        let mut g_h1 = nn::linear_backward(
            &cache.attn_normed,
            &mut block.ffn_in,
            &mut block.ffn_in_bias,
            &d_pre,
            true,
        )
        .expect("requested");
        nn::add_assign(&mut g_h1, &g_sum);
        let g_res = nn::layer_norm_backward(
            &cache.attn_norm,
            &mut block.attn_norm_gain,
            &mut block.attn_norm_shift,
            &g_h1,
            true,
        )
        .expect("requested");
        let g_x = nn::multi_head_attention_backward(
            &cache.attention,
            &mut block.attention,
            heads,
            &g_res,
            need_below,
        );
        g_x.map(|mut gx| {
            nn::add_assign(&mut gx, &g_res);
            gx
        })
    }

    fn embed_backward(&mut self, cache: EmbedCache, grad_out: &Tensor) {
        let n = self.spec.hidden;
        let g_raw = nn::layer_norm_backward(
            &cache.norm,
            &mut self.embedding.norm_gain,
            &mut self.embedding.norm_shift,
            grad_out,
            true,
        )
        .expect("requested");
        let seq = grad_out.shape()[1];
        let gr = g_raw.data();
        if let Some(gt) = self.embedding.tokens.grad_mut() {
            for (b, row) in cache.tokens.iter().enumerate() {
                for (s, &t) in row.iter().enumerate() {
                    let src = &gr[(b * seq + s) * n..][..n];
                    for (d, v) in gt[t * n..][..n].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }
        if let Some(gp) = self.embedding.positions.grad_mut() {
            for b in 0..cache.tokens.len() {
                for s in 0..seq {
                    let src = &gr[(b * seq + s) * n..][..n];
                    for (d, v) in gp[s * n..][..n].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Index of the largest logit in each row; ties go to the lower index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.last_dim();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Rows evaluated per forward pass during evaluation.
pub const EVAL_BATCH: usize = 64;

/// Fraction of samples whose highest logit matches the label.
pub fn evaluate(model: &ModelState, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Evaluation("cannot evaluate on an empty shard".into()));
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(EVAL_BATCH) {
        let tokens: Vec<Vec<usize>> = chunk.iter().map(|s| s.tokens.clone()).collect();
        let logits = model.forward(&tokens)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(chunk)
            .filter(|(p, s)| **p == s.label)
            .count();
    }
    Ok(correct as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{insert_adapters, AdapterConfig, MetaAdapter, Stacking};
    use crate::nn::{grad_check, Differentiable, GradCheckOptions};

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            num_layers: 2,
            hidden: 8,
            heads: 2,
            ffn_dim: 16,
            vocab: 13,
            seqlen: 4,
            num_labels: 3,
            ..ModelSpec::default()
        }
    }

    fn tokens(rng: &mut SeededRng, b: usize, s: usize, vocab: usize) -> Vec<Vec<usize>> {
        (0..b).map(|_| (0..s).map(|_| rng.below(vocab)).collect()).collect()
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_model(&tiny_spec(), 9).unwrap();
        let b = build_model(&tiny_spec(), 9).unwrap();
        assert_eq!(a, b);
        let c = build_model(&tiny_spec(), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn backbone_count_matches_buffers() {
        for spec in [tiny_spec(), ModelSpec::default()] {
            let m = build_model(&spec, 1).unwrap();
            let buffers: usize = m
                .parameters()
                .filter(|p| !p.name.starts_with("classifier"))
                .map(Parameter::len)
                .sum();
            assert_eq!(buffers, spec.backbone_param_count());
        }
    }

    #[test]
    fn bert_block_count_by_hand() {
        // 4(768^2 + 768) + 2*768 + (768*3072 + 3072) + (3072*768 + 768) + 2*768
        let spec = ModelSpec::bert_base(20);
        assert_eq!(spec.block_param_count(), 7_087_872);
        assert_eq!(spec.num_layers * spec.block_param_count(), 85_054_464);
    }

    #[test]
    fn depth_zero_trains_classifier_only() {
        let spec = tiny_spec();
        let m = build_model(&spec, 1).unwrap();
        let trainable: usize = m.parameters().filter(|p| p.trainable).map(Parameter::len).sum();
        assert_eq!(trainable, spec.hidden * spec.num_labels + spec.num_labels);
        assert_eq!(m.lowest_trainable_layer(), spec.num_layers + 1);
    }

    #[test]
    fn golden_logits_reproduce() {
        let spec = ModelSpec {
            num_layers: 2,
            hidden: 8,
            heads: 2,
            ffn_dim: 0,
            vocab: 10,
            seqlen: 4,
            num_labels: 2,
            ..ModelSpec::default()
        };
        let m = build_model(&spec, 2024).unwrap();
        let toks = vec![vec![1, 2, 3, 4], vec![9, 0, 5, 5]];
        let a = m.forward(&toks).unwrap();
        let b = build_model(&spec, 2024).unwrap().forward(&toks).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn out_of_range_token_is_a_data_error() {
        let m = build_model(&tiny_spec(), 1).unwrap();
        let err = m.forward(&[vec![0, 1, 13, 2]]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn zero_up_projection_is_identity() {
        let spec = tiny_spec();
        let base = build_model(&spec, 4).unwrap();
        let mut with = base.clone();
        with.adapter_stack_mut(2).units.push(MetaAdapter::zeros("layer2.adapter0", 8, 8));
        // down-projection random, up-projection zero
        with.adapter_stack_mut(2).units[0].down = MetaAdapter::fresh("x", 8, 8, &mut SeededRng::new(1)).down;
        let toks = vec![vec![1, 2, 3, 4]];
        assert!(base.forward(&toks).unwrap().bit_eq(&with.forward(&toks).unwrap()));
    }

    #[test]
    fn boundary_matches_full_forward() {
        let spec = ModelSpec {
            num_layers: 6,
            ..tiny_spec()
        };
        let base = build_model(&spec, 5).unwrap();
        let m = insert_adapters(
            &base,
            AdapterConfig::new(2, 8),
            Stacking::Vertical { step: 8 },
            &mut SeededRng::new(3),
        )
        .unwrap();
        let mut rng = SeededRng::new(6);
        let toks = tokens(&mut rng, 3, 4, spec.vocab);
        let full = m.forward(&toks).unwrap();
        for layer in 0..=4 {
            let acts = m.layer_output(&toks, layer).unwrap();
            let via = m.forward_from_boundary(layer, &acts).unwrap();
            assert!(full.bit_eq(&via), "boundary {layer}");
        }
        let acts = m.layer_output(&toks, 5).unwrap();
        assert!(matches!(
            m.forward_from_boundary(5, &acts),
            Err(Error::Boundary { .. })
        ));
    }

    #[test]
    fn boundary_gradients_match_full_path() {
        let spec = ModelSpec {
            num_layers: 6,
            ..tiny_spec()
        };
        let base = build_model(&spec, 5).unwrap();
        let m = insert_adapters(
            &base,
            AdapterConfig::new(2, 16),
            Stacking::Vertical { step: 8 },
            &mut SeededRng::new(3),
        )
        .unwrap();
        let mut rng = SeededRng::new(7);
        let toks = tokens(&mut rng, 4, 4, spec.vocab);
        let labels = vec![0, 1, 2, 1];
        let mut full = m.clone();
        let l1 = full.loss_and_grads(ModelInput::Tokens(&toks), &labels).unwrap();
        let acts = m.layer_output(&toks, 4).unwrap();
        let mut cached = m.clone();
        let l2 = cached
            .loss_and_grads(
                ModelInput::Boundary {
                    layer: 4,
                    activations: &acts,
                },
                &labels,
            )
            .unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        for (a, b) in full.parameters().zip(cached.parameters()) {
            assert_eq!(a.grad, b.grad, "{}", a.name);
        }
    }

    struct Probe {
        model: ModelState,
        tokens: Vec<Vec<usize>>,
        labels: Vec<usize>,
    }

    impl Differentiable for Probe {
        fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
            self.model.parameters_mut().collect()
        }
        fn loss(&mut self) -> f64 {
            let logits = self.model.forward(&self.tokens).unwrap();
            nn::cross_entropy_loss(&logits, &self.labels).unwrap().0
        }
        fn loss_and_grads(&mut self) -> f64 {
            self.model
                .loss_and_grads(ModelInput::Tokens(&self.tokens), &self.labels)
                .unwrap()
        }
    }

    #[test]
    fn adapter_model_gradients() {
        let spec = tiny_spec();
        let base = build_model(&spec, 8).unwrap();
        let mut m = insert_adapters(
            &base,
            AdapterConfig::new(2, 16),
            Stacking::Vertical { step: 8 },
            &mut SeededRng::new(1),
        )
        .unwrap();
        // larger adapter weights so their gradients are not vanishingly small
        for p in m.parameters_mut().filter(|p| p.name.contains("adapter")) {
            for v in p.value.data_mut() {
                *v *= 10.0;
            }
        }
        let mut rng = SeededRng::new(2);
        let mut probe = Probe {
            tokens: tokens(&mut rng, 3, 4, spec.vocab),
            labels: vec![0, 2, 1],
            model: m,
        };
        let err = grad_check(&mut probe, GradCheckOptions::default());
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn full_model_gradients() {
        let spec = tiny_spec();
        let mut m = build_model(&spec, 8).unwrap();
        m.set_tuning_mode(TuningMode::Full).unwrap();
        let mut rng = SeededRng::new(3);
        let mut probe = Probe {
            tokens: tokens(&mut rng, 3, 4, spec.vocab),
            labels: vec![1, 2, 0],
            model: m,
        };
        let err = grad_check(&mut probe, GradCheckOptions::default());
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn layer_freeze_only_trains_top_blocks() {
        let spec = ModelSpec {
            num_layers: 3,
            ..tiny_spec()
        };
        let mut m = build_model(&spec, 8).unwrap();
        m.set_tuning_mode(TuningMode::LayerFreeze { frozen: 2 }).unwrap();
        assert_eq!(m.lowest_trainable_layer(), 3);
        let trainable: usize = m.parameters().filter(|p| p.trainable).map(Parameter::len).sum();
        assert_eq!(trainable, spec.block_param_count() + spec.classifier_param_count());
        let mut rng = SeededRng::new(3);
        let mut probe = Probe {
            tokens: tokens(&mut rng, 2, 4, spec.vocab),
            labels: vec![1, 0],
            model: m,
        };
        let err = grad_check(&mut probe, GradCheckOptions::default());
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn evaluate_perfect_bias() {
        let spec = tiny_spec();
        let mut m = build_model(&spec, 1).unwrap();
        m.classifier_mut().bias.value.data_mut()[1] = 1e3;
        let samples: Vec<Sample> = (0..10)
            .map(|i| Sample {
                tokens: vec![i % 13, 1, 2, 3],
                label: 1,
            })
            .collect();
        assert_eq!(evaluate(&m, &samples).unwrap(), 1.0);
        assert!(matches!(evaluate(&m, &[]), Err(Error::Evaluation(_))));
    }
}
