//! Shared-private encoder-decoders.
//!
//! A [`ShapedModel`] holds one shared encoder/decoder stack and one private
//! stack per style. Each style path concatenates its private and shared
//! states, attends over the concatenated encoder states and projects through
//! the output network; attention, embedding and output parameters exist once
//! and are used by every path. The single-stack `Shared` and `Private`
//! variants are the baselines trained with the same machinery.
//!
//! With an unknown input style, a style classifier over pooled private
//! encoder states weights the per-style output distributions.

use std::fmt;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{StyledExample, BOS, EOS};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::nn::{
    attend, encode_bidir, gru_cell, output_logits, AttentionMemory, AttentionParams,
    BidirEncoding, EmbeddingParams, GruParams, Init, Linear, OutputNetParams,
};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub type StyleId = usize;

/// Ordered, non-empty set of unique style names; a style's id is its index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StyleSet {
    names: Vec<String>,
}

impl StyleSet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidArgument("style set is empty".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.contains(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("bad style name {n:?}")));
            }
            if names[..i].contains(n) {
                return Err(Error::InvalidArgument(format!("duplicate style {n}")));
            }
        }
        Ok(StyleSet { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: StyleId) -> Result<&str> {
        self.names
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownStyle(format!("#{id}")))
    }

    pub fn id(&self, name: &str) -> Result<StyleId> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownStyle(name.to_string()))
    }

    pub fn check(&self, id: StyleId) -> Result<StyleId> {
        self.name(id).map(|_| id)
    }
}

/// Which parameter groups a model carries and how it decodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Shared stack plus one private stack per style, with the style
    /// classifier.
    Shaped,
    /// A single stack trained on every style.
    Shared,
    /// A single stack trained on one style only.
    Private(StyleId),
}

impl Variant {
    pub fn to_string(&self, styles: &StyleSet) -> String {
        match self {
            Variant::Shaped => "shaped".into(),
            Variant::Shared => "shared".into(),
            Variant::Private(z) => format!("private:{}", styles.names[*z]),
        }
    }

    pub fn parse(s: &str, styles: &StyleSet) -> Result<Self> {
        match s {
            "shaped" | "SHAPED" | "SP" => Ok(Variant::Shaped),
            "shared" | "S" => Ok(Variant::Shared),
            _ => match s.split_once(':') {
                Some(("private" | "P", name)) => Ok(Variant::Private(styles.id(name)?)),
                _ => Err(Error::InvalidArgument(format!("unknown variant {s:?}"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub layers: usize,
    pub attention: usize,
    pub classifier_hidden: usize,
    pub init_scale: f64,
}

impl ModelConfig {
    pub fn new(vocab: usize) -> Self {
        ModelConfig {
            vocab,
            embed: 32,
            hidden: 32,
            layers: 1,
            attention: 32,
            classifier_hidden: 32,
            init_scale: 0.08,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 5
            || self.embed == 0
            || self.hidden == 0
            || self.layers == 0
            || self.attention == 0
            || self.classifier_hidden == 0
            || !(self.init_scale >= 0.0)
        {
            return Err(Error::InvalidArgument(format!("invalid model config {self:?}")));
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        kv.set("vocab", self.vocab);
        kv.set("embed", self.embed);
        kv.set("hidden", self.hidden);
        kv.set("layers", self.layers);
        kv.set("attention", self.attention);
        kv.set("classifier_hidden", self.classifier_hidden);
        kv.set("init_scale", self.init_scale);
    }

    /// Reads the model keys from `kv`, falling back to defaults.
    pub fn read_kv(kv: &mut KvMap, vocab: usize) -> Result<Self> {
        let d = ModelConfig::new(vocab);
        let hidden = kv.take_or("hidden", d.hidden)?;
        let c = ModelConfig {
            vocab: kv.take_or("vocab", vocab)?,
            embed: kv.take_or("embed", d.embed)?,
            hidden,
            layers: kv.take_or("layers", d.layers)?,
            attention: kv.take_or("attention", hidden)?,
            classifier_hidden: kv.take_or("classifier_hidden", hidden)?,
            init_scale: kv.take_or("init_scale", d.init_scale)?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// One encoder/decoder stack: bidirectional encoder layers, decoder layers,
/// and per-layer maps from `[forward_final, backward_final]` to the
/// decoder's initial state.
#[derive(Clone, Debug, PartialEq)]
pub struct StackParams {
    pub encoder: Vec<(GruParams, GruParams)>,
    pub decoder: Vec<GruParams>,
    pub init: Vec<Linear>,
}

impl StackParams {
    fn dims(cfg: &ModelConfig, layer: usize) -> (usize, usize) {
        let h = cfg.hidden;
        if layer == 0 {
            (cfg.embed, cfg.embed)
        } else {
            (2 * h, h)
        }
    }

    fn register(store: &mut ParamStore, init: &mut Init, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let h = cfg.hidden;
        let mut s = StackParams {
            encoder: Vec::new(),
            decoder: Vec::new(),
            init: Vec::new(),
        };
        for l in 0..cfg.layers {
            let (enc_in, dec_in) = Self::dims(cfg, l);
            let f = GruParams::register(store, init, &format!("{prefix}/enc_fwd.{l}"), enc_in, h)?;
            let b = GruParams::register(store, init, &format!("{prefix}/enc_bwd.{l}"), enc_in, h)?;
            s.encoder.push((f, b));
            s.decoder
                .push(GruParams::register(store, init, &format!("{prefix}/dec.{l}"), dec_in, h)?);
            s.init
                .push(Linear::register(store, init, &format!("{prefix}/init.{l}"), 2 * h, h)?);
        }
        Ok(s)
    }

    fn bind(store: &ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let h = cfg.hidden;
        let mut s = StackParams {
            encoder: Vec::new(),
            decoder: Vec::new(),
            init: Vec::new(),
        };
        for l in 0..cfg.layers {
            let (enc_in, dec_in) = Self::dims(cfg, l);
            let f = GruParams::bind(store, &format!("{prefix}/enc_fwd.{l}"), enc_in, h)?;
            let b = GruParams::bind(store, &format!("{prefix}/enc_bwd.{l}"), enc_in, h)?;
            s.encoder.push((f, b));
            s.decoder
                .push(GruParams::bind(store, &format!("{prefix}/dec.{l}"), dec_in, h)?);
            s.init
                .push(Linear::bind(store, &format!("{prefix}/init.{l}"), 2 * h, h)?);
        }
        Ok(s)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (f, b) in &self.encoder {
            ids.extend(f.ids());
            ids.extend(b.ids());
        }
        for d in &self.decoder {
            ids.extend(d.ids());
        }
        for i in &self.init {
            ids.extend(i.ids());
        }
        ids
    }

    pub fn decoder_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for d in &self.decoder {
            ids.extend(d.ids());
        }
        for i in &self.init {
            ids.extend(i.ids());
        }
        ids
    }

    pub fn encoder_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (f, b) in &self.encoder {
            ids.extend(f.ids());
            ids.extend(b.ids());
        }
        ids
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub hidden: Linear,
    pub output: Linear,
}

/// Handles for every parameter group of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapedParams {
    pub shared: Option<StackParams>,
    /// Indexed by style; `None` where the variant has no stack for it.
    pub private: Vec<Option<StackParams>>,
    pub attention: AttentionParams,
    pub embedding: EmbeddingParams,
    pub output: OutputNetParams,
    pub classifier: Option<ClassifierParams>,
}

/// A decoding path: one style through its private (and, for the SHAPED
/// variant, the shared) stack, or the shared stack alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    Style(StyleId),
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StyleSelection {
    All,
    One(StyleId),
}

/// Encoder outputs for one input sequence.
#[derive(Clone, Debug)]
pub struct EncodedInput {
    pub len: usize,
    pub shared: Option<BidirEncoding>,
    pub private: Vec<Option<BidirEncoding>>,
    memories: Vec<(Route, AttentionMemory)>,
}

impl EncodedInput {
    /// Concatenated encoder states `[T, width]` attended over by `route`.
    pub fn states(&self, route: Route) -> Option<Var> {
        self.memory(route).map(|m| m.states)
    }

    fn memory(&self, route: Route) -> Option<&AttentionMemory> {
        self.memories
            .iter()
            .find(|(r, _)| *r == route)
            .map(|(_, m)| m)
    }
}

/// Per-layer hidden states of every decoder stack in use.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub shared: Option<Vec<Var>>,
    pub private: Vec<Option<Vec<Var>>>,
}

/// Classifier distribution over the in-domain styles.
#[derive(Clone, Debug, PartialEq)]
pub struct StylePosterior {
    pub p: Vec<f64>,
}

impl StylePosterior {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        let sum: f64 = p.iter().sum();
        if p.is_empty() || p.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("not a distribution: {p:?}")));
        }
        Ok(StylePosterior { p })
    }

    pub fn uniform(n: usize) -> Self {
        StylePosterior {
            p: vec![1.0 / n as f64; n],
        }
    }

    pub fn one_hot(n: usize, z: StyleId) -> Self {
        let mut p = vec![0.0; n];
        p[z] = 1.0;
        StylePosterior { p }
    }

    pub fn argmax(&self) -> StyleId {
        argmax(&self.p)
    }
}

/// Posterior-weighted sum of per-style distributions.
pub fn mix(g: &mut Graph<'_>, posterior: &StylePosterior, dists: &[Var]) -> Result<Var> {
    if posterior.p.len() != dists.len() || dists.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} distributions",
            posterior.p.len(),
            dists.len()
        )));
    }
    let terms: Vec<Var> = posterior
        .p
        .iter()
        .zip(dists)
        .map(|(&w, &d)| g.scale(d, w))
        .collect();
    g.add_all(&terms)
}

/// Lowest index among the maxima.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub enum GenerationMode {
    /// Known in-domain style.
    Shaped(StyleId),
    /// Classifier-weighted mixture over all styles.
    Mixture,
    /// Equal weights over all styles.
    UniformMixture,
    /// Mixture with caller-supplied weights.
    Weighted(StylePosterior),
    SharedOnly,
    PrivateOnly(StyleId),
}

impl GenerationMode {
    pub fn parse(s: &str, styles: &StyleSet) -> Result<Self> {
        match s {
            "mixture" => Ok(GenerationMode::Mixture),
            "uniform" => Ok(GenerationMode::UniformMixture),
            "shared" => Ok(GenerationMode::SharedOnly),
            _ => match s.split_once(':') {
                Some(("shaped", n)) => Ok(GenerationMode::Shaped(styles.id(n)?)),
                Some(("private", n)) => Ok(GenerationMode::PrivateOnly(styles.id(n)?)),
                _ => Err(Error::InvalidArgument(format!("unknown mode {s:?}"))),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decoding {
    Greedy,
    Sample { seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    /// Multiplier on the style-label term.
    pub classifier_weight: f64,
    /// Cut the classifier's gradient into the private encoders.
    pub classifier_stop_grad: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            classifier_weight: 1.0,
            classifier_stop_grad: false,
        }
    }
}

/// Scalar nodes of a batch loss.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub classifier: Option<Var>,
    pub sequence: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapedModel {
    config: ModelConfig,
    styles: StyleSet,
    variant: Variant,
    store: ParamStore,
    params: ShapedParams,
}

impl fmt::Display for ShapedModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} model, {} styles, {} parameters",
            self.variant.to_string(&self.styles),
            self.styles.len(),
            self.store.num_scalars()
        )
    }
}

fn private_prefix(z: StyleId) -> String {
    format!("private.{z}")
}

impl ShapedModel {
    /// Fresh model with parameters drawn uniformly from
    /// `[-init_scale, init_scale]`.
    pub fn new(config: ModelConfig, styles: StyleSet, variant: Variant, seed: u64) -> Result<Self> {
        config.validate()?;
        if let Variant::Private(z) = variant {
            styles.check(z)?;
        }
        let mut store = ParamStore::new();
        let mut init = Init::uniform(seed, config.init_scale);
        let cfg = &config;
        let embedding = EmbeddingParams::register(&mut store, &mut init, "embedding", cfg.vocab, cfg.embed)?;
        let shared = match variant {
            Variant::Private(_) => None,
            _ => Some(StackParams::register(&mut store, &mut init, "shared", cfg)?),
        };
        let private = (0..styles.len())
            .map(|z| match variant {
                Variant::Shaped => {
                    StackParams::register(&mut store, &mut init, &private_prefix(z), cfg).map(Some)
                }
                Variant::Private(p) if p == z => {
                    StackParams::register(&mut store, &mut init, &private_prefix(z), cfg).map(Some)
                }
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        let (mem_w, state_w) = Self::widths(cfg, variant);
        let attention =
            AttentionParams::register(&mut store, &mut init, "attention", mem_w, state_w, cfg.attention)?;
        let output = OutputNetParams::register(&mut store, &mut init, "output", mem_w + state_w, &embedding)?;
        let classifier = match variant {
            Variant::Shaped => Some(ClassifierParams {
                hidden: Linear::register(
                    &mut store,
                    &mut init,
                    "classifier/hidden",
                    styles.len() * 2 * cfg.hidden,
                    cfg.classifier_hidden,
                )?,
                output: Linear::register(
                    &mut store,
                    &mut init,
                    "classifier/output",
                    cfg.classifier_hidden,
                    styles.len(),
                )?,
            }),
            _ => None,
        };
        let params = ShapedParams {
            shared,
            private,
            attention,
            embedding,
            output,
            classifier,
        };
        Ok(ShapedModel {
            config,
            styles,
            variant,
            store,
            params,
        })
    }

    /// Reassembles a model from stored tensors, checking every shape.
    pub fn from_store(
        config: ModelConfig,
        styles: StyleSet,
        variant: Variant,
        store: ParamStore,
    ) -> Result<Self> {
        config.validate()?;
        if let Variant::Private(z) = variant {
            styles.check(z)?;
        }
        let cfg = &config;
        let embedding = EmbeddingParams::bind(&store, "embedding", cfg.vocab, cfg.embed)?;
        let shared = match variant {
            Variant::Private(_) => None,
            _ => Some(StackParams::bind(&store, "shared", cfg)?),
        };
        let private = (0..styles.len())
            .map(|z| match variant {
                Variant::Shaped => StackParams::bind(&store, &private_prefix(z), cfg).map(Some),
                Variant::Private(p) if p == z => {
                    StackParams::bind(&store, &private_prefix(z), cfg).map(Some)
                }
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        let (mem_w, state_w) = Self::widths(cfg, variant);
        let attention = AttentionParams::bind(&store, "attention", mem_w, state_w, cfg.attention)?;
        let output = OutputNetParams::bind(&store, "output", mem_w + state_w, &embedding)?;
        let classifier = match variant {
            Variant::Shaped => Some(ClassifierParams {
                hidden: Linear::bind(
                    &store,
                    "classifier/hidden",
                    styles.len() * 2 * cfg.hidden,
                    cfg.classifier_hidden,
                )?,
                output: Linear::bind(&store, "classifier/output", cfg.classifier_hidden, styles.len())?,
            }),
            _ => None,
        };
        let expected = 1
            + shared.as_ref().map_or(0, |s| s.ids().len())
            + private.iter().flatten().map(|s| s.ids().len()).sum::<usize>()
            + 3
            + 3
            + if classifier.is_some() { 4 } else { 0 };
        if expected != store.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint holds {} tensors, model expects {}",
                store.len(),
                expected
            )));
        }
        let params = ShapedParams {
            shared,
            private,
            attention,
            embedding,
            output,
            classifier,
        };
        Ok(ShapedModel {
            config,
            styles,
            variant,
            store,
            params,
        })
    }

    /// (attention memory width, decoder state width) of one route.
    fn widths(cfg: &ModelConfig, variant: Variant) -> (usize, usize) {
        let stacks = if variant == Variant::Shaped { 2 } else { 1 };
        (stacks * 2 * cfg.hidden, stacks * cfg.hidden)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn styles(&self) -> &StyleSet {
        &self.styles
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn params(&self) -> &ShapedParams {
        &self.params
    }

    /// Route used to decode an example labelled `style`.
    pub fn route_for(&self, style: Option<StyleId>) -> Result<Route> {
        match (self.variant, style) {
            (Variant::Shared, _) => Ok(Route::Shared),
            (Variant::Shaped, Some(z)) => Ok(Route::Style(self.styles.check(z)?)),
            (Variant::Shaped, None) => Err(Error::InvalidArgument(
                "the SHAPED path needs a style label".into(),
            )),
            (Variant::Private(p), Some(z)) if z != p => Err(Error::InvalidArgument(format!(
                "private model for style {} cannot decode style {}",
                self.styles.names[p],
                self.styles.name(z)?
            ))),
            (Variant::Private(p), _) => Ok(Route::Style(p)),
        }
    }

    fn route_stacks(&self, route: Route) -> Result<Vec<&StackParams>> {
        let missing = || Error::InvalidArgument(format!("route {route:?} is not available"));
        match route {
            Route::Shared => match self.variant {
                Variant::Shared => Ok(vec![self.params.shared.as_ref().ok_or_else(missing)?]),
                _ => Err(missing()),
            },
            Route::Style(z) => {
                self.styles.check(z)?;
                let private = self.params.private[z].as_ref().ok_or_else(missing)?;
                match self.variant {
                    Variant::Shaped => Ok(vec![private, self.params.shared.as_ref().ok_or_else(missing)?]),
                    _ => Ok(vec![private]),
                }
            }
        }
    }

    fn encoder_layers(stack: &StackParams) -> &[(GruParams, GruParams)] {
        &stack.encoder
    }

    /// Runs the shared encoder and the private encoders of the selected
    /// styles, then forms the per-route concatenated state sequences.
    pub fn encode_all(
        &self,
        g: &mut Graph<'_>,
        ids: &[usize],
        selection: StyleSelection,
    ) -> Result<EncodedInput> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("cannot encode an empty sequence".into()));
        }
        let emb = &self.params.embedding;
        let wanted: Vec<StyleId> = match selection {
            StyleSelection::All => (0..self.styles.len())
                .filter(|&z| self.params.private[z].is_some())
                .collect(),
            StyleSelection::One(z) => {
                self.styles.check(z)?;
                if self.variant != Variant::Shared && self.params.private[z].is_none() {
                    return Err(Error::InvalidArgument(format!(
                        "no private stack for style {}",
                        self.styles.names[z]
                    )));
                }
                if self.variant == Variant::Shared {
                    Vec::new()
                } else {
                    vec![z]
                }
            }
        };
        let shared = match &self.params.shared {
            Some(s) => Some(encode_bidir(g, ids, Self::encoder_layers(s), emb)?),
            None => None,
        };
        let mut private = vec![None; self.styles.len()];
        for &z in &wanted {
            let stack = self.params.private[z].as_ref().expect("checked above");
            private[z] = Some(encode_bidir(g, ids, Self::encoder_layers(stack), emb)?);
        }
        let mut memories = Vec::new();
        let att = &self.params.attention;
        match self.variant {
            Variant::Shared => {
                let s = shared.as_ref().expect("shared variant has a shared stack");
                memories.push((Route::Shared, AttentionMemory::new(g, s.states, att)?));
            }
            Variant::Private(z) => {
                let p = private[z].as_ref().expect("private stack encoded");
                memories.push((Route::Style(z), AttentionMemory::new(g, p.states, att)?));
            }
            Variant::Shaped => {
                let s = shared.as_ref().expect("shaped variant has a shared stack");
                for &z in &wanted {
                    let p = private[z].as_ref().expect("private stack encoded");
                    let cat = g.concat(&[p.states, s.states])?;
                    memories.push((Route::Style(z), AttentionMemory::new(g, cat, att)?));
                }
            }
        }
        Ok(EncodedInput {
            len: ids.len(),
            shared,
            private,
            memories,
        })
    }

    /// Decoder initial states for every encoded stack.
    pub fn initial_state(&self, g: &mut Graph<'_>, enc: &EncodedInput) -> Result<DecoderState> {
        let init = |g: &mut Graph<'_>, stack: &StackParams, e: &BidirEncoding| -> Result<Vec<Var>> {
            stack
                .init
                .iter()
                .zip(&e.finals)
                .map(|(lin, &f)| lin.apply(g, f))
                .collect()
        };
        let shared = match (&self.params.shared, &enc.shared) {
            (Some(s), Some(e)) => Some(init(g, s, e)?),
            _ => None,
        };
        let mut private = vec![None; self.styles.len()];
        for (z, e) in enc.private.iter().enumerate() {
            if let (Some(stack), Some(e)) = (&self.params.private[z], e) {
                private[z] = Some(init(g, stack, e)?);
            }
        }
        Ok(DecoderState { shared, private })
    }

    fn advance_stack(
        g: &mut Graph<'_>,
        stack: &StackParams,
        x: Var,
        prev: &[Var],
    ) -> Result<Vec<Var>> {
        let mut input = x;
        let mut next = Vec::with_capacity(prev.len());
        for (p, &h) in stack.decoder.iter().zip(prev) {
            let h2 = gru_cell(g, input, h, p)?;
            next.push(h2);
            input = h2;
        }
        Ok(next)
    }

    /// Advances the shared decoder once and the private decoders of the
    /// selected styles once, all on the embedding of `y_prev`.
    pub fn advance(
        &self,
        g: &mut Graph<'_>,
        state: &DecoderState,
        y_prev: usize,
        selection: StyleSelection,
    ) -> Result<DecoderState> {
        if y_prev >= self.config.vocab {
            return Err(Error::TokenOutOfRange {
                id: y_prev,
                size: self.config.vocab,
            });
        }
        let x = self.params.embedding.lookup_one(g, y_prev)?;
        let shared = match (&self.params.shared, &state.shared) {
            (Some(stack), Some(prev)) => Some(Self::advance_stack(g, stack, x, prev)?),
            _ => None,
        };
        let mut private = vec![None; self.styles.len()];
        for z in 0..self.styles.len() {
            let selected = match selection {
                StyleSelection::All => true,
                StyleSelection::One(s) => s == z,
            };
            if !selected {
                continue;
            }
            if let (Some(stack), Some(prev)) = (&self.params.private[z], &state.private[z]) {
                private[z] = Some(Self::advance_stack(g, stack, x, prev)?);
            }
        }
        Ok(DecoderState { shared, private })
    }

    /// Output distribution of `route` given already-advanced decoder states.
    pub fn route_distribution(
        &self,
        g: &mut Graph<'_>,
        route: Route,
        enc: &EncodedInput,
        state: &DecoderState,
    ) -> Result<Var> {
        let stacks = self.route_stacks(route)?;
        let memory = *enc.memory(route).ok_or_else(|| {
            Error::InvalidArgument(format!("input was not encoded for route {route:?}"))
        })?;
        let top = |v: &Option<Vec<Var>>| -> Result<Var> {
            v.as_ref()
                .and_then(|l| l.last().copied())
                .ok_or_else(|| Error::InvalidArgument(format!("decoder state missing for {route:?}")))
        };
        let s = match (route, stacks.len()) {
            (Route::Shared, _) => top(&state.shared)?,
            (Route::Style(z), 1) => top(&state.private[z])?,
            (Route::Style(z), _) => {
                let sz = top(&state.private[z])?;
                let ss = top(&state.shared)?;
                g.concat(&[sz, ss])?
            }
        };
        let (_, context) = attend(g, &memory, s, &self.params.attention)?;
        let logits = output_logits(g, context, s, &self.params.output, &self.params.embedding)?;
        g.softmax(logits)
    }

    /// One SHAPED decoding step for style `z` (the baselines' single route
    /// for the other variants). Returns the distribution over the vocabulary
    /// and the advanced decoder state.
    pub fn shaped_step(
        &self,
        g: &mut Graph<'_>,
        z: Option<StyleId>,
        enc: &EncodedInput,
        state: &DecoderState,
        y_prev: usize,
    ) -> Result<(Var, DecoderState)> {
        let route = self.route_for(z)?;
        let selection = match route {
            Route::Style(z) => StyleSelection::One(z),
            Route::Shared => StyleSelection::All,
        };
        let next = self.advance(g, state, y_prev, selection)?;
        let dist = self.route_distribution(g, route, enc, &next)?;
        Ok((dist, next))
    }

    fn check_full_encoding(&self, enc: &EncodedInput) -> Result<()> {
        if self.variant != Variant::Shaped {
            return Err(Error::InvalidArgument(
                "style mixtures need a SHAPED model".into(),
            ));
        }
        if enc.private.iter().any(Option::is_none) {
            return Err(Error::InvalidArgument(
                "input lacks some private encodings".into(),
            ));
        }
        Ok(())
    }

    /// Classifier posterior node over the styles.
    pub fn classify_style(&self, g: &mut Graph<'_>, enc: &EncodedInput, stop_grad: bool) -> Result<Var> {
        self.check_full_encoding(enc)?;
        let cls = self.params.classifier.as_ref().expect("shaped model has a classifier");
        let mean = g.constant(Tensor::vector(vec![1.0 / enc.len as f64; enc.len]));
        let mut pooled = Vec::with_capacity(self.styles.len());
        for e in enc.private.iter().flatten() {
            let states = if stop_grad { g.detach(e.states) } else { e.states };
            pooled.push(g.matmul(mean, states)?);
        }
        let features = g.concat(&pooled)?;
        let pre = cls.hidden.apply(g, features)?;
        let h = g.tanh(pre);
        let logits = cls.output.apply(g, h)?;
        g.softmax(logits)
    }

    /// `Σ_d posterior_d · p_d(o_t)`, advancing the shared decoder once and
    /// every private decoder once.
    pub fn mixture_step(
        &self,
        g: &mut Graph<'_>,
        enc: &EncodedInput,
        state: &DecoderState,
        y_prev: usize,
        posterior: &StylePosterior,
    ) -> Result<(Var, DecoderState)> {
        self.check_full_encoding(enc)?;
        if posterior.p.len() != self.styles.len() {
            return Err(Error::InvalidArgument(format!(
                "posterior over {} styles, model has {}",
                posterior.p.len(),
                self.styles.len()
            )));
        }
        let next = self.advance(g, state, y_prev, StyleSelection::All)?;
        let dists = (0..self.styles.len())
            .map(|z| self.route_distribution(g, Route::Style(z), enc, &next))
            .collect::<Result<Vec<_>>>()?;
        Ok((mix(g, posterior, &dists)?, next))
    }

    fn check_tokens(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.config.vocab) {
            Some(&id) => Err(Error::TokenOutOfRange {
                id,
                size: self.config.vocab,
            }),
            None => Ok(()),
        }
    }

    fn nll_from_encoding(
        &self,
        g: &mut Graph<'_>,
        enc: &EncodedInput,
        target: &[usize],
        route: Route,
    ) -> Result<Var> {
        if target.last() != Some(&EOS) {
            return Err(Error::InvalidArgument("target must end with EOS".into()));
        }
        self.check_tokens(target)?;
        let selection = match route {
            Route::Style(z) => StyleSelection::One(z),
            Route::Shared => StyleSelection::All,
        };
        let mut state = self.initial_state(g, enc)?;
        let mut prev = BOS;
        let mut terms = Vec::with_capacity(target.len());
        for &y in target {
            state = self.advance(g, &state, prev, selection)?;
            let dist = self.route_distribution(g, route, enc, &state)?;
            let p = g.pick(dist, y)?;
            let lp = g.log(p);
            terms.push(lp);
            prev = y;
        }
        let total = g.add_all(&terms)?;
        Ok(g.negate(total))
    }

    /// `-Σ_t log p(y_t | x, y_<t, z)` under teacher forcing.
    pub fn sequence_nll(
        &self,
        g: &mut Graph<'_>,
        source: &[usize],
        target: &[usize],
        z: Option<StyleId>,
    ) -> Result<Var> {
        self.check_tokens(source)?;
        let route = self.route_for(z)?;
        let selection = match route {
            Route::Style(z) => StyleSelection::One(z),
            Route::Shared => StyleSelection::All,
        };
        let enc = self.encode_all(g, source, selection)?;
        self.nll_from_encoding(g, &enc, target, route)
    }

    /// `Σ_i [-w · log p(z_i | x_i) - log p(y_i | x_i, z_i)]`. The style term
    /// exists only for the SHAPED variant, which encodes every input with
    /// all private encoders but decodes along the true style only.
    pub fn joint_loss(
        &self,
        g: &mut Graph<'_>,
        batch: &[StyledExample],
        options: LossOptions,
    ) -> Result<LossParts> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut seq_terms = Vec::with_capacity(batch.len());
        let mut cls_terms = Vec::new();
        for ex in batch {
            self.check_tokens(&ex.source)?;
            let route = match self.variant {
                Variant::Shared => Route::Shared,
                _ => {
                    let z = ex.style.ok_or_else(|| {
                        Error::InvalidArgument("unlabelled example in a style-aware batch".into())
                    })?;
                    self.route_for(Some(z))?
                }
            };
            let selection = match self.variant {
                Variant::Shaped => StyleSelection::All,
                _ => match route {
                    Route::Style(z) => StyleSelection::One(z),
                    Route::Shared => StyleSelection::All,
                },
            };
            let enc = self.encode_all(g, &ex.source, selection)?;
            if self.variant == Variant::Shaped {
                let z = ex.style.expect("checked above");
                let post = self.classify_style(g, &enc, options.classifier_stop_grad)?;
                let pz = g.pick(post, z)?;
                let lp = g.log(pz);
                cls_terms.push(g.scale(lp, -options.classifier_weight));
            }
            seq_terms.push(self.nll_from_encoding(g, &enc, &ex.target, route)?);
        }
        let sequence = g.add_all(&seq_terms)?;
        let (total, classifier) = if cls_terms.is_empty() {
            (sequence, None)
        } else {
            let c = g.add_all(&cls_terms)?;
            (g.add(c, sequence)?, Some(c))
        };
        Ok(LossParts {
            total,
            classifier,
            sequence,
        })
    }

    /// Classifier posterior for a source sequence.
    pub fn posterior(&self, source: &[usize]) -> Result<StylePosterior> {
        self.check_tokens(source)?;
        let mut g = Graph::new(&self.store);
        let enc = self.encode_all(&mut g, source, StyleSelection::All)?;
        let p = self.classify_style(&mut g, &enc, false)?;
        Ok(StylePosterior {
            p: g.value(p).data().to_vec(),
        })
    }

    pub fn sequence_nll_value(&self, source: &[usize], target: &[usize], z: Option<StyleId>) -> Result<f64> {
        let mut g = Graph::new(&self.store);
        let l = self.sequence_nll(&mut g, source, target, z)?;
        Ok(g.value(l).item())
    }

    pub fn session(&self, source: &[usize], mode: &GenerationMode) -> Result<DecodeSession<'_>> {
        DecodeSession::new(self, source, mode)
    }

    /// Decodes until EOS (included in the output) or `max_len` tokens.
    pub fn generate(
        &self,
        source: &[usize],
        mode: &GenerationMode,
        max_len: usize,
        decoding: Decoding,
    ) -> Result<Vec<usize>> {
        if max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be at least 1".into()));
        }
        let mut session = self.session(source, mode)?;
        let mut rng = match decoding {
            Decoding::Sample { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Decoding::Greedy => None,
        };
        let mut out = Vec::new();
        let mut prev = BOS;
        while out.len() < max_len {
            let dist = session.step(prev)?;
            let tok = match rng.as_mut() {
                None => argmax(&dist),
                Some(r) => WeightedIndex::new(&dist)
                    .map_err(|e| Error::InvalidArgument(format!("bad distribution: {e}")))?
                    .sample(r),
            };
            out.push(tok);
            if tok == EOS {
                break;
            }
            prev = tok;
        }
        Ok(out)
    }
}

enum SessionKind {
    Single(Route),
    Mixture(StylePosterior),
}

/// Incremental decoder over one source sequence.
pub struct DecodeSession<'m> {
    model: &'m ShapedModel,
    g: Graph<'m>,
    enc: EncodedInput,
    state: DecoderState,
    kind: SessionKind,
}

impl<'m> DecodeSession<'m> {
    fn new(model: &'m ShapedModel, source: &[usize], mode: &GenerationMode) -> Result<Self> {
        model.check_tokens(source)?;
        let need = |v: Variant| -> Result<()> {
            if model.variant != v {
                return Err(Error::InvalidArgument(format!(
                    "mode {mode:?} needs a {} model, got {}",
                    v.to_string(&model.styles),
                    model.variant.to_string(&model.styles)
                )));
            }
            Ok(())
        };
        let (selection, kind) = match mode {
            GenerationMode::Shaped(z) => {
                need(Variant::Shaped)?;
                model.styles.check(*z)?;
                (StyleSelection::One(*z), SessionKind::Single(Route::Style(*z)))
            }
            GenerationMode::SharedOnly => {
                need(Variant::Shared)?;
                (StyleSelection::All, SessionKind::Single(Route::Shared))
            }
            GenerationMode::PrivateOnly(z) => {
                need(Variant::Private(*z))?;
                (StyleSelection::One(*z), SessionKind::Single(Route::Style(*z)))
            }
            GenerationMode::Mixture | GenerationMode::UniformMixture | GenerationMode::Weighted(_) => {
                need(Variant::Shaped)?;
                (StyleSelection::All, SessionKind::Mixture(StylePosterior::uniform(1)))
            }
        };
        let mut g = Graph::new(&model.store);
        let enc = model.encode_all(&mut g, source, selection)?;
        let kind = match (kind, mode) {
            (SessionKind::Mixture(_), GenerationMode::Mixture) => {
                let p = model.classify_style(&mut g, &enc, false)?;
                SessionKind::Mixture(StylePosterior {
                    p: g.value(p).data().to_vec(),
                })
            }
            (SessionKind::Mixture(_), GenerationMode::UniformMixture) => {
                SessionKind::Mixture(StylePosterior::uniform(model.styles.len()))
            }
            (SessionKind::Mixture(_), GenerationMode::Weighted(p)) => {
                StylePosterior::new(p.p.clone())?;
                SessionKind::Mixture(p.clone())
            }
            (k, _) => k,
        };
        let state = model.initial_state(&mut g, &enc)?;
        Ok(DecodeSession {
            model,
            g,
            enc,
            state,
            kind,
        })
    }

    /// Mixture weights in use, if this is a mixture session.
    pub fn posterior(&self) -> Option<&StylePosterior> {
        match &self.kind {
            SessionKind::Mixture(p) => Some(p),
            SessionKind::Single(_) => None,
        }
    }

    /// Feeds `y_prev` and returns the next-token distribution.
    pub fn step(&mut self, y_prev: usize) -> Result<Vec<f64>> {
        let (dist, next) = match &self.kind {
            SessionKind::Single(route) => {
                let z = match route {
                    Route::Style(z) => Some(*z),
                    Route::Shared => None,
                };
                self.model
                    .shaped_step(&mut self.g, z, &self.enc, &self.state, y_prev)?
            }
            SessionKind::Mixture(p) => {
                self.model
                    .mixture_step(&mut self.g, &self.enc, &self.state, y_prev, p)?
            }
        };
        self.state = next;
        Ok(self.g.value(dist).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(variant: Variant, styles: usize, seed: u64) -> ShapedModel {
        let names = (0..styles).map(|i| format!("s{i}")).collect();
        let cfg = ModelConfig {
            vocab: 9,
            embed: 3,
            hidden: 4,
            layers: 1,
            attention: 3,
            classifier_hidden: 3,
            init_scale: 0.5,
        };
        ShapedModel::new(cfg, StyleSet::new(names).unwrap(), variant, seed).unwrap()
    }

    fn zero(model: &mut ShapedModel, ids: Vec<ParamId>) {
        for id in ids {
            model.store_mut().get_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn style_set_contract() {
        assert!(StyleSet::new(vec![]).is_err());
        assert!(StyleSet::new(vec!["a".into(), "a".into()]).is_err());
        let s = StyleSet::new(vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(s.id("b").unwrap(), 1);
        assert!(matches!(s.id("c"), Err(Error::UnknownStyle(_))));
        assert_eq!(Variant::parse("private:b", &s).unwrap(), Variant::Private(1));
        assert_eq!(Variant::parse(&Variant::Private(0).to_string(&s), &s).unwrap(), Variant::Private(0));
    }

    #[test]
    fn encode_all_shapes() {
        let m = tiny(Variant::Shaped, 1, 1);
        let mut g = Graph::new(m.store());
        let enc = m.encode_all(&mut g, &[4, 5, 6], StyleSelection::All).unwrap();
        assert!(enc.shared.is_some());
        assert_eq!(enc.private.iter().flatten().count(), 1);
        assert_eq!(g.shape(enc.states(Route::Style(0)).unwrap()), &[3, 16]);
        assert!(m.encode_all(&mut g, &[4], StyleSelection::One(1)).is_err());
        assert!(m.encode_all(&mut g, &[], StyleSelection::All).is_err());
    }

    #[test]
    fn identical_shared_and_private_params_duplicate_halves() {
        let mut m = tiny(Variant::Shaped, 2, 3);
        let shared = m.params().shared.as_ref().unwrap().ids();
        let private = m.params().private[1].as_ref().unwrap().ids();
        for (s, p) in shared.into_iter().zip(private) {
            let t = m.store().get(s).clone();
            *m.store_mut().get_mut(p) = t;
        }
        let mut g = Graph::new(m.store());
        let enc = m.encode_all(&mut g, &[4, 7, 5, 8], StyleSelection::All).unwrap();
        let h = g.value(enc.states(Route::Style(1)).unwrap());
        for row in h.data().chunks(16) {
            assert_eq!(&row[..8], &row[8..]);
        }
    }

    #[test]
    fn zero_output_network_is_uniform() {
        let mut m = tiny(Variant::Shaped, 2, 4);
        let ids = m.params().output.ids();
        zero(&mut m, ids);
        let mut g = Graph::new(m.store());
        let enc = m.encode_all(&mut g, &[4, 5], StyleSelection::All).unwrap();
        let st = m.initial_state(&mut g, &enc).unwrap();
        let (d, _) = m.shaped_step(&mut g, Some(1), &enc, &st, BOS).unwrap();
        for &p in g.value(d).data() {
            assert!((p - 1.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn missing_private_encoding_rejected() {
        let m = tiny(Variant::Shaped, 2, 4);
        let mut g = Graph::new(m.store());
        let enc = m.encode_all(&mut g, &[4, 5], StyleSelection::One(0)).unwrap();
        let st = m.initial_state(&mut g, &enc).unwrap();
        assert!(m.shaped_step(&mut g, Some(1), &enc, &st, BOS).is_err());
        assert!(m.classify_style(&mut g, &enc, false).is_err());
        let post = StylePosterior::uniform(2);
        assert!(m.mixture_step(&mut g, &enc, &st, BOS, &post).is_err());
    }

    #[test]
    fn classifier_edge_cases() {
        let m = tiny(Variant::Shaped, 1, 5);
        assert_eq!(m.posterior(&[4, 5, 6]).unwrap().p, vec![1.0]);

        let mut m = tiny(Variant::Shaped, 3, 5);
        let cls = m.params().classifier.clone().unwrap();
        let mut ids = cls.hidden.ids();
        ids.extend(cls.output.ids());
        zero(&mut m, ids);
        for &p in &m.posterior(&[4, 5, 6]).unwrap().p {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn posterior_length_checked() {
        let m = tiny(Variant::Shaped, 2, 6);
        let mut g = Graph::new(m.store());
        let enc = m.encode_all(&mut g, &[4, 5], StyleSelection::All).unwrap();
        let st = m.initial_state(&mut g, &enc).unwrap();
        let bad = StylePosterior::uniform(3);
        assert!(m.mixture_step(&mut g, &enc, &st, BOS, &bad).is_err());
    }

    #[test]
    fn uniform_model_nll() {
        let mut m = tiny(Variant::Shaped, 2, 7);
        let ids = m.params().output.ids();
        zero(&mut m, ids);
        let nll = m.sequence_nll_value(&[4, 5], &[6, EOS], Some(0)).unwrap();
        assert!((nll - 2.0 * 9f64.ln()).abs() < 1e-12);
        assert!(m.sequence_nll_value(&[4, 5], &[6, 9, EOS], Some(0)).is_err());
        assert!(m.sequence_nll_value(&[4, 5], &[6], Some(0)).is_err());
    }

    #[test]
    fn joint_loss_rejects_unlabelled_and_sums() {
        let m = tiny(Variant::Shaped, 2, 8);
        let a = StyledExample {
            source: vec![4, 5, 6],
            target: vec![7, EOS],
            style: Some(0),
        };
        let b = StyledExample {
            source: vec![8, 4],
            target: vec![5, 6, EOS],
            style: Some(1),
        };
        let value = |batch: &[StyledExample]| {
            let mut g = Graph::new(m.store());
            let l = m.joint_loss(&mut g, batch, LossOptions::default()).unwrap();
            g.value(l.total).item()
        };
        let both = value(&[a.clone(), b.clone()]);
        assert!((both - (value(&[a.clone()]) + value(&[b.clone()]))).abs() < 1e-12);

        let mut g = Graph::new(m.store());
        let unl = StyledExample { style: None, ..a };
        assert!(m.joint_loss(&mut g, &[unl], LossOptions::default()).is_err());
    }

    #[test]
    fn generation_modes_check_variant() {
        let m = tiny(Variant::Shared, 2, 9);
        assert!(m.generate(&[4], &GenerationMode::Mixture, 3, Decoding::Greedy).is_err());
        assert!(m.generate(&[4], &GenerationMode::PrivateOnly(0), 3, Decoding::Greedy).is_err());
        let out = m.generate(&[4], &GenerationMode::SharedOnly, 1, Decoding::Greedy).unwrap();
        assert_eq!(out.len(), 1);
        assert!(m.generate(&[4], &GenerationMode::SharedOnly, 0, Decoding::Greedy).is_err());

        let p = tiny(Variant::Private(1), 2, 9);
        assert!(p.generate(&[4], &GenerationMode::PrivateOnly(0), 3, Decoding::Greedy).is_err());
        assert!(p.generate(&[4], &GenerationMode::PrivateOnly(1), 3, Decoding::Greedy).is_ok());
    }

    #[test]
    fn sampling_is_seeded() {
        let m = tiny(Variant::Shaped, 2, 10);
        let mode = GenerationMode::Mixture;
        let a = m.generate(&[4, 5], &mode, 6, Decoding::Sample { seed: 3 }).unwrap();
        let b = m.generate(&[4, 5], &mode, 6, Decoding::Sample { seed: 3 }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn from_store_round_trip() {
        let m = tiny(Variant::Shaped, 3, 11);
        let back = ShapedModel::from_store(
            m.config().clone(),
            m.styles().clone(),
            m.variant(),
            m.store().clone(),
        )
        .unwrap();
        assert_eq!(back, m);
        let wrong = ShapedModel::from_store(
            m.config().clone(),
            StyleSet::new(vec!["a".into(), "b".into()]).unwrap(),
            m.variant(),
            m.store().clone(),
        );
        assert!(wrong.is_err());
    }
}
