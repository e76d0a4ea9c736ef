//! Adagrad training of the joint objective, with resumable checkpoints.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::data::{build_vocab, encode_example, Caps, RawExample, StyledExample, Vocabulary};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::model::{LossOptions, ModelConfig, ShapedModel, StyleSet, Variant};
use crate::tensor::{Gradients, Graph, ParamStore, Tensor};

/// Variant named by style rather than id, so configs stay readable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum VariantSpec {
    Shaped,
    Shared,
    Private(String),
}

impl VariantSpec {
    pub fn resolve(&self, styles: &StyleSet) -> Result<Variant> {
        match self {
            VariantSpec::Shaped => Ok(Variant::Shaped),
            VariantSpec::Shared => Ok(Variant::Shared),
            VariantSpec::Private(name) => Ok(Variant::Private(styles.id(name)?)),
        }
    }
}

impl FromStr for VariantSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "shaped" | "SHAPED" | "SP" => Ok(VariantSpec::Shaped),
            "shared" | "S" => Ok(VariantSpec::Shared),
            other => match other.split_once(':') {
                Some(("private" | "P", name)) if !name.is_empty() => {
                    Ok(VariantSpec::Private(name.to_string()))
                }
                _ => Err(Error::InvalidArgument(format!(
                    "unknown variant {other:?} (expected shaped, shared or private:<style>)"
                ))),
            },
        }
    }
}

impl fmt::Display for VariantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VariantSpec::Shaped => write!(f, "shaped"),
            VariantSpec::Shared => write!(f, "shared"),
            VariantSpec::Private(n) => write!(f, "private:{n}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: VariantSpec,
    pub lr: f64,
    pub adagrad_eps: f64,
    /// Starting value of every Adagrad accumulator.
    pub adagrad_init: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub embed: usize,
    pub hidden: usize,
    pub layers: usize,
    pub attention: usize,
    pub classifier_hidden: usize,
    pub init_scale: f64,
    pub vocab_cap: usize,
    pub max_source: usize,
    pub max_target: usize,
    pub log_every: usize,
    pub classifier_weight: f64,
    pub classifier_stop_grad: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: VariantSpec::Shaped,
            lr: 0.01,
            adagrad_eps: 1e-8,
            adagrad_init: 0.0,
            batch: 16,
            steps: 1000,
            seed: 0,
            embed: 32,
            hidden: 32,
            layers: 1,
            attention: 32,
            classifier_hidden: 32,
            init_scale: 0.08,
            vocab_cap: 500,
            max_source: 40,
            max_target: 20,
            log_every: 50,
            classifier_weight: 1.0,
            classifier_stop_grad: false,
        }
    }
}

impl TrainConfig {
    /// Settings used for the synthetic style-transfer experiment. A larger
    /// step size and a non-zero starting accumulator keep the first Adagrad
    /// steps no larger than the initial weights.
    pub fn experiment() -> Self {
        TrainConfig {
            lr: 0.1,
            adagrad_init: 0.1,
            steps: 2000,
            log_every: 100,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.adagrad_eps >= 0.0) {
            return bad("adagrad_eps must be non-negative");
        }
        if !(self.adagrad_init >= 0.0 && self.adagrad_init.is_finite()) {
            return bad("adagrad_init must be non-negative");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1");
        }
        if self.max_source == 0 || self.max_target == 0 {
            return bad("length caps must be at least 1");
        }
        if !(self.classifier_weight >= 0.0) {
            return bad("classifier_weight must be non-negative");
        }
        self.model_config(self.vocab_cap.max(5)).validate()
    }

    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab,
            embed: self.embed,
            hidden: self.hidden,
            layers: self.layers,
            attention: self.attention,
            classifier_hidden: self.classifier_hidden,
            init_scale: self.init_scale,
        }
    }

    pub fn caps(&self) -> Caps {
        Caps {
            max_source: self.max_source,
            max_target: self.max_target,
        }
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            classifier_weight: self.classifier_weight,
            classifier_stop_grad: self.classifier_stop_grad,
        }
    }

    /// Reads known keys, leaving unknown ones in `kv` for the caller.
    pub fn read_kv(kv: &mut KvMap) -> Result<Self> {
        let d = TrainConfig::default();
        let variant = match kv.take_str("variant") {
            None => d.variant,
            Some((line, v)) => v.parse().map_err(|e: Error| kv.error(line, e.to_string()))?,
        };
        let hidden = kv.take_or("hidden", d.hidden)?;
        let c = TrainConfig {
            variant,
            lr: kv.take_or("lr", d.lr)?,
            adagrad_eps: kv.take_or("adagrad_eps", d.adagrad_eps)?,
            adagrad_init: kv.take_or("adagrad_init", d.adagrad_init)?,
            batch: kv.take_or("batch", d.batch)?,
            steps: kv.take_or("steps", d.steps)?,
            seed: kv.take_or("seed", d.seed)?,
            embed: kv.take_or("embed", d.embed)?,
            hidden,
            layers: kv.take_or("layers", d.layers)?,
            attention: kv.take_or("attention", hidden)?,
            classifier_hidden: kv.take_or("classifier_hidden", hidden)?,
            init_scale: kv.take_or("init_scale", d.init_scale)?,
            vocab_cap: kv.take_or("vocab_cap", d.vocab_cap)?,
            max_source: kv.take_or("max_source", d.max_source)?,
            max_target: kv.take_or("max_target", d.max_target)?,
            log_every: kv.take_or("log_every", d.log_every)?,
            classifier_weight: kv.take_or("classifier_weight", d.classifier_weight)?,
            classifier_stop_grad: kv.take_or("classifier_stop_grad", d.classifier_stop_grad)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn parse(source: &str, text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(source, text)?;
        let c = Self::read_kv(&mut kv)?;
        kv.finish()?;
        Ok(c)
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        kv.set("variant", &self.variant);
        kv.set("lr", self.lr);
        kv.set("adagrad_eps", self.adagrad_eps);
        kv.set("adagrad_init", self.adagrad_init);
        kv.set("batch", self.batch);
        kv.set("steps", self.steps);
        kv.set("seed", self.seed);
        kv.set("embed", self.embed);
        kv.set("hidden", self.hidden);
        kv.set("layers", self.layers);
        kv.set("attention", self.attention);
        kv.set("classifier_hidden", self.classifier_hidden);
        kv.set("init_scale", self.init_scale);
        kv.set("vocab_cap", self.vocab_cap);
        kv.set("max_source", self.max_source);
        kv.set("max_target", self.max_target);
        kv.set("log_every", self.log_every);
        kv.set("classifier_weight", self.classifier_weight);
        kv.set("classifier_stop_grad", self.classifier_stop_grad);
    }

    pub fn to_text(&self) -> String {
        let mut kv = KvMap::default();
        self.write_kv(&mut kv);
        kv.to_text()
    }
}

/// Per-parameter sums of squared gradients, aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdagradState {
    pub acc: Vec<Tensor>,
}

impl AdagradState {
    pub fn new(params: &ParamStore, init: f64) -> Self {
        AdagradState {
            acc: params
                .iter()
                .map(|(_, _, t)| {
                    let mut a = Tensor::zeros(t.shape());
                    a.data_mut().fill(init);
                    a
                })
                .collect(),
        }
    }
}

/// `acc += g²; p -= lr · g / (√acc + eps)`. Elements with a zero gradient
/// are left alone. Nothing is modified if any gradient is non-finite.
pub fn adagrad_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdagradState,
    lr: f64,
    eps: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.acc.len() != params.len() {
        return Err(Error::InvalidArgument(
            "gradients, accumulators and parameters are not aligned".into(),
        ));
    }
    let ids: Vec<_> = params.ids().collect();
    for &id in &ids {
        let g = grads.get(id);
        if g.shape() != params.get(id).shape() || state.acc[id.index()].shape() != g.shape() {
            return Err(Error::shape("adagrad_step", &[g.shape(), params.get(id).shape()]));
        }
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(params.name(id).to_string()));
        }
    }
    for id in ids {
        let g = grads.get(id).data();
        let acc = state.acc[id.index()].data_mut();
        let p = params.get_mut(id).data_mut();
        for i in 0..g.len() {
            if g[i] == 0.0 {
                continue;
            }
            acc[i] += g[i] * g[i];
            p[i] -= lr * g[i] / (acc[i].sqrt() + eps);
        }
    }
    Ok(())
}

/// Averages over one logging window, per example.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub classifier_loss: f64,
    pub seq_loss: f64,
    /// Sequence loss per target token.
    pub token_loss: f64,
    pub skipped: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Window {
    steps: usize,
    examples: usize,
    tokens: usize,
    total: f64,
    classifier: f64,
    sequence: f64,
}

/// Training data after vocabulary construction and variant filtering.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub styles: StyleSet,
    pub vocab: Vocabulary,
    pub variant: Variant,
    pub examples: Vec<StyledExample>,
}

/// Style names found in the corpus, sorted; `None` if nothing is labelled.
pub fn corpus_styles(corpus: &[RawExample]) -> Option<StyleSet> {
    let mut names: Vec<String> = corpus.iter().filter_map(|e| e.style.clone()).collect();
    names.sort();
    names.dedup();
    StyleSet::new(names).ok()
}

/// Builds the vocabulary from the whole corpus, then keeps the examples the
/// variant trains on. The style-aware variants reject unlabelled examples.
pub fn prepare(
    corpus: &[RawExample],
    config: &TrainConfig,
    styles: Option<StyleSet>,
    vocab: Option<Vocabulary>,
) -> Result<Prepared> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty training corpus".into()));
    }
    let styles = match styles.or_else(|| corpus_styles(corpus)) {
        Some(s) => s,
        None if config.variant == VariantSpec::Shared => StyleSet::new(vec!["any".into()])?,
        None => {
            return Err(Error::InvalidArgument(format!(
                "variant {} needs style labels",
                config.variant
            )))
        }
    };
    let variant = config.variant.resolve(&styles)?;
    let vocab = match vocab {
        Some(v) => v,
        None => build_vocab(
            corpus.iter().flat_map(|e| [e.source.as_str(), e.target.as_str()]),
            config.vocab_cap,
        )?,
    };
    let mut examples = Vec::with_capacity(corpus.len());
    for (i, raw) in corpus.iter().enumerate() {
        let ex = encode_example(raw, &vocab, &styles, config.caps())
            .map_err(|e| Error::InvalidArgument(format!("example {}: {e}", i + 1)))?;
        match variant {
            Variant::Shared => examples.push(ex),
            Variant::Shaped | Variant::Private(_) => {
                let z = ex.style.ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "example {} has no in-domain style label; variant {} needs one",
                        i + 1,
                        config.variant
                    ))
                })?;
                match variant {
                    Variant::Private(p) if p != z => {}
                    _ => examples.push(ex),
                }
            }
        }
    }
    if examples.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no training examples for variant {}",
            config.variant
        )));
    }
    Ok(Prepared {
        styles,
        vocab,
        variant,
        examples,
    })
}

/// Resumable training loop. The example order is a function of the seed and
/// the global step only, so a resumed run continues exactly as an
/// uninterrupted one would.
pub struct Trainer {
    config: TrainConfig,
    model: ShapedModel,
    vocab: Vocabulary,
    examples: Vec<StyledExample>,
    optimizer: AdagradState,
    step: usize,
    skipped: usize,
    window: Window,
    log: Vec<LogRecord>,
    best: Option<(f64, usize, ParamStore)>,
    best_loss: f64,
    order: Option<(usize, Vec<usize>)>,
}

impl Trainer {
    pub fn new(corpus: &[RawExample], config: TrainConfig, styles: Option<StyleSet>) -> Result<Self> {
        config.validate()?;
        let prep = prepare(corpus, &config, styles, None)?;
        let model = ShapedModel::new(
            config.model_config(prep.vocab.len()),
            prep.styles,
            prep.variant,
            config.seed,
        )?;
        let optimizer = AdagradState::new(model.store(), config.adagrad_init);
        Ok(Trainer {
            config,
            model,
            vocab: prep.vocab,
            examples: prep.examples,
            optimizer,
            step: 0,
            skipped: 0,
            window: Window::default(),
            log: Vec::new(),
            best: None,
            best_loss: f64::INFINITY,
            order: None,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`]. Only
    /// `steps` may differ from the stored configuration.
    pub fn resume(corpus: &[RawExample], checkpoint: &Checkpoint, steps: Option<usize>) -> Result<Self> {
        let mut kv = KvMap::parse("checkpoint", &checkpoint.meta)?;
        let mut config = TrainConfig::read_kv(&mut kv)?;
        let step: usize = kv.take_or("step", 0)?;
        let skipped: usize = kv.take_or("skipped", 0)?;
        let best_loss: f64 = kv.take_or("best_loss", f64::INFINITY)?;
        let window = Window {
            steps: kv.take_or("window_steps", 0)?,
            examples: kv.take_or("window_examples", 0)?,
            tokens: kv.take_or("window_tokens", 0)?,
            total: kv.take_or("window_total", 0.0)?,
            classifier: kv.take_or("window_classifier", 0.0)?,
            sequence: kv.take_or("window_sequence", 0.0)?,
        };
        kv.finish()?;
        if let Some(s) = steps {
            config.steps = s;
            config.validate()?;
        }
        let styles = StyleSet::new(checkpoint.styles.clone())?;
        let vocab = Vocabulary::from_full_list(checkpoint.vocab.clone())?;
        let prep = prepare(corpus, &config, Some(styles.clone()), Some(vocab))?;
        let model = ShapedModel::from_store(
            config.model_config(prep.vocab.len()),
            styles,
            prep.variant,
            checkpoint.params.clone(),
        )?;
        let optimizer = AdagradState {
            acc: checkpoint
                .accumulators
                .clone()
                .ok_or_else(|| Error::Incompatible("checkpoint has no optimizer state".into()))?,
        };
        Ok(Trainer {
            config,
            model,
            vocab: prep.vocab,
            examples: prep.examples,
            optimizer,
            step,
            skipped,
            window,
            log: Vec::new(),
            best: None,
            best_loss,
            order: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &ShapedModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut ShapedModel {
        &mut self.model
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn examples(&self) -> &[StyledExample] {
        &self.examples
    }

    pub fn optimizer(&self) -> &AdagradState {
        &self.optimizer
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Window records produced since this trainer was created.
    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.steps
    }

    fn example_at(&mut self, position: usize) -> usize {
        let n = self.examples.len();
        let epoch = position / n;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(epoch as u64 + 1);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            self.order = Some((epoch, perm));
        }
        self.order.as_ref().unwrap().1[position % n]
    }

    /// Indices of the examples used at global step `step`.
    pub fn batch_indices(&mut self, step: usize) -> Vec<usize> {
        let b = self.config.batch;
        (0..b).map(|i| self.example_at(step * b + i)).collect()
    }

    /// Runs one optimizer step. Returns `false` if it was skipped because
    /// of a non-finite gradient.
    pub fn train_step(&mut self) -> Result<bool> {
        let batch: Vec<StyledExample> = self
            .batch_indices(self.step)
            .into_iter()
            .map(|i| self.examples[i].clone())
            .collect();
        let (grads, total, classifier, sequence) = {
            let mut g = Graph::new(self.model.store());
            let parts = self.model.joint_loss(&mut g, &batch, self.config.loss_options())?;
            let grads = g.backward(parts.total)?;
            (
                grads,
                g.value(parts.total).item(),
                parts.classifier.map_or(0.0, |c| g.value(c).item()),
                g.value(parts.sequence).item(),
            )
        };
        let lr = self.config.lr;
        let eps = self.config.adagrad_eps;
        let applied = match adagrad_step(self.model.store_mut(), &grads, &mut self.optimizer, lr, eps) {
            Ok(()) => true,
            Err(Error::NonFiniteGradient(_)) => {
                self.skipped += 1;
                false
            }
            Err(e) => return Err(e),
        };
        self.step += 1;
        if applied && total.is_finite() {
            let w = &mut self.window;
            w.steps += 1;
            w.examples += batch.len();
            w.tokens += batch.iter().map(|e| e.target.len()).sum::<usize>();
            w.total += total;
            w.classifier += classifier;
            w.sequence += sequence;
        }
        if self.step % self.config.log_every == 0 || self.is_done() {
            self.flush_window();
        }
        Ok(applied)
    }

    fn flush_window(&mut self) {
        let w = std::mem::take(&mut self.window);
        if w.examples == 0 {
            return;
        }
        let n = w.examples as f64;
        let rec = LogRecord {
            step: self.step,
            loss: w.total / n,
            classifier_loss: w.classifier / n,
            seq_loss: w.sequence / n,
            token_loss: w.sequence / w.tokens as f64,
            skipped: self.skipped,
        };
        if rec.loss < self.best_loss {
            self.best_loss = rec.loss;
            self.best = Some((rec.loss, self.step, self.model.store().clone()));
        }
        self.log.push(rec);
    }

    /// Trains until the configured step count, calling `on_log` for every
    /// new log record.
    pub fn run(&mut self, mut on_log: impl FnMut(&LogRecord)) -> Result<()> {
        while !self.is_done() {
            let before = self.log.len();
            self.train_step()?;
            for rec in &self.log[before..] {
                on_log(rec);
            }
        }
        Ok(())
    }

    fn meta(&self, step: usize) -> String {
        let mut kv = KvMap::default();
        self.config.write_kv(&mut kv);
        kv.set("step", step);
        kv.set("skipped", self.skipped);
        kv.set("best_loss", self.best_loss);
        let w = &self.window;
        kv.set("window_steps", w.steps);
        kv.set("window_examples", w.examples);
        kv.set("window_tokens", w.tokens);
        kv.set("window_total", w.total);
        kv.set("window_classifier", w.classifier);
        kv.set("window_sequence", w.sequence);
        kv.to_text()
    }

    /// Current parameters and optimizer state.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: self.meta(self.step),
            styles: self.model.styles().names().to_vec(),
            vocab: self.vocab.tokens().to_vec(),
            params: self.model.store().clone(),
            accumulators: Some(self.optimizer.acc.clone()),
        }
    }

    /// Parameters at the end of the logging window with the lowest mean
    /// loss seen by this trainer, with the step they were taken at.
    pub fn best_checkpoint(&self) -> Option<(usize, Checkpoint)> {
        self.best.as_ref().map(|(_, step, params)| {
            (
                *step,
                Checkpoint {
                    meta: self.meta(*step),
                    styles: self.model.styles().names().to_vec(),
                    vocab: self.vocab.tokens().to_vec(),
                    params: params.clone(),
                    accumulators: None,
                },
            )
        })
    }
}

/// A model restored from a checkpoint for inference.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub model: ShapedModel,
    pub vocab: Vocabulary,
    pub config: TrainConfig,
}

impl LoadedModel {
    pub fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self> {
        let mut kv = KvMap::parse("checkpoint", &checkpoint.meta)?;
        let config = TrainConfig::read_kv(&mut kv)?;
        let styles = StyleSet::new(checkpoint.styles.clone())?;
        let vocab = Vocabulary::from_full_list(checkpoint.vocab.clone())?;
        let variant = config.variant.resolve(&styles)?;
        let model = ShapedModel::from_store(
            config.model_config(vocab.len()),
            styles,
            variant,
            checkpoint.params.clone(),
        )?;
        Ok(LoadedModel {
            model,
            vocab,
            config,
        })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Fails unless the checkpoint was trained on exactly `styles`.
    pub fn expect_styles(&self, styles: &StyleSet) -> Result<()> {
        if self.model.styles() != styles {
            return Err(Error::Incompatible(format!(
                "checkpoint styles {:?} differ from {:?}",
                self.model.styles().names(),
                styles.names()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamId;

    fn scalar_store(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::vector(vec![v])).unwrap();
        (s, id)
    }

    #[test]
    fn adagrad_hand_trace() {
        let (mut s, id) = scalar_store(1.0);
        let mut st = AdagradState::new(&s, 0.0);
        let mut g = Gradients::zeros_like(&s);
        g.get_mut(id).data_mut()[0] = 2.0;
        adagrad_step(&mut s, &g, &mut st, 0.1, 0.0).unwrap();
        assert_eq!(st.acc[0].data(), &[4.0]);
        assert_eq!(s.get(id).data(), &[0.9]);
        adagrad_step(&mut s, &g, &mut st, 0.1, 0.0).unwrap();
        assert_eq!(st.acc[0].data(), &[8.0]);
        assert_eq!(s.get(id).data(), &[0.9 - 0.2 / 8f64.sqrt()]);
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let (mut s, _) = scalar_store(1.5);
        let mut st = AdagradState::new(&s, 0.0);
        let g = Gradients::zeros_like(&s);
        adagrad_step(&mut s, &g, &mut st, 0.1, 0.0).unwrap();
        assert_eq!(s.get(s.ids().next().unwrap()).data(), &[1.5]);
        assert_eq!(st.acc[0].data(), &[0.0]);
    }

    #[test]
    fn non_finite_gradient_rejected_untouched() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::vector(vec![1.0])).unwrap();
        let b = s.add("b", Tensor::vector(vec![1.0])).unwrap();
        let mut st = AdagradState::new(&s, 0.0);
        let mut g = Gradients::zeros_like(&s);
        g.get_mut(a).data_mut()[0] = 1.0;
        g.get_mut(b).data_mut()[0] = f64::NAN;
        match adagrad_step(&mut s, &g, &mut st, 0.1, 1e-8) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "b"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.get(a).data(), &[1.0]);
        assert_eq!(st.acc[0].data(), &[0.0]);
    }

    #[test]
    fn config_round_trip_and_validation() {
        let c = TrainConfig {
            variant: VariantSpec::Private("x".into()),
            lr: 0.1,
            ..Default::default()
        };
        assert_eq!(TrainConfig::parse("t", &c.to_text()).unwrap(), c);
        assert!(TrainConfig::parse("t", "steps=0").is_err());
        assert!(TrainConfig::parse("t", "lr=-1").is_err());
        assert!(TrainConfig::parse("t", "batch=0").is_err());
        let err = TrainConfig::parse("t", "lr=0.1\nbogus=3").unwrap_err();
        assert!(err.to_string().contains("bogus"));
        assert!(TrainConfig::parse("t", "variant=private:").is_err());
    }

    fn corpus() -> Vec<RawExample> {
        let mut v = Vec::new();
        for i in 0..6 {
            v.push(RawExample {
                source: format!("w{i} saw w{} today", i + 1),
                target: format!("w{i} saw"),
                style: Some(if i % 2 == 0 { "a" } else { "b" }.into()),
            });
        }
        v
    }

    fn small() -> TrainConfig {
        TrainConfig {
            embed: 4,
            hidden: 4,
            attention: 4,
            classifier_hidden: 4,
            batch: 2,
            steps: 3,
            log_every: 2,
            ..Default::default()
        }
    }

    #[test]
    fn prepare_filters_by_variant() {
        let c = corpus();
        let p = prepare(&c, &small(), None, None).unwrap();
        assert_eq!(p.styles.names(), &["a".to_string(), "b".to_string()]);
        assert_eq!(p.examples.len(), 6);
        let priv_b = TrainConfig {
            variant: VariantSpec::Private("b".into()),
            ..small()
        };
        let p = prepare(&c, &priv_b, None, None).unwrap();
        assert_eq!(p.examples.len(), 3);
        assert!(p.examples.iter().all(|e| e.style == Some(1)));

        let mut unl = corpus();
        unl[3].style = None;
        assert!(prepare(&unl, &small(), None, None).is_err());
        assert!(prepare(&unl, &priv_b, None, None).is_err());
        let shared = TrainConfig {
            variant: VariantSpec::Shared,
            ..small()
        };
        assert_eq!(prepare(&unl, &shared, None, None).unwrap().examples.len(), 6);
    }

    #[test]
    fn batches_cover_each_epoch() {
        let mut t = Trainer::new(&corpus(), small(), None).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|s| t.batch_indices(s)).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn windows_logged_and_checkpoint_loads() {
        let mut t = Trainer::new(&corpus(), small(), None).unwrap();
        let mut n = 0;
        t.run(|_| n += 1).unwrap();
        assert_eq!(n, 2);
        assert_eq!(t.log()[1].step, 3);
        let loaded = LoadedModel::from_checkpoint(&t.checkpoint()).unwrap();
        assert_eq!(loaded.model.store(), t.model().store());
        assert!(t.best_checkpoint().is_some());
    }
}
