//! ROUGE scoring, classifier reports and the variant comparison runner.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{encode_example, tokenize, RawExample, StyledExample, Vocabulary, EOS};
use crate::error::{Error, Result};
use crate::model::{Decoding, GenerationMode, ShapedModel, StyleId, StylePosterior, StyleSet};
use crate::train::{LoadedModel, TrainConfig, Trainer, VariantSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct RougeComponent {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeComponent {
    fn from_counts(hits: usize, cand: usize, reference: usize) -> Self {
        let precision = if cand == 0 { 0.0 } else { hits as f64 / cand as f64 };
        let recall = if reference == 0 { 0.0 } else { hits as f64 / reference as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        RougeComponent {
            precision,
            recall,
            f1,
        }
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram overlap.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Result<RougeComponent> {
    if n == 0 {
        return Err(Error::InvalidArgument("rouge_n needs n >= 1".into()));
    }
    let c = ngram_counts(candidate, n);
    let r = ngram_counts(reference, n);
    let hits = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    let total = |m: &HashMap<&[T], usize>| m.values().sum::<usize>();
    Ok(RougeComponent::from_counts(hits, total(&c), total(&r)))
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence-level LCS F-measure with beta = 1.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> RougeComponent {
    RougeComponent::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    /// Half the width of the central 95% bootstrap interval.
    pub half_width: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MetricScore {
    pub precision: Estimate,
    pub recall: Estimate,
    pub f1: Estimate,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct RougeScore {
    pub r1: MetricScore,
    pub r2: MetricScore,
    pub rl: MetricScore,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Mean of `values` with a seeded percentile-bootstrap half-width.
pub fn bootstrap(values: &[f64], resamples: usize, seed: u64) -> Estimate {
    if values.is_empty() {
        return Estimate::default();
    }
    let n = values.len();
    let value = values.iter().sum::<f64>() / n as f64;
    if resamples == 0 {
        return Estimate {
            value,
            half_width: 0.0,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    Estimate {
        value,
        half_width: (percentile(&means, 0.975) - percentile(&means, 0.025)) / 2.0,
    }
}

/// Averages sentence-level scores over aligned candidate/reference lists.
pub fn score_corpus<T: Eq + Hash>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    resamples: usize,
    seed: u64,
) -> Result<RougeScore> {
    if candidates.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut parts: [Vec<RougeComponent>; 3] = Default::default();
    for (c, r) in candidates.iter().zip(references) {
        parts[0].push(rouge_n(c, r, 1)?);
        parts[1].push(rouge_n(c, r, 2)?);
        parts[2].push(rouge_l(c, r));
    }
    let metric = |xs: &[RougeComponent]| {
        let col = |f: fn(&RougeComponent) -> f64| xs.iter().map(f).collect::<Vec<_>>();
        MetricScore {
            precision: bootstrap(&col(|c| c.precision), resamples, seed),
            recall: bootstrap(&col(|c| c.recall), resamples, seed),
            f1: bootstrap(&col(|c| c.f1), resamples, seed),
        }
    };
    Ok(RougeScore {
        r1: metric(&parts[0]),
        r2: metric(&parts[1]),
        rl: metric(&parts[2]),
    })
}

/// The compared systems.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum EvalVariant {
    /// Per-style private models, each applied to its own style.
    #[serde(rename = "P")]
    Private,
    #[serde(rename = "S")]
    Shared,
    /// SHAPED decoding with the true style.
    #[serde(rename = "SP")]
    Shaped,
    /// Classifier-weighted mixture.
    #[serde(rename = "M-SP")]
    Mixture,
    /// Equal-weight mixture.
    #[serde(rename = "uniform")]
    Uniform,
}

impl EvalVariant {
    pub const ALL: [EvalVariant; 5] = [
        EvalVariant::Private,
        EvalVariant::Shared,
        EvalVariant::Shaped,
        EvalVariant::Mixture,
        EvalVariant::Uniform,
    ];

    pub fn label(self) -> &'static str {
        match self {
            EvalVariant::Private => "P",
            EvalVariant::Shared => "S",
            EvalVariant::Shaped => "SP",
            EvalVariant::Mixture => "M-SP",
            EvalVariant::Uniform => "uniform",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        EvalVariant::ALL
            .into_iter()
            .find(|v| v.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }

    /// Whether the variant needs gold style labels.
    pub fn needs_labels(self) -> bool {
        matches!(self, EvalVariant::Private | EvalVariant::Shaped)
    }
}

/// One evaluation split.
#[derive(Clone, Debug)]
pub struct EvalSplit {
    pub name: String,
    pub examples: Vec<RawExample>,
    pub in_domain: bool,
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    /// Shared settings; the variant field is overridden per model.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub variants: Vec<EvalVariant>,
    /// Steps for each private model; defaults to `train.steps`.
    pub private_steps: Option<usize>,
    pub max_decode: usize,
    pub resamples: usize,
}

impl ExperimentConfig {
    pub fn new(train: TrainConfig) -> Self {
        let max_decode = train.max_target;
        ExperimentConfig {
            train,
            seeds: vec![1, 2, 3],
            variants: EvalVariant::ALL.to_vec(),
            private_steps: None,
            max_decode,
            resamples: 1000,
        }
    }
}

/// Models for one seed.
#[derive(Clone, Debug, Default)]
pub struct SeedModels {
    pub shaped: Option<ShapedModel>,
    pub shared: Option<ShapedModel>,
    /// One per style, in style order.
    pub private: Vec<ShapedModel>,
}

/// File name of a checkpoint in an experiment directory.
pub fn checkpoint_name(variant: &VariantSpec, seed: u64) -> String {
    let v = variant.to_string().replace(':', "-");
    format!("{v}.seed{seed}.ck")
}

fn needs(variants: &[EvalVariant]) -> (bool, bool, bool) {
    let shaped = variants.iter().any(|v| {
        matches!(v, EvalVariant::Shaped | EvalVariant::Mixture | EvalVariant::Uniform)
    });
    (
        shaped,
        variants.contains(&EvalVariant::Shared),
        variants.contains(&EvalVariant::Private),
    )
}

/// Trains every model the requested variants need. `on_model` sees each
/// finished trainer, e.g. to save its checkpoint.
pub fn train_seed_models(
    train: &[RawExample],
    config: &ExperimentConfig,
    seed: u64,
    mut on_model: impl FnMut(&Trainer) -> Result<()>,
) -> Result<SeedModels> {
    let (want_shaped, want_shared, want_private) = needs(&config.variants);
    let mut run = |variant: VariantSpec, steps: usize| -> Result<ShapedModel> {
        let cfg = TrainConfig {
            variant,
            seed,
            steps,
            ..config.train.clone()
        };
        let mut t = Trainer::new(train, cfg, None)?;
        t.run(|_| {})?;
        on_model(&t)?;
        Ok(t.model().clone())
    };
    let mut models = SeedModels::default();
    if want_shaped {
        models.shaped = Some(run(VariantSpec::Shaped, config.train.steps)?);
    }
    if want_shared {
        models.shared = Some(run(VariantSpec::Shared, config.train.steps)?);
    }
    if want_private {
        let styles = crate::train::corpus_styles(train)
            .ok_or_else(|| Error::InvalidArgument("private models need style labels".into()))?;
        for name in styles.names() {
            let steps = config.private_steps.unwrap_or(config.train.steps);
            models
                .private
                .push(run(VariantSpec::Private(name.clone()), steps)?);
        }
    }
    Ok(models)
}

/// Loads the checkpoints written for one seed, checking that they agree on
/// styles and vocabulary.
pub fn load_seed_models(
    dir: &Path,
    seed: u64,
    variants: &[EvalVariant],
    styles: &StyleSet,
) -> Result<(SeedModels, Vocabulary)> {
    let (want_shaped, want_shared, want_private) = needs(variants);
    let mut vocab: Option<Vocabulary> = None;
    let mut load = |spec: VariantSpec| -> Result<ShapedModel> {
        let m = LoadedModel::load(dir.join(checkpoint_name(&spec, seed)))?;
        m.expect_styles(styles)?;
        match &vocab {
            None => vocab = Some(m.vocab.clone()),
            Some(v) if *v != m.vocab => {
                return Err(Error::Incompatible(format!(
                    "checkpoint for {spec} uses a different vocabulary"
                )))
            }
            _ => {}
        }
        Ok(m.model)
    };
    let mut models = SeedModels::default();
    if want_shaped {
        models.shaped = Some(load(VariantSpec::Shaped)?);
    }
    if want_shared {
        models.shared = Some(load(VariantSpec::Shared)?);
    }
    if want_private {
        for name in styles.names() {
            models.private.push(load(VariantSpec::Private(name.clone()))?);
        }
    }
    let vocab = vocab.ok_or_else(|| Error::InvalidArgument("no variants requested".into()))?;
    Ok((models, vocab))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreRow {
    pub variant: EvalVariant,
    pub split: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<RougeScore>,
    /// Element-wise median over seeds.
    pub median: RougeScore,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassifierRow {
    pub seed: u64,
    pub split: String,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PosteriorRow {
    pub seed: u64,
    pub split: String,
    /// `None` for unlabelled examples.
    pub true_style: Option<String>,
    pub count: usize,
    pub mean: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub styles: Vec<String>,
    pub seeds: Vec<u64>,
    pub scores: Vec<ScoreRow>,
    pub classifier: Vec<ClassifierRow>,
    pub posteriors: Vec<PosteriorRow>,
}

/// Mean classifier posterior per true style (unlabelled examples grouped
/// under `None`), in style order.
pub fn posterior_report(
    model: &ShapedModel,
    examples: &[StyledExample],
) -> Result<Vec<(Option<StyleId>, usize, StylePosterior)>> {
    let k = model.styles().len();
    let mut groups: Vec<(Option<StyleId>, usize, Vec<f64>)> = Vec::new();
    for ex in examples {
        let p = model.posterior(&ex.source)?;
        let pos = match groups.iter().position(|g| g.0 == ex.style) {
            Some(i) => i,
            None => {
                groups.push((ex.style, 0, vec![0.0; k]));
                groups.len() - 1
            }
        };
        let g = &mut groups[pos];
        g.1 += 1;
        for (a, b) in g.2.iter_mut().zip(&p.p) {
            *a += b;
        }
    }
    groups.sort_by_key(|g| g.0.map_or(usize::MAX, |z| z));
    Ok(groups
        .into_iter()
        .map(|(z, n, sum)| {
            let mean = sum.into_iter().map(|s| s / n as f64).collect();
            (z, n, StylePosterior { p: mean })
        })
        .collect())
}

/// Confusion matrix `[true][predicted]` of the classifier argmax over the
/// labelled examples.
pub fn confusion_matrix(model: &ShapedModel, examples: &[StyledExample]) -> Result<Vec<Vec<usize>>> {
    let k = model.styles().len();
    let mut m = vec![vec![0; k]; k];
    for ex in examples {
        if let Some(z) = ex.style {
            m[z][model.posterior(&ex.source)?.argmax()] += 1;
        }
    }
    Ok(m)
}

pub fn accuracy(confusion: &[Vec<usize>]) -> f64 {
    let total: usize = confusion.iter().flatten().sum();
    let right: usize = (0..confusion.len()).map(|i| confusion[i][i]).sum();
    if total == 0 {
        0.0
    } else {
        right as f64 / total as f64
    }
}

/// Generated headline tokens, EOS removed.
fn decode_tokens(vocab: &Vocabulary, ids: &[usize]) -> Vec<String> {
    ids.iter()
        .take_while(|&&i| i != EOS)
        .map(|&i| vocab.token(i).unwrap_or("<unk>").to_string())
        .collect()
}

/// Greedy outputs of one variant over `examples`.
pub fn generate_variant(
    models: &SeedModels,
    variant: EvalVariant,
    examples: &[StyledExample],
    max_decode: usize,
) -> Result<Vec<Vec<usize>>> {
    let missing = || Error::InvalidArgument(format!("no model loaded for {}", variant.label()));
    examples
        .iter()
        .map(|ex| {
            let (model, mode) = match variant {
                EvalVariant::Private => {
                    let z = ex.style.ok_or_else(|| {
                        Error::InvalidArgument("P needs labelled examples".into())
                    })?;
                    (models.private.get(z).ok_or_else(missing)?, GenerationMode::PrivateOnly(z))
                }
                EvalVariant::Shared => (models.shared.as_ref().ok_or_else(missing)?, GenerationMode::SharedOnly),
                EvalVariant::Shaped => {
                    let z = ex.style.ok_or_else(|| {
                        Error::InvalidArgument("SP needs labelled examples".into())
                    })?;
                    (models.shaped.as_ref().ok_or_else(missing)?, GenerationMode::Shaped(z))
                }
                EvalVariant::Mixture => (models.shaped.as_ref().ok_or_else(missing)?, GenerationMode::Mixture),
                EvalVariant::Uniform => {
                    (models.shaped.as_ref().ok_or_else(missing)?, GenerationMode::UniformMixture)
                }
            };
            model.generate(&ex.source, &mode, max_decode, Decoding::Greedy)
        })
        .collect()
}

/// Scores and classifier statistics of one seed's models.
pub fn evaluate_seed(
    models: &SeedModels,
    vocab: &Vocabulary,
    styles: &StyleSet,
    splits: &[EvalSplit],
    config: &ExperimentConfig,
    seed: u64,
    report: &mut ExperimentReport,
) -> Result<Vec<(EvalVariant, String, RougeScore)>> {
    let caps = config.train.caps();
    let mut out = Vec::new();
    for split in splits {
        let encoded = split
            .examples
            .iter()
            .map(|r| encode_example(r, vocab, styles, caps))
            .collect::<Result<Vec<_>>>()?;
        let references: Vec<Vec<String>> = split.examples.iter().map(|r| tokenize(&r.target)).collect();
        for &v in &config.variants {
            let applicable = if split.in_domain {
                true
            } else {
                matches!(v, EvalVariant::Shared | EvalVariant::Mixture)
            };
            if !applicable {
                continue;
            }
            if v.needs_labels() && encoded.iter().any(|e| e.style.is_none()) {
                return Err(Error::InvalidArgument(format!(
                    "split {} has unlabelled examples; {} needs labels",
                    split.name,
                    v.label()
                )));
            }
            let outputs = generate_variant(models, v, &encoded, config.max_decode)?;
            let cands: Vec<Vec<String>> = outputs.iter().map(|o| decode_tokens(vocab, o)).collect();
            let score = score_corpus(&cands, &references, config.resamples, seed)?;
            out.push((v, split.name.clone(), score));
        }
        if let Some(m) = &models.shaped {
            if split.in_domain {
                let confusion = confusion_matrix(m, &encoded)?;
                report.classifier.push(ClassifierRow {
                    seed,
                    split: split.name.clone(),
                    accuracy: accuracy(&confusion),
                    confusion,
                });
            }
            for (z, count, mean) in posterior_report(m, &encoded)? {
                report.posteriors.push(PosteriorRow {
                    seed,
                    split: split.name.clone(),
                    true_style: z.map(|z| styles.names()[z].clone()),
                    count,
                    mean: mean.p,
                });
            }
        }
    }
    Ok(out)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn median_score(scores: &[RougeScore]) -> RougeScore {
    let est = |f: &dyn Fn(&RougeScore) -> Estimate| Estimate {
        value: median(scores.iter().map(|s| f(s).value).collect()),
        half_width: median(scores.iter().map(|s| f(s).half_width).collect()),
    };
    let metric = |m: &dyn Fn(&RougeScore) -> MetricScore| MetricScore {
        precision: est(&|s| m(s).precision),
        recall: est(&|s| m(s).recall),
        f1: est(&|s| m(s).f1),
    };
    RougeScore {
        r1: metric(&|s| s.r1),
        r2: metric(&|s| s.r2),
        rl: metric(&|s| s.rl),
    }
}

/// Groups per-seed scores into rows with medians.
pub fn assemble(report: &mut ExperimentReport, per_seed: Vec<(u64, Vec<(EvalVariant, String, RougeScore)>)>) {
    let mut rows: Vec<ScoreRow> = Vec::new();
    for (seed, scores) in per_seed {
        for (v, split, s) in scores {
            match rows.iter_mut().find(|r| r.variant == v && r.split == split) {
                Some(r) => {
                    r.seeds.push(seed);
                    r.per_seed.push(s);
                }
                None => rows.push(ScoreRow {
                    variant: v,
                    split,
                    seeds: vec![seed],
                    per_seed: vec![s],
                    median: RougeScore::default(),
                }),
            }
        }
    }
    for r in &mut rows {
        r.median = median_score(&r.per_seed);
    }
    report.scores = rows;
}

/// Trains every variant for every seed on `train` and evaluates on
/// `splits`. Progress lines go to `log`.
pub fn run_experiment(
    train: &[RawExample],
    splits: &[EvalSplit],
    config: &ExperimentConfig,
    mut log: impl FnMut(&str),
) -> Result<ExperimentReport> {
    let styles = crate::train::corpus_styles(train)
        .ok_or_else(|| Error::InvalidArgument("training corpus has no style labels".into()))?;
    let mut report = ExperimentReport {
        styles: styles.names().to_vec(),
        seeds: config.seeds.clone(),
        ..Default::default()
    };
    let mut per_seed = Vec::new();
    for &seed in &config.seeds {
        let mut vocab = None;
        let models = train_seed_models(train, config, seed, |t| {
            log(&format!(
                "seed {seed}: trained {} ({} steps, final window loss {:.4})",
                t.config().variant,
                t.step(),
                t.log().last().map_or(f64::NAN, |r| r.loss)
            ));
            vocab.get_or_insert_with(|| t.vocab().clone());
            Ok(())
        })?;
        let vocab = vocab.expect("at least one model trained");
        let scores = evaluate_seed(&models, &vocab, &styles, splits, config, seed, &mut report)?;
        for (v, split, s) in &scores {
            log(&format!(
                "seed {seed}: {:<7} {:<12} RL {:.4}",
                v.label(),
                split,
                s.rl.f1.value
            ));
        }
        per_seed.push((seed, scores));
    }
    assemble(&mut report, per_seed);
    Ok(report)
}

/// Evaluates checkpoints saved as `checkpoint_name(variant, seed)` in `dir`.
pub fn evaluate_checkpoints(
    dir: &Path,
    styles: &StyleSet,
    splits: &[EvalSplit],
    config: &ExperimentConfig,
) -> Result<ExperimentReport> {
    let mut report = ExperimentReport {
        styles: styles.names().to_vec(),
        seeds: config.seeds.clone(),
        ..Default::default()
    };
    let mut per_seed = Vec::new();
    for &seed in &config.seeds {
        let (models, vocab) = load_seed_models(dir, seed, &config.variants, styles)?;
        let scores = evaluate_seed(&models, &vocab, styles, splits, config, seed, &mut report)?;
        per_seed.push((seed, scores));
    }
    assemble(&mut report, per_seed);
    Ok(report)
}

impl ExperimentReport {
    pub fn score(&self, variant: EvalVariant, split: &str) -> Option<&ScoreRow> {
        self.scores
            .iter()
            .find(|r| r.variant == variant && r.split == split)
    }

    /// Median ROUGE-L F1 of a variant on a split.
    pub fn rouge_l(&self, variant: EvalVariant, split: &str) -> Option<f64> {
        self.score(variant, split).map(|r| r.median.rl.f1.value)
    }

    /// Classifier accuracy pooled over seeds for a split.
    pub fn pooled_accuracy(&self, split: &str) -> Option<f64> {
        let rows: Vec<_> = self.classifier.iter().filter(|r| r.split == split).collect();
        if rows.is_empty() {
            return None;
        }
        let k = rows[0].confusion.len();
        let mut sum = vec![vec![0; k]; k];
        for r in rows {
            for i in 0..k {
                for j in 0..k {
                    sum[i][j] += r.confusion[i][j];
                }
            }
        }
        Some(accuracy(&sum))
    }

    /// Posterior averaged over seeds for one group of a split.
    pub fn mean_posterior(&self, split: &str, true_style: Option<&str>) -> Option<Vec<f64>> {
        let rows: Vec<_> = self
            .posteriors
            .iter()
            .filter(|r| r.split == split && r.true_style.as_deref() == true_style)
            .collect();
        if rows.is_empty() {
            return None;
        }
        let k = rows[0].mean.len();
        Some(
            (0..k)
                .map(|i| rows.iter().map(|r| r.mean[i]).sum::<f64>() / rows.len() as f64)
                .collect(),
        )
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(s, "ROUGE F1 x100, median over seeds {}", seeds.join(","));
        let _ = writeln!(
            s,
            "{:<8} {:<12} {:>14} {:>14} {:>14}",
            "variant", "split", "R1", "R2", "RL"
        );
        for r in &self.scores {
            let cell = |m: &MetricScore| format!("{:.2} ± {:.2}", 100.0 * m.f1.value, 100.0 * m.f1.half_width);
            let _ = writeln!(
                s,
                "{:<8} {:<12} {:>14} {:>14} {:>14}",
                r.variant.label(),
                r.split,
                cell(&r.median.r1),
                cell(&r.median.r2),
                cell(&r.median.rl)
            );
        }
        let splits: Vec<&str> = {
            let mut v: Vec<&str> = self.classifier.iter().map(|r| r.split.as_str()).collect();
            v.dedup();
            v
        };
        for split in splits {
            let _ = writeln!(
                s,
                "\nclassifier accuracy on {split}: {:.3}",
                self.pooled_accuracy(split).unwrap_or(f64::NAN)
            );
        }
        let _ = writeln!(s, "\nmean posterior over [{}]", self.styles.join(", "));
        let mut seen: Vec<(String, Option<String>)> = Vec::new();
        for r in &self.posteriors {
            let key = (r.split.clone(), r.true_style.clone());
            if seen.contains(&key) {
                continue;
            }
            let mean = self
                .mean_posterior(&key.0, key.1.as_deref())
                .unwrap_or_default();
            let cells: Vec<String> = mean.iter().map(|p| format!("{p:.3}")).collect();
            let _ = writeln!(
                s,
                "{:<12} {:<10} [{}]",
                key.0,
                key.1.as_deref().unwrap_or("-"),
                cells.join(", ")
            );
            seen.push(key);
        }
        s
    }

    /// One JSON record per line, tagged with `kind`.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Tagged<'a, T: Serialize> {
            kind: &'a str,
            #[serde(flatten)]
            row: &'a T,
        }
        let mut out = String::new();
        let mut push = |line: String| {
            out.push_str(&line);
            out.push('\n');
        };
        for r in &self.scores {
            push(serde_json::to_string(&Tagged { kind: "score", row: r }).expect("serializable"));
        }
        for r in &self.classifier {
            push(serde_json::to_string(&Tagged { kind: "classifier", row: r }).expect("serializable"));
        }
        for r in &self.posteriors {
            push(serde_json::to_string(&Tagged { kind: "posterior", row: r }).expect("serializable"));
        }
        out
    }
}
