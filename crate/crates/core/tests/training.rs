use std::collections::HashMap;

use shaped_core::checkpoint::Checkpoint;
use shaped_core::data::RawExample;
use shaped_core::synth::{default_specs, synth_corpus, SynthStyleSpec};
use shaped_core::tensor::ParamStore;
use shaped_core::train::{Trainer, TrainConfig, VariantSpec};

fn small_config(variant: VariantSpec, steps: usize) -> TrainConfig {
    TrainConfig {
        variant,
        steps,
        batch: 4,
        embed: 8,
        hidden: 8,
        attention: 8,
        classifier_hidden: 8,
        log_every: 5,
        seed: 3,
        ..Default::default()
    }
}

fn in_domain(n: usize) -> Vec<RawExample> {
    let specs: Vec<_> = default_specs().into_iter().filter(|s| !s.out_of_domain).collect();
    synth_corpus(&specs, n, 5).unwrap()
}

fn trained(corpus: &[RawExample], config: TrainConfig) -> Trainer {
    let mut t = Trainer::new(corpus, config, None).unwrap();
    t.run(|_| {}).unwrap();
    t
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let corpus = in_domain(10);
    let a = trained(&corpus, small_config(VariantSpec::Shaped, 12)).checkpoint().to_bytes();
    let b = trained(&corpus, small_config(VariantSpec::Shaped, 12)).checkpoint().to_bytes();
    assert_eq!(a, b);
    let other = TrainConfig { seed: 4, ..small_config(VariantSpec::Shaped, 12) };
    assert_ne!(a, trained(&corpus, other).checkpoint().to_bytes());
}

#[test]
fn resumed_run_continues_bit_identically() {
    let corpus = in_domain(10);
    let straight = trained(&corpus, small_config(VariantSpec::Shaped, 20));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ck");
    trained(&corpus, small_config(VariantSpec::Shaped, 10)).checkpoint().save(&path).unwrap();
    let mut resumed = Trainer::resume(&corpus, &Checkpoint::load(&path).unwrap(), Some(20)).unwrap();
    assert_eq!(resumed.step(), 10);
    resumed.run(|_| {}).unwrap();

    assert_eq!(resumed.checkpoint().to_bytes(), straight.checkpoint().to_bytes());
    assert_eq!(resumed.log(), &straight.log()[2..]);
}

#[test]
fn accumulators_never_decrease() {
    let corpus = in_domain(8);
    let mut t = Trainer::new(&corpus, small_config(VariantSpec::Shaped, 6), None).unwrap();
    let mut prev = t.optimizer().acc.clone();
    while !t.is_done() {
        t.train_step().unwrap();
        let now = t.optimizer().acc.clone();
        for (a, b) in prev.iter().zip(&now) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| y >= x && *y >= 0.0));
        }
        prev = now;
    }
}

fn private_prefix_of(params: &ParamStore, prefix: &str) -> Vec<(String, Vec<u64>)> {
    params
        .iter()
        .filter(|(_, n, _)| n.starts_with(prefix))
        .map(|(_, n, t)| (n.to_string(), t.data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

#[test]
fn training_on_one_style_leaves_other_decoders_untouched() {
    let herald: Vec<RawExample> = in_domain(6)
        .into_iter()
        .filter(|e| e.style.as_deref() == Some("herald"))
        .collect();
    let names = ["courier", "gazette", "herald", "tribune"];
    let styles = shaped_core::model::StyleSet::new(names.iter().map(|s| s.to_string()).collect()).unwrap();
    for stop_grad in [false, true] {
        let cfg = TrainConfig { classifier_stop_grad: stop_grad, ..small_config(VariantSpec::Shaped, 5) };
        let mut t = Trainer::new(&herald, cfg, Some(styles.clone())).unwrap();
        let before = t.model().store().clone();
        t.run(|_| {}).unwrap();
        let after = t.model().store();
        for z in [0, 1, 3] {
            let dec = |p: &ParamStore| {
                let mut v = private_prefix_of(p, &format!("private.{z}/dec"));
                v.extend(private_prefix_of(p, &format!("private.{z}/init")));
                v
            };
            assert_eq!(dec(&before), dec(after), "style {z} decoder moved");
            let all = |p: &ParamStore| private_prefix_of(p, &format!("private.{z}/"));
            assert_eq!(all(&before) == all(after), stop_grad, "style {z}, stop_grad {stop_grad}");
        }
        assert_ne!(
            private_prefix_of(&before, "private.2/dec"),
            private_prefix_of(after, "private.2/dec")
        );
    }
}

#[test]
fn shared_and_private_variants_touch_only_their_stacks() {
    let corpus = in_domain(6);
    let t = trained(&corpus, small_config(VariantSpec::Shared, 4));
    assert!(t.model().store().iter().all(|(_, n, _)| !n.starts_with("private")));
    let t = trained(&corpus, small_config(VariantSpec::Private("gazette".into()), 4));
    let names: Vec<_> = t.model().store().iter().map(|(_, n, _)| n.to_string()).collect();
    assert!(names.iter().all(|n| !n.starts_with("shared") && !n.starts_with("classifier")));
    assert!(names.iter().filter(|n| n.starts_with("private.")).all(|n| n.starts_with("private.1/")));
}

#[test]
fn memorizes_a_small_corpus() {
    let corpus: Vec<RawExample> = in_domain(13).into_iter().take(50).collect();
    let cfg = TrainConfig {
        variant: VariantSpec::Shared,
        steps: 1500,
        batch: 10,
        embed: 24,
        hidden: 24,
        attention: 24,
        lr: 0.1,
        adagrad_init: 0.1,
        log_every: 50,
        ..Default::default()
    };
    let t = trained(&corpus, cfg);
    let last = t.log().last().unwrap();
    assert!(last.token_loss < 0.1, "final token loss {}", last.token_loss);
}

fn unigram_accuracy(corpus: &[RawExample]) -> f64 {
    let mut counts: HashMap<&str, HashMap<&str, usize>> = HashMap::new();
    for e in corpus {
        let style = e.style.as_deref().unwrap();
        for tok in e.target.split_whitespace() {
            *counts.entry(style).or_default().entry(tok).or_default() += 1;
        }
    }
    let correct = corpus
        .iter()
        .filter(|e| {
            let score = |s: &str| -> f64 {
                let c = &counts[s];
                let total: usize = c.values().sum();
                e.target
                    .split_whitespace()
                    .map(|t| ((c.get(t).copied().unwrap_or(0) as f64 + 0.1) / total as f64).ln())
                    .sum()
            };
            let best = counts
                .keys()
                .max_by(|a, b| score(a).total_cmp(&score(b)).then(b.cmp(a)))
                .unwrap();
            Some(*best) == e.style.as_deref()
        })
        .count();
    correct as f64 / corpus.len() as f64
}

#[test]
fn default_styles_are_unigram_separable() {
    let acc = unigram_accuracy(&in_domain(300));
    assert!(acc >= 0.99, "unigram accuracy {acc}");
}

#[test]
fn identical_specs_give_identical_target_distributions() {
    let herald = default_specs().into_iter().find(|s| s.name == "herald").unwrap();
    let twin = SynthStyleSpec { name: "twin".into(), ..herald.clone() };
    let corpus = synth_corpus(&[herald, twin], 4000, 9).unwrap();
    let dist = |name: &str| {
        let mut h: HashMap<String, f64> = HashMap::new();
        let toks: Vec<&str> = corpus
            .iter()
            .filter(|e| e.style.as_deref() == Some(name))
            .flat_map(|e| e.target.split_whitespace())
            .collect();
        for t in &toks {
            *h.entry(t.to_string()).or_default() += 1.0 / toks.len() as f64;
        }
        h
    };
    let (a, b) = (dist("herald"), dist("twin"));
    let keys: std::collections::BTreeSet<_> = a.keys().chain(b.keys()).collect();
    let tv: f64 = keys
        .iter()
        .map(|k| (a.get(*k).unwrap_or(&0.0) - b.get(*k).unwrap_or(&0.0)).abs())
        .sum::<f64>()
        / 2.0;
    // Two independent draws from the same generator.
    assert!(tv < 0.05, "total variation {tv}");
}
