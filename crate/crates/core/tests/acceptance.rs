//! One pass/fail line per acceptance criterion. The synthetic experiment
//! behind criteria 4 to 7 trains 18 models and takes several minutes.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shaped_core::checkpoint::Checkpoint;
use shaped_core::data::{RawExample, StyledExample, BOS, EOS};
use shaped_core::eval::*;
use shaped_core::gradcheck::{grad_check, GradCheckOptions};
use shaped_core::model::*;
use shaped_core::synth::{default_specs, split_corpus, synth_corpus};
use shaped_core::tensor::{ParamStore, Tensor};
use shaped_core::train::{adagrad_step, AdagradState, TrainConfig, Trainer, VariantSpec};

const EXAMPLES_PER_STYLE: usize = 2000;
const CORPUS_SEED: u64 = 7;
const OUT_OF_DOMAIN_EVAL: usize = 400;
const NEAR_BLEND: &str = "chronicle";
const NEAREST_STYLE: &str = "herald";

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn style_set(n: usize) -> StyleSet {
    StyleSet::new((0..n).map(|i| format!("s{i}")).collect()).unwrap()
}

fn gradient_fidelity() -> Outcome {
    let cfg = ModelConfig {
        vocab: 20,
        embed: 8,
        hidden: 12,
        layers: 1,
        attention: 12,
        classifier_hidden: 12,
        init_scale: 0.5,
    };
    let model = ShapedModel::new(cfg, style_set(2), Variant::Shaped, 3).unwrap();
    let batch = vec![
        StyledExample { source: vec![4, 5, 6, 7], target: vec![8, 9, EOS], style: Some(0) },
        StyledExample { source: vec![10, 11, 4], target: vec![12, EOS], style: Some(1) },
    ];
    let ids: Vec<_> = model.store().ids().collect();
    let opts = GradCheckOptions::default();
    let start = Instant::now();
    let r = grad_check(model.store(), &ids, &opts, |g| {
        Ok(model.joint_loss(g, &batch, LossOptions::default())?.total)
    })
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (name, idx) = r.worst.clone().unwrap_or_default();
    outcome(
        r.passed(opts.tolerance) && secs < 120.0,
        format!(
            "{} coordinates in {} groups, max rel error {:.2e} at {name}[{idx}], {} below floor {:.1e}, {secs:.1}s",
            r.coordinates,
            ids.len(),
            r.max_rel_error,
            r.below_floor,
            r.floor
        ),
    )
}

fn tiny(n_styles: usize, variant: Variant, seed: u64) -> ShapedModel {
    let cfg = ModelConfig {
        vocab: 13,
        embed: 4,
        hidden: 6,
        layers: 1,
        attention: 5,
        classifier_hidden: 4,
        init_scale: 0.7,
    };
    ShapedModel::new(cfg, style_set(n_styles), variant, seed).unwrap()
}

fn decode_dists(model: &ShapedModel, source: &[usize], mode: &GenerationMode, feed: &[usize]) -> Vec<Vec<f64>> {
    let mut s = model.session(source, mode).unwrap();
    let mut prev = BOS;
    feed.iter()
        .map(|&y| {
            let d = s.step(prev).unwrap();
            prev = y;
            d
        })
        .collect()
}

fn random_seq(rng: &mut ChaCha8Rng, len: std::ops::Range<usize>) -> Vec<usize> {
    let n = rng.gen_range(len);
    (0..n).map(|_| rng.gen_range(3..13)).collect()
}

fn mixture_collapse() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut steps = 0;
    for instance in 0..100u64 {
        let n = 2 + (instance as usize % 3);
        let model = tiny(n, Variant::Shaped, instance);
        let source = random_seq(&mut rng, 1..7);
        let feed = random_seq(&mut rng, 1..6);
        let z = rng.gen_range(0..n);
        let mixed = decode_dists(&model, &source, &GenerationMode::Weighted(StylePosterior::one_hot(n, z)), &feed);
        let single = decode_dists(&model, &source, &GenerationMode::Shaped(z), &feed);
        for (a, b) in mixed.iter().zip(&single) {
            steps += 1;
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    outcome(worst <= 1e-12, format!("100 instances, {steps} decode steps, max |diff| {worst:.1e}"))
}

fn bits(store: &ParamStore, prefix: &str) -> Vec<u64> {
    store
        .iter()
        .filter(|(_, n, _)| n.starts_with(prefix))
        .flat_map(|(_, _, t)| t.data().iter().map(|x| x.to_bits()))
        .collect()
}

fn normalization_and_isolation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut negative = false;
    let mut count = 0;
    for seed in 0..30u64 {
        let n = 1 + (seed as usize % 3);
        let source = random_seq(&mut rng, 1..7);
        let feed = random_seq(&mut rng, 1..6);
        let shaped = tiny(n, Variant::Shaped, seed);
        let z = rng.gen_range(0..n);
        let mut runs: Vec<(ShapedModel, GenerationMode)> = vec![
            (shaped.clone(), GenerationMode::Mixture),
            (shaped.clone(), GenerationMode::UniformMixture),
            (shaped.clone(), GenerationMode::Shaped(z)),
            (tiny(n, Variant::Shared, seed), GenerationMode::SharedOnly),
            (tiny(n, Variant::Private(z), seed), GenerationMode::PrivateOnly(z)),
        ];
        for (m, mode) in runs.drain(..) {
            for d in decode_dists(&m, &source, &mode, &feed) {
                count += 1;
                negative |= d.iter().any(|&p| p < 0.0);
                worst = worst.max((d.iter().sum::<f64>() - 1.0).abs());
            }
        }
        let p = shaped.posterior(&source).unwrap();
        count += 1;
        worst = worst.max((p.p.iter().sum::<f64>() - 1.0).abs());
    }
    let normalized = worst <= 1e-9 && !negative;

    // Sequence loss along style z has exactly zero gradient on the other
    // private stacks.
    let model = tiny(3, Variant::Shaped, 99);
    let grads = {
        let mut g = shaped_core::tensor::Graph::new(model.store());
        let l = model.sequence_nll(&mut g, &[4, 5, 6], &[7, 8, EOS], Some(1)).unwrap();
        g.backward(l).unwrap()
    };
    let seq_isolated = [0, 2].iter().all(|&z| {
        model.params().private[z]
            .as_ref()
            .unwrap()
            .ids()
            .iter()
            .all(|&id| grads.get(id).data().iter().all(|&x| x == 0.0))
    });

    // Training on one style's examples: other styles' decoders stay
    // bit-identical under full joint training; with the classifier
    // detached every other private parameter does.
    let herald: Vec<RawExample> = synth_corpus(&default_specs()[..4], 8, 1)
        .unwrap()
        .into_iter()
        .filter(|e| e.style.as_deref() == Some("herald"))
        .collect();
    let names = StyleSet::new(["courier", "gazette", "herald", "tribune"].map(String::from).to_vec()).unwrap();
    let mut train_isolated = true;
    for stop_grad in [false, true] {
        let cfg = TrainConfig {
            steps: 5,
            batch: 4,
            embed: 8,
            hidden: 8,
            attention: 8,
            classifier_hidden: 8,
            classifier_stop_grad: stop_grad,
            ..Default::default()
        };
        let mut t = Trainer::new(&herald, cfg, Some(names.clone())).unwrap();
        let before = t.model().store().clone();
        t.run(|_| {}).unwrap();
        let after = t.model().store();
        for z in [0, 1, 3] {
            for part in ["dec", "init"] {
                let p = format!("private.{z}/{part}");
                train_isolated &= bits(&before, &p) == bits(after, &p);
            }
            if stop_grad {
                let p = format!("private.{z}/");
                train_isolated &= bits(&before, &p) == bits(after, &p);
            }
        }
    }
    outcome(
        normalized && seq_isolated && train_isolated,
        format!(
            "{count} distributions, max |sum - 1| {worst:.1e}; sequence-loss isolation {seq_isolated}; training isolation {train_isolated}"
        ),
    )
}

struct Experiment {
    report: ExperimentReport,
    minutes: f64,
}

fn run_synthetic_experiment() -> Experiment {
    let specs = default_specs();
    let corpus = synth_corpus(&specs, EXAMPLES_PER_STYLE, CORPUS_SEED).unwrap();
    let splits = split_corpus(&specs, &corpus, EXAMPLES_PER_STYLE).unwrap();
    let mut eval = vec![EvalSplit {
        name: "test".into(),
        examples: splits.test.clone(),
        in_domain: true,
    }];
    for (name, ex) in &splits.out_of_domain {
        eval.push(EvalSplit {
            name: name.clone(),
            examples: ex[..OUT_OF_DOMAIN_EVAL].to_vec(),
            in_domain: false,
        });
    }
    let config = ExperimentConfig::new(TrainConfig::experiment());
    let start = Instant::now();
    let report = run_experiment(&splits.train, &eval, &config, |line| eprintln!("  {line}")).unwrap();
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    eprintln!("{}", report.to_table());
    Experiment { report, minutes }
}

fn table_one(e: &Experiment) -> Outcome {
    let rl = |v| e.report.rouge_l(v, "test").unwrap();
    let (sp, msp, s, p) = (
        rl(EvalVariant::Shaped),
        rl(EvalVariant::Mixture),
        rl(EvalVariant::Shared),
        rl(EvalVariant::Private),
    );
    let pass = sp >= msp && sp > s && sp > p && (sp - s) * 100.0 >= 0.5 && e.minutes <= 30.0;
    outcome(
        pass,
        format!(
            "median RL x100: SP {:.2}, M-SP {:.2}, S {:.2}, P {:.2}; {:.1} min",
            sp * 100.0,
            msp * 100.0,
            s * 100.0,
            p * 100.0,
            e.minutes
        ),
    )
}

fn table_two(e: &Experiment) -> Outcome {
    let s = e.report.rouge_l(EvalVariant::Shared, NEAR_BLEND).unwrap();
    let m = e.report.rouge_l(EvalVariant::Mixture, NEAR_BLEND).unwrap();
    let post = e.report.mean_posterior(NEAR_BLEND, None).unwrap();
    let z = e.report.styles.iter().position(|n| n == NEAREST_STYLE).unwrap();
    let nearest_is_max = argmax(&post) == z;
    outcome(
        m > s && post[z] >= 0.5 && nearest_is_max,
        format!(
            "{NEAR_BLEND}: M-SP {:.2} vs S {:.2}; mean posterior on {NEAREST_STYLE} {:.3}",
            m * 100.0,
            s * 100.0,
            post[z]
        ),
    )
}

fn classifier_accuracy(e: &Experiment) -> Outcome {
    let acc = e.report.pooled_accuracy("test").unwrap();
    outcome(acc >= 0.90, format!("pooled held-out accuracy {acc:.4}"))
}

fn uniform_ablation(e: &Experiment) -> Outcome {
    let m = e.report.rouge_l(EvalVariant::Mixture, "test").unwrap();
    let u = e.report.rouge_l(EvalVariant::Uniform, "test").unwrap();
    outcome(m >= u, format!("M-SP {:.2} vs uniform {:.2}", m * 100.0, u * 100.0))
}

fn metric_oracle() -> Outcome {
    let toks = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    let r1 = rouge_n(&toks("a b b"), &toks("a b c"), 1).unwrap();
    let rl = rouge_l(&toks("the cat sat"), &toks("the cat sat down"));
    let rev = rouge_l(&toks("a b c d"), &toks("d c b a"));
    let empty = rouge_l(&toks(""), &toks("a b"));
    let rouge_ok = r1.precision == 2.0 / 3.0
        && r1.recall == 2.0 / 3.0
        && r1.f1 == 2.0 / 3.0
        && rl.precision == 1.0
        && rl.recall == 0.75
        && rl.f1 == 6.0 / 7.0
        && lcs_len(&toks("a b c d"), &toks("d c b a")) == 1
        && rev.recall == 0.25
        && empty.f1 == 0.0;

    let mut params = ParamStore::new();
    let id = params.add("p", Tensor::vector(vec![1.0])).unwrap();
    let mut grads = shaped_core::tensor::Gradients::zeros_like(&params);
    grads.get_mut(id).data_mut()[0] = 2.0;
    let mut state = AdagradState::new(&params, 0.0);
    adagrad_step(&mut params, &grads, &mut state, 0.1, 0.0).unwrap();
    let first = params.get(id).data()[0] == 0.9 && state.acc[0].data()[0] == 4.0;
    adagrad_step(&mut params, &grads, &mut state, 0.1, 0.0).unwrap();
    let second = params.get(id).data()[0] == 0.9 - 0.2 / 8f64.sqrt() && state.acc[0].data()[0] == 8.0;
    outcome(
        rouge_ok && first && second,
        format!("ROUGE hand cases {rouge_ok}; Adagrad step 1 {first}, step 2 {second}"),
    )
}

fn determinism() -> Outcome {
    let specs: Vec<_> = default_specs().into_iter().filter(|s| !s.out_of_domain).collect();
    let a = synth_corpus(&specs, 12, 4).unwrap();
    let corpus_same = a == synth_corpus(&specs, 12, 4).unwrap();
    let train = TrainConfig {
        steps: 8,
        batch: 4,
        embed: 8,
        hidden: 8,
        attention: 8,
        classifier_hidden: 8,
        log_every: 4,
        seed: 5,
        ..Default::default()
    };
    let ck = || {
        let mut t = Trainer::new(&a, TrainConfig { variant: VariantSpec::Shaped, ..train.clone() }, None).unwrap();
        t.run(|_| {}).unwrap();
        t.checkpoint().to_bytes()
    };
    let bytes = ck();
    let checkpoints_same = bytes == ck();
    let round_trip = Checkpoint::from_bytes(&bytes).unwrap().to_bytes() == bytes;

    let split = vec![EvalSplit { name: "test".into(), examples: a[..16].to_vec(), in_domain: true }];
    let mut cfg = ExperimentConfig::new(train);
    cfg.seeds = vec![1, 2];
    cfg.resamples = 50;
    let report = || run_experiment(&a, &split, &cfg, |_| {}).unwrap().to_jsonl();
    let reports_same = report() == report();
    outcome(
        corpus_same && checkpoints_same && round_trip && reports_same,
        format!(
            "corpus {corpus_same}, checkpoints {checkpoints_same}, round trip {round_trip}, reports {reports_same}"
        ),
    )
}

#[test]
fn acceptance() {
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "gradient fidelity", gradient_fidelity()),
        (2, "mixture collapse", mixture_collapse()),
        (3, "normalization and isolation", normalization_and_isolation()),
    ];
    let experiment = run_synthetic_experiment();
    results.push((4, "in-domain ordering", table_one(&experiment)));
    results.push((5, "out-of-domain blend", table_two(&experiment)));
    results.push((6, "classifier accuracy", classifier_accuracy(&experiment)));
    results.push((7, "uniform mixture ablation", uniform_ablation(&experiment)));
    results.push((8, "metric and optimizer oracle", metric_oracle()));
    results.push((9, "determinism", determinism()));

    for (n, name, o) in &results {
        println!("criterion {n} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
