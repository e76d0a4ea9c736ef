//! `shaped`: synthesize corpora, train and evaluate shared-private models,
//! and decode with them.
//!
//! Exit codes: 0 on success, 1 when a verification (gradient check) fails,
//! 2 on usage, parse or I/O errors.

use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use shaped_core::checkpoint::Checkpoint;
use shaped_core::data::{read_corpus, write_corpus, RawExample, StyledExample, EOS};
use shaped_core::eval::{
    checkpoint_name, evaluate_checkpoints, train_seed_models, EvalSplit, EvalVariant, ExperimentConfig,
};
use shaped_core::gradcheck::{grad_check_with, GradCheckOptions};
use shaped_core::kv::KvMap;
use shaped_core::model::{Decoding, GenerationMode, LossOptions, ModelConfig, ShapedModel, StyleSet, Variant};
use shaped_core::synth::{default_specs, read_specs, split_corpus, synth_corpus};
use shaped_core::train::{corpus_styles, LoadedModel, TrainConfig, Trainer, VariantSpec};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] shaped_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{0}")]
    Verification(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Verification(_) => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: impl AsRef<Path>) -> impl FnOnce(io::Error) -> CliError {
    let path = path.as_ref().display().to_string();
    move |source| CliError::Io { path, source }
}

#[derive(Parser, Debug)]
#[command(name = "shaped", version, about = "Shared-private encoder-decoders for style-aware headline generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic multi-style corpus split into train/dev/test.
    Synth(SynthArgs),
    /// Train one model variant on a JSONL corpus.
    Train(TrainArgs),
    /// Generate one headline per input line.
    Generate(GenerateArgs),
    /// Score checkpoints (optionally training them first) and report ROUGE.
    Evaluate(EvaluateArgs),
    /// Print the style posterior of each input line.
    Classify(ClassifyArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Style spec file; the built-in suite is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Examples per style.
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated subset of the spec's styles.
    #[arg(long)]
    styles: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training configuration (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSONL corpus with source, target and optional style fields.
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// shaped, shared or private:<style>.
    #[arg(long)]
    variant: Option<String>,
    /// Comma-separated style set; defaults to the corpus labels, sorted.
    #[arg(long)]
    styles: Option<String>,
    /// Configuration override, e.g. `--set steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from a checkpoint; only `steps` may be overridden.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// shaped:<style>, mixture, uniform, shared or private:<style>.
    #[arg(long)]
    mode: String,
    /// Source lines; stdin when omitted or `-`.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output file; stdout when omitted or `-`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Token budget per output; defaults to the checkpoint's target cap.
    #[arg(long)]
    max_len: Option<usize>,
    /// Sample instead of decoding greedily.
    #[arg(long)]
    sample: bool,
    /// Sampling seed; line `i` uses `seed + i`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Directory holding `<variant>.seed<k>.ck` checkpoints.
    #[arg(long)]
    checkpoints: PathBuf,
    /// Labelled in-domain test corpus.
    #[arg(long)]
    corpus: PathBuf,
    /// Unlabelled out-of-domain split as NAME=PATH. Repeatable.
    #[arg(long, value_name = "NAME=PATH")]
    ood: Vec<String>,
    /// Train all needed checkpoints on this corpus first.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Training configuration; the experiment preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    /// Comma-separated variants among P, S, SP, M-SP, uniform.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    styles: Option<String>,
    #[arg(long, default_value_t = 1000)]
    resamples: usize,
    /// Write the structured report (JSON lines) here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Tiny-model settings (key = value): vocab, embed, hidden, attention,
    /// classifier_hidden, layers, init_scale, styles, batch, eps,
    /// tolerance, per_param.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// shaped, shared or private:s<k>; all three when omitted.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Classify(a) => classify(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(String::from)
        .collect()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut specs = match &a.config {
        Some(p) => read_specs(p)?,
        None => default_specs(),
    };
    if let Some(list) = &a.styles {
        let wanted = split_list(list);
        if let Some(bad) = wanted.iter().find(|w| !specs.iter().any(|s| &s.name == *w)) {
            return Err(CliError::Usage(format!("no style named {bad:?} in the spec")));
        }
        specs.retain(|s| wanted.contains(&s.name));
    }
    let corpus = synth_corpus(&specs, a.n, a.seed)?;
    let splits = split_corpus(&specs, &corpus, a.n)?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    write_corpus(&splits.train, a.out.join("train.jsonl"))?;
    write_corpus(&splits.dev, a.out.join("dev.jsonl"))?;
    write_corpus(&splits.test, a.out.join("test.jsonl"))?;
    for (name, ex) in &splits.out_of_domain {
        write_corpus(ex, a.out.join(format!("{name}.jsonl")))?;
    }
    eprintln!(
        "wrote {} train, {} dev, {} test and {} out-of-domain files to {}",
        splits.train.len(),
        splits.dev.len(),
        splits.test.len(),
        splits.out_of_domain.len(),
        a.out.display()
    );
    Ok(())
}

fn style_arg(s: &Option<String>) -> Result<Option<StyleSet>> {
    s.as_deref().map(|l| StyleSet::new(split_list(l)).map_err(CliError::from)).transpose()
}

fn train_config(config: Option<&Path>, fallback: TrainConfig, overrides: &[(&str, String)], sets: &[String]) -> Result<TrainConfig> {
    let mut kv = match config {
        Some(p) => KvMap::parse(&p.display().to_string(), &read_text(p)?)?,
        None => {
            let mut kv = KvMap::default();
            fallback.write_kv(&mut kv);
            kv
        }
    };
    for s in sets {
        kv.set_override(s)?;
    }
    for (k, v) in overrides {
        kv.set(k, v);
    }
    let c = TrainConfig::read_kv(&mut kv)?;
    kv.finish()?;
    Ok(c)
}

fn train(a: TrainArgs) -> Result<()> {
    let corpus = read_corpus(&a.corpus)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            if a.config.is_some() || a.variant.is_some() || a.styles.is_some() || a.seed.is_some() {
                return Err(CliError::Usage(
                    "--resume takes its configuration from the checkpoint; only --set steps=N is allowed".into(),
                ));
            }
            let mut steps = None;
            for s in &a.overrides {
                match s.split_once('=') {
                    Some((k, v)) if k.trim() == "steps" => {
                        steps = Some(v.trim().parse().map_err(|_| CliError::Usage(format!("bad steps value {v:?}")))?)
                    }
                    _ => return Err(CliError::Usage(format!("cannot override {s:?} when resuming"))),
                }
            }
            Trainer::resume(&corpus, &Checkpoint::load(path)?, steps)?
        }
        None => {
            let mut extra = Vec::new();
            if let Some(s) = a.seed {
                extra.push(("seed", s.to_string()));
            }
            if let Some(v) = &a.variant {
                extra.push(("variant", v.clone()));
            }
            let cfg = train_config(a.config.as_deref(), TrainConfig::default(), &extra, &a.overrides)?;
            Trainer::new(&corpus, cfg, style_arg(&a.styles)?)?
        }
    };
    eprintln!(
        "training {} on {} examples from step {}",
        trainer.model(),
        trainer.examples().len(),
        trainer.step()
    );
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut write_err = None;
    trainer.run(|rec| {
        if write_err.is_none() {
            if let Err(e) = writeln!(out, "{}", serde_json::to_string(rec).expect("serializable log")) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(CliError::Io { path: "<stdout>".into(), source: e });
    }
    trainer.checkpoint().save(&a.out)?;
    eprintln!(
        "saved {} after {} steps ({} skipped)",
        a.out.display(),
        trainer.step(),
        trainer.skipped()
    );
    Ok(())
}

fn input_lines(input: &Option<PathBuf>) -> Result<Vec<String>> {
    match input.as_deref() {
        Some(p) if p != Path::new("-") => {
            let f = fs::File::open(p).map_err(io_err(p))?;
            BufReader::new(f).lines().collect::<io::Result<_>>().map_err(io_err(p))
        }
        _ => io::stdin().lock().lines().collect::<io::Result<_>>().map_err(io_err("<stdin>")),
    }
}

fn output(out: &Option<PathBuf>) -> Result<(Box<dyn Write>, String)> {
    match out.as_deref() {
        Some(p) if p != Path::new("-") => {
            let f = fs::File::create(p).map_err(io_err(p))?;
            Ok((Box::new(BufWriter::new(f)), p.display().to_string()))
        }
        _ => Ok((Box::new(BufWriter::new(io::stdout())), "<stdout>".into())),
    }
}

fn encode_line(loaded: &LoadedModel, line: &str) -> Vec<usize> {
    let mut ids = loaded.vocab.encode(line);
    ids.truncate(loaded.config.max_source);
    ids
}

fn generate(a: GenerateArgs) -> Result<()> {
    let loaded = LoadedModel::load(&a.checkpoint)?;
    let mode = GenerationMode::parse(&a.mode, loaded.model.styles())?;
    let max_len = a.max_len.unwrap_or(loaded.config.max_target);
    let lines = input_lines(&a.input)?;
    let (mut w, name) = output(&a.out)?;
    for (i, line) in lines.iter().enumerate() {
        let ids = encode_line(&loaded, line);
        let text = if ids.is_empty() {
            String::new()
        } else {
            let decoding = if a.sample {
                Decoding::Sample { seed: a.seed.wrapping_add(i as u64) }
            } else {
                Decoding::Greedy
            };
            let out = loaded.model.generate(&ids, &mode, max_len, decoding)?;
            loaded.vocab.decode(&out)
        };
        writeln!(w, "{text}").map_err(io_err(&name))?;
    }
    w.flush().map_err(io_err(&name))
}

fn classify(a: ClassifyArgs) -> Result<()> {
    let loaded = LoadedModel::load(&a.checkpoint)?;
    if loaded.model.variant() != Variant::Shaped {
        return Err(CliError::Usage("classify needs a shaped checkpoint".into()));
    }
    let names = loaded.model.styles().names().to_vec();
    let lines = input_lines(&a.input)?;
    let (mut w, name) = output(&a.out)?;
    for line in &lines {
        let ids = encode_line(&loaded, line);
        let rec = if ids.is_empty() {
            json!({ "style": null, "posterior": null })
        } else {
            let p = loaded.model.posterior(&ids)?;
            let post: serde_json::Map<String, serde_json::Value> =
                names.iter().cloned().zip(p.p.iter().map(|&x| json!(x))).collect();
            json!({ "style": names[p.argmax()], "posterior": post })
        };
        writeln!(w, "{rec}").map_err(io_err(&name))?;
    }
    w.flush().map_err(io_err(&name))
}

fn parse_variants(list: &str) -> Result<Vec<EvalVariant>> {
    split_list(list).iter().map(|v| EvalVariant::parse(v).map_err(CliError::from)).collect()
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let train_cfg = train_config(a.config.as_deref(), TrainConfig::experiment(), &[], &[])?;
    let mut config = ExperimentConfig::new(train_cfg);
    config.seeds = split_list(&a.seeds)
        .iter()
        .map(|s| s.parse().map_err(|_| CliError::Usage(format!("bad seed {s:?}"))))
        .collect::<Result<_>>()?;
    if config.seeds.is_empty() {
        return Err(CliError::Usage("no seeds given".into()));
    }
    if let Some(v) = &a.variant {
        config.variants = parse_variants(v)?;
    }
    config.resamples = a.resamples;

    let test = read_corpus(&a.corpus)?;
    let mut splits = vec![EvalSplit { name: "test".into(), examples: test.clone(), in_domain: true }];
    for spec in &a.ood {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--ood expects NAME=PATH, got {spec:?}")))?;
        splits.push(EvalSplit {
            name: name.to_string(),
            examples: read_corpus(path)?,
            in_domain: false,
        });
    }

    let train: Option<Vec<RawExample>> = a.train.as_ref().map(read_corpus).transpose()?;
    let styles = match style_arg(&a.styles)? {
        Some(s) => s,
        None => corpus_styles(train.as_deref().unwrap_or(&test))
            .ok_or_else(|| CliError::Usage("corpus has no style labels; pass --styles".into()))?,
    };
    if let Some(train) = &train {
        fs::create_dir_all(&a.checkpoints).map_err(io_err(&a.checkpoints))?;
        for &seed in &config.seeds {
            train_seed_models(train, &config, seed, |t| {
                let path = a.checkpoints.join(checkpoint_name(&t.config().variant, seed));
                eprintln!("seed {seed}: trained {}, saving {}", t.config().variant, path.display());
                t.checkpoint().save(path)
            })?;
        }
    }
    let report = evaluate_checkpoints(&a.checkpoints, &styles, &splits, &config)?;
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        fs::write(out, report.to_jsonl()).map_err(io_err(out))?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let (source, text) = match &a.config {
        Some(p) => (p.display().to_string(), read_text(p)?),
        None => ("<defaults>".into(), String::new()),
    };
    let mut kv = KvMap::parse(&source, &text)?;
    let cfg = ModelConfig {
        vocab: kv.take_or("vocab", 20)?,
        embed: kv.take_or("embed", 8)?,
        hidden: kv.take_or("hidden", 12)?,
        attention: kv.take_or("attention", 12)?,
        classifier_hidden: kv.take_or("classifier_hidden", 12)?,
        layers: kv.take_or("layers", 1)?,
        init_scale: kv.take_or("init_scale", 0.5)?,
    };
    let n_styles: usize = kv.take_or("styles", 2)?;
    let batch: usize = kv.take_or("batch", 2)?;
    let opts = GradCheckOptions {
        eps: kv.take_or("eps", 1e-5)?,
        tolerance: kv.take_or("tolerance", 1e-4)?,
        per_param: kv.take("per_param")?,
        seed: a.seed,
    };
    kv.finish()?;
    if n_styles == 0 || batch == 0 {
        return Err(CliError::Usage("styles and batch must be at least 1".into()));
    }
    let styles = StyleSet::new((0..n_styles).map(|i| format!("s{i}")).collect())?;
    let variants = match &a.variant {
        Some(v) => vec![v.parse::<VariantSpec>()?.resolve(&styles)?],
        None => vec![Variant::Shaped, Variant::Shared, Variant::Private(0)],
    };
    if cfg.vocab < 6 {
        return Err(CliError::Usage("vocab must be at least 6".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let examples: Vec<StyledExample> = (0..batch)
        .map(|i| {
            let n_src = rng.gen_range(2..6);
            let n_tgt = rng.gen_range(1..4);
            let source = (0..n_src).map(|_| rng.gen_range(4..cfg.vocab)).collect();
            let mut target: Vec<usize> = (0..n_tgt).map(|_| rng.gen_range(4..cfg.vocab)).collect();
            target.push(EOS);
            StyledExample { source, target, style: Some(i % n_styles) }
        })
        .collect();
    let mut failed = Vec::new();
    for variant in variants {
        let model = ShapedModel::new(cfg.clone(), styles.clone(), variant, a.seed)?;
        let batch: Vec<_> = match variant {
            Variant::Private(z) => examples.iter().map(|e| StyledExample { style: Some(z), ..e.clone() }).collect(),
            _ => examples.clone(),
        };
        let ids: Vec<_> = model.store().ids().collect();
        let corrupt = a.corrupt_gradient;
        let report = grad_check_with(
            model.store(),
            &ids,
            &opts,
            |g| Ok(model.joint_loss(g, &batch, LossOptions::default())?.total),
            |grads| {
                if corrupt {
                    if let Some(&id) = ids.first() {
                        grads.get_mut(id).data_mut()[0] += 1.0;
                    }
                }
            },
        )?;
        let label = variant.to_string(&styles);
        let (worst, idx) = report.worst.clone().unwrap_or_default();
        let ok = report.passed(opts.tolerance);
        println!(
            "{label}: max relative error {:.3e} at {worst}[{idx}], {} coordinates ({} below floor {:.2e}): {}",
            report.max_rel_error,
            report.coordinates,
            report.below_floor,
            report.floor,
            if ok { "ok" } else { "FAILED" }
        );
        if !ok {
            failed.push(label);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "gradient check failed for {} (tolerance {:e})",
            failed.join(", "),
            opts.tolerance
        )))
    }
}
