use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use nmtlab::corpus::{Document, ParallelPair, RawTask};
use nmtlab::harness::{
    corpus_vocab, eval_items, few_shot_subsample, gen_cipher_corpus, read_corpus,
    read_settings_file, read_task, render_lang_scores, render_report, run_experiment,
    task_examples, write_corpus, RegimeSpec, Report, Settings, KEYS, REGIME_KEYS,
};
use nmtlab::metrics::ScorerRegistry;
use nmtlab::model::ModelConfig;
use nmtlab::objectives::{render_example, NoiseSpec, ObjectiveRegistry};
use nmtlab::sampler::{MixedStream, MixtureSpec};
use nmtlab::trainer::{
    checkpoint_dir_name, evaluate, finetune, load_checkpoint, pretrain, save_checkpoint,
    score_predictions, Checkpoint, Integrity, ObjectiveMap, PretrainOptions, TrainConfig,
};
use nmtlab::vocab::Vocab;

#[derive(Parser)]
#[command(
    name = "nmtlab",
    version,
    about = "Desk-scale multilingual pre-training laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a cipher-language corpus.
    BuildData(BuildData),
    /// Pre-train from a random init (or resume) on a corpus directory.
    Pretrain(Pretrain),
    /// Fine-tune a checkpoint on a translation task file.
    Finetune(Finetune),
    /// Decode a task file with a checkpoint into a predictions TSV.
    Predict(Predict),
    /// Score a predictions TSV against gold references.
    Evaluate(Evaluate),
    /// Run the full objective x regime matrix.
    Experiment(Experiment),
    /// Show objective examples with special tokens bracketed.
    InspectExample(InspectExample),
    /// Render a saved experiment report.
    Report(ReportCmd),
}

/// Settings from a `key = value` file, overridden by `--key value` flags.
#[derive(Args)]
struct SettingsArgs {
    /// Settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any setting as `--key value` or `--key=value`; see `--list-keys`.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "SETTINGS"
    )]
    overrides: Vec<String>,
    /// Print every setting with its resolved value and exit.
    #[arg(long)]
    list_keys: bool,
}

#[derive(Args)]
struct BuildData {
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    settings: SettingsArgs,
}

#[derive(Args)]
struct Pretrain {
    /// Corpus directory written by `build-data`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoints are written to `OUT/step-NNNNNN`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "mlm", value_parser = ["mlm", "tlm", "nmt", "dnmt", "dnmt-lm"])]
    objective: String,
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    #[arg(long, default_value_t = 0.10)]
    parallel_ratio: f64,
    #[arg(long, default_value_t = 0.3)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the random initialisation.
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
    #[arg(long, default_value_t = 4096)]
    batch_tokens: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 500)]
    checkpoint_every: u64,
    #[arg(long, default_value_t = 100)]
    sentinel_count: usize,
    #[arg(long, default_value_t = 0.15)]
    noise_density: f64,
    #[arg(long, default_value_t = 3.0)]
    mean_span_length: f64,
    /// Continue this checkpoint's run to `--steps`, replaying its data order.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct Finetune {
    /// Pre-trained checkpoint directory.
    #[arg(long)]
    from: PathBuf,
    /// Task training file (`id, src, tgt, input, target` TSV).
    #[arg(long)]
    task: PathBuf,
    /// Validation file; defaults to `task.valid.tsv` next to `--task`.
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Test file to score the selected checkpoint on.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value = "few-shot", value_parser = ["few-shot", "low", "high", "zero-shot-analogue"])]
    regime: String,
    /// Best checkpoint is written here.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "em")]
    metric: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, default_value_t = 1024)]
    batch_tokens: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
}

#[derive(Args)]
struct Predict {
    #[arg(long)]
    from: PathBuf,
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Evaluate {
    /// `id<TAB>lang<TAB>prediction` lines.
    #[arg(long)]
    predictions: PathBuf,
    /// `id<TAB>lang<TAB>reference` lines, or a task file.
    #[arg(long)]
    gold: PathBuf,
    #[arg(long, default_value = "em")]
    metric: String,
    /// Also write the TSV table here.
    #[arg(long)]
    tsv: Option<PathBuf>,
}

#[derive(Args)]
struct Experiment {
    /// Corpus directory; generated from the settings when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Writes report.json, report.txt, report.tsv and settings.txt.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    settings: SettingsArgs,
}

#[derive(Args)]
struct InspectExample {
    #[arg(long, default_value = "mlm", value_parser = ["mlm", "tlm", "nmt", "dnmt", "dnmt-lm"])]
    objective: String,
    /// Draw records from this corpus directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Source text to use instead of corpus records.
    #[arg(long)]
    text: Option<String>,
    #[arg(long, default_value = "en")]
    lang: String,
    /// Translation of `--text`, for parallel objectives.
    #[arg(long)]
    target_text: Option<String>,
    #[arg(long, default_value = "xa")]
    target_lang: String,
    #[arg(long, default_value_t = 3)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    sentinel_count: usize,
    #[arg(long, default_value_t = 0.15)]
    noise_density: f64,
    #[arg(long, default_value_t = 3.0)]
    mean_span_length: f64,
}

#[derive(Args)]
struct ReportCmd {
    /// report.json written by `experiment`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    tsv: bool,
}

fn override_pairs(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            bail!("expected a --key flag, found {a:?}");
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .with_context(|| format!("--{flag} needs a value"))?;
                (flag.to_string(), v.clone())
            }
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

fn resolve_settings(args: &SettingsArgs) -> Result<Option<Settings>> {
    let file = match &args.config {
        Some(p) => read_settings_file(p)?,
        None => Vec::new(),
    };
    let cli = override_pairs(&args.overrides)?;
    let s = Settings::resolve([file.as_slice(), cli.as_slice()])?;
    if args.list_keys {
        print!("{}", s.to_text());
        println!(
            "# also {{regime}}_{} for each regime",
            REGIME_KEYS.join(", {regime}_")
        );
        debug_assert!(KEYS.iter().all(|k| s.entries().contains_key(*k)));
        return Ok(None);
    }
    Ok(Some(s))
}

fn load(dir: &Path) -> Result<Checkpoint> {
    let (c, integrity) = load_checkpoint(dir)?;
    if let Integrity::HashMismatch { expected, actual } = integrity {
        log::warn!(
            "{}: data hash {actual} does not match manifest {expected}",
            dir.display()
        );
    }
    Ok(c)
}

fn build_data(cmd: BuildData) -> Result<()> {
    let Some(s) = resolve_settings(&cmd.settings)? else {
        return Ok(());
    };
    let corpus = gen_cipher_corpus(
        &s.cipher,
        &s.sizes,
        &mut nmtlab::seeded_rng(s.experiment.seed),
    )?;
    write_corpus(&corpus, &cmd.out)?;
    fs::write(cmd.out.join("settings.txt"), s.to_text())?;
    println!(
        "{}: {} documents, {} pairs, task {}/{}/{}",
        cmd.out.display(),
        corpus.mono.len(),
        corpus.parallel.len(),
        corpus.task.train.len(),
        corpus.task.valid.len(),
        corpus.task.test.len()
    );
    Ok(())
}

fn run_pretrain(cmd: Pretrain) -> Result<()> {
    let corpus = read_corpus(&cmd.data)?;
    let (start, resume) = match &cmd.resume {
        Some(dir) => (load(dir)?, true),
        None => {
            let vocab = corpus_vocab(&corpus, cmd.sentinel_count)?;
            let model = ModelConfig::desk(vocab.size());
            (Checkpoint::initial(model, &vocab, cmd.init_seed)?, false)
        }
    };
    let vocab = start.vocab()?;
    let (objective, mixture, noise, batch_tokens, learning_rate) = if resume {
        let run = &start.run;
        (
            run.objective
                .clone()
                .context("checkpoint has no objective to resume")?,
            run.mixture.context("checkpoint has no mixture to resume")?,
            run.noise
                .context("checkpoint has no noise settings to resume")?,
            run.batch_tokens,
            run.learning_rate,
        )
    } else {
        let mixture = MixtureSpec {
            alpha: cmd.alpha,
            parallel_ratio: cmd.parallel_ratio,
            seed: cmd.seed,
            ..MixtureSpec::default()
        };
        let noise = NoiseSpec {
            noise_density: cmd.noise_density,
            mean_span_length: cmd.mean_span_length,
        };
        (
            cmd.objective.clone(),
            mixture,
            noise,
            cmd.batch_tokens,
            cmd.learning_rate,
        )
    };
    let objectives = ObjectiveMap::from_name(
        &ObjectiveRegistry::default(),
        &objective,
        mixture.parallel_ratio,
    )?;
    let cfg = TrainConfig {
        batch_tokens,
        steps: cmd.steps,
        checkpoint_every: cmd.checkpoint_every.min(cmd.steps),
        learning_rate,
        seed: mixture.seed,
    };
    let stream = MixedStream::from_records(corpus.mono, corpus.parallel, mixture)?;
    let opts = PretrainOptions {
        resume,
        checkpoint_dir: Some(cmd.out.clone()),
        ..PretrainOptions::default()
    };
    let out = pretrain(&cfg, stream, &objectives, &noise, &vocab, &start, &opts)?;
    for c in &out.checkpoints {
        println!(
            "step {}: {}",
            c.step,
            cmd.out.join(checkpoint_dir_name(c.step)).display()
        );
    }
    let k = out.losses.len().min(20);
    if k > 0 {
        let tail = &out.losses[out.losses.len() - k..];
        println!(
            "final loss {:.4} (mean of last {k} steps)",
            tail.iter().sum::<f64>() / k as f64
        );
    }
    println!("parallel fraction {:.3}", out.parallel_fraction());
    Ok(())
}

fn run_finetune(cmd: Finetune) -> Result<()> {
    let start = load(&cmd.from)?;
    let vocab = start.vocab()?;
    let regime = RegimeSpec::by_name(&cmd.regime)?;
    let pool = read_task(&cmd.task)?;
    let valid_path = match &cmd.valid {
        Some(p) => p.clone(),
        None => cmd.task.with_file_name(nmtlab::harness::TASK_VALID_FILE),
    };
    let valid = eval_items(&read_task(&valid_path)?, &vocab)?;
    let train = match regime.examples {
        Some(k) if k < pool.len() => {
            few_shot_subsample(&pool, k, &mut nmtlab::seeded_rng(cmd.seed))?
        }
        _ => pool,
    };
    let steps = cmd.steps.unwrap_or(regime.steps);
    let cfg = TrainConfig {
        batch_tokens: cmd.batch_tokens,
        steps,
        checkpoint_every: regime.checkpoint_every.min(steps),
        learning_rate: cmd.learning_rate,
        seed: cmd.seed,
    };
    let scorer = ScorerRegistry::default().get(&cmd.metric)?;
    log::info!("fine-tuning on {} examples for {steps} steps", train.len());
    let out = finetune(
        &cfg,
        &task_examples(&train, &vocab)?,
        &valid,
        scorer.as_ref(),
        &vocab,
        &start,
    )?;
    for p in &out.history {
        println!("step {:>6}  valid {} {:.1}", p.step, cmd.metric, p.score);
    }
    println!(
        "selected step {} ({} {:.1})",
        out.best.step,
        cmd.metric,
        out.best_score()
    );
    save_checkpoint(&out.best, &cmd.out)?;
    if let Some(test) = &cmd.test {
        let items = eval_items(&read_task(test)?, &vocab)?;
        let res = evaluate(&out.best.params, &items, scorer.as_ref(), &vocab)?;
        print!(
            "{}",
            render_lang_scores(&cmd.metric, &res.per_lang, res.aggregate).text
        );
    }
    Ok(())
}

fn run_predict(cmd: Predict) -> Result<()> {
    let c = load(&cmd.from)?;
    let vocab = c.vocab()?;
    let items = eval_items(&read_task(&cmd.task)?, &vocab)?;
    let res = evaluate(
        &c.params,
        &items,
        ScorerRegistry::default().get("em")?.as_ref(),
        &vocab,
    )?;
    let mut text = String::new();
    for (it, p) in items.iter().zip(&res.predictions) {
        text.push_str(&format!(
            "{}\t{}\t{}\n",
            it.id,
            it.lang,
            p.replace(['\t', '\n'], " ")
        ));
    }
    fs::write(&cmd.out, text).with_context(|| format!("writing {}", cmd.out.display()))?;
    Ok(())
}

/// `(id, lang, text)` rows; task files contribute their direction and target.
fn read_triples(path: &Path) -> Result<Vec<(String, String, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        match f[..] {
            [id, lang, t] => out.push((id.into(), lang.into(), t.into())),
            [id, src, tgt, _, target] => {
                out.push((id.into(), format!("{src}-{tgt}"), target.into()))
            }
            _ => bail!(
                "{}:{}: expected 3 or 5 tab-separated fields",
                path.display(),
                i + 1
            ),
        }
    }
    Ok(out)
}

fn run_evaluate(cmd: Evaluate) -> Result<()> {
    let preds = read_triples(&cmd.predictions)?;
    let gold = read_triples(&cmd.gold)?;
    let by_id: HashMap<&str, (&str, &str)> = preds
        .iter()
        .map(|(id, l, p)| (id.as_str(), (l.as_str(), p.as_str())))
        .collect();
    if by_id.len() != preds.len() {
        bail!("duplicate ids in {}", cmd.predictions.display());
    }
    let mut triples = Vec::with_capacity(gold.len());
    for (id, lang, reference) in &gold {
        let (plang, pred) = by_id
            .get(id.as_str())
            .with_context(|| format!("no prediction for id {id:?}"))?;
        if plang != lang {
            bail!("id {id:?}: prediction language {plang:?} differs from gold {lang:?}");
        }
        triples.push((lang.as_str(), *pred, reference.as_str()));
    }
    if preds.len() > gold.len() {
        log::warn!(
            "{} predictions have no gold reference",
            preds.len() - gold.len()
        );
    }
    let scorer = ScorerRegistry::default().get(&cmd.metric)?;
    let (per_lang, aggregate) = score_predictions(triples, scorer.as_ref())?;
    let r = render_lang_scores(&cmd.metric, &per_lang, aggregate);
    print!("{}\n{}", r.text, r.tsv);
    if let Some(p) = &cmd.tsv {
        fs::write(p, &r.tsv)?;
    }
    Ok(())
}

fn run_experiment_cmd(cmd: Experiment) -> Result<()> {
    let Some(s) = resolve_settings(&cmd.settings)? else {
        return Ok(());
    };
    let corpus = match &cmd.data {
        Some(dir) => read_corpus(dir)?,
        None => gen_cipher_corpus(
            &s.cipher,
            &s.sizes,
            &mut nmtlab::seeded_rng(s.experiment.seed),
        )?,
    };
    let report = run_experiment(&s.experiment, &corpus)?;
    let r = render_report(&report);
    print!("{}", r.text);
    if let Some(out) = &cmd.out {
        fs::create_dir_all(out)?;
        fs::write(
            out.join("report.json"),
            serde_json::to_string_pretty(&report)? + "\n",
        )?;
        fs::write(out.join("report.txt"), &r.text)?;
        fs::write(out.join("report.tsv"), &r.tsv)?;
        fs::write(out.join("settings.txt"), s.to_text())?;
    }
    Ok(())
}

fn inspect(cmd: InspectExample) -> Result<()> {
    let objective = ObjectiveRegistry::default().get(&cmd.objective)?;
    let noise = NoiseSpec {
        noise_density: cmd.noise_density,
        mean_span_length: cmd.mean_span_length,
    };
    let parallel = objective.source() == nmtlab::objectives::TaskSource::Parallel;
    let (tasks, langs): (Vec<RawTask>, Vec<String>) = match (&cmd.data, &cmd.text) {
        (Some(dir), _) => {
            let corpus = read_corpus(dir)?;
            let tasks = if parallel {
                corpus
                    .parallel
                    .into_iter()
                    .take(cmd.count)
                    .map(RawTask::Parallel)
                    .collect()
            } else {
                corpus
                    .mono
                    .into_iter()
                    .take(cmd.count)
                    .map(RawTask::Mono)
                    .collect()
            };
            (tasks, corpus.spec.languages())
        }
        (None, Some(text)) => {
            let task = if parallel {
                let tgt = cmd
                    .target_text
                    .clone()
                    .context("parallel objectives need --target-text")?;
                RawTask::Parallel(ParallelPair::new(&cmd.lang, &cmd.target_lang, text, tgt))
            } else {
                RawTask::Mono(Document::new(&cmd.lang, text))
            };
            (
                vec![task; cmd.count],
                vec![cmd.lang.clone(), cmd.target_lang.clone()],
            )
        }
        (None, None) => bail!("give --data or --text"),
    };
    let vocab = Vocab::new(&langs, cmd.sentinel_count)?;
    let mut rng = nmtlab::seeded_rng(cmd.seed);
    for (i, task) in tasks.iter().enumerate() {
        if i > 0 {
            println!();
        }
        match objective.build(task, &vocab, &noise, &mut rng)? {
            Some(ex) => print!("{}", render_example(&ex, &vocab)),
            None => println!("record {i} is too short for {}", cmd.objective),
        }
    }
    Ok(())
}

fn show_report(cmd: ReportCmd) -> Result<()> {
    let text = fs::read_to_string(&cmd.input)
        .with_context(|| format!("reading {}", cmd.input.display()))?;
    let report: Report = serde_json::from_str(&text)?;
    let r = render_report(&report);
    print!("{}", if cmd.tsv { r.tsv } else { r.text });
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::BuildData(c) => build_data(c),
        Command::Pretrain(c) => run_pretrain(c),
        Command::Finetune(c) => run_finetune(c),
        Command::Predict(c) => run_predict(c),
        Command::Evaluate(c) => run_evaluate(c),
        Command::Experiment(c) => run_experiment_cmd(c),
        Command::InspectExample(c) => inspect(c),
        Command::Report(c) => show_report(c),
    }
}
