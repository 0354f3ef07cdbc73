use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cachelm::checkpoint::Checkpoint;
use cachelm::config::{BackboneKind, RunConfig, Switch};
use cachelm::corpus::{join_with_eos, read_sentences, Vocabulary, EOS, UNK};
use cachelm::evaluation::{
    bucket_analysis, cache_grid, collect_cache_inputs, evaluate_stream, neural_cache_perplexity, parse_nbest,
    parse_references, rescore, word_error_rate, CacheParams, RescoreOptions,
};
use cachelm::selftest;
use cachelm::training::train;
use cachelm::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cachelm", version, about = "Word-level language models with an implicit cache pointer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the best-dev checkpoint.
    Train(Box<TrainArgs>),
    /// Perplexity of a checkpoint on a text file.
    Eval(EvalArgs),
    /// Per-frequency-bucket cross-entropy of two checkpoints.
    Analyze(AnalyzeArgs),
    /// Re-rank N-best lists.
    Rescore(RescoreArgs),
    /// Gradient and invariant checks.
    Selftest {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; receives best.ckpt and vocab.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, conflicts_with = "top_k")]
    min_count: Option<u64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, value_parser = parse_backbone)]
    backbone: Option<BackboneKind>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Enable or disable the pointer slots.
    #[arg(long, value_parser = parse_switch)]
    pointer: Option<Switch>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, value_parser = parse_switch)]
    memory_augmentation: Option<Switch>,
    /// Comma-separated words whose history slots are masked; `eos` and `unk`
    /// name the special tokens.
    #[arg(long, value_delimiter = ',')]
    pointer_exclude: Option<Vec<String>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_streams: Option<usize>,
    #[arg(long)]
    chunk_len: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    precision: Option<u32>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    text: PathBuf,
    /// Vocabulary file that the text is expected to use.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    chunk_len: Option<usize>,
    /// Mix a test-time neural cache into a baseline model.
    #[arg(long)]
    neural_cache: bool,
    #[arg(long, default_value_t = CacheParams::default().theta)]
    theta: f64,
    #[arg(long, default_value_t = CacheParams::default().lambda)]
    lam: f64,
    #[arg(long, default_value_t = CacheParams::default().cache_len)]
    cache_len: usize,
    /// Sweep theta and lambda and report the best pair.
    #[arg(long, requires = "neural_cache")]
    cache_grid: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    ckpt_a: PathBuf,
    #[arg(long)]
    ckpt_b: PathBuf,
    #[arg(long)]
    text: PathBuf,
    #[arg(long, default_value_t = 10)]
    buckets: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    chunk_len: Option<usize>,
}

#[derive(Args)]
struct RescoreArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    nbest: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    lm_weight: f64,
    #[arg(long, default_value_t = 0.0)]
    wip: f64,
    #[arg(long)]
    state_carry: bool,
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
}

fn parse_switch(s: &str) -> std::result::Result<Switch, String> {
    match s {
        "on" => Ok(Switch::On),
        "off" => Ok(Switch::Off),
        _ => Err(format!("expected on or off, got '{s}'")),
    }
}

fn parse_backbone(s: &str) -> std::result::Result<BackboneKind, String> {
    match s {
        "lstm" => Ok(BackboneKind::Lstm),
        "transformer" => Ok(BackboneKind::Transformer),
        _ => Err(format!("expected lstm or transformer, got '{s}'")),
    }
}

fn special_name(w: &str) -> String {
    match w {
        "eos" => EOS.to_string(),
        "unk" => UNK.to_string(),
        other => other.to_string(),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// File, then `CACHELM_SEED`, then flags.
fn effective_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut rc = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str::<RunConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Ok(s) = std::env::var("CACHELM_SEED") {
        rc.seed = s
            .parse()
            .map_err(|_| Error::Config(format!("CACHELM_SEED '{s}' is not an unsigned integer")))?;
    }
    set(&mut rc.seed, args.seed);
    if args.train.is_some() {
        rc.data.train = args.train.clone();
    }
    if args.dev.is_some() {
        rc.data.dev = args.dev.clone();
    }
    if args.test.is_some() {
        rc.data.test = args.test.clone();
    }
    if args.min_count.is_some() {
        rc.data.min_count = args.min_count;
        rc.data.top_k = None;
    }
    if args.top_k.is_some() {
        rc.data.top_k = args.top_k;
        rc.data.min_count = None;
    }
    set(&mut rc.model.backbone, args.backbone);
    set(&mut rc.model.layers, args.layers);
    set(&mut rc.model.hidden, args.hidden);
    set(&mut rc.model.heads, args.heads);
    set(&mut rc.model.dropout, args.dropout);
    if let Some(p) = args.pointer {
        rc.pointer.enabled = p.is_on();
    }
    if args.window.is_some() {
        rc.pointer.window = args.window;
    }
    set(&mut rc.pointer.memory_augmentation, args.memory_augmentation);
    if let Some(ex) = &args.pointer_exclude {
        rc.pointer.exclude = ex.iter().map(|w| special_name(w)).collect();
    }
    set(&mut rc.train.epochs, args.epochs);
    set(&mut rc.train.batch_streams, args.batch_streams);
    set(&mut rc.train.chunk_len, args.chunk_len);
    if args.lr0.is_some() {
        rc.train.lr0 = args.lr0;
    }
    set(&mut rc.train.lr_decay, args.lr_decay);
    set(&mut rc.train.clip_norm, args.clip_norm);
    set(&mut rc.train.precision, args.precision);
    Ok(rc)
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("no {what} corpus given (config [data] or --{what})")))
}

fn read_tokens(path: &Path) -> Result<Vec<String>> {
    Ok(join_with_eos(&read_sentences(path)?))
}

fn run_train(args: TrainArgs) -> Result<()> {
    let rc = effective_config(&args)?;
    rc.model_config()?;
    rc.train_config()?;
    eprintln!("# effective config\n{}", toml::to_string(&rc).map_err(|e| Error::Config(e.to_string()))?);
    let train_tokens = read_tokens(required(&rc.data.train, "train")?)?;
    let dev_tokens = read_tokens(required(&rc.data.dev, "dev")?)?;
    let vocab = Vocabulary::build(&train_tokens, rc.data.policy()?)?;
    let train_ids = vocab.encode(&train_tokens);
    let dev_ids = vocab.encode(&dev_tokens);
    eprintln!("vocab={} hash={} train_tokens={}", vocab.len(), vocab.hash(), train_ids.len());

    std::fs::create_dir_all(&args.out)?;
    let outcome = match train(&rc, &vocab, &train_ids, &dev_ids, |r| eprintln!("{r}")) {
        Ok(o) => o,
        Err(Error::Diverged { epoch, last_good: Some(ckpt) }) => {
            let path = args.out.join("last_good.ckpt");
            ckpt.save(&path)?;
            eprintln!("training diverged in epoch {epoch}; saved {}", path.display());
            return Err(Error::Diverged { epoch, last_good: Some(ckpt) });
        }
        Err(e) => return Err(e),
    };
    let ckpt_path = args.out.join("best.ckpt");
    outcome.best.save(&ckpt_path)?;
    std::fs::write(args.out.join("vocab.txt"), vocab.to_text())?;

    let model = outcome.best.model()?;
    let mut status = format!(
        "ckpt={} epoch={} dev_ppl={} params={}",
        ckpt_path.display(),
        outcome.best.epoch,
        outcome.best.dev_ppl.map_or("nan".into(), |p| p.to_string()),
        model.num_params()
    );
    if let Some(test) = &rc.data.test {
        let ids = vocab.encode(&read_tokens(test)?);
        let ppl = evaluate_stream(&model, &ids, rc.train.chunk_len)?.perplexity();
        status.push_str(&format!(" test_ppl={ppl}"));
    }
    println!("{status}");
    Ok(())
}

fn check_vocab(ckpt: &Checkpoint, vocab_path: &Path) -> Result<()> {
    let given = Vocabulary::from_text(&std::fs::read_to_string(vocab_path)?)?;
    if given.hash() != ckpt.vocab_hash() {
        return Err(Error::Compatibility {
            expected: ckpt.vocab_hash(),
            found: given.hash(),
        });
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    if let Some(v) = &args.vocab {
        check_vocab(&ckpt, v)?;
    }
    eprintln!("# checkpoint config\n{}", toml::to_string(&ckpt.config).map_err(|e| Error::Config(e.to_string()))?);
    let model = ckpt.model()?;
    let chunk_len = args.chunk_len.unwrap_or(ckpt.config.train.chunk_len);
    let ids = ckpt.vocab.encode(&read_tokens(&args.text)?);
    if !args.neural_cache {
        let r = evaluate_stream(&model, &ids, chunk_len)?;
        println!("tokens={} ppl={}", r.nll.len(), r.perplexity());
        return Ok(());
    }
    let inputs = collect_cache_inputs(&model, &ids, chunk_len)?;
    let base = (-inputs.p_lm.iter().map(|p| p.ln()).sum::<f64>() / inputs.p_lm.len() as f64).exp();
    eprintln!("baseline_ppl={base}");
    let params = if args.cache_grid {
        let thetas = [0.0, 0.1, 0.2, 0.3, 0.5, 1.0];
        let lambdas = [0.05, 0.1, 0.15, 0.2, 0.3];
        let grid = cache_grid(&inputs, &thetas, &lambdas, args.cache_len)?;
        for (p, ppl) in &grid {
            eprintln!("theta={} lam={} ppl={ppl}", p.theta, p.lambda);
        }
        grid.iter()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(p, _)| *p)
            .expect("grid is non-empty")
    } else {
        CacheParams { theta: args.theta, lambda: args.lam, cache_len: args.cache_len }
    };
    let ppl = neural_cache_perplexity(&inputs, params)?;
    println!(
        "tokens={} theta={} lam={} cache_len={} ppl={ppl}",
        inputs.targets.len(),
        params.theta,
        params.lambda,
        params.cache_len
    );
    Ok(())
}

fn run_analyze(args: AnalyzeArgs) -> Result<()> {
    let a = Checkpoint::load(&args.ckpt_a)?;
    let b = Checkpoint::load(&args.ckpt_b)?;
    if a.vocab_hash() != b.vocab_hash() {
        return Err(Error::Compatibility { expected: a.vocab_hash(), found: b.vocab_hash() });
    }
    let chunk_len = args.chunk_len.unwrap_or(a.config.train.chunk_len);
    let ids = a.vocab.encode(&read_tokens(&args.text)?);
    let ra = evaluate_stream(&a.model()?, &ids, chunk_len)?;
    let rb = evaluate_stream(&b.model()?, &ids, chunk_len)?;
    let report = bucket_analysis(&a.vocab, &ra, &rb, args.buckets)?;
    std::fs::write(&args.out, report.to_csv())?;
    println!(
        "buckets={} tokens={} ppl_a={} ppl_b={} out={}",
        args.buckets,
        report.total_tokens,
        ra.perplexity(),
        rb.perplexity(),
        args.out.display()
    );
    Ok(())
}

fn run_rescore(args: RescoreArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let model = ckpt.model()?;
    let lists = parse_nbest(&std::fs::read_to_string(&args.nbest)?)?;
    let opts = RescoreOptions { lm_weight: args.lm_weight, wip: args.wip, state_carry: args.state_carry };
    let choices = rescore(&model, &ckpt.vocab, &lists, opts)?;
    for c in &choices {
        println!("{}\t{}\t{}", c.utt, c.index, c.words.join(" "));
    }
    match &args.reference {
        Some(r) => {
            let refs = parse_references(&std::fs::read_to_string(r)?);
            println!("WER={}", word_error_rate(&choices, &refs)?);
        }
        None => println!("utterances={}", choices.len()),
    }
    Ok(())
}

fn run_selftest(seed: u64) -> Result<bool> {
    let outcomes = selftest::run_all(seed);
    for o in &outcomes {
        println!("{o}");
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("checks={} failed={failed}", outcomes.len());
    Ok(failed == 0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => run_train(*a).map(|_| true),
        Command::Eval(a) => run_eval(a).map(|_| true),
        Command::Analyze(a) => run_analyze(a).map(|_| true),
        Command::Rescore(a) => run_rescore(a).map(|_| true),
        Command::Selftest { seed } => run_selftest(seed),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
