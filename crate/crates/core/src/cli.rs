//! Command-line front end. The binary is a thin wrapper around [`run`].

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::adversary::Adversary;
use crate::config::{Dataset, RunConfig};
use crate::data::{read_lines, tokenize, write_lines, SentencePair, Vocabulary};
use crate::decode_eval::{case_report, corpus_bleu_with, decode_all, unk_replace, write_case_report, MAX_ORDER};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::gradcheck::{self, GradCheckOptions, Scope};
use crate::trainer::{
    adversarial_train, dev_bleu, pretrain_discriminator, pretrain_mle, IterationRecord, TrainObserver, TrainState,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

const CONFIG_FILE: &str = "config.toml";
const METRICS_FILE: &str = "metrics.log";
const GENERATOR_FILE: &str = "generator.ckpt";
const ADVERSARY_FILE: &str = "adversary.ckpt";
const STATE_FILE: &str = "state.toml";
const SRC_VOCAB_FILE: &str = "src.vocab";
const TGT_VOCAB_FILE: &str = "tgt.vocab";

#[derive(Parser, Debug)]
#[command(name = "advnmt", version, about = "Adversarial training for attention-based translation models")]
pub struct Cli {
    /// Worker threads for sentence-level parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Built-in preset, e.g. `reverse-small` (see `advnmt presets`).
    #[arg(long)]
    preset: Option<String>,
    /// TOML config file layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (beats the config and $ADVNMT_OUT_DIR).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        RunConfig::resolve(self.preset.as_deref(), self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Lists the built-in presets.
    Presets,
    /// Writes the synthetic train/dev sets of a config as text files.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// MLE warm start of the generator.
    PretrainMle {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pretrains the adversary against a frozen generator.
    PretrainD {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        generator: PathBuf,
    },
    /// Joint adversarial training.
    TrainAdv {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        adversary: Option<PathBuf>,
        /// Continue from the latest epoch checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Translates a file, one sentence per line.
    Translate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 4)]
        beam: usize,
        #[arg(long, default_value_t = crate::data::DEFAULT_MAX_LEN)]
        max_len: usize,
        /// Replace UNK outputs with the most attended source word.
        #[arg(long)]
        unk_replace: bool,
    },
    /// Corpus BLEU of a hypothesis file against a reference file.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Add-one smoothing for orders above 1 (diagnostics only).
        #[arg(long)]
        smooth: bool,
    },
    /// Finite-difference gradient checks on fresh tiny models.
    GradCheck {
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the analytic gradients (the run must fail).
        #[arg(long)]
        inject_fault: bool,
    },
    /// Per-sentence table of beam output, adversary score and BLEU.
    CaseReport {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        adversary: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 4)]
        beam: usize,
        #[arg(long, default_value_t = crate::data::DEFAULT_MAX_LEN)]
        max_len: usize,
    },
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long)]
    generator: PathBuf,
    /// Defaults to `src.vocab` next to the generator checkpoint.
    #[arg(long)]
    src_vocab: Option<PathBuf>,
    /// Defaults to `tgt.vocab` next to the generator checkpoint.
    #[arg(long)]
    tgt_vocab: Option<PathBuf>,
}

impl ModelArgs {
    fn load(&self) -> Result<(Generator, Vocabulary, Vocabulary)> {
        let g = Generator::load(&self.generator)?;
        let dir = self.generator.parent().unwrap_or(Path::new("."));
        let sv = Vocabulary::load(&self.src_vocab.clone().unwrap_or_else(|| dir.join(SRC_VOCAB_FILE)))?;
        let tv = Vocabulary::load(&self.tgt_vocab.clone().unwrap_or_else(|| dir.join(TGT_VOCAB_FILE)))?;
        check_dim("source vocabulary size", g.config().src_vocab, sv.len())?;
        check_dim("target vocabulary size", g.config().tgt_vocab, tv.len())?;
        Ok((g, sv, tv))
    }
}

/// Failure class of a command: bad input from the user or a failed run.
enum Failure {
    Usage(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e)
}

type Outcome = std::result::Result<i32, Failure>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Messages go to stdout/stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return EXIT_FAILURE;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(code) => code,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn dispatch(command: Command) -> Outcome {
    match command {
        Command::Presets => {
            for name in crate::config::preset_names() {
                println!("{name}");
            }
            Ok(EXIT_OK)
        }
        Command::GenData { cfg } => cmd_gen_data(&cfg),
        Command::PretrainMle { cfg } => cmd_pretrain_mle(&cfg),
        Command::PretrainD { cfg, generator } => cmd_pretrain_d(&cfg, &generator),
        Command::TrainAdv {
            cfg,
            generator,
            adversary,
            resume,
        } => cmd_train_adv(&cfg, generator.as_deref(), adversary.as_deref(), resume),
        Command::Translate {
            model,
            input,
            output,
            beam,
            max_len,
            unk_replace,
        } => cmd_translate(&model, &input, &output, beam, max_len, unk_replace),
        Command::Evaluate { hyp, reference, smooth } => cmd_evaluate(&hyp, &reference, smooth),
        Command::GradCheck {
            scope,
            seed,
            inject_fault,
        } => cmd_grad_check(&scope, seed, inject_fault),
        Command::CaseReport {
            model,
            adversary,
            source,
            reference,
            output,
            beam,
            max_len,
        } => cmd_case_report(&model, &adversary, &source, &reference, &output, beam, max_len),
    }
}

fn check_dim(what: &str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimMismatch {
            what: what.into(),
            expected,
            found,
        })
    }
}

fn check_positive(what: &str, v: usize) -> std::result::Result<(), Failure> {
    if v == 0 {
        Err(usage(Error::InvalidArgument(format!("{what} must be at least 1"))))
    } else {
        Ok(())
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Resolved config, output directory (created, with the config saved in it)
/// and data.
fn prepare(args: &ConfigArgs, command: &str) -> std::result::Result<(RunConfig, PathBuf, Dataset), Failure> {
    let cfg = args.resolve().map_err(usage)?;
    let dir = cfg.output_dir(args.out_dir.as_deref(), command);
    create_dir(&dir)?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    let data = cfg.load_data()?;
    data.src_vocab.save(&dir.join(SRC_VOCAB_FILE))?;
    data.tgt_vocab.save(&dir.join(TGT_VOCAB_FILE))?;
    Ok((cfg, dir, data))
}

fn cmd_gen_data(args: &ConfigArgs) -> Outcome {
    let cfg = args.resolve().map_err(usage)?;
    if cfg.task.is_none() {
        return Err(usage(Error::Config("gen-data needs a synthetic `task`".into())));
    }
    let (_, dir, data) = prepare(args, "gen-data")?;
    let render = |pairs: &[SentencePair], name: &str| -> Result<()> {
        let src: Vec<String> = pairs.iter().map(|p| data.src_vocab.decode(&p.source).join(" ")).collect();
        let tgt: Vec<String> = pairs.iter().map(|p| data.tgt_vocab.decode(&p.target).join(" ")).collect();
        write_lines(&dir.join(format!("{name}.src")), &src)?;
        write_lines(&dir.join(format!("{name}.tgt")), &tgt)
    };
    render(&data.train, "train")?;
    render(&data.dev, "dev")?;
    println!(
        "wrote {} train and {} dev pairs ({}) to {}",
        data.train.len(),
        data.dev.len(),
        cfg.task.map(|t| t.to_string()).unwrap_or_default(),
        dir.display()
    );
    Ok(EXIT_OK)
}

fn cmd_pretrain_mle(args: &ConfigArgs) -> Outcome {
    let (cfg, dir, data) = prepare(args, "pretrain-mle")?;
    let gcfg = cfg.generator_config_for(data.src_vocab.len(), data.tgt_vocab.len());
    let mut g = Generator::new(gcfg, cfg.seed).map_err(usage)?;
    let log_path = dir.join(METRICS_FILE);
    let mut log = BufWriter::new(fs::File::create(&log_path).map_err(io_err(&log_path))?);
    let mut write_err = None;
    let result = pretrain_mle(&mut g, &data.train, &data.dev, &cfg.mle_training(), |e| {
        log::info!("mle {}", e.to_line());
        if let Err(err) = writeln!(log, "{}", e.to_line()) {
            write_err.get_or_insert(err);
        }
    });
    log.flush().map_err(io_err(&log_path))?;
    if let Some(e) = write_err {
        return Err(io_err(&log_path)(e).into());
    }
    let ckpt = dir.join(GENERATOR_FILE);
    // on divergence the generator has been rolled back; keep that state
    g.save(&ckpt)?;
    let report = result?;
    match report.epochs.last() {
        Some(last) if !data.dev.is_empty() => println!(
            "final dev_loss={:.6} dev_ppl={:.4} epochs={}",
            last.dev_loss,
            last.dev_perplexity(),
            report.epochs.len()
        ),
        _ => println!("epochs={}", report.epochs.len()),
    }
    println!("generator={}", ckpt.display());
    Ok(EXIT_OK)
}

fn check_generator_fits(cfg: &RunConfig, data: &Dataset, g: &Generator) -> Result<()> {
    check_dim("embedding dim (config vs generator checkpoint)", cfg.emb_dim, g.config().emb_dim)?;
    check_dim("hidden dim (config vs generator checkpoint)", cfg.hidden_dim, g.config().hidden_dim)?;
    check_dim("source vocabulary size (data vs generator checkpoint)", data.src_vocab.len(), g.config().src_vocab)?;
    check_dim("target vocabulary size (data vs generator checkpoint)", data.tgt_vocab.len(), g.config().tgt_vocab)
}

fn cmd_pretrain_d(args: &ConfigArgs, generator: &Path) -> Outcome {
    let (cfg, dir, data) = prepare(args, "pretrain-d")?;
    let g = Generator::load(generator)?;
    check_generator_fits(&cfg, &data, &g)?;
    if data.dev.is_empty() {
        return Err(usage(Error::Config("adversary pretraining needs a dev set for held-out accuracy".into())));
    }
    let mut d = Adversary::new(cfg.adversary_config(g.config()), &g, cfg.seed).map_err(usage)?;
    let log_path = dir.join(METRICS_FILE);
    let mut lines = Vec::new();
    let report = pretrain_discriminator(&mut d, &g, &data.train, &data.dev, &cfg.training(), |e, loss, acc| {
        let line = format!("epoch={e} loss={loss:.6} heldout_accuracy={acc:.4}");
        log::info!("adversary {line}");
        lines.push(line);
    })?;
    write_lines(&log_path, &lines)?;
    let ckpt = dir.join(ADVERSARY_FILE);
    d.save(&ckpt)?;
    println!(
        "heldout_accuracy={:.4} initial_accuracy={:.4} coinciding={:.4}",
        report.final_accuracy(),
        report.initial_accuracy,
        report.coinciding
    );
    println!("adversary={}", ckpt.display());
    Ok(EXIT_OK)
}

fn epoch_dir(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch-{epoch:03}"))
}

/// Latest `epoch-NNN` directory holding a state file.
fn latest_checkpoint(dir: &Path) -> Option<(PathBuf, TrainState)> {
    let mut best: Option<(PathBuf, TrainState)> = None;
    for entry in fs::read_dir(dir).ok()?.flatten() {
        let path = entry.path();
        let Some(text) = fs::read_to_string(path.join(STATE_FILE)).ok() else {
            continue;
        };
        let Ok(state) = toml::from_str::<TrainState>(&text) else {
            log::warn!("ignoring unreadable {}", path.join(STATE_FILE).display());
            continue;
        };
        if best.as_ref().map_or(true, |(_, s)| state.epoch > s.epoch) {
            best = Some((path, state));
        }
    }
    best
}

struct RunObserver {
    log: BufWriter<fs::File>,
    log_path: PathBuf,
    dir: PathBuf,
    every: usize,
    last_epoch: usize,
}

impl TrainObserver for RunObserver {
    fn iteration(&mut self, record: &IterationRecord) -> Result<()> {
        writeln!(self.log, "{}", record.to_line()).map_err(io_err(&self.log_path))?;
        if record.dev_bleu.is_some() {
            log::info!("{}", record.to_line());
        }
        Ok(())
    }

    fn epoch_end(&mut self, g: &Generator, d: &Adversary, state: &TrainState) -> Result<()> {
        self.log.flush().map_err(io_err(&self.log_path))?;
        if state.epoch % self.every != 0 && state.epoch != self.last_epoch {
            return Ok(());
        }
        let dir = epoch_dir(&self.dir, state.epoch);
        create_dir(&dir)?;
        g.save(&dir.join(GENERATOR_FILE))?;
        d.save(&dir.join(ADVERSARY_FILE))?;
        // state last: its presence marks a complete checkpoint
        let path = dir.join(STATE_FILE);
        let text = toml::to_string(state).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(&path, text).map_err(io_err(&path))
    }
}

fn cmd_train_adv(args: &ConfigArgs, generator: Option<&Path>, adversary: Option<&Path>, resume: bool) -> Outcome {
    let (cfg, dir, data) = prepare(args, "train-adv")?;
    let resumed = if resume { latest_checkpoint(&dir) } else { None };
    let (mut g, mut d, state) = match &resumed {
        Some((ckpt, state)) => {
            log::info!("resuming from {} (next epoch {})", ckpt.display(), state.epoch);
            (
                Generator::load(&ckpt.join(GENERATOR_FILE))?,
                Adversary::load(&ckpt.join(ADVERSARY_FILE))?,
                Some(*state),
            )
        }
        None => {
            let missing = |what: &str| usage(Error::InvalidArgument(format!("--{what} is required unless resuming")));
            let g = Generator::load(generator.ok_or_else(|| missing("generator"))?)?;
            let d = Adversary::load(adversary.ok_or_else(|| missing("adversary"))?)?;
            (g, d, None)
        }
    };
    check_generator_fits(&cfg, &data, &g)?;
    check_dim("adversary embedding dim", g.config().emb_dim, d.config().emb_dim)?;
    check_dim("adversary source vocabulary size", g.config().src_vocab, d.config().src_vocab)?;
    check_dim("adversary target vocabulary size", g.config().tgt_vocab, d.config().tgt_vocab)?;

    let training = cfg.training();
    let log_path = dir.join(METRICS_FILE);
    // keep only the lines of iterations covered by the checkpoint
    let kept = match state {
        Some(s) if log_path.exists() => read_lines(&log_path)?.into_iter().take(s.iteration).collect(),
        _ => Vec::new(),
    };
    write_lines(&log_path, &kept)?;
    let file = fs::OpenOptions::new().append(true).open(&log_path).map_err(io_err(&log_path))?;
    let start_bleu = if data.dev.is_empty() {
        None
    } else {
        Some(dev_bleu(&g, &data.dev, training.eval_beam, training.max_len)?)
    };
    let mut observer = RunObserver {
        log: BufWriter::new(file),
        log_path: log_path.clone(),
        dir: dir.clone(),
        every: cfg.checkpoint_every,
        last_epoch: training.epochs,
    };
    let report = adversarial_train(&mut g, &mut d, &data.train, &data.dev, &training, state, &mut observer)?;
    observer.log.flush().map_err(io_err(&log_path))?;
    g.save(&dir.join(GENERATOR_FILE))?;
    d.save(&dir.join(ADVERSARY_FILE))?;
    if let Some(b) = start_bleu {
        let last = report.dev_bleu.last().copied().unwrap_or(b);
        println!("start_dev_bleu={b:.2} final_dev_bleu={last:.2}");
    }
    println!("iterations={} epochs={}", report.state.iteration, report.state.epoch);
    Ok(EXIT_OK)
}

fn cmd_translate(model: &ModelArgs, input: &Path, output: &Path, beam: usize, max_len: usize, unk: bool) -> Outcome {
    check_positive("--beam", beam)?;
    check_positive("--max-len", max_len)?;
    let (g, sv, tv) = model.load()?;
    let lines = read_lines(input)?;
    let sources: Vec<Vec<String>> = lines.iter().map(|l| tokenize(l)).collect();
    let ids: Vec<Vec<u32>> = sources.iter().map(|s| sv.encode(s)).collect();
    let nonempty: Vec<&[u32]> = ids.iter().filter(|s| !s.is_empty()).map(|s| s.as_slice()).collect();
    let mut hyps = decode_all(&g, &nonempty, beam, max_len)?.into_iter();
    let unk_str = tv.decode(&[crate::data::UNK]).remove(0);
    let mut out = Vec::with_capacity(lines.len());
    for (src, src_ids) in sources.iter().zip(&ids) {
        if src_ids.is_empty() {
            out.push(String::new());
            continue;
        }
        let h = hyps.next().expect("one hypothesis per non-empty line");
        let mut words = tv.decode_output(&h.tokens);
        if unk {
            words = unk_replace(&words, &h.attention, src, &unk_str)?;
        }
        out.push(words.join(" "));
    }
    write_lines(output, &out)?;
    Ok(EXIT_OK)
}

fn cmd_evaluate(hyp: &Path, reference: &Path, smooth: bool) -> Outcome {
    let h: Vec<Vec<String>> = read_lines(hyp)?.iter().map(|l| tokenize(l)).collect();
    let r: Vec<Vec<String>> = read_lines(reference)?.iter().map(|l| tokenize(l)).collect();
    let report = corpus_bleu_with(&h, &r, MAX_ORDER, smooth).map_err(|e| match e {
        Error::LineCountMismatch { left, right, .. } => Error::LineCountMismatch {
            left_name: hyp.display().to_string(),
            left,
            right_name: reference.display().to_string(),
            right,
        },
        other => other,
    })?;
    println!("{}", report.to_line());
    Ok(EXIT_OK)
}

fn cmd_grad_check(scope: &str, seed: u64, inject_fault: bool) -> Outcome {
    let scope: Scope = scope.parse().map_err(usage)?;
    let report = gradcheck::run(scope, GradCheckOptions { seed, inject_fault })?;
    for line in report.lines() {
        println!("{line}");
    }
    let passed = report.passed();
    println!(
        "grad-check scope={scope} seed={seed} max_rel_err={:.3e} tolerance={:.0e} {}",
        report.max_rel_err(Scope::All),
        gradcheck::TOLERANCE,
        if passed { "PASS" } else { "FAIL" }
    );
    Ok(if passed { EXIT_OK } else { EXIT_FAILURE })
}

fn cmd_case_report(
    model: &ModelArgs,
    adversary: &Path,
    source: &Path,
    reference: &Path,
    output: &Path,
    beam: usize,
    max_len: usize,
) -> Outcome {
    check_positive("--beam", beam)?;
    check_positive("--max-len", max_len)?;
    let (g, sv, tv) = model.load()?;
    let d = Adversary::load(adversary)?;
    check_dim("adversary embedding dim", g.config().emb_dim, d.config().emb_dim)?;
    let pairs: Vec<SentencePair> = crate::data::read_bitext(source, reference)?
        .into_iter()
        .filter(|(s, _)| !s.is_empty())
        .map(|(s, t)| SentencePair::new(sv.encode(&s), tv.encode(&t)))
        .collect();
    let rows = case_report(&g, &d, &pairs, beam, max_len)?;
    let file = fs::File::create(output).map_err(io_err(output))?;
    let mut w = BufWriter::new(file);
    write_case_report(&mut w, &rows, &sv, &tv)?;
    w.flush().map_err(io_err(output))?;
    Ok(EXIT_OK)
}
