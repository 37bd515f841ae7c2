//! `ith` subcommands. Every subcommand takes `--config` (TOML), `--seed` and
//! `--out`; see `docs/formats.md` for what lands in the output directory.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use super::ablation::{run_ablation, worker_count};
use super::data::{gen_benchmark, read_examples, write_examples, BenchSplits, Task};
use super::evaluate;
use super::pipeline::{imagine_split, prepare, prepare_from, train_and_evaluate, BenchConfig, Frozen, Prepared};
use crate::audio::{write_wav, Lexicon};
use crate::encoder::{write_loss_curve, IthModel, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::spandet::{evaluate_detector, DetectorConfig, DetectorModel};
use crate::tensor::{read_checkpoint, write_checkpoint};
use crate::text::{Vocab, CLS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ith", version, about = "Span-level audio imagination for text models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Pitch,
    Recognition,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate benchmark splits and the lexicon.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        #[arg(long)]
        n_train: Option<usize>,
    },
    /// Train the span detector.
    TrainDetector {
        #[command(flatten)]
        common: Common,
        /// Directory written by gen-data; generated afresh when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the full model end to end and evaluate it.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a run directory written by train.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Variant grid plus rejection sweeps over consecutive seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Per-token mean fusion gate for one sentence.
    TraceGate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Whitespace-separated tokens.
        #[arg(long)]
        text: String,
    },
    /// Per-span WAV files and trial scores for one sentence.
    TraceAudio {
        #[command(flatten)]
        common: Common,
        /// Directory written by train-detector or train.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: String,
    },
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn load_config(common: &Common) -> Result<BenchConfig> {
    let mut cfg = match &common.config {
        Some(p) => BenchConfig::from_toml(&fs::read_to_string(p).map_err(|e| with_path(e, p))?)?,
        None => BenchConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn with_path(e: std::io::Error, p: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display())))
}

fn create(p: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(p).map_err(|e| with_path(e, p))?))
}

fn open(p: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(p).map_err(|e| with_path(e, p))?))
}

fn out_dir(common: &Common) -> Result<&Path> {
    fs::create_dir_all(&common.out).map_err(|e| with_path(e, &common.out))?;
    Ok(&common.out)
}

fn write_data(dir: &Path, splits: &BenchSplits, lexicon: &Lexicon) -> Result<()> {
    for (name, split) in splits.named() {
        write_examples(create(&dir.join(format!("{name}.jsonl")))?, split)?;
    }
    lexicon.write_jsonl(create(&dir.join("lexicon.jsonl"))?)
}

fn read_data(dir: &Path) -> Result<(BenchSplits, Lexicon)> {
    let split = |n: &str| read_examples(open(&dir.join(format!("{n}.jsonl")))?);
    let splits = BenchSplits {
        train: split("train")?,
        dev: split("dev")?,
        test: split("test")?,
        unseen: split("unseen")?,
    };
    Ok((splits, Lexicon::read_jsonl(open(&dir.join("lexicon.jsonl"))?)?))
}

fn prepare_with(cfg: &BenchConfig, data: Option<&PathBuf>) -> Result<Prepared> {
    match data {
        None => prepare(cfg),
        Some(dir) => {
            let (splits, lexicon) = read_data(dir)?;
            if let Some(e) = splits.train.first() {
                if e.task != cfg.task {
                    return Err(Error::Config(format!(
                        "data task {:?} differs from config task {:?}",
                        e.task, cfg.task
                    )));
                }
            }
            prepare_from(cfg, splits, lexicon)
        }
    }
}

fn write_detector(dir: &Path, cfg: &BenchConfig, prep: &Prepared) -> Result<()> {
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    write_data(dir, &prep.splits, &prep.lexicon)?;
    prep.vocab.write(create(&dir.join("vocab.txt"))?)?;
    write_checkpoint(&dir.join("detector.ckpt"), &prep.detector.checkpoint())?;
    serde_json::to_writer_pretty(create(&dir.join("detector_config.json"))?, prep.detector.config())?;
    let mut w = create(&dir.join("detector_curve.csv"))?;
    writeln!(w, "epoch,loss")?;
    for (i, l) in prep.detector_curve.iter().enumerate() {
        writeln!(w, "{},{l:.6}", i + 1)?;
    }
    writeln!(
        create(&dir.join("detector_metrics.csv"))?,
        "split,token_f1\ndev,{:.6}",
        prep.detector_dev_f1
    )?;
    Ok(())
}

/// Everything up to and including the frozen detector, read back from disk.
fn load_prepared(dir: &Path, common: &Common) -> Result<Prepared> {
    let mut cfg = match &common.config {
        Some(_) => load_config(common)?,
        None => BenchConfig::from_toml(&fs::read_to_string(dir.join("config.toml")).map_err(|e| with_path(e, dir))?)?,
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let (splits, lexicon) = read_data(dir)?;
    let vocab = Vocab::read(open(&dir.join("vocab.txt"))?)?;
    let det_cfg: DetectorConfig = serde_json::from_reader(open(&dir.join("detector_config.json"))?)?;
    let ckpt = read_checkpoint(&dir.join("detector.ckpt")).map_err(|e| match e {
        Error::Io(io) => with_path(io, &dir.join("detector.ckpt")),
        other => other,
    })?;
    let detector = DetectorModel::from_checkpoint(vocab.len(), det_cfg, &ckpt)?;
    let detector_dev_f1 = evaluate_detector(&detector, &super::pipeline::labeled(&splits.dev, &vocab)?)?;
    Ok(Prepared {
        cfg,
        splits,
        lexicon,
        vocab,
        detector,
        detector_curve: Vec::new(),
        detector_dev_f1,
    })
}

fn load_model(dir: &Path) -> Result<IthModel> {
    let path = dir.join("model.ckpt");
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no model checkpoint at {}", path.display()),
        )));
    }
    let cfg: ModelConfig = serde_json::from_reader(open(&dir.join("model_config.json"))?)?;
    IthModel::from_checkpoint(cfg, &read_checkpoint(&path)?)
}

fn sentence(text: &str) -> Result<Vec<String>> {
    let mut words: Vec<String> = text.split_whitespace().map(str::to_string).collect();
    if words.is_empty() {
        return Err(Error::Contract("empty --text".into()));
    }
    if words[0] != CLS {
        words.insert(0, CLS.to_string());
    }
    Ok(words)
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { common, task, n_train } => {
            let mut cfg = load_config(&common)?;
            if let Some(t) = task {
                cfg.task = match t {
                    TaskArg::Pitch => Task::Pitch,
                    TaskArg::Recognition => Task::Recognition,
                };
            }
            if let Some(n) = n_train {
                cfg.n_train = n;
            }
            cfg.validate()?;
            let dir = out_dir(&common)?;
            let (splits, lexicon) =
                gen_benchmark(&cfg.data_config(), &cfg.mel_config(), &mut stream(cfg.seed, &[0xda7a]))?;
            write_data(dir, &splits, &lexicon)?;
            fs::write(dir.join("config.toml"), cfg.to_toml())?;
            Ok(())
        }
        Command::TrainDetector { common, data } => {
            let cfg = load_config(&common)?;
            let prep = prepare_with(&cfg, data.as_ref())?;
            write_detector(out_dir(&common)?, &cfg, &prep)?;
            println!("detector dev token F1 {:.4}", prep.detector_dev_f1);
            Ok(())
        }
        Command::Train { common, data } => {
            let cfg = load_config(&common)?;
            let prep = prepare_with(&cfg, data.as_ref())?;
            let out = train_and_evaluate(&prep, &cfg)?;
            let dir = out_dir(&common)?;
            write_detector(dir, &cfg, &prep)?;
            write_checkpoint(&dir.join("model.ckpt"), &out.model.checkpoint())?;
            serde_json::to_writer_pretty(create(&dir.join("model_config.json"))?, out.model.config())?;
            write_loss_curve(create(&dir.join("loss_curve.csv"))?, &out.curve)?;
            let mut w = create(&dir.join("metrics.csv"))?;
            writeln!(w, "split,accuracy")?;
            for (split, acc) in &out.accuracy {
                writeln!(w, "{split},{acc:.6}")?;
                println!("{split} accuracy {acc:.4}");
            }
            Ok(())
        }
        Command::Eval { common, checkpoint } => {
            let model = load_model(&checkpoint)?;
            let prep = load_prepared(&checkpoint, &common)?;
            let cfg = &prep.cfg;
            let frozen = Frozen::new(cfg, &prep.lexicon)?;
            let imaginer = frozen.imaginer(&prep.detector, cfg.rejection_config())?;
            let im = cfg.imagination.then_some(&imaginer);
            let dir = out_dir(&common)?;
            let mut w = create(&dir.join("eval.csv"))?;
            writeln!(w, "split,accuracy,n")?;
            for (name, split) in prep.splits.named().into_iter().skip(1) {
                if split.is_empty() {
                    continue;
                }
                let examples = imagine_split(cfg, &prep.vocab, im, split, name)?;
                let report = evaluate(&model, &examples)?;
                writeln!(w, "{name},{:.6},{}", report.accuracy, examples.len())?;
                println!("{name} accuracy {:.4}", report.accuracy);
                let mut r = create(&dir.join(format!("records_{name}.jsonl")))?;
                for rec in &report.records {
                    serde_json::to_writer(&mut r, rec)?;
                    writeln!(r)?;
                }
            }
            Ok(())
        }
        Command::Ablate { common, seeds } => {
            let cfg = load_config(&common)?;
            let seeds: Vec<u64> = (0..seeds as u64).map(|i| cfg.seed + i).collect();
            eprintln!("ablation over {} seeds with {} workers", seeds.len(), worker_count());
            let report = run_ablation(&cfg, &seeds)?;
            let dir = out_dir(&common)?;
            report.write_csv(create(&dir.join("ablation.csv"))?)?;
            report.write_sweep_csv(create(&dir.join("sweep.csv"))?)?;
            let mut w = create(&dir.join("runs.csv"))?;
            writeln!(w, "variant,seed,split,accuracy,error")?;
            for r in &report.runs {
                match &r.outcome {
                    Ok(acc) => {
                        for (s, a) in acc {
                            writeln!(w, "{},{},{s},{a:.6},", r.variant.name(), r.seed)?;
                        }
                    }
                    Err(e) => writeln!(w, "{},{},,,\"{}\"", r.variant.name(), r.seed, e.replace('"', "'"))?,
                }
            }
            if let Some(t) = report.tuned_tau {
                println!("dev-tuned tau {t}");
                writeln!(create(&dir.join("tuned_tau.txt"))?, "{t}")?;
            }
            Ok(())
        }
        Command::TraceGate {
            common,
            checkpoint,
            text,
        } => {
            let model = load_model(&checkpoint)?;
            let prep = load_prepared(&checkpoint, &common)?;
            let cfg = &prep.cfg;
            let words = sentence(&text)?;
            let tokens = prep.vocab.encode(&words);
            let frozen = Frozen::new(cfg, &prep.lexicon)?;
            let imaginer = frozen.imaginer(&prep.detector, cfg.rejection_config())?;
            let imagination = if cfg.dki {
                imaginer.imagine(&words, &tokens, cfg.seed)?
            } else {
                imaginer.imagine_sentence_level(&words, cfg.seed)?
            };
            let trace = model.gate_trace(&tokens, &imagination)?;
            trace.write_csv(create(&out_dir(&common)?.join("gate_trace.csv"))?, &words)
        }
        Command::TraceAudio {
            common,
            checkpoint,
            text,
        } => {
            let prep = load_prepared(&checkpoint, &common)?;
            let cfg = &prep.cfg;
            let words = sentence(&text)?;
            let tokens = prep.vocab.encode(&words);
            let frozen = Frozen::new(cfg, &prep.lexicon)?;
            let imaginer = frozen
                .imaginer(&prep.detector, cfg.rejection_config())?
                .keeping_waveforms();
            let imagination = imaginer.imagine(&words, &tokens, cfg.seed)?;
            let dir = out_dir(&common)?;
            let mut w = create(&dir.join("trials.csv"))?;
            writeln!(w, "span,start,end,words,trial,score,status")?;
            for (i, s) in imagination.spans.iter().enumerate() {
                let status = serde_json::to_value(s.status)?;
                for (t, score) in s.trial_scores.iter().enumerate() {
                    writeln!(
                        w,
                        "{i},{},{},{},{t},{score:.6},{}",
                        s.span.start,
                        s.span.end,
                        s.words.join(" "),
                        status.as_str().unwrap_or_default()
                    )?;
                }
                if let Some(wave) = s.clip.as_ref().and_then(|c| c.waveform.as_ref()) {
                    write_wav(&dir.join(format!("span_{i}.wav")), wave)?;
                }
            }
            println!(
                "{} spans, {} accepted",
                imagination.spans.len(),
                imagination.accepted().count()
            );
            Ok(())
        }
    }
}
