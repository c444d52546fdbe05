//! Command-line front end: synthetic task generation, stage training,
//! decoding, evaluation, wordpiece tooling, and LM perplexity.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rnnt::decode::{beam_search, greedy_stream_decode, DecodeConfig, EncodedRnnt};
use rnnt::lm::word_perplexity;
use rnnt::nnet::Checkpoint;
use rnnt::pipeline::{
    build_lm_model, build_rnnt_model, evaluate, generate_task, load_split, run_stage_to_dir,
    write_features, write_features_csv, write_transcripts, Dataset, SyntheticTask, TrainingConfig,
    UnitResolver,
};
use rnnt::pipeline::train::UttResult;
use rnnt::units::UnitFamily;
use rnnt::wordpiece::{render_pieces, segment_sentence, train_vocab, WordCounts, WordpieceVocab};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "rnnt", about = "RNN transducer speech recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic recognition task (features + transcripts).
    GenTask(GenTaskArgs),
    /// Train one stage (ctc, lm, or rnnt) from a TOML config.
    Train(TrainArgs),
    /// Decode a split with a trained transducer checkpoint.
    Decode(DecodeArgs),
    /// Score a trained transducer on a split (WER and label error rate).
    Eval(EvalArgs),
    /// Wordpiece vocabulary tooling.
    Wordpiece(WordpieceArgs),
    /// Word perplexity of a trained LM checkpoint on a split.
    LmPpl(LmPplArgs),
}

#[derive(Args)]
struct GenTaskArgs {
    /// Output directory; receives {train,dev,test}.feat and .tsv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    utterances: usize,
    #[arg(long)]
    seed: u64,
    /// Abstract latent class count (ignored when --word-list is given).
    #[arg(long, default_value_t = 20)]
    vocab_size: usize,
    /// File with one word per line; switches to word mode, where latent
    /// labels are the grapheme indices of the sampled sentence.
    #[arg(long)]
    word_list: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    min_labels: usize,
    #[arg(long, default_value_t = 8)]
    max_labels: usize,
    #[arg(long, default_value_t = 3)]
    frames_per_label: usize,
    #[arg(long, default_value_t = 1)]
    jitter: usize,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Also write features as CSV for inspection.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Data directory produced by gen-task.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for metrics, checkpoint, and manifest.
    /// Defaults to $RNNT_RUN_DIR, then "./run".
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// After an rnnt-stage run, write forward/backward score grids for the
    /// first dev utterance to alpha.csv / beta.csv in the run directory.
    #[arg(long)]
    dump_grid: bool,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Beam width; defaults to 100 for graphemes, 25 for wordpieces.
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value_t = 1)]
    nbest: usize,
    /// Greedy decoding instead of beam search.
    #[arg(long)]
    greedy: bool,
    /// Print the partial hypothesis after every consumed frame.
    #[arg(long)]
    stream: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "dev")]
    split: String,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    greedy: bool,
    /// Print per-utterance reference/hypothesis pairs.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct WordpieceArgs {
    #[command(subcommand)]
    command: WordpieceCommand,
}

#[derive(Subcommand)]
enum WordpieceCommand {
    /// Train a vocabulary of the given size from text or word counts.
    Train {
        /// Plain text file; word counts are accumulated from it.
        #[arg(long, conflicts_with = "counts")]
        text: Option<PathBuf>,
        /// Tab-separated "word<TAB>count" file.
        #[arg(long)]
        counts: Option<PathBuf>,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment stdin sentences; prints one space-joined piece rendering
    /// per line.
    Segment {
        #[arg(long)]
        vocab: PathBuf,
    },
}

#[derive(Args)]
struct LmPplArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenTask(args) => gen_task(args),
        Command::Train(args) => train(args),
        Command::Decode(args) => decode(args),
        Command::Eval(args) => eval(args),
        Command::Wordpiece(args) => wordpiece(args),
        Command::LmPpl(args) => lm_ppl(args),
    }
}

fn split_paths(data: &Path, split: &str) -> (PathBuf, PathBuf) {
    (
        data.join(format!("{split}.feat")),
        data.join(format!("{split}.tsv")),
    )
}

fn load_dataset(data: &Path) -> Result<Dataset> {
    let mut splits = Vec::new();
    for name in ["train", "dev", "test"] {
        let (feat, tsv) = split_paths(data, name);
        splits.push(
            load_split(&feat, &tsv).with_context(|| format!("loading {name} split from {data:?}"))?,
        );
    }
    let mut it = splits.into_iter();
    Ok(Dataset {
        train: it.next().unwrap(),
        dev: it.next().unwrap(),
        test: it.next().unwrap(),
    })
}

fn pick_split<'a>(dataset: &'a Dataset, split: &str) -> Result<&'a [rnnt::pipeline::Utterance]> {
    match split {
        "train" => Ok(&dataset.train),
        "dev" => Ok(&dataset.dev),
        "test" => Ok(&dataset.test),
        other => bail!("unknown split {other:?} (expected train, dev, or test)"),
    }
}

fn gen_task(args: GenTaskArgs) -> Result<()> {
    let words = match &args.word_list {
        None => None,
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let words: Vec<String> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect();
            if words.is_empty() {
                bail!("word list {path:?} is empty");
            }
            Some(words)
        }
    };
    let task = SyntheticTask {
        vocab_size: args.vocab_size,
        min_labels: args.min_labels,
        max_labels: args.max_labels,
        frames_per_label: args.frames_per_label,
        jitter: args.jitter,
        feature_dim: args.feature_dim,
        noise: args.noise,
        seed: args.seed,
        words,
    };
    let dataset = generate_task(&task, args.utterances)?;
    std::fs::create_dir_all(&args.out)?;
    for (name, utts) in [
        ("train", &dataset.train),
        ("dev", &dataset.dev),
        ("test", &dataset.test),
    ] {
        let (feat, tsv) = split_paths(&args.out, name);
        write_features(std::io::BufWriter::new(std::fs::File::create(&feat)?), utts)?;
        write_transcripts(std::io::BufWriter::new(std::fs::File::create(&tsv)?), utts)?;
        if args.csv {
            let csv = args.out.join(format!("{name}.csv"));
            write_features_csv(std::io::BufWriter::new(std::fs::File::create(csv)?), utts)?;
        }
        println!("{name}: {} utterances", utts.len());
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = TrainingConfig::from_file(&args.config)?;
    let dataset = load_dataset(&args.data)?;
    let run_dir = args
        .run_dir
        .or_else(|| std::env::var_os("RNNT_RUN_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("run"));
    let result = run_stage_to_dir(&cfg, &dataset, &run_dir)?;
    for line in &result.transfer_lines {
        println!("{line}");
    }
    if let (Some(first), Some(last)) = (result.losses.first(), result.losses.last()) {
        println!(
            "trained {} steps, loss {:.6} -> {:.6}",
            result.losses.len(),
            first,
            last
        );
    }
    if args.dump_grid {
        let model = result
            .rnnt_model
            .as_ref()
            .context("--dump-grid needs an rnnt-stage config")?;
        let utt = dataset
            .dev
            .first()
            .context("--dump-grid needs a non-empty dev split")?;
        let resolver = UnitResolver::from_units_config(&cfg.units)?;
        let target = resolver.targets(cfg.units.family, utt)?;
        let step = model.loss_and_grads(&utt.frames, &target)?;
        let alpha = std::fs::File::create(run_dir.join("alpha.csv"))?;
        let beta = std::fs::File::create(run_dir.join("beta.csv"))?;
        step.grid.write_csv(
            std::io::BufWriter::new(alpha),
            std::io::BufWriter::new(beta),
        )?;
        println!("wrote alpha.csv / beta.csv for {} to {run_dir:?}", utt.id);
    }
    println!("run directory: {}", run_dir.display());
    Ok(())
}

fn load_transducer(
    config: &Path,
    checkpoint: &Path,
) -> Result<(TrainingConfig, UnitResolver, rnnt::nnet::RnntModel)> {
    let cfg = TrainingConfig::from_file(config)?;
    let resolver = UnitResolver::from_units_config(&cfg.units)?;
    let mut model = build_rnnt_model(&cfg, &resolver)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    ckpt.apply_to_model(&mut model)?;
    Ok((cfg, resolver, model))
}

fn decode_config(family: UnitFamily, beam: Option<usize>, temperature: Option<f64>) -> DecodeConfig {
    let mut dc = match family {
        UnitFamily::Wordpiece => DecodeConfig::wordpiece_defaults(),
        _ => DecodeConfig::grapheme_defaults(),
    };
    if let Some(b) = beam {
        dc.beam = b;
    }
    if let Some(t) = temperature {
        dc.temperature = t;
    }
    dc
}

fn decode(args: DecodeArgs) -> Result<()> {
    let (cfg, resolver, model) = load_transducer(&args.config, &args.checkpoint)?;
    let dataset = load_dataset(&args.data)?;
    let utts = pick_split(&dataset, &args.split)?;
    let dc = decode_config(cfg.units.family, args.beam, args.temperature);
    let family = cfg.units.family;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for utt in utts {
        let encoded = EncodedRnnt::new(&model, &utt.frames)?;
        if args.greedy || args.stream {
            let mut stream_print = |frame: usize, labels: &[usize]| {
                let partial = resolver.words_from_labels(family, labels).join(" ");
                println!("{}\tframe {}\t{}", utt.id, frame, partial);
            };
            let mut cb: Option<&mut dyn FnMut(usize, &[usize])> = if args.stream {
                Some(&mut stream_print)
            } else {
                None
            };
            let (labels, stats) = greedy_stream_decode(&encoded, &dc, cb.take());
            let text = resolver.words_from_labels(family, &labels).join(" ");
            writeln!(out, "{}\t{}\t{}\t{}", utt.id, 1, stats.blanks, text)?;
        } else {
            for (rank, hyp) in beam_search(&encoded, &dc, args.nbest).iter().enumerate() {
                let text = resolver.words_from_labels(family, &hyp.labels).join(" ");
                writeln!(out, "{}\t{}\t{:.6}\t{}", utt.id, rank + 1, hyp.score, text)?;
            }
        }
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let (cfg, resolver, model) = load_transducer(&args.config, &args.checkpoint)?;
    let dataset = load_dataset(&args.data)?;
    let utts = pick_split(&dataset, &args.split)?;
    let dc = decode_config(cfg.units.family, args.beam, args.temperature);
    let report = evaluate(&model, utts, &resolver, cfg.units.family, &dc, !args.greedy)?;
    if args.verbose {
        for UttResult {
            id,
            reference,
            hypothesis,
            ..
        } in &report.utterances
        {
            println!("{id}\tREF\t{reference}");
            println!("{id}\tHYP\t{hypothesis}");
        }
    }
    println!(
        "wer {:.4} (sub {} ins {} del {} / {} words), label error rate {:.4}",
        report.wer,
        report.substitutions,
        report.insertions,
        report.deletions,
        report.reference_words,
        report.label_error_rate
    );
    Ok(())
}

fn wordpiece(args: WordpieceArgs) -> Result<()> {
    match args.command {
        WordpieceCommand::Train {
            text,
            counts,
            size,
            out,
        } => {
            let counts = match (text, counts) {
                (Some(path), None) => {
                    let body = std::fs::read_to_string(&path)?;
                    let mut c = WordCounts::new();
                    c.add_text(&body)?;
                    c
                }
                (None, Some(path)) => WordCounts::from_file(&path)?,
                _ => bail!("provide exactly one of --text or --counts"),
            };
            let vocab = train_vocab(&counts, size)?;
            vocab.save(&out)?;
            println!("wrote {} pieces to {}", vocab.size(), out.display());
            Ok(())
        }
        WordpieceCommand::Segment { vocab } => {
            let vocab = WordpieceVocab::load(&vocab)?;
            let stdin = std::io::stdin();
            for line in stdin.lock().lines() {
                let line = line?;
                if line.is_empty() {
                    println!();
                    continue;
                }
                let pieces = segment_sentence(&line, &vocab)?;
                println!("{}", render_pieces(&pieces, &vocab));
            }
            Ok(())
        }
    }
}

fn lm_ppl(args: LmPplArgs) -> Result<()> {
    let cfg = TrainingConfig::from_file(&args.config)?;
    let resolver = UnitResolver::from_units_config(&cfg.units)?;
    let mut model = build_lm_model(&cfg, &resolver)?;
    Checkpoint::load(&args.checkpoint)?.apply_to_model(&mut model)?;
    let dataset = load_dataset(&args.data)?;
    let utts = pick_split(&dataset, &args.split)?;
    let corpus: Vec<(Vec<usize>, usize)> = utts
        .iter()
        .map(|u| {
            let labels = resolver.targets(cfg.units.family, u)?.labels().to_vec();
            let words = resolver.reference_words(cfg.units.family, u).len();
            Ok((labels, words))
        })
        .collect::<Result<_>>()?;
    let ppl = word_perplexity(&model, &corpus)?;
    println!("word perplexity {ppl:.4} over {} utterances", corpus.len());
    Ok(())
}
