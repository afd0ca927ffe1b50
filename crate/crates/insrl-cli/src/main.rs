//! Command-line surface: ingest, synth, train, eval, ablate, gradcheck, plot.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use insrl::ablation::{
    format_ablation_table, run_synth_experiment, run_text_suite, suite_variants,
    write_ablation_csv, write_synth_report, SynthExperimentConfig,
};
use insrl::checkpoint;
use insrl::config::{Config, DataKind, Precision};
use insrl::data::toygen::{write_toy_corpus, ToyCorpusConfig};
use insrl::data::{
    read_feature_jsonl, synth_generate, write_feature_jsonl, SynthConfig,
};
use insrl::error::{Error, Result};
use insrl::manifest::RunManifest;
use insrl::metrics::{read_pr_csv, write_pr_csv};
use insrl::model::{build_feature_model, feature_accuracy, train, Dataset};
use insrl::plot::write_pr_svg;
use insrl::runner::{
    encode_corpora, evaluate_model, load_corpora, load_pretrained, load_text_model, train_text,
};
use insrl::scalar::Scalar;

#[derive(Parser)]
#[command(
    name = "insrl",
    about = "Multi-view relation extraction: intact-space fusion over sentence bags, entity descriptions, and type sets",
    version
)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for checkpoints, logs, metrics, and plots.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a corpus, build vocabularies, encode samples, and report counts.
    /// Optionally write a subsampled copy of the corpus first.
    Ingest {
        /// Keep only the K most frequent non-NA relations (plus NA).
        #[arg(long)]
        top_relations: Option<usize>,
        /// Keep at most this many training bags (seeded sample).
        #[arg(long)]
        max_bags: Option<usize>,
    },
    /// Generate a synthetic dataset: multi-view feature vectors, or a full
    /// text corpus in the ingest format.
    Synth {
        /// "features" or "corpus".
        #[arg(long, default_value = "features")]
        kind: String,
        /// Total samples (features) or fact bags (corpus).
        #[arg(long)]
        samples: Option<usize>,
        /// Held-out samples split off the end (features kind).
        #[arg(long, default_value_t = 500)]
        test_samples: usize,
        /// Number of relations.
        #[arg(long)]
        relations: Option<usize>,
    },
    /// Train a model and write checkpoint, vocabulary, log, and manifest.
    Train,
    /// Score the held-out split with a checkpoint: PR curve CSV, AUC, max F1.
    Eval {
        /// Checkpoint file (vocab.json is expected next to it).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Truncate the ranked list to its top K predictions.
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Train and evaluate a suite of model variants over several seeds.
    Ablate {
        /// "views" or "fusion".
        #[arg(long, default_value = "fusion")]
        suite: String,
    },
    /// Run the end-to-end finite-difference gradient suite at toy dims.
    Gradcheck {
        /// Number of random seeds.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Render precision-recall CSV files into one SVG.
    Plot {
        /// Input CSV files (repeatable); curve names come from file stems.
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        /// Output SVG path.
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "precision-recall")]
        title: String,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config <file> is required for this command".into()))?;
    let mut cfg = Config::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

/// Run `body` with the scalar type selected by the configured precision.
macro_rules! with_precision {
    ($cfg:expr, $ty:ident, $body:block) => {
        match $cfg.train.precision {
            Precision::F64 => {
                type $ty = f64;
                $body
            }
            Precision::F32 => {
                type $ty = f32;
                $body
            }
        }
    };
}

fn run(cli: Cli) -> Result<()> {
    std::fs::create_dir_all(&cli.out_dir)?;
    match &cli.command {
        Command::Ingest {
            top_relations,
            max_bags,
        } => {
            let cfg = load_config(&cli)?;
            cmd_ingest(&cli, &cfg, *top_relations, *max_bags)
        }
        Command::Synth {
            kind,
            samples,
            test_samples,
            relations,
        } => cmd_synth(&cli, kind, *samples, *test_samples, *relations),
        Command::Train => {
            let cfg = load_config(&cli)?;
            with_precision!(cfg, S, { cmd_train::<S>(&cli, &cfg) })
        }
        Command::Eval { checkpoint, top_k } => {
            let cfg = load_config(&cli)?;
            with_precision!(cfg, S, { cmd_eval::<S>(&cli, &cfg, checkpoint, *top_k) })
        }
        Command::Ablate { suite } => {
            let cfg = load_config(&cli)?;
            with_precision!(cfg, S, { cmd_ablate::<S>(&cli, &cfg, suite) })
        }
        Command::Gradcheck { seeds } => cmd_gradcheck(*seeds),
        Command::Plot {
            input,
            output,
            title,
        } => cmd_plot(input, output, title),
    }
}

fn cmd_ingest(
    cli: &Cli,
    cfg: &Config,
    top_relations: Option<usize>,
    max_bags: Option<usize>,
) -> Result<()> {
    if cfg.data.kind != DataKind::Text {
        return Err(Error::Config("ingest applies to text corpora".into()));
    }
    let mut cfg = cfg.clone();
    if top_relations.is_some() || max_bags.is_some() {
        let paths = subsample_corpus(&cli.out_dir, &cfg, top_relations, max_bags)?;
        cfg.data.train = Some(paths.0);
        cfg.data.test = Some(paths.1);
        cfg.data.relations = Some(paths.2);
        println!("subsampled corpus written under {}", cli.out_dir.display());
    }
    let raw = load_corpora(&cfg)?;
    let prepared = encode_corpora(&raw, &cfg, cfg.train.seed)?;
    prepared.vocab.save(&cli.out_dir.join("vocab.json"))?;

    write_jsonl(&cli.out_dir.join("encoded_train.jsonl"), &prepared.train)?;
    write_jsonl(&cli.out_dir.join("encoded_test.jsonl"), &prepared.eval_pairs)?;

    let t = &prepared.train_stats;
    println!(
        "train: {} sentences, {} entity pairs, {} facts, {} bags",
        t.sentences, t.entity_pairs, t.facts, t.bags
    );
    println!(
        "train: {} entities, {:.2} types/entity on average, {} described",
        t.entities, t.mean_types_per_entity, t.described_entities
    );
    let e = &prepared.test_stats;
    println!(
        "test:  {} sentences, {} entity pairs, {} facts",
        e.sentences, e.entity_pairs, e.facts
    );
    println!(
        "vocab: {} words, {} types, {} relations",
        prepared.vocab.n_words(),
        prepared.vocab.n_types(),
        prepared.vocab.n_relations()
    );
    Ok(())
}

fn write_jsonl<S: serde::Serialize>(path: &Path, records: &[S]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// The mini-corpus recipe: keep NA plus the most frequent relations, then a
/// seeded sample of at most `max_bags` training bags. Writes new sentence
/// and relation files; descriptions and types are reused as-is.
fn subsample_corpus(
    out_dir: &Path,
    cfg: &Config,
    top_relations: Option<usize>,
    max_bags: Option<usize>,
) -> Result<(PathBuf, PathBuf, PathBuf)> {
    use insrl::data::SentenceRecord;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let raw = load_corpora(cfg)?;
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &raw.train.sentences {
        if s.relation != "NA" {
            *freq.entry(s.relation.as_str()).or_insert(0) += 1;
        }
    }
    let kept: BTreeSet<String> = match top_relations {
        Some(k) => {
            let mut by_freq: Vec<(&str, usize)> = freq.into_iter().collect();
            by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
            by_freq.iter().take(k).map(|(r, _)| r.to_string()).collect()
        }
        None => freq.keys().map(|r| r.to_string()).collect(),
    };

    let keep_sentence = |s: &SentenceRecord| s.relation == "NA" || kept.contains(&s.relation);
    let mut train: Vec<SentenceRecord> = raw
        .train
        .sentences
        .iter()
        .filter(|s| keep_sentence(s))
        .cloned()
        .collect();
    let test: Vec<SentenceRecord> = raw
        .test
        .sentences
        .iter()
        .filter(|s| keep_sentence(s))
        .cloned()
        .collect();

    if let Some(cap) = max_bags {
        let mut keys: BTreeSet<(String, String, String)> = BTreeSet::new();
        for s in &train {
            keys.insert((s.head.clone(), s.tail.clone(), s.relation.clone()));
        }
        let mut keys: Vec<_> = keys.into_iter().collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.train.seed);
        keys.shuffle(&mut rng);
        keys.truncate(cap);
        let keep: BTreeSet<_> = keys.into_iter().collect();
        train.retain(|s| keep.contains(&(s.head.clone(), s.tail.clone(), s.relation.clone())));
    }

    let train_path = out_dir.join("mini_train_sentences.jsonl");
    let test_path = out_dir.join("mini_test_sentences.jsonl");
    let relations_path = out_dir.join("mini_relations.txt");
    write_jsonl(&train_path, &train)?;
    write_jsonl(&test_path, &test)?;
    {
        let mut w = BufWriter::new(File::create(&relations_path)?);
        writeln!(w, "NA")?;
        for r in raw.train.relations.iter().filter(|r| kept.contains(*r)) {
            writeln!(w, "{r}")?;
        }
    }
    Ok((train_path, test_path, relations_path))
}

fn cmd_synth(
    cli: &Cli,
    kind: &str,
    samples: Option<usize>,
    test_samples: usize,
    relations: Option<usize>,
) -> Result<()> {
    let seed = cli.seed.unwrap_or(13);
    match kind {
        "features" => {
            let mut cfg = SynthConfig {
                seed,
                ..SynthConfig::default()
            };
            if let Some(n) = samples {
                cfg.n_samples = n;
            }
            if let Some(r) = relations {
                cfg.n_relations = r;
            }
            if test_samples >= cfg.n_samples {
                return Err(Error::Config(
                    "test_samples must be below the total sample count".into(),
                ));
            }
            let ds = synth_generate(&cfg)?;
            let split = cfg.n_samples - test_samples;
            let train_path = cli.out_dir.join("synth_train.jsonl");
            let test_path = cli.out_dir.join("synth_test.jsonl");
            write_feature_jsonl(&train_path, &ds.samples[..split])?;
            write_feature_jsonl(&test_path, &ds.samples[split..])?;
            let mut w = BufWriter::new(File::create(cli.out_dir.join("synth_config.json"))?);
            serde_json::to_writer_pretty(&mut w, &cfg)?;
            w.write_all(b"\n")?;
            println!(
                "wrote {} train / {} test feature samples to {}",
                split,
                test_samples,
                cli.out_dir.display()
            );
            Ok(())
        }
        "corpus" => {
            let mut cfg = ToyCorpusConfig {
                seed,
                ..ToyCorpusConfig::default()
            };
            if let Some(n) = samples {
                cfg.n_train_facts = n;
                cfg.n_train_na = n / 2;
                cfg.n_test_facts = n / 4;
                cfg.n_test_na = n / 4;
            }
            if let Some(r) = relations {
                cfg.n_relations = r;
            }
            let corpus = write_toy_corpus(&cli.out_dir, &cfg)?;
            println!(
                "wrote corpus files: {} and {} (+ descriptions, types, relations)",
                corpus.train.sentences.display(),
                corpus.test.sentences.display()
            );
            Ok(())
        }
        other => Err(Error::Config(format!(
            "unknown synth kind '{other}' (expected features | corpus)"
        ))),
    }
}

fn cmd_train<T: Scalar>(cli: &Cli, cfg: &Config) -> Result<()> {
    let seed = cfg.train.seed;
    let mut manifest = RunManifest::new(cfg.clone(), seed);
    let log_path = cli.out_dir.join("train_log.jsonl");
    let mut log_file = BufWriter::new(File::create(&log_path)?);
    let ckpt_path = cli.out_dir.join("checkpoint.ckpt");

    match cfg.data.kind {
        DataKind::Text => {
            for p in [&cfg.data.train, &cfg.data.test, &cfg.data.descriptions, &cfg.data.types, &cfg.data.relations]
                .into_iter()
                .flatten()
            {
                manifest.hash_input(p)?;
            }
            let raw = load_corpora(cfg)?;
            let prepared = encode_corpora(&raw, cfg, seed)?;
            prepared.vocab.save(&cli.out_dir.join("vocab.json"))?;
            let pretrained = load_pretrained(cfg)?;
            println!(
                "training on {} bags, {} relations, seed {seed}",
                prepared.train.len(),
                prepared.vocab.n_relations()
            );
            let (model, log) = train_text::<T, _>(
                cfg,
                &prepared,
                pretrained.as_ref(),
                seed,
                |stats, store| {
                    serde_json::to_writer(&mut log_file, stats)?;
                    log_file.write_all(b"\n")?;
                    log_file.flush()?;
                    checkpoint::save(store, &ckpt_path)?;
                    println!(
                        "epoch {:>3}: loss {:.4} grad {:.3}{}",
                        stats.epoch,
                        stats.loss,
                        stats.grad_norm,
                        match &stats.gamma_mean {
                            Some(g) => format!(
                                " gamma [{}]",
                                g.iter()
                                    .map(|v| format!("{v:.3}"))
                                    .collect::<Vec<_>>()
                                    .join(", ")
                            ),
                            None => String::new(),
                        }
                    );
                    Ok(())
                },
            )?;
            checkpoint::save(&model.store, &ckpt_path)?;
            manifest.epochs = log;
            manifest.write(&cli.out_dir.join("manifest.json"))?;
            println!("checkpoint: {}", ckpt_path.display());
        }
        DataKind::Features => {
            let train_path = cfg
                .data
                .train
                .as_ref()
                .ok_or_else(|| Error::Config("data.train path is required".into()))?;
            manifest.hash_input(train_path)?;
            let samples = read_feature_jsonl(train_path)?;
            if samples.is_empty() {
                return Err(Error::Config("feature dataset is empty".into()));
            }
            let n_relations = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
            let mut model_cfg = cfg.model.clone();
            model_cfg.d_model = samples[0].v1.len();
            let mut model = build_feature_model::<T>(&model_cfg, n_relations, seed)?;
            let mut tc = cfg.train.clone();
            tc.seed = seed;
            let log = train(
                &mut model,
                &Dataset::Features(samples),
                &tc,
                |stats, store| {
                    serde_json::to_writer(&mut log_file, stats)?;
                    log_file.write_all(b"\n")?;
                    log_file.flush()?;
                    checkpoint::save(store, &ckpt_path)?;
                    Ok(())
                },
            )?;
            checkpoint::save(&model.store, &ckpt_path)?;
            manifest.epochs = log;
            manifest.write(&cli.out_dir.join("manifest.json"))?;
            if let Some(test_path) = &cfg.data.test {
                let test = read_feature_jsonl(test_path)?;
                let acc = feature_accuracy(&model, &test)?;
                println!("test accuracy: {acc:.4}");
            }
            println!("checkpoint: {}", ckpt_path.display());
        }
    }
    println!("log: {}", log_path.display());
    Ok(())
}

fn cmd_eval<T: Scalar>(
    cli: &Cli,
    cfg: &Config,
    ckpt: &Path,
    top_k: Option<usize>,
) -> Result<()> {
    match cfg.data.kind {
        DataKind::Text => {
            let raw = load_corpora(cfg)?;
            let mut prepared = encode_corpora(&raw, cfg, cfg.train.seed)?;
            // the vocabulary saved at training time wins over a rebuild
            let vocab_path = ckpt
                .parent()
                .map(|d| d.join("vocab.json"))
                .filter(|p| p.exists());
            if let Some(vp) = vocab_path {
                prepared.vocab = insrl::data::Vocab::load(&vp)?;
            }
            let model = load_text_model::<T>(cfg, &prepared, ckpt)?;
            let (curve, metrics, _) = evaluate_model(&model, &prepared.eval_pairs, top_k)?;
            let csv = cli.out_dir.join("pr_curve.csv");
            write_pr_csv(&csv, &curve)?;
            let mut w = BufWriter::new(File::create(cli.out_dir.join("metrics.json"))?);
            serde_json::to_writer_pretty(&mut w, &metrics)?;
            w.write_all(b"\n")?;
            println!(
                "auc {:.4}  max_f1 {:.4}  ({} predictions over {} gold facts)",
                metrics.auc, metrics.max_f1, metrics.predictions, metrics.gold_facts
            );
            println!("pr curve: {}", csv.display());
        }
        DataKind::Features => {
            let test_path = cfg
                .data
                .test
                .as_ref()
                .ok_or_else(|| Error::Config("data.test path is required".into()))?;
            let test = read_feature_jsonl(test_path)?;
            if test.is_empty() {
                return Err(Error::Eval("feature test set is empty".into()));
            }
            let n_relations = test.iter().map(|s| s.label).max().unwrap_or(0) + 1;
            let mut model_cfg = cfg.model.clone();
            model_cfg.d_model = test[0].v1.len();
            let mut model = build_feature_model::<T>(&model_cfg, n_relations, 0)?;
            checkpoint::load_into(&mut model.store, ckpt)?;
            let acc = feature_accuracy(&model, &test)?;
            let mut w = BufWriter::new(File::create(cli.out_dir.join("metrics.json"))?);
            serde_json::to_writer_pretty(&mut w, &serde_json::json!({ "accuracy": acc }))?;
            w.write_all(b"\n")?;
            println!("test accuracy: {acc:.4}");
        }
    }
    Ok(())
}

fn cmd_ablate<T: Scalar>(cli: &Cli, cfg: &Config, suite: &str) -> Result<()> {
    match cfg.data.kind {
        DataKind::Text => {
            let variants = suite_variants(suite, &cfg.model)?;
            let raw = load_corpora(cfg)?;
            let pretrained = load_pretrained(cfg)?;
            let cells = run_text_suite::<T>(cfg, &raw, pretrained.as_ref(), &variants, true)?;
            let csv = cli.out_dir.join(format!("ablation_{suite}.csv"));
            write_ablation_csv(&csv, &cells)?;
            print!("{}", format_ablation_table(&cells));
            println!("csv: {}", csv.display());
        }
        DataKind::Features => {
            if suite != "fusion" {
                return Err(Error::Config(
                    "feature datasets support the fusion suite only".into(),
                ));
            }
            let exp = SynthExperimentConfig {
                train: cfg.train.clone(),
                ..SynthExperimentConfig::default()
            };
            let report = run_synth_experiment::<T>(&exp)?;
            let path = cli.out_dir.join("synth_report.json");
            write_synth_report(&path, &report)?;
            for s in &report.strategies {
                println!(
                    "{:<10} median accuracy {:.4} over {} seeds",
                    s.strategy,
                    s.median_accuracy,
                    s.test_accuracy.len()
                );
            }
            println!(
                "ordering insrl ≥ insrl-avg ≥ mv-avg: {}",
                if report.ordering_holds { "holds" } else { "violated" }
            );
            println!("report: {}", path.display());
        }
    }
    Ok(())
}

fn cmd_gradcheck(seeds: usize) -> Result<()> {
    let outcome = insrl::gradcheck::model_gradient_suite(seeds)?;
    for (seed, report) in &outcome.per_seed {
        println!(
            "seed {seed:>3}: max rel err {:.3e} over {} entries (worst {})",
            report.max_rel_err, report.entries_checked, report.worst_param
        );
    }
    println!(
        "max relative error {:.3e} over {seeds} seeds",
        outcome.max_rel_err
    );
    if outcome.max_rel_err >= 1e-4 {
        return Err(Error::NonFinite(format!(
            "gradient check failed: {:.3e} ≥ 1e-4",
            outcome.max_rel_err
        )));
    }
    Ok(())
}

fn cmd_plot(inputs: &[PathBuf], output: &Path, title: &str) -> Result<()> {
    let curves: Result<Vec<(String, Vec<(f64, f64)>)>> = inputs
        .iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string());
            Ok((name, read_pr_csv(p)?))
        })
        .collect();
    let curves = curves?;
    let refs: Vec<(&str, &[(f64, f64)])> = curves
        .iter()
        .map(|(n, c)| (n.as_str(), c.as_slice()))
        .collect();
    write_pr_svg(output, &refs, title)?;
    println!("plot: {}", output.display());
    Ok(())
}
