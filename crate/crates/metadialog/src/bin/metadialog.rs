//! Command-line front end: corpus generation, source-domain training,
//! target adaptation, evaluation, single-turn decoding, and the full
//! multi-seed experiment.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 training divergence, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use metadialog::checkpoint::{load_checkpoint, save_checkpoint};
use metadialog::corpus::{build_examples, Vocab};
use metadialog::datagen::{
    corpus_stats, generate_corpus, read_corpus, token_inventory, write_corpus, Dialog,
};
use metadialog::domains::{builtin, BUILTIN_NAMES};
use metadialog::error::Error;
use metadialog::eval::evaluate_model;
use metadialog::experiment::{run_experiment, ExperimentConfig, TrainMode};
use metadialog::model::{greedy_decode_turn, grow_vocab, init_params, ModelConfig};
use metadialog::schema::{DomainSpec, KnowledgeBase};
use metadialog::train::{adapt, maml_train, transfer_train, TrainConfig};

#[derive(Parser)]
#[command(name = "metadialog", version, about = "Domain-adaptive dialog generation")]
struct Cli {
    /// Worker threads for data-parallel sections (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment configuration; omitted fields use defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root random seed; derived streams cover data, init, and training.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                toml::from_str::<ExperimentConfig>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            cfg.seeds = vec![seed];
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate source-domain corpora and target-domain adaptation splits.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory, one subdirectory per domain.
        #[arg(long)]
        out: PathBuf,
        /// Training dialogs per source domain.
        #[arg(long, default_value_t = 900)]
        train: usize,
        /// Validation dialogs per source domain.
        #[arg(long, default_value_t = 100)]
        val: usize,
        /// Test dialogs per domain.
        #[arg(long, default_value_t = 500)]
        test: usize,
        /// Adaptation set sizes for the target domain.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 9, 45, 90])]
        adapt_sizes: Vec<usize>,
        /// Overwrite an existing output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train on the source domains.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Data directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// maml or transfer.
        #[arg(long)]
        mode: String,
        /// Output directory for model.ckpt and vocab.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a trained model on target-domain dialogs.
    Adapt {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory holding model.ckpt and vocab.json.
        #[arg(long)]
        model: PathBuf,
        /// Adaptation corpus (jsonl).
        #[arg(long)]
        data: PathBuf,
        /// Validation corpus (jsonl); defaults to the adaptation corpus.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a model on a dialog corpus.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        /// Test corpus (jsonl).
        #[arg(long)]
        data: PathBuf,
        /// Knowledge base JSON for match-indicator queries.
        #[arg(long)]
        kb: PathBuf,
        /// Let the model roll out its own dialog history.
        #[arg(long)]
        rollout: bool,
    },
    /// Decode one turn from a user utterance.
    Decode {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        domain: String,
        /// Current user utterance.
        #[arg(long)]
        user: String,
        /// Previous turn's belief span tokens.
        #[arg(long, default_value = "")]
        prev_belief: String,
        /// Previous turn's system response.
        #[arg(long, default_value = "")]
        prev_response: String,
    },
    /// Run the multi-seed train/adapt/eval experiment.
    Experiment {
        #[command(flatten)]
        config: ConfigArgs,
        /// maml, transfer, or both.
        #[arg(long, default_value = "both")]
        mode: String,
        /// Comma-separated seeds (overrides the config list).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Report JSON output path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    #[cfg(feature = "parallel")]
    if cli.jobs > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = cli.jobs;
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Data(_) | Error::Schema(_) | Error::Checkpoint(_) => 3,
                Error::Divergence(_) => 4,
                _ => 1,
            })
        }
    }
}

/// FNV-1a over the canonical JSON form; stamped into checkpoints and
/// reports so outputs can be traced to the exact configuration.
fn config_hash(cfg: &ExperimentConfig) -> String {
    let text = serde_json::to_string(cfg).expect("config serializes");
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    format!("{h:016x}")
}

fn spec_or_err(name: &str) -> Result<DomainSpec, Error> {
    builtin(name).ok_or_else(|| {
        Error::Config(format!("unknown domain {name:?}; built-ins are {BUILTIN_NAMES:?}"))
    })
}

fn specs_for_dialogs(dialogs: &[Dialog]) -> Result<Vec<DomainSpec>, Error> {
    let mut names: Vec<&str> = dialogs.iter().map(|d| d.domain.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    names.iter().map(|n| spec_or_err(n)).collect()
}

fn load_model(dir: &Path) -> Result<(metadialog::ParamSet, ModelConfig, Vocab), Error> {
    let (params, manifest) = load_checkpoint(&dir.join("model.ckpt"))?;
    let mcfg: ModelConfig = serde_json::from_value(
        manifest
            .get("model")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("manifest is missing the model section".into()))?,
    )?;
    let vocab = Vocab::load(&dir.join("vocab.json"))?;
    if params.get("emb").value.shape[0] != vocab.len() {
        return Err(Error::Checkpoint(format!(
            "embedding rows ({}) disagree with vocabulary size ({})",
            params.get("emb").value.shape[0],
            vocab.len()
        )));
    }
    Ok((params, mcfg, vocab))
}

fn save_model(
    dir: &Path,
    params: &metadialog::ParamSet,
    mcfg: &ModelConfig,
    vocab: &Vocab,
    extra: serde_json::Value,
) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = json!({
        "model": mcfg,
        "vocab_size": vocab.len(),
    });
    if let (Some(m), Some(e)) = (manifest.as_object_mut(), extra.as_object()) {
        for (k, v) in e {
            m.insert(k.clone(), v.clone());
        }
    }
    save_checkpoint(&dir.join("model.ckpt"), params, &manifest)?;
    vocab.save(&dir.join("vocab.json"))?;
    Ok(())
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::GenData { config, out, train, val, test, adapt_sizes, force } => {
            let cfg = config.load()?;
            let hash = config_hash(&cfg);
            if out.exists() {
                if !force {
                    return Err(Error::Config(format!(
                        "{} already exists; pass --force to overwrite",
                        out.display()
                    )));
                }
                std::fs::remove_dir_all(&out)?;
            }
            let seed0 = cfg.train.seed;
            let mut all = cfg.source_domains.clone();
            all.push(cfg.target_domain.clone());
            for (i, name) in all.iter().enumerate() {
                let spec = spec_or_err(name)?;
                let dir = out.join(name);
                std::fs::create_dir_all(&dir)?;
                let base = seed0
                    .wrapping_mul(1_000_000)
                    .wrapping_add(i as u64 * 100_000);
                let kb = KnowledgeBase::generate(&spec, cfg.kb_size, base + 9_999);
                std::fs::write(dir.join("kb.json"), serde_json::to_string_pretty(&kb)?)?;
                let is_target = *name == cfg.target_domain;
                let mut splits: Vec<(String, usize, u64)> = Vec::new();
                if is_target {
                    for (j, &n) in adapt_sizes.iter().enumerate() {
                        splits.push((format!("adapt_{n}.jsonl"), n, base + 1_000 * j as u64));
                    }
                    splits.push(("val.jsonl".into(), val.min(test), base + 50_000));
                } else {
                    splits.push(("train.jsonl".into(), train, base));
                    splits.push(("val.jsonl".into(), val, base + 50_000));
                }
                splits.push(("test.jsonl".into(), test, base + 70_000));
                for (file, n, seed) in splits {
                    let dialogs = generate_corpus(&spec, &kb, &cfg.complexity, n, seed)?;
                    let stats = corpus_stats(&dialogs);
                    write_corpus(&dir.join(&file), &dialogs)?;
                    println!(
                        "{name}/{file}: {} dialogs, {:.1} turns, {:.1} tokens per utterance",
                        stats.dialogs, stats.mean_turns, stats.mean_utterance_len
                    );
                }
            }
            std::fs::write(
                out.join("manifest.json"),
                serde_json::to_string_pretty(&json!({"config_hash": hash, "config": cfg}))?,
            )?;
            Ok(())
        }

        Command::Train { config, data, mode, out } => {
            let cfg = config.load()?;
            let mode: TrainMode = mode.parse()?;
            let tcfg = TrainConfig { ..cfg.train.clone() };
            let mut per_domain_dialogs = Vec::new();
            let mut val_dialogs = Vec::new();
            for name in &cfg.source_domains {
                let dir = data.join(name);
                per_domain_dialogs.push(read_corpus(&dir.join("train.jsonl"))?);
                val_dialogs.extend(read_corpus(&dir.join("val.jsonl"))?);
            }
            let specs: Vec<DomainSpec> = cfg
                .source_domains
                .iter()
                .map(|n| spec_or_err(n))
                .collect::<Result<_, _>>()?;
            let mut vocab = Vocab::new();
            for d in &per_domain_dialogs {
                vocab.extend_from_dialogs(d, &specs)?;
            }
            vocab.extend_from_dialogs(&val_dialogs, &specs)?;
            let val = build_examples(&val_dialogs, &specs, &vocab)?;
            let params = init_params(&cfg.model, vocab.len(), tcfg.seed);

            let result = match mode {
                TrainMode::Maml => {
                    let mut per_domain = Vec::new();
                    for d in &per_domain_dialogs {
                        per_domain.push(build_examples(d, &specs, &vocab)?);
                    }
                    maml_train(params, &cfg.model, &vocab, &per_domain, &val, &tcfg)?
                }
                TrainMode::Transfer => {
                    let mut pooled = Vec::new();
                    for d in &per_domain_dialogs {
                        pooled.extend(build_examples(d, &specs, &vocab)?);
                    }
                    transfer_train(params, &cfg.model, &vocab, &pooled, &val, &tcfg)?
                }
            };
            save_model(
                &out,
                &result.params,
                &cfg.model,
                &vocab,
                json!({
                    "mode": mode,
                    "config_hash": config_hash(&cfg),
                    "best_val_loss": result.best_val,
                    "epochs": result.epochs,
                    "val_history": result.val_history,
                }),
            )?;
            println!(
                "trained {} epochs, best validation loss {:.4}",
                result.epochs, result.best_val
            );
            if result.diverged {
                return Err(Error::Divergence(format!(
                    "non-finite loss at epoch {}; saved the last finite snapshot",
                    result.epochs
                )));
            }
            Ok(())
        }

        Command::Adapt { config, model, data, val, out } => {
            let cfg = config.load()?;
            let (params, mcfg, mut vocab) = load_model(&model)?;
            let adapt_dialogs = read_corpus(&data)?;
            let val_dialogs = match &val {
                Some(p) => read_corpus(p)?,
                None => adapt_dialogs.clone(),
            };
            let specs = specs_for_dialogs(
                &adapt_dialogs
                    .iter()
                    .chain(&val_dialogs)
                    .cloned()
                    .collect::<Vec<_>>(),
            )?;
            let old_size = vocab.len();
            for spec in &specs {
                for tok in token_inventory(spec) {
                    vocab.add(&tok);
                }
            }
            vocab.extend_from_dialogs(adapt_dialogs.iter().chain(&val_dialogs), &specs)?;
            let mut params = params;
            grow_vocab(&mut params, &mcfg, old_size, vocab.len(), cfg.train.seed ^ 0xabcd);

            let train_ex = build_examples(&adapt_dialogs, &specs, &vocab)?;
            let val_ex = build_examples(&val_dialogs, &specs, &vocab)?;
            let tcfg = cfg.train.clone();
            let result = adapt(params, &mcfg, &vocab, &train_ex, &val_ex, &tcfg)?;
            save_model(
                &out,
                &result.params,
                &mcfg,
                &vocab,
                json!({
                    "config_hash": config_hash(&cfg),
                    "adapt_epochs": result.epochs_used,
                    "val_history": result.val_history,
                }),
            )?;
            println!("adapted in {} epochs", result.epochs_used);
            Ok(())
        }

        Command::Eval { config: _, model, data, kb, rollout } => {
            let (params, mcfg, vocab) = load_model(&model)?;
            let dialogs = read_corpus(&data)?;
            if dialogs.is_empty() {
                return Err(Error::Data("empty evaluation corpus".into()));
            }
            let specs = specs_for_dialogs(&dialogs)?;
            if specs.len() != 1 {
                return Err(Error::Data(
                    "evaluation corpus must contain a single domain".into(),
                ));
            }
            let kb: KnowledgeBase = serde_json::from_str(&std::fs::read_to_string(&kb)?)?;
            let report = evaluate_model(
                &params, &mcfg, &vocab, &specs[0], &kb, &dialogs, !rollout,
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }

        Command::Decode { config: _, model, kb, domain, user, prev_belief, prev_response } => {
            let (params, mcfg, vocab) = load_model(&model)?;
            let spec = spec_or_err(&domain)?;
            let kb: KnowledgeBase = serde_json::from_str(&std::fs::read_to_string(&kb)?)?;
            let mut source = metadialog::corpus::tokenize(&prev_belief);
            source.push(metadialog::corpus::EOS_B.to_string());
            source.extend(metadialog::corpus::tokenize(&prev_response));
            source.push(metadialog::corpus::EOS_R.to_string());
            source.extend(metadialog::corpus::tokenize(&user));
            source.push(metadialog::corpus::EOS_U.to_string());
            let turn = greedy_decode_turn(&params, &mcfg, &vocab, &spec, &kb, &source)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({
                    "belief_span": turn.belief_tokens.join(" "),
                    "belief": turn.belief,
                    "match": turn.match_ind,
                    "response": turn.response_tokens.join(" "),
                }))?
            );
            Ok(())
        }

        Command::Experiment { config, mode, seeds, out } => {
            let mut cfg = config.load()?;
            if !seeds.is_empty() {
                cfg.seeds = seeds;
            }
            let modes: Vec<TrainMode> = match mode.as_str() {
                "both" => vec![TrainMode::Maml, TrainMode::Transfer],
                other => vec![other.parse()?],
            };
            let mut reports = Vec::new();
            for m in modes {
                let report = run_experiment(&cfg, m)?;
                println!(
                    "{:?}: bleu {:.3} ± {:.3}, entity f1 {:.3} ± {:.3}, adapt epochs {:.1} ± {:.1} ({} seeds, {} failed)",
                    report.mode,
                    report.bleu.mean,
                    report.bleu.std,
                    report.entity_f1.mean,
                    report.entity_f1.std,
                    report.adapt_epochs.mean,
                    report.adapt_epochs.std,
                    report.outcomes.len(),
                    report.failures.len(),
                );
                reports.push(report);
            }
            let payload = json!({
                "config_hash": config_hash(&cfg),
                "config": cfg,
                "reports": reports,
            });
            std::fs::write(&out, serde_json::to_string_pretty(&payload)?)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}
