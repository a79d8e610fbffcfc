//! End-to-end experiment harness: per-seed data generation, source-domain
//! training (meta or pooled), target-domain adaptation, and test-set
//! scoring, aggregated over seeds.

use serde::{Deserialize, Serialize};

use crate::corpus::{build_examples, ContextExample, Vocab};
use crate::datagen::{generate_corpus, token_inventory, ComplexityConfig, Dialog};
use crate::error::Error;
use crate::eval::{evaluate_model, mean_std, EvalReport};
use crate::model::{grow_vocab, init_params, ModelConfig};
use crate::schema::{DomainSpec, KnowledgeBase};
use crate::train::{adapt, maml_train, transfer_train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Maml,
    Transfer,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "maml" => Ok(TrainMode::Maml),
            "transfer" => Ok(TrainMode::Transfer),
            other => Err(Error::Config(format!(
                "unknown training mode {other:?}; expected maml or transfer"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub source_domains: Vec<String>,
    pub target_domain: String,
    pub source_train_dialogs: usize,
    pub source_val_dialogs: usize,
    pub target_adapt_dialogs: usize,
    pub target_val_dialogs: usize,
    pub target_test_dialogs: usize,
    pub kb_size: usize,
    pub complexity: ComplexityConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Build each turn's context from gold history instead of the model's
    /// own rollout.
    pub oracle_context: bool,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            source_domains: vec!["restaurant".into(), "weather".into(), "bus".into()],
            target_domain: "movie".into(),
            source_train_dialogs: 300,
            source_val_dialogs: 40,
            target_adapt_dialogs: 9,
            target_val_dialogs: 9,
            target_test_dialogs: 150,
            kb_size: 100,
            complexity: ComplexityConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            oracle_context: true,
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.source_domains.is_empty() {
            return Err(Error::Config("need at least one source domain".into()));
        }
        if self.source_domains.contains(&self.target_domain) {
            return Err(Error::Config(format!(
                "target domain {:?} must not be a source domain",
                self.target_domain
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("need at least one seed".into()));
        }
        self.complexity.validate()?;
        self.train.validate()
    }
}

fn resolve_domain(name: &str) -> Result<DomainSpec, Error> {
    crate::domains::builtin(name).ok_or_else(|| {
        Error::Config(format!(
            "unknown domain {name:?}; built-ins are {:?}",
            crate::domains::BUILTIN_NAMES
        ))
    })
}

fn corpus_seed(seed: u64, domain_idx: usize, split: usize) -> u64 {
    // disjoint dialog seed ranges per (experiment seed, domain, split)
    seed.wrapping_mul(1_000_000)
        .wrapping_add(domain_idx as u64 * 100_000)
        .wrapping_add(split as u64 * 10_000)
}

struct DomainData {
    spec: DomainSpec,
    train: Vec<Dialog>,
    val: Vec<Dialog>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub report: EvalReport,
    pub adapt_epochs: usize,
    pub source_val_loss: f64,
    pub diverged: bool,
}

/// Full pipeline for one seed. Both training modes share the data,
/// vocabulary, and initial parameters for the seed, so their comparison is
/// paired.
pub fn run_seed(cfg: &ExperimentConfig, mode: TrainMode, seed: u64) -> Result<SeedOutcome, Error> {
    cfg.validate()?;
    let target_spec = resolve_domain(&cfg.target_domain)?;
    let mut sources = Vec::new();
    for (i, name) in cfg.source_domains.iter().enumerate() {
        let spec = resolve_domain(name)?;
        let kb = KnowledgeBase::generate(&spec, cfg.kb_size, corpus_seed(seed, i, 9));
        let train = generate_corpus(
            &spec,
            &kb,
            &cfg.complexity,
            cfg.source_train_dialogs,
            corpus_seed(seed, i, 0),
        )?;
        let val = generate_corpus(
            &spec,
            &kb,
            &cfg.complexity,
            cfg.source_val_dialogs,
            corpus_seed(seed, i, 1),
        )?;
        sources.push(DomainData { spec, train, val });
    }

    let specs: Vec<DomainSpec> = sources.iter().map(|d| d.spec.clone()).collect();
    let mut vocab = Vocab::new();
    for d in &sources {
        vocab.extend_from_dialogs(d.train.iter().chain(&d.val), &specs)?;
    }

    let params = init_params(&cfg.model, vocab.len(), seed);
    let tcfg = TrainConfig { seed, ..cfg.train.clone() };

    let mut val_examples = Vec::new();
    for d in &sources {
        val_examples.extend(build_examples(&d.val, &specs, &vocab)?);
    }

    let trained = match mode {
        TrainMode::Maml => {
            let mut per_domain: Vec<Vec<ContextExample>> = Vec::new();
            for d in &sources {
                per_domain.push(build_examples(&d.train, &specs, &vocab)?);
            }
            maml_train(params, &cfg.model, &vocab, &per_domain, &val_examples, &tcfg)?
        }
        TrainMode::Transfer => {
            let mut pooled = Vec::new();
            for d in &sources {
                pooled.extend(build_examples(&d.train, &specs, &vocab)?);
            }
            transfer_train(params, &cfg.model, &vocab, &pooled, &val_examples, &tcfg)?
        }
    };

    // target domain: a few adaptation dialogs plus the spec's full token
    // inventory, so the grown vocabulary covers values the small
    // adaptation set happens to miss
    let tkb = KnowledgeBase::generate(&target_spec, cfg.kb_size, corpus_seed(seed, 50, 9));
    let t_adapt = generate_corpus(
        &target_spec,
        &tkb,
        &cfg.complexity,
        cfg.target_adapt_dialogs,
        corpus_seed(seed, 50, 0),
    )?;
    let t_val = generate_corpus(
        &target_spec,
        &tkb,
        &cfg.complexity,
        cfg.target_val_dialogs,
        corpus_seed(seed, 50, 1),
    )?;
    let t_test = generate_corpus(
        &target_spec,
        &tkb,
        &cfg.complexity,
        cfg.target_test_dialogs,
        corpus_seed(seed, 50, 2),
    )?;

    let old_size = vocab.len();
    let mut vocab = vocab;
    for tok in token_inventory(&target_spec) {
        vocab.add(&tok);
    }
    let all_specs: Vec<DomainSpec> = specs
        .iter()
        .cloned()
        .chain(std::iter::once(target_spec.clone()))
        .collect();
    vocab.extend_from_dialogs(t_adapt.iter().chain(&t_val), &all_specs)?;

    let mut params = trained.params;
    grow_vocab(&mut params, &cfg.model, old_size, vocab.len(), seed ^ 0xabcd);

    let adapt_examples = build_examples(&t_adapt, &all_specs, &vocab)?;
    let adapt_val = build_examples(&t_val, &all_specs, &vocab)?;
    let adapted = adapt(params, &cfg.model, &vocab, &adapt_examples, &adapt_val, &tcfg)?;

    let report = evaluate_model(
        &adapted.params,
        &cfg.model,
        &vocab,
        &target_spec,
        &tkb,
        &t_test,
        cfg.oracle_context,
    )?;

    Ok(SeedOutcome {
        seed,
        report,
        adapt_epochs: adapted.epochs_used,
        source_val_loss: trained.best_val,
        diverged: trained.diverged,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub mode: TrainMode,
    pub outcomes: Vec<SeedOutcome>,
    /// Seeds whose pipeline failed outright, with the error text.
    pub failures: Vec<(u64, String)>,
    pub bleu: MeanStd,
    pub entity_f1: MeanStd,
    pub adapt_epochs: MeanStd,
}

/// Runs every configured seed and aggregates. Individual seed failures are
/// recorded rather than aborting the whole experiment, but at least one
/// seed must succeed.
pub fn run_experiment(cfg: &ExperimentConfig, mode: TrainMode) -> Result<ExperimentReport, Error> {
    cfg.validate()?;
    let results = crate::par::map_collect(&cfg.seeds, |_, &seed| {
        (seed, run_seed(cfg, mode, seed))
    });
    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(o) => outcomes.push(o),
            Err(e) => failures.push((seed, e.to_string())),
        }
    }
    if outcomes.is_empty() {
        return Err(Error::Data(format!(
            "all {} seeds failed; first failure: {}",
            cfg.seeds.len(),
            failures[0].1
        )));
    }
    let agg = |f: &dyn Fn(&SeedOutcome) -> f64| -> MeanStd {
        let vals: Vec<f64> = outcomes.iter().map(f).collect();
        let (mean, std) = mean_std(&vals);
        MeanStd { mean, std }
    };
    Ok(ExperimentReport {
        mode,
        bleu: agg(&|o| o.report.bleu),
        entity_f1: agg(&|o| o.report.entity_f1),
        adapt_epochs: agg(&|o| o.adapt_epochs as f64),
        outcomes,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn target_overlapping_sources_is_rejected() {
        let cfg = ExperimentConfig {
            target_domain: "restaurant".into(),
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_domain_is_a_config_error() {
        let cfg = ExperimentConfig {
            target_domain: "zoo".into(),
            seeds: vec![1],
            ..ExperimentConfig::default()
        };
        assert!(matches!(run_seed(&cfg, TrainMode::Maml, 1), Err(Error::Config(_))));
    }

    #[test]
    fn mode_parses_from_str() {
        assert_eq!("maml".parse::<TrainMode>().unwrap(), TrainMode::Maml);
        assert_eq!("transfer".parse::<TrainMode>().unwrap(), TrainMode::Transfer);
        assert!("other".parse::<TrainMode>().is_err());
    }

    // one micro seed end to end; the full-size run lives in the
    // acceptance suite
    #[test]
    fn micro_pipeline_completes_for_both_modes() {
        let cfg = ExperimentConfig {
            source_domains: vec!["restaurant".into(), "weather".into()],
            target_domain: "movie".into(),
            source_train_dialogs: 4,
            source_val_dialogs: 2,
            target_adapt_dialogs: 2,
            target_val_dialogs: 2,
            target_test_dialogs: 2,
            kb_size: 20,
            complexity: ComplexityConfig::none(),
            model: ModelConfig {
                embed_dim: 4,
                hidden: 4,
                dropout: 0.0,
                belief_max_len: 6,
                response_max_len: 8,
                ..ModelConfig::default()
            },
            train: TrainConfig { max_epochs: 1, ..TrainConfig::default() },
            oracle_context: true,
            seeds: vec![1],
        };
        for mode in [TrainMode::Maml, TrainMode::Transfer] {
            let report = run_experiment(&cfg, mode).unwrap();
            assert_eq!(report.outcomes.len(), 1);
            assert!(report.failures.is_empty());
            assert!((0.0..=1.0).contains(&report.bleu.mean));
            assert!((0.0..=1.0).contains(&report.entity_f1.mean));
        }
    }
}
