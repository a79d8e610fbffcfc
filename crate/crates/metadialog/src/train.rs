//! Training loops: first-order meta-learning across source domains, the
//! pooled-data transfer baseline, and few-dialog target adaptation.
//!
//! The meta objective treats each source domain as a task. One outer step
//! draws a batch per domain, takes `inner_steps` functional SGD steps
//!
//! ```text
//! M'_k = M - α ∇ L_k(M)
//! ```
//!
//! and then backpropagates Σ_k L_k(M'_k), evaluated on the same batch with
//! the same dropout masks, treating ∇_{M'_k} as the gradient for M
//! (first-order approximation). The outer update is Adam.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, ParamSet};
use crate::corpus::{make_batches, ContextExample, Vocab};
use crate::error::Error;
use crate::model::{batch_backward, batch_loss, Mode, ModelConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Inner (task adaptation) SGD learning rate α.
    pub inner_lr: f64,
    /// Outer (meta / baseline) Adam learning rate β.
    pub outer_lr: f64,
    pub inner_steps: usize,
    /// Reserved; only the first-order approximation is implemented.
    pub second_order: bool,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping. Each miss
    /// also halves the outer learning rate.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            inner_lr: 0.003,
            outer_lr: 0.003,
            inner_steps: 1,
            second_order: false,
            max_epochs: 30,
            patience: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.second_order {
            return Err(Error::Config(
                "second-order meta-gradients are not implemented; set second_order = false"
                    .into(),
            ));
        }
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps must be at least 1".into()));
        }
        if self.inner_lr < 0.0 || self.outer_lr < 0.0 {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub params: ParamSet,
    pub best_val: f64,
    /// Epochs actually run (including any cut short by early stopping).
    pub epochs: usize,
    pub val_history: Vec<f64>,
    /// True when a non-finite loss appeared; `params` then holds the last
    /// finite snapshot.
    pub diverged: bool,
}

/// One first-order meta step over a set of tasks. Each task closure runs a
/// forward/backward pass for one fixed batch, accumulating gradients into
/// the given parameter set and returning the loss; it must be repeatable
/// (same batch, same dropout masks). Meta-gradients accumulate into
/// `params`'s gradient buffers; the caller applies the optimizer. Returns
/// the summed post-adaptation loss.
pub fn fo_maml_step<T>(
    params: &mut ParamSet,
    inner_lr: f64,
    inner_steps: usize,
    tasks: &mut [T],
) -> f64
where
    T: FnMut(&mut ParamSet) -> f64,
{
    let mut meta_loss = 0.0;
    for task in tasks.iter_mut() {
        let mut work = params.clone();
        work.zero_grads();
        task(&mut work);
        let mut adapted = work.sgd_step(inner_lr);
        for _ in 1..inner_steps {
            adapted.zero_grads();
            task(&mut adapted);
            adapted = adapted.sgd_step(inner_lr);
        }
        adapted.zero_grads();
        meta_loss += task(&mut adapted);
        params.add_grads_from(&adapted);
    }
    meta_loss
}

fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Meta-trains across source domains. `train` holds one example list per
/// domain; an epoch consumes every domain's batches once (shorter domains
/// wrap around). Validation uses the pooled `val` examples without dropout.
pub fn maml_train(
    params: ParamSet,
    mcfg: &ModelConfig,
    vocab: &Vocab,
    train: &[Vec<ContextExample>],
    val: &[ContextExample],
    tcfg: &TrainConfig,
) -> Result<TrainResult, Error> {
    tcfg.validate()?;
    if train.is_empty() || train.iter().any(Vec::is_empty) {
        return Err(Error::Data("every source domain needs training examples".into()));
    }
    run_training(params, mcfg, vocab, val, tcfg, |params, adam, epoch| {
        let per_domain: Vec<_> = train
            .iter()
            .map(|d| make_batches(d, mix_seed(&[tcfg.seed, epoch as u64, 0x6a7c])))
            .collect();
        let steps = per_domain.iter().map(Vec::len).max().unwrap();
        let mut epoch_loss = 0.0;
        for step in 0..steps {
            let mut tasks: Vec<Box<dyn FnMut(&mut ParamSet) -> f64>> = Vec::new();
            for (k, batches) in per_domain.iter().enumerate() {
                let batch = &batches[step % batches.len()];
                let seed = mix_seed(&[tcfg.seed, epoch as u64, step as u64, k as u64]);
                tasks.push(Box::new(move |p: &mut ParamSet| {
                    batch_backward(p, mcfg, vocab, &batch.examples, Mode::Train {
                        dropout_seed: seed,
                    })
                }));
            }
            let meta_loss =
                fo_maml_step(params, tcfg.inner_lr, tcfg.inner_steps, &mut tasks);
            if !meta_loss.is_finite() {
                return None;
            }
            adam.step(params);
            epoch_loss += meta_loss;
        }
        Some(epoch_loss / steps as f64)
    })
}

/// Pooled-data baseline: plain minibatch Adam over all source domains
/// mixed together, same early stopping as the meta loop.
pub fn transfer_train(
    params: ParamSet,
    mcfg: &ModelConfig,
    vocab: &Vocab,
    train: &[ContextExample],
    val: &[ContextExample],
    tcfg: &TrainConfig,
) -> Result<TrainResult, Error> {
    tcfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    run_training(params, mcfg, vocab, val, tcfg, |params, adam, epoch| {
        let batches = make_batches(train, mix_seed(&[tcfg.seed, epoch as u64, 0x7f31]));
        let mut epoch_loss = 0.0;
        for (step, batch) in batches.iter().enumerate() {
            let seed = mix_seed(&[tcfg.seed, epoch as u64, step as u64]);
            let loss = batch_backward(params, mcfg, vocab, &batch.examples, Mode::Train {
                dropout_seed: seed,
            });
            if !loss.is_finite() {
                return None;
            }
            adam.step(params);
            epoch_loss += loss;
        }
        Some(epoch_loss / batches.len() as f64)
    })
}

/// Shared epoch loop: runs `epoch_fn` (which returns None on divergence),
/// validates, tracks the best snapshot, halves the learning rate on
/// plateaus, and stops after `patience` misses.
fn run_training<F>(
    mut params: ParamSet,
    mcfg: &ModelConfig,
    vocab: &Vocab,
    val: &[ContextExample],
    tcfg: &TrainConfig,
    mut epoch_fn: F,
) -> Result<TrainResult, Error>
where
    F: FnMut(&mut ParamSet, &mut AdamState, usize) -> Option<f64>,
{
    let mut adam = AdamState::new(&params, tcfg.outer_lr);
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut misses = 0usize;
    let mut history = Vec::new();
    let mut epochs = 0usize;

    for epoch in 0..tcfg.max_epochs {
        epochs = epoch + 1;
        let finite = epoch_fn(&mut params, &mut adam, epoch).is_some() && params.all_finite();
        if !finite {
            return Ok(TrainResult {
                params: if best_val.is_finite() { best } else { params },
                best_val,
                epochs,
                val_history: history,
                diverged: true,
            });
        }
        let v = batch_loss(&params, mcfg, vocab, val, Mode::Eval);
        history.push(v);
        if v < best_val {
            best_val = v;
            best = params.clone();
            misses = 0;
        } else {
            misses += 1;
            adam.learning_rate *= 0.5;
            if misses > tcfg.patience {
                break;
            }
        }
    }

    Ok(TrainResult {
        params: best,
        best_val,
        epochs,
        val_history: history,
        diverged: false,
    })
}

#[derive(Clone, Debug)]
pub struct AdaptResult {
    pub params: ParamSet,
    /// Index of the best validation point; 0 means the unadapted model was
    /// never improved on.
    pub epochs_used: usize,
    pub val_history: Vec<f64>,
}

/// Fine-tunes on a handful of target-domain dialogs. The validation loss
/// is measured before training and after every epoch; the returned
/// parameters and epoch count correspond to the best point.
pub fn adapt(
    params: ParamSet,
    mcfg: &ModelConfig,
    vocab: &Vocab,
    train: &[ContextExample],
    val: &[ContextExample],
    tcfg: &TrainConfig,
) -> Result<AdaptResult, Error> {
    tcfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no adaptation examples".into()));
    }
    let mut params = params;
    let mut adam = AdamState::new(&params, tcfg.outer_lr);
    let mut history = vec![batch_loss(&params, mcfg, vocab, val, Mode::Eval)];
    let mut best = params.clone();
    let mut best_idx = 0usize;
    let mut misses = 0usize;

    for epoch in 1..=tcfg.max_epochs {
        let batches = make_batches(train, mix_seed(&[tcfg.seed, epoch as u64, 0x11]));
        for (step, batch) in batches.iter().enumerate() {
            let seed = mix_seed(&[tcfg.seed, epoch as u64, step as u64, 0x22]);
            let loss = batch_backward(&mut params, mcfg, vocab, &batch.examples, Mode::Train {
                dropout_seed: seed,
            });
            if !loss.is_finite() {
                return Ok(AdaptResult { params: best, epochs_used: best_idx, val_history: history });
            }
            adam.step(&mut params);
        }
        let v = batch_loss(&params, mcfg, vocab, val, Mode::Eval);
        history.push(v);
        if v < history[best_idx] {
            best_idx = epoch;
            best = params.clone();
            misses = 0;
        } else {
            misses += 1;
            if misses > tcfg.patience {
                break;
            }
        }
    }

    Ok(AdaptResult { params: best, epochs_used: best_idx, val_history: history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, Tensor};
    use crate::corpus::build_examples;
    use crate::datagen::{generate_corpus, ComplexityConfig};
    use crate::domains::builtin;
    use crate::model::init_params;
    use crate::schema::KnowledgeBase;

    // L(w) = w^2 at w = 1, α = 0.1: the inner step moves to w' = 0.8 and
    // the first-order meta-gradient is dL(w')/dw' = 1.6 exactly.
    #[test]
    fn scalar_meta_gradient_is_exact() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::scalar(1.0));
        let mut tasks = vec![|p: &mut ParamSet| {
            let mut g = Graph::new();
            let w = g.param(p, "w");
            let loss = g.mul(w, w);
            let v = g.value(loss).data[0];
            g.backward(loss, p);
            v
        }];
        let meta_loss = fo_maml_step(&mut params, 0.1, 1, &mut tasks);
        assert_eq!(params.get("w").grad[0], 1.6);
        assert_eq!(meta_loss, 0.8 * 0.8);
        // base parameters are untouched by the inner step
        assert_eq!(params.get("w").value.data[0], 1.0);
    }

    #[test]
    fn zero_inner_lr_collapses_to_pooled_gradient() {
        let spec = builtin("restaurant").unwrap();
        let kb = KnowledgeBase::generate(&spec, 20, 3);
        let dialogs = generate_corpus(&spec, &kb, &ComplexityConfig::none(), 4, 60).unwrap();
        let specs = vec![spec];
        let vocab = Vocab::from_dialogs(&dialogs, &specs).unwrap();
        let examples = build_examples(&dialogs, &specs, &vocab).unwrap();
        let mcfg = ModelConfig { embed_dim: 4, hidden: 4, ..ModelConfig::default() };
        let params = init_params(&mcfg, vocab.len(), 5);

        let batches = [&examples[..3], &examples[3..6]];
        let mut meta = params.clone();
        meta.zero_grads();
        let mut tasks: Vec<Box<dyn FnMut(&mut ParamSet) -> f64>> = batches
            .iter()
            .enumerate()
            .map(|(k, b)| {
                let vocab = &vocab;
                let mcfg = &mcfg;
                Box::new(move |p: &mut ParamSet| {
                    batch_backward(p, mcfg, vocab, b, Mode::Train { dropout_seed: k as u64 })
                }) as Box<dyn FnMut(&mut ParamSet) -> f64>
            })
            .collect();
        fo_maml_step(&mut meta, 0.0, 1, &mut tasks);

        let mut pooled = params.clone();
        pooled.zero_grads();
        for (k, b) in batches.iter().enumerate() {
            batch_backward(&mut pooled, &mcfg, &vocab, b, Mode::Train { dropout_seed: k as u64 });
        }

        for (name, p) in meta.iter() {
            let q = pooled.get(name);
            for (a, b) in p.grad.iter().zip(&q.grad) {
                assert!((a - b).abs() <= 1e-7, "collapse mismatch in {name}: {a} vs {b}");
            }
        }
    }

    fn tiny_domain(name: &str, n: usize, seed: u64) -> (Vec<ContextExample>, Vocab) {
        let spec = builtin(name).unwrap();
        let kb = KnowledgeBase::generate(&spec, 20, seed);
        let dialogs = generate_corpus(&spec, &kb, &ComplexityConfig::none(), n, seed * 100).unwrap();
        let specs = vec![spec];
        let vocab = Vocab::from_dialogs(&dialogs, &specs).unwrap();
        let examples = build_examples(&dialogs, &specs, &vocab).unwrap();
        (examples, vocab)
    }

    #[test]
    fn maml_train_runs_and_is_deterministic() {
        let (examples, vocab) = tiny_domain("restaurant", 2, 3);
        let mcfg = ModelConfig { embed_dim: 4, hidden: 4, ..ModelConfig::default() };
        let tcfg = TrainConfig { max_epochs: 2, ..TrainConfig::default() };
        let split = examples.len() / 2;
        let domains = vec![examples[..split].to_vec(), examples[split..].to_vec()];
        let val = examples[..4].to_vec();

        let run = || {
            let params = init_params(&mcfg, vocab.len(), 9);
            maml_train(params, &mcfg, &vocab, &domains, &val, &tcfg).unwrap()
        };
        let a = run();
        let b = run();
        assert!(!a.diverged);
        assert_eq!(a.epochs, 2);
        assert_eq!(a.val_history, b.val_history);
        assert!(a.best_val.is_finite());
    }

    #[test]
    fn transfer_train_reduces_validation_loss() {
        let (examples, vocab) = tiny_domain("restaurant", 3, 7);
        let mcfg = ModelConfig { embed_dim: 8, hidden: 8, dropout: 0.0, ..ModelConfig::default() };
        let tcfg = TrainConfig { max_epochs: 4, outer_lr: 0.01, ..TrainConfig::default() };
        let params = init_params(&mcfg, vocab.len(), 2);
        let before = batch_loss(&params, &mcfg, &vocab, &examples, Mode::Eval);
        let out = transfer_train(params, &mcfg, &vocab, &examples, &examples, &tcfg).unwrap();
        assert!(!out.diverged);
        assert!(out.best_val < before, "val loss {before} -> {}", out.best_val);
    }

    #[test]
    fn adapt_with_zero_lr_is_a_no_op() {
        let (examples, vocab) = tiny_domain("restaurant", 2, 11);
        let mcfg = ModelConfig { embed_dim: 4, hidden: 4, ..ModelConfig::default() };
        let tcfg = TrainConfig { outer_lr: 0.0, max_epochs: 3, ..TrainConfig::default() };
        let params = init_params(&mcfg, vocab.len(), 4);
        let before = params.get("emb").value.clone();
        let out = adapt(params, &mcfg, &vocab, &examples, &examples, &tcfg).unwrap();
        assert_eq!(out.epochs_used, 0);
        assert_eq!(out.params.get("emb").value, before);
        assert!(out.val_history.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12));
    }

    #[test]
    fn adapt_improves_and_reports_epochs() {
        let (examples, vocab) = tiny_domain("restaurant", 2, 13);
        let mcfg = ModelConfig { embed_dim: 8, hidden: 8, dropout: 0.0, ..ModelConfig::default() };
        let tcfg = TrainConfig { outer_lr: 0.01, max_epochs: 3, ..TrainConfig::default() };
        let params = init_params(&mcfg, vocab.len(), 4);
        let out = adapt(params, &mcfg, &vocab, &examples[..6], &examples[..6], &tcfg).unwrap();
        assert!(out.epochs_used >= 1);
        let last_best = out.val_history[out.epochs_used];
        assert!(last_best < out.val_history[0]);
    }

    #[test]
    fn second_order_flag_is_rejected() {
        let tcfg = TrainConfig { second_order: true, ..TrainConfig::default() };
        assert!(matches!(tcfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(TrainConfig { inner_steps: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { inner_lr: -0.1, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { max_epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
