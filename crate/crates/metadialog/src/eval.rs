//! Response quality metrics and corpus-level model evaluation.
//!
//! BLEU-4 is corpus-level with add-one smoothing on the higher-order
//! precisions and the standard brevity penalty. Entity F1 is micro-averaged
//! over turns, comparing the slot values and requested slots the model's
//! belief span expresses against the gold annotation.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::corpus::{EOS_B, EOS_R, EOS_U};
use crate::datagen::Dialog;
use crate::error::Error;
use crate::model::{greedy_decode_turn, ModelConfig};
use crate::schema::{BeliefState, DomainSpec, KnowledgeBase};

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4. Precisions for n = 2..4 are add-one smoothed; unigram
/// precision is exact. Returns 0.0 when there is nothing to score.
pub fn bleu(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> f64 {
    assert_eq!(
        hypotheses.len(),
        references.len(),
        "bleu needs one reference per hypothesis"
    );
    if hypotheses.is_empty() {
        return 0.0;
    }
    let hyp_len: usize = hypotheses.iter().map(Vec::len).sum();
    let ref_len: usize = references.iter().map(Vec::len).sum();
    if hyp_len == 0 {
        return 0.0;
    }

    let mut log_sum = 0.0;
    for n in 1..=4 {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (h, r) in hypotheses.iter().zip(references) {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (gram, &cnt) in &hc {
                matched += cnt.min(rc.get(gram).copied().unwrap_or(0));
                total += cnt;
            }
        }
        let (mut num, mut den) = (matched as f64, total as f64);
        if n > 1 {
            num += 1.0;
            den += 1.0;
        }
        if num == 0.0 || den == 0.0 {
            return 0.0;
        }
        log_sum += (num / den).ln();
    }

    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    bp * (log_sum / 4.0).exp()
}

/// The entities a belief state expresses: informed slot values plus
/// requested slot names.
pub fn belief_entities(b: &BeliefState) -> BTreeSet<String> {
    let mut out: BTreeSet<String> = b.inform.values().cloned().collect();
    out.extend(b.request.iter().cloned());
    out
}

/// Micro-averaged F1 over (predicted, gold) entity sets. Turns where both
/// sides are empty contribute nothing; a corpus of only such turns scores
/// a perfect 1.0.
pub fn entity_f1(pairs: &[(BTreeSet<String>, BTreeSet<String>)]) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fne = 0usize;
    for (pred, gold) in pairs {
        tp += pred.intersection(gold).count();
        fp += pred.difference(gold).count();
        fne += gold.difference(pred).count();
    }
    if tp + fp + fne == 0 {
        return 1.0;
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fne == 0 { 0.0 } else { tp as f64 / (tp + fne) as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub entity_f1: f64,
    pub turns: usize,
}

/// Greedy-decodes every turn of every dialog and scores the responses.
/// With `oracle_context` each turn's context is the gold previous belief
/// span and response; otherwise the model rolls out its own.
pub fn evaluate_model(
    params: &ParamSet,
    cfg: &ModelConfig,
    vocab: &crate::corpus::Vocab,
    spec: &DomainSpec,
    kb: &KnowledgeBase,
    dialogs: &[Dialog],
    oracle_context: bool,
) -> Result<EvalReport, Error> {
    type PerDialog = Result<(Vec<(Vec<String>, Vec<String>)>, Vec<(BTreeSet<String>, BTreeSet<String>)>), Error>;
    let per_dialog: Vec<PerDialog> = crate::par::map_collect(dialogs, |_, d| {
        let mut sentences = Vec::new();
        let mut entities = Vec::new();
        let mut prev_belief: Vec<String> = vec![EOS_B.to_string()];
        let mut prev_resp: Vec<String> = Vec::new();
        for turn in &d.turns {
            let mut source = prev_belief.clone();
            source.extend(prev_resp.iter().cloned());
            source.push(EOS_R.to_string());
            source.extend(turn.user.iter().cloned());
            source.push(EOS_U.to_string());

            let decoded = greedy_decode_turn(params, cfg, vocab, spec, kb, &source)?;
            sentences.push((decoded.response_tokens.clone(), turn.sys_delex.clone()));
            entities.push((belief_entities(&decoded.belief), belief_entities(&turn.belief)));

            if oracle_context {
                prev_belief = crate::schema::serialize_belief(&turn.belief, spec);
                prev_resp = turn.sys_delex.clone();
            } else {
                prev_belief = decoded.belief_tokens.clone();
                prev_belief.push(EOS_B.to_string());
                prev_resp = decoded.response_tokens.clone();
            }
        }
        Ok((sentences, entities))
    });

    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    let mut pairs = Vec::new();
    for r in per_dialog {
        let (sentences, entities) = r?;
        for (h, rf) in sentences {
            hyps.push(h);
            refs.push(rf);
        }
        pairs.extend(entities);
    }
    Ok(EvalReport {
        bleu: bleu(&hyps, &refs),
        entity_f1: entity_f1(&pairs),
        turns: hyps.len(),
    })
}

/// Sample mean and (population) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}
