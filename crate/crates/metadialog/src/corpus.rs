//! Vocabulary, embedding ingestion, and batch assembly.
//!
//! Turns annotated dialogs into model-ready examples: every turn becomes a
//! source sequence `B_{t-1} <eos_b> R_{t-1} <eos_r> U_t <eos_u>`, a belief
//! span target ending in `<eos_b>`, and a delexicalized response target
//! ending in `<eos_r>`, plus the turn's knowledge-base match indicator.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Dialog;
use crate::error::Error;
use crate::schema::{DomainSpec, MatchIndicator};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const GO: &str = "<go>";
pub const EOS_U: &str = "<eos_u>";
pub const EOS_B: &str = "<eos_b>";
pub const EOS_R: &str = "<eos_r>";

/// Tokens present in every vocabulary, in fixed id order. `<pad>` is id 0.
pub const RESERVED: &[&str] = &[
    PAD,
    UNK,
    GO,
    EOS_U,
    EOS_B,
    EOS_R,
    "<inf>",
    "<req>",
    "<no_match>",
    "<exact_match>",
    "<multi_match>",
];

/// Append-only token table. Existing ids never change, so a model trained
/// on source domains can be extended with target-domain tokens in place.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab { tokens: Vec::new(), index: HashMap::new() };
        for t in RESERVED {
            v.add(t);
        }
        v
    }

    /// Collects every token appearing in the dialogs (user side, delexicalized
    /// system side, and serialized belief spans).
    pub fn from_dialogs<'a, I: IntoIterator<Item = &'a Dialog>>(
        dialogs: I,
        specs: &[DomainSpec],
    ) -> Result<Self, Error> {
        let mut v = Vocab::new();
        v.extend_from_dialogs(dialogs, specs)?;
        Ok(v)
    }

    /// Adds unseen tokens from more dialogs without disturbing existing ids.
    pub fn extend_from_dialogs<'a, I: IntoIterator<Item = &'a Dialog>>(
        &mut self,
        dialogs: I,
        specs: &[DomainSpec],
    ) -> Result<(), Error> {
        for d in dialogs {
            let spec = spec_for(specs, &d.domain)?;
            for turn in &d.turns {
                for t in &turn.user {
                    self.add(t);
                }
                for t in &turn.sys_delex {
                    self.add(t);
                }
                for t in crate::schema::serialize_belief(&turn.belief, spec) {
                    self.add(&t);
                }
            }
        }
        Ok(())
    }

    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(1)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_or_unk(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Rebuilds the token index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let json = serde_json::to_string_pretty(&self.tokens)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let tokens: Vec<String> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        for (i, t) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*t) {
                return Err(Error::Data(format!(
                    "vocabulary file {} is missing reserved token {t:?} at id {i}",
                    path.display()
                )));
            }
        }
        let mut v = Vocab { tokens, index: HashMap::new() };
        v.reindex();
        Ok(v)
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new()
    }
}

/// Lowercased whitespace tokenization; the generator already emits
/// normalized text so this is only needed at the decode CLI boundary.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.to_lowercase())
        .collect()
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

#[derive(Debug, Clone)]
pub struct EmbeddingReport {
    pub dim: usize,
    pub covered: usize,
    pub vocab_size: usize,
    pub skipped_lines: usize,
}

impl EmbeddingReport {
    pub fn coverage(&self) -> f64 {
        self.covered as f64 / self.vocab_size as f64
    }
}

/// Reads word vectors in the plain-text format `token v1 v2 ... vD`, one
/// entry per line. Returns a `vocab.len() x dim` matrix; tokens without a
/// pretrained vector keep a small random initialization. Lines whose value
/// count disagrees with the declared dimension or fail to parse are skipped
/// and counted, but a token found with the wrong dimension is an error.
pub fn load_embeddings(
    path: &Path,
    vocab: &Vocab,
    dim: usize,
    seed: u64,
) -> Result<(crate::autodiff::Tensor, EmbeddingReport), Error> {
    let file = std::fs::File::open(path)?;
    let mut matrix = crate::autodiff::Tensor::uniform_init(
        vec![vocab.len(), dim],
        &mut ChaCha8Rng::seed_from_u64(seed),
    );
    let mut covered = 0usize;
    let mut skipped = 0usize;
    for line in BufReader::new(file).lines() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else {
            skipped += 1;
            continue;
        };
        let Some(id) = vocab.id(token) else {
            continue;
        };
        let values: Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let values = match values {
            Ok(v) => v,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        if values.len() != dim {
            return Err(Error::Data(format!(
                "embedding for {token:?} has dimension {} but the model expects {dim}",
                values.len()
            )));
        }
        matrix.data[id * dim..(id + 1) * dim].copy_from_slice(&values);
        covered += 1;
    }
    Ok((
        matrix,
        EmbeddingReport { dim, covered, vocab_size: vocab.len(), skipped_lines: skipped },
    ))
}

/// One dialog turn ready for the model: token ids for the context, the
/// belief span target, and the delexicalized response target. All target
/// sequences end with their section marker.
#[derive(Debug, Clone)]
pub struct ContextExample {
    pub source: Vec<usize>,
    /// Raw source tokens, kept for copy-mechanism alignment and decoding.
    pub source_tokens: Vec<String>,
    pub belief_target: Vec<usize>,
    pub response_target: Vec<usize>,
    pub match_ind: MatchIndicator,
    pub domain: String,
}

fn spec_for<'a>(specs: &'a [DomainSpec], domain: &str) -> Result<&'a DomainSpec, Error> {
    specs
        .iter()
        .find(|s| s.name == domain)
        .ok_or_else(|| Error::Data(format!("no domain spec named {domain:?} was provided")))
}

/// Unrolls dialogs into per-turn examples. Turn `t` sees the previous
/// turn's belief span and system response as context; the first turn sees
/// empty sections, markers only.
pub fn build_examples(
    dialogs: &[Dialog],
    specs: &[DomainSpec],
    vocab: &Vocab,
) -> Result<Vec<ContextExample>, Error> {
    let mut out = Vec::new();
    for d in dialogs {
        let spec = spec_for(specs, &d.domain)?;
        // Serialized belief spans already end in <eos_b>; the empty initial
        // context is the bare marker.
        let mut prev_belief: Vec<String> = vec![EOS_B.to_string()];
        let mut prev_resp: Vec<String> = Vec::new();
        for turn in &d.turns {
            let mut source_tokens = Vec::new();
            source_tokens.extend(prev_belief.iter().cloned());
            source_tokens.extend(prev_resp.iter().cloned());
            source_tokens.push(EOS_R.to_string());
            source_tokens.extend(turn.user.iter().cloned());
            source_tokens.push(EOS_U.to_string());

            let belief_tokens = crate::schema::serialize_belief(&turn.belief, spec);
            let belief_target = vocab.encode(&belief_tokens);
            let mut response_target = vocab.encode(&turn.sys_delex);
            response_target.push(vocab.id(EOS_R).unwrap());

            out.push(ContextExample {
                source: vocab.encode(&source_tokens),
                source_tokens,
                belief_target,
                response_target,
                match_ind: turn.match_ind,
                domain: d.domain.clone(),
            });
            prev_belief = belief_tokens;
            prev_resp = turn.sys_delex.clone();
        }
    }
    Ok(out)
}

/// A batch of examples; the model iterates examples individually, so no
/// padding is materialized here, but batches have a fixed maximum size and
/// a deterministic shuffled order.
#[derive(Debug, Clone)]
pub struct Batch {
    pub examples: Vec<ContextExample>,
}

pub const BATCH_SIZE: usize = 32;

pub fn make_batches(examples: &[ContextExample], seed: u64) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks(BATCH_SIZE)
        .map(|chunk| Batch {
            examples: chunk.iter().map(|&i| examples[i].clone()).collect(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, ComplexityConfig};
    use crate::domains::builtin;
    use crate::schema::KnowledgeBase;
    use std::io::Write;

    fn small_corpus() -> Vec<Dialog> {
        let spec = builtin("restaurant").unwrap();
        let kb = KnowledgeBase::generate(&spec, 40, 7);
        generate_corpus(&spec, &kb, &ComplexityConfig::default(), 10, 100).unwrap()
    }

    #[test]
    fn reserved_tokens_have_fixed_ids() {
        let v = Vocab::new();
        assert_eq!(v.id(PAD), Some(0));
        assert_eq!(v.id(UNK), Some(1));
        for (i, t) in RESERVED.iter().enumerate() {
            assert_eq!(v.id(t), Some(i));
            assert_eq!(v.token(i), *t);
        }
    }

    #[test]
    fn vocab_extension_is_id_stable() {
        let dialogs = small_corpus();
        let restaurant = builtin("restaurant").unwrap();
        let mut v = Vocab::from_dialogs(&dialogs, &[restaurant.clone()]).unwrap();
        let before: Vec<(String, usize)> = v
            .tokens()
            .iter()
            .map(|t| (t.clone(), v.id(t).unwrap()))
            .collect();
        let spec = builtin("movie").unwrap();
        let kb = KnowledgeBase::generate(&spec, 40, 9);
        let extra = generate_corpus(&spec, &kb, &ComplexityConfig::default(), 5, 300).unwrap();
        let grown = v.len();
        v.extend_from_dialogs(&extra, &[restaurant, spec]).unwrap();
        for (t, id) in before {
            assert_eq!(v.id(&t), Some(id));
        }
        assert!(v.len() > grown);
    }

    #[test]
    fn vocab_round_trips_through_file() {
        let dialogs = small_corpus();
        let v = Vocab::from_dialogs(&dialogs, &[builtin("restaurant").unwrap()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(v.tokens(), loaded.tokens());
        assert_eq!(loaded.id("<eos_b>"), Some(4));
    }

    #[test]
    fn vocab_load_rejects_missing_reserved_tokens() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        std::fs::write(&path, r#"["<pad>", "hello"]"#).unwrap();
        assert!(Vocab::load(&path).is_err());
    }

    #[test]
    fn tokenize_lowercases_and_splits() {
        assert_eq!(
            tokenize("Hello  World\tfoo"),
            vec!["hello".to_string(), "world".into(), "foo".into()]
        );
        assert_eq!(detokenize(&tokenize("a b c")), "a b c");
    }

    #[test]
    fn examples_chain_previous_turn_context() {
        let dialogs = small_corpus();
        let spec = builtin("restaurant").unwrap();
        let specs = vec![spec.clone()];
        let v = Vocab::from_dialogs(&dialogs, &specs).unwrap();
        let examples = build_examples(&dialogs[..1], &specs, &v).unwrap();
        assert_eq!(examples.len(), dialogs[0].turns.len());

        let first = &examples[0];
        assert_eq!(
            first.source_tokens[..2],
            [EOS_B.to_string(), EOS_R.to_string()]
        );
        assert_eq!(first.source_tokens.last().unwrap(), EOS_U);

        let second = &examples[1];
        let eos_b_pos = second
            .source_tokens
            .iter()
            .position(|t| t == EOS_B)
            .unwrap();
        let prev_belief = crate::schema::serialize_belief(&dialogs[0].turns[0].belief, &spec);
        assert_eq!(&second.source_tokens[..=eos_b_pos], &prev_belief[..]);
        assert_eq!(
            second.belief_target.last(),
            Some(&v.id(EOS_B).unwrap())
        );
        assert_eq!(
            second.response_target.last(),
            Some(&v.id(EOS_R).unwrap())
        );
    }

    #[test]
    fn examples_never_contain_unk_for_in_corpus_text() {
        let dialogs = small_corpus();
        let specs = vec![builtin("restaurant").unwrap()];
        let v = Vocab::from_dialogs(&dialogs, &specs).unwrap();
        for ex in build_examples(&dialogs, &specs, &v).unwrap() {
            assert!(!ex.source.contains(&1), "unk in source: {:?}", ex.source_tokens);
            assert!(!ex.belief_target.contains(&1));
            assert!(!ex.response_target.contains(&1));
        }
    }

    #[test]
    fn batches_are_deterministic_and_cover_everything() {
        let dialogs = small_corpus();
        let specs = vec![builtin("restaurant").unwrap()];
        let v = Vocab::from_dialogs(&dialogs, &specs).unwrap();
        let examples = build_examples(&dialogs, &specs, &v).unwrap();
        let b1 = make_batches(&examples, 5);
        let b2 = make_batches(&examples, 5);
        let b3 = make_batches(&examples, 6);
        let total: usize = b1.iter().map(|b| b.examples.len()).sum();
        assert_eq!(total, examples.len());
        for b in &b1[..b1.len() - 1] {
            assert_eq!(b.examples.len(), BATCH_SIZE);
        }
        let key = |bs: &[Batch]| -> Vec<Vec<usize>> {
            bs.iter()
                .map(|b| b.examples.iter().map(|e| e.source.len()).collect())
                .collect()
        };
        assert_eq!(key(&b1), key(&b2));
        assert_ne!(key(&b1), key(&b3));
    }

    #[test]
    fn embeddings_load_with_coverage_and_skip_malformed() {
        let dialogs = small_corpus();
        let v = Vocab::from_dialogs(&dialogs, &[builtin("restaurant").unwrap()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.txt");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "hello 0.1 0.2 0.3").unwrap();
        writeln!(f, "<inf> 1 2 3").unwrap();
        writeln!(f, "not-in-vocab-xyz 9 9 9").unwrap();
        writeln!(f, "<req> 0.1 abc 0.3").unwrap();
        drop(f);
        let (matrix, report) = load_embeddings(&path, &v, 3, 1).unwrap();
        assert_eq!(matrix.shape, vec![v.len(), 3]);
        assert_eq!(report.covered, usize::from(v.contains("hello")) + 1);
        assert_eq!(report.skipped_lines, 1);
        let inf = v.id("<inf>").unwrap();
        assert_eq!(&matrix.data[inf * 3..inf * 3 + 3], &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn embeddings_reject_dimension_mismatch() {
        let v = Vocab::new();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.txt");
        std::fs::write(&path, "<inf> 0.5 0.5\n").unwrap();
        assert!(load_embeddings(&path, &v, 3, 1).is_err());
    }
}
