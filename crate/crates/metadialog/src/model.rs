//! Two-stage copy-augmented seq2seq dialog model.
//!
//! A shared GRU encoder reads the flattened context
//! `B_{t-1} <eos_b> R_{t-1} <eos_r> U_t <eos_u>`. A belief-span decoder
//! rewrites the dialog state, copying slot values out of the user
//! utterance; a response decoder then generates the delexicalized system
//! reply, copying out of the belief span and conditioned on the
//! knowledge-base match indicator via its first input embedding.
//!
//! Both decoders mix a vocabulary softmax with a copy distribution:
//!
//! ```text
//! P(v) ∝ (1 - g) P_vocab(v) + g P_copy(v)
//! P_copy(v) = (1/Z) Σ_{j : x_j = v} exp ψ(x_j)
//! ψ(x_j) = σ(h_j' W) · s_i
//! ```
//!
//! where `h_j'` is the encoder state at source position j (belief decoder)
//! or the belief decoder state at span position j (response decoder), and
//! `s_i` is the current decoder state. The per-step gate g is a sigmoid of
//! the decoder state. σ(h_j' W) is independent of the decode step and is
//! computed once per position.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, ParamSet, Tensor};
use crate::corpus::{ContextExample, Vocab, EOS_B, EOS_R, GO};
use crate::error::Error;
use crate::schema::{kb_query, BeliefState, DomainSpec, KnowledgeBase, MatchIndicator};

/// Probabilities are floored here before the log, so a single impossible
/// token cannot produce an infinite loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub belief_max_len: usize,
    pub response_max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 50,
            hidden: 50,
            dropout: 0.5,
            belief_max_len: 30,
            response_max_len: 50,
        }
    }
}

/// Whether a forward pass applies dropout. Training passes sample masks
/// from the given seed, so two passes over the same example with the same
/// seed see identical masks; the MAML meta-loss depends on that.
#[derive(Clone, Copy, Debug)]
pub enum Mode {
    Train { dropout_seed: u64 },
    Eval,
}

fn gru_param_names(prefix: &str) -> Vec<String> {
    ["w_z", "b_z", "w_r", "b_r", "w_h", "b_h"]
        .iter()
        .map(|n| format!("{prefix}.{n}"))
        .collect()
}

/// Initializes all model parameters for a vocabulary of `vocab_size`
/// tokens. Shared embedding table, one encoder GRU, and two decoders each
/// with additive attention, a copy projection, a vocabulary projection,
/// and a copy gate.
pub fn init_params(cfg: &ModelConfig, vocab_size: usize, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, h) = (cfg.embed_dim, cfg.hidden);
    let mut p = ParamSet::new();
    p.insert("emb", Tensor::uniform_init(vec![vocab_size, d], &mut rng));
    insert_gru(&mut p, "enc", d, h, &mut rng);
    for dec in ["bdec", "rdec"] {
        insert_gru(&mut p, dec, d + h, h, &mut rng);
        p.insert(&format!("{dec}.att_w1"), Tensor::uniform_init(vec![h, h], &mut rng));
        p.insert(&format!("{dec}.att_w2"), Tensor::uniform_init(vec![h, h], &mut rng));
        p.insert(&format!("{dec}.att_v"), Tensor::uniform_init(vec![h], &mut rng));
        p.insert(&format!("{dec}.copy_w"), Tensor::uniform_init(vec![h, h], &mut rng));
        p.insert(
            &format!("{dec}.proj_w"),
            Tensor::uniform_init(vec![vocab_size, h], &mut rng),
        );
        p.insert(&format!("{dec}.proj_b"), Tensor::uniform_init(vec![vocab_size], &mut rng));
        p.insert(&format!("{dec}.gate_w"), Tensor::uniform_init(vec![h], &mut rng));
        p.insert(&format!("{dec}.gate_b"), Tensor::uniform_init(vec![1], &mut rng));
    }
    p
}

fn insert_gru<R: Rng>(p: &mut ParamSet, prefix: &str, input: usize, h: usize, rng: &mut R) {
    for gate in ["z", "r", "h"] {
        p.insert(
            &format!("{prefix}.w_{gate}"),
            Tensor::uniform_init(vec![h, input + h], rng),
        );
        p.insert(&format!("{prefix}.b_{gate}"), Tensor::uniform_init(vec![h], rng));
    }
}

/// Extends the vocabulary-sized parameters from `old_size` to `new_size`
/// rows, keeping existing rows bit-identical so source-domain knowledge
/// survives target-domain adaptation.
pub fn grow_vocab(
    params: &mut ParamSet,
    cfg: &ModelConfig,
    old_size: usize,
    new_size: usize,
    seed: u64,
) {
    assert!(new_size >= old_size, "vocabulary cannot shrink: {old_size} -> {new_size}");
    if new_size == old_size {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extra = new_size - old_size;
    let grow = |p: &mut ParamSet, name: &str, cols: usize, rng: &mut ChaCha8Rng| {
        let old = &p.get(name).value;
        assert_eq!(old.shape[0], old_size, "unexpected row count in {name}");
        let mut data = old.data.clone();
        let fresh = Tensor::uniform_init(vec![extra, cols], rng);
        data.extend_from_slice(&fresh.data);
        let mut shape = old.shape.clone();
        shape[0] = new_size;
        p.replace(name, Tensor::new(shape, data));
    };
    grow(params, "emb", cfg.embed_dim, &mut rng);
    for dec in ["bdec", "rdec"] {
        grow(params, &format!("{dec}.proj_w"), cfg.hidden, &mut rng);
        let bname = format!("{dec}.proj_b");
        let old = params.get(&bname).value.data.clone();
        let mut data = old;
        let fresh = Tensor::uniform_init(vec![extra], &mut rng);
        data.extend_from_slice(&fresh.data);
        params.replace(&bname, Tensor::new(vec![new_size], data));
    }
}

struct GruNodes {
    w_z: NodeId,
    b_z: NodeId,
    w_r: NodeId,
    b_r: NodeId,
    w_h: NodeId,
    b_h: NodeId,
}

struct DecNodes {
    gru: GruNodes,
    att_w1: NodeId,
    att_w2: NodeId,
    att_v: NodeId,
    copy_w: NodeId,
    proj_w: NodeId,
    proj_b: NodeId,
    gate_w: NodeId,
    gate_b: NodeId,
}

struct Bound {
    emb: NodeId,
    enc: GruNodes,
    bdec: DecNodes,
    rdec: DecNodes,
}

fn bind_gru(g: &mut Graph, p: &ParamSet, prefix: &str) -> GruNodes {
    let n = gru_param_names(prefix);
    GruNodes {
        w_z: g.param(p, &n[0]),
        b_z: g.param(p, &n[1]),
        w_r: g.param(p, &n[2]),
        b_r: g.param(p, &n[3]),
        w_h: g.param(p, &n[4]),
        b_h: g.param(p, &n[5]),
    }
}

fn bind_dec(g: &mut Graph, p: &ParamSet, prefix: &str) -> DecNodes {
    DecNodes {
        gru: bind_gru(g, p, prefix),
        att_w1: g.param(p, &format!("{prefix}.att_w1")),
        att_w2: g.param(p, &format!("{prefix}.att_w2")),
        att_v: g.param(p, &format!("{prefix}.att_v")),
        copy_w: g.param(p, &format!("{prefix}.copy_w")),
        proj_w: g.param(p, &format!("{prefix}.proj_w")),
        proj_b: g.param(p, &format!("{prefix}.proj_b")),
        gate_w: g.param(p, &format!("{prefix}.gate_w")),
        gate_b: g.param(p, &format!("{prefix}.gate_b")),
    }
}

fn bind(g: &mut Graph, p: &ParamSet) -> Bound {
    Bound {
        emb: g.param(p, "emb"),
        enc: bind_gru(g, p, "enc"),
        bdec: bind_dec(g, p, "bdec"),
        rdec: bind_dec(g, p, "rdec"),
    }
}

/// Samples inverted-dropout masks in construction order; `Eval` mode is a
/// pass-through.
struct MaskSampler {
    rng: Option<ChaCha8Rng>,
    keep: f64,
}

impl MaskSampler {
    fn new(mode: Mode, rate: f64) -> Self {
        let rng = match mode {
            Mode::Train { dropout_seed } if rate > 0.0 => {
                Some(ChaCha8Rng::seed_from_u64(dropout_seed))
            }
            _ => None,
        };
        MaskSampler { rng, keep: 1.0 - rate }
    }

    fn apply(&mut self, g: &mut Graph, x: NodeId) -> NodeId {
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        let n = g.value(x).len();
        let scale = 1.0 / self.keep;
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < self.keep { scale } else { 0.0 })
            .collect();
        g.dropout(x, &mask)
    }
}

fn gru_step(g: &mut Graph, p: &GruNodes, x: NodeId, s: NodeId) -> NodeId {
    let xs = g.concat(&[x, s]);
    let z = g.matmul(p.w_z, xs);
    let z = g.add(z, p.b_z);
    let z = g.sigmoid(z);
    let r = g.matmul(p.w_r, xs);
    let r = g.add(r, p.b_r);
    let r = g.sigmoid(r);
    let rs = g.mul(r, s);
    let xrs = g.concat(&[x, rs]);
    let hc = g.matmul(p.w_h, xrs);
    let hc = g.add(hc, p.b_h);
    let hc = g.tanh(hc);
    let keep = g.affine(z, -1.0, 1.0);
    let a = g.mul(keep, s);
    let b = g.mul(z, hc);
    g.add(a, b)
}

fn encode(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    src_ids: &[usize],
    drop: &mut MaskSampler,
) -> Vec<NodeId> {
    let mut s = g.constant(Tensor::zeros(vec![cfg.hidden]));
    let mut states = Vec::with_capacity(src_ids.len());
    for &id in src_ids {
        let x = g.embed_row(bound.emb, id);
        let x = drop.apply(g, x);
        s = gru_step(g, &bound.enc, x, s);
        states.push(s);
    }
    states
}

/// Additive attention: score_j = v · tanh(W1 h_j + W2 s). The W1
/// projections are step-independent and precomputed by the caller.
fn attention(
    g: &mut Graph,
    dec: &DecNodes,
    key_proj: &[NodeId],
    values: &[NodeId],
    s: NodeId,
) -> NodeId {
    let ws = g.matmul(dec.att_w2, s);
    let scores: Vec<NodeId> = key_proj
        .iter()
        .map(|&kp| {
            let t = g.add(kp, ws);
            let t = g.tanh(t);
            g.dot(dec.att_v, t)
        })
        .collect();
    let sv = g.concat(&scores);
    let att = g.softmax(sv);
    g.weighted_sum(att, values)
}

/// Step-independent per-position caches for one decoder: attention key
/// projections (W1 h_j) and copy keys σ(h_j' W).
struct DecCaches {
    att_proj: Vec<NodeId>,
    copy_keys: Vec<NodeId>,
    copy_ids: Vec<usize>,
}

fn build_caches(
    g: &mut Graph,
    dec: &DecNodes,
    att_states: &[NodeId],
    copy_states: &[NodeId],
    copy_ids: &[usize],
) -> DecCaches {
    assert_eq!(copy_states.len(), copy_ids.len(), "copy source length mismatch");
    let att_proj = att_states
        .iter()
        .map(|&h| g.matmul(dec.att_w1, h))
        .collect();
    let copy_keys = copy_states
        .iter()
        .map(|&h| {
            let k = g.matmul_tv(dec.copy_w, h);
            g.sigmoid(k)
        })
        .collect();
    DecCaches { att_proj, copy_keys, copy_ids: copy_ids.to_vec() }
}

/// One decoder step: consumes the previous token embedding, returns the
/// new state and the mixed output distribution over the vocabulary.
fn decode_step(
    g: &mut Graph,
    dec: &DecNodes,
    caches: &DecCaches,
    att_values: &[NodeId],
    vocab_size: usize,
    prev_emb: NodeId,
    s: NodeId,
    drop: &mut MaskSampler,
) -> (NodeId, NodeId) {
    let ctx = attention(g, dec, &caches.att_proj, att_values, s);
    let x = g.concat(&[prev_emb, ctx]);
    let s_new = gru_step(g, &dec.gru, x, s);
    let sd = drop.apply(g, s_new);

    let logits = g.matmul(dec.proj_w, sd);
    let logits = g.add(logits, dec.proj_b);
    let p_vocab = g.softmax(logits);

    let gate_raw = g.dot(dec.gate_w, sd);
    let gate_raw = g.add(gate_raw, dec.gate_b);
    let gate = g.sigmoid(gate_raw);

    let mixed = if caches.copy_ids.is_empty() {
        p_vocab
    } else {
        let psi: Vec<NodeId> = caches
            .copy_keys
            .iter()
            .map(|&k| g.dot(k, s_new))
            .collect();
        let psi = g.concat(&psi);
        let over_pos = g.softmax(psi);
        let p_copy = g.scatter_add(over_pos, &caches.copy_ids, vocab_size);
        let keep = g.affine(gate, -1.0, 1.0);
        let a = g.scale_by(p_vocab, keep);
        let b = g.scale_by(p_copy, gate);
        let mix = g.add(a, b);
        let z = g.sum_all(mix);
        g.div_by_scalar(mix, z)
    };
    (s_new, mixed)
}

fn nll(g: &mut Graph, dist: NodeId, target: usize) -> NodeId {
    let p = g.slice(dist, target, 1);
    let p = g.clamp_min(p, PROB_FLOOR);
    let lp = g.log(p);
    g.affine(lp, -1.0, 0.0)
}

/// Finds the span of the current user utterance in the flattened source:
/// everything after the last `<eos_r>`, excluding the final `<eos_u>`.
pub fn user_span(source_tokens: &[String]) -> std::ops::Range<usize> {
    let start = source_tokens
        .iter()
        .rposition(|t| t == EOS_R)
        .map(|i| i + 1)
        .unwrap_or(0);
    start..source_tokens.len().saturating_sub(1)
}

fn match_token_id(vocab: &Vocab, m: MatchIndicator) -> usize {
    vocab
        .id(m.token())
        .expect("match indicator tokens are reserved")
}

/// Teacher-forced loss for one turn. Returns the summed token NLL node and
/// the number of target tokens it covers.
pub fn example_loss(
    g: &mut Graph,
    params: &ParamSet,
    cfg: &ModelConfig,
    vocab: &Vocab,
    ex: &ContextExample,
    mode: Mode,
) -> (NodeId, usize) {
    let bound = bind(g, params);
    let mut drop = MaskSampler::new(mode, cfg.dropout);
    let vocab_size = params.get("emb").value.shape[0];

    let enc_states = encode(g, &bound, cfg, &ex.source, &mut drop);

    let span = user_span(&ex.source_tokens);
    let copy_states: Vec<NodeId> = span.clone().map(|j| enc_states[j]).collect();
    let copy_ids: Vec<usize> = span.map(|j| ex.source[j]).collect();
    let b_caches = build_caches(g, &bound.bdec, &enc_states, &copy_states, &copy_ids);

    let go = vocab.id(GO).expect("reserved");
    let mut losses = Vec::new();

    // belief decoder, teacher forced on the gold span
    let mut s = *enc_states.last().expect("empty source");
    let mut prev = go;
    let mut b_states = Vec::with_capacity(ex.belief_target.len());
    for &target in &ex.belief_target {
        let pe = g.embed_row(bound.emb, prev);
        let pe = drop.apply(g, pe);
        let (s_new, dist) = decode_step(
            g, &bound.bdec, &b_caches, &enc_states, vocab_size, pe, s, &mut drop,
        );
        losses.push(nll(g, dist, target));
        b_states.push(s_new);
        s = s_new;
        prev = target;
    }

    // response decoder copies out of the gold belief span
    let r_caches = build_caches(g, &bound.rdec, &enc_states, &b_states, &ex.belief_target);
    let mut s = *b_states.last().expect("empty belief target");
    let mut prev = match_token_id(vocab, ex.match_ind);
    for &target in &ex.response_target {
        let pe = g.embed_row(bound.emb, prev);
        let pe = drop.apply(g, pe);
        let (s_new, dist) = decode_step(
            g, &bound.rdec, &r_caches, &enc_states, vocab_size, pe, s, &mut drop,
        );
        losses.push(nll(g, dist, target));
        s = s_new;
        prev = target;
    }

    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l);
    }
    (total, ex.belief_target.len() + ex.response_target.len())
}

fn example_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add((index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn example_mode(mode: Mode, index: usize) -> Mode {
    match mode {
        Mode::Train { dropout_seed } => Mode::Train {
            dropout_seed: example_seed(dropout_seed, index),
        },
        Mode::Eval => Mode::Eval,
    }
}

/// Mean per-token loss over a batch, forward only.
pub fn batch_loss(
    params: &ParamSet,
    cfg: &ModelConfig,
    vocab: &Vocab,
    examples: &[ContextExample],
    mode: Mode,
) -> f64 {
    let total_tokens: usize = examples
        .iter()
        .map(|e| e.belief_target.len() + e.response_target.len())
        .sum();
    let sum = crate::par::map_sum(examples, |i, ex| {
        let mut g = Graph::new();
        let (loss, _) = example_loss(&mut g, params, cfg, vocab, ex, example_mode(mode, i));
        g.value(loss).data[0]
    });
    sum / total_tokens as f64
}

/// Mean per-token loss over a batch; gradients of that mean accumulate
/// into `params`. Gradient order is deterministic regardless of thread
/// count because per-example contributions are reduced in index order.
pub fn batch_backward(
    params: &mut ParamSet,
    cfg: &ModelConfig,
    vocab: &Vocab,
    examples: &[ContextExample],
    mode: Mode,
) -> f64 {
    let total_tokens: usize = examples
        .iter()
        .map(|e| e.belief_target.len() + e.response_target.len())
        .sum();
    let scale = 1.0 / total_tokens as f64;

    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let shared: &ParamSet = params;
        let results: Vec<(f64, ParamSet)> = examples
            .par_iter()
            .enumerate()
            .map(|(i, ex)| {
                let mut local = shared.clone();
                local.zero_grads();
                let mut g = Graph::new();
                let (loss, _) =
                    example_loss(&mut g, &local, cfg, vocab, ex, example_mode(mode, i));
                let v = g.value(loss).data[0];
                g.backward_scaled(loss, scale, &mut local);
                (v, local)
            })
            .collect();
        let mut sum = 0.0;
        for (v, local) in &results {
            sum += v;
            params.add_grads_from(local);
        }
        sum * scale
    }
    #[cfg(not(feature = "parallel"))]
    {
        let mut sum = 0.0;
        for (i, ex) in examples.iter().enumerate() {
            let mut g = Graph::new();
            let (loss, _) = example_loss(&mut g, params, cfg, vocab, ex, example_mode(mode, i));
            sum += g.value(loss).data[0];
            g.backward_scaled(loss, scale, params);
        }
        sum * scale
    }
}

/// Output of one greedy-decoded turn.
#[derive(Clone, Debug)]
pub struct DecodedTurn {
    pub belief_tokens: Vec<String>,
    pub response_tokens: Vec<String>,
    pub belief: BeliefState,
    pub match_ind: MatchIndicator,
    /// Belief tokens the parser could not attribute to any slot.
    pub dropped: usize,
}

/// Greedy decode for one turn: belief span first, then a knowledge-base
/// query for the match indicator, then the response conditioned on it.
/// Output token lists exclude the end markers.
pub fn greedy_decode_turn(
    params: &ParamSet,
    cfg: &ModelConfig,
    vocab: &Vocab,
    spec: &DomainSpec,
    kb: &KnowledgeBase,
    source_tokens: &[String],
) -> Result<DecodedTurn, Error> {
    if source_tokens.is_empty() {
        return Err(Error::Data("cannot decode an empty source context".into()));
    }
    let g = &mut Graph::new();
    let bound = bind(g, params);
    let mut drop = MaskSampler::new(Mode::Eval, cfg.dropout);
    let vocab_size = params.get("emb").value.shape[0];
    let src_ids: Vec<usize> = source_tokens.iter().map(|t| vocab.id_or_unk(t)).collect();

    let enc_states = encode(g, &bound, cfg, &src_ids, &mut drop);

    let span = user_span(source_tokens);
    let copy_states: Vec<NodeId> = span.clone().map(|j| enc_states[j]).collect();
    let copy_ids: Vec<usize> = span.map(|j| src_ids[j]).collect();
    let b_caches = build_caches(g, &bound.bdec, &enc_states, &copy_states, &copy_ids);

    let eos_b = vocab.id(EOS_B).expect("reserved");
    let eos_r = vocab.id(EOS_R).expect("reserved");
    let mut s = *enc_states.last().unwrap();
    let mut prev = vocab.id(GO).expect("reserved");
    let mut belief_ids = Vec::new();
    let mut b_states = Vec::new();
    for _ in 0..cfg.belief_max_len {
        let pe = g.embed_row(bound.emb, prev);
        let (s_new, dist) = decode_step(
            g, &bound.bdec, &b_caches, &enc_states, vocab_size, pe, s, &mut drop,
        );
        let tok = argmax(&g.value(dist).data);
        b_states.push(s_new);
        s = s_new;
        prev = tok;
        if tok == eos_b {
            break;
        }
        belief_ids.push(tok);
    }

    let belief_tokens = vocab.decode(&belief_ids);
    let (belief, dropped) = crate::schema::parse_belief(&belief_tokens, spec);
    let (match_ind, _) = kb_query(kb, spec, &belief.inform)?;

    // the response decoder sees the belief span exactly as decoded,
    // including the closing marker, mirroring the teacher-forced layout
    let mut r_copy_ids = belief_ids.clone();
    r_copy_ids.push(eos_b);
    let r_caches = build_caches(g, &bound.rdec, &enc_states, &b_states, &r_copy_ids[..b_states.len()]);

    let mut s = *b_states.last().unwrap();
    let mut prev = match_token_id(vocab, match_ind);
    let mut response_ids = Vec::new();
    for _ in 0..cfg.response_max_len {
        let pe = g.embed_row(bound.emb, prev);
        let (s_new, dist) = decode_step(
            g, &bound.rdec, &r_caches, &enc_states, vocab_size, pe, s, &mut drop,
        );
        let tok = argmax(&g.value(dist).data);
        s = s_new;
        prev = tok;
        if tok == eos_r {
            break;
        }
        response_ids.push(tok);
    }

    Ok(DecodedTurn {
        belief_tokens,
        response_tokens: vocab.decode(&response_ids),
        belief,
        match_ind,
        dropped,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
