//! Multi-domain slot-filling dialog generator with oracle annotations.
//!
//! Each dialog follows a user agenda (inform goals plus requests, with
//! optional hesitations, self-corrections, dont-cares and mid-dialog goal
//! changes) against a template-based system policy driven by the KB match
//! indicator. Generation is a pure function of (spec, kb, cfg, seed).

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::schema::{
    kb_query, BeliefState, DomainSpec, Entity, KnowledgeBase, MatchIndicator,
};

/// Probabilities for the sentence/dialog complexity phenomena.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ComplexityConfig {
    pub p_self_correct: f64,
    pub p_hesitation: f64,
    pub p_dont_care: f64,
    pub p_new_goal: f64,
}

impl Default for ComplexityConfig {
    fn default() -> Self {
        ComplexityConfig {
            p_self_correct: 0.1,
            p_hesitation: 0.2,
            p_dont_care: 0.1,
            p_new_goal: 0.3,
        }
    }
}

impl ComplexityConfig {
    pub fn none() -> Self {
        ComplexityConfig { p_self_correct: 0.0, p_hesitation: 0.0, p_dont_care: 0.0, p_new_goal: 0.0 }
    }

    pub fn validate(&self) -> Result<(), Error> {
        for (name, p) in [
            ("p_self_correct", self.p_self_correct),
            ("p_hesitation", self.p_hesitation),
            ("p_dont_care", self.p_dont_care),
            ("p_new_goal", self.p_new_goal),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name}={p} out of [0,1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Turn {
    pub user: Vec<String>,
    pub sys_delex: Vec<String>,
    pub sys_lex: Vec<String>,
    /// oracle state after the user utterance of this turn
    pub belief: BeliefState,
    pub match_ind: MatchIndicator,
    pub kb_entity: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dialog {
    pub domain: String,
    pub seed: u64,
    pub turns: Vec<Turn>,
}

pub const FILLERS: [&str; 5] = ["uhm", "hmm", "well", "uh", "you-know"];

/// Every token the generator can ever emit for a domain: template words
/// with placeholders expanded over all slot names and values, plus
/// hesitation fillers. Lets a model's vocabulary cover an unseen domain
/// before any dialog from it has been observed.
pub fn token_inventory(spec: &DomainSpec) -> std::collections::BTreeSet<String> {
    let mut out = std::collections::BTreeSet::new();
    let slot_names: Vec<&str> = spec
        .informable_slots
        .iter()
        .map(|s| s.name.as_str())
        .chain(spec.requestable_names())
        .collect();
    let values: Vec<&str> = spec
        .informable_slots
        .iter()
        .flat_map(|s| s.vocabulary())
        .collect();
    for templates in spec.user_templates.values().chain(spec.nlg_templates.values()) {
        for t in templates {
            for tok in t.split_whitespace() {
                let mut variants = vec![tok.to_string()];
                if tok.contains("{slot}") {
                    variants = slot_names
                        .iter()
                        .map(|n| tok.replace("{slot}", n))
                        .collect();
                }
                let mut expanded = Vec::new();
                for v in variants {
                    if v.contains("{value}") || v.contains("{wrong}") {
                        for val in &values {
                            expanded.push(v.replace("{value}", val).replace("{wrong}", val));
                        }
                    } else {
                        expanded.push(v);
                    }
                }
                out.extend(expanded);
            }
        }
    }
    out.extend(FILLERS.iter().map(|f| f.to_string()));
    out.extend(values.iter().map(|v| v.to_string()));
    out.extend(slot_names.iter().map(|n| n.to_string()));
    out
}

struct Generator<'a> {
    spec: &'a DomainSpec,
    kb: &'a KnowledgeBase,
    cfg: &'a ComplexityConfig,
    rng: ChaCha8Rng,
    turns: Vec<Turn>,
    informs: BTreeMap<String, String>,
    entity: Option<Entity>,
}

impl<'a> Generator<'a> {
    fn pick_template(&mut self, user_side: bool, act: &str) -> String {
        let table = if user_side { &self.spec.user_templates } else { &self.spec.nlg_templates };
        let ts = table
            .get(act)
            .unwrap_or_else(|| panic!("domain {} has no templates for act {act}", self.spec.name));
        ts.choose(&mut self.rng).expect("nonempty template list").clone()
    }

    fn fill(template: &str, slot: &str, value: &str, wrong: &str) -> Vec<String> {
        template
            .replace("{slot}", slot)
            .replace("{value}", value)
            .replace("{wrong}", wrong)
            .split_whitespace()
            .map(String::from)
            .collect()
    }

    fn user_utterance(&mut self, act: &str, slot: &str, value: &str, wrong: &str) -> Vec<String> {
        let t = self.pick_template(true, act);
        let mut toks = Self::fill(&t, slot, value, wrong);
        if self.rng.gen_bool(self.cfg.p_hesitation) {
            let filler = FILLERS.choose(&mut self.rng).unwrap().to_string();
            let pos = self.rng.gen_range(0..=toks.len());
            toks.insert(pos, filler);
            if self.rng.gen_bool(self.cfg.p_hesitation) {
                let filler = FILLERS.choose(&mut self.rng).unwrap().to_string();
                let pos = self.rng.gen_range(0..=toks.len());
                toks.insert(pos, filler);
            }
        }
        toks
    }

    fn sys_utterance(&mut self, act: &str, slot: &str, value: &str) -> Vec<String> {
        let t = self.pick_template(false, act);
        Self::fill(&t, slot, value, "")
    }

    fn lexicalize(&self, delex: &[String]) -> Vec<String> {
        delex
            .iter()
            .map(|tok| {
                if tok.starts_with('<') && tok.ends_with('>') {
                    let inner = &tok[1..tok.len() - 1];
                    if let Some(e) = &self.entity {
                        if inner == "name" {
                            return e.name.clone();
                        }
                        if let Some(v) = e.request.get(inner) {
                            return v.clone();
                        }
                    }
                }
                tok.clone()
            })
            .collect()
    }

    fn query(&mut self) -> (MatchIndicator, Vec<Entity>) {
        let (ind, ents) = kb_query(self.kb, self.spec, &self.informs)
            .expect("generator constraints use declared slots");
        (ind, ents.into_iter().cloned().collect())
    }

    fn push_turn(
        &mut self,
        user: Vec<String>,
        sys_delex: Vec<String>,
        requests: &[String],
        match_ind: MatchIndicator,
    ) {
        let belief = BeliefState {
            inform: self.informs.clone(),
            request: requests.iter().cloned().collect(),
        };
        let sys_lex = self.lexicalize(&sys_delex);
        self.turns.push(Turn {
            user,
            sys_delex,
            sys_lex,
            belief,
            match_ind,
            kb_entity: self.entity.as_ref().map(|e| e.name.clone()),
        });
    }

    /// Picks a single-slot revision that moves the constraints toward some
    /// KB entity; the closest entity determines which slot to change.
    fn restart_fix(&mut self) -> Option<(String, String)> {
        let mut best: Option<(usize, &Entity)> = None;
        for e in &self.kb.entities {
            let diff = self
                .informs
                .iter()
                .filter(|(slot, v)| {
                    let dc = self.spec.informable(slot).map(|s| &&s.dont_care == v).unwrap_or(false);
                    !dc && e.inform.get(*slot) != Some(v)
                })
                .count();
            if best.map(|(d, _)| diff < d).unwrap_or(true) {
                best = Some((diff, e));
            }
        }
        let (_, target) = best?;
        let target = target.clone();
        for (slot, v) in self.informs.clone() {
            let dc = self.spec.informable(&slot).map(|s| s.dont_care == v).unwrap_or(false);
            if !dc && target.inform.get(&slot) != Some(&v) {
                let value = target.inform[&slot].clone();
                return Some((slot, value));
            }
        }
        None
    }

    /// Repeated constraint revisions until the KB matches; returns the final
    /// indicator and match list. Bounded by the slot count per invocation.
    fn recover_from_no_match(&mut self) -> Result<(MatchIndicator, Vec<Entity>), Error> {
        for _ in 0..=self.spec.informable_slots.len() {
            let Some((slot, value)) = self.restart_fix() else {
                return Err(Error::Data(format!(
                    "no satisfiable agenda in domain {} (empty KB?)",
                    self.spec.name
                )));
            };
            let user = self.user_utterance("new_goal", &slot, &value, "");
            self.informs.insert(slot, value);
            let (ind, ents) = self.query();
            if ind == MatchIndicator::NoMatch {
                let sys = self.sys_utterance("no_match", "", "");
                self.push_turn(user, sys, &[], ind);
                continue;
            }
            self.entity = Some(ents[0].clone());
            let sys = self.sys_utterance("present", "", "");
            self.push_turn(user, sys, &[], ind);
            return Ok((ind, ents));
        }
        Err(Error::Data(format!(
            "could not satisfy agenda in domain {} after bounded retries",
            self.spec.name
        )))
    }
}

/// Samples an agenda value for a slot, biased toward values present in the
/// KB so that complete constraint sets usually have matches.
fn agenda_value(
    spec: &DomainSpec,
    kb: &KnowledgeBase,
    slot: &str,
    cfg: &ComplexityConfig,
    rng: &mut ChaCha8Rng,
) -> String {
    if rng.gen_bool(cfg.p_dont_care) {
        return spec.informable(slot).unwrap().dont_care.clone();
    }
    if !kb.entities.is_empty() && rng.gen_bool(0.7) {
        let e = kb.entities.choose(rng).unwrap();
        return e.inform[slot].clone();
    }
    spec.informable(slot).unwrap().values.choose(rng).unwrap().clone()
}

pub fn generate_dialog(
    spec: &DomainSpec,
    kb: &KnowledgeBase,
    cfg: &ComplexityConfig,
    seed: u64,
) -> Result<Dialog, Error> {
    cfg.validate()?;
    if kb.entities.is_empty() {
        return Err(Error::Data(format!("empty knowledge base for domain {}", spec.name)));
    }
    let mut g = Generator {
        spec,
        kb,
        cfg,
        rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5ad1a1),
        turns: Vec::new(),
        informs: BTreeMap::new(),
        entity: None,
    };

    // agenda
    let slots: Vec<String> = spec.informable_slots.iter().map(|s| s.name.clone()).collect();
    let agenda: BTreeMap<String, String> = slots
        .iter()
        .map(|s| (s.clone(), agenda_value(spec, kb, s, cfg, &mut g.rng)))
        .collect();
    let mut requests: Vec<String> = spec.requestable_names().map(String::from).collect();
    requests.shuffle(&mut g.rng);
    let goal_changes: usize =
        (0..2).filter(|_| g.rng.gen_bool(cfg.p_new_goal)).count();

    // opening: user states the task, system asks for the first slot
    let user = g.user_utterance("greet", "", "", "");
    let (ind, _) = g.query();
    let sys = g.sys_utterance("ask", &slots[0], "");
    g.push_turn(user, sys, &[], ind);

    // inform phase, one slot per turn in declaration order
    for (i, slot) in slots.iter().enumerate() {
        let value = agenda[slot].clone();
        let dont_care = spec.informable(slot).unwrap().dont_care == value;
        let user = if dont_care {
            g.user_utterance("dont_care", slot, &value, "")
        } else if g.rng.gen_bool(cfg.p_self_correct) {
            let others: Vec<&String> = spec
                .informable(slot)
                .unwrap()
                .values
                .iter()
                .filter(|v| **v != value)
                .collect();
            let wrong = others.choose(&mut g.rng).map(|v| v.as_str()).unwrap_or("something");
            g.user_utterance("self_correct", slot, &value, wrong)
        } else {
            g.user_utterance("inform", slot, &value, "")
        };
        g.informs.insert(slot.clone(), value);
        let (ind, ents) = g.query();
        if i + 1 < slots.len() {
            let sys = g.sys_utterance("ask", &slots[i + 1], "");
            g.push_turn(user, sys, &[], ind);
        } else if ind == MatchIndicator::NoMatch {
            let sys = g.sys_utterance("no_match", "", "");
            g.push_turn(user, sys, &[], ind);
            g.recover_from_no_match()?;
        } else {
            g.entity = Some(ents[0].clone());
            let sys = g.sys_utterance("present", "", "");
            g.push_turn(user, sys, &[], ind);
        }
    }

    // request phase with optional goal changes between requests
    let mut pending = requests.clone();
    let mut asked: Vec<String> = Vec::new();
    let mut changes_left = goal_changes;
    while let Some(req) = pending.first().cloned() {
        pending.remove(0);
        let user = g.user_utterance("request", &req, "", "");
        let (ind, _) = g.query();
        let sys = g.sys_utterance("answer", &req, "");
        g.push_turn(user, sys, &[req.clone()], ind);
        asked.push(req);

        if changes_left > 0 && !pending.is_empty() {
            changes_left -= 1;
            // revise one non-dont-care slot to a different KB-supported value
            let candidates: Vec<String> = slots
                .iter()
                .filter(|s| {
                    let cur = &g.informs[*s];
                    spec.informable(s).map(|sl| &sl.dont_care != cur).unwrap_or(false)
                })
                .cloned()
                .collect();
            let Some(slot) = candidates.choose(&mut g.rng).cloned() else { continue };
            let current = g.informs[&slot].clone();
            let mut new_value = current.clone();
            for _ in 0..8 {
                let v = agenda_value(spec, kb, &slot, &ComplexityConfig::none(), &mut g.rng);
                if v != current {
                    new_value = v;
                    break;
                }
            }
            if new_value == current {
                continue;
            }
            // user states the new goal, system confirms it
            let user = g.user_utterance("new_goal", &slot, &new_value, "");
            g.informs.insert(slot.clone(), new_value.clone());
            let (ind, _) = g.query();
            let sys = g.sys_utterance("confirm", &slot, &new_value);
            g.push_turn(user, sys, &[], ind);
            // user affirms; system re-queries and presents (or recovers)
            let user = g.user_utterance("affirm", "", "", "");
            let (ind, ents) = g.query();
            if ind == MatchIndicator::NoMatch {
                let sys = g.sys_utterance("no_match", "", "");
                g.push_turn(user, sys, &[], ind);
                g.recover_from_no_match()?;
            } else {
                g.entity = Some(ents[0].clone());
                let sys = g.sys_utterance("present", "", "");
                g.push_turn(user, sys, &[], ind);
            }
            // earlier answers referred to the old entity; ask them again
            for r in asked.iter().take(2).cloned().collect::<Vec<_>>() {
                let user = g.user_utterance("request", &r, "", "");
                let (ind, _) = g.query();
                let sys = g.sys_utterance("answer", &r, "");
                g.push_turn(user, sys, &[r], ind);
            }
        }
    }

    // closing
    let user = g.user_utterance("bye", "", "", "");
    let (ind, _) = g.query();
    let sys = g.sys_utterance("bye", "", "");
    g.push_turn(user, sys, &[], ind);

    Ok(Dialog { domain: spec.name.clone(), seed, turns: g.turns })
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct CorpusStats {
    pub dialogs: usize,
    pub mean_turns: f64,
    pub mean_utterance_len: f64,
}

pub fn corpus_stats(dialogs: &[Dialog]) -> CorpusStats {
    let mut turns = 0usize;
    let mut utts = 0usize;
    let mut tokens = 0usize;
    for d in dialogs {
        turns += d.turns.len();
        for t in &d.turns {
            utts += 2;
            tokens += t.user.len() + t.sys_delex.len();
        }
    }
    CorpusStats {
        dialogs: dialogs.len(),
        mean_turns: turns as f64 / dialogs.len().max(1) as f64,
        mean_utterance_len: tokens as f64 / utts.max(1) as f64,
    }
}

/// n dialogs from consecutive seeds seed..seed+n-1.
pub fn generate_corpus(
    spec: &DomainSpec,
    kb: &KnowledgeBase,
    cfg: &ComplexityConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<Dialog>, Error> {
    if n == 0 {
        return Err(Error::Config("corpus size must be >= 1".into()));
    }
    (0..n as u64)
        .map(|i| {
            generate_dialog(spec, kb, cfg, seed + i)
                .map_err(|e| Error::Data(format!("dialog seed {}: {e}", seed + i)))
        })
        .collect()
}

/// Rule-based reference tracker: replays the user side and checks every
/// turn's oracle belief annotation.
pub fn oracle_check(dialog: &Dialog, spec: &DomainSpec) -> bool {
    let mut informs: BTreeMap<String, String> = BTreeMap::new();
    for turn in &dialog.turns {
        let mut requests = Vec::new();
        for tok in &turn.user {
            if let Some(slot) = spec.slot_of_value(tok) {
                informs.insert(slot.name.clone(), tok.clone());
            } else if spec.requestable(tok).is_some() {
                requests.push(tok.clone());
            }
        }
        if informs != turn.belief.inform {
            return false;
        }
        let expected: std::collections::BTreeSet<String> = requests.into_iter().collect();
        if expected != turn.belief.request {
            return false;
        }
    }
    match dialog.turns.last() {
        Some(t) => t.belief.request.is_empty(),
        None => false,
    }
}

/// Every lexicalized token either appears verbatim in the delexicalized
/// response or fills a placeholder with the matching KB value.
pub fn lexical_consistency(dialog: &Dialog, kb: &KnowledgeBase) -> bool {
    for turn in &dialog.turns {
        if turn.sys_lex.len() != turn.sys_delex.len() {
            return false;
        }
        for (lex, delex) in turn.sys_lex.iter().zip(&turn.sys_delex) {
            if lex == delex {
                continue;
            }
            if !(delex.starts_with('<') && delex.ends_with('>')) {
                return false;
            }
            let inner = &delex[1..delex.len() - 1];
            let Some(name) = &turn.kb_entity else { return false };
            let Some(entity) = kb.entity(name) else { return false };
            let ok = (inner == "name" && lex == name)
                || entity.request.get(inner) == Some(lex);
            if !ok {
                return false;
            }
        }
    }
    true
}

// ---------------------------------------------------------------------------
// corpus file format: one JSON dialog record per line, UTF-8

#[derive(Serialize, Deserialize)]
struct TurnRecord {
    user: String,
    sys_delex: String,
    sys_lex: String,
    inform: BTreeMap<String, String>,
    request: Vec<String>,
    #[serde(rename = "match")]
    match_ind: MatchIndicator,
    kb_entity: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct DialogRecord {
    domain: String,
    seed: u64,
    turns: Vec<TurnRecord>,
}

impl From<&Dialog> for DialogRecord {
    fn from(d: &Dialog) -> Self {
        DialogRecord {
            domain: d.domain.clone(),
            seed: d.seed,
            turns: d
                .turns
                .iter()
                .map(|t| TurnRecord {
                    user: t.user.join(" "),
                    sys_delex: t.sys_delex.join(" "),
                    sys_lex: t.sys_lex.join(" "),
                    inform: t.belief.inform.clone(),
                    request: t.belief.request.iter().cloned().collect(),
                    match_ind: t.match_ind,
                    kb_entity: t.kb_entity.clone(),
                })
                .collect(),
        }
    }
}

impl From<DialogRecord> for Dialog {
    fn from(r: DialogRecord) -> Self {
        Dialog {
            domain: r.domain,
            seed: r.seed,
            turns: r
                .turns
                .into_iter()
                .map(|t| Turn {
                    user: t.user.split_whitespace().map(String::from).collect(),
                    sys_delex: t.sys_delex.split_whitespace().map(String::from).collect(),
                    sys_lex: t.sys_lex.split_whitespace().map(String::from).collect(),
                    belief: BeliefState {
                        inform: t.inform,
                        request: t.request.into_iter().collect(),
                    },
                    match_ind: t.match_ind,
                    kb_entity: t.kb_entity,
                })
                .collect(),
        }
    }
}

pub fn write_corpus(path: &Path, dialogs: &[Dialog]) -> Result<(), Error> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for d in dialogs {
        let rec = DialogRecord::from(d);
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<Dialog>, Error> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DialogRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec.into());
    }
    Ok(out)
}
