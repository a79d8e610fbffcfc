//! Dialog domain definitions, knowledge base, belief-state semantics and
//! the three-valued database match indicator.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;

/// A user-suppliable constraint slot with its closed value vocabulary.
/// `dont_care` is a distinguished value that matches any KB entry.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct InformableSlot {
    pub name: String,
    pub values: Vec<String>,
    pub dont_care: String,
}

impl InformableSlot {
    /// All tokens that may stand for this slot in a belief span.
    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.values
            .iter()
            .map(|s| s.as_str())
            .chain(std::iter::once(self.dont_care.as_str()))
    }
}

/// An attribute the user can ask about; entities carry one value each.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RequestableSlot {
    pub name: String,
    pub values: Vec<String>,
}

/// A dialog domain: slots, surface templates and entity naming.
///
/// Template placeholders: `{slot}` and `{value}` are filled at generation
/// time; `<name>` and one `<slot>` placeholder per requestable slot survive
/// into the delexicalized system responses.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    pub informable_slots: Vec<InformableSlot>,
    pub requestable_slots: Vec<RequestableSlot>,
    /// e.g. "restaurant-{id}"; must expand to a single token.
    pub entity_name_pattern: String,
    /// system-side templates keyed by dialog act
    pub nlg_templates: BTreeMap<String, Vec<String>>,
    /// user-side templates keyed by dialog act
    pub user_templates: BTreeMap<String, Vec<String>>,
}

impl DomainSpec {
    pub fn informable(&self, name: &str) -> Option<&InformableSlot> {
        self.informable_slots.iter().find(|s| s.name == name)
    }

    pub fn requestable(&self, name: &str) -> Option<&RequestableSlot> {
        self.requestable_slots.iter().find(|s| s.name == name)
    }

    pub fn requestable_names(&self) -> impl Iterator<Item = &str> {
        self.requestable_slots.iter().map(|s| s.name.as_str())
    }

    /// Maps a token to the informable slot whose vocabulary contains it.
    pub fn slot_of_value(&self, token: &str) -> Option<&InformableSlot> {
        self.informable_slots
            .iter()
            .find(|s| s.vocabulary().any(|v| v == token))
    }

    pub fn entity_name(&self, id: usize) -> String {
        self.entity_name_pattern.replace("{id}", &id.to_string())
    }

    pub fn validate(&self) -> Result<(), Error> {
        let mut names = BTreeSet::new();
        for s in &self.informable_slots {
            if !names.insert(s.name.as_str()) {
                return Err(Error::Schema(format!(
                    "duplicate slot name '{}' in domain {}",
                    s.name, self.name
                )));
            }
        }
        for s in &self.requestable_slots {
            if !names.insert(s.name.as_str()) {
                return Err(Error::Schema(format!(
                    "slot name '{}' is both informable and requestable in domain {}",
                    s.name, self.name
                )));
            }
        }
        // value vocabularies must identify their slot unambiguously
        let mut value_owner: BTreeMap<&str, &str> = BTreeMap::new();
        for s in &self.informable_slots {
            for v in s.vocabulary() {
                if let Some(other) = value_owner.insert(v, &s.name) {
                    if other != s.name {
                        return Err(Error::Schema(format!(
                            "value '{v}' appears in both slots '{other}' and '{}' of domain {}",
                            s.name, self.name
                        )));
                    }
                }
            }
        }
        for (act, templates) in self.nlg_templates.iter().chain(&self.user_templates) {
            for t in templates {
                for ph in placeholders(t) {
                    // `<{slot}>` placeholders nest braces inside the angle form
                    let ph = ph.trim_matches(|c| c == '{' || c == '}').to_string();
                    let known = ph == "slot"
                        || ph == "value"
                        || ph == "wrong"
                        || ph == "name"
                        || ph == "id"
                        || self.informable(&ph).is_some()
                        || self.requestable(&ph).is_some();
                    if !known {
                        return Err(Error::Schema(format!(
                            "template for act '{act}' references unknown slot '{ph}' in domain {}",
                            self.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let spec: DomainSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("domain spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("domain spec serializes")
    }
}

fn placeholders(template: &str) -> Vec<String> {
    let mut out = Vec::new();
    for open in ['{', '<'] {
        let close = if open == '{' { '}' } else { '>' };
        let mut rest = template;
        while let Some(i) = rest.find(open) {
            rest = &rest[i + 1..];
            if let Some(j) = rest.find(close) {
                out.push(rest[..j].to_string());
                rest = &rest[j + 1..];
            } else {
                break;
            }
        }
    }
    out
}

/// One backend record: a value for every informable and requestable slot.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Entity {
    pub name: String,
    pub inform: BTreeMap<String, String>,
    pub request: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct KnowledgeBase {
    pub domain: String,
    pub entities: Vec<Entity>,
}

impl KnowledgeBase {
    /// Pseudo-random KB from the slot vocabularies; deterministic in `seed`.
    /// Dont-care values never appear in entities.
    pub fn generate(spec: &DomainSpec, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entities = (0..size)
            .map(|id| {
                let inform = spec
                    .informable_slots
                    .iter()
                    .map(|s| {
                        let v = s.values.choose(&mut rng).expect("nonempty slot vocabulary");
                        (s.name.clone(), v.clone())
                    })
                    .collect();
                let request = spec
                    .requestable_slots
                    .iter()
                    .map(|s| {
                        let v = s.values.choose(&mut rng).expect("nonempty slot vocabulary");
                        (s.name.clone(), v.clone())
                    })
                    .collect();
                Entity { name: spec.entity_name(id), inform, request }
            })
            .collect();
        KnowledgeBase { domain: spec.name.clone(), entities }
    }

    pub fn entity(&self, name: &str) -> Option<&Entity> {
        self.entities.iter().find(|e| e.name == name)
    }
}

/// Outcome of querying the KB with the current inform constraints.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq, Hash)]
#[serde(rename_all = "snake_case")]
pub enum MatchIndicator {
    NoMatch,
    ExactMatch,
    MultipleMatch,
}

impl MatchIndicator {
    /// The reserved vocabulary token conditioning the response decoder.
    pub fn token(self) -> &'static str {
        match self {
            MatchIndicator::NoMatch => "<no_match>",
            MatchIndicator::ExactMatch => "<exact_match>",
            MatchIndicator::MultipleMatch => "<multi_match>",
        }
    }
}

/// Runs the inform constraints against the KB. Dont-care values are
/// wildcards. Matching entities come back in KB order.
pub fn kb_query<'a>(
    kb: &'a KnowledgeBase,
    spec: &DomainSpec,
    constraints: &BTreeMap<String, String>,
) -> Result<(MatchIndicator, Vec<&'a Entity>), Error> {
    for slot in constraints.keys() {
        if spec.informable(slot).is_none() {
            return Err(Error::Schema(format!(
                "unknown informable slot '{slot}' in domain {}",
                spec.name
            )));
        }
    }
    let matches: Vec<&Entity> = kb
        .entities
        .iter()
        .filter(|e| {
            constraints.iter().all(|(slot, value)| {
                let dont_care = spec
                    .informable(slot)
                    .map(|s| &s.dont_care == value)
                    .unwrap_or(false);
                dont_care || e.inform.get(slot) == Some(value)
            })
        })
        .collect();
    let ind = match matches.len() {
        0 => MatchIndicator::NoMatch,
        1 => MatchIndicator::ExactMatch,
        _ => MatchIndicator::MultipleMatch,
    };
    Ok((ind, matches))
}

/// Informable slot values plus the requestable slot names asked this turn.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct BeliefState {
    pub inform: BTreeMap<String, String>,
    pub request: BTreeSet<String>,
}

impl BeliefState {
    pub fn is_empty(&self) -> bool {
        self.inform.is_empty() && self.request.is_empty()
    }
}

pub const INF_TOKEN: &str = "<inf>";
pub const REQ_TOKEN: &str = "<req>";
pub const EOS_B_TOKEN: &str = "<eos_b>";

/// `<inf>` then inform values in slot-declaration order, `<req>` then
/// requested slot names sorted, then `<eos_b>`.
pub fn serialize_belief(b: &BeliefState, spec: &DomainSpec) -> Vec<String> {
    let mut out = vec![INF_TOKEN.to_string()];
    for slot in &spec.informable_slots {
        if let Some(v) = b.inform.get(&slot.name) {
            out.push(v.clone());
        }
    }
    out.push(REQ_TOKEN.to_string());
    for r in &b.request {
        out.push(r.clone());
    }
    out.push(EOS_B_TOKEN.to_string());
    out
}

/// Best-effort inverse of [`serialize_belief`] for model output: inform
/// tokens are matched to slot vocabularies by membership, request tokens to
/// requestable names; anything unmatchable is dropped and counted.
pub fn parse_belief(tokens: &[String], spec: &DomainSpec) -> (BeliefState, usize) {
    let mut belief = BeliefState::default();
    let mut dropped = 0;
    let mut in_request = false;
    for tok in tokens {
        match tok.as_str() {
            INF_TOKEN => {}
            REQ_TOKEN => in_request = true,
            EOS_B_TOKEN => break,
            t => {
                if in_request {
                    if spec.requestable(t).is_some() {
                        belief.request.insert(t.to_string());
                    } else {
                        dropped += 1;
                    }
                } else if let Some(slot) = spec.slot_of_value(t) {
                    belief.inform.insert(slot.name.clone(), t.to_string());
                } else {
                    dropped += 1;
                }
            }
        }
    }
    (belief, dropped)
}

/// The decoder re-emits the full state each turn; the decoded state wins.
pub fn update_belief(_prev: &BeliefState, decoded: &BeliefState) -> BeliefState {
    decoded.clone()
}

/// Generates a deterministic pseudo-random valid belief state; used by
/// round-trip property tests and fuzzing.
pub fn random_belief<R: Rng>(spec: &DomainSpec, rng: &mut R) -> BeliefState {
    let mut b = BeliefState::default();
    for slot in &spec.informable_slots {
        if rng.gen_bool(0.6) {
            let v = slot.values.choose(rng).unwrap().clone();
            b.inform.insert(slot.name.clone(), v);
        }
    }
    for req in &spec.requestable_slots {
        if rng.gen_bool(0.3) {
            b.request.insert(req.name.clone());
        }
    }
    b
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Tiny two-slot domain for unit tests.
    pub fn toy_spec() -> DomainSpec {
        DomainSpec {
            name: "restaurant".into(),
            informable_slots: vec![
                InformableSlot {
                    name: "loc".into(),
                    values: vec!["philadelphia".into(), "seattle".into(), "boston".into()],
                    dont_care: "anywhere".into(),
                },
                InformableSlot {
                    name: "food_pref".into(),
                    values: vec!["indian".into(), "thai".into()],
                    dont_care: "any-food".into(),
                },
            ],
            requestable_slots: vec![
                RequestableSlot { name: "price".into(), values: vec!["cheap".into(), "moderate".into()] },
                RequestableSlot { name: "parking".into(), values: vec!["street".into(), "none".into()] },
            ],
            entity_name_pattern: "restaurant-{id}".into(),
            nlg_templates: BTreeMap::new(),
            user_templates: BTreeMap::new(),
        }
    }

    pub fn toy_entity(name: &str, loc: &str, food: &str) -> Entity {
        let mut inform = BTreeMap::new();
        inform.insert("loc".into(), loc.into());
        inform.insert("food_pref".into(), food.into());
        let mut request = BTreeMap::new();
        request.insert("price".into(), "moderate".into());
        request.insert("parking".into(), "none".into());
        Entity { name: name.into(), inform, request }
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use proptest::prelude::*;

    fn constraints(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn empty_kb_is_no_match() {
        let spec = toy_spec();
        let kb = KnowledgeBase { domain: spec.name.clone(), entities: vec![] };
        let (ind, ents) =
            kb_query(&kb, &spec, &constraints(&[("loc", "seattle")])).unwrap();
        assert_eq!(ind, MatchIndicator::NoMatch);
        assert!(ents.is_empty());
    }

    #[test]
    fn single_entity_is_exact_match() {
        let spec = toy_spec();
        let kb = KnowledgeBase {
            domain: spec.name.clone(),
            entities: vec![
                toy_entity("restaurant-65", "philadelphia", "indian"),
                toy_entity("restaurant-2", "seattle", "thai"),
            ],
        };
        let (ind, ents) = kb_query(
            &kb,
            &spec,
            &constraints(&[("loc", "philadelphia"), ("food_pref", "indian")]),
        )
        .unwrap();
        assert_eq!(ind, MatchIndicator::ExactMatch);
        assert_eq!(ents[0].name, "restaurant-65");
    }

    #[test]
    fn two_entities_are_multiple_match() {
        let spec = toy_spec();
        let kb = KnowledgeBase {
            domain: spec.name.clone(),
            entities: vec![
                toy_entity("restaurant-1", "seattle", "indian"),
                toy_entity("restaurant-2", "seattle", "thai"),
            ],
        };
        let (ind, ents) = kb_query(&kb, &spec, &constraints(&[("loc", "seattle")])).unwrap();
        assert_eq!(ind, MatchIndicator::MultipleMatch);
        assert_eq!(ents.len(), 2);
    }

    #[test]
    fn dont_care_matches_everything() {
        let spec = toy_spec();
        let kb = KnowledgeBase {
            domain: spec.name.clone(),
            entities: vec![
                toy_entity("restaurant-1", "seattle", "indian"),
                toy_entity("restaurant-2", "boston", "thai"),
            ],
        };
        let (ind, _) = kb_query(&kb, &spec, &constraints(&[("loc", "anywhere")])).unwrap();
        assert_eq!(ind, MatchIndicator::MultipleMatch);
    }

    #[test]
    fn unknown_slot_is_schema_error() {
        let spec = toy_spec();
        let kb = KnowledgeBase { domain: spec.name.clone(), entities: vec![] };
        let err = kb_query(&kb, &spec, &constraints(&[("cuisine", "thai")]));
        assert!(matches!(err, Err(Error::Schema(_))));
    }

    #[test]
    fn adding_constraints_never_increases_matches() {
        let spec = toy_spec();
        let kb = KnowledgeBase::generate(&spec, 50, 3);
        let (_, all) = kb_query(&kb, &spec, &BTreeMap::new()).unwrap();
        let (_, loc) = kb_query(&kb, &spec, &constraints(&[("loc", "seattle")])).unwrap();
        let (_, both) = kb_query(
            &kb,
            &spec,
            &constraints(&[("loc", "seattle"), ("food_pref", "thai")]),
        )
        .unwrap();
        assert!(loc.len() <= all.len());
        assert!(both.len() <= loc.len());
    }

    #[test]
    fn empty_belief_serializes_to_markers() {
        let spec = toy_spec();
        let b = BeliefState::default();
        assert_eq!(serialize_belief(&b, &spec), vec!["<inf>", "<req>", "<eos_b>"]);
    }

    #[test]
    fn appendix_style_belief_serializes_in_slot_order() {
        let spec = toy_spec();
        let mut b = BeliefState::default();
        b.inform.insert("loc".into(), "seattle".into());
        b.inform.insert("food_pref".into(), "indian".into());
        b.request.insert("price".into());
        assert_eq!(
            serialize_belief(&b, &spec),
            vec!["<inf>", "seattle", "indian", "<req>", "price", "<eos_b>"]
        );
    }

    #[test]
    fn parse_handles_missing_eos() {
        let spec = toy_spec();
        let toks: Vec<String> =
            ["<inf>", "seattle", "<req>", "price"].iter().map(|s| s.to_string()).collect();
        let (b, dropped) = parse_belief(&toks, &spec);
        assert_eq!(dropped, 0);
        assert_eq!(b.inform.get("loc").unwrap(), "seattle");
        assert!(b.request.contains("price"));
    }

    #[test]
    fn parse_drops_unknown_tokens() {
        let spec = toy_spec();
        let toks: Vec<String> =
            ["<inf>", "gibberish", "seattle", "<req>", "<eos_b>"].iter().map(|s| s.to_string()).collect();
        let (b, dropped) = parse_belief(&toks, &spec);
        assert_eq!(dropped, 1);
        assert_eq!(b.inform.len(), 1);
    }

    #[test]
    fn update_belief_decoded_wins() {
        let spec = toy_spec();
        let _ = &spec;
        let mut prev = BeliefState::default();
        prev.inform.insert("loc".into(), "philadelphia".into());
        let mut decoded = BeliefState::default();
        decoded.inform.insert("loc".into(), "seattle".into());
        decoded.inform.insert("food_pref".into(), "indian".into());
        assert_eq!(update_belief(&prev, &decoded), decoded);
        assert_eq!(update_belief(&prev, &prev), prev);
        assert_eq!(update_belief(&prev, &BeliefState::default()), BeliefState::default());
    }

    #[test]
    fn kb_generation_is_deterministic_and_complete() {
        let spec = toy_spec();
        let a = KnowledgeBase::generate(&spec, 100, 9);
        let b = KnowledgeBase::generate(&spec, 100, 9);
        assert_eq!(a, b);
        for e in &a.entities {
            for s in &spec.informable_slots {
                assert!(e.inform.contains_key(&s.name));
            }
            for s in &spec.requestable_slots {
                assert!(e.request.contains_key(&s.name));
            }
        }
    }

    #[test]
    fn validate_rejects_overlapping_value_vocabularies() {
        let mut spec = toy_spec();
        spec.informable_slots[1].values.push("seattle".into());
        assert!(spec.validate().is_err());
    }

    #[test]
    fn domain_spec_toml_round_trip() {
        let spec = toy_spec();
        let text = spec.to_toml();
        let back = DomainSpec::from_toml(&text).unwrap();
        assert_eq!(spec, back);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn belief_serialize_parse_round_trip(seed in 0u64..u64::MAX) {
            use rand::SeedableRng;
            let spec = toy_spec();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let b = random_belief(&spec, &mut rng);
            let toks = serialize_belief(&b, &spec);
            let (parsed, dropped) = parse_belief(&toks, &spec);
            prop_assert_eq!(dropped, 0);
            prop_assert_eq!(parsed, b);
        }

        #[test]
        fn match_indicator_partitions(seed in 0u64..u64::MAX) {
            use rand::SeedableRng;
            let spec = toy_spec();
            let kb = KnowledgeBase::generate(&spec, 20, 1);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let b = random_belief(&spec, &mut rng);
            let (ind, ents) = kb_query(&kb, &spec, &b.inform).unwrap();
            let expected = match ents.len() {
                0 => MatchIndicator::NoMatch,
                1 => MatchIndicator::ExactMatch,
                _ => MatchIndicator::MultipleMatch,
            };
            prop_assert_eq!(ind, expected);
        }
    }
}
