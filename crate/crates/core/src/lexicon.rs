//! Dive-number lexicon.
//!
//! A dive number such as `5152B` names a take-off group, the somersault and
//! twist counts and the body position. The lexicon maps each of the 52
//! action types in the dataset onto its ordered sub-action steps. It is a
//! data table rather than a grammar because twist placement differs by
//! family: twist-first for back/reverse/armstand twisters, twist in the
//! middle of the somersault for forward twisters.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ProcedureAnnotation;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LexiconError {
    #[error("malformed dive code {0:?}")]
    MalformedCode(String),
    #[error("unknown dive code {0}")]
    UnknownCode(String),
    #[error("need at least 2 step boundaries, got {0}")]
    TooFewBoundaries(usize),
    #[error("step boundaries are not strictly increasing: {0:?}")]
    UnorderedBoundaries(Vec<usize>),
    #[error("invalid lexicon entry {code}: {reason}")]
    InvalidEntry { code: String, reason: String },
    #[error("lexicon json: {0}")]
    Json(String),
}

/// A syntactically valid FINA-style dive number.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DiveCode(String);

impl DiveCode {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn position(&self) -> char {
        self.0.chars().last().expect("validated non-empty")
    }
}

impl FromStr for DiveCode {
    type Err = LexiconError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let malformed = || LexiconError::MalformedCode(s.to_string());
        let (digits, position) = s.split_at(s.len().saturating_sub(1));
        if !matches!(position, "A" | "B" | "C" | "D") {
            return Err(malformed());
        }
        if !(3..=4).contains(&digits.len()) || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(malformed());
        }
        let group = digits.as_bytes()[0];
        if !(b'1'..=b'6').contains(&group) {
            return Err(malformed());
        }
        if digits.len() == 4 && !matches!(group, b'5' | b'6') {
            return Err(malformed());
        }
        Ok(DiveCode(s.to_string()))
    }
}

impl TryFrom<String> for DiveCode {
    type Error = LexiconError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<DiveCode> for String {
    fn from(c: DiveCode) -> String {
        c.0
    }
}

impl fmt::Display for DiveCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    TakeOff,
    Flight,
    Entry,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubActionLabel {
    pub phase: Phase,
    pub name: String,
    /// Somersault or twist count in half turns ("2.5 Soms" is 5).
    pub half_turns: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubActionSequence {
    pub steps: Vec<SubActionLabel>,
}

impl SubActionSequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.name.as_str()).collect()
    }

    fn validate(&self, code: &str) -> Result<(), LexiconError> {
        let invalid = |reason: &str| LexiconError::InvalidEntry {
            code: code.to_string(),
            reason: reason.to_string(),
        };
        if !(3..=5).contains(&self.steps.len()) {
            return Err(invalid("step count must be 3, 4 or 5"));
        }
        if self.steps[0].phase != Phase::TakeOff {
            return Err(invalid("first step must be a take-off"));
        }
        if self.steps[self.steps.len() - 1].phase != Phase::Entry {
            return Err(invalid("last step must be the entry"));
        }
        if self.steps[1..self.steps.len() - 1].iter().any(|s| s.phase != Phase::Flight) {
            return Err(invalid("inner steps must be flight steps"));
        }
        if self.steps.windows(2).any(|w| w[0].name == w[1].name) {
            return Err(invalid("adjacent steps share a sub-action type"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub code: DiveCode,
    pub steps: Vec<SubActionLabel>,
}

/// The action types of the dataset, in table order: code, take-off,
/// flight parts..., with the entry implied.
const TABLE: &[(&str, &[&str])] = &[
    ("101B", &["Forward", "0.5 Som.Pike"]),
    ("103B", &["Forward", "1.5 Soms.Pike"]),
    ("105B", &["Forward", "2.5 Soms.Pike"]),
    ("107B", &["Forward", "3.5 Soms.Pike"]),
    ("109B", &["Forward", "4.5 Soms.Pike"]),
    ("107C", &["Forward", "3.5 Soms.Tuck"]),
    ("109C", &["Forward", "4.5 Soms.Tuck"]),
    ("201A", &["Back", "0.5 Som.Straight"]),
    ("201B", &["Back", "0.5 Som.Pike"]),
    ("201C", &["Back", "0.5 Som.Tuck"]),
    ("205B", &["Back", "2.5 Soms.Pike"]),
    ("207B", &["Back", "3.5 Soms.Pike"]),
    ("205C", &["Back", "2.5 Soms.Tuck"]),
    ("207C", &["Back", "3.5 Soms.Tuck"]),
    ("301B", &["Reverse", "0.5 Som.Pike"]),
    ("305B", &["Reverse", "2.5 Soms.Pike"]),
    ("303C", &["Reverse", "1.5 Soms.Tuck"]),
    ("305C", &["Reverse", "2.5 Soms.Tuck"]),
    ("307C", &["Reverse", "3.5 Soms.Tuck"]),
    ("401B", &["Inward", "0.5 Som.Pike"]),
    ("403B", &["Inward", "1.5 Soms.Pike"]),
    ("405B", &["Inward", "2.5 Soms.Pike"]),
    ("407B", &["Inward", "3.5 Soms.Pike"]),
    ("405C", &["Inward", "2.5 Soms.Tuck"]),
    ("407C", &["Inward", "3.5 Soms.Tuck"]),
    ("409C", &["Inward", "4.5 Soms.Tuck"]),
    ("612B", &["Arm.Fwd", "1 Som.Pike"]),
    ("614B", &["Arm.Fwd", "2 Soms.Pike"]),
    ("626B", &["Arm.Back", "3 Soms.Pike"]),
    ("626C", &["Arm.Back", "3 Soms.Tuck"]),
    ("636C", &["Arm.Reverse", "3 Soms.Tuck"]),
    ("5231D", &["Back", "0.5 Twist", "1.5 Soms.Pike"]),
    ("5233D", &["Back", "1.5 Twists", "1.5 Soms.Pike"]),
    ("5235D", &["Back", "2.5 Twists", "1.5 Soms.Pike"]),
    ("5237D", &["Back", "3.5 Twists", "1.5 Soms.Pike"]),
    ("5251B", &["Back", "0.5 Twist", "2.5 Soms.Pike"]),
    ("5253B", &["Back", "1.5 Twists", "2.5 Soms.Pike"]),
    ("5255B", &["Back", "2.5 Twists", "2.5 Soms.Pike"]),
    ("5331D", &["Reverse", "0.5 Twist", "1.5 Soms.Pike"]),
    ("5335D", &["Reverse", "2.5 Twists", "1.5 Soms.Pike"]),
    ("5337D", &["Reverse", "3.5 Twists", "1.5 Soms.Pike"]),
    ("5353B", &["Reverse", "1.5 Twists", "2.5 Soms.Pike"]),
    ("5355B", &["Reverse", "2.5 Twists", "2.5 Soms.Pike"]),
    ("6142D", &["Arm.Fwd", "1 Twist", "2 Soms.Pike"]),
    ("6241B", &["Arm.Back", "0.5 Twist", "2 Soms.Pike"]),
    ("6243D", &["Arm.Back", "1.5 Twists", "2 Soms.Pike"]),
    ("6245D", &["Arm.Back", "2.5 Twists", "2 Soms.Pike"]),
    ("5132D", &["Forward", "1.5 Soms.Pike", "1 Twist", "1.5 Soms.Pike"]),
    ("5152B", &["Forward", "2.5 Soms.Pike", "1 Twist", "2.5 Soms.Pike"]),
    ("5154B", &["Forward", "2.5 Soms.Pike", "2 Twists", "2.5 Soms.Pike"]),
    ("5156B", &["Forward", "2.5 Soms.Pike", "3 Twists", "2.5 Soms.Pike"]),
    ("5172B", &["Forward", "3.5 Soms.Pike", "1 Twist", "3.5 Soms.Pike"]),
];

/// Half turns encoded in a flight label's leading count ("2.5 Soms.Pike" → 5).
fn half_turns(name: &str) -> u32 {
    name.split_whitespace()
        .next()
        .and_then(|n| n.parse::<f64>().ok())
        .map_or(0, |turns| (turns * 2.0).round() as u32)
}

fn sequence_from_row(parts: &[&str]) -> SubActionSequence {
    let mut steps = Vec::with_capacity(parts.len() + 1);
    steps.push(SubActionLabel {
        phase: Phase::TakeOff,
        name: parts[0].to_string(),
        half_turns: 0,
    });
    steps.extend(parts[1..].iter().map(|&name| SubActionLabel {
        phase: Phase::Flight,
        name: name.to_string(),
        half_turns: half_turns(name),
    }));
    steps.push(SubActionLabel {
        phase: Phase::Entry,
        name: "Entry".to_string(),
        half_turns: 0,
    });
    SubActionSequence { steps }
}

/// Code → sub-action sequence table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    entries: BTreeMap<DiveCode, SubActionSequence>,
    order: Vec<DiveCode>,
}

impl Lexicon {
    /// The embedded 52-entry table.
    pub fn builtin() -> &'static Lexicon {
        static BUILTIN: OnceLock<Lexicon> = OnceLock::new();
        BUILTIN.get_or_init(|| {
            let entries = TABLE
                .iter()
                .map(|(code, parts)| LexiconEntry {
                    code: code.parse().expect("table code"),
                    steps: sequence_from_row(parts).steps,
                })
                .collect();
            Lexicon::from_entries(entries).expect("builtin table is valid")
        })
    }

    pub fn from_entries(entries: Vec<LexiconEntry>) -> Result<Self, LexiconError> {
        let mut map = BTreeMap::new();
        let mut order = Vec::with_capacity(entries.len());
        for e in entries {
            let seq = SubActionSequence { steps: e.steps };
            seq.validate(e.code.as_str())?;
            if map.insert(e.code.clone(), seq).is_some() {
                return Err(LexiconError::InvalidEntry {
                    code: e.code.to_string(),
                    reason: "duplicate code".into(),
                });
            }
            order.push(e.code);
        }
        Ok(Self { entries: map, order })
    }

    pub fn from_json(json: &str) -> Result<Self, LexiconError> {
        let entries: Vec<LexiconEntry> = serde_json::from_str(json).map_err(|e| LexiconError::Json(e.to_string()))?;
        Self::from_entries(entries)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries()).expect("lexicon serialises")
    }

    /// Entries in table order.
    pub fn entries(&self) -> Vec<LexiconEntry> {
        self.order
            .iter()
            .map(|c| LexiconEntry {
                code: c.clone(),
                steps: self.entries[c].steps.clone(),
            })
            .collect()
    }

    /// Codes in table order.
    pub fn codes(&self) -> &[DiveCode] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Distinct sub-action names, sorted.
    pub fn sub_action_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .entries
            .values()
            .flat_map(|s| s.steps.iter().map(|l| l.name.clone()))
            .collect();
        names.sort();
        names.dedup();
        names
    }

    pub fn parse_dive_code(&self, code: &str) -> Result<SubActionSequence, LexiconError> {
        let code: DiveCode = code.parse()?;
        self.entries
            .get(&code)
            .cloned()
            .ok_or(LexiconError::UnknownCode(code.0))
    }

    pub fn step_count(&self, code: &str) -> Result<usize, LexiconError> {
        self.parse_dive_code(code).map(|s| s.len())
    }
}

/// Parses `code` against the embedded table.
pub fn parse_dive_code(code: &str) -> Result<SubActionSequence, LexiconError> {
    Lexicon::builtin().parse_dive_code(code)
}

pub fn step_count(code: &str) -> Result<usize, LexiconError> {
    Lexicon::builtin().step_count(code)
}

/// Collapses a full step annotation onto two transitions: the end of the
/// take-off and the start of the entry. Any extra flight boundaries are
/// absorbed into the middle step.
pub fn canonical_transitions(annotation: &ProcedureAnnotation) -> Result<[usize; 2], LexiconError> {
    canonical_from_boundaries(&annotation.boundaries)
}

pub fn canonical_from_boundaries(boundaries: &[usize]) -> Result<[usize; 2], LexiconError> {
    if boundaries.len() < 2 {
        return Err(LexiconError::TooFewBoundaries(boundaries.len()));
    }
    if boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(LexiconError::UnorderedBoundaries(boundaries.to_vec()));
    }
    Ok([boundaries[0], boundaries[boundaries.len() - 1]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_table_examples() {
        assert_eq!(parse_dive_code("101B").unwrap().names(), ["Forward", "0.5 Som.Pike", "Entry"]);
        assert_eq!(
            parse_dive_code("5152B").unwrap().names(),
            ["Forward", "2.5 Soms.Pike", "1 Twist", "2.5 Soms.Pike", "Entry"]
        );
        assert_eq!(
            parse_dive_code("6241B").unwrap().names(),
            ["Arm.Back", "0.5 Twist", "2 Soms.Pike", "Entry"]
        );
        assert_eq!(parse_dive_code("307C").unwrap().names(), ["Reverse", "3.5 Soms.Tuck", "Entry"]);
    }

    #[test]
    fn step_counts() {
        assert_eq!(step_count("307C"), Ok(3));
        assert_eq!(step_count("5152B"), Ok(5));
        assert_eq!(step_count("6241B"), Ok(4));
    }

    #[test]
    fn twist_first_for_back_twisters() {
        let seq = parse_dive_code("5255B").unwrap();
        assert_eq!(seq.names(), ["Back", "2.5 Twists", "2.5 Soms.Pike", "Entry"]);
    }

    #[test]
    fn half_turns_are_integers() {
        let seq = parse_dive_code("5152B").unwrap();
        let turns: Vec<u32> = seq.steps.iter().map(|s| s.half_turns).collect();
        assert_eq!(turns, [0, 5, 2, 5, 0]);
    }

    #[test]
    fn syntax_errors() {
        for bad in ["", "B", "101", "101E", "701B", "1011B", "10B", "12345B", "1O1B", "4101B"] {
            assert!(
                matches!(parse_dive_code(bad), Err(LexiconError::MalformedCode(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn unknown_but_well_formed_code() {
        assert_eq!(parse_dive_code("109D"), Err(LexiconError::UnknownCode("109D".into())));
        assert_eq!(step_count("5999A"), Err(LexiconError::UnknownCode("5999A".into())));
    }

    #[test]
    fn canonical_transitions_keep_outer_boundaries() {
        assert_eq!(canonical_from_boundaries(&[18943, 18957, 18967, 18978]), Ok([18943, 18978]));
        assert_eq!(canonical_from_boundaries(&[10, 40]), Ok([10, 40]));
        assert_eq!(canonical_from_boundaries(&[5]), Err(LexiconError::TooFewBoundaries(1)));
        assert!(canonical_from_boundaries(&[9, 9]).is_err());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let lex = Lexicon::builtin();
        let back = Lexicon::from_json(&lex.to_json()).unwrap();
        assert_eq!(&back, lex);

        let bad = r#"[{"code":"101B","steps":[
            {"phase":"TakeOff","name":"Forward","half_turns":0},
            {"phase":"Entry","name":"Entry","half_turns":0}]}]"#;
        assert!(matches!(Lexicon::from_json(bad), Err(LexiconError::InvalidEntry { .. })));
        let bad_code = r#"[{"code":"901B","steps":[]}]"#;
        assert!(matches!(Lexicon::from_json(bad_code), Err(LexiconError::Json(_))));
    }

    #[test]
    fn user_tables_can_extend_the_builtin() {
        let mut entries = Lexicon::builtin().entries();
        entries.push(LexiconEntry {
            code: "109D".parse().unwrap(),
            steps: sequence_from_row(&["Forward", "4.5 Soms.Free"]).steps,
        });
        let lex = Lexicon::from_entries(entries).unwrap();
        assert_eq!(lex.step_count("109D"), Ok(3));
        assert_eq!(lex.len(), 53);
    }
}
