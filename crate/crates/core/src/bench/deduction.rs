//! Reference code-deduction benchmark.
//!
//! A hidden code of `code_length` digits is drawn from a small alphabet.
//! Each round the model either queries one verifier (a published predicate
//! over codes) and receives its TRUE/FALSE verdict on the hidden code, or
//! guesses the code, which ends the game. Solving it means eliminating
//! candidates that are inconsistent with the verdicts seen so far.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    actions_in, feedback_in, join_digits, Action, ActionKind, BenchError, BenchmarkPlugin, Feedback, FeedbackOracle,
    Reaction, RoundState, TerminalReason,
};
use crate::model::{Message, Role, Score, SessionStatus};

pub type Code = Vec<u8>;

pub const DEFAULT_CODE_LENGTH: usize = 3;
pub const DEFAULT_VERIFIER_COUNT: usize = 4;
pub const DEFAULT_ROUND_LIMIT: u32 = 10;
pub const MAX_FINAL_CANDIDATES: usize = 5;
pub const GENERATION_ATTEMPTS: u32 = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PredicateId {
    #[serde(rename = "sum_gt_K")]
    SumGt,
    #[serde(rename = "digit_i_odd")]
    DigitOdd,
    #[serde(rename = "all_distinct")]
    AllDistinct,
    #[serde(rename = "digit_i_is_max")]
    DigitIsMax,
    #[serde(rename = "contains_digit_D")]
    ContainsDigit,
    #[serde(rename = "sum_even")]
    SumEven,
    #[serde(rename = "ascending")]
    Ascending,
}

impl PredicateId {
    pub const ALL: [PredicateId; 7] = [
        PredicateId::SumGt,
        PredicateId::DigitOdd,
        PredicateId::AllDistinct,
        PredicateId::DigitIsMax,
        PredicateId::ContainsDigit,
        PredicateId::SumEven,
        PredicateId::Ascending,
    ];
}

/// A resolved predicate. Digit positions are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Predicate {
    SumGt(i64),
    DigitOdd(usize),
    AllDistinct,
    DigitIsMax(usize),
    ContainsDigit(u8),
    SumEven,
    /// Strictly increasing left to right.
    Ascending,
}

impl Predicate {
    pub fn eval(&self, code: &[u8]) -> bool {
        let sum: i64 = code.iter().map(|&d| d as i64).sum();
        match *self {
            Predicate::SumGt(k) => sum > k,
            Predicate::DigitOdd(i) => code[i - 1] % 2 == 1,
            Predicate::AllDistinct => code.iter().collect::<BTreeSet<_>>().len() == code.len(),
            Predicate::DigitIsMax(i) => code.iter().all(|&d| d <= code[i - 1]),
            Predicate::ContainsDigit(d) => code.contains(&d),
            Predicate::SumEven => sum % 2 == 0,
            Predicate::Ascending => code.windows(2).all(|w| w[0] < w[1]),
        }
    }

    pub fn id(&self) -> PredicateId {
        match self {
            Predicate::SumGt(_) => PredicateId::SumGt,
            Predicate::DigitOdd(_) => PredicateId::DigitOdd,
            Predicate::AllDistinct => PredicateId::AllDistinct,
            Predicate::DigitIsMax(_) => PredicateId::DigitIsMax,
            Predicate::ContainsDigit(_) => PredicateId::ContainsDigit,
            Predicate::SumEven => PredicateId::SumEven,
            Predicate::Ascending => PredicateId::Ascending,
        }
    }

    pub fn params(&self) -> BTreeMap<String, i64> {
        let mut p = BTreeMap::new();
        match *self {
            Predicate::SumGt(k) => {
                p.insert("K".into(), k);
            }
            Predicate::DigitOdd(i) | Predicate::DigitIsMax(i) => {
                p.insert("i".into(), i as i64);
            }
            Predicate::ContainsDigit(d) => {
                p.insert("D".into(), d as i64);
            }
            _ => {}
        }
        p
    }

    pub fn describe(&self) -> String {
        match *self {
            Predicate::SumGt(k) => format!("The sum of the digits is greater than {k}."),
            Predicate::DigitOdd(i) => format!("Digit {i} is odd."),
            Predicate::AllDistinct => "All digits are different.".into(),
            Predicate::DigitIsMax(i) => format!("Digit {i} is at least as large as every other digit."),
            Predicate::ContainsDigit(d) => format!("The code contains the digit {d}."),
            Predicate::SumEven => "The sum of the digits is even.".into(),
            Predicate::Ascending => "The digits are strictly increasing from left to right.".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierSpec {
    pub index: usize,
    pub predicate_id: PredicateId,
    #[serde(default)]
    pub params: BTreeMap<String, i64>,
    pub description: String,
}

impl VerifierSpec {
    pub fn new(index: usize, predicate: Predicate) -> Self {
        VerifierSpec { index, predicate_id: predicate.id(), params: predicate.params(), description: predicate.describe() }
    }

    /// Resolves the predicate, checking parameters against the code shape.
    pub fn predicate(&self, code_length: usize) -> Result<Predicate, BenchError> {
        let param = |name: &str| {
            self.params
                .get(name)
                .copied()
                .ok_or_else(|| BenchError::InvalidItem(format!("verifier {} lacks param {name}", self.index)))
        };
        let position = |name: &str| -> Result<usize, BenchError> {
            let i = param(name)?;
            if i < 1 || i as usize > code_length {
                return Err(BenchError::InvalidItem(format!("verifier {} position {i} out of 1..={code_length}", self.index)));
            }
            Ok(i as usize)
        };
        Ok(match self.predicate_id {
            PredicateId::SumGt => Predicate::SumGt(param("K")?),
            PredicateId::DigitOdd => Predicate::DigitOdd(position("i")?),
            PredicateId::AllDistinct => Predicate::AllDistinct,
            PredicateId::DigitIsMax => Predicate::DigitIsMax(position("i")?),
            PredicateId::ContainsDigit => {
                let d = param("D")?;
                Predicate::ContainsDigit(u8::try_from(d).map_err(|_| BenchError::InvalidItem(format!("bad digit {d}")))?)
            }
            PredicateId::SumEven => Predicate::SumEven,
            PredicateId::Ascending => Predicate::Ascending,
        })
    }
}

fn default_code_length() -> usize {
    DEFAULT_CODE_LENGTH
}

fn default_alphabet() -> Vec<u8> {
    vec![1, 2, 3, 4, 5]
}

fn default_round_limit() -> u32 {
    DEFAULT_ROUND_LIMIT
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeductionItem {
    pub id: String,
    #[serde(default = "default_code_length")]
    pub code_length: usize,
    #[serde(default = "default_alphabet")]
    pub alphabet: Vec<u8>,
    pub hidden_code: Code,
    pub verifiers: Vec<VerifierSpec>,
    #[serde(default = "default_round_limit")]
    pub round_limit: u32,
}

impl DeductionItem {
    pub fn new(id: impl Into<String>, hidden_code: Code, predicates: &[Predicate]) -> Self {
        DeductionItem {
            id: id.into(),
            code_length: hidden_code.len(),
            alphabet: default_alphabet(),
            hidden_code,
            verifiers: predicates.iter().enumerate().map(|(i, p)| VerifierSpec::new(i, *p)).collect(),
            round_limit: DEFAULT_ROUND_LIMIT,
        }
    }

    pub fn from_value(v: &Value) -> Result<Self, BenchError> {
        let item: DeductionItem =
            serde_json::from_value(v.clone()).map_err(|e| BenchError::InvalidItem(e.to_string()))?;
        item.validate()?;
        Ok(item)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("item serializes")
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::InvalidItem(m));
        if self.code_length == 0 || self.code_length > 8 {
            return bad(format!("code_length {} outside 1..=8", self.code_length));
        }
        if self.alphabet.is_empty() || self.alphabet.iter().any(|&d| d > 9) {
            return bad("alphabet must be non-empty single digits".into());
        }
        if self.alphabet.iter().collect::<BTreeSet<_>>().len() != self.alphabet.len() {
            return bad("alphabet digits must be distinct".into());
        }
        if self.hidden_code.len() != self.code_length {
            return bad("hidden_code length differs from code_length".into());
        }
        if self.hidden_code.iter().any(|d| !self.alphabet.contains(d)) {
            return bad("hidden_code uses digits outside the alphabet".into());
        }
        if self.round_limit == 0 {
            return bad("round_limit must be positive".into());
        }
        for (i, v) in self.verifiers.iter().enumerate() {
            if v.index != i {
                return bad(format!("verifier at position {i} has index {}", v.index));
            }
            v.predicate(self.code_length)?;
        }
        Ok(())
    }

    pub fn predicates(&self) -> Vec<Predicate> {
        self.verifiers
            .iter()
            .map(|v| v.predicate(self.code_length).expect("validated item"))
            .collect()
    }

    /// Candidate space size, `|alphabet|^code_length`.
    pub fn space_size(&self) -> usize {
        self.alphabet.len().pow(self.code_length as u32)
    }

    /// All codes in lexicographic order of alphabet position.
    pub fn candidate_space(&self) -> impl Iterator<Item = Code> + '_ {
        let base = self.alphabet.len();
        (0..self.space_size()).map(move |mut n| {
            let mut code = vec![0u8; self.code_length];
            for slot in code.iter_mut().rev() {
                *slot = self.alphabet[n % base];
                n /= base;
            }
            code
        })
    }

    /// Truthful verdicts of every verifier.
    pub fn all_feedback(&self) -> Vec<Feedback> {
        self.predicates()
            .iter()
            .enumerate()
            .map(|(k, p)| Feedback::new(k, p.eval(&self.hidden_code)))
            .collect()
    }
}

pub fn verifier_verdict(item: &DeductionItem, verifier_index: usize) -> Result<bool, BenchError> {
    let v = item
        .verifiers
        .get(verifier_index)
        .ok_or(BenchError::IndexOutOfRange { index: verifier_index, count: item.verifiers.len() })?;
    Ok(v.predicate(item.code_length)?.eval(&item.hidden_code))
}

fn resolve_feedback(item: &DeductionItem, feedback: &[Feedback]) -> Result<Vec<(Predicate, bool)>, BenchError> {
    feedback
        .iter()
        .map(|f| {
            let v = item
                .verifiers
                .get(f.verifier_index)
                .ok_or(BenchError::IndexOutOfRange { index: f.verifier_index, count: item.verifiers.len() })?;
            Ok((v.predicate(item.code_length)?, f.verdict))
        })
        .collect()
}

pub fn is_consistent(item: &DeductionItem, feedback: &[Feedback], code: &[u8]) -> Result<bool, BenchError> {
    if code.len() != item.code_length || code.iter().any(|d| !item.alphabet.contains(d)) {
        return Ok(false);
    }
    Ok(resolve_feedback(item, feedback)?.iter().all(|(p, v)| p.eval(code) == *v))
}

/// Codes agreeing with every recorded verdict, in candidate-space order.
pub fn consistent_candidates(item: &DeductionItem, feedback: &[Feedback]) -> Result<Vec<Code>, BenchError> {
    let resolved = resolve_feedback(item, feedback)?;
    Ok(item
        .candidate_space()
        .filter(|c| resolved.iter().all(|(p, v)| p.eval(c) == *v))
        .collect())
}

fn action_re() -> &'static (Regex, Regex) {
    static RE: OnceLock<(Regex, Regex)> = OnceLock::new();
    RE.get_or_init(|| {
        (
            Regex::new(r"(?i)^\s*QUERY\s+(\d+)\s*\.?\s*$").expect("valid regex"),
            Regex::new(r"(?i)^\s*GUESS\s+(\d(?:[\s,]+\d)*)\s*\.?\s*$").expect("valid regex"),
        )
    })
}

/// The last line of the form `QUERY <k>` or `GUESS <d1> <d2> ...` wins;
/// anything else in the text is ignored.
pub fn parse_action(assistant_text: &str) -> Action {
    let (query, guess) = action_re();
    for line in assistant_text.lines().rev() {
        if let Some(c) = query.captures(line) {
            if let Ok(k) = c[1].parse::<usize>() {
                return Action { raw_text: assistant_text.to_string(), ..Action::query(k) };
            }
        }
        if let Some(c) = guess.captures(line) {
            let code: Code = c[1].chars().filter_map(|ch| ch.to_digit(10)).map(|d| d as u8).collect();
            return Action { raw_text: assistant_text.to_string(), ..Action::guess(&code) };
        }
    }
    Action::malformed(assistant_text)
}

fn remaining_line(item: &DeductionItem, round: u32) -> String {
    format!("Rounds remaining: {}.", item.round_limit.saturating_sub(round))
}

pub fn format_prompt(item: &DeductionItem) -> String {
    let slots: Vec<String> = (1..=item.code_length).map(|i| format!("<d{i}>")).collect();
    format!("QUERY <k> or GUESS {}", slots.join(" "))
}

pub fn react(item: &DeductionItem, action: &Action, state: &RoundState) -> Reaction {
    if state.round > item.round_limit {
        return Reaction::Terminal {
            success: false,
            reason: TerminalReason::RoundLimit,
            text: "ROUND LIMIT REACHED. The game is over.".into(),
        };
    }
    let remaining = remaining_line(item, state.round);
    match action.kind {
        ActionKind::Query => {
            let k = action.verifier_index.expect("query carries an index");
            match verifier_verdict(item, k) {
                Ok(v) => Reaction::Reply {
                    text: format!("VERIFIER {k}: {}\n{remaining}", if v { "TRUE" } else { "FALSE" }),
                },
                Err(_) => Reaction::Reply {
                    text: format!(
                        "ERROR: there is no verifier {k}; valid indices are 0 to {}.\n{remaining}",
                        item.verifiers.len().saturating_sub(1)
                    ),
                },
            }
        }
        ActionKind::Guess => {
            let code = action.guessed_code.as_deref().expect("guess carries a code");
            if code.len() != item.code_length || code.iter().any(|d| !item.alphabet.contains(d)) {
                return Reaction::Reply {
                    text: format!(
                        "ERROR: a guess needs exactly {} digits from {{{}}}.\n{remaining}",
                        item.code_length,
                        join_digits(&item.alphabet, ", ")
                    ),
                };
            }
            if code == item.hidden_code.as_slice() {
                Reaction::Terminal { success: true, reason: TerminalReason::Solved, text: "GUESS CORRECT".into() }
            } else {
                Reaction::Terminal { success: false, reason: TerminalReason::WrongGuess, text: "GUESS INCORRECT".into() }
            }
        }
        ActionKind::Malformed => Reaction::Reply {
            text: format!(
                "FORMAT ERROR: end your reply with a line of the form {}.\n{remaining}",
                format_prompt(item)
            ),
        },
    }
}

pub fn initial_messages(item: &DeductionItem) -> Vec<(Role, String)> {
    let mut rules = String::new();
    rules.push_str("You are playing a code-deduction game.\n");
    rules.push_str(&format!(
        "A hidden code of {} digits is drawn from the digits {} (digits may repeat).\n",
        item.code_length,
        join_digits(&item.alphabet, ", ")
    ));
    rules.push_str("Each round you take exactly one action:\n");
    rules.push_str("  QUERY <k>  ask verifier k whether its statement holds for the hidden code\n");
    rules.push_str(&format!(
        "  GUESS {}  submit the code; the game ends either way\n",
        (1..=item.code_length).map(|i| format!("<d{i}>")).collect::<Vec<_>>().join(" ")
    ));
    rules.push_str(&format!(
        "You have {} rounds. Put your action alone on the last line of your reply.\n",
        item.round_limit
    ));
    rules.push_str("Verifiers:\n");
    for v in &item.verifiers {
        rules.push_str(&format!("  Verifier {}: {}\n", v.index, v.description));
    }
    rules.push_str("You may annotate reasoning steps on their own lines as\n");
    rules.push_str("  S<n>: <step> [uses: V<k>, S<m>, M<i>] [claim: keep|drop (<d1>,...)]\n");
    rules.push_str("where V<k> is the verdict of verifier k, S<m> an earlier step, and M<i> message i.");
    let opener = format!("Round 1 of {}. Choose your action: {}.", item.round_limit, format_prompt(item));
    vec![(Role::System, rules), (Role::User, opener)]
}

/// Rounds consumed by a transcript: one per model reply, capped at the limit.
pub fn rounds_used(item: &DeductionItem, transcript: &[Message]) -> u32 {
    let n = transcript.iter().filter(|m| m.role == Role::Assistant).count() as u32;
    n.min(item.round_limit)
}

pub fn score_transcript(
    item: &DeductionItem,
    transcript: &[Message],
    status: SessionStatus,
) -> Result<Score, BenchError> {
    if !status.is_terminal() {
        return Err(BenchError::SessionNotTerminal);
    }
    let feedback = feedback_in(transcript, transcript.len());
    Ok(Score {
        solved: status == SessionStatus::TerminalSuccess,
        rounds_used: rounds_used(item, transcript),
        final_candidate_count: Some(consistent_candidates(item, &feedback)?.len()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Difficulty {
    #[serde(default = "default_verifier_count")]
    pub verifier_count: usize,
    #[serde(default = "default_code_length")]
    pub code_length: usize,
}

fn default_verifier_count() -> usize {
    DEFAULT_VERIFIER_COUNT
}

impl Default for Difficulty {
    fn default() -> Self {
        Difficulty { verifier_count: DEFAULT_VERIFIER_COUNT, code_length: DEFAULT_CODE_LENGTH }
    }
}

fn random_predicate(rng: &mut ChaCha8Rng, code_length: usize, alphabet: &[u8]) -> Predicate {
    let lo = code_length as i64 * *alphabet.iter().min().expect("non-empty") as i64;
    let hi = code_length as i64 * *alphabet.iter().max().expect("non-empty") as i64;
    match *PredicateId::ALL.choose(rng).expect("non-empty") {
        PredicateId::SumGt => Predicate::SumGt(rng.gen_range(lo..hi)),
        PredicateId::DigitOdd => Predicate::DigitOdd(rng.gen_range(1..=code_length)),
        PredicateId::AllDistinct => Predicate::AllDistinct,
        PredicateId::DigitIsMax => Predicate::DigitIsMax(rng.gen_range(1..=code_length)),
        PredicateId::ContainsDigit => Predicate::ContainsDigit(*alphabet.choose(rng).expect("non-empty")),
        PredicateId::SumEven => Predicate::SumEven,
        PredicateId::Ascending => Predicate::Ascending,
    }
}

/// Deterministic in `seed`. Resamples verifier sets until the full truthful
/// feedback leaves between 1 and [`MAX_FINAL_CANDIDATES`] candidates.
pub fn generate_item(id: impl Into<String>, seed: u64, difficulty: Difficulty) -> Result<DeductionItem, BenchError> {
    if difficulty.code_length == 0 || difficulty.code_length > 6 {
        return Err(BenchError::InvalidItem("code_length must lie in 1..=6".into()));
    }
    if difficulty.verifier_count == 0 {
        return Err(BenchError::InvalidItem("verifier_count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alphabet = default_alphabet();
    let hidden: Code = (0..difficulty.code_length).map(|_| *alphabet.choose(&mut rng).expect("non-empty")).collect();
    let id = id.into();
    for _ in 0..GENERATION_ATTEMPTS {
        let mut preds: Vec<Predicate> = Vec::with_capacity(difficulty.verifier_count);
        let mut guard = 0;
        while preds.len() < difficulty.verifier_count && guard < 200 {
            guard += 1;
            let p = random_predicate(&mut rng, difficulty.code_length, &alphabet);
            if !preds.contains(&p) {
                preds.push(p);
            }
        }
        if preds.len() < difficulty.verifier_count {
            break;
        }
        let item = DeductionItem::new(id.clone(), hidden.clone(), &preds);
        let n = consistent_candidates(&item, &item.all_feedback())?.len();
        if (1..=MAX_FINAL_CANDIDATES).contains(&n) {
            return Ok(item);
        }
    }
    Err(BenchError::GenerationExhausted { attempts: GENERATION_ATTEMPTS })
}

/// The built-in benchmark, registered as `deduction-v1`.
#[derive(Clone, Debug, Default)]
pub struct DeductionPlugin;

impl DeductionPlugin {
    pub const ID: &'static str = "deduction-v1";

    pub fn new() -> Self {
        DeductionPlugin
    }
}

impl FeedbackOracle for DeductionPlugin {
    fn is_consistent(&self, item: &Value, feedback: &[Feedback], code: &[u8]) -> Result<bool, BenchError> {
        is_consistent(&DeductionItem::from_value(item)?, feedback, code)
    }

    fn candidate_count(&self, item: &Value, feedback: &[Feedback]) -> Result<usize, BenchError> {
        Ok(consistent_candidates(&DeductionItem::from_value(item)?, feedback)?.len())
    }
}

impl BenchmarkPlugin for DeductionPlugin {
    fn id(&self) -> &str {
        Self::ID
    }

    fn version(&self) -> &str {
        "1"
    }

    fn description(&self) -> &str {
        "Hidden-code deduction with predicate verifiers queried across rounds"
    }

    fn validate_item(&self, item: &Value) -> Result<(), BenchError> {
        DeductionItem::from_value(item).map(|_| ())
    }

    fn initial_messages(&self, item: &Value) -> Result<Vec<(Role, String)>, BenchError> {
        Ok(initial_messages(&DeductionItem::from_value(item)?))
    }

    fn parse_action(&self, assistant_text: &str) -> Action {
        parse_action(assistant_text)
    }

    fn react(&self, item: &Value, action: &Action, state: &RoundState) -> Result<Reaction, BenchError> {
        Ok(react(&DeductionItem::from_value(item)?, action, state))
    }

    fn max_rounds(&self, item: &Value) -> Result<u32, BenchError> {
        Ok(DeductionItem::from_value(item)?.round_limit)
    }

    fn score(&self, item: &Value, transcript: &[Message], status: SessionStatus) -> Result<Score, BenchError> {
        score_transcript(&DeductionItem::from_value(item)?, transcript, status)
    }

    fn redact_item(&self, item: &Value) -> Value {
        let mut v = item.clone();
        if let Some(obj) = v.as_object_mut() {
            obj.remove("hidden_code");
        }
        v
    }

    fn generate_item(&self, id: &str, seed: u64, params: &Value) -> Result<Value, BenchError> {
        let difficulty: Difficulty = if params.is_null() {
            Difficulty::default()
        } else {
            serde_json::from_value(params.clone()).map_err(|e| BenchError::InvalidItem(e.to_string()))?
        };
        Ok(generate_item(id, seed, difficulty)?.to_value())
    }

    fn oracle(&self) -> Option<&dyn FeedbackOracle> {
        Some(self)
    }
}

/// Round state for the reply at the end of `transcript`.
pub fn round_state_for(plugin: &dyn BenchmarkPlugin, transcript: &[Message]) -> RoundState {
    let mut history = actions_in(plugin, transcript);
    history.pop();
    RoundState { round: history.len() as u32 + 1, history }
}
