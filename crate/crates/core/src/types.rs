//! Domain types shared by every stage of the pipeline: grounding documents,
//! conversations with their per-turn traces, and algorithm descriptions.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backend::DecodingParams;
use crate::error::DocumentError;

/// Default response emitted for queries the document cannot answer.
pub const DEFAULT_NO_ANSWER_TEXT: &str = "CANNOTANSWER";

/// One of the four states of the turn-generation state machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum State {
    /// User utterance generation.
    Uu,
    /// Answerability classification.
    Ac,
    /// Answer sentence selection.
    Ss,
    /// Agent utterance generation.
    Au,
}

impl State {
    pub const ALL: [State; 4] = [State::Uu, State::Ac, State::Ss, State::Au];

    pub fn as_str(self) -> &'static str {
        match self {
            State::Uu => "uu",
            State::Ac => "ac",
            State::Ss => "ss",
            State::Au => "au",
        }
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for State {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uu" => Ok(State::Uu),
            "ac" => Ok(State::Ac),
            "ss" => Ok(State::Ss),
            "au" => Ok(State::Au),
            other => Err(format!("unknown state {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Answerability {
    Answerable,
    Unanswerable,
}

/// Character-offset span `[start, end)` into a document's text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub sentence_id: usize,
    pub span: Span,
    pub text: String,
}

/// A grounding passage with a stable sentence segmentation.
///
/// Sentence spans cover the text in order; anything between two spans (and
/// before the first or after the last) is whitespace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub text: String,
    pub sentences: Vec<Sentence>,
}

impl Document {
    /// Builds a document from already segmented sentences, joined by a single space.
    pub fn from_sentences<S: AsRef<str>>(
        id: impl Into<String>,
        title: impl Into<String>,
        sentences: &[S],
    ) -> Result<Self, DocumentError> {
        let mut text = String::new();
        let mut out = Vec::with_capacity(sentences.len());
        let mut offset = 0usize;
        for (i, s) in sentences.iter().enumerate() {
            let s = s.as_ref().trim();
            if s.is_empty() {
                return Err(DocumentError::EmptySentence(i));
            }
            if i > 0 {
                text.push(' ');
                offset += 1;
            }
            let len = s.chars().count();
            text.push_str(s);
            out.push(Sentence {
                sentence_id: i,
                span: Span {
                    start: offset,
                    end: offset + len,
                },
                text: s.to_string(),
            });
            offset += len;
        }
        if out.is_empty() {
            return Err(DocumentError::EmptyDocument);
        }
        Ok(Document {
            id: id.into(),
            title: title.into(),
            text,
            sentences: out,
        })
    }

    pub fn num_sentences(&self) -> usize {
        self.sentences.len()
    }

    pub fn max_sentence_id(&self) -> Option<usize> {
        self.sentences.len().checked_sub(1)
    }

    pub fn sentence(&self, id: usize) -> Option<&Sentence> {
        self.sentences.get(id)
    }

    /// Checks the segmentation invariants; used on documents read from disk.
    pub fn validate(&self) -> Result<(), String> {
        if self.text.trim().is_empty() {
            return Err("text is empty".into());
        }
        if self.sentences.is_empty() {
            return Err("document has no sentences".into());
        }
        let chars: Vec<char> = self.text.chars().collect();
        let mut cursor = 0usize;
        for (i, s) in self.sentences.iter().enumerate() {
            if s.sentence_id != i {
                return Err(format!("sentence ids not contiguous at position {i}"));
            }
            if s.span.start < cursor || s.span.end < s.span.start || s.span.end > chars.len() {
                return Err(format!("sentence {i} span out of order or out of bounds"));
            }
            if chars[cursor..s.span.start].iter().any(|c| !c.is_whitespace()) {
                return Err(format!("non-whitespace text before sentence {i}"));
            }
            let body: String = chars[s.span.start..s.span.end].iter().collect();
            if body != s.text {
                return Err(format!("sentence {i} text does not match its span"));
            }
            if body.trim().is_empty() {
                return Err(format!("sentence {i} is empty"));
            }
            cursor = s.span.end;
        }
        if chars[cursor..].iter().any(|c| !c.is_whitespace()) {
            return Err("non-whitespace text after the last sentence".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum RestrictionMode {
    /// Keep only the selected sentences.
    #[default]
    OnlySelected,
    /// Keep the whole text and wrap the selected sentences in markers.
    Marked,
}

/// Delimiters wrapped around selected sentences in [`RestrictionMode::Marked`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Markers {
    pub open: String,
    pub close: String,
}

impl Default for Markers {
    fn default() -> Self {
        Markers {
            open: "[[".into(),
            close: "]]".into(),
        }
    }
}

/// The document view handed to agent generation after sentence selection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestrictedDocument {
    pub source_id: String,
    pub title: String,
    pub mode: RestrictionMode,
    pub selected_ids: BTreeSet<usize>,
    pub rendered_text: String,
}

impl RestrictedDocument {
    pub fn new(
        doc: &Document,
        selected_ids: &BTreeSet<usize>,
        mode: RestrictionMode,
        markers: &Markers,
    ) -> Result<Self, DocumentError> {
        if let Some(&bad) = selected_ids.iter().find(|&&id| id >= doc.sentences.len()) {
            return Err(DocumentError::UnknownSentence {
                doc: doc.id.clone(),
                id: bad,
            });
        }
        let rendered_text = match mode {
            RestrictionMode::OnlySelected => selected_ids
                .iter()
                .map(|&id| doc.sentences[id].text.as_str())
                .collect::<Vec<_>>()
                .join(" "),
            RestrictionMode::Marked => {
                let chars: Vec<char> = doc.text.chars().collect();
                let mut out = String::with_capacity(doc.text.len() + 4 * selected_ids.len());
                let mut cursor = 0usize;
                for s in &doc.sentences {
                    out.extend(&chars[cursor..s.span.start]);
                    let selected = selected_ids.contains(&s.sentence_id);
                    if selected {
                        out.push_str(&markers.open);
                    }
                    out.push_str(&s.text);
                    if selected {
                        out.push_str(&markers.close);
                    }
                    cursor = s.span.end;
                }
                out.extend(&chars[cursor..]);
                out
            }
        };
        Ok(RestrictedDocument {
            source_id: doc.id.clone(),
            title: doc.title.clone(),
            mode,
            selected_ids: selected_ids.clone(),
            rendered_text,
        })
    }
}

/// Either the full grounding document or its restricted view.
#[derive(Debug, Clone, Copy)]
pub enum DocView<'a> {
    Full(&'a Document),
    Restricted(&'a RestrictedDocument),
}

impl<'a> DocView<'a> {
    pub fn title(&self) -> &'a str {
        match self {
            DocView::Full(d) => &d.title,
            DocView::Restricted(r) => &r.title,
        }
    }

    pub fn body(&self) -> &'a str {
        match self {
            DocView::Full(d) => &d.text,
            DocView::Restricted(r) => &r.rendered_text,
        }
    }
}

impl<'a> From<&'a Document> for DocView<'a> {
    fn from(d: &'a Document) -> Self {
        DocView::Full(d)
    }
}

impl<'a> From<&'a RestrictedDocument> for DocView<'a> {
    fn from(r: &'a RestrictedDocument) -> Self {
        DocView::Restricted(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Speaker {
    User,
    Agent,
}

impl Speaker {
    pub fn tag(self) -> &'static str {
        match self {
            Speaker::User => "User:",
            Speaker::Agent => "Agent:",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    pub turn_index: usize,
}

impl Utterance {
    pub fn user(turn_index: usize, text: impl Into<String>) -> Self {
        Utterance {
            speaker: Speaker::User,
            text: text.into(),
            turn_index,
        }
    }

    pub fn agent(turn_index: usize, text: impl Into<String>) -> Self {
        Utterance {
            speaker: Speaker::Agent,
            text: text.into(),
            turn_index,
        }
    }
}

/// A recoverable irregularity observed while generating a turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Anomaly {
    /// A classifier-style output could not be parsed; a default was used.
    ParseError { state: State, completion: String },
    /// Sentence identifiers outside the document were dropped.
    OutOfRange { state: State, ids: Vec<u64> },
    /// Sentence selection produced nothing usable; the full document was used.
    SelectionFallback { reason: String },
    /// Whole exemplars were dropped to fit the prompt budget.
    ExemplarsDropped { state: State, dropped: usize },
}

impl Anomaly {
    pub fn kind(&self) -> &'static str {
        match self {
            Anomaly::ParseError { .. } => "ParseError",
            Anomaly::OutOfRange { .. } => "OutOfRange",
            Anomaly::SelectionFallback { .. } => "SelectionFallback",
            Anomaly::ExemplarsDropped { .. } => "ExemplarsDropped",
        }
    }
}

/// One prompt/completion round trip recorded in a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub state: State,
    pub prompt_text: String,
    pub completion_text: String,
    pub decoding_used: DecodingParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnTrace {
    pub algorithm_id: String,
    pub transitions: Vec<State>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answerability: Option<Answerability>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_sentence_ids: Option<BTreeSet<usize>>,
    #[serde(default)]
    pub raw_exchanges: Vec<Exchange>,
    #[serde(default)]
    pub errors: Vec<Anomaly>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub document_id: String,
    pub utterances: Vec<Utterance>,
    #[serde(default)]
    pub traces: Vec<TurnTrace>,
}

impl Conversation {
    pub fn new(document_id: impl Into<String>) -> Self {
        Conversation {
            document_id: document_id.into(),
            utterances: Vec::new(),
            traces: Vec::new(),
        }
    }

    /// Number of complete user/agent pairs.
    pub fn num_pairs(&self) -> usize {
        self.utterances.len() / 2
    }

    /// `(user, agent)` pairs in order; a trailing unpaired utterance is ignored.
    pub fn pairs(&self) -> impl Iterator<Item = (&Utterance, &Utterance)> {
        self.utterances.chunks_exact(2).map(|p| (&p[0], &p[1]))
    }

    /// Drops the prompt/completion payloads while keeping the rest of the traces.
    pub fn strip_exchanges(&mut self) {
        for t in &mut self.traces {
            t.raw_exchanges.clear();
        }
    }
}

/// The three legal transition sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sequence {
    #[serde(rename = "UU_AU")]
    UuAu,
    #[serde(rename = "UU_AC_AU")]
    UuAcAu,
    #[serde(rename = "UU_AC_SS_AU")]
    UuAcSsAu,
}

impl Sequence {
    pub fn states(self) -> &'static [State] {
        match self {
            Sequence::UuAu => &[State::Uu, State::Au],
            Sequence::UuAcAu => &[State::Uu, State::Ac, State::Au],
            Sequence::UuAcSsAu => &[State::Uu, State::Ac, State::Ss, State::Au],
        }
    }

    pub fn contains(self, state: State) -> bool {
        self.states().contains(&state)
    }

    /// True if `transitions` equals one of the three legal sequences.
    pub fn is_legal(transitions: &[State]) -> bool {
        [Sequence::UuAu, Sequence::UuAcAu, Sequence::UuAcSsAu]
            .iter()
            .any(|s| s.states() == transitions)
    }
}

/// A generation algorithm: a transition sequence plus the states that run on
/// the assistant model instead of the generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlgorithmSpec {
    pub id: String,
    pub sequence: Sequence,
    #[serde(default)]
    pub assistant_states: BTreeSet<State>,
    #[serde(default)]
    pub restriction_mode: RestrictionMode,
    #[serde(default)]
    pub markers: Markers,
    #[serde(default = "default_no_answer_text")]
    pub no_answer_text: String,
}

fn default_no_answer_text() -> String {
    DEFAULT_NO_ANSWER_TEXT.to_string()
}

impl AlgorithmSpec {
    pub fn new(id: &str, sequence: Sequence, assistant_states: &[State]) -> Self {
        AlgorithmSpec {
            id: id.to_string(),
            sequence,
            assistant_states: assistant_states.iter().copied().collect(),
            restriction_mode: RestrictionMode::OnlySelected,
            markers: Markers::default(),
            no_answer_text: default_no_answer_text(),
        }
    }

    /// The five shipped configurations.
    pub fn presets() -> Vec<AlgorithmSpec> {
        vec![
            AlgorithmSpec::new("uu-au", Sequence::UuAu, &[]),
            AlgorithmSpec::new("uu-ac-au", Sequence::UuAcAu, &[]),
            AlgorithmSpec::new("uu-ac-au-assisted", Sequence::UuAcAu, &[State::Ac]),
            AlgorithmSpec::new("uu-ac-ss-au", Sequence::UuAcSsAu, &[]),
            AlgorithmSpec::new(
                "uu-ac-ss-au-assisted",
                Sequence::UuAcSsAu,
                &[State::Ac, State::Ss],
            ),
        ]
    }

    pub fn preset(id: &str) -> Option<AlgorithmSpec> {
        Self::presets().into_iter().find(|a| a.id == id)
    }

    pub fn uses_assistant(&self) -> bool {
        !self.assistant_states.is_empty()
    }

    pub fn validate(&self) -> Result<(), String> {
        for s in &self.assistant_states {
            if !matches!(s, State::Ac | State::Ss) {
                return Err(format!("state {s} cannot run on the assistant"));
            }
            if !self.sequence.contains(*s) {
                return Err(format!("assistant state {s} is not part of the sequence"));
            }
        }
        if self.no_answer_text.trim().is_empty() {
            return Err("no_answer_text is empty".into());
        }
        Ok(())
    }
}

/// A broken Conversation or TurnTrace invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Violation {
    DocumentMismatch { expected: String, found: String },
    AlternationViolation { index: usize },
    TurnIndexMismatch { index: usize },
    EmptyUtterance { index: usize },
    TraceCountMismatch { pairs: usize, traces: usize },
    IllegalTransitions { turn: usize },
    AnswerabilityPresence { turn: usize },
    SelectionPresence { turn: usize },
    SelectedIdOutOfRange { turn: usize, id: usize },
    NoAnswerContractViolation { turn: usize },
}

/// Checks every Conversation/TurnTrace invariant against `doc`; an empty result
/// means the record is well formed.
pub fn validate_conversation(
    conv: &Conversation,
    doc: &Document,
    no_answer_text: &str,
) -> Vec<Violation> {
    let mut out = Vec::new();
    if conv.document_id != doc.id {
        out.push(Violation::DocumentMismatch {
            expected: doc.id.clone(),
            found: conv.document_id.clone(),
        });
    }
    for (i, u) in conv.utterances.iter().enumerate() {
        let expected = if i % 2 == 0 { Speaker::User } else { Speaker::Agent };
        if u.speaker != expected {
            out.push(Violation::AlternationViolation { index: i });
        }
        if u.turn_index != i / 2 {
            out.push(Violation::TurnIndexMismatch { index: i });
        }
        if u.text.trim().is_empty() {
            out.push(Violation::EmptyUtterance { index: i });
        }
    }
    let pairs = conv.utterances.len() / 2;
    if !conv.utterances.len().is_multiple_of(2) || conv.traces.len() != pairs {
        out.push(Violation::TraceCountMismatch {
            pairs,
            traces: conv.traces.len(),
        });
    }
    for (turn, trace) in conv.traces.iter().enumerate() {
        if !Sequence::is_legal(&trace.transitions) {
            out.push(Violation::IllegalTransitions { turn });
        }
        let has_ac = trace.transitions.contains(&State::Ac);
        let has_ss = trace.transitions.contains(&State::Ss);
        if has_ac != trace.answerability.is_some() {
            out.push(Violation::AnswerabilityPresence { turn });
        }
        let expect_selection = has_ss && trace.answerability == Some(Answerability::Answerable);
        if expect_selection != trace.selected_sentence_ids.is_some() {
            out.push(Violation::SelectionPresence { turn });
        }
        if let Some(ids) = &trace.selected_sentence_ids {
            for &id in ids {
                if id >= doc.sentences.len() {
                    out.push(Violation::SelectedIdOutOfRange { turn, id });
                }
            }
        }
        if trace.answerability == Some(Answerability::Unanswerable) {
            let agent_ok = conv
                .utterances
                .get(2 * turn + 1)
                .is_some_and(|u| u.text == no_answer_text);
            let generated_after = trace
                .raw_exchanges
                .iter()
                .any(|e| matches!(e.state, State::Ss | State::Au));
            if !agent_ok || has_ss || generated_after {
                out.push(Violation::NoAnswerContractViolation { turn });
            }
        }
    }
    out
}
