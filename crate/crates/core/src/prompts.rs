//! Prompt rendering for the four states and parsing of classifier-style
//! outputs.
//!
//! Utterance-generation prompts (`uu`, `au`) are plain text completion: the
//! exemplar conversations are laid out as transcripts and the prompt stops at
//! a speaker cue. Classification prompts (`ac`, `ss`) come in two flavours,
//! an instruction-style one for an assistant model and a completion-style one
//! for the generator. Each flavour starts with its own header line, which is
//! how [`detect_state`] recognises a prompt.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{PassageRecord, TokenCounter};
use crate::error::{DatasetError, PromptError};
use crate::types::{
    Anomaly, Answerability, Conversation, DocView, Document, Speaker, State, Utterance,
};

pub const UU_HEADER: &str = "Below are conversations between a curious user and a knowledgeable agent about a document. The user asks questions about the topic of the document, and some of the questions cannot be answered from it.";
pub const AU_HEADER: &str = "Below are conversations between a user and an agent about a document. The agent answers every question using only information found in the document, and says it cannot answer when the document does not contain the answer.";
pub const AC_ASSISTANT_HEADER: &str = "Read the document and the conversation, then decide whether the final question is answerable or unanswerable from the document.";
pub const AC_GENERATOR_HEADER: &str = "Each example shows a document, a conversation, and whether the last user question is answerable or unanswerable from the document.";
pub const SS_ASSISTANT_HEADER: &str = "Read the document and the question, then list the identifiers of the sentences that contain the answer to the question.";
pub const SS_GENERATOR_HEADER: &str = "Each example shows a document with numbered sentences, a question, and the numbers of the sentences that answer the question.";

const AC_ASSISTANT_ASK: &str = "Is the question answerable or unanswerable from the document?";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    Generator,
    Assistant,
}

/// A rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptText {
    pub text: String,
    pub state: State,
    pub model_kind: ModelKind,
    /// Exemplars dropped from the front to fit the token budget.
    pub dropped_exemplars: usize,
}

impl PromptText {
    /// The anomaly to record when exemplars were dropped.
    pub fn anomaly(&self) -> Option<Anomaly> {
        (self.dropped_exemplars > 0).then_some(Anomaly::ExemplarsDropped {
            state: self.state,
            dropped: self.dropped_exemplars,
        })
    }
}

/// Recognises the state a prompt was rendered for from its first line.
pub fn detect_state(prompt: &str) -> Option<State> {
    let first = prompt.lines().next()?;
    match first {
        UU_HEADER => Some(State::Uu),
        AU_HEADER => Some(State::Au),
        AC_ASSISTANT_HEADER | AC_GENERATOR_HEADER => Some(State::Ac),
        SS_ASSISTANT_HEADER | SS_GENERATOR_HEADER => Some(State::Ss),
        _ => None,
    }
}

/// A full demonstration conversation with its document.
#[derive(Debug, Clone, PartialEq)]
pub struct ConversationExemplar {
    pub document: Document,
    pub conversation: Conversation,
}

/// A labelled answerability instance.
#[derive(Debug, Clone, PartialEq)]
pub struct AcExemplar {
    pub document: Document,
    pub history: Vec<Utterance>,
    pub query: String,
    pub label: Answerability,
}

/// A query with its gold answer sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct SsExemplar {
    pub document: Document,
    pub query: String,
    pub sentence_ids: BTreeSet<usize>,
}

/// How many exemplars of each kind [`ExemplarSet::from_seeds`] selects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExemplarCounts {
    pub uu: usize,
    pub au: usize,
    pub ac_assistant_positive: usize,
    pub ac_assistant_negative: usize,
    pub ac_generator_positive: usize,
    pub ac_generator_negative: usize,
    pub ss_assistant: usize,
    pub ss_generator: usize,
}

impl Default for ExemplarCounts {
    fn default() -> Self {
        ExemplarCounts {
            uu: 2,
            au: 2,
            ac_assistant_positive: 3,
            ac_assistant_negative: 3,
            ac_generator_positive: 2,
            ac_generator_negative: 2,
            ss_assistant: 6,
            ss_generator: 3,
        }
    }
}

/// Demonstrations for every state and model kind.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExemplarSet {
    pub uu: Vec<ConversationExemplar>,
    pub au: Vec<ConversationExemplar>,
    pub ac_assistant: Vec<AcExemplar>,
    pub ac_generator: Vec<AcExemplar>,
    pub ss_assistant: Vec<SsExemplar>,
    pub ss_generator: Vec<SsExemplar>,
}

/// One turn of a seed conversation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedTurn {
    pub user: String,
    pub agent: String,
    pub answerability: Answerability,
    #[serde(default)]
    pub gold_sentence_ids: Vec<usize>,
}

/// One line of a seed file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub document: PassageRecord,
    pub turns: Vec<SeedTurn>,
}

/// A loaded seed: segmented document, its conversation, and per-turn labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Seed {
    pub document: Document,
    pub conversation: Conversation,
    pub turns: Vec<SeedTurn>,
}

impl Seed {
    pub fn from_record(rec: SeedRecord) -> Result<Seed, DatasetError> {
        let document = rec.document.into_document()?;
        let mut conversation = Conversation::new(document.id.clone());
        for (i, t) in rec.turns.iter().enumerate() {
            if let Some(&bad) = t.gold_sentence_ids.iter().find(|&&id| id >= document.num_sentences()) {
                return Err(crate::error::DocumentError::UnknownSentence {
                    doc: document.id.clone(),
                    id: bad,
                }
                .into());
            }
            conversation.utterances.push(Utterance::user(i, t.user.clone()));
            conversation.utterances.push(Utterance::agent(i, t.agent.clone()));
        }
        Ok(Seed {
            document,
            conversation,
            turns: rec.turns,
        })
    }

    /// Utterances preceding the user query of `turn`.
    pub fn history_before(&self, turn: usize) -> &[Utterance] {
        &self.conversation.utterances[..2 * turn]
    }
}

/// Reads a seed JSONL file.
pub fn load_seeds(path: &std::path::Path) -> Result<Vec<Seed>, DatasetError> {
    crate::dataset::read_jsonl::<SeedRecord>(path)?
        .into_iter()
        .map(Seed::from_record)
        .collect()
}

/// Turns in round-robin order across seeds: turn 0 of every seed, then turn 1, ...
fn round_robin(seeds: &[Seed]) -> impl Iterator<Item = (&Seed, usize)> {
    let max_turns = seeds.iter().map(|s| s.turns.len()).max().unwrap_or(0);
    (0..max_turns).flat_map(move |t| seeds.iter().filter(move |s| t < s.turns.len()).map(move |s| (s, t)))
}

fn take_exact<T: Clone>(state: State, pool: &[T], n: usize) -> Result<Vec<T>, PromptError> {
    if pool.len() < n {
        return Err(PromptError::MissingExemplars {
            state,
            needed: n,
            available: pool.len(),
        });
    }
    Ok(pool[..n].to_vec())
}

/// Positive and negative instances alternate, positives first.
fn interleave(pos: Vec<AcExemplar>, neg: Vec<AcExemplar>) -> Vec<AcExemplar> {
    let mut out = Vec::with_capacity(pos.len() + neg.len());
    let (mut p, mut n) = (pos.into_iter(), neg.into_iter());
    loop {
        match (p.next(), n.next()) {
            (None, None) => break,
            (a, b) => out.extend(a.into_iter().chain(b)),
        }
    }
    out
}

impl ExemplarSet {
    /// Draws every state's exemplars from the same seed conversations.
    pub fn from_seeds(seeds: &[Seed], counts: &ExemplarCounts) -> Result<Self, PromptError> {
        let convs: Vec<ConversationExemplar> = seeds
            .iter()
            .map(|s| ConversationExemplar {
                document: s.document.clone(),
                conversation: s.conversation.clone(),
            })
            .collect();
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        let mut selections = Vec::new();
        for (seed, t) in round_robin(seeds) {
            let turn = &seed.turns[t];
            let ex = AcExemplar {
                document: seed.document.clone(),
                history: seed.history_before(t).to_vec(),
                query: turn.user.clone(),
                label: turn.answerability,
            };
            match turn.answerability {
                Answerability::Answerable => positives.push(ex),
                Answerability::Unanswerable => negatives.push(ex),
            }
            if turn.answerability == Answerability::Answerable && !turn.gold_sentence_ids.is_empty() {
                selections.push(SsExemplar {
                    document: seed.document.clone(),
                    query: turn.user.clone(),
                    sentence_ids: turn.gold_sentence_ids.iter().copied().collect(),
                });
            }
        }
        Ok(ExemplarSet {
            uu: take_exact(State::Uu, &convs, counts.uu)?,
            au: take_exact(State::Au, &convs, counts.au)?,
            ac_assistant: interleave(
                take_exact(State::Ac, &positives, counts.ac_assistant_positive)?,
                take_exact(State::Ac, &negatives, counts.ac_assistant_negative)?,
            ),
            ac_generator: interleave(
                take_exact(State::Ac, &positives, counts.ac_generator_positive)?,
                take_exact(State::Ac, &negatives, counts.ac_generator_negative)?,
            ),
            ss_assistant: take_exact(State::Ss, &selections, counts.ss_assistant)?,
            ss_generator: take_exact(State::Ss, &selections, counts.ss_generator)?,
        })
    }
}

/// Optional limit on prompt size.
#[derive(Clone, Default)]
pub struct PromptOptions {
    pub token_budget: Option<(usize, Arc<dyn TokenCounter>)>,
}

impl std::fmt::Debug for PromptOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PromptOptions")
            .field("token_budget", &self.token_budget.as_ref().map(|(n, _)| n))
            .finish()
    }
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn render_turns(out: &mut String, utterances: &[Utterance]) {
    for u in utterances {
        out.push_str(u.speaker.tag());
        out.push(' ');
        out.push_str(&one_line(&u.text));
        out.push('\n');
    }
}

fn render_document(out: &mut String, title: &str, body: &str) {
    out.push_str("Document: ");
    out.push_str(&one_line(title));
    out.push('\n');
    out.push_str(body.trim());
    out.push_str("\n\n");
}

fn render_numbered(out: &mut String, doc: &Document) {
    out.push_str("Document: ");
    out.push_str(&one_line(&doc.title));
    out.push('\n');
    for s in &doc.sentences {
        out.push_str(&format!("[{}] {}\n", s.sentence_id, one_line(&s.text)));
    }
    out.push('\n');
}

fn render_ids(ids: &BTreeSet<usize>) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
}

/// Renders one exemplar block per item, followed by the target section.
/// Blocks are separated by blank lines; the prompt never ends in whitespace.
fn assemble(
    header: &str,
    blocks: &[String],
    target: &str,
    state: State,
    kind: ModelKind,
    opts: &PromptOptions,
) -> Result<PromptText, PromptError> {
    let build = |skip: usize| {
        let mut s = String::new();
        s.push_str(header);
        s.push_str("\n\n");
        for b in &blocks[skip..] {
            s.push_str(b);
            s.push_str("\n\n");
        }
        s.push_str(target);
        s
    };
    let mut dropped = 0;
    let mut text = build(0);
    if let Some((budget, counter)) = &opts.token_budget {
        while dropped < blocks.len() {
            let n = counter
                .count(&text)
                .map_err(|e| PromptError::InvalidHistory(format!("token counting failed: {e}")))?;
            if n <= *budget {
                break;
            }
            dropped += 1;
            text = build(dropped);
        }
    }
    Ok(PromptText {
        text,
        state,
        model_kind: kind,
        dropped_exemplars: dropped,
    })
}

fn check_pairs(history: &[Utterance]) -> Result<(), PromptError> {
    for (i, u) in history.iter().enumerate() {
        let expected = if i % 2 == 0 { Speaker::User } else { Speaker::Agent };
        if u.speaker != expected {
            return Err(PromptError::InvalidHistory(format!(
                "utterance {i} should be spoken by {expected:?}"
            )));
        }
    }
    Ok(())
}

fn conversation_block(ex: &ConversationExemplar) -> String {
    let mut s = String::new();
    render_document(&mut s, &ex.document.title, &ex.document.text);
    render_turns(&mut s, &ex.conversation.utterances);
    s.trim_end().to_string()
}

fn require<T>(state: State, items: &[T]) -> Result<(), PromptError> {
    if items.is_empty() {
        return Err(PromptError::MissingExemplars {
            state,
            needed: 1,
            available: 0,
        });
    }
    Ok(())
}

/// User-utterance prompt: exemplar transcripts, then the target document and
/// history, ending at a `User:` cue.
pub fn build_uu_prompt(
    doc: &Document,
    history: &[Utterance],
    ex: &ExemplarSet,
    opts: &PromptOptions,
) -> Result<PromptText, PromptError> {
    require(State::Uu, &ex.uu)?;
    if !history.len().is_multiple_of(2) {
        return Err(PromptError::InvalidHistory("history must end after an agent turn".into()));
    }
    check_pairs(history)?;
    let blocks: Vec<String> = ex.uu.iter().map(conversation_block).collect();
    let mut target = String::new();
    render_document(&mut target, &doc.title, &doc.text);
    render_turns(&mut target, history);
    target.push_str("User:");
    assemble(UU_HEADER, &blocks, &target, State::Uu, ModelKind::Generator, opts)
}

/// Agent-utterance prompt over the (possibly restricted) document, ending at
/// an `Agent:` cue. The last history element must be the user query.
pub fn build_au_prompt<'a>(
    doc_star: impl Into<DocView<'a>>,
    history_plus_query: &[Utterance],
    ex: &ExemplarSet,
    opts: &PromptOptions,
) -> Result<PromptText, PromptError> {
    require(State::Au, &ex.au)?;
    match history_plus_query.last() {
        Some(u) if u.speaker == Speaker::User => {}
        _ => {
            return Err(PromptError::InvalidHistory(
                "agent prompt needs a final user query".into(),
            ))
        }
    }
    check_pairs(history_plus_query)?;
    let view = doc_star.into();
    let blocks: Vec<String> = ex.au.iter().map(conversation_block).collect();
    let mut target = String::new();
    render_document(&mut target, view.title(), view.body());
    render_turns(&mut target, history_plus_query);
    target.push_str("Agent:");
    assemble(AU_HEADER, &blocks, &target, State::Au, ModelKind::Generator, opts)
}

fn label_word(a: Answerability) -> &'static str {
    match a {
        Answerability::Answerable => "answerable",
        Answerability::Unanswerable => "unanswerable",
    }
}

fn ac_block(
    kind: ModelKind,
    doc: &Document,
    history: &[Utterance],
    query: &str,
    label: Option<Answerability>,
) -> String {
    let mut s = String::new();
    render_document(&mut s, &doc.title, &doc.text);
    match kind {
        ModelKind::Assistant => {
            s.push_str("Conversation:\n");
            if history.is_empty() {
                s.push_str("(none)\n");
            }
            render_turns(&mut s, history);
            s.push_str("Question: ");
            s.push_str(&one_line(query));
            s.push('\n');
            s.push_str(AC_ASSISTANT_ASK);
            s.push_str("\nAnswer:");
        }
        ModelKind::Generator => {
            render_turns(&mut s, history);
            s.push_str("User: ");
            s.push_str(&one_line(query));
            s.push_str("\nAnswerability:");
        }
    }
    if let Some(l) = label {
        s.push(' ');
        s.push_str(label_word(l));
    }
    s
}

/// Answerability prompt with positive and negative exemplars.
pub fn build_ac_prompt(
    doc: &Document,
    history: &[Utterance],
    query: &str,
    ex: &ExemplarSet,
    model_kind: ModelKind,
    opts: &PromptOptions,
) -> Result<PromptText, PromptError> {
    let (pool, header) = match model_kind {
        ModelKind::Assistant => (&ex.ac_assistant, AC_ASSISTANT_HEADER),
        ModelKind::Generator => (&ex.ac_generator, AC_GENERATOR_HEADER),
    };
    require(State::Ac, pool)?;
    check_pairs(history)?;
    let blocks: Vec<String> = pool
        .iter()
        .map(|e| ac_block(model_kind, &e.document, &e.history, &e.query, Some(e.label)))
        .collect();
    let target = ac_block(model_kind, doc, history, query, None);
    assemble(header, &blocks, &target, State::Ac, model_kind, opts)
}

fn ss_block(kind: ModelKind, doc: &Document, query: &str, ids: Option<&BTreeSet<usize>>) -> String {
    let mut s = String::new();
    render_numbered(&mut s, doc);
    s.push_str("Question: ");
    s.push_str(&one_line(query));
    s.push('\n');
    s.push_str(match kind {
        ModelKind::Assistant => "Relevant sentences:",
        ModelKind::Generator => "Answer found in sentences:",
    });
    if let Some(ids) = ids {
        s.push(' ');
        s.push_str(&render_ids(ids));
    }
    s
}

/// Sentence-selection prompt: every sentence carries its numeric identifier.
pub fn build_ss_prompt(
    doc: &Document,
    query: &str,
    ex: &ExemplarSet,
    model_kind: ModelKind,
    opts: &PromptOptions,
) -> Result<PromptText, PromptError> {
    let (pool, header) = match model_kind {
        ModelKind::Assistant => (&ex.ss_assistant, SS_ASSISTANT_HEADER),
        ModelKind::Generator => (&ex.ss_generator, SS_GENERATOR_HEADER),
    };
    require(State::Ss, pool)?;
    if doc.sentences.is_empty() {
        return Err(PromptError::NoSentences);
    }
    let blocks: Vec<String> = pool
        .iter()
        .map(|e| ss_block(model_kind, &e.document, &e.query, Some(&e.sentence_ids)))
        .collect();
    let target = ss_block(model_kind, doc, query, None);
    assemble(header, &blocks, &target, State::Ss, model_kind, opts)
}

/// Answerability verdict. "unanswerable" is searched first because it
/// contains "answerable"; no match defaults to answerable with an anomaly.
pub fn parse_ac_output(completion: &str) -> (Answerability, Option<Anomaly>) {
    let lower = completion.to_lowercase();
    if lower.contains("unanswerable") {
        (Answerability::Unanswerable, None)
    } else if lower.contains("answerable") {
        (Answerability::Answerable, None)
    } else {
        (
            Answerability::Answerable,
            Some(Anomaly::ParseError {
                state: State::Ac,
                completion: completion.to_string(),
            }),
        )
    }
}

/// Every integer in `completion` within `0..=max_id`, deduplicated and
/// sorted. Out-of-range integers are dropped and reported.
pub fn parse_ss_output(completion: &str, max_id: usize) -> (BTreeSet<usize>, Option<Anomaly>) {
    let mut ids = BTreeSet::new();
    let mut out_of_range = Vec::new();
    for run in completion.split(|c: char| !c.is_ascii_digit()).filter(|r| !r.is_empty()) {
        let n: u64 = run.parse().unwrap_or(u64::MAX);
        match usize::try_from(n) {
            Ok(id) if id <= max_id => {
                ids.insert(id);
            }
            _ => out_of_range.push(n),
        }
    }
    let anomaly = (!out_of_range.is_empty()).then_some(Anomaly::OutOfRange {
        state: State::Ss,
        ids: out_of_range,
    });
    (ids, anomaly)
}
