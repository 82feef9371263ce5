//! The turn-generation state machine.
//!
//! One call to [`Engine::run_turn`] produces a user/agent pair by walking the
//! algorithm's transition sequence: generate a query (`uu`), optionally
//! classify it (`ac`), optionally select answer sentences (`ss`), then
//! produce the agent response (`au`). Unanswerable queries short-circuit to
//! the algorithm's no-answer text without further backend calls.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{stable_hash, Backend, DecodingParams};
use crate::error::EngineError;
use crate::pool::ordered_map;
use crate::prompts::{
    build_ac_prompt, build_au_prompt, build_ss_prompt, build_uu_prompt, parse_ac_output,
    parse_ss_output, ExemplarSet, ModelKind, PromptOptions, PromptText,
};
use crate::types::{
    AlgorithmSpec, Anomaly, Answerability, Conversation, DocView, Document, Exchange,
    RestrictedDocument, State, TurnTrace, Utterance,
};

/// Stops for free-text states; the model would otherwise keep writing the
/// dialogue.
const UTTERANCE_STOPS: [&str; 3] = ["\n", "User:", "Agent:"];
const LABEL_STOPS: [&str; 1] = ["\n"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub n_turns: usize,
    pub uu_decoding: DecodingParams,
    pub other_decoding: DecodingParams,
    /// Overrides the `max_new_tokens` of both decoding settings.
    pub max_new_tokens: usize,
    pub rng_seed: Option<u64>,
    /// Conversations generated concurrently.
    pub parallelism: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_turns: 5,
            uu_decoding: DecodingParams::nucleus(0.9, 128),
            other_decoding: DecodingParams::greedy(128),
            max_new_tokens: 128,
            rng_seed: None,
            parallelism: 1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::InvalidRunConfig(m));
        if self.n_turns == 0 {
            return bad("n_turns must be at least 1".into());
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be positive".into());
        }
        for d in [&self.uu_decoding, &self.other_decoding] {
            d.validate().map_err(EngineError::InvalidRunConfig)?;
        }
        Ok(())
    }
}

/// Backends by role. The assistant serves the states listed in the
/// algorithm's `assistant_states`.
#[derive(Clone)]
pub struct Backends {
    pub generator: Arc<dyn Backend>,
    pub assistant: Option<Arc<dyn Backend>>,
}

impl Backends {
    pub fn generator_only(generator: Arc<dyn Backend>) -> Self {
        Backends {
            generator,
            assistant: None,
        }
    }
}

/// Outcome of a corpus run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CorpusSummary {
    pub attempted: usize,
    pub succeeded: usize,
    pub failed: usize,
    /// `(document_id, error)` per failed document.
    pub failures: Vec<(String, String)>,
    /// Anomaly counts by kind across successful conversations.
    pub anomalies: BTreeMap<String, usize>,
    pub cancelled: bool,
}

/// Keeps the text up to the first newline or speaker tag, trimmed.
pub fn clean_utterance(raw: &str) -> &str {
    let s = raw.trim_start();
    let cut = ["\n", "User:", "Agent:"]
        .iter()
        .filter_map(|t| s.find(t))
        .min()
        .unwrap_or(s.len());
    s[..cut].trim()
}

pub struct Engine {
    algo: AlgorithmSpec,
    backends: Backends,
    exemplars: Arc<ExemplarSet>,
    cfg: RunConfig,
    prompt_options: PromptOptions,
}

impl Engine {
    pub fn new(
        algo: AlgorithmSpec,
        backends: Backends,
        exemplars: Arc<ExemplarSet>,
        cfg: RunConfig,
    ) -> Result<Self, EngineError> {
        algo.validate().map_err(EngineError::Config)?;
        cfg.validate()?;
        match (algo.uses_assistant(), backends.assistant.is_some()) {
            (true, false) => {
                return Err(EngineError::Config(format!(
                    "algorithm {} needs an assistant backend",
                    algo.id
                )))
            }
            (false, true) => {
                return Err(EngineError::Config(format!(
                    "algorithm {} does not use an assistant backend",
                    algo.id
                )))
            }
            _ => {}
        }
        Ok(Engine {
            algo,
            backends,
            exemplars,
            cfg,
            prompt_options: PromptOptions::default(),
        })
    }

    pub fn with_prompt_options(mut self, opts: PromptOptions) -> Self {
        self.prompt_options = opts;
        self
    }

    pub fn algorithm(&self) -> &AlgorithmSpec {
        &self.algo
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    fn role(&self, state: State) -> (&dyn Backend, ModelKind) {
        match &self.backends.assistant {
            Some(a) if self.algo.assistant_states.contains(&state) => (a.as_ref(), ModelKind::Assistant),
            _ => (self.backends.generator.as_ref(), ModelKind::Generator),
        }
    }

    fn decoding(&self, state: State, doc: &Document, turn: usize) -> DecodingParams {
        let (base, stops): (&DecodingParams, &[&str]) = match state {
            State::Uu => (&self.cfg.uu_decoding, &UTTERANCE_STOPS),
            State::Au => (&self.cfg.other_decoding, &UTTERANCE_STOPS),
            State::Ac | State::Ss => (&self.cfg.other_decoding, &LABEL_STOPS),
        };
        let mut d = base.clone().with_stops(stops.iter().copied());
        d.max_new_tokens = self.cfg.max_new_tokens;
        d.seed = self.cfg.rng_seed.map(|seed| {
            let key = format!("{seed}\u{1f}{}\u{1f}{turn}\u{1f}{state}", doc.id);
            stable_hash(key.as_bytes())
        });
        d
    }

    fn call(
        &self,
        state: State,
        backend: &dyn Backend,
        prompt: PromptText,
        dec: DecodingParams,
        trace: &mut TurnTrace,
    ) -> Result<String, EngineError> {
        if let Some(a) = prompt.anomaly() {
            trace.errors.push(a);
        }
        let res = backend
            .complete(&prompt.text, &dec)
            .map_err(|source| EngineError::Backend { state, source })?;
        trace.transitions.push(state);
        trace.raw_exchanges.push(Exchange {
            state,
            prompt_text: prompt.text,
            completion_text: res.text.clone(),
            decoding_used: dec,
        });
        Ok(res.text)
    }

    /// Generates the next user/agent pair after `history`, which must be
    /// empty or end with an agent turn.
    pub fn run_turn(
        &self,
        doc: &Document,
        history: &[Utterance],
    ) -> Result<(Utterance, Utterance, TurnTrace), EngineError> {
        let turn = history.len() / 2;
        let ex = &self.exemplars;
        let opts = &self.prompt_options;
        let mut trace = TurnTrace {
            algorithm_id: self.algo.id.clone(),
            transitions: Vec::with_capacity(4),
            answerability: None,
            selected_sentence_ids: None,
            raw_exchanges: Vec::new(),
            errors: Vec::new(),
        };

        let prompt = build_uu_prompt(doc, history, ex, opts)?;
        let gen = self.backends.generator.as_ref();
        let raw = self.call(State::Uu, gen, prompt, self.decoding(State::Uu, doc, turn), &mut trace)?;
        let query = clean_utterance(&raw);
        if query.is_empty() {
            return Err(EngineError::EmptyGeneration(State::Uu));
        }
        let user = Utterance::user(turn, query);

        let seq = self.algo.sequence;
        if seq.contains(State::Ac) {
            let (backend, kind) = self.role(State::Ac);
            let prompt = build_ac_prompt(doc, history, &user.text, ex, kind, opts)?;
            let raw = self.call(State::Ac, backend, prompt, self.decoding(State::Ac, doc, turn), &mut trace)?;
            let (verdict, anomaly) = parse_ac_output(&raw);
            trace.errors.extend(anomaly);
            trace.answerability = Some(verdict);
            if verdict == Answerability::Unanswerable {
                // The agent turn is fixed; no further model call is made.
                trace.transitions.push(State::Au);
                let agent = Utterance::agent(turn, self.algo.no_answer_text.clone());
                return Ok((user, agent, trace));
            }
        }

        let restricted;
        let mut view = DocView::Full(doc);
        if seq.contains(State::Ss) {
            let (backend, kind) = self.role(State::Ss);
            let prompt = build_ss_prompt(doc, &user.text, ex, kind, opts)?;
            let raw = self.call(State::Ss, backend, prompt, self.decoding(State::Ss, doc, turn), &mut trace)?;
            let max_id = doc.max_sentence_id().unwrap_or(0);
            let (ids, anomaly) = parse_ss_output(&raw, max_id);
            trace.errors.extend(anomaly);
            if ids.is_empty() {
                trace.errors.push(Anomaly::SelectionFallback {
                    reason: format!("no usable sentence ids in {raw:?}"),
                });
                trace.selected_sentence_ids = Some((0..doc.num_sentences()).collect::<BTreeSet<_>>());
            } else {
                restricted = RestrictedDocument::new(doc, &ids, self.algo.restriction_mode, &self.algo.markers)
                    .map_err(|e| EngineError::Config(e.to_string()))?;
                view = DocView::Restricted(&restricted);
                trace.selected_sentence_ids = Some(ids);
            }
        }

        let mut dialogue = history.to_vec();
        dialogue.push(user.clone());
        let prompt = build_au_prompt(view, &dialogue, ex, opts)?;
        let raw = self.call(State::Au, gen, prompt, self.decoding(State::Au, doc, turn), &mut trace)?;
        let answer = clean_utterance(&raw);
        if answer.is_empty() {
            return Err(EngineError::EmptyGeneration(State::Au));
        }
        Ok((user, Utterance::agent(turn, answer), trace))
    }

    /// Generates `n_turns` pairs; any failure discards the whole conversation.
    pub fn run_conversation(&self, doc: &Document) -> Result<Conversation, EngineError> {
        let mut conv = Conversation::new(doc.id.clone());
        for _ in 0..self.cfg.n_turns {
            let (user, agent, trace) = self.run_turn(doc, &conv.utterances)?;
            conv.utterances.push(user);
            conv.utterances.push(agent);
            conv.traces.push(trace);
        }
        Ok(conv)
    }

    /// One conversation per document, delivered to `sink` in input order.
    /// Failed documents are logged, counted and skipped. Setting `cancel`
    /// stops new documents from starting; running ones still complete.
    pub fn run_corpus(
        &self,
        docs: &[Document],
        cancel: Option<&AtomicBool>,
        mut sink: impl FnMut(Conversation),
    ) -> CorpusSummary {
        let mut summary = CorpusSummary::default();
        let processed = ordered_map(
            docs,
            self.cfg.parallelism,
            cancel,
            |_, doc| self.run_conversation(doc),
            |i, result| match result {
                Ok(conv) => {
                    summary.succeeded += 1;
                    for a in conv.traces.iter().flat_map(|t| &t.errors) {
                        *summary.anomalies.entry(a.kind().to_string()).or_default() += 1;
                    }
                    sink(conv);
                }
                Err(e) => {
                    let reason = error_chain(&e);
                    log::debug!("document {}: {reason}", docs[i].id);
                    summary.failed += 1;
                    summary.failures.push((docs[i].id.clone(), reason));
                }
            },
        );
        summary.attempted = processed;
        summary.cancelled = processed < docs.len();
        summary
    }
}


/// `outer: inner: ...` over the error's source chain.
fn error_chain(e: &dyn std::error::Error) -> String {
    let mut out = e.to_string();
    let mut cur = e.source();
    while let Some(s) = cur {
        out.push_str(": ");
        out.push_str(&s.to_string());
        cur = s.source();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{FnBackend, Matcher, Pick, ScriptedBackend};
    use crate::error::BackendError;
    use crate::prompts::{ExemplarCounts, Seed, SeedRecord};
    use crate::types::{validate_conversation, RestrictionMode, Sequence};

    fn exemplars() -> Arc<ExemplarSet> {
        let seeds: Vec<Seed> = include_str!("../fixtures/seeds.jsonl")
            .lines()
            .map(|l| Seed::from_record(serde_json::from_str::<SeedRecord>(l).unwrap()).unwrap())
            .collect();
        Arc::new(ExemplarSet::from_seeds(&seeds, &ExemplarCounts::default()).unwrap())
    }

    fn doc() -> Document {
        Document::from_sentences(
            "doc-1",
            "Lighthouses",
            &[
                "A lighthouse is a tower that emits light to guide ships.",
                "The Pharos of Alexandria was among the earliest.",
                "Modern lights are automated.",
            ],
        )
        .unwrap()
    }

    fn keyed(rules: Vec<(Matcher, Vec<&str>)>) -> Arc<ScriptedBackend> {
        Arc::new(
            ScriptedBackend::keyed(
                rules
                    .into_iter()
                    .map(|(m, r)| (m, r.into_iter().map(String::from).collect()))
                    .collect(),
                Pick::Cycle,
            )
            .unwrap(),
        )
    }

    fn engine(algo: &str, gen: Arc<ScriptedBackend>, asst: Option<Arc<ScriptedBackend>>, n: usize) -> Engine {
        let cfg = RunConfig {
            n_turns: n,
            rng_seed: Some(1),
            ..Default::default()
        };
        let backends = Backends {
            generator: gen,
            assistant: asst.map(|a| a as Arc<dyn Backend>),
        };
        Engine::new(AlgorithmSpec::preset(algo).unwrap(), backends, exemplars(), cfg).unwrap()
    }

    #[test]
    fn unanswerable_short_circuits() {
        let gen = Arc::new(ScriptedBackend::sequence(["Q?", "unanswerable"]).unwrap());
        let e = engine("uu-ac-au", gen.clone(), None, 1);
        let (u, a, t) = e.run_turn(&doc(), &[]).unwrap();
        assert_eq!(u.text, "Q?");
        assert_eq!(a.text, "CANNOTANSWER");
        assert_eq!(t.transitions, vec![State::Uu, State::Ac, State::Au]);
        assert_eq!(t.answerability, Some(Answerability::Unanswerable));
        assert_eq!(gen.call_count(), 2);
        assert!(gen.is_exhausted());
        assert!(t.raw_exchanges.iter().all(|x| x.state != State::Au));
    }

    #[test]
    fn selection_restricts_agent_document() {
        let gen = keyed(vec![
            (Matcher::State(State::Uu), vec!["Which tower guides ships?"]),
            (Matcher::State(State::Ac), vec!["answerable"]),
            (Matcher::State(State::Ss), vec!["0, 2"]),
            (Matcher::State(State::Au), vec!["A lighthouse."]),
        ]);
        let e = engine("uu-ac-ss-au", gen.clone(), None, 1);
        let (_, a, t) = e.run_turn(&doc(), &[]).unwrap();
        assert_eq!(a.text, "A lighthouse.");
        assert_eq!(t.selected_sentence_ids, Some([0, 2].into_iter().collect()));
        let au = &t.raw_exchanges.last().unwrap().prompt_text;
        let target = au.rsplit("Document: ").next().unwrap();
        assert!(target.contains("A lighthouse is a tower that emits light to guide ships. Modern lights are automated."));
        assert!(!target.contains("Pharos"));
    }

    #[test]
    fn marked_mode_wraps_selection() {
        let gen = keyed(vec![
            (Matcher::State(State::Uu), vec!["Which was earliest?"]),
            (Matcher::State(State::Ac), vec!["answerable"]),
            (Matcher::State(State::Ss), vec!["1"]),
            (Matcher::State(State::Au), vec!["The Pharos."]),
        ]);
        let mut algo = AlgorithmSpec::preset("uu-ac-ss-au").unwrap();
        algo.restriction_mode = RestrictionMode::Marked;
        let e = Engine::new(algo, Backends::generator_only(gen), exemplars(), RunConfig::default()).unwrap();
        let (_, _, t) = e.run_turn(&doc(), &[]).unwrap();
        let au = &t.raw_exchanges.last().unwrap().prompt_text;
        assert!(au.contains("guide ships. [[The Pharos of Alexandria was among the earliest.]] Modern"));
    }

    #[test]
    fn empty_selection_falls_back_to_full_document() {
        let gen = keyed(vec![
            (Matcher::State(State::Uu), vec!["Q?"]),
            (Matcher::State(State::Ac), vec!["answerable"]),
            (Matcher::State(State::Ss), vec!["none of them"]),
            (Matcher::State(State::Au), vec!["A."]),
        ]);
        let e = engine("uu-ac-ss-au", gen, None, 1);
        let (_, _, t) = e.run_turn(&doc(), &[]).unwrap();
        assert_eq!(t.selected_sentence_ids, Some([0, 1, 2].into_iter().collect()));
        assert!(t.errors.iter().any(|a| a.kind() == "SelectionFallback"));
        assert!(t.raw_exchanges.last().unwrap().prompt_text.contains("Pharos"));
    }

    #[test]
    fn assistant_serves_only_its_states() {
        let gen = keyed(vec![
            (Matcher::State(State::Uu), vec!["Q?"]),
            (Matcher::State(State::Au), vec!["A."]),
        ]);
        let asst = keyed(vec![
            (Matcher::State(State::Ac), vec!["answerable"]),
            (Matcher::State(State::Ss), vec!["1"]),
        ]);
        let e = engine("uu-ac-ss-au-assisted", gen.clone(), Some(asst.clone()), 2);
        let c = e.run_conversation(&doc()).unwrap();
        assert_eq!(gen.call_count(), 4);
        assert_eq!(asst.call_count(), 4);
        assert!(validate_conversation(&c, &doc(), "CANNOTANSWER").is_empty());
    }

    #[test]
    fn uu_au_has_no_answerability() {
        let gen = Arc::new(ScriptedBackend::sequence(["Q?", "A."]).unwrap());
        let (_, _, t) = engine("uu-au", gen, None, 1).run_turn(&doc(), &[]).unwrap();
        assert_eq!(t.transitions, vec![State::Uu, State::Au]);
        assert_eq!(t.answerability, None);
    }

    #[test]
    fn utterances_are_cut_at_newline_and_tags() {
        assert_eq!(clean_utterance(" What is it?\nAgent: blah"), "What is it?");
        assert_eq!(clean_utterance("Sure. User: next"), "Sure.");
        assert_eq!(clean_utterance("  \n"), "");
    }

    #[test]
    fn empty_generation_is_an_error() {
        let gen = Arc::new(ScriptedBackend::sequence(["\nAgent: x"]).unwrap());
        let err = engine("uu-au", gen, None, 1).run_turn(&doc(), &[]).unwrap_err();
        assert!(matches!(err, EngineError::EmptyGeneration(State::Uu)));
    }

    #[test]
    fn conversations_have_requested_length_and_full_history() {
        let gen = keyed(vec![
            (Matcher::State(State::Uu), vec!["Q1?", "Q2?", "Q3?"]),
            (Matcher::State(State::Au), vec!["A."]),
        ]);
        let c = engine("uu-au", gen.clone(), None, 5).run_conversation(&doc()).unwrap();
        assert_eq!(c.utterances.len(), 10);
        assert_eq!(c.traces.len(), 5);
        let last_uu = &c.traces[4].raw_exchanges[0].prompt_text;
        for u in &c.utterances[..8] {
            assert!(last_uu.contains(&format!("{} {}\n", u.speaker.tag(), u.text)));
        }
        let one = keyed(vec![(Matcher::State(State::Uu), vec!["Q?"]), (Matcher::State(State::Au), vec!["A."])]);
        assert_eq!(engine("uu-au", one, None, 1).run_conversation(&doc()).unwrap().utterances.len(), 2);
    }

    #[test]
    fn assistant_presence_must_match_algorithm() {
        let gen = Arc::new(ScriptedBackend::sequence(["x"]).unwrap());
        let r = Engine::new(
            AlgorithmSpec::preset("uu-ac-au-assisted").unwrap(),
            Backends::generator_only(gen),
            exemplars(),
            RunConfig::default(),
        );
        assert!(matches!(r, Err(EngineError::Config(_))));
    }

    #[test]
    fn corpus_keeps_order_and_counts_failures() {
        let gen: Arc<dyn Backend> = Arc::new(FnBackend::new("fn", |p, _| {
            if p.contains("Document: broken\n") && !p.ends_with("Agent:") {
                return Err(BackendError::Transport("down".into()));
            }
            Ok(if p.ends_with("User:") { "Q?".into() } else { "A.".into() })
        }));
        let mut docs: Vec<Document> = (0..3)
            .map(|i| Document::from_sentences(format!("d{i}"), format!("T{i}"), &["One."]).unwrap())
            .collect();
        let e = Engine::new(
            AlgorithmSpec::new("x", Sequence::UuAu, &[]),
            Backends::generator_only(gen),
            exemplars(),
            RunConfig { parallelism: 2, n_turns: 2, ..Default::default() },
        )
        .unwrap();
        let mut out = Vec::new();
        let s = e.run_corpus(&docs, None, |c| out.push(c.document_id));
        assert_eq!(out, vec!["d0", "d1", "d2"]);
        assert_eq!((s.succeeded, s.failed), (3, 0));

        docs = vec![Document::from_sentences("bad", "broken", &["One."]).unwrap()];
        let mut out = Vec::new();
        let s = e.run_corpus(&docs, None, |c| out.push(c));
        assert!(out.is_empty());
        assert_eq!((s.succeeded, s.failed), (0, 1));
    }

    #[test]
    fn seeded_runs_are_identical() {
        let mk = || {
            keyed(vec![
                (Matcher::State(State::Uu), vec!["Q1?", "Q2?"]),
                (Matcher::State(State::Ac), vec!["answerable", "unanswerable"]),
                (Matcher::State(State::Au), vec!["A."]),
            ])
        };
        let a = engine("uu-ac-au", mk(), None, 5).run_conversation(&doc()).unwrap();
        let b = engine("uu-ac-au", mk(), None, 5).run_conversation(&doc()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.traces[0].raw_exchanges[0].decoding_used.seed.is_some());
    }
}
