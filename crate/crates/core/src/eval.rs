//! Dataset-level evaluation: pseudo-references from a strong model,
//! class-balanced scoring, descriptive statistics and the roundtrip
//! in-context-learning protocol.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{stable_hash, Backend, DecodingParams};
use crate::engine::clean_utterance;
use crate::error::EvalError;
use crate::metrics::{
    faithfulness_with, is_fully_extracted, unigram_prf, ClassScores, NoAnswerPatterns,
    Normalizer, ScoredTurn, TokenBag,
};
use crate::pool::ordered_map;
use crate::prompts::{build_au_prompt, ConversationExemplar, ExemplarSet, PromptOptions, Seed};
use crate::types::{Answerability, Conversation, Document, Utterance};

/// A strong model's response to one user query of the evaluated dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoReference {
    pub conversation_id: String,
    pub turn_index: usize,
    pub reference_text: String,
    pub reference_is_no_answer: bool,
}

/// Shared settings for model-facing evaluation steps.
#[derive(Clone)]
pub struct EvalOptions {
    pub decoding: DecodingParams,
    pub no_answer: NoAnswerPatterns,
    pub normalizer: Arc<Normalizer>,
    pub parallelism: usize,
    pub prompt_options: PromptOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            decoding: DecodingParams::greedy(128).with_stops(["\n", "User:", "Agent:"]),
            no_answer: NoAnswerPatterns::default(),
            normalizer: Arc::new(Normalizer::default()),
            parallelism: 1,
            prompt_options: PromptOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UnscorableTurn {
    pub conversation_id: String,
    pub turn_index: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReferenceRun {
    pub references: Vec<PseudoReference>,
    pub unscorable: Vec<UnscorableTurn>,
}

/// Asks `backend` for an agent response to every user query. The prompt
/// carries the dataset's own history for that turn, never earlier
/// references.
pub fn generate_pseudo_references(
    dataset: &[Conversation],
    docs: &HashMap<String, Document>,
    backend: &dyn Backend,
    exemplars: &ExemplarSet,
    opts: &EvalOptions,
) -> Result<ReferenceRun, EvalError> {
    let mut jobs: Vec<(&Conversation, &Document, usize)> = Vec::new();
    for conv in dataset {
        let doc = docs
            .get(&conv.document_id)
            .ok_or_else(|| EvalError::MissingDocument(conv.document_id.clone()))?;
        for turn in 0..conv.num_pairs() {
            jobs.push((conv, doc, turn));
        }
    }
    let mut out = ReferenceRun {
        references: Vec::with_capacity(jobs.len()),
        unscorable: Vec::new(),
    };
    let mut prompt_error = None;
    ordered_map(
        &jobs,
        opts.parallelism,
        None,
        |_, &(conv, doc, turn)| -> Result<Result<String, String>, EvalError> {
            let prompt = build_au_prompt(doc, &conv.utterances[..2 * turn + 1], exemplars, &opts.prompt_options)?;
            Ok(match backend.complete(&prompt.text, &opts.decoding) {
                Ok(r) => {
                    let text = clean_utterance(&r.text);
                    if text.is_empty() {
                        Err("empty reference".to_string())
                    } else {
                        Ok(text.to_string())
                    }
                }
                Err(e) => Err(e.to_string()),
            })
        },
        |i, r| {
            let (conv, _, turn) = jobs[i];
            match r {
                Ok(Ok(text)) => out.references.push(PseudoReference {
                    conversation_id: conv.document_id.clone(),
                    turn_index: turn,
                    reference_is_no_answer: opts.no_answer.matches(&text),
                    reference_text: text,
                }),
                Ok(Err(error)) => {
                    log::warn!("reference for {} turn {turn} failed: {error}", conv.document_id);
                    out.unscorable.push(UnscorableTurn {
                        conversation_id: conv.document_id.clone(),
                        turn_index: turn,
                        error,
                    })
                }
                Err(e) => {
                    prompt_error.get_or_insert(e);
                }
            }
        },
    );
    match prompt_error {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Per-turn detail of [`score_against_references`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnScore {
    pub conversation_id: String,
    pub turn_index: usize,
    pub reference_is_no_answer: bool,
    pub candidate_is_no_answer: bool,
    /// Unigram F1 for answerable references, 1/0 for unanswerable ones.
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub scores: ClassScores,
    pub turns: Vec<TurnScore>,
    /// Agent turns without a reference (only with `allow_missing`).
    pub missing_references: usize,
}

/// Scores one candidate against its reference: answerable references use
/// unigram F1 (0 for a no-answer candidate), unanswerable references score
/// 1 for a no-answer candidate and 0 otherwise.
pub fn score_turn(
    candidate: &str,
    reference: &str,
    reference_is_no_answer: bool,
    no_answer: &NoAnswerPatterns,
    norm: &Normalizer,
) -> ScoredTurn {
    let cand_na = no_answer.matches(candidate);
    let f1 = match (reference_is_no_answer, cand_na) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        (false, false) => unigram_prf(&norm.normalize(candidate), &norm.normalize(reference)).f1,
    };
    ScoredTurn {
        reference_is_no_answer,
        f1,
        class_correct: cand_na == reference_is_no_answer,
    }
}

/// Class-balanced comparison of the dataset's agent turns with their
/// pseudo-references. With `allow_missing`, turns without a reference are
/// skipped and counted instead of failing.
pub fn score_against_references(
    dataset: &[Conversation],
    refs: &[PseudoReference],
    opts: &EvalOptions,
    allow_missing: bool,
) -> Result<ScoreReport, EvalError> {
    let index: HashMap<(&str, usize), &PseudoReference> = refs
        .iter()
        .map(|r| ((r.conversation_id.as_str(), r.turn_index), r))
        .collect();
    let mut turns = Vec::new();
    let mut scored = Vec::new();
    let mut missing = 0;
    for conv in dataset {
        for (turn, (_, agent)) in conv.pairs().enumerate() {
            let Some(r) = index.get(&(conv.document_id.as_str(), turn)) else {
                if allow_missing {
                    missing += 1;
                    continue;
                }
                return Err(EvalError::MissingReference {
                    conversation_id: conv.document_id.clone(),
                    turn_index: turn,
                });
            };
            let s = score_turn(&agent.text, &r.reference_text, r.reference_is_no_answer, &opts.no_answer, &opts.normalizer);
            turns.push(TurnScore {
                conversation_id: conv.document_id.clone(),
                turn_index: turn,
                reference_is_no_answer: r.reference_is_no_answer,
                candidate_is_no_answer: opts.no_answer.matches(&agent.text),
                f1: s.f1,
            });
            scored.push(s);
        }
    }
    Ok(ScoreReport {
        scores: ClassScores::aggregate(&scored),
        turns,
        missing_references: missing,
    })
}

/// `(acc_a, acc_ua, hm)`: per reference class, the share of turns whose
/// answer/no-answer behaviour agrees with the reference.
pub fn classification_accuracy(
    dataset: &[Conversation],
    refs: &[PseudoReference],
    opts: &EvalOptions,
) -> Result<(Option<f64>, Option<f64>, f64), EvalError> {
    let s = score_against_references(dataset, refs, opts, false)?.scores;
    Ok((s.cls_acc_a, s.cls_acc_ua, s.cls_acc_hm))
}

/// External factual-consistency model scoring an answer against its document.
pub trait ConsistencyScorer: Send + Sync {
    fn score(&self, document: &str, answer: &str) -> Result<f64, String>;
}

/// Scorer service receiving `{"document", "claim"}` and answering `{"score"}`.
pub struct HttpConsistencyScorer {
    url: String,
    client: reqwest::blocking::Client,
}

impl HttpConsistencyScorer {
    pub fn new(url: &str, timeout: Duration) -> Result<Self, String> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| e.to_string())?;
        Ok(HttpConsistencyScorer {
            url: url.to_string(),
            client,
        })
    }
}

#[derive(Deserialize)]
struct ScoreResponse {
    score: f64,
}

impl ConsistencyScorer for HttpConsistencyScorer {
    fn score(&self, document: &str, answer: &str) -> Result<f64, String> {
        let resp = self
            .client
            .post(&self.url)
            .json(&serde_json::json!({ "document": document, "claim": answer }))
            .send()
            .map_err(|e| e.to_string())?;
        if !resp.status().is_success() {
            return Err(format!("HTTP {}", resp.status().as_u16()));
        }
        resp.json::<ScoreResponse>().map(|r| r.score).map_err(|e| e.to_string())
    }
}

/// Descriptive statistics of a dataset's agent turns. Percentages are in
/// `[0, 100]`; faithfulness is a fraction. Values over answered turns are
/// `None` when nothing was answered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_agent_turns: usize,
    pub n_answered: usize,
    pub pct_has_answer: Option<f64>,
    pub pct_extracted: Option<f64>,
    pub mean_faithfulness: Option<f64>,
    /// Answered turns with no contentful tokens (scored as faithful).
    pub n_empty_after_normalization: usize,
    pub wecheck_mean: Option<f64>,
}

pub fn dataset_stats(
    dataset: &[Conversation],
    docs: &HashMap<String, Document>,
    opts: &EvalOptions,
    scorer: Option<&dyn ConsistencyScorer>,
) -> Result<DatasetStats, EvalError> {
    let mut bags: HashMap<&str, TokenBag> = HashMap::new();
    let (mut n, mut answered, mut extracted, mut empty) = (0usize, 0usize, 0usize, 0usize);
    let mut faith = 0.0;
    let mut consistency: Option<(f64, usize)> = scorer.map(|_| (0.0, 0));
    for conv in dataset {
        let doc = docs
            .get(&conv.document_id)
            .ok_or_else(|| EvalError::MissingDocument(conv.document_id.clone()))?;
        let bag = bags
            .entry(doc.id.as_str())
            .or_insert_with(|| opts.normalizer.normalize(&doc.text));
        for (_, agent) in conv.pairs() {
            n += 1;
            if opts.no_answer.matches(&agent.text) {
                continue;
            }
            answered += 1;
            extracted += usize::from(is_fully_extracted(&agent.text, doc));
            let f = faithfulness_with(&opts.normalizer, &agent.text, bag);
            faith += f.precision;
            empty += usize::from(f.empty_after_normalization);
            if let (Some(s), Some((sum, k))) = (scorer, consistency.as_mut()) {
                match s.score(&doc.text, &agent.text) {
                    Ok(v) => {
                        *sum += v;
                        *k += 1;
                    }
                    Err(e) => log::warn!("consistency scorer failed on {}: {e}", conv.document_id),
                }
            }
        }
    }
    let pct = |a: usize, b: usize| (b > 0).then(|| 100.0 * a as f64 / b as f64);
    Ok(DatasetStats {
        n_agent_turns: n,
        n_answered: answered,
        pct_has_answer: pct(answered, n),
        pct_extracted: pct(extracted, answered),
        mean_faithfulness: (answered > 0).then(|| faith / answered as f64),
        n_empty_after_normalization: empty,
        wecheck_mean: consistency.and_then(|(s, k)| (k > 0).then(|| s / k as f64)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundtripConfig {
    pub cycles: usize,
    pub rounds: usize,
    #[serde(default = "two")]
    pub k_shots: usize,
    #[serde(default)]
    pub rng_seed: u64,
    /// Demonstrations never come from the test query's document.
    #[serde(default)]
    pub exclude_same_document: bool,
}

fn two() -> usize {
    2
}

impl RoundtripConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.cycles == 0 || self.rounds == 0 {
            return Err(EvalError::Config("cycles and rounds must be at least 1".into()));
        }
        if self.k_shots == 0 {
            return Err(EvalError::Config("k_shots must be at least 1".into()));
        }
        Ok(())
    }
}

/// The demonstrations and test query drawn for one round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundSample {
    pub cycle: usize,
    pub round: usize,
    pub demo_indices: Vec<usize>,
    pub seed_index: usize,
    pub turn_index: usize,
}

/// Mean over cycles of each class score (over cycles where it is defined).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassMeans {
    pub f1_answerable: Option<f64>,
    pub f1_unanswerable: Option<f64>,
    pub cls_acc_a: Option<f64>,
    pub cls_acc_ua: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundtripReport {
    pub mean_f1_hm: f64,
    /// Population standard deviation of the cycle F1-HM as a percentage of
    /// the mean (0 when the mean is 0).
    pub std_pct: f64,
    pub per_class: PerClassMeans,
    pub cycles: Vec<ClassScores>,
    pub retried_rounds: usize,
    pub skipped_rounds: usize,
    pub samples: Vec<RoundSample>,
}

fn round_rng(seed: u64, cycle: usize, round: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stable_hash(format!("{seed}\u{1f}{cycle}\u{1f}{round}").as_bytes()))
}

/// Draws every round's demonstrations and test query up front, so the plan
/// depends only on the seed.
pub fn plan_rounds(
    demo_docs: &[&str],
    seeds: &[Seed],
    cfg: &RoundtripConfig,
) -> Result<Vec<RoundSample>, EvalError> {
    cfg.validate()?;
    let queries: Vec<(usize, usize)> = seeds
        .iter()
        .enumerate()
        .flat_map(|(s, seed)| (0..seed.turns.len()).map(move |t| (s, t)))
        .collect();
    if queries.is_empty() {
        return Err(EvalError::Config("seed set has no queries".into()));
    }
    let mut plan = Vec::with_capacity(cfg.cycles * cfg.rounds);
    for cycle in 0..cfg.cycles {
        for round in 0..cfg.rounds {
            let mut rng = round_rng(cfg.rng_seed, cycle, round);
            let (seed_index, turn_index) = queries[rng.gen_range(0..queries.len())];
            let eligible: Vec<usize> = (0..demo_docs.len())
                .filter(|&i| !cfg.exclude_same_document || demo_docs[i] != seeds[seed_index].document.id)
                .collect();
            if eligible.len() < cfg.k_shots {
                return Err(EvalError::Config(format!(
                    "need {} demonstrations but only {} are eligible",
                    cfg.k_shots,
                    eligible.len()
                )));
            }
            let demo_indices = sample(&mut rng, eligible.len(), cfg.k_shots)
                .into_iter()
                .map(|i| eligible[i])
                .collect();
            plan.push(RoundSample {
                cycle,
                round,
                demo_indices,
                seed_index,
                turn_index,
            });
        }
    }
    Ok(plan)
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores `agent` on held-out seed queries, prompting it each round with
/// `k_shots` sampled demonstration conversations. A failed round is retried
/// once and then skipped.
pub fn roundtrip_icl_eval(
    demo_pool: &[ConversationExemplar],
    seeds: &[Seed],
    agent: &dyn Backend,
    cfg: &RoundtripConfig,
    opts: &EvalOptions,
) -> Result<RoundtripReport, EvalError> {
    if demo_pool.is_empty() {
        return Err(EvalError::Config("demonstration pool is empty".into()));
    }
    let demo_docs: Vec<&str> = demo_pool.iter().map(|d| d.document.id.as_str()).collect();
    let plan = plan_rounds(&demo_docs, seeds, cfg)?;
    let mut prompts = Vec::with_capacity(plan.len());
    for s in &plan {
        let seed = &seeds[s.seed_index];
        let ex = ExemplarSet {
            au: s.demo_indices.iter().map(|&i| demo_pool[i].clone()).collect(),
            ..Default::default()
        };
        let mut dialogue: Vec<Utterance> = seed.history_before(s.turn_index).to_vec();
        dialogue.push(seed.conversation.utterances[2 * s.turn_index].clone());
        prompts.push(build_au_prompt(&seed.document, &dialogue, &ex, &opts.prompt_options)?.text);
    }

    let mut per_cycle: Vec<Vec<ScoredTurn>> = vec![Vec::new(); cfg.cycles];
    let (mut retried, mut skipped) = (0, 0);
    ordered_map(
        &prompts,
        opts.parallelism,
        None,
        |_, prompt| {
            let first = agent.complete(prompt, &opts.decoding);
            match first {
                Ok(r) => (Ok(r.text), false),
                Err(e) => {
                    log::warn!("roundtrip round failed ({e}); retrying once");
                    (agent.complete(prompt, &opts.decoding).map(|r| r.text), true)
                }
            }
        },
        |i, (result, was_retried)| {
            retried += usize::from(was_retried);
            let s = &plan[i];
            match result {
                Ok(text) => {
                    let gold = &seeds[s.seed_index].turns[s.turn_index];
                    let gold_na = gold.answerability == Answerability::Unanswerable;
                    per_cycle[s.cycle].push(score_turn(
                        clean_utterance(&text),
                        &gold.agent,
                        gold_na,
                        &opts.no_answer,
                        &opts.normalizer,
                    ));
                }
                Err(e) => {
                    log::warn!("skipping roundtrip round {}/{}: {e}", s.cycle, s.round);
                    skipped += 1;
                }
            }
        },
    );

    let cycles: Vec<ClassScores> = per_cycle.iter().map(ClassScores::aggregate).collect();
    let hms: Vec<f64> = cycles.iter().map(|c| c.f1_hm).collect();
    let mean = hms.iter().sum::<f64>() / hms.len() as f64;
    let var = hms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / hms.len() as f64;
    let std_pct = if mean == 0.0 { 0.0 } else { 100.0 * var.sqrt() / mean };
    let per_class = PerClassMeans {
        f1_answerable: mean_defined(cycles.iter().map(|c| c.f1_answerable)),
        f1_unanswerable: mean_defined(cycles.iter().map(|c| c.f1_unanswerable)),
        cls_acc_a: mean_defined(cycles.iter().map(|c| c.cls_acc_a)),
        cls_acc_ua: mean_defined(cycles.iter().map(|c| c.cls_acc_ua)),
    };
    Ok(RoundtripReport {
        mean_f1_hm: mean,
        std_pct,
        per_class,
        cycles,
        retried_rounds: retried,
        skipped_rounds: skipped,
        samples: plan,
    })
}
