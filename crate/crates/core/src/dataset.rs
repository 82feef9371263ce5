//! Corpus ingestion, JSONL persistence, SFT export and dataset mixing.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::DatasetError;
use crate::metrics::NoAnswerPatterns;
use crate::segment::segment_document;
use crate::types::{Conversation, Document, Speaker, Utterance, DEFAULT_NO_ANSWER_TEXT};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parses every non-blank line; the first bad line is an error.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let (items, bad) = read_jsonl_inner(path, true)?;
    debug_assert!(bad.is_empty());
    Ok(items)
}

/// Parses every non-blank line, collecting `(line, message)` for bad ones.
pub fn read_jsonl_lenient<T: DeserializeOwned>(
    path: &Path,
) -> Result<(Vec<T>, Vec<(usize, String)>), DatasetError> {
    read_jsonl_inner(path, false)
}

fn read_jsonl_inner<T: DeserializeOwned>(
    path: &Path,
    strict: bool,
) -> Result<(Vec<T>, Vec<(usize, String)>), DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut items = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(v) => items.push(v),
            Err(e) if strict => {
                return Err(DatasetError::MalformedRecord {
                    line: i + 1,
                    message: e.to_string(),
                })
            }
            Err(e) => bad.push((i + 1, e.to_string())),
        }
    }
    Ok((items, bad))
}

/// Writes one compact JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| DatasetError::MalformedRecord {
            line: 0,
            message: e.to_string(),
        })?;
        w.write_all(line.as_bytes()).map_err(io_err(path))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// A raw passage line: `{id, title, text}`, optionally pre-segmented.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassageRecord {
    pub id: String,
    pub title: String,
    pub text: String,
    /// Overrides the built-in segmenter when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentences: Option<Vec<String>>,
}

impl PassageRecord {
    pub fn into_document(self) -> Result<Document, DatasetError> {
        let doc = match &self.sentences {
            Some(s) => Document::from_sentences(self.id, self.title, s)?,
            None => segment_document(self.id, self.title, &self.text)?,
        };
        Ok(doc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub documents: Vec<Document>,
    pub total_records: usize,
    pub malformed: usize,
}

/// Uniformly samples `limit` passages without replacement and segments them.
/// Sampled passages keep their file order. Malformed lines are skipped and
/// counted; a limit above the file size yields every record.
pub fn ingest_passages(
    path: &Path,
    limit: Option<usize>,
    rng_seed: u64,
) -> Result<IngestReport, DatasetError> {
    let (records, bad) = read_jsonl_lenient::<PassageRecord>(path)?;
    for (line, msg) in &bad {
        log::warn!("{}:{line}: skipping malformed passage: {msg}", path.display());
    }
    let mut malformed = bad.len();
    let total_records = records.len() + bad.len();
    let chosen: Vec<PassageRecord> = match limit {
        Some(k) if k < records.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            let mut idx = rand::seq::index::sample(&mut rng, records.len(), k).into_vec();
            idx.sort_unstable();
            let mut slots: Vec<Option<PassageRecord>> = records.into_iter().map(Some).collect();
            idx.into_iter().map(|i| slots[i].take().expect("distinct")).collect()
        }
        Some(k) => {
            if k > records.len() {
                log::warn!(
                    "limit {k} exceeds the {} valid passages in {}; using all of them",
                    records.len(),
                    path.display()
                );
            }
            records
        }
        None => records,
    };
    let mut documents = Vec::with_capacity(chosen.len());
    for rec in chosen {
        let id = rec.id.clone();
        match rec.into_document() {
            Ok(d) => documents.push(d),
            Err(e) => {
                log::warn!("skipping passage {id}: {e}");
                malformed += 1;
            }
        }
    }
    Ok(IngestReport {
        documents,
        total_records,
        malformed,
    })
}

/// Counts tokens in model input.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> Result<usize, DatasetError>;
    /// False for approximate schemes.
    fn is_exact(&self) -> bool;
}

/// Approximation: every maximal alphanumeric run is one token and every
/// other non-whitespace character is one token.
#[derive(Debug, Clone, Copy, Default)]
pub struct ApproxTokenCounter;

impl TokenCounter for ApproxTokenCounter {
    fn count(&self, text: &str) -> Result<usize, DatasetError> {
        let mut n = 0;
        let mut in_word = false;
        for c in text.chars() {
            if c.is_alphanumeric() {
                if !in_word {
                    n += 1;
                }
                in_word = true;
            } else {
                in_word = false;
                if !c.is_whitespace() {
                    n += 1;
                }
            }
        }
        Ok(n)
    }

    fn is_exact(&self) -> bool {
        false
    }
}

/// Exact counts from a tokenizer service. The service receives
/// `{"text": ...}` and answers with `{"count": n}`, `{"input_ids": [...]}`
/// or `{"tokens": [...]}`.
pub struct HttpTokenCounter {
    url: String,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct TokenizeResponse {
    count: Option<usize>,
    input_ids: Option<Vec<serde_json::Value>>,
    tokens: Option<Vec<serde_json::Value>>,
}

impl HttpTokenCounter {
    pub fn new(url: &str, timeout: Duration) -> Result<Self, DatasetError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| DatasetError::TokenizerUnavailable(e.to_string()))?;
        Ok(HttpTokenCounter {
            url: url.to_string(),
            client,
        })
    }
}

impl TokenCounter for HttpTokenCounter {
    fn count(&self, text: &str) -> Result<usize, DatasetError> {
        let unavailable = |e: String| DatasetError::TokenizerUnavailable(format!("{}: {e}", self.url));
        let resp = self
            .client
            .post(&self.url)
            .json(&serde_json::json!({ "text": text }))
            .send()
            .map_err(|e| unavailable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(unavailable(format!("HTTP {}", resp.status().as_u16())));
        }
        let body: TokenizeResponse = resp.json().map_err(|e| unavailable(e.to_string()))?;
        body.count
            .or(body.input_ids.map(|v| v.len()))
            .or(body.tokens.map(|v| v.len()))
            .ok_or_else(|| unavailable("response carries no count".into()))
    }

    fn is_exact(&self) -> bool {
        true
    }
}

pub const SFT_INSTRUCTION: &str = "Given the document and the current conversation between a user and an agent, your task is to generate the next response from the agent.\n\nWhile generating the agent response you should: Determine if agent response needs information from document.\n(a) If yes, generate agent response using only precise information present in the document.\n(b) If not, generate CANNOTANSWER. ";

const SFT_TEXT_PREFIX: &str = " \n\n Text: ";
const SFT_TITLE_SEP: &str = " : ";
const SFT_INPUT_PREFIX: &str = "\n\nInput: ";
const SFT_SUFFIX: &str = "\n\nOutput:";

/// Renders the instruction-tuning input for a dialogue ending with the
/// current user query.
pub fn render_sft_input(title: &str, text: &str, dialogue: &[Utterance]) -> String {
    let mut s = String::with_capacity(SFT_INSTRUCTION.len() + text.len() + 64 * dialogue.len());
    s.push_str(SFT_INSTRUCTION);
    s.push_str(SFT_TEXT_PREFIX);
    s.push_str(title);
    s.push_str(SFT_TITLE_SEP);
    s.push_str(text);
    s.push_str(SFT_INPUT_PREFIX);
    for u in dialogue {
        s.push_str(match u.speaker {
            Speaker::User => "User: ",
            Speaker::Agent => "Agent: ",
        });
        s.push_str(u.text.trim());
        s.push(' ');
    }
    s.truncate(s.trim_end().len());
    s.push_str(SFT_SUFFIX);
    s
}

/// Fields recovered from an SFT input by [`parse_sft_input`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedSftInput {
    pub title: String,
    pub text: String,
    pub dialogue: Vec<(Speaker, String)>,
}

/// Inverse of [`render_sft_input`] for titles without `" : "`, texts without
/// `"\n\nInput: "`, and utterances without embedded speaker tags.
pub fn parse_sft_input(input: &str) -> Option<ParsedSftInput> {
    let rest = input.strip_prefix(SFT_INSTRUCTION)?.strip_prefix(SFT_TEXT_PREFIX)?;
    let rest = rest.strip_suffix(SFT_SUFFIX)?;
    let (title, rest) = rest.split_once(SFT_TITLE_SEP)?;
    let (text, dialogue) = rest.rsplit_once(SFT_INPUT_PREFIX)?;
    let mut turns: Vec<(Speaker, String)> = Vec::new();
    let mut cursor = dialogue;
    let tag_at = |s: &str| {
        if s.starts_with("User: ") {
            Some((Speaker::User, 6))
        } else if s.starts_with("Agent: ") {
            Some((Speaker::Agent, 7))
        } else {
            None
        }
    };
    while !cursor.is_empty() {
        let (speaker, skip) = tag_at(cursor)?;
        cursor = &cursor[skip..];
        let next = [" User: ", " Agent: "]
            .iter()
            .filter_map(|t| cursor.find(t))
            .min()
            .unwrap_or(cursor.len());
        turns.push((speaker, cursor[..next].to_string()));
        cursor = cursor[next..].strip_prefix(' ').unwrap_or(&cursor[next..]);
    }
    Some(ParsedSftInput {
        title: title.to_string(),
        text: text.to_string(),
        dialogue: turns,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftMeta {
    pub source_conversation: String,
    pub turn_index: usize,
    pub origin_dataset: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub input: String,
    pub output: String,
    pub meta: SftMeta,
}

#[derive(Debug, Clone)]
pub struct SftOptions {
    /// Inputs with at least this many tokens are dropped.
    pub max_input_tokens: usize,
    pub origin_dataset: String,
    /// Agent turns matching these become `CANNOTANSWER` in the output.
    pub no_answer: NoAnswerPatterns,
}

impl Default for SftOptions {
    fn default() -> Self {
        SftOptions {
            max_input_tokens: 1920,
            origin_dataset: "synthetic".into(),
            no_answer: NoAnswerPatterns::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SftExport {
    pub examples: Vec<SftExample>,
    pub filtered: usize,
}

/// One example per agent turn: the input holds every prior utterance plus
/// the current query, the output is the agent response.
pub fn export_sft(
    conversations: &[Conversation],
    docs: &HashMap<String, Document>,
    counter: &dyn TokenCounter,
    opts: &SftOptions,
) -> Result<SftExport, DatasetError> {
    let mut examples = Vec::new();
    let mut filtered = 0;
    for conv in conversations {
        let doc = docs
            .get(&conv.document_id)
            .ok_or_else(|| DatasetError::MissingDocument(conv.document_id.clone()))?;
        for (turn, (_, agent)) in conv.pairs().enumerate() {
            let input = render_sft_input(&doc.title, &doc.text, &conv.utterances[..2 * turn + 1]);
            if counter.count(&input)? >= opts.max_input_tokens {
                filtered += 1;
                continue;
            }
            let output = if opts.no_answer.matches(&agent.text) {
                DEFAULT_NO_ANSWER_TEXT.to_string()
            } else {
                agent.text.trim().to_string()
            };
            if output.is_empty() {
                filtered += 1;
                continue;
            }
            examples.push(SftExample {
                input,
                output,
                meta: SftMeta {
                    source_conversation: conv.document_id.clone(),
                    turn_index: turn,
                    origin_dataset: opts.origin_dataset.clone(),
                },
            });
        }
    }
    Ok(SftExport { examples, filtered })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixComponent {
    /// Path or name of the source dataset.
    pub source: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub components: Vec<MixComponent>,
    pub total: usize,
    pub rng_seed: u64,
}

impl MixSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.components.is_empty() {
            return Err(DatasetError::InvalidMix("no components".into()));
        }
        if self.total == 0 {
            return Err(DatasetError::InvalidMix("total must be at least 1".into()));
        }
        if let Some(c) = self.components.iter().find(|c| !(c.weight >= 0.0 && c.weight.is_finite())) {
            return Err(DatasetError::InvalidMix(format!("bad weight {} for {}", c.weight, c.source)));
        }
        let sum: f64 = self.components.iter().map(|c| c.weight).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(DatasetError::InvalidMix(format!("weights sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `total` by `weights`; ties go to the
/// earlier component.
pub fn allocate(weights: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Samples each component without replacement at its allocated count, then
/// shuffles the union. Fully determined by `spec.rng_seed`.
pub fn mix<T: Clone>(spec: &MixSpec, sources: &[Vec<T>]) -> Result<Vec<T>, DatasetError> {
    spec.validate()?;
    if sources.len() != spec.components.len() {
        return Err(DatasetError::InvalidMix(format!(
            "{} components but {} sources",
            spec.components.len(),
            sources.len()
        )));
    }
    let weights: Vec<f64> = spec.components.iter().map(|c| c.weight).collect();
    let counts = allocate(&weights, spec.total);
    for (index, (&needed, src)) in counts.iter().zip(sources).enumerate() {
        if src.len() < needed {
            return Err(DatasetError::InsufficientSource {
                index,
                needed,
                available: src.len(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut out = Vec::with_capacity(spec.total);
    for (&needed, src) in counts.iter().zip(sources) {
        let mut idx = rand::seq::index::sample(&mut rng, src.len(), needed).into_vec();
        idx.sort_unstable();
        out.extend(idx.into_iter().map(|i| src[i].clone()));
    }
    out.shuffle(&mut rng);
    Ok(out)
}
