//! Subcommand implementations.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use groundconv::dataset::{
    export_sft, ingest_passages, mix, read_jsonl, write_jsonl, MixComponent, MixSpec, PassageRecord, SftOptions,
};
use groundconv::eval::{
    dataset_stats, generate_pseudo_references, roundtrip_icl_eval, score_against_references, ConsistencyScorer,
    EvalOptions, HttpConsistencyScorer, PseudoReference, ReferenceRun, RoundtripConfig,
};
use groundconv::prompts::{load_seeds, ConversationExemplar};
use groundconv::{Backends, Conversation, Document, Engine, EngineError, ExemplarSet, NoAnswerPatterns, Normalizer};
use serde::Deserialize;

use crate::config::{token_counter, AppConfig};
use crate::report::{self, EvaluationReport};
use crate::{Cli, Command, UsageError};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// The flag value, else the config value, else a usage error naming the flag.
fn pick(flag: &Option<PathBuf>, config: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| config.clone())
        .ok_or_else(|| usage(format!("{name} is required (flag or config paths)")))
}

/// Outputs must not overwrite inputs or each other.
fn ensure_distinct(inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
    let key = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    for (i, o) in outputs.iter().enumerate() {
        let ko = key(o);
        if inputs.iter().any(|p| key(p) == ko) || outputs[i + 1..].iter().any(|p| key(p) == ko) {
            return Err(usage(format!("output {} collides with another path", o.display())));
        }
    }
    Ok(())
}

pub fn dispatch(cli: &Cli, cancel: &AtomicBool) -> Result<()> {
    let cfg = AppConfig::load(cli.config.as_deref())?;
    let v = cli.verbose;
    match &cli.command {
        Command::Generate(a) => generate(&cfg, a, v, cancel),
        Command::Evaluate(a) => evaluate(&cfg, a, v),
        Command::MakeRefs(a) => make_refs(&cfg, a, v),
        Command::ExportSft(a) => export(&cfg, a),
        Command::Mix(a) => mix_cmd(a),
        Command::Stats(a) => stats(&cfg, a),
        Command::Roundtrip(a) => roundtrip(&cfg, a, v),
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DocLine {
    Segmented(Document),
    Passage(PassageRecord),
}

/// Documents keyed by id, from segmented documents or raw passage records.
pub fn load_docs(path: &Path) -> Result<HashMap<String, Document>> {
    let lines: Vec<DocLine> = read_jsonl(path)?;
    let mut docs = HashMap::with_capacity(lines.len());
    for line in lines {
        let doc = match line {
            DocLine::Segmented(d) => {
                d.validate().map_err(|e| anyhow::anyhow!("document {}: {e}", d.id))?;
                d
            }
            DocLine::Passage(p) => p.into_document()?,
        };
        if docs.contains_key(&doc.id) {
            bail!("duplicate document id {} in {}", doc.id, path.display());
        }
        docs.insert(doc.id.clone(), doc);
    }
    Ok(docs)
}

fn load_data(path: &Path) -> Result<Vec<Conversation>> {
    Ok(read_jsonl(path)?)
}

fn eval_options(cfg: &AppConfig, parallelism: Option<usize>) -> Result<EvalOptions> {
    let normalizer = match &cfg.metrics.stopwords {
        Some(p) => Normalizer::from_stopword_file(p).with_context(|| format!("reading stopwords {}", p.display()))?,
        None => Normalizer::default(),
    };
    let parallelism = parallelism.unwrap_or(cfg.run.parallelism);
    if parallelism == 0 {
        return Err(usage("parallelism must be at least 1"));
    }
    Ok(EvalOptions {
        no_answer: no_answer_patterns(cfg),
        normalizer: Arc::new(normalizer),
        parallelism,
        prompt_options: cfg.prompt_options()?,
        ..EvalOptions::default()
    })
}

fn no_answer_patterns(cfg: &AppConfig) -> NoAnswerPatterns {
    NoAnswerPatterns::with_extra(&cfg.metrics.no_answer_patterns)
}

fn engine_error(e: EngineError) -> anyhow::Error {
    match e {
        EngineError::Config(_) | EngineError::InvalidRunConfig(_) => usage(e.to_string()),
        other => other.into(),
    }
}

fn generate(cfg: &AppConfig, a: &crate::GenerateArgs, verbose: bool, cancel: &AtomicBool) -> Result<()> {
    let mut run = cfg.run.clone();
    if let Some(s) = a.seed {
        run.rng_seed = Some(s);
    }
    if let Some(p) = a.parallelism {
        run.parallelism = p;
    }
    if let Some(n) = a.n_turns {
        run.n_turns = n;
    }
    let algo_id = a
        .algo
        .clone()
        .or_else(|| cfg.algorithm.clone())
        .ok_or_else(|| usage("--algo is required"))?;
    let algo = cfg.algorithm(&algo_id)?;
    let passages = pick(&a.passages, &cfg.paths.passages, "--passages")?;
    let seeds_path = pick(&a.seeds, &cfg.paths.seeds, "--seeds")?;
    let out = pick(&a.out, &cfg.paths.out, "--out")?;
    let docs_out = a.docs_out.clone().unwrap_or_else(|| docs_path_for(&out));
    ensure_distinct(&[&passages, &seeds_path], &[&out, &docs_out])?;

    let seeds = load_seeds(&seeds_path)?;
    let exemplars = ExemplarSet::from_seeds(&seeds, &cfg.exemplar_counts)?;
    let generator = cfg.role_backend("generator", verbose)?;
    let assistant = match algo.uses_assistant() {
        true => Some(cfg.role_backend("assistant", verbose)?),
        false => None,
    };
    let ingest_seed = run.rng_seed.unwrap_or(0);
    let engine = Engine::new(algo, Backends { generator, assistant }, Arc::new(exemplars), run)
        .map_err(engine_error)?
        .with_prompt_options(cfg.prompt_options()?);

    let ingested = ingest_passages(&passages, a.limit, ingest_seed)?;
    write_jsonl(&docs_out, &ingested.documents)?;
    let keep = a.keep_exchanges || cfg.keep_exchanges;
    let mut w = BufWriter::new(File::create(&out).with_context(|| format!("creating {}", out.display()))?);
    let mut write_err: Option<anyhow::Error> = None;
    let summary = engine.run_corpus(&ingested.documents, Some(cancel), |mut conv| {
        if !keep {
            conv.strip_exchanges();
        }
        if write_err.is_none() {
            let res = serde_json::to_writer(&mut w, &conv)
                .map_err(anyhow::Error::from)
                .and_then(|_| w.write_all(b"\n").map_err(Into::into));
            if let Err(e) = res {
                write_err = Some(e);
            }
        }
    });
    w.flush().with_context(|| format!("writing {}", out.display()))?;
    if let Some(e) = write_err {
        return Err(e.context(format!("writing {}", out.display())));
    }
    print!("{}", report::generation_summary(engine.algorithm().id.as_str(), &summary));
    for (doc_id, reason) in &summary.failures {
        eprintln!("warning: {doc_id}: {reason}");
    }
    if ingested.malformed > 0 {
        println!("malformed passages skipped: {}", ingested.malformed);
    }
    if summary.cancelled {
        bail!("interrupted; {} completed conversations were written", summary.succeeded);
    }
    if summary.attempted > 0 && summary.succeeded == 0 {
        bail!("every conversation failed; see the warnings above");
    }
    Ok(())
}

/// `out.jsonl` → `out.docs.jsonl`.
pub fn docs_path_for(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.docs.jsonl"))
}

fn reference_run(
    cfg: &AppConfig,
    data: &[Conversation],
    docs: &HashMap<String, Document>,
    seeds: &Path,
    backend_name: Option<&str>,
    opts: &EvalOptions,
    verbose: bool,
) -> Result<ReferenceRun> {
    let seeds = load_seeds(seeds)?;
    let exemplars = ExemplarSet::from_seeds(&seeds, &cfg.exemplar_counts)?;
    let backend = match backend_name {
        Some(n) => cfg.build_backend(n, verbose)?,
        None => cfg.role_backend("reference", verbose)?,
    };
    let run = generate_pseudo_references(data, docs, backend.as_ref(), &exemplars, opts)?;
    if !run.unscorable.is_empty() {
        log::warn!("{} turns have no reference and will not be scored", run.unscorable.len());
    }
    Ok(run)
}

fn make_refs(cfg: &AppConfig, a: &crate::MakeRefsArgs, verbose: bool) -> Result<()> {
    let data_path = pick(&a.data.data, &cfg.paths.data, "--data")?;
    let docs_path = pick(&a.data.docs, &cfg.paths.docs, "--docs")?;
    let seeds = pick(&a.seeds, &cfg.paths.seeds, "--seeds")?;
    let out = pick(&a.out, &cfg.paths.refs, "--out")?;
    ensure_distinct(&[&data_path, &docs_path, &seeds], &[&out])?;
    let opts = eval_options(cfg, a.parallelism)?;
    let data = load_data(&data_path)?;
    let docs = load_docs(&docs_path)?;
    let run = reference_run(cfg, &data, &docs, &seeds, a.reference.as_deref(), &opts, verbose)?;
    write_jsonl(&out, &run.references)?;
    println!(
        "references written: {} ({} no-answer); unscorable turns: {}",
        run.references.len(),
        run.references.iter().filter(|r| r.reference_is_no_answer).count(),
        run.unscorable.len()
    );
    Ok(())
}

fn evaluate(cfg: &AppConfig, a: &crate::EvaluateArgs, verbose: bool) -> Result<()> {
    let data_path = pick(&a.data.data, &cfg.paths.data, "--data")?;
    let docs_path = a.data.docs.clone().or_else(|| cfg.paths.docs.clone());
    let opts = eval_options(cfg, a.parallelism)?;
    let mut inputs: Vec<PathBuf> = vec![data_path.clone()];
    inputs.extend(docs_path.clone());
    let mut outputs: Vec<PathBuf> = Vec::new();
    outputs.extend(a.out.clone());
    outputs.extend(a.out.as_deref().map(report::table_path));
    outputs.extend(a.csv.clone());
    outputs.extend(a.refs_out.clone());

    let data = load_data(&data_path)?;
    let docs = docs_path.as_deref().map(load_docs).transpose()?;
    let (refs, unscorable) = if a.make_refs {
        let docs = docs.as_ref().ok_or_else(|| usage("--make-refs needs --docs"))?;
        let seeds = pick(&a.seeds, &cfg.paths.seeds, "--seeds")?;
        inputs.push(seeds.clone());
        check_distinct(&inputs, &outputs)?;
        let run = reference_run(cfg, &data, docs, &seeds, a.reference.as_deref(), &opts, verbose)?;
        if let Some(p) = &a.refs_out {
            write_jsonl(p, &run.references)?;
        }
        (run.references, run.unscorable.len())
    } else {
        let refs_path = a
            .refs
            .clone()
            .or_else(|| cfg.paths.refs.clone())
            .ok_or_else(|| usage("give --refs or --make-refs"))?;
        inputs.push(refs_path.clone());
        check_distinct(&inputs, &outputs)?;
        let refs: Vec<PseudoReference> = read_jsonl(&refs_path)?;
        (refs, 0)
    };
    // Turns whose reference could not be generated are excluded, not fatal.
    let scored = score_against_references(&data, &refs, &opts, a.allow_missing || unscorable > 0)?;
    let stats = match &docs {
        Some(d) => Some(dataset_stats(&data, d, &opts, None)?),
        None => None,
    };
    let rep = EvaluationReport {
        n_conversations: data.len(),
        n_scored_turns: scored.turns.len(),
        missing_references: scored.missing_references,
        unscorable_references: unscorable,
        scores: scored.scores,
        stats,
        turns: scored.turns,
    };
    let table = rep.table();
    print!("{table}");
    if let Some(p) = &a.out {
        report::write_report(p, &rep, &table)?;
    }
    if let Some(p) = &a.csv {
        rep.write_csv(p)?;
    }
    Ok(())
}

fn check_distinct(inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
    let i: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let o: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    ensure_distinct(&i, &o)
}

fn export(cfg: &AppConfig, a: &crate::ExportSftArgs) -> Result<()> {
    let data_path = pick(&a.data.data, &cfg.paths.data, "--data")?;
    let docs_path = pick(&a.data.docs, &cfg.paths.docs, "--docs")?;
    let out = pick(&a.out, &cfg.paths.out, "--out")?;
    ensure_distinct(&[&data_path, &docs_path], &[&out])?;
    let url = a.tokenizer_url.clone().or_else(|| cfg.sft.tokenizer_url.clone());
    let counter = token_counter(url.as_deref())?;
    let opts = SftOptions {
        max_input_tokens: a.max_input_tokens.unwrap_or(cfg.sft.max_input_tokens),
        origin_dataset: a.origin.clone().unwrap_or_else(|| cfg.sft.origin_dataset.clone()),
        no_answer: no_answer_patterns(cfg),
    };
    let data = load_data(&data_path)?;
    let docs = load_docs(&docs_path)?;
    let exported = export_sft(&data, &docs, counter.as_ref(), &opts)?;
    write_jsonl(&out, &exported.examples)?;
    println!(
        "examples written: {}; filtered at >= {} tokens: {}{}",
        exported.examples.len(),
        opts.max_input_tokens,
        exported.filtered,
        if counter.is_exact() { "" } else { " (approximate token counts)" }
    );
    Ok(())
}

fn parse_component(s: &str) -> Result<(PathBuf, f64)> {
    let (path, w) = s
        .rsplit_once('=')
        .ok_or_else(|| usage(format!("--input {s:?} is not PATH=WEIGHT")))?;
    let w: f64 = w.parse().map_err(|_| usage(format!("bad weight in --input {s:?}")))?;
    if !(w >= 0.0 && w.is_finite()) {
        return Err(usage(format!("weight in --input {s:?} must be non-negative")));
    }
    Ok((PathBuf::from(path), w))
}

/// Non-blank lines of a JSONL file, each checked to be JSON but kept verbatim.
fn raw_json_lines(path: &Path) -> Result<Vec<String>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        serde_json::from_str::<serde::de::IgnoredAny>(t)
            .with_context(|| format!("{}:{}: malformed JSON", path.display(), i + 1))?;
        out.push(t.to_string());
    }
    Ok(out)
}

fn mix_cmd(a: &crate::MixArgs) -> Result<()> {
    let parts: Vec<(PathBuf, f64)> = a.inputs.iter().map(|s| parse_component(s)).collect::<Result<_>>()?;
    let sum: f64 = parts.iter().map(|(_, w)| w).sum();
    if sum <= 0.0 {
        return Err(usage("mix weights sum to zero"));
    }
    let inputs: Vec<&Path> = parts.iter().map(|(p, _)| p.as_path()).collect();
    ensure_distinct(&inputs, &[&a.out])?;
    let spec = MixSpec {
        components: parts
            .iter()
            .map(|(p, w)| MixComponent {
                source: p.display().to_string(),
                weight: w / sum,
            })
            .collect(),
        total: a.total,
        rng_seed: a.seed,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let sources: Vec<Vec<String>> = inputs.iter().map(|p| raw_json_lines(p)).collect::<Result<_>>()?;
    let mixed = mix(&spec, &sources)?;
    let mut w = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    for line in &mixed {
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    let counts = groundconv::dataset::allocate(
        &spec.components.iter().map(|c| c.weight).collect::<Vec<_>>(),
        spec.total,
    );
    for (c, n) in spec.components.iter().zip(counts) {
        println!("{}: {n}", c.source);
    }
    println!("total: {}", mixed.len());
    Ok(())
}

fn stats(cfg: &AppConfig, a: &crate::StatsArgs) -> Result<()> {
    let data_path = pick(&a.data.data, &cfg.paths.data, "--data")?;
    let docs_path = pick(&a.data.docs, &cfg.paths.docs, "--docs")?;
    if let Some(out) = &a.out {
        ensure_distinct(&[&data_path, &docs_path], &[out, &report::table_path(out)])?;
    }
    let opts = eval_options(cfg, None)?;
    let data = load_data(&data_path)?;
    let docs = load_docs(&docs_path)?;
    let scorer = match a.consistency_url.clone().or_else(|| cfg.metrics.consistency_url.clone()) {
        Some(u) => Some(HttpConsistencyScorer::new(&u, Duration::from_secs(60)).map_err(usage)?),
        None => None,
    };
    let st = dataset_stats(&data, &docs, &opts, scorer.as_ref().map(|s| s as &dyn ConsistencyScorer))?;
    let table = report::stats_table(&st);
    print!("{table}");
    if let Some(p) = &a.out {
        report::write_report(p, &st, &table)?;
    }
    Ok(())
}

fn roundtrip(cfg: &AppConfig, a: &crate::RoundtripArgs, verbose: bool) -> Result<()> {
    let base = cfg.eval.clone();
    let rt = RoundtripConfig {
        cycles: a
            .cycles
            .or(base.as_ref().map(|b| b.cycles))
            .ok_or_else(|| usage("--cycles is required"))?,
        rounds: a
            .rounds
            .or(base.as_ref().map(|b| b.rounds))
            .ok_or_else(|| usage("--rounds is required"))?,
        k_shots: a.k_shots.or(base.as_ref().map(|b| b.k_shots)).unwrap_or(2),
        rng_seed: a.seed.or(base.as_ref().map(|b| b.rng_seed)).unwrap_or(0),
        exclude_same_document: a.exclude_same_document || base.as_ref().is_some_and(|b| b.exclude_same_document),
    };
    rt.validate().map_err(|e| usage(e.to_string()))?;
    let demos_path = pick(&a.demos, &cfg.paths.data, "--demos")?;
    let docs_path = pick(&a.docs, &cfg.paths.docs, "--docs")?;
    let seeds_path = pick(&a.seeds, &cfg.paths.seeds, "--seeds")?;
    if let Some(out) = &a.out {
        ensure_distinct(&[&demos_path, &docs_path, &seeds_path], &[out, &report::table_path(out)])?;
    }
    let opts = eval_options(cfg, a.parallelism)?;
    let docs = load_docs(&docs_path)?;
    let mut pool = Vec::new();
    for mut conv in load_data(&demos_path)? {
        let document = docs
            .get(&conv.document_id)
            .cloned()
            .ok_or_else(|| anyhow::anyhow!("no document {} for a demonstration", conv.document_id))?;
        conv.traces.clear();
        pool.push(ConversationExemplar { document, conversation: conv });
    }
    let seeds = load_seeds(&seeds_path)?;
    let agent = match &a.agent {
        Some(n) => cfg.build_backend(n, verbose)?,
        None => cfg.role_backend("agent", verbose)?,
    };
    let rep = roundtrip_icl_eval(&pool, &seeds, agent.as_ref(), &rt, &opts)?;
    let table = report::roundtrip_table(&rep);
    print!("{table}");
    if let Some(p) = &a.out {
        report::write_report(p, &rep, &table)?;
    }
    Ok(())
}
