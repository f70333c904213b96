//! The pipeline commands behind the CLI: evolve, extract, decode, stats,
//! and check.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use stepsearch::backend::{Generator, HttpBackend, MockBackend, MockScorer, Scorer};
use stepsearch::decoder::{self, reflective_ratio, Candidate, DecodeError, ReflectiveStats};
use stepsearch::engine::{run_search, ProblemInstance};
use stepsearch::forge::{
    curriculum_sample, extract_dpo, extract_prm, extract_sft, has_mixed_outcomes, profile_accuracy,
    DpoRecord, PrmRecord, SftRecord,
};
use stepsearch::prompts::{PromptKind, PromptSet};
use stepsearch::tree::{
    deserialize_tree, serialize_tree, tree_record_to_json, NodeKind, SearchTree,
};
use stepsearch::verifier;
use stepsearch::GenerationRequest;

use crate::config::{config_hash, BackendKind, DecodeMethod, RunConfig};
use crate::io::{
    atomic_write, read_seed_file, read_tree_record, tree_dump_paths, validate_file,
    write_json_pretty, write_jsonl, DecodeReportRow, DecodeSummary, ExtractSummary, Manifest,
    RecordKind,
};

fn build_generator(run: &RunConfig, problems: &[ProblemInstance]) -> Result<Arc<dyn Generator>> {
    match run.backend.kind {
        BackendKind::Mock => Ok(Arc::new(MockBackend::new(
            run.backend.mock.to_script(),
            problems,
        ))),
        BackendKind::Http => Ok(Arc::new(
            HttpBackend::new(run.backend.http.clone()).context("http backend")?,
        )),
    }
}

fn build_scorer(run: &RunConfig) -> Result<Arc<dyn Scorer>> {
    match run.backend.kind {
        BackendKind::Mock => Ok(Arc::new(MockScorer {
            seed: run.backend.mock.seed,
            ..MockScorer::default()
        })),
        BackendKind::Http => Ok(Arc::new(
            HttpBackend::new(run.backend.http.clone()).context("http scorer")?,
        )),
    }
}

fn load_prompts(run: &RunConfig) -> Result<PromptSet> {
    match &run.prompt_dir {
        Some(dir) => PromptSet::load_dir(dir).context("loading prompt templates"),
        None => Ok(PromptSet::default()),
    }
}

fn thread_pool(parallelism: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .context("building worker pool")
}

/// Profiles the seed set, picks a curriculum, runs the search on every
/// selected problem, and writes one tree dump per problem plus a manifest.
pub fn cmd_evolve(run: &RunConfig) -> Result<Manifest> {
    let started = Instant::now();
    let problems = read_seed_file(&run.seeds)?;
    let generator = build_generator(run, &problems)?;
    let prompts = load_prompts(run)?;
    let hash = config_hash(run);
    let pool = thread_pool(run.parallelism)?;

    // Profiles stay in seed order; only the work is spread over the pool.
    let profiles = pool.install(|| {
        problems
            .par_iter()
            .map(|problem| {
                profile_accuracy(
                    std::slice::from_ref(problem),
                    generator.as_ref(),
                    &prompts,
                    run.curriculum.samples,
                    run.search.temperature,
                )
                .map(|mut p| p.remove(0))
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let eligible = profiles.iter().filter(|p| p.accuracy < 1.0).count();
    let take = if run.curriculum.take == 0 {
        eligible
    } else {
        run.curriculum.take
    };
    let selected = if take == 0 {
        Vec::new()
    } else {
        curriculum_sample(&profiles, take)
    };

    let trees_dir = run.output_dir.join("trees");
    std::fs::create_dir_all(&trees_dir)?;
    let chosen: Vec<&ProblemInstance> = selected
        .iter()
        .map(|id| {
            problems
                .iter()
                .find(|p| &p.id == id)
                .expect("selected ids come from the profile set")
        })
        .collect();

    let outcomes: Vec<(String, Result<()>)> = pool.install(|| {
        chosen
            .par_iter()
            .map(|problem| {
                let result = run_search(problem, generator.as_ref(), &run.search, &prompts)
                    .map_err(anyhow::Error::from)
                    .and_then(|tree| {
                        let record = serialize_tree(&tree, &hash, run.iteration);
                        let json = tree_record_to_json(&record)?;
                        atomic_write(
                            &trees_dir.join(format!("{}.json", problem.id)),
                            json.as_bytes(),
                        )
                    });
                (problem.id.clone(), result)
            })
            .collect()
    });

    let mut failed = Vec::new();
    for (id, outcome) in &outcomes {
        if let Err(e) = outcome {
            eprintln!("warning: problem `{id}` failed: {e:#}");
            failed.push(id.clone());
        }
    }
    if !outcomes.is_empty() && failed.len() == outcomes.len() {
        bail!("all {} selected problems failed", outcomes.len());
    }

    let manifest = Manifest {
        iteration: run.iteration,
        config_hash: hash,
        seed: run.search.seed,
        total_problems: problems.len(),
        profiled: profiles.len(),
        selected,
        succeeded: outcomes.len() - failed.len(),
        failed,
        wall_time_ms: started.elapsed().as_millis() as u64,
    };
    write_json_pretty(&run.output_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Reads every tree dump under `trees_dir` and writes the three corpora
/// plus a summary with the filter statistics.
pub fn cmd_extract(run: &RunConfig, trees_dir: &Path, out_dir: &Path) -> Result<ExtractSummary> {
    let paths = tree_dump_paths(trees_dir)?;
    let mut sft: Vec<SftRecord> = Vec::new();
    let mut dpo: Vec<DpoRecord> = Vec::new();
    let mut prm: Vec<PrmRecord> = Vec::new();
    let mut summary = ExtractSummary {
        iteration: run.iteration,
        trees_total: paths.len(),
        trees_corrupt: 0,
        trees_all_correct: 0,
        trees_all_incorrect: 0,
        trees_mixed: 0,
        sft_records: 0,
        dpo_records: 0,
        prm_records: 0,
    };
    for path in &paths {
        let tree = match read_tree_record(path).and_then(|r| Ok(deserialize_tree(&r)?)) {
            Ok(tree) => tree,
            Err(e) => {
                eprintln!("warning: skipping corrupt dump `{}`: {e:#}", path.display());
                summary.trees_corrupt += 1;
                continue;
            }
        };
        if has_mixed_outcomes(&tree) {
            summary.trees_mixed += 1;
        } else if tree.correct_leaf_count > 0 {
            summary.trees_all_correct += 1;
        } else {
            summary.trees_all_incorrect += 1;
        }
        sft.extend(extract_sft(&tree));
        dpo.extend(extract_dpo(&tree, run.extract.min_gap));
        prm.extend(extract_prm(&tree, &run.label));
    }
    summary.sft_records = sft.len();
    summary.dpo_records = dpo.len();
    summary.prm_records = prm.len();
    write_jsonl(&out_dir.join("sft.jsonl"), &sft)?;
    write_jsonl(&out_dir.join("dpo.jsonl"), &dpo)?;
    write_jsonl(&out_dir.join("prm.jsonl"), &prm)?;
    write_json_pretty(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// A response without an answer marker gets a forced continuation: the
/// marker is appended and the model completes it under a small token limit,
/// restricted to the option letters for multiple choice. The wire request
/// carries the full context (`base_prompt` + response), while the candidate
/// keeps only the response side.
fn force_answer_if_needed(
    index: usize,
    text: String,
    base_prompt: &str,
    problem: &ProblemInstance,
    generator: &dyn Generator,
) -> Result<Candidate> {
    let candidate = Candidate::from_text(index, text);
    if candidate.extracted_answer.is_some() {
        return Ok(candidate);
    }
    let forced = verifier::build_forced_continuation(&candidate.text, problem);
    let mut request =
        GenerationRequest::new(format!("{base_prompt} {}", forced.prompt), 1, "forced")
            .with_temperature(0.0)
            .with_max_new_tokens(forced.max_new_tokens);
    if let Some(allowed) = forced.allowed_first_tokens {
        request = request.with_allowed_first_tokens(allowed);
    }
    let continuation = generator.generate(&request)?.remove(0);
    Ok(Candidate::from_text(
        index,
        format!("{}{continuation}", forced.prompt),
    ))
}

fn decode_one(
    problem: &ProblemInstance,
    run: &RunConfig,
    method: DecodeMethod,
    n: usize,
    generator: &dyn Generator,
    scorer: &dyn Scorer,
    prompts: &PromptSet,
) -> Result<DecodeReportRow> {
    let started = Instant::now();
    let prompt = prompts.render(
        PromptKind::Finish,
        &problem.prompt,
        &[stepsearch::tree::ROOT_STEP_TEXT],
    )?;
    let (samples, temperature) = match method {
        DecodeMethod::Cot => (1, 0.0),
        _ => (n, run.decode.params.temperature),
    };
    let mut request =
        GenerationRequest::new(prompt, samples, "decode").with_temperature(temperature);
    request.top_p = run.decode.params.top_p;
    let base_prompt = request.prompt.clone();
    let completions = generator.generate(&request)?;
    let candidates: Vec<Candidate> = completions
        .into_iter()
        .enumerate()
        .map(|(i, text)| force_answer_if_needed(i, text, &base_prompt, problem, generator))
        .collect::<Result<_>>()?;

    let answer: Option<String> = match method {
        DecodeMethod::Cot => candidates.first().and_then(|c| c.extracted_answer.clone()),
        DecodeMethod::Sc => match decoder::self_consistency(&candidates) {
            Ok(answer) => Some(answer),
            Err(DecodeError::NoAnswer) => None,
            Err(e) => return Err(e.into()),
        },
        DecodeMethod::Bon => {
            let chosen = decoder::best_of_n(candidates, scorer, problem)?;
            chosen.extracted_answer
        }
        DecodeMethod::Pvs => {
            let scored: Vec<Candidate> = candidates
                .into_iter()
                .map(|c| decoder::score_candidate(c, scorer, problem))
                .collect::<Result<_, _>>()?;
            match decoder::vote_sum(&scored) {
                Ok(answer) => Some(answer),
                Err(DecodeError::NoAnswer) => None,
                Err(e) => return Err(e.into()),
            }
        }
    };
    let correct = answer
        .as_deref()
        .map(|a| verifier::verify(a, problem).correct)
        .unwrap_or(false);
    Ok(DecodeReportRow {
        problem_id: problem.id.clone(),
        method: method.as_str().to_string(),
        n: samples,
        answer,
        correct,
        latency_ms: started.elapsed().as_millis() as u64,
    })
}

/// Decodes every problem with the requested strategy and writes a
/// per-problem report plus an aggregate summary.
pub fn cmd_decode(
    run: &RunConfig,
    method: DecodeMethod,
    n: usize,
    out_path: &Path,
) -> Result<DecodeSummary> {
    if n == 0 {
        bail!("--n must be at least 1");
    }
    let problems = read_seed_file(&run.seeds)?;
    let generator = build_generator(run, &problems)?;
    let scorer = build_scorer(run)?;
    let prompts = load_prompts(run)?;

    let pool = thread_pool(run.parallelism)?;
    let rows: Vec<DecodeReportRow> = pool.install(|| {
        problems
            .par_iter()
            .map(|problem| {
                decode_one(
                    problem,
                    run,
                    method,
                    n,
                    generator.as_ref(),
                    scorer.as_ref(),
                    &prompts,
                )
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let correct = rows.iter().filter(|r| r.correct).count();
    let summary = DecodeSummary {
        iteration: run.iteration,
        method: method.as_str().to_string(),
        n,
        total: rows.len(),
        correct,
        accuracy: if rows.is_empty() {
            0.0
        } else {
            correct as f64 / rows.len() as f64
        },
    };
    write_jsonl(out_path, &rows)?;
    let summary_path = out_path.with_extension("summary.json");
    write_json_pretty(&summary_path, &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBuckets {
    pub short: usize,
    pub mid: usize,
    pub long: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetStats {
    pub count: usize,
    pub mean_length: f64,
}

/// Trajectory statistics: the length histogram, the correct-versus-incorrect
/// comparison, and reflective-token ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub total: usize,
    pub short_below: usize,
    pub long_above: usize,
    pub buckets: LengthBuckets,
    pub correct: Option<SetStats>,
    pub incorrect: Option<SetStats>,
    pub reflective_correct: ReflectiveStats,
    pub reflective_incorrect: Option<ReflectiveStats>,
}

/// Whitespace-delimited word count, the model-free token approximation.
fn approximate_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

fn set_stats(lengths: &[usize]) -> Option<SetStats> {
    if lengths.is_empty() {
        return None;
    }
    Some(SetStats {
        count: lengths.len(),
        mean_length: lengths.iter().sum::<usize>() as f64 / lengths.len() as f64,
    })
}

/// Collects `(trajectory text, correct)` pairs from either a tree-dump
/// directory or a line-delimited SFT corpus file.
fn load_trajectories(input: &Path) -> Result<Vec<(String, bool)>> {
    let mut items = Vec::new();
    if input.is_dir() {
        for path in tree_dump_paths(input)? {
            let record = read_tree_record(&path)?;
            let tree: SearchTree = deserialize_tree(&record)
                .with_context(|| format!("tree dump `{}`", path.display()))?;
            for leaf in tree.iter().filter(|n| n.kind == NodeKind::Finish) {
                let text = stepsearch::prompts::join_steps(&tree.steps_to(leaf.id), 0);
                items.push((text, leaf.value == 1.0));
            }
        }
    } else {
        let records: Vec<SftRecord> = crate::io::read_jsonl(input)?;
        // SFT corpora hold only verified-correct trajectories.
        items.extend(records.into_iter().map(|r| (r.response, true)));
    }
    Ok(items)
}

pub fn cmd_stats(input: &Path, short_below: usize, long_above: usize) -> Result<StatsReport> {
    let trajectories = load_trajectories(input)?;
    let mut buckets = LengthBuckets {
        short: 0,
        mid: 0,
        long: 0,
    };
    let mut correct_lengths = Vec::new();
    let mut incorrect_lengths = Vec::new();
    let mut incorrect_responses = Vec::new();
    for (text, correct) in &trajectories {
        let length = approximate_tokens(text);
        if length < short_below {
            buckets.short += 1;
        } else if length > long_above {
            buckets.long += 1;
        } else {
            buckets.mid += 1;
        }
        if *correct {
            correct_lengths.push(length);
        } else {
            incorrect_lengths.push(length);
            incorrect_responses.push((text.clone(), true));
        }
    }
    let reflective_incorrect = if incorrect_responses.is_empty() {
        None
    } else {
        Some(reflective_ratio(&incorrect_responses))
    };
    Ok(StatsReport {
        total: trajectories.len(),
        short_below,
        long_above,
        buckets,
        correct: set_stats(&correct_lengths),
        incorrect: set_stats(&incorrect_lengths),
        reflective_correct: reflective_ratio(&trajectories),
        reflective_incorrect,
    })
}

/// Validates files against their schemas; returns the total violation count.
pub fn cmd_check(kind: RecordKind, paths: &[PathBuf]) -> Result<usize> {
    let mut total = 0;
    for path in paths {
        let violations = validate_file(kind, path)?;
        if violations.is_empty() {
            println!("{}: ok", path.display());
        } else {
            for violation in &violations {
                println!("{}: {violation}", path.display());
            }
            total += violations.len();
        }
    }
    Ok(total)
}
