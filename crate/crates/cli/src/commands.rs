use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use iterag_core::audit::RequestLog;
use iterag_core::coldstart::{
    generate_dataset, question_keys, rejection_filter, sample_rl_batch, sft_pairs, KeepPolicy,
};
use iterag_core::eval::{evaluate, EvalMode};
use iterag_core::model::{read_jsonl, read_trajectories, write_jsonl};
use iterag_core::policy::AdvantageSeries;
use iterag_core::retrieval::{read_corpus, save_index};
use iterag_core::reward::{score_trajectory, RewardRecord};
use iterag_core::{Corpus, Error, LanguageModel, QaItem, Result, Status, Trajectory};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::config::PipelineConfig;
use crate::manifest::{check_inputs, write_manifest, InputRef, Manifest};
use crate::{
    AdvantageArgs, Cli, ColdstartCmd, Command, EvalArgs, EvalCmd, IndexCmd, RlCmd, ScoreArgs, SftCmd,
};

pub fn run(cli: &Cli) -> Result<()> {
    // Mode guards come before any file access.
    if let Command::Coldstart(ColdstartCmd::Filter { keep_all: true, .. }) = &cli.command {
        return Err(Error::usage(
            "--keep-all is not valid for filtering (cold-start only); use `rl sample`",
        ));
    }
    let config = PipelineConfig::load(cli.global.config.as_deref(), &cli.global.overrides())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.concurrency)
        .build()
        .map_err(|e| Error::validation(format!("worker pool: {e}")))?;
    let log = RequestLog::new();
    let ctx = Ctx { config, log: log.clone() };
    let result = pool.install(|| ctx.dispatch(&cli.command));
    if let Some(path) = &cli.global.request_log {
        write_jsonl(BufWriter::new(File::create(path)?), &log.entries())?;
    }
    result
}

struct Ctx {
    config: PipelineConfig,
    log: RequestLog,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_jsonl(create(path)?, records)
}

fn read_items(path: &Path) -> Result<Vec<QaItem>> {
    let items: Vec<QaItem> = read_jsonl(open(path)?)?;
    for (i, item) in items.iter().enumerate() {
        item.validate().map_err(|e| match e {
            Error::Parse { field, message } => Error::parse(format!("line {}: {field}", i + 1), message),
            other => other,
        })?;
    }
    if items.is_empty() {
        return Err(Error::validation(format!("{}: no items", path.display())));
    }
    Ok(items)
}

fn read_all_trajectories(paths: &[std::path::PathBuf]) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(read_trajectories(open(p)?).map_err(|e| match e {
            Error::Parse { field, message } => Error::parse(format!("{}: {field}", p.display()), message),
            other => other,
        })?);
    }
    Ok(out)
}

fn status_counts(trajectories: &[Trajectory]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    counts.insert("trajectories".to_owned(), trajectories.len());
    for t in trajectories {
        *counts.entry(format!("status_{}", t.status.as_str())).or_insert(0) += 1;
    }
    counts
}

impl Ctx {
    fn dispatch(&self, command: &Command) -> Result<()> {
        match command {
            Command::Index(IndexCmd::Build { corpus, output }) => self.index_build(corpus, output),
            Command::Coldstart(ColdstartCmd::Generate {
                input,
                output,
                samples,
                temperatures,
            }) => self.coldstart_generate(input, output, *samples, temperatures.clone()),
            Command::Coldstart(ColdstartCmd::Filter {
                input,
                kept,
                discarded,
                retry,
                aborted,
                ..
            }) => self.coldstart_filter(input, kept, discarded, retry.as_deref(), aborted.as_deref()),
            Command::Sft(SftCmd::Export { input, output }) => self.sft_export(input, output),
            Command::Rl(RlCmd::Sample {
                input,
                output,
                exclude,
                samples,
            }) => self.rl_sample(input, output, exclude, *samples),
            Command::Score(args) => self.score(args),
            Command::Advantage(args) => self.advantage(args),
            Command::Eval(EvalCmd::Run(args)) => self.eval(args, EvalMode::Loop),
            Command::Eval(EvalCmd::Baseline(args)) => self.eval(args, EvalMode::Baseline),
        }
    }

    fn manifest(&self, command: &str, counts: BTreeMap<String, usize>, inputs: Vec<InputRef>) -> Manifest {
        Manifest {
            command: command.to_owned(),
            config_hash: self.config.hash(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            deterministic: self.config.deterministic(),
            seed: self.config.seed,
            counts,
            discard_reasons: BTreeMap::new(),
            inputs,
        }
    }

    fn index_build(&self, corpus_path: &Path, output: &Path) -> Result<()> {
        let docs = read_corpus(open(corpus_path)?)?;
        let corpus = Corpus::build(docs, self.config.retriever.params())?;
        save_index(output, &corpus)?;
        let stats = corpus.stats();
        eprintln!(
            "indexed {} documents (vocabulary {}, mean length {:.1} tokens)",
            stats.documents, stats.vocabulary, stats.mean_length
        );
        let counts = BTreeMap::from([
            ("documents".to_owned(), stats.documents),
            ("vocabulary".to_owned(), stats.vocabulary),
            ("tokens".to_owned(), stats.total_tokens),
        ]);
        let inputs = check_inputs(&[corpus_path])?;
        write_manifest(output, &self.manifest("index build", counts, inputs))
    }

    fn coldstart_generate(
        &self,
        input: &Path,
        output: &Path,
        samples: Option<usize>,
        temperatures: Option<Vec<f64>>,
    ) -> Result<()> {
        let items = read_items(input)?;
        let mut run = self.config.generation.clone();
        run.keep_policy = KeepPolicy::RejectIncorrect;
        if let Some(s) = samples {
            run.samples_per_question = s;
        }
        if let Some(t) = temperatures {
            run.temperatures = t;
        }
        let policy = self.config.policy(&self.log)?;
        let retriever = self.config.retriever(&self.log)?;
        let prompts = self.config.prompts()?;
        let trajectories = generate_dataset(&items, &*policy, &*retriever, &prompts, &run)?;
        write_records(output, &trajectories)?;
        let counts = status_counts(&trajectories);
        eprintln!("generated {} trajectories for {} items", trajectories.len(), items.len());
        write_manifest(output, &self.manifest("coldstart generate", counts, check_inputs(&[input])?))
    }

    fn coldstart_filter(
        &self,
        inputs: &[std::path::PathBuf],
        kept_path: &Path,
        discarded_path: &Path,
        retry_path: Option<&Path>,
        aborted_path: Option<&Path>,
    ) -> Result<()> {
        let refs = check_inputs(&inputs.iter().map(|p| p.as_path()).collect::<Vec<_>>())?;
        let trajectories = read_all_trajectories(inputs)?;
        let judge = self.config.judge(&self.log)?;
        let prompts = self.config.prompts()?;
        let outcome = rejection_filter(trajectories, judge.as_deref(), &prompts)?;

        write_records(kept_path, &outcome.kept)?;
        write_records(discarded_path, &outcome.discarded)?;
        for (path, list, what) in [
            (retry_path, &outcome.retry, "judge-failed"),
            (aborted_path, &outcome.aborted, "aborted"),
        ] {
            match path {
                Some(p) => write_records(p, list)?,
                None if !list.is_empty() => {
                    warn!("{} {what} trajectories not written (no output path given)", list.len())
                }
                None => {}
            }
        }
        let counts = BTreeMap::from([
            ("input".to_owned(), outcome.total()),
            ("kept".to_owned(), outcome.kept.len()),
            ("discarded".to_owned(), outcome.discarded.len()),
            ("retry".to_owned(), outcome.retry.len()),
            ("aborted".to_owned(), outcome.aborted.len()),
        ]);
        eprintln!(
            "kept {} of {} (discarded {}, retry {}, aborted {})",
            outcome.kept.len(),
            outcome.total(),
            outcome.discarded.len(),
            outcome.retry.len(),
            outcome.aborted.len()
        );
        let mut manifest = self.manifest("coldstart filter", counts, refs);
        manifest.discard_reasons = outcome.histogram();
        write_manifest(kept_path, &manifest)?;
        write_manifest(discarded_path, &manifest)
    }

    fn sft_export(&self, inputs: &[std::path::PathBuf], output: &Path) -> Result<()> {
        let refs = check_inputs(&inputs.iter().map(|p| p.as_path()).collect::<Vec<_>>())?;
        let trajectories = read_all_trajectories(inputs)?;
        let mut pairs = Vec::new();
        for t in &trajectories {
            pairs.extend(sft_pairs(t)?);
        }
        write_records(output, &pairs)?;
        eprintln!("exported {} pairs from {} trajectories", pairs.len(), trajectories.len());
        let counts = BTreeMap::from([
            ("trajectories".to_owned(), trajectories.len()),
            ("pairs".to_owned(), pairs.len()),
        ]);
        write_manifest(output, &self.manifest("sft export", counts, refs))
    }

    fn rl_sample(
        &self,
        input: &Path,
        output: &Path,
        exclude: &[std::path::PathBuf],
        samples: Option<usize>,
    ) -> Result<()> {
        let items = read_items(input)?;
        let mut excluded = HashSet::new();
        for path in exclude {
            excluded.extend(question_keys(&read_items(path)?));
        }
        let mut run = self.config.generation.clone();
        run.keep_policy = KeepPolicy::KeepAll;
        run.truncate_chars = Some(self.config.retriever.truncate_chars);
        if let Some(s) = samples {
            run.samples_per_question = s;
        }
        let policy = self.config.policy(&self.log)?;
        let retriever = self.config.retriever(&self.log)?;
        let prompts = self.config.prompts()?;
        let trajectories = sample_rl_batch(&items, &*policy, &*retriever, &prompts, &run, &excluded)?;
        write_records(output, &trajectories)?;
        eprintln!("sampled {} trajectories", trajectories.len());
        let mut paths: Vec<&Path> = vec![input];
        paths.extend(exclude.iter().map(|p| p.as_path()));
        let refs = check_inputs(&paths)?;
        write_manifest(output, &self.manifest("rl sample", status_counts(&trajectories), refs))
    }

    fn score(&self, args: &ScoreArgs) -> Result<()> {
        let refs = check_inputs(&args.input.iter().map(|p| p.as_path()).collect::<Vec<_>>())?;
        let trajectories = read_all_trajectories(&args.input)?;
        let judge = self
            .config
            .judge(&self.log)?
            .ok_or_else(|| Error::usage("scoring needs a [judge] section"))?;
        let prompts = self.config.prompts()?;
        let (scorable, aborted): (Vec<&Trajectory>, Vec<&Trajectory>) =
            trajectories.iter().partition(|t| t.status != Status::Aborted);
        if !aborted.is_empty() {
            warn!("skipping {} aborted trajectories", aborted.len());
        }
        let judge: &dyn LanguageModel = &*judge;
        let scores = scorable
            .par_iter()
            .map(|t| score_trajectory(t, judge, &prompts, &self.config.reward))
            .collect::<Result<Vec<_>>>()?;
        let records: Vec<RewardRecord> = scores.iter().flat_map(|s| s.records()).collect();
        write_records(&args.output, &records)?;
        let warnings: usize = scores.iter().map(|s| s.warnings.len()).sum();
        eprintln!(
            "scored {} trajectories ({} steps, {} judge warnings)",
            scores.len(),
            records.len(),
            warnings
        );
        let mut counts = BTreeMap::from([
            ("trajectories".to_owned(), scores.len()),
            ("steps".to_owned(), records.len()),
            ("skipped_aborted".to_owned(), aborted.len()),
            ("judge_warnings".to_owned(), warnings),
            ("judge_calls".to_owned(), scores.iter().map(|s| s.judge_calls as usize).sum()),
        ]);
        for s in &scores {
            let key = format!("outcome_{}", serde_json::to_value(s.outcome).expect("enum").as_str().unwrap_or(""));
            *counts.entry(key).or_insert(0) += 1;
        }
        write_manifest(&args.output, &self.manifest("score", counts, refs))
    }

    fn advantage(&self, args: &AdvantageArgs) -> Result<()> {
        let mut paths: Vec<&Path> = vec![&args.rewards];
        if let Some(v) = &args.values {
            paths.push(v);
        }
        let refs = check_inputs(&paths)?;
        let gamma = args.gamma.unwrap_or(self.config.optim.gamma);
        let lam = args.lam.unwrap_or(self.config.optim.lam);

        let records: Vec<RewardRecord> = read_jsonl(open(&args.rewards)?)?;
        let mut order: Vec<String> = Vec::new();
        let mut grouped: HashMap<String, Vec<(usize, f64)>> = HashMap::new();
        for r in records {
            let entry = grouped.entry(r.trajectory_id.clone()).or_insert_with(|| {
                order.push(r.trajectory_id.clone());
                Vec::new()
            });
            entry.push((r.step_index, r.scaled_reward));
        }
        let values: HashMap<String, Vec<f64>> = match &args.values {
            Some(path) => read_jsonl::<ValueRecord, _>(open(path)?)?
                .into_iter()
                .map(|v| (v.trajectory_id, v.values))
                .collect(),
            None => HashMap::new(),
        };

        let mut out = Vec::with_capacity(order.len());
        for id in order {
            let mut steps = grouped.remove(&id).unwrap_or_default();
            steps.sort_by_key(|s| s.0);
            if steps.iter().enumerate().any(|(i, s)| s.0 != i) {
                return Err(Error::validation(format!("trajectory {id}: step indices are not 0..n")));
            }
            let rewards: Vec<f64> = steps.iter().map(|s| s.1).collect();
            let mut v = values.get(&id).cloned().unwrap_or_else(|| vec![0.0; rewards.len() + 1]);
            if v.len() == rewards.len() {
                v.push(0.0);
            }
            let series = AdvantageSeries::compute(rewards, v, gamma, lam)
                .map_err(|e| Error::validation(format!("trajectory {id}: {e}")))?;
            out.push(AdvantageRecord {
                returns: series.returns(),
                trajectory_id: id,
                rewards: series.rewards,
                values: series.values,
                deltas: series.deltas,
                advantages: series.advantages,
                gamma,
                lam,
            });
        }
        write_records(&args.output, &out)?;
        eprintln!("computed advantages for {} trajectories", out.len());
        let counts = BTreeMap::from([("trajectories".to_owned(), out.len())]);
        write_manifest(&args.output, &self.manifest("advantage", counts, refs))
    }

    fn eval(&self, args: &EvalArgs, mode: EvalMode) -> Result<()> {
        let items = read_items(&args.input)?;
        let policy = self.config.policy(&self.log)?;
        let retriever = self.config.retriever(&self.log)?;
        let judge = self.config.judge(&self.log)?;
        let prompts = self.config.prompts()?;
        let run = evaluate(
            &items,
            mode,
            &*policy,
            &*retriever,
            judge.as_deref(),
            &prompts,
            &self.config.eval_loop,
        )?;
        let mut text = serde_json::to_string_pretty(&run.report).map_err(std::io::Error::from)?;
        text.push('\n');
        std::fs::write(&args.output, text)?;
        if let Some(p) = &args.per_item {
            write_records(p, &run.report.per_item)?;
        }
        if let Some(p) = &args.trajectories {
            write_records(p, &run.trajectories)?;
        }
        let r = &run.report;
        eprintln!("n={} em={:.4} f1={:.4} acc={:.4}", r.n, r.em, r.f1, r.acc);
        let mut counts = status_counts(&run.trajectories);
        counts.insert("failures".to_owned(), r.failures.len());
        let name = match mode {
            EvalMode::Loop => "eval run",
            EvalMode::Baseline => "eval baseline",
        };
        write_manifest(&args.output, &self.manifest(name, counts, check_inputs(&[&args.input])?))
    }
}

#[derive(Debug, Deserialize)]
struct ValueRecord {
    trajectory_id: String,
    values: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct AdvantageRecord {
    trajectory_id: String,
    rewards: Vec<f64>,
    values: Vec<f64>,
    deltas: Vec<f64>,
    advantages: Vec<f64>,
    returns: Vec<f64>,
    gamma: f64,
    lam: f64,
}
