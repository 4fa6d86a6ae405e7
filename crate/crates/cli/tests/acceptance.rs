//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p iterag-cli --test acceptance`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use iterag_core::audit::LogEntry;
use iterag_core::coldstart::{parse_sft_input, sft_pairs};
use iterag_core::eval::{exact_match, token_f1};
use iterag_core::format::{parse_step, render_history, FormatViolation, ParsedStep};
use iterag_core::model::read_trajectories;
use iterag_core::policy::{clip_term_from_ratio, gae, kl_penalty, ppo_clip_term, td_errors};
use iterag_core::retrieval::truncate;
use iterag_core::reward::{step_reward, trajectory_scale, Outcome, RewardConfig};
use iterag_core::{Bm25Params, Corpus, Document, Status, Step, Trajectory};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

type Check = std::result::Result<String, String>;
type Criterion<'a> = (&'static str, Option<Duration>, Box<dyn Fn() -> Check + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

struct Run {
    code: i32,
    stderr: String,
}

fn iterag(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_iterag"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn iterag_ok(args: &[&str]) -> std::result::Result<(), String> {
    let r = iterag(args);
    ensure(r.code == 0, || format!("`iterag {}` exited {}: {}", args.join(" "), r.code, r.stderr))
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn load_trajectories(path: &Path) -> Vec<Trajectory> {
    read_trajectories(std::io::BufReader::new(std::fs::File::open(path).unwrap())).unwrap()
}

// 1. Reward algebra.
fn ac1() -> Check {
    let mut rng = StdRng::seed_from_u64(1);
    let cfg = RewardConfig::default();
    for _ in 0..1000 {
        let val: u8 = rng.random_range(0..=1);
        let is_final: bool = rng.random();
        let acc: u8 = if is_final { rng.random_range(0..=1) } else { 0 };
        let rel = if is_final { 0.0 } else { f64::from(rng.random_range(0..=10u32)) / 10.0 };
        let r = step_reward(val, acc, rel, is_final).map_err(|e| e.to_string())?;
        let v = f64::from(val);
        let want = v * (f64::from(acc) + rel) + v - 1.0;
        ensure(r.to_bits() == want.to_bits(), || format!("eq mismatch {r} vs {want}"))?;
        ensure(val == 1 || r == -1.0, || format!("val=0 gave {r}"))?;
        ensure((-1.0..=1.0).contains(&r), || format!("out of range {r}"))?;
        for (outcome, lambda) in [
            (Outcome::Correct, 1.5),
            (Outcome::Incorrect, 0.5),
            (Outcome::FormatError, 1.0),
        ] {
            let s = trajectory_scale(&[r], outcome, &cfg)[0];
            ensure(s.to_bits() == (r * lambda).to_bits(), || format!("scale {outcome:?}: {s}"))?;
        }
    }
    Ok("1000 tuples exact; lambda 1.5/0.5/1.0".into())
}

// 2. GAE against the nested-sum definition.
fn ac2() -> Check {
    let mut rng = StdRng::seed_from_u64(2);
    let grid = [0.0, 0.5, 0.9, 1.0];
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let n = rng.random_range(1..=8);
        let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.5)).collect();
        let values: Vec<f64> =
            (0..=n).map(|i| if i < n { rng.random_range(-1.0..1.0) } else { 0.0 }).collect();
        let gamma = grid[rng.random_range(0..4)];
        let lam = grid[rng.random_range(0..4)];
        let fast = gae(&td_errors(&rewards, &values, gamma).unwrap(), gamma, lam).unwrap();
        for (t, a) in fast.iter().enumerate() {
            let direct: f64 = (t..n)
                .map(|k| {
                    (gamma * lam).powi((k - t) as i32) * (rewards[k] + gamma * values[k + 1] - values[k])
                })
                .sum();
            worst = worst.max((a - direct).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    let adv = gae(&td_errors(&[0.5, 1.0], &[0.2, 0.3, 0.0], 1.0).unwrap(), 1.0, 1.0).unwrap();
    ensure((adv[0] - 1.3).abs() <= 1e-12 && (adv[1] - 0.7).abs() <= 1e-12, || {
        format!("worked example gave {adv:?}")
    })?;
    Ok(format!("500 series, max deviation {worst:.1e}; worked example [1.3, 0.7]"))
}

// 3. PPO clip and KL.
fn ac3() -> Check {
    for a in [-2.5, 0.0, 0.7, 3.0] {
        let got = ppo_clip_term(-1.3, -1.3, a, 0.2).unwrap();
        ensure(got == a, || format!("identity ratio gave {got} for A={a}"))?;
    }
    let up = clip_term_from_ratio(2.0, 1.0, 0.2);
    ensure((up - 1.2).abs() < 1e-12, || format!("rho=2 gave {up}"))?;
    let up_logs = ppo_clip_term(2f64.ln() - 1.0, -1.0, 1.0, 0.2).unwrap();
    ensure((up_logs - 1.2).abs() < 1e-12, || format!("rho=2 via logs gave {up_logs}"))?;
    let down = clip_term_from_ratio(0.5, -1.0, 0.2);
    ensure((down + 0.8).abs() < 1e-12, || format!("rho=0.5 gave {down}"))?;
    let mut rng = StdRng::seed_from_u64(3);
    for _ in 0..1000 {
        let old: f64 = rng.random_range(-10.0..0.0);
        let new: f64 = (old + rng.random_range(-3.0..3.0)).min(0.0);
        let a: f64 = rng.random_range(-5.0..5.0);
        let eps: f64 = rng.random_range(0.01..0.5);
        let rho = (new - old).exp();
        let want = (rho * a).min(rho.clamp(1.0 - eps, 1.0 + eps) * a);
        let got = ppo_clip_term(new, old, a, eps).unwrap();
        ensure(got.to_bits() == want.to_bits(), || format!("clip {got} vs {want}"))?;
    }
    let lp: Vec<f64> = (0..32).map(|i| -0.1 * f64::from(i)).collect();
    ensure(kl_penalty(&lp, &lp).unwrap() == 0.0, || "KL of identical lists is nonzero".into())?;
    Ok("identity, 1.2, -0.8, 1000 random min-of-branches, KL=0".into())
}

const WORDS: &[&str] = &[
    "film", "director", "born", "earlier", "1926", "river", "Klein", "Ranga", "which", "tower",
];

fn sentence(rng: &mut StdRng, max_lines: usize) -> String {
    let lines = rng.random_range(1..=max_lines);
    (0..lines)
        .map(|_| {
            let n = rng.random_range(1..8);
            (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

// 4. Parser and history format.
fn ac4() -> Check {
    let mut rng = StdRng::seed_from_u64(4);
    for _ in 0..1000 {
        let analysis = sentence(&mut rng, 3);
        let payload = sentence(&mut rng, 2);
        let step = if rng.random() {
            ParsedStep::query(analysis, payload)
        } else {
            ParsedStep::answer(analysis, payload)
        };
        let back = parse_step(&step.render());
        ensure(back.as_ref() == Ok(&step), || format!("closure failed for {step:?}: {back:?}"))?;
    }
    let fixtures = [
        ("The retrieval query: x", FormatViolation::MissingAnalysis),
        ("The problem analysis: thinking only", FormatViolation::NoPayload),
        (
            "The problem analysis: a\nThe retrieval query: b\nThe final answer: c",
            FormatViolation::BothPayloads,
        ),
        (
            "The problem analysis: a\nThe problem analysis: b\nThe final answer: c",
            FormatViolation::MultipleAnalyses,
        ),
    ];
    for (text, want) in fixtures {
        ensure(parse_step(text) == Err(want), || format!("{text:?} did not give {want:?}"))?;
    }
    for _ in 0..200 {
        let n = rng.random_range(0..6);
        let steps: Vec<Step> = (0..n)
            .map(|i| {
                let docs = (0..rng.random_range(0..4))
                    .map(|d| Document::new(format!("{i}-{d}"), sentence(&mut rng, 1), sentence(&mut rng, 1)))
                    .collect();
                Step::query(sentence(&mut rng, 1), sentence(&mut rng, 1)).with_documents(docs)
            })
            .collect();
        let full = render_history(&steps);
        for k in 0..=n {
            ensure(full.starts_with(&render_history(&steps[..k])), || format!("prefix broken at {k}"))?;
        }
    }
    Ok("1000-step closure, 4 violations, prefix on 200 histories".into())
}

// 5. SFT pair cardinality and structure.
fn ac5(tmp: &Path) -> Check {
    let f = fixtures();
    let config = f.join("case.toml");
    let mut all = Vec::new();
    for items in ["coldstart_items.jsonl", "case_items.jsonl"] {
        let out = tmp.join(format!("ac5-{items}"));
        iterag_ok(&["--config", p(&config), "coldstart", "generate", "--input", p(&f.join(items)), "--output", p(&out)])?;
        all.extend(load_trajectories(&out));
    }
    let (kept, disc, sft) = (tmp.join("ac5-kept.jsonl"), tmp.join("ac5-disc.jsonl"), tmp.join("ac5-sft.jsonl"));
    let generated = tmp.join("ac5-coldstart_items.jsonl");
    iterag_ok(&[
        "--config", p(&config), "coldstart", "filter", "--input", p(&generated), "--kept", p(&kept), "--discarded", p(&disc),
    ])?;
    iterag_ok(&["--config", p(&config), "sft", "export", "--input", p(&kept), "--output", p(&sft)])?;
    let exported = std::fs::read_to_string(&sft).unwrap().lines().count();
    ensure(exported == 6, || format!("sft export wrote {exported} pairs for the cold-start kept set"))?;
    let answered: Vec<&Trajectory> = all.iter().filter(|t| t.status == Status::Answered).collect();
    ensure(answered.len() == 5, || format!("expected 5 answered fixture trajectories, got {}", answered.len()))?;
    let mut total = 0;
    for t in &answered {
        let pairs = sft_pairs(t).map_err(|e| e.to_string())?;
        ensure(pairs.len() == t.steps.len(), || format!("{}: {} pairs for {} steps", t.id, pairs.len(), t.steps.len()))?;
        ensure(pairs[0].input == t.question, || format!("{}: pair 1 input is not the bare question", t.id))?;
        for (j, pair) in pairs.iter().enumerate() {
            let prior = parse_sft_input(&pair.input, &t.question).map_err(|e| e.to_string())?;
            ensure(prior.len() == j, || format!("{} pair {}: {} prior steps", t.id, j + 1, prior.len()))?;
            for (got, want) in prior.iter().zip(&t.steps) {
                let titles = |s: &Step| s.documents.iter().map(|d| d.title.clone()).collect::<Vec<_>>();
                ensure(titles(got) == titles(want), || format!("{} pair {}: documents differ", t.id, j + 1))?;
            }
        }
        total += pairs.len();
    }
    Ok(format!("{} trajectories, {} pairs, all inputs re-parse; CLI export 6", answered.len(), total))
}

// 6. Rejection sampling and RL keep-all.
fn ac6(tmp: &Path) -> Check {
    let f = fixtures();
    let config = f.join("case.toml");
    let (gen, kept, disc, rl) = (
        tmp.join("ac6-gen.jsonl"),
        tmp.join("ac6-kept.jsonl"),
        tmp.join("ac6-disc.jsonl"),
        tmp.join("ac6-rl.jsonl"),
    );
    let items = f.join("reject_items.jsonl");
    iterag_ok(&["--config", p(&config), "coldstart", "generate", "--input", p(&items), "--output", p(&gen)])?;
    let generated = load_trajectories(&gen);
    let mut statuses = BTreeMap::new();
    for t in &generated {
        *statuses.entry(t.status.as_str()).or_insert(0) += 1;
    }
    ensure(
        statuses == BTreeMap::from([("answered", 4), ("exhausted", 1), ("format_error", 1)]),
        || format!("fixture statuses {statuses:?}"),
    )?;
    iterag_ok(&[
        "--config", p(&config), "coldstart", "filter", "--input", p(&gen), "--kept", p(&kept), "--discarded", p(&disc),
    ])?;
    let kept_ids: Vec<String> = load_trajectories(&kept).into_iter().map(|t| t.id).collect();
    ensure(kept_ids == ["reject-1#s0", "reject-2#s0"], || format!("kept {kept_ids:?}"))?;
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.join("ac6-kept.jsonl.manifest.json")).unwrap()).unwrap();
    let hist = &manifest["discard_reasons"];
    ensure(
        *hist == serde_json::json!({"format_error": 1, "incomplete": 1, "incorrect": 2}),
        || format!("histogram {hist}"),
    )?;
    iterag_ok(&["--config", p(&config), "rl", "sample", "--input", p(&items), "--output", p(&rl)])?;
    let n = load_trajectories(&rl).len();
    ensure(n == 6, || format!("rl sample returned {n}"))?;
    Ok("kept 2/6; incorrect 2, incomplete 1, format_error 1; rl keeps 6".into())
}

const VOCAB: &[&str] = &[
    "river", "mountain", "film", "director", "born", "french", "tamil", "city", "war", "king",
    "queen", "song", "album", "island", "bridge", "novel",
];

fn tokens(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

fn bm25_oracle(docs: &[Document], query: &str, top_k: usize) -> Vec<String> {
    let (k1, b) = (1.5, 0.75);
    let bodies: Vec<Vec<String>> = docs.iter().map(|d| tokens(&d.body)).collect();
    let n = docs.len() as f64;
    let avgdl = bodies.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let mut scored: Vec<(String, f64)> = Vec::new();
    for (d, body) in docs.iter().zip(&bodies) {
        let mut score = 0.0;
        let mut hit = false;
        for term in tokens(query) {
            let tf = body.iter().filter(|t| **t == term).count() as f64;
            if tf == 0.0 {
                continue;
            }
            hit = true;
            let df = bodies.iter().filter(|x| x.contains(&term)).count() as f64;
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * body.len() as f64 / avgdl));
        }
        if hit {
            scored.push((d.id.clone(), score));
        }
    }
    scored.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
    scored.into_iter().take(top_k).map(|(id, _)| id).collect()
}

// 7. Retrieval.
fn ac7() -> Check {
    let mut rng = StdRng::seed_from_u64(7);
    let mut docs: Vec<Document> = (0..18)
        .map(|i| {
            let len = rng.random_range(3..15);
            let body: Vec<&str> = (0..len).map(|_| VOCAB[rng.random_range(0..VOCAB.len())]).collect();
            Document::new(format!("d{:02}", 17 - i), format!("T{i}"), body.join(" "))
        })
        .collect();
    docs.push(Document::new("twin-b", "Twin", "lighthouse keeper"));
    docs.push(Document::new("twin-a", "Twin", "lighthouse keeper"));
    let corpus = Corpus::build(docs.clone(), Bm25Params::default()).map_err(|e| e.to_string())?;
    for _ in 0..50 {
        let len = rng.random_range(1..=4);
        let q: Vec<&str> = (0..len).map(|_| VOCAB[rng.random_range(0..VOCAB.len())]).collect();
        let q = q.join(" ");
        for k in [1, 5, 20] {
            let got: Vec<String> = corpus.search(&q, k).into_iter().map(|d| d.id).collect();
            ensure(got.len() <= k, || format!("top-k {k} exceeded"))?;
            let want = bm25_oracle(&docs, &q, k);
            ensure(got == want, || format!("query {q:?} k={k}: {got:?} vs {want:?}"))?;
        }
    }
    let tie: Vec<String> = corpus.search("lighthouse", 5).into_iter().map(|d| d.id).collect();
    ensure(tie == ["twin-a", "twin-b"], || format!("tie-break {tie:?}"))?;
    let cut = truncate(&Document::new("x", "t", "a".repeat(1000)), 512);
    ensure(cut.body.chars().count() == 512, || format!("truncated to {}", cut.body.chars().count()))?;
    Ok("20 docs x 50 queries match oracle; tie-break by id; 1000 -> 512 chars".into())
}

// 8. Metrics.
fn ac8() -> Check {
    let f1 = token_f1("B. S. Ranga director", "B. S. Ranga");
    ensure((f1 - 6.0 / 7.0).abs() < 1e-9, || format!("f1 = {f1}"))?;
    for (a, b, want) in [
        ("William Klein", "william klein", 1),
        ("the Alps", "Alps", 1),
        ("1945", "1945.", 1),
        ("An Apple", "apple", 1),
        ("Paris", "London", 0),
    ] {
        ensure(exact_match(a, b) == want, || format!("EM({a:?}, {b:?}) != {want}"))?;
    }
    let mut rng = StdRng::seed_from_u64(8);
    let alphabet: Vec<char> = "abcAB .,-'".chars().collect();
    let mut em_hits = 0;
    for _ in 0..1000 {
        let gen = |rng: &mut StdRng| -> String {
            (0..rng.random_range(0..10)).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
        };
        let a = gen(&mut rng);
        let b = if rng.random_bool(0.5) { format!("The {}.", a.to_uppercase()) } else { gen(&mut rng) };
        if exact_match(&a, &b) == 1 {
            em_hits += 1;
            ensure(token_f1(&a, &b) == 1.0, || format!("EM=1 but F1<1 for {a:?}/{b:?}"))?;
        }
    }
    Ok(format!("F1 = 6/7; EM cases; EM=>F1 over 1000 pairs ({em_hits} matches)"))
}

// 9. End-to-end determinism.
fn ac9(tmp: &Path) -> Check {
    let f = fixtures();
    let items = f.join("case_items.jsonl");
    let case = f.join("case.toml");
    let mut reports = Vec::new();
    for i in 0..2 {
        let out = tmp.join(format!("ac9-report-{i}.json"));
        iterag_ok(&["--config", p(&case), "eval", "run", "--input", p(&items), "--output", p(&out)])?;
        reports.push(std::fs::read(&out).unwrap());
    }
    ensure(reports[0] == reports[1], || "reports differ between runs".into())?;
    let r: serde_json::Value = serde_json::from_slice(&reports[0]).unwrap();
    for key in ["em", "f1", "acc"] {
        ensure(r[key] == 1.0, || format!("{key} = {}", r[key]))?;
    }
    ensure(r["per_item"][0]["steps_used"] == 5, || format!("steps_used = {}", r["per_item"][0]["steps_used"]))?;

    let never = f.join("never.toml");
    let out = tmp.join("ac9-never.json");
    let trajs = tmp.join("ac9-never.jsonl");
    let all_items = tmp.join("ac9-items.jsonl");
    let mut text = std::fs::read_to_string(&items).unwrap();
    text.push_str(&std::fs::read_to_string(f.join("coldstart_items.jsonl")).unwrap());
    std::fs::write(&all_items, text).unwrap();
    iterag_ok(&[
        "--config", p(&never), "eval", "run", "--input", p(&all_items), "--output", p(&out), "--trajectories", p(&trajs),
    ])?;
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    ensure(r["acc"] == 0.0, || format!("never-answering acc = {}", r["acc"]))?;
    for t in load_trajectories(&trajs) {
        ensure(t.status == Status::Exhausted && t.steps.len() == 5, || {
            format!("{}: {} after {} steps", t.id, t.status.as_str(), t.steps.len())
        })?;
    }
    Ok("byte-identical report, em=f1=acc=1, 5 steps; never-answering acc=0, all exhausted at 5".into())
}

// 10. Loop limits from request logs.
fn ac10(tmp: &Path) -> Check {
    let f = fixtures();
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("case.toml", vec!["eval".into(), "run".into(), "--input".into(), p(&f.join("case_items.jsonl")).into(), "--output".into(), p(&tmp.join("ac10-a.json")).into()]),
        ("never.toml", vec!["eval".into(), "run".into(), "--input".into(), p(&f.join("coldstart_items.jsonl")).into(), "--output".into(), p(&tmp.join("ac10-b.json")).into()]),
        ("case.toml", vec!["coldstart".into(), "generate".into(), "--input".into(), p(&f.join("reject_items.jsonl")).into(), "--output".into(), p(&tmp.join("ac10-c.jsonl")).into()]),
        ("never.toml", vec!["rl".into(), "sample".into(), "--input".into(), p(&f.join("reject_items.jsonl")).into(), "--output".into(), p(&tmp.join("ac10-d.jsonl")).into()]),
        ("case.toml", vec!["eval".into(), "baseline".into(), "--input".into(), p(&f.join("case_items.jsonl")).into(), "--output".into(), p(&tmp.join("ac10-e.json")).into(), "--top-k".into(), "3".into()]),
    ];
    let (max_iter, top_k) = (5usize, 5usize);
    let mut model_calls = 0;
    let mut retrievals = 0;
    for (i, (config, args)) in runs.iter().enumerate() {
        let log = tmp.join(format!("ac10-log-{i}.jsonl"));
        let mut full = vec!["--config".to_owned(), p(&f.join(config)).to_owned(), "--request-log".to_owned(), p(&log).to_owned()];
        full.extend(args.iter().cloned());
        iterag_ok(&full.iter().map(String::as_str).collect::<Vec<_>>())?;
        let entries: Vec<LogEntry> = std::fs::read_to_string(&log)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        let mut per_question: BTreeMap<String, usize> = BTreeMap::new();
        for e in &entries {
            match e {
                LogEntry::Model { channel, question, .. } if channel == "policy" => {
                    model_calls += 1;
                    *per_question.entry(question.clone()).or_insert(0) += 1;
                }
                LogEntry::Retrieval { top_k: asked, returned, .. } => {
                    retrievals += 1;
                    let cap = if args[1] == "baseline" { 16 } else { top_k };
                    ensure(*asked <= cap && returned <= asked, || {
                        format!("run {i}: retrieval asked {asked}, returned {returned}")
                    })?;
                }
                _ => {}
            }
        }
        for (q, n) in per_question {
            ensure(n <= max_iter, || format!("run {i}: {n} model calls for {q:?}"))?;
        }
    }
    Ok(format!("{model_calls} policy calls and {retrievals} retrievals within limits"))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let t = tmp.path();
    let criteria: Vec<Criterion> = vec![
        ("AC-1 reward algebra", Some(Duration::from_secs(1)), Box::new(ac1)),
        ("AC-2 GAE oracle", Some(Duration::from_secs(1)), Box::new(ac2)),
        ("AC-3 PPO clip and KL", Some(Duration::from_secs(1)), Box::new(ac3)),
        ("AC-4 parser and history format", None, Box::new(ac4)),
        ("AC-5 SFT pair cardinality", None, Box::new(|| ac5(t))),
        ("AC-6 rejection sampling", None, Box::new(|| ac6(t))),
        ("AC-7 BM25 retrieval", None, Box::new(ac7)),
        ("AC-8 QA metrics", None, Box::new(ac8)),
        ("AC-9 end-to-end determinism", Some(Duration::from_secs(10)), Box::new(|| ac9(t))),
        ("AC-10 loop limits", None, Box::new(|| ac10(t))),
    ];
    let mut failed = 0;
    for (name, budget, check) in &criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let result = match (result, budget) {
            (Ok(_), Some(b)) if elapsed > *b => Err(format!("took {elapsed:.2?}, budget {b:?}")),
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("{name}: PASS ({elapsed:.2?}) {detail}"),
            Err(reason) => {
                failed += 1;
                println!("{name}: FAIL ({elapsed:.2?}) {reason}");
            }
        }
    }
    println!("acceptance: {} passed, {} failed", criteria.len() - failed, failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
