//! End-to-end acceptance checks. Each criterion prints one line:
//! `PASS|FAIL  <n> <name>  <elapsed> / <limit>  <detail>`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use opsdesk_core::bench::{load_cases, run_bench_detailed, BenchMode};
use opsdesk_core::config::Config;
use opsdesk_core::deepsearch::{flags, RetrievalMode, StopReason};
use opsdesk_core::kb::{rerank, Candidate, KnowledgeEntry, KnowledgeStore, Level, RetrievalQuery, SopRecord, RRF_K};
use opsdesk_core::llm::embed::cosine;
use opsdesk_core::llm::replay::{Script, ScriptRule, ScriptedProvider};
use opsdesk_core::llm::{Budget, Embedder, HashingEmbedder, LlmGateway, RequestContext};
use opsdesk_core::par::ExecPolicy;
use opsdesk_core::runtime::Runtime;
use opsdesk_core::scenario::{load_suite, mean_retrieval_iterations};
use opsdesk_core::sop_extract::queue::EscalationQueue;
use opsdesk_core::sop_extract::{ExtractionParams, Mutation, SopExtractor};
use opsdesk_core::text::tokenize;
use opsdesk_core::tickets::{CauseModel, Decision, Ticket};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use tower::ServiceExt;

type Outcome = Result<String, String>;

/// Number, name, time limit in seconds, check.
type Criterion = (u8, &'static str, u64, fn() -> Outcome);

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn read<T: for<'de> Deserialize<'de>>(name: &str) -> T {
    serde_json::from_str(&std::fs::read_to_string(fixtures().join(name)).unwrap()).unwrap()
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---- 1: cause attribution arithmetic

fn names(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

fn bayes() -> Outcome {
    let m = CauseModel::from_parts(names("c", 2), names("f", 3), vec![0.3, 0.7], vec![vec![0.8, 0.3, 0.25], vec![0.5, 0.5, 0.5]], 1.0)
        .map_err(|e| e.to_string())?;
    let score = m.unnormalized(&names("f", 3))[0];
    ensure((score - 0.018).abs() <= 1e-12, || format!("worked example scored {score}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(2..=5);
        let v = rng.random_range(1..=6);
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let z: f64 = w.iter().sum();
        let priors: Vec<f64> = w.iter().map(|x| x / z).collect();
        let cond: Vec<Vec<f64>> = (0..k).map(|_| (0..v).map(|_| rng.random_range(0.01..=1.0)).collect()).collect();
        let m = CauseModel::from_parts(names("c", k), names("f", v), priors.clone(), cond.clone(), 1.0).map_err(|e| e.to_string())?;
        let feats: Vec<String> = m.vocabulary.iter().filter(|_| rng.random_bool(0.5)).cloned().collect();
        let raw: Vec<f64> = (0..k)
            .map(|c| priors[c] * (0..v).filter(|f| feats.contains(&m.vocabulary[*f])).map(|f| cond[c][f]).product::<f64>())
            .collect();
        let z: f64 = raw.iter().sum();
        for (a, b) in m.posterior(&feats).iter().zip(raw.iter().map(|x| x / z)) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("log-space and direct posteriors differ by {worst:e}"))?;
    Ok(format!("score {score:.3}, max posterior gap {worst:.1e} over 100 models"))
}

// ---- 2: retrieval over a 500-entry corpus

const WORDS: &[&str] = &[
    "executor", "driver", "partition", "shuffle", "metastore", "quota", "lock", "timeout", "heap", "schema", "column", "table",
    "kerberos", "ticket", "checkpoint", "offset", "consumer", "reducer", "mapper", "container", "queue", "namenode", "datanode",
    "block", "replica", "parquet", "orc", "insert", "select", "join", "skew", "spill", "memory", "overhead", "permission",
    "owner", "lifecycle", "export", "import", "sync", "mysql", "kafka", "flink", "spark", "hive", "yarn", "hdfs", "udf",
];

fn phrase(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn retrieval() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let emb: Arc<dyn Embedder> = Arc::new(HashingEmbedder::new(256));
    let store = KnowledgeStore::new(Level::Internal, "synthetic", emb.clone());
    let entries: Vec<KnowledgeEntry> = (0..500)
        .map(|i| {
            let key = format!("E{:04}-{i} {}", rng.random_range(1000..10000), phrase(&mut rng, 4));
            KnowledgeEntry::new(format!("doc-{i:03}"), Level::Internal, "synthetic", key, phrase(&mut rng, 12))
        })
        .collect();
    store.insert_many(entries.clone()).map_err(|e| e.to_string())?;
    let key_vecs: HashMap<&str, Vec<f32>> = entries.iter().map(|e| (e.id.as_str(), emb.embed(&e.key).unwrap())).collect();

    // brute force: full cosine ranking and token-overlap ranking, fused the same way
    let oracle = |query: &str| -> String {
        let qv = emb.embed(query).unwrap();
        let q: BTreeSet<String> = tokenize(query).into_iter().collect();
        let ranks = |score: &dyn Fn(&KnowledgeEntry) -> f64| -> HashMap<String, usize> {
            let mut v: Vec<(f64, &str)> = entries.iter().map(|e| (score(e), e.id.as_str())).collect();
            v.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
            v.into_iter().enumerate().map(|(r, (_, id))| (id.to_string(), r + 1)).collect()
        };
        let cos = ranks(&|e| cosine(&qv, &key_vecs[e.id.as_str()]));
        let lex = ranks(&|e| {
            let doc: HashSet<String> = tokenize(&format!("{} {}", e.key, e.value)).into_iter().collect();
            q.iter().filter(|t| doc.contains(*t)).count() as f64
        });
        let mut fused: Vec<(f64, &str)> =
            entries.iter().map(|e| (1.0 / (RRF_K + cos[&e.id] as f64) + 1.0 / (RRF_K + lex[&e.id] as f64), e.id.as_str())).collect();
        fused.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        fused[0].1.to_string()
    };

    let (mut hits, mut agree) = (0, 0);
    for trial in 0..200 {
        let e = entries.choose(&mut rng).unwrap();
        let k = 1 + trial % 10;
        let got = store.retrieve(&RetrievalQuery::new(e.key.clone(), Level::Internal).with_k(k)).map_err(|e| e.to_string())?;
        let ids: Vec<&str> = got.items.iter().map(|i| i.id.as_str()).collect();
        ensure(ids.len() <= k, || format!("{} results for k={k}", ids.len()))?;
        ensure(ids.iter().collect::<HashSet<_>>().len() == ids.len(), || format!("duplicate ids {ids:?}"))?;
        ensure(got.items.windows(2).all(|w| w[0].score >= w[1].score), || "scores not descending".into())?;
        if ids.first() == Some(&e.id.as_str()) {
            hits += 1;
        }
        if ids.first().map(|s| s.to_string()) == Some(oracle(&e.key)) {
            agree += 1;
        }
    }
    ensure(hits >= 190, || format!("exact-key top-1 in {hits}/200"))?;
    ensure(agree >= 190, || format!("oracle agreement {agree}/200"))?;

    for _ in 0..200 {
        let n = rng.random_range(0..25);
        let input: Vec<Candidate> = (0..n)
            .map(|i| Candidate {
                id: format!("c{i:02}"),
                level: Level::Internal,
                base_id: "synthetic".into(),
                text: String::new(),
                lexical_score: 0.0,
                cosine: 0.0,
                lexical_rank: rng.random_bool(0.7).then(|| rng.random_range(1..30)),
                semantic_rank: rng.random_bool(0.7).then(|| rng.random_range(1..30)),
            })
            .collect();
        let mut a: Vec<String> = input.iter().map(|c| c.id.clone()).collect();
        let mut b: Vec<String> = rerank(input).into_iter().map(|(c, _)| c.id).collect();
        a.sort();
        b.sort();
        ensure(a == b, || "rerank is not a permutation".into())?;
    }
    Ok(format!("top-1 {hits}/200, oracle agreement {agree}/200, rerank permutation on 200 inputs"))
}

// ---- 3: replayed loop scenarios

fn scenarios() -> Outcome {
    let config = Config::default();
    let world = fixtures().join("world");
    let suite = load_suite(&fixtures().join("deepsearch/scenarios.json")).map_err(|e| e.to_string())?;
    ensure(suite.len() == 20, || format!("{} scenarios", suite.len()))?;
    let mut bad = Vec::new();
    for s in &suite {
        let out = s.run(&world, &config).map_err(|e| e.to_string())?;
        let v = s.check(&out, &s.run_options(&config));
        if !v.is_empty() {
            bad.push(format!("{}: {}", s.id, v.join("; ")));
        }
        if s.id == "golden-number-format" {
            let n = out.trace.retrieval_iterations();
            ensure(n <= 2 && out.answer.citations.iter().any(|c| c == "sop-0007"), || {
                format!("golden case: {n} retrieval iterations, citations {:?}", out.answer.citations)
            })?;
        }
    }
    ensure(bad.is_empty(), || bad.join(" | "))?;
    Ok("20/20 scenarios conform; golden case cites sop-0007".into())
}

// ---- 4 and 5: SOP extraction

fn extraction_setup(rules: Vec<ScriptRule>) -> (LlmGateway, KnowledgeStore) {
    let emb: Arc<dyn Embedder> = Arc::new(HashingEmbedder::new(256));
    let gw = LlmGateway::new(Arc::new(ScriptedProvider::new("sop", Script::new(rules)).unwrap()), emb.clone());
    (gw, KnowledgeStore::new(Level::Sop, "sop", emb))
}

fn ctx() -> RequestContext {
    RequestContext::new(Budget { max_chat_calls: 64, max_total_tokens: 1_000_000 })
}

#[derive(Deserialize)]
struct CaseStudy {
    ticket: Ticket,
    seed: BTreeMap<String, SopRecord>,
    rules: Vec<ScriptRule>,
    expect: CaseStudyExpect,
}

#[derive(Deserialize)]
struct CaseStudyExpect {
    stability_score: usize,
    root_causes: Vec<String>,
}

fn case_study() -> Outcome {
    let fx: CaseStudy = read("sop/case_study.json");
    let (gw, store) = extraction_setup(fx.rules);
    for (id, rec) in &fx.seed {
        store.insert(KnowledgeEntry::from_sop(id.clone(), "sop", rec)).map_err(|e| e.to_string())?;
    }
    let dir = tempfile::tempdir().unwrap();
    let queue = EscalationQueue::new(dir.path().join("queue.jsonl"));
    let report = SopExtractor::new(&gw, ExtractionParams::default())
        .extract_and_integrate(&fx.ticket, None, &store, &queue, &mut ctx())
        .map_err(|e| e.to_string())?;
    let score = report.review.as_ref().map(|r| r.stability_score).unwrap_or(0);
    ensure(score == fx.expect.stability_score, || format!("stability {score}"))?;
    let Mutation::Replaced { old_id, new_id } = &report.mutation else {
        return Err(format!("mutation {:?}", report.mutation));
    };
    let merged = store.sop(new_id).ok_or("merged SOP missing")?;
    let causes: Vec<String> = merged.content.iter().map(|b| b.root_cause.clone()).collect();
    ensure(causes == fx.expect.root_causes, || format!("branches {causes:?}"))?;
    ensure(store.len() == 1, || format!("{} SOPs after replace", store.len()))?;
    Ok(format!("stability {score}, {old_id} replaced by {new_id} with branches {causes:?}"))
}

#[derive(Deserialize)]
struct Agreement {
    accepted_ticket: Ticket,
    escalated_ticket: Ticket,
    rules: Vec<ScriptRule>,
}

fn stability_gate() -> Outcome {
    let fx: Agreement = read("sop/agreement.json");
    let (gw, store) = extraction_setup(fx.rules);
    let dir = tempfile::tempdir().unwrap();
    let queue = EscalationQueue::new(dir.path().join("queue.jsonl"));
    let ex = SopExtractor::new(&gw, ExtractionParams { runs: 3, stability_threshold: 2, similar: 3 });
    let err = |e: opsdesk_core::sop_extract::ExtractError| e.to_string();

    let first = ex.extract_and_integrate(&fx.accepted_ticket, None, &store, &queue, &mut ctx()).map_err(err)?;
    let s1 = first.review.as_ref().map(|r| r.stability_score).unwrap_or(0);
    ensure(s1 == 2 && matches!(first.mutation, Mutation::Added { .. }), || format!("2-of-3 run: score {s1}, {:?}", first.mutation))?;

    let split = ex.extract_and_integrate(&fx.escalated_ticket, None, &store, &queue, &mut ctx()).map_err(err)?;
    let s2 = split.review.as_ref().map(|r| r.stability_score).unwrap_or(0);
    let escalated = split.review.as_ref().is_some_and(|r| r.escalated && !r.accepted);
    ensure(s2 == 1 && escalated && matches!(split.mutation, Mutation::None { .. }), || format!("1-1-1 run: score {s2}, {:?}", split.mutation))?;
    let records = queue.records().map_err(|e| e.to_string())?;
    ensure(records.len() == 1 && records[0].ticket_id == fx.escalated_ticket.id, || format!("queue {records:?}"))?;

    let again = ex.extract_and_integrate(&fx.accepted_ticket, None, &store, &queue, &mut ctx()).map_err(err)?;
    ensure(matches!(again.mutation, Mutation::Replaced { .. }) && store.len() == 1, || format!("rerun {:?}, {} SOPs", again.mutation, store.len()))?;
    Ok("2-of-3 accepted, 1-1-1 escalated with one queue record, rerun consolidated".into())
}

// ---- 6: level ablation

fn ablation() -> Outcome {
    let config = Config::default();
    let world = fixtures().join("world");
    let suite = load_suite(&fixtures().join("ablation/suite.json")).map_err(|e| e.to_string())?;
    let e = |e: opsdesk_core::runtime::RuntimeError| e.to_string();
    let hier = mean_retrieval_iterations(&suite, &world, &config, |_| {}).map_err(e)?;
    let no_sop = mean_retrieval_iterations(&suite, &world, &config, |o| o.disabled = vec![Level::Sop]).map_err(e)?;
    let flat = mean_retrieval_iterations(&suite, &world, &config, |o| o.mode = Some(RetrievalMode::Flat)).map_err(e)?;
    let detail = format!("mean retrieval iterations: hierarchical {hier:.2}, without SOPs {no_sop:.2}, flat {flat:.2}");
    ensure(no_sop > hier && flat >= hier, || detail.clone())?;
    Ok(detail)
}

// ---- 7: assignment and budget gates

fn gates() -> Outcome {
    let causes = vec!["config".to_string(), "data".to_string()];
    let (mut auto, mut manual) = (0, 0);
    for i in 0..50 {
        let p: f64 = match i {
            0..=19 => 0.60 + 0.01 * i as f64,
            20..=29 => 0.795 + 0.001 * (i - 20) as f64,
            30..=39 => 0.8005 + 0.002 * (i - 30) as f64,
            40..=47 => 0.85 + 0.015 * (i - 40) as f64,
            _ => 0.5,
        };
        let m = CauseModel::from_parts(causes.clone(), vec!["f".into()], vec![0.5, 0.5], vec![vec![p], vec![1.0 - p]], 1.0)
            .map_err(|e| e.to_string())?;
        let r = m.assign_features(&["f".to_string()], 0.8);
        let best = r.posterior.values().copied().fold(0.0, f64::max);
        let unique = r.posterior.values().filter(|q| (**q - best).abs() < 1e-12).count() == 1;
        match r.decided {
            Decision::Auto { .. } => {
                auto += 1;
                ensure(best >= 0.8 && unique, || format!("automatic at {best}"))?;
            }
            Decision::ManualReview => {
                manual += 1;
                ensure(best < 0.8 || !unique, || format!("manual at {best}"))?;
            }
        }
    }

    let config = Config::default();
    let world = fixtures().join("world");
    let suite = load_suite(&fixtures().join("deepsearch/scenarios.json")).map_err(|e| e.to_string())?;
    let mut runs = 0;
    for s in &suite {
        for calls in 1..=6u32 {
            let mut s = s.clone();
            s.options.max_chat_calls = Some(calls);
            let out = s.run(&world, &config).map_err(|e| e.to_string())?;
            runs += 1;
            ensure(out.trace.usage.chat_calls <= calls, || format!("{} used {} of {calls} calls", s.id, out.trace.usage.chat_calls))?;
            if out.trace.stop_reason == StopReason::BudgetExhausted {
                ensure(out.answer.has_flag(flags::PARTIAL), || format!("{} over budget without the partial flag", s.id))?;
            }
        }
    }
    let over = suite.iter().find(|s| s.id == "budget-exhausted").ok_or("budget scenario missing")?;
    let out = over.run(&world, &config).map_err(|e| e.to_string())?;
    ensure(
        out.trace.stop_reason == StopReason::BudgetExhausted && out.answer.has_flag(flags::PARTIAL) && !out.answer.text.is_empty(),
        || format!("over-budget run: {:?}, flags {:?}", out.trace.stop_reason, out.answer.flags),
    )?;
    Ok(format!("{auto} automatic / {manual} manual of 50; {runs} budgeted runs within budget; over-budget answer flagged partial"))
}

// ---- 8: bench and service agree

fn bench_runtime() -> Runtime {
    let script = Script::load(&fixtures().join("bench/script.json")).unwrap();
    Runtime::from_world(&fixtures().join("world"), Arc::new(ScriptedProvider::new("bench", script).unwrap()), Config::default()).unwrap()
}

fn parity() -> Outcome {
    let cases = load_cases(&fixtures().join("bench/cases.jsonl")).map_err(|e| e.to_string())?;
    ensure(cases.len() == 10, || format!("{} cases", cases.len()))?;
    let (_, outcomes) = run_bench_detailed(&bench_runtime().pipeline, &cases, BenchMode::Full, ExecPolicy::Parallel);

    let app = opsdesk_server::router(opsdesk_server::AppState::new(bench_runtime()));
    let tokio = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    let call = |method: Method, uri: String, body: Option<String>| {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", "application/json")
            .body(body.map(Body::from).unwrap_or_else(Body::empty))
            .unwrap();
        tokio.block_on(async {
            let res = app.clone().oneshot(req).await.unwrap();
            (res.status(), res.into_body().collect().await.unwrap().to_bytes())
        })
    };
    for (case, out) in cases.iter().zip(&outcomes) {
        let text = Some(case.request.text.clone()).filter(|t| !t.trim().is_empty());
        let body = serde_json::json!({ "text": text, "context": case.request.context }).to_string();
        let (status, bytes) = call(Method::POST, "/v1/diagnose".into(), Some(body));
        ensure(status == StatusCode::OK, || format!("{}: diagnose returned {status}", case.id))?;
        let v: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
        let rid = v["request_id"].as_str().ok_or("no request id")?;
        let answer = serde_json::to_string(&out.answer).unwrap();
        let expected = format!(r#"{{"request_id":"{rid}","answer":{answer},"trace_ref":"/v1/traces/{rid}"}}"#);
        ensure(bytes == expected.as_bytes(), || format!("{}: answer bytes differ", case.id))?;
        let (status, trace) = call(Method::GET, format!("/v1/traces/{rid}"), None);
        ensure(status == StatusCode::OK, || format!("{}: trace returned {status}", case.id))?;
        let bench_trace = out.pipeline_trace.as_ref().ok_or("bench kept no pipeline trace")?.payload();
        ensure(trace == bench_trace.as_bytes(), || format!("{}: trace bytes differ", case.id))?;
    }
    Ok("10/10 answers and traces byte-identical".into())
}

// ---- runner

#[test]
fn acceptance() {
    let criteria: [Criterion; 8] = [
        (1, "cause attribution arithmetic", 1, bayes),
        (2, "two-stage retrieval", 30, retrieval),
        (3, "loop scenarios", 30, scenarios),
        (4, "extraction case study", 10, case_study),
        (5, "stability gating", 10, stability_gate),
        (6, "level ablation", 60, ablation),
        (7, "assignment and budget gates", 10, gates),
        (8, "bench and service parity", 30, parity),
    ];
    let mut failed = Vec::new();
    std::io::stderr().write_all(b"\n").unwrap();
    for (n, name, limit, run) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(d) if elapsed > Duration::from_secs(limit) => Err(format!("too slow; {d}")),
            r => r,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d.as_str()),
            Err(d) => ("FAIL", d.as_str()),
        };
        // written past the test harness capture so the lines always show
        let line = format!("{tag}  {n} {name:<30} {:>8.2}s / {limit}s  {detail}\n", elapsed.as_secs_f64());
        std::io::stderr().write_all(line.as_bytes()).unwrap();
        if result.is_err() {
            failed.push(n);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
