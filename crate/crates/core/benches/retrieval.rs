use std::hint::black_box;
use std::path::PathBuf;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use opsdesk_core::bench::{load_cases, run_bench, BenchMode};
use opsdesk_core::config::Config;
use opsdesk_core::kb::{KnowledgeEntry, KnowledgeStore, Level, RetrievalQuery};
use opsdesk_core::llm::replay::{Script, ScriptedProvider};
use opsdesk_core::llm::{Embedder, HashingEmbedder};
use opsdesk_core::par::ExecPolicy;
use opsdesk_core::runtime::Runtime;

const WORDS: &[&str] = &[
    "executor", "driver", "partition", "shuffle", "metastore", "quota", "lock", "timeout", "heap", "schema", "column", "table",
    "kerberos", "checkpoint", "consumer", "container", "queue", "namenode", "block", "parquet", "join", "skew", "memory",
];

fn corpus(n: usize) -> Vec<KnowledgeEntry> {
    (0..n)
        .map(|i| {
            let w = |k: usize| WORDS[(i * 7 + k * 13) % WORDS.len()];
            KnowledgeEntry::new(format!("doc-{i}"), Level::Internal, "b", format!("E{i} {} {} {}", w(1), w(2), w(3)), format!("{} {} {}", w(4), w(5), w(6)))
        })
        .collect()
}

fn policies() -> [(&'static str, ExecPolicy); 2] {
    [("sequential", ExecPolicy::Sequential), ("parallel", ExecPolicy::Parallel)]
}

fn retrieval(c: &mut Criterion) {
    let entries = corpus(5000);
    let mut g = c.benchmark_group("retrieve_5000");
    for (name, policy) in policies() {
        let emb: Arc<dyn Embedder> = Arc::new(HashingEmbedder::new(256));
        let store = KnowledgeStore::new(Level::Internal, "b", emb).with_exec_policy(policy);
        store.insert_many(entries.clone()).unwrap();
        let q = RetrievalQuery::new("executor heap memory timeout", Level::Internal).with_k(5);
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| black_box(store.retrieve(&q).unwrap())));
    }
    g.finish();

    let mut g = c.benchmark_group("ingest_2000");
    g.sample_size(10);
    let batch = corpus(2000);
    for (name, policy) in policies() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let emb: Arc<dyn Embedder> = Arc::new(HashingEmbedder::new(256));
                let store = KnowledgeStore::new(Level::Internal, "b", emb).with_exec_policy(policy);
                black_box(store.insert_many(batch.clone()).unwrap())
            })
        });
    }
    g.finish();
}

fn bench_suite(c: &mut Criterion) {
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    let script = Script::load(&fixtures.join("bench/script.json")).unwrap();
    let provider = Arc::new(ScriptedProvider::new("bench", script).unwrap());
    let rt = Runtime::from_world(&fixtures.join("world"), provider, Config::default()).unwrap();
    let cases = load_cases(&fixtures.join("bench/cases.jsonl")).unwrap();
    let mut g = c.benchmark_group("bench_full_10_cases");
    g.sample_size(10);
    for (name, policy) in policies() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| black_box(run_bench(&rt.pipeline, &cases, BenchMode::Full, policy))));
    }
    g.finish();
}

criterion_group!(benches, retrieval, bench_suite);
criterion_main!(benches);
