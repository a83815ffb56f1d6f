use std::collections::{BTreeSet, HashSet};
use std::sync::{Arc, OnceLock};

use opsdesk_core::kb::{rerank, Candidate, KnowledgeEntry, KnowledgeStore, Level, RetrievalQuery, RRF_K};
use opsdesk_core::llm::embed::cosine;
use opsdesk_core::llm::{Embedder, HashingEmbedder};
use opsdesk_core::text::tokenize;
use proptest::prelude::*;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: &[&str] = &[
    "executor", "driver", "partition", "shuffle", "metastore", "quota", "lock", "timeout", "heap", "schema", "column", "table",
    "kerberos", "ticket", "checkpoint", "offset", "consumer", "reducer", "mapper", "container", "queue", "namenode", "datanode",
    "block", "replica", "parquet", "orc", "insert", "select", "join", "skew", "spill", "memory", "overhead", "permission",
    "owner", "lifecycle", "export", "import", "sync", "mysql", "kafka", "flink", "spark", "hive", "yarn", "hdfs", "udf",
    "class", "jar", "resource", "format", "string", "bigint", "decimal", "cast", "overflow", "null", "pointer", "retry",
];

/// Entries whose key is a copy of an earlier key; only these may miss.
const COLLISIONS: usize = 10;

struct Corpus {
    store: KnowledgeStore,
    entries: Vec<KnowledgeEntry>,
    embedder: Arc<dyn Embedder>,
}

fn phrase(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let embedder: Arc<dyn Embedder> = Arc::new(HashingEmbedder::new(256));
        let store = KnowledgeStore::new(Level::Internal, "synthetic", embedder.clone());
        let mut entries: Vec<KnowledgeEntry> = Vec::new();
        for i in 0..500 {
            let key = if i >= 500 - COLLISIONS {
                entries[rng.random_range(0..100)].key.clone()
            } else {
                format!("E{:04}-{} {}", rng.random_range(1000..10000), i, phrase(&mut rng, 4))
            };
            let value = phrase(&mut rng, 12);
            entries.push(KnowledgeEntry::new(format!("doc-{i:03}"), Level::Internal, "synthetic", key, value));
        }
        store.insert_many(entries.clone()).unwrap();
        Corpus { store, entries, embedder }
    })
}

/// Fraction of distinct query tokens present in the entry text.
fn overlap(query: &str, e: &KnowledgeEntry) -> f64 {
    let q: BTreeSet<String> = tokenize(query).into_iter().collect();
    if q.is_empty() {
        return 0.0;
    }
    let doc: HashSet<String> = tokenize(&format!("{} {}", e.key, e.value)).into_iter().collect();
    q.iter().filter(|t| doc.contains(*t)).count() as f64 / q.len() as f64
}

/// Brute force over the whole corpus: full cosine and overlap rankings,
/// fused with the same reciprocal-rank rule. Returns the winning id.
fn oracle_top1(c: &Corpus, query: &str) -> String {
    let qv = c.embedder.embed(query).unwrap();
    let score = |f: &dyn Fn(&KnowledgeEntry) -> f64| {
        let mut v: Vec<(f64, &str)> = c.entries.iter().map(|e| (f(e), e.id.as_str())).collect();
        v.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(b.1)));
        v.into_iter().enumerate().map(|(r, (_, id))| (id.to_string(), r + 1)).collect::<std::collections::HashMap<_, _>>()
    };
    let cos = score(&|e| cosine(&qv, &c.embedder.embed(&e.key).unwrap()));
    let lex = score(&|e| overlap(query, e));
    let mut fused: Vec<(f64, &str)> = c
        .entries
        .iter()
        .map(|e| (1.0 / (RRF_K + cos[&e.id] as f64) + 1.0 / (RRF_K + lex[&e.id] as f64), e.id.as_str()))
        .collect();
    fused.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(b.1)));
    fused[0].1.to_string()
}

#[test]
fn exact_key_queries_rank_their_entry_first() {
    let c = corpus();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let trials = 200;
    let mut hits = 0;
    let mut agree = 0;
    let mut misses = Vec::new();
    for _ in 0..trials {
        let e = c.entries.choose(&mut rng).unwrap();
        let got = c.store.retrieve(&RetrievalQuery::new(e.key.clone(), Level::Internal).with_k(5)).unwrap();
        let top = got.items.first().map(|i| i.id.clone()).unwrap_or_default();
        if top == e.id {
            hits += 1;
        } else {
            misses.push(e.id.clone());
        }
        if top == oracle_top1(c, &e.key) {
            agree += 1;
        }
    }
    assert!(hits as f64 >= 0.95 * trials as f64, "{hits}/{trials}, misses {misses:?}");
    assert!(agree as f64 >= 0.95 * trials as f64, "oracle agreement {agree}/{trials}");
    let collided: HashSet<String> = c.entries.iter().filter(|e| c.entries.iter().filter(|o| o.key == e.key).count() > 1).map(|e| e.id.clone()).collect();
    for m in &misses {
        assert!(collided.contains(m), "{m} missed without a key collision");
    }
}

#[test]
fn exact_key_is_always_a_candidate() {
    let c = corpus();
    for e in c.entries.iter().step_by(7) {
        let cands = c.store.coarse_retrieve(&RetrievalQuery::new(e.key.clone(), Level::Internal)).unwrap();
        assert!(cands.items.iter().any(|x| x.id == e.id), "{}", e.id);
    }
}

fn query_text() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(WORDS), 1..6).prop_map(|w| w.join(" "))
}

fn candidate(i: usize, lex: Option<usize>, sem: Option<usize>) -> Candidate {
    Candidate {
        id: format!("c{i:02}"),
        level: Level::Sop,
        base_id: "sop".into(),
        text: String::new(),
        lexical_score: 0.0,
        cosine: 0.0,
        lexical_rank: lex,
        semantic_rank: sem,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn retrieve_respects_k_uniqueness_and_order(q in query_text(), k in 1usize..20, n in 1usize..60) {
        let c = corpus();
        let n = n.max(k);
        let query = RetrievalQuery::new(q, Level::Internal).with_k(k).with_n(n);
        let set = c.store.retrieve(&query).unwrap();
        prop_assert!(set.items.len() <= k);
        let ids: HashSet<_> = set.items.iter().map(|i| i.id.clone()).collect();
        prop_assert_eq!(ids.len(), set.items.len());
        prop_assert!(set.items.windows(2).all(|w| w[0].score >= w[1].score));
        let coarse: HashSet<_> = c.store.coarse_retrieve(&query).unwrap().items.into_iter().map(|x| x.id).collect();
        prop_assert!(ids.is_subset(&coarse));
    }

    #[test]
    fn rerank_is_a_permutation(ranks in prop::collection::vec((prop::option::of(1usize..30), prop::option::of(1usize..30)), 0..25)) {
        let input: Vec<Candidate> = ranks.iter().enumerate().map(|(i, (l, s))| candidate(i, *l, *s)).collect();
        let out = rerank(input.clone());
        let mut a: Vec<_> = input.iter().map(|c| c.id.clone()).collect();
        let mut b: Vec<_> = out.iter().map(|(c, _)| c.id.clone()).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
        prop_assert!(out.windows(2).all(|w| w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0.id < w[1].0.id)));
    }
}

#[test]
fn rebuilt_index_gives_identical_results() {
    let dir = tempfile::tempdir().unwrap();
    let emb: Arc<dyn Embedder> = Arc::new(HashingEmbedder::new(128));
    let c = corpus();
    let first = KnowledgeStore::open(dir.path(), Level::Internal, "synthetic", emb.clone()).unwrap();
    first.insert_many(c.entries[..120].to_vec()).unwrap();
    let reopened = KnowledgeStore::open(dir.path(), Level::Internal, "synthetic", emb).unwrap();
    assert_eq!(reopened.len(), 120);
    for e in c.entries[..120].iter().step_by(9) {
        let q = RetrievalQuery::new(format!("{} {}", e.key, &e.value[..10]), Level::Internal).with_k(8);
        assert_eq!(first.retrieve(&q).unwrap(), reopened.retrieve(&q).unwrap());
    }
}
