//! BM25 over tokenized key + value text. Key tokens are counted twice so an
//! exact key match outweighs incidental mentions in long values.

use std::collections::HashMap;

use crate::text::tokenize;

const K1: f64 = 1.2;
const B: f64 = 0.75;

#[derive(Debug, Clone, Default)]
pub struct LexicalIndex {
    postings: HashMap<String, Vec<(usize, u32)>>,
    doc_len: Vec<u32>,
    avg_len: f64,
}

impl LexicalIndex {
    pub fn build<'a>(docs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        let mut doc_len = Vec::new();
        for (doc, (key, value)) in docs.into_iter().enumerate() {
            let mut tf: HashMap<String, u32> = HashMap::new();
            let key_toks = tokenize(key);
            let value_toks = tokenize(value);
            for t in key_toks.iter().chain(key_toks.iter()).chain(value_toks.iter()) {
                *tf.entry(t.clone()).or_default() += 1;
            }
            doc_len.push((2 * key_toks.len() + value_toks.len()) as u32);
            let mut terms: Vec<_> = tf.into_iter().collect();
            terms.sort();
            for (term, n) in terms {
                postings.entry(term).or_default().push((doc, n));
            }
        }
        let avg_len = if doc_len.is_empty() {
            0.0
        } else {
            doc_len.iter().map(|&l| f64::from(l)).sum::<f64>() / doc_len.len() as f64
        };
        Self { postings, doc_len, avg_len }
    }

    pub fn len(&self) -> usize {
        self.doc_len.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_len.is_empty()
    }

    /// BM25 score for every document; zero where no query term occurs.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let n = self.doc_len.len();
        let mut out = vec![0.0; n];
        if n == 0 {
            return out;
        }
        let mut terms = tokenize(query);
        terms.sort();
        terms.dedup();
        for term in terms {
            let Some(list) = self.postings.get(&term) else { continue };
            let df = list.len() as f64;
            let idf = (1.0 + (n as f64 - df + 0.5) / (df + 0.5)).ln();
            for &(doc, tf) in list {
                let tf = f64::from(tf);
                let norm = 1.0 - B + B * f64::from(self.doc_len[doc]) / self.avg_len.max(1e-9);
                out[doc] += idf * tf * (K1 + 1.0) / (tf + K1 * norm);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_terms_win() {
        let idx = LexicalIndex::build([
            ("OOM in executor", "raise executor memory"),
            ("NumberFormatException in insert", "check column types"),
            ("permission denied", "grant table access"),
        ]);
        let s = idx.scores("NumberFormatException");
        assert!(s[1] > 0.0);
        assert_eq!(s[0], 0.0);
        assert_eq!(s[2], 0.0);
        assert!(LexicalIndex::build(std::iter::empty()).scores("x").is_empty());
    }
}
