//! Synthetic inputs shared by the benchmarks.

use iterag_core::Document;

/// Deterministic pseudo-random corpus over a small vocabulary.
pub fn synthetic_corpus(n_docs: usize, doc_len: usize) -> Vec<Document> {
    let mut state: u64 = 0x9e37_79b9_7f4a_7c15;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    (0..n_docs)
        .map(|i| {
            let body: Vec<String> = (0..doc_len).map(|_| format!("w{}", next() % 2000)).collect();
            Document::new(format!("doc{i:06}"), format!("Title {i}"), body.join(" "))
        })
        .collect()
}

/// Parallel reward/value series of length `n`.
pub fn synthetic_series(n: usize) -> (Vec<f64>, Vec<f64>) {
    let rewards = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
    let values = (0..=n).map(|i| if i == n { 0.0 } else { (i % 7) as f64 / 7.0 }).collect();
    (rewards, values)
}
