//! Text normalization shared by answer matching (rewards) and QA metrics,
//! plus the lexical tokenizer used by the BM25 index.

/// Lowercase, delete ASCII punctuation, drop the articles `a`/`an`/`the`,
/// and collapse whitespace.
///
/// ```
/// use iterag_core::text::normalize_answer;
/// assert_eq!(normalize_answer("The  Eiffel Tower!"), "eiffel tower");
/// assert_eq!(normalize_answer("B. S. Ranga"), "b s ranga");
/// ```
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let stripped: String = lowered
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    stripped
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Whitespace tokens of the normalized answer.
pub fn answer_tokens(s: &str) -> Vec<String> {
    normalize_answer(s)
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Lowercase, split on every non-alphanumeric character, drop empty tokens.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Key used to compare questions across datasets (e.g. RL vs cold-start
/// disjointness): lowercase with whitespace collapsed.
pub fn question_key(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Cut `s` to at most `max_chars` Unicode scalar values.
pub fn truncate_chars(s: &str, max_chars: usize) -> &str {
    match s.char_indices().nth(max_chars) {
        Some((byte_idx, _)) => &s[..byte_idx],
        None => s,
    }
}
