//! Retrievers: an in-memory BM25 index and a client for a remote dense
//! retrieval service, plus document truncation.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::http::{JsonClient, RetryPolicy};
use crate::model::{decode_json, read_jsonl, Document};
use crate::text::{tokenize, truncate_chars};

/// Anything that turns a query into a ranked document list.
pub trait Retriever: Send + Sync {
    fn retrieve(&self, query: &str, top_k: usize) -> Result<Vec<Document>>;
}

impl<R: Retriever + ?Sized> Retriever for &R {
    fn retrieve(&self, query: &str, top_k: usize) -> Result<Vec<Document>> {
        (**self).retrieve(query, top_k)
    }
}

impl<R: Retriever + ?Sized> Retriever for Box<R> {
    fn retrieve(&self, query: &str, top_k: usize) -> Result<Vec<Document>> {
        (**self).retrieve(query, top_k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.5, b: 0.75 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrieverMode {
    LocalBm25,
    RemoteDense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrieverConfig {
    pub mode: RetrieverMode,
    pub top_k: usize,
    pub truncate_chars: usize,
    pub endpoint: Option<String>,
    pub k1: f64,
    pub b: f64,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        Self {
            mode: RetrieverMode::LocalBm25,
            top_k: 5,
            truncate_chars: 512,
            endpoint: None,
            k1: 1.5,
            b: 0.75,
        }
    }
}

impl RetrieverConfig {
    pub fn bm25(&self) -> Bm25Params {
        Bm25Params { k1: self.k1, b: self.b }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::validation("retriever top_k must be at least 1"));
        }
        if self.truncate_chars == 0 {
            return Err(Error::validation("retriever truncate_chars must be at least 1"));
        }
        match (self.mode, &self.endpoint) {
            (RetrieverMode::RemoteDense, None) => {
                Err(Error::validation("remote_dense retriever requires an endpoint"))
            }
            (RetrieverMode::LocalBm25, Some(_)) => {
                Err(Error::validation("endpoint is only valid for the remote_dense retriever"))
            }
            _ => Ok(()),
        }
    }
}

/// Cut a document body to `max_chars` characters. Titles are left alone.
pub fn truncate(document: &Document, max_chars: usize) -> Document {
    let mut doc = document.clone();
    let cut = truncate_chars(&doc.body, max_chars.max(1));
    if cut.len() != doc.body.len() {
        doc.body = cut.to_owned();
    }
    doc
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub vocabulary: usize,
    pub mean_length: f64,
    pub total_tokens: usize,
}

/// Immutable BM25 index over a document list.
#[derive(Debug, Clone)]
pub struct Corpus {
    documents: Vec<Document>,
    params: Bm25Params,
    doc_lengths: Vec<usize>,
    doc_freq: HashMap<String, usize>,
    postings: HashMap<String, Vec<(usize, u32)>>,
    mean_length: f64,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn build(documents: Vec<Document>, params: Bm25Params) -> Result<Self> {
        if documents.is_empty() {
            return Err(Error::validation("corpus is empty"));
        }
        let mut by_id = HashMap::with_capacity(documents.len());
        for (i, doc) in documents.iter().enumerate() {
            if doc.id.is_empty() {
                return Err(Error::validation(format!("document {} has an empty id", i + 1)));
            }
            if by_id.insert(doc.id.clone(), i).is_some() {
                return Err(Error::validation(format!("duplicate document id: {}", doc.id)));
            }
        }
        let mut doc_lengths = Vec::with_capacity(documents.len());
        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        for (i, doc) in documents.iter().enumerate() {
            let tokens = tokenize(&doc.body);
            doc_lengths.push(tokens.len());
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push((i, count));
            }
        }
        for list in postings.values_mut() {
            list.sort_unstable();
        }
        let doc_freq = postings.iter().map(|(t, l)| (t.clone(), l.len())).collect();
        let mean_length = doc_lengths.iter().sum::<usize>() as f64 / documents.len() as f64;
        Ok(Self {
            documents,
            params,
            doc_lengths,
            doc_freq,
            postings,
            mean_length,
            by_id,
        })
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn doc_lengths(&self) -> &[usize] {
        &self.doc_lengths
    }

    pub fn mean_length(&self) -> f64 {
        self.mean_length
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.doc_freq.get(term).copied().unwrap_or(0)
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.by_id.get(id).map(|&i| &self.documents[i])
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats {
            documents: self.documents.len(),
            vocabulary: self.doc_freq.len(),
            mean_length: self.mean_length,
            total_tokens: self.doc_lengths.iter().sum(),
        }
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.documents.len() as f64;
        let df = df as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Rank documents by BM25 (score desc, id asc). Only documents sharing
    /// at least one term with the query are returned.
    pub fn search(&self, query: &str, top_k: usize) -> Vec<Document> {
        let Bm25Params { k1, b } = self.params;
        let mut scores: HashMap<usize, f64> = HashMap::new();
        for term in tokenize(query) {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.idf(list.len());
            for &(doc, tf) in list {
                let tf = tf as f64;
                let norm = 1.0 - b + b * self.doc_lengths[doc] as f64 / self.mean_length;
                *scores.entry(doc).or_insert(0.0) += idf * tf * (k1 + 1.0) / (tf + k1 * norm);
            }
        }
        let mut ranked: Vec<(usize, f64)> = scores.into_iter().collect();
        ranked.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.documents[a.0].id.cmp(&self.documents[b.0].id))
        });
        ranked
            .into_iter()
            .take(top_k)
            .map(|(i, score)| Document {
                score,
                ..self.documents[i].clone()
            })
            .collect()
    }
}

impl Retriever for Corpus {
    fn retrieve(&self, query: &str, top_k: usize) -> Result<Vec<Document>> {
        Ok(self.search(query, top_k))
    }
}

#[derive(Deserialize)]
struct CorpusRow {
    id: String,
    #[serde(default)]
    title: String,
    text: String,
}

/// Read a corpus JSONL file with rows `{id, title, text}`.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<Document>> {
    let rows: Vec<CorpusRow> = read_jsonl(reader)?;
    Ok(rows
        .into_iter()
        .map(|r| Document::new(r.id, r.title, r.text))
        .collect())
}

const INDEX_MAGIC: &[u8; 8] = b"ITRGBM25";
const INDEX_VERSION: u32 = 1;
const TOKENIZER_ID: &str = "lowercase-alnum-split/v1";

/// Hash of everything that changes ranking: BM25 parameters and tokenizer.
pub fn index_fingerprint(params: Bm25Params) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(format!(
        "bm25/v{INDEX_VERSION}|k1={:016x}|b={:016x}|tok={TOKENIZER_ID}",
        params.k1.to_bits(),
        params.b.to_bits()
    ));
    hasher.finalize().into()
}

#[derive(Serialize, Deserialize)]
struct IndexPayload {
    params: Bm25Params,
    documents: Vec<Document>,
}

/// Layout: magic (8) | version u32 LE | fingerprint (32) | payload len u64 LE | JSON payload.
pub fn write_index<W: Write>(mut writer: W, corpus: &Corpus) -> Result<()> {
    let payload = serde_json::to_vec(&IndexPayload {
        params: corpus.params,
        documents: corpus.documents.clone(),
    })
    .map_err(std::io::Error::from)?;
    writer.write_all(INDEX_MAGIC)?;
    writer.write_all(&INDEX_VERSION.to_le_bytes())?;
    writer.write_all(&index_fingerprint(corpus.params))?;
    writer.write_all(&(payload.len() as u64).to_le_bytes())?;
    writer.write_all(&payload)?;
    writer.flush()?;
    Ok(())
}

/// Load an index file. When `expected` is given, the embedded fingerprint
/// must match it.
pub fn read_index<R: Read>(mut reader: R, expected: Option<Bm25Params>) -> Result<Corpus> {
    let mut magic = [0u8; 8];
    reader.read_exact(&mut magic).map_err(|_| Error::parse("index.magic", "file too short"))?;
    if &magic != INDEX_MAGIC {
        return Err(Error::parse("index.magic", "not an index file"));
    }
    let mut word = [0u8; 4];
    reader.read_exact(&mut word).map_err(|_| Error::parse("index.version", "truncated header"))?;
    let version = u32::from_le_bytes(word);
    if version != INDEX_VERSION {
        return Err(Error::parse("index.version", format!("unsupported version {version}")));
    }
    let mut fingerprint = [0u8; 32];
    reader
        .read_exact(&mut fingerprint)
        .map_err(|_| Error::parse("index.fingerprint", "truncated header"))?;
    let mut len = [0u8; 8];
    reader.read_exact(&mut len).map_err(|_| Error::parse("index.length", "truncated header"))?;
    let len = u64::from_le_bytes(len) as usize;
    let mut payload = Vec::with_capacity(len.min(1 << 30));
    reader.take(len as u64).read_to_end(&mut payload)?;
    if payload.len() != len {
        return Err(Error::parse("index.payload", "truncated payload"));
    }
    let payload: IndexPayload = decode_json(&payload)?;
    if index_fingerprint(payload.params) != fingerprint {
        return Err(Error::parse("index.fingerprint", "fingerprint does not match payload"));
    }
    if let Some(expected) = expected {
        if index_fingerprint(expected) != fingerprint {
            return Err(Error::validation(format!(
                "index was built with k1={}, b={} but the configuration asks for k1={}, b={}",
                payload.params.k1, payload.params.b, expected.k1, expected.b
            )));
        }
    }
    Corpus::build(payload.documents, payload.params)
}

pub fn save_index(path: &Path, corpus: &Corpus) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_index(std::io::BufWriter::new(file), corpus)
}

pub fn load_index(path: &Path, expected: Option<Bm25Params>) -> Result<Corpus> {
    let file = std::fs::File::open(path)?;
    read_index(std::io::BufReader::new(file), expected)
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    query: &'a str,
    top_k: usize,
}

#[derive(Deserialize)]
struct RemoteResponse {
    documents: Vec<Document>,
}

/// Client for a dense retrieval service speaking
/// `POST {query, top_k}` → `{documents: [{id, title, body, score}]}`.
pub struct RemoteRetriever {
    endpoint: String,
    client: JsonClient,
}

impl RemoteRetriever {
    pub fn new(endpoint: impl Into<String>, retry: RetryPolicy, max_in_flight: usize) -> Self {
        Self {
            endpoint: endpoint.into(),
            client: JsonClient::new(retry, max_in_flight),
        }
    }

    pub fn remote_search(&self, query: &str, top_k: usize) -> Result<Vec<Document>> {
        let response = self.client.post(&self.endpoint, None, &RemoteRequest { query, top_k })?;
        let parsed: RemoteResponse = decode_json(response.body.as_bytes())
            .map_err(|e| Error::Protocol(format!("malformed retriever response: {e}")))?;
        let mut seen = HashSet::new();
        for doc in &parsed.documents {
            if doc.id.is_empty() || !seen.insert(doc.id.as_str()) {
                return Err(Error::Protocol(format!(
                    "retriever returned an empty or duplicate document id {:?}",
                    doc.id
                )));
            }
        }
        Ok(parsed.documents.into_iter().take(top_k).collect())
    }
}

impl Retriever for RemoteRetriever {
    fn retrieve(&self, query: &str, top_k: usize) -> Result<Vec<Document>> {
        self.remote_search(query, top_k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(bodies: &[(&str, &str)]) -> Vec<Document> {
        bodies
            .iter()
            .map(|(id, body)| Document::new(*id, format!("title {id}"), *body))
            .collect()
    }

    #[test]
    fn stats_of_three_docs() {
        let c = Corpus::build(
            docs(&[("a", "one two three"), ("b", "one"), ("c", "two two")]),
            Bm25Params::default(),
        )
        .unwrap();
        assert_eq!(c.doc_lengths(), &[3, 1, 2]);
        assert_eq!(c.mean_length(), 2.0);
        assert_eq!(c.document_frequency("one"), 2);
        assert_eq!(c.document_frequency("two"), 2);
        assert_eq!(c.document_frequency("three"), 1);
        assert_eq!(c.stats().documents, 3);
    }

    #[test]
    fn build_errors() {
        assert!(matches!(
            Corpus::build(Vec::new(), Bm25Params::default()),
            Err(Error::Validation(_))
        ));
        let err = Corpus::build(docs(&[("a", "x"), ("a", "y")]), Bm25Params::default()).unwrap_err();
        assert!(err.to_string().contains("duplicate document id: a"));
    }

    #[test]
    fn empty_body_retrievable_by_id_only() {
        let c = Corpus::build(docs(&[("a", "alpha beta"), ("e", "")]), Bm25Params::default()).unwrap();
        assert_eq!(c.doc_lengths()[1], 0);
        for q in ["alpha", "beta", "title", "e", ""] {
            assert!(c.search(q, 5).iter().all(|d| d.id != "e"));
        }
        assert_eq!(c.get("e").unwrap().body, "");
    }

    #[test]
    fn single_match_ranks_first_and_no_match_is_empty() {
        let c = Corpus::build(
            docs(&[("a", "apple banana"), ("b", "banana cherry"), ("c", "cherry durian")]),
            Bm25Params::default(),
        )
        .unwrap();
        assert_eq!(c.search("durian banana", 5)[0].id, "c");
        assert!(c.search("zucchini", 5).is_empty());
        assert_eq!(c.search("banana cherry", 1).len(), 1);
    }

    #[test]
    fn ties_break_by_id() {
        let c = Corpus::build(
            docs(&[("z", "same words"), ("m", "same words"), ("a", "same words")]),
            Bm25Params::default(),
        )
        .unwrap();
        let ids: Vec<_> = c.search("same", 5).into_iter().map(|d| d.id).collect();
        assert_eq!(ids, vec!["a", "m", "z"]);
    }

    #[test]
    fn truncate_cases() {
        let long = Document::new("d", "Title", "x".repeat(1000));
        assert_eq!(truncate(&long, 512).body.chars().count(), 512);
        assert_eq!(truncate(&long, 512).title, "Title");
        let short = Document::new("d", "T", "y".repeat(100));
        assert_eq!(truncate(&short, 512), short);
        let wide = Document::new("d", "T", "é".repeat(600));
        let cut = truncate(&wide, 512);
        assert_eq!(cut.body.chars().count(), 512);
        assert_eq!(cut.body.len(), 1024);
        assert_eq!(truncate(&cut, 512), cut);
    }

    #[test]
    fn index_file_round_trip_and_fingerprint() {
        let c = Corpus::build(docs(&[("a", "x y"), ("b", "y z")]), Bm25Params::default()).unwrap();
        let mut buf = Vec::new();
        write_index(&mut buf, &c).unwrap();
        let back = read_index(buf.as_slice(), Some(Bm25Params::default())).unwrap();
        assert_eq!(back.documents(), c.documents());
        assert_eq!(back.search("y", 5), c.search("y", 5));

        let other = Bm25Params { k1: 1.2, b: 0.75 };
        assert!(matches!(read_index(buf.as_slice(), Some(other)), Err(Error::Validation(_))));
        assert!(read_index(&buf[..buf.len() - 3], None).is_err());
        let mut corrupt = buf.clone();
        corrupt[20] ^= 0xff;
        assert!(read_index(corrupt.as_slice(), None).is_err());
        assert!(read_index(&b"nonsense"[..], None).is_err());
    }

    #[test]
    fn config_validation() {
        RetrieverConfig::default().validate().unwrap();
        let remote = RetrieverConfig {
            mode: RetrieverMode::RemoteDense,
            ..RetrieverConfig::default()
        };
        assert!(remote.validate().is_err());
        let zero = RetrieverConfig {
            top_k: 0,
            ..RetrieverConfig::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn corpus_jsonl_rows() {
        let text = "{\"id\":\"1\",\"title\":\"A\",\"text\":\"alpha\"}\n\n{\"id\":\"2\",\"text\":\"beta\"}\n";
        let docs = read_corpus(text.as_bytes()).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[1].title, "");
    }
}
