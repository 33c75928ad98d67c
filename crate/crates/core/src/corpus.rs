//! Data layer: QA dataset reader, deterministic synthetic fact corpus,
//! and a word-level tokenizer with reserved ids.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MbcError, Result};
use crate::num::ModelRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QARecord {
    pub doc_id: String,
    pub question: String,
    pub answer: String,
}

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOA_ID: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eoa>"];

/// Word-level vocabulary with reserved PAD/UNK/BOS/EOA ids and ordering by
/// first occurrence.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn build<'a>(texts: impl Iterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for text in texts {
            for word in split_words(text) {
                if !index.contains_key(&word) {
                    index.insert(word.clone(), tokens.len());
                    tokens.push(word);
                }
            }
        }
        Vocabulary { tokens, index }
    }

    /// Rebuild the token index, e.g. after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        split_words(text).into_iter().map(|w| self.id(&w)).collect()
    }

    /// Join tokens with spaces; inverse of encode up to normalization for
    /// in-vocabulary, punctuation-free text.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD_ID && id != BOS_ID && id != EOA_ID)
            .map(|&id| self.tokens.get(id).map_or(RESERVED[UNK_ID], |t| t.as_str()))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Lowercase and split into alphanumeric runs; punctuation is a boundary
/// and is dropped.
pub fn split_words(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut words = Vec::new();
    let mut cur = String::new();
    for ch in lower.chars() {
        if ch.is_alphanumeric() {
            cur.push(ch);
        } else if !cur.is_empty() {
            words.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

/// Line-delimited JSON: {"doc_id", "text", "question", "answer"}.
#[derive(Deserialize)]
struct QALine {
    doc_id: String,
    text: String,
    question: String,
    answer: String,
}

pub fn load_qa(path: &Path) -> Result<(Vec<Document>, Vec<QARecord>)> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut docs: Vec<Document> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: QALine = serde_json::from_str(&line).map_err(|e| {
            MbcError::Corpus(format!("line {}: {}", lineno + 1, e))
        })?;
        if parsed.text.is_empty() {
            return Err(MbcError::Corpus(format!("line {}: empty text", lineno + 1)));
        }
        if parsed.question.is_empty() || parsed.answer.is_empty() {
            return Err(MbcError::Corpus(format!(
                "line {}: empty question or answer",
                lineno + 1
            )));
        }
        match by_id.get(&parsed.doc_id) {
            Some(&i) => {
                if docs[i].text != parsed.text {
                    return Err(MbcError::Corpus(format!(
                        "line {}: doc_id {} repeated with different text",
                        lineno + 1,
                        parsed.doc_id
                    )));
                }
            }
            None => {
                by_id.insert(parsed.doc_id.clone(), docs.len());
                docs.push(Document { doc_id: parsed.doc_id.clone(), text: parsed.text.clone() });
            }
        }
        records.push(QARecord {
            doc_id: parsed.doc_id,
            question: parsed.question,
            answer: parsed.answer,
        });
    }
    Ok((docs, records))
}

pub fn save_qa(path: &Path, docs: &[Document], qa: &[QARecord]) -> Result<()> {
    use std::io::Write;
    let by_id: HashMap<&str, &str> =
        docs.iter().map(|d| (d.doc_id.as_str(), d.text.as_str())).collect();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in qa {
        let text = by_id.get(rec.doc_id.as_str()).ok_or_else(|| {
            MbcError::Corpus(format!("qa record references unknown doc {}", rec.doc_id))
        })?;
        let line = serde_json::json!({
            "doc_id": rec.doc_id,
            "text": text,
            "question": rec.question,
            "answer": rec.answer,
        });
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Synthetic fact corpus: one key->value fact per document so answers can
/// only come through memory, never from the question alone.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub documents: Vec<Document>,
    /// One QA record per document, aligned with `documents`.
    pub qa: Vec<QARecord>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub const ATTRIBUTE_POOL: usize = 8;
pub const VALUE_POOL: usize = 32;

pub fn gen_synthetic(n_docs: usize, seed: u64) -> SyntheticCorpus {
    let mut rng = ModelRng::new(seed ^ 0x5eed_0001);
    let attributes: Vec<String> = (0..ATTRIBUTE_POOL).map(|i| format!("attr{i}")).collect();
    let values: Vec<String> = (0..VALUE_POOL).map(|i| format!("val{i}")).collect();

    let mut documents = Vec::with_capacity(n_docs);
    let mut qa = Vec::with_capacity(n_docs);
    for i in 0..n_docs {
        let entity = format!("ent{i}");
        let attr = &attributes[rng.below(ATTRIBUTE_POOL)];
        let value = &values[rng.below(VALUE_POOL)];
        let doc_id = format!("doc{i}");
        documents.push(Document {
            doc_id: doc_id.clone(),
            text: format!("entity {entity} attribute {attr} value {value}"),
        });
        qa.push(QARecord {
            doc_id,
            question: format!("what is {attr} of {entity}"),
            answer: value.clone(),
        });
    }

    // Deterministic 80/10/10 split, disjoint by doc index (= doc_id).
    let mut order: Vec<usize> = (0..n_docs).collect();
    rng.shuffle(&mut order);
    let n_train = (n_docs * 8) / 10;
    let n_val = (n_docs - n_train) / 2;
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    SyntheticCorpus { documents, qa, train, val, test }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_drops_punctuation() {
        assert_eq!(split_words("A dog."), vec!["a", "dog"]);
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let vocab = Vocabulary::build(["a dog"].into_iter());
        assert_eq!(vocab.encode("a cat"), vec![vocab.id("a"), UNK_ID]);
    }

    #[test]
    fn decode_round_trip_for_clean_text() {
        let text = "entity ent3 attribute attr1 value val9";
        let vocab = Vocabulary::build([text].into_iter());
        assert_eq!(vocab.decode(&vocab.encode(text)), text);
    }

    #[test]
    fn synthetic_deterministic_in_seed() {
        let a = gen_synthetic(50, 9);
        let b = gen_synthetic(50, 9);
        assert_eq!(a.documents, b.documents);
        assert_eq!(a.qa, b.qa);
        assert_eq!(a.train, b.train);
        let c = gen_synthetic(50, 10);
        assert_ne!(a.qa, c.qa);
    }

    #[test]
    fn question_never_contains_answer() {
        let corpus = gen_synthetic(200, 3);
        for rec in &corpus.qa {
            assert!(!split_words(&rec.question).contains(&rec.answer));
        }
    }

    #[test]
    fn splits_disjoint_and_cover() {
        let corpus = gen_synthetic(100, 1);
        let mut all: Vec<usize> = corpus
            .train
            .iter()
            .chain(&corpus.val)
            .chain(&corpus.test)
            .copied()
            .collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn value_marginal_roughly_uniform() {
        // chi-squared sanity at 10k docs: expected count per value is
        // 10000/32 = 312.5; critical value for 31 dof at p=0.001 is ~61.1.
        let corpus = gen_synthetic(10_000, 17);
        let mut counts = vec![0usize; VALUE_POOL];
        for rec in &corpus.qa {
            let idx: usize = rec.answer.trim_start_matches("val").parse().unwrap();
            counts[idx] += 1;
        }
        let expected = 10_000.0 / VALUE_POOL as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 61.1, "chi2 {chi2}");
    }

    #[test]
    fn load_qa_validates_lines() {
        use std::io::Write;
        let dir = std::env::temp_dir().join(format!("mbc-corpus-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, r#"{{"doc_id":"d1","text":"t","question":"q","answer":"a"}}"#).unwrap();
        writeln!(f, r#"{{"doc_id":"d2","text":"t2","question":"q2"}}"#).unwrap();
        drop(f);
        let err = load_qa(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn load_qa_dedupes_documents() {
        use std::io::Write;
        let dir = std::env::temp_dir().join(format!("mbc-corpus2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dup.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, r#"{{"doc_id":"d1","text":"t","question":"q1","answer":"a1"}}"#).unwrap();
        writeln!(f, r#"{{"doc_id":"d1","text":"t","question":"q2","answer":"a2"}}"#).unwrap();
        drop(f);
        let (docs, qa) = load_qa(&path).unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(qa.len(), 2);
        std::fs::remove_dir_all(&dir).ok();
    }
}
