//! Memory banks: the compressed bank (shared code matrix + per-document
//! code indices), its continuous counterpart for comparison, footprint
//! accounting, and the on-disk format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bytes::ByteReader;
use crate::error::{MbcError, Result};
use crate::num::Tensor;

const BANK_MAGIC: &[u8; 4] = b"MBCB";
const BANK_VERSION: u16 = 1;

/// One memorized document: its id and the T code indices.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BankEntry {
    pub doc_id: String,
    pub codes: Vec<u32>,
}

/// Append-only store of quantized documents. All entries share one code
/// matrix and have exactly `tokens_per_doc` indices.
#[derive(Clone, Debug)]
pub struct CompressedMemoryBank {
    pub entries_matrix: Tensor,
    pub tokens_per_doc: usize,
    docs: Vec<BankEntry>,
}

impl CompressedMemoryBank {
    pub fn new(entries_matrix: Tensor, tokens_per_doc: usize) -> Result<Self> {
        if entries_matrix.rows() == 0 || entries_matrix.cols() == 0 || tokens_per_doc == 0 {
            return Err(MbcError::Bank("bank needs a nonempty code matrix and T >= 1".into()));
        }
        Ok(CompressedMemoryBank { entries_matrix, tokens_per_doc, docs: Vec::new() })
    }

    pub fn n_codes(&self) -> usize {
        self.entries_matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.entries_matrix.cols()
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[BankEntry] {
        &self.docs
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.docs.iter().any(|d| d.doc_id == doc_id)
    }

    /// Append one document. Re-memorizing an id is an error: the bank is
    /// append-only and never silently overwrites.
    pub fn insert(&mut self, doc_id: &str, codes: Vec<u32>) -> Result<()> {
        if doc_id.is_empty() {
            return Err(MbcError::Bank("document id must be nonempty".into()));
        }
        if codes.len() != self.tokens_per_doc {
            return Err(MbcError::Bank(format!(
                "document '{doc_id}' has {} codes, bank stores {} per document",
                codes.len(),
                self.tokens_per_doc
            )));
        }
        if let Some(&bad) = codes.iter().find(|&&c| c as usize >= self.n_codes()) {
            return Err(MbcError::Bank(format!(
                "document '{doc_id}' references code {bad}, codebook has {}",
                self.n_codes()
            )));
        }
        if self.contains(doc_id) {
            return Err(MbcError::Bank(format!(
                "document '{doc_id}' is already memorized"
            )));
        }
        self.docs.push(BankEntry { doc_id: doc_id.to_string(), codes });
        Ok(())
    }

    /// Reconstruct one document's T x D context vector by gathering rows
    /// of the code matrix.
    pub fn materialize(&self, doc_id: &str) -> Result<Tensor> {
        let entry = self
            .docs
            .iter()
            .find(|d| d.doc_id == doc_id)
            .ok_or_else(|| MbcError::Bank(format!("document '{doc_id}' is not memorized")))?;
        Ok(self.materialize_entry(entry))
    }

    pub fn materialize_entry(&self, entry: &BankEntry) -> Tensor {
        let d = self.dim();
        let mut out = Tensor::zeros(self.tokens_per_doc, d);
        for (t, &c) in entry.codes.iter().enumerate() {
            out.row_mut(t).copy_from_slice(self.entries_matrix.row(c as usize));
        }
        out
    }

    pub fn footprint(&self) -> FootprintReport {
        FootprintReport::new(self.n_codes(), self.dim(), self.tokens_per_doc, self.len())
    }
}

/// The uncompressed alternative: every document keeps its full T x D
/// continuous context vector.
#[derive(Clone, Debug, Default)]
pub struct ContinuousMemoryBank {
    docs: Vec<(String, Tensor)>,
}

impl ContinuousMemoryBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn insert(&mut self, doc_id: &str, context: Tensor) -> Result<()> {
        if self.docs.iter().any(|(id, _)| id == doc_id) {
            return Err(MbcError::Bank(format!(
                "document '{doc_id}' is already memorized"
            )));
        }
        self.docs.push((doc_id.to_string(), context));
        Ok(())
    }

    pub fn get(&self, doc_id: &str) -> Option<&Tensor> {
        self.docs.iter().find(|(id, _)| id == doc_id).map(|(_, t)| t)
    }

    /// docs * T * D float32 elements, reported in decimal megabytes.
    pub fn footprint_bytes(&self) -> u64 {
        self.docs
            .iter()
            .map(|(_, t)| (t.numel() * FLOAT_BYTES) as u64)
            .sum()
    }

    pub fn footprint_mb(&self) -> f64 {
        self.footprint_bytes() as f64 / 1e6
    }
}

/// Stored elements are float32-equivalent (4 bytes); code indices are
/// counted at 8 bytes apiece. Megabytes are decimal (1e6 bytes).
pub const FLOAT_BYTES: usize = 4;
pub const INDEX_BYTES: usize = 8;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FootprintReport {
    pub n_codes: usize,
    pub dim: usize,
    pub tokens_per_doc: usize,
    pub doc_count: usize,
    pub codebook_bytes: u64,
    pub index_bytes: u64,
    pub compressed_bytes: u64,
    pub continuous_bytes: u64,
    pub compressed_mb: f64,
    pub continuous_mb: f64,
    pub reduction_pct: f64,
}

impl FootprintReport {
    pub fn new(n_codes: usize, dim: usize, tokens_per_doc: usize, doc_count: usize) -> Self {
        let codebook_bytes = (n_codes * dim * FLOAT_BYTES) as u64;
        let index_bytes = (doc_count * tokens_per_doc * INDEX_BYTES) as u64;
        let compressed_bytes = codebook_bytes + index_bytes;
        let continuous_bytes = (doc_count * tokens_per_doc * dim * FLOAT_BYTES) as u64;
        let reduction_pct = if continuous_bytes > 0 {
            100.0 * (1.0 - compressed_bytes as f64 / continuous_bytes as f64)
        } else {
            0.0
        };
        FootprintReport {
            n_codes,
            dim,
            tokens_per_doc,
            doc_count,
            codebook_bytes,
            index_bytes,
            compressed_bytes,
            continuous_bytes,
            compressed_mb: compressed_bytes as f64 / 1e6,
            continuous_mb: continuous_bytes as f64 / 1e6,
            reduction_pct,
        }
    }
}

/// On-disk bank layout, all little-endian:
///   magic "MBCB" | version u16 | n_codes u32 | dim u32 | T u32
///   | code matrix as n_codes*dim f64
///   | doc_count u64 | per doc: id_len u16, id UTF-8 bytes, T u32 codes
pub fn save_bank(bank: &CompressedMemoryBank, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(BANK_MAGIC)?;
    w.write_all(&BANK_VERSION.to_le_bytes())?;
    w.write_all(&(bank.n_codes() as u32).to_le_bytes())?;
    w.write_all(&(bank.dim() as u32).to_le_bytes())?;
    w.write_all(&(bank.tokens_per_doc as u32).to_le_bytes())?;
    for &v in bank.entries_matrix.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(bank.len() as u64).to_le_bytes())?;
    for doc in bank.docs() {
        let id = doc.doc_id.as_bytes();
        if id.len() > u16::MAX as usize {
            return Err(MbcError::Bank(format!(
                "document id '{}...' exceeds {} bytes",
                &doc.doc_id[..32.min(doc.doc_id.len())],
                u16::MAX
            )));
        }
        w.write_all(&(id.len() as u16).to_le_bytes())?;
        w.write_all(id)?;
        for &c in &doc.codes {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_bank(path: &Path) -> Result<CompressedMemoryBank> {
    let mut r = ByteReader { inner: BufReader::new(File::open(path)?) };
    let mut magic = [0u8; 4];
    r.exact(&mut magic, "magic")?;
    if &magic != BANK_MAGIC {
        return Err(MbcError::Format(format!(
            "not a memory bank file (magic {:02x?})",
            magic
        )));
    }
    let version = r.u16("version")?;
    if version != BANK_VERSION {
        return Err(MbcError::Format(format!(
            "unsupported bank version {version}, expected {BANK_VERSION}"
        )));
    }
    let n_codes = r.u32("code count")? as usize;
    let dim = r.u32("dim")? as usize;
    let tokens_per_doc = r.u32("tokens per document")? as usize;
    if n_codes == 0 || dim == 0 || tokens_per_doc == 0 {
        return Err(MbcError::Format("bank header has zero dimension".into()));
    }
    let mut data = Vec::with_capacity(n_codes * dim);
    for i in 0..n_codes * dim {
        let v = r.f64("code matrix")?;
        if !v.is_finite() {
            return Err(MbcError::Format(format!(
                "code matrix element {i} is not finite"
            )));
        }
        data.push(v);
    }
    let entries_matrix = Tensor::new(n_codes, dim, data)?;
    let doc_count = r.u64("document count")? as usize;
    let mut bank = CompressedMemoryBank::new(entries_matrix, tokens_per_doc)?;
    for i in 0..doc_count {
        let id_len = r.u16("document id length")? as usize;
        let mut id_bytes = vec![0u8; id_len];
        r.exact(&mut id_bytes, "document id")?;
        let doc_id = String::from_utf8(id_bytes)
            .map_err(|_| MbcError::Format(format!("document {i} id is not UTF-8")))?;
        let mut codes = Vec::with_capacity(tokens_per_doc);
        for _ in 0..tokens_per_doc {
            codes.push(r.u32("document codes")?);
        }
        bank.insert(&doc_id, codes)?;
    }
    r.expect_eof()?;
    Ok(bank)
}
