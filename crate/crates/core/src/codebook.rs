//! VQ core: nearest-code assignment, straight-through quantization, the
//! VQ loss, EMA usage tracking, dead-code resetting, and usage perplexity.

use serde::{Deserialize, Serialize};

use crate::error::{MbcError, Result};
use crate::num::{Graph, ModelRng, Tensor, Var};

/// Codebook bookkeeping: per-code EMA usage plus reset hyperparameters.
/// The code matrix E itself lives in the parameter store (it is trained
/// by gradient like any other parameter); usage is not a parameter.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Codebook {
    pub n_codes: usize,
    pub dim: usize,
    pub usage: Vec<f64>,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Codebook {
    pub fn new(n_codes: usize, dim: usize, gamma: f64, epsilon: f64) -> Result<Self> {
        if n_codes < 2 || dim == 0 {
            return Err(MbcError::Config(format!(
                "codebook needs n_codes >= 2 and dim >= 1, got {n_codes}x{dim}"
            )));
        }
        if !(0.0 < gamma && gamma < 1.0) || epsilon <= 0.0 {
            return Err(MbcError::Config(format!(
                "codebook needs gamma in (0,1) and epsilon > 0, got {gamma}, {epsilon}"
            )));
        }
        Ok(Codebook { n_codes, dim, usage: vec![0.0; n_codes], gamma, epsilon })
    }

    /// Eq-style EMA update: u_j = gamma*u_j + (1-gamma)*n_j for every j,
    /// where n_j counts token-level assignments in the batch.
    pub fn update_usage(&mut self, codes_in_batch: &[usize]) {
        let mut counts = vec![0usize; self.n_codes];
        for &c in codes_in_batch {
            counts[c] += 1;
        }
        for (u, &n) in self.usage.iter_mut().zip(&counts) {
            *u = self.gamma * *u + (1.0 - self.gamma) * n as f64;
        }
    }

    pub fn dead_codes(&self) -> Vec<usize> {
        (0..self.n_codes).filter(|&j| self.usage[j] < self.epsilon).collect()
    }

    /// Overwrite up to min(|dead|, distinct batch rows) dead codes with
    /// distinct rows sampled uniformly without replacement; each reset
    /// code's usage becomes the pre-reset mean usage. No gradients are
    /// recorded; non-dead rows are untouched.
    pub fn reset_dead_codes(
        &mut self,
        entries: &mut Tensor,
        batch_token_rows: &[&[f64]],
        rng: &mut ModelRng,
    ) -> ResetReport {
        let dead = self.dead_codes();
        if dead.is_empty() {
            return ResetReport::default();
        }
        // distinct rows only, first-occurrence order
        let mut distinct: Vec<&[f64]> = Vec::new();
        for row in batch_token_rows {
            if !distinct.iter().any(|r| r == row) {
                distinct.push(row);
            }
        }
        if distinct.is_empty() {
            return ResetReport {
                reset_indices: Vec::new(),
                new_usage: 0.0,
                warning: Some("dead codes present but batch supplied no rows".into()),
            };
        }
        let n_reset = dead.len().min(distinct.len());
        let picks = rng.sample_without_replacement(distinct.len(), n_reset);
        let mean_usage = self.usage.iter().sum::<f64>() / self.n_codes as f64;
        let mut reset_indices = Vec::with_capacity(n_reset);
        for (slot, &pick) in dead.iter().take(n_reset).zip(&picks) {
            entries.row_mut(*slot).copy_from_slice(distinct[pick]);
            self.usage[*slot] = mean_usage;
            reset_indices.push(*slot);
        }
        ResetReport { reset_indices, new_usage: mean_usage, warning: None }
    }

    /// exp of the entropy of normalized usage; 1 = collapse, n_codes = uniform.
    pub fn perplexity(&self) -> Result<f64> {
        let total: f64 = self.usage.iter().sum();
        if total <= 0.0 {
            return Err(MbcError::InvalidArgument(
                "usage perplexity undefined: all-zero usage".into(),
            ));
        }
        let mut entropy = 0.0;
        for &u in &self.usage {
            if u > 0.0 {
                let p = u / total;
                entropy -= p * p.ln();
            }
        }
        Ok(entropy.exp())
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ResetReport {
    pub reset_indices: Vec<usize>,
    pub new_usage: f64,
    pub warning: Option<String>,
}

/// Entries i.i.d. uniform on [-1/N_c, 1/N_c]; usage starts at zero.
pub fn init_codebook_entries(n_codes: usize, dim: usize, rng: &mut ModelRng) -> Tensor {
    let bound = 1.0 / n_codes as f64;
    rng.uniform_tensor(n_codes, dim, -bound, bound)
}

/// Per-row argmin of squared Euclidean distance; ties break to the lowest
/// index.
pub fn nearest_codes(phi: &Tensor, entries: &Tensor) -> Result<Vec<usize>> {
    if phi.cols() != entries.cols() {
        return Err(MbcError::Shape(format!(
            "nearest_codes: {} vs codebook dim {}",
            phi.cols(),
            entries.cols()
        )));
    }
    let mut codes = Vec::with_capacity(phi.rows());
    for t in 0..phi.rows() {
        let row = phi.row(t);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for j in 0..entries.rows() {
            let mut d = 0.0;
            for (a, b) in row.iter().zip(entries.row(j)) {
                let diff = a - b;
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        codes.push(best);
    }
    Ok(codes)
}

/// Result of quantizing one T x D latent.
pub struct QuantizationResult {
    pub codes: Vec<usize>,
    /// Rows of E at the assigned codes; gradient flows to E through this.
    pub hard: Var,
    /// Straight-through view: forward is bit-exactly `hard`, backward is
    /// the identity on phi and contributes nothing to E.
    pub ste: Var,
}

/// Straight-through quantization. Code assignment is a logged choice so a
/// finite-difference replay keeps the assignment (and every sg snapshot)
/// frozen at the base point.
pub fn quantize_ste(g: &mut Graph, phi: Var, entries: Var) -> Result<QuantizationResult> {
    let codes = {
        let phi_v = g.value(phi).clone();
        let e_v = g.value(entries).clone();
        let verified = nearest_codes(&phi_v, &e_v)?;
        g.logged_indices(move || verified)
    };
    let hard = g.embed(entries, &codes)?;
    let ste = g.straight_through(phi, hard)?;
    Ok(QuantizationResult { codes, hard, ste })
}

/// ||sg(phi) - hard||^2 + beta * ||phi - sg(hard)||^2 over one latent.
pub fn vq_loss(g: &mut Graph, phi: Var, hard: Var, beta_commit: f64) -> Result<Var> {
    if beta_commit <= 0.0 {
        return Err(MbcError::InvalidArgument(format!(
            "commitment cost {beta_commit} must be > 0"
        )));
    }
    let phi_sg = g.stop_grad(phi);
    let d1 = g.sub(phi_sg, hard)?;
    let sq1 = g.mul(d1, d1)?;
    let codebook_term = g.sum(sq1);

    let hard_sg = g.stop_grad(hard);
    let d2 = g.sub(phi, hard_sg)?;
    let sq2 = g.mul(d2, d2)?;
    let commit_term = g.sum(sq2);

    let scaled = g.scale(commit_term, beta_commit);
    g.add(codebook_term, scaled)
}
