//! Query-conditioned aggregation of memorized context vectors into one
//! fixed-size summary, with an optional hierarchical (grouped) schedule
//! that bounds the attention working set.

use serde::{Deserialize, Serialize};

use crate::error::{MbcError, Result};
use crate::nn::{cross_attention_block, init_attn_block};
use crate::num::{Graph, ModelRng, ParamStore, Var};

pub const AGG_PREFIX: &str = "agg.";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregatorConfig {
    pub dim: usize,
    pub tokens: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    /// Group size M for the hierarchical schedule.
    pub group_size: usize,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig { dim: 64, tokens: 12, num_blocks: 4, num_heads: 4, group_size: 64 }
    }
}

impl AggregatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.tokens == 0 || self.num_blocks == 0 {
            return Err(MbcError::Config("aggregator dims and block count must be >= 1".into()));
        }
        if self.num_heads == 0 || self.dim % self.num_heads != 0 {
            return Err(MbcError::Config(format!(
                "aggregator dim {} not divisible by {} heads",
                self.dim, self.num_heads
            )));
        }
        if self.group_size < 2 {
            return Err(MbcError::Config("aggregator group size must be >= 2".into()));
        }
        Ok(())
    }
}

/// Learned T x D seed plus `num_blocks` cross-attention blocks. Block 0
/// reads the query representation; later blocks read the memory entries.
pub fn init_aggregator(
    store: &mut ParamStore,
    cfg: &AggregatorConfig,
    rng: &mut ModelRng,
) -> Result<()> {
    cfg.validate()?;
    let seed = rng.normal_tensor(cfg.tokens, cfg.dim, 0.02);
    store.insert(&format!("{AGG_PREFIX}seed"), seed, true)?;
    for b in 0..cfg.num_blocks {
        init_attn_block(store, AGG_PREFIX, b, cfg.dim, rng, true)?;
    }
    Ok(())
}

pub fn aggregator_param_names(cfg: &AggregatorConfig) -> Vec<String> {
    let mut names = vec![format!("{AGG_PREFIX}seed")];
    for b in 0..cfg.num_blocks {
        names.extend(crate::nn::attn_block_names(AGG_PREFIX, b));
    }
    names
}

/// Canonical order of entries: lexicographic over the flattened values
/// under f64 total order. Sorting happens before any arithmetic, so the
/// forward pass is bit-identical for any permutation of the same entries.
/// The order is a logged choice so replays keep it frozen.
fn canonical_order(g: &mut Graph, entries: &[Var]) -> Vec<usize> {
    let key: Vec<&[f64]> = entries.iter().map(|&e| g.value(e).data()).collect();
    let computed = {
        let mut order: Vec<usize> = (0..entries.len()).collect();
        order.sort_by(|&a, &b| {
            key[a]
                .iter()
                .zip(key[b])
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        order
    };
    g.logged_indices(move || computed)
}

/// Aggregate every entry in one attention pass. `query_rep` is the
/// encoded question (s x D); entries are T x D context vectors.
pub fn aggregate(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &AggregatorConfig,
    query_rep: Var,
    entries: &[Var],
) -> Result<Var> {
    if entries.is_empty() {
        return Err(MbcError::Bank("no memorized documents".into()));
    }
    for &e in entries {
        let (r, c) = g.value(e).shape();
        if r == 0 || c != cfg.dim {
            return Err(MbcError::Shape(format!(
                "aggregator entry is {r}x{c}, expected rows x {}",
                cfg.dim
            )));
        }
    }
    let order = canonical_order(g, entries);
    let sorted: Vec<Var> = order.iter().map(|&i| entries[i]).collect();
    let mem = g.concat_rows(&sorted)?;
    let mut x = g.bind(store, &format!("{AGG_PREFIX}seed"))?;
    for b in 0..cfg.num_blocks {
        let ctx = if b == 0 { query_rep } else { mem };
        x = cross_attention_block(g, store, AGG_PREFIX, b, cfg.num_heads, x, ctx)?;
    }
    Ok(x)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct HierarchyStats {
    pub levels: usize,
    /// Largest number of T x D matrices attended over in any single pass.
    pub peak_group_entries: usize,
    pub passes: usize,
}

/// Grouped schedule: split entries into contiguous groups of at most M,
/// summarize each group with `aggregate`, and recurse on the summaries
/// until one remains. With M >= n this is exactly one flat pass.
pub fn hierarchical_aggregate(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &AggregatorConfig,
    query_rep: Var,
    entries: &[Var],
) -> Result<(Var, HierarchyStats)> {
    if entries.is_empty() {
        return Err(MbcError::Bank("no memorized documents".into()));
    }
    let m = cfg.group_size;
    let mut level: Vec<Var> = entries.to_vec();
    let mut stats = HierarchyStats::default();
    loop {
        stats.levels += 1;
        if level.len() <= m {
            stats.peak_group_entries = stats.peak_group_entries.max(level.len());
            stats.passes += 1;
            let out = aggregate(g, store, cfg, query_rep, &level)?;
            return Ok((out, stats));
        }
        let mut next = Vec::with_capacity(level.len().div_ceil(m));
        for group in level.chunks(m) {
            stats.peak_group_entries = stats.peak_group_entries.max(group.len());
            stats.passes += 1;
            next.push(aggregate(g, store, cfg, query_rep, group)?);
        }
        level = next;
    }
}
