//! Fine-grained mixture-of-experts feed-forward layer: top-k softmax routing
//! with gate renormalization, SwiGLU experts and the global-batch
//! load-balancing loss. There is no shared expert.

use crate::error::{shape_err, Error, Result};
use crate::numerics::{kernels, swiglu_ffn_var, Tape, Tensor, Var};

/// Expert count of the production MoE models.
pub const PRODUCTION_EXPERTS: usize = 128;
/// Experts activated per token in the production MoE models.
pub const PRODUCTION_ACTIVE_EXPERTS: usize = 8;
pub const DEFAULT_BALANCE_ALPHA: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
    pub balance_alpha: f64,
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::Config(format!(
                "top_k {} must lie in 1..={} experts",
                self.top_k, self.n_experts
            )));
        }
        if self.expert_hidden == 0 {
            return Err(Error::Config("expert hidden size must be positive".into()));
        }
        if !(self.balance_alpha >= 0.0) {
            return Err(Error::Config(format!("balance alpha {} must be ≥ 0", self.balance_alpha)));
        }
        Ok(())
    }
}

/// Routing decisions for a batch of tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingRecord {
    /// Selected experts per token, most probable first.
    pub selected: Vec<Vec<usize>>,
    /// Router probabilities renormalized over each token's selected set.
    pub gates: Vec<Vec<f64>>,
    /// Full router distribution `[T, n_experts]`.
    pub probs: Tensor,
}

impl RoutingRecord {
    pub fn tokens(&self) -> usize {
        self.selected.len()
    }

    pub fn n_experts(&self) -> usize {
        self.probs.last_dim()
    }

    /// How many tokens selected each expert.
    pub fn expert_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_experts()];
        for sel in &self.selected {
            for &e in sel {
                counts[e] += 1;
            }
        }
        counts
    }

    /// Builds a record from router probabilities `[T, n]`.
    pub fn from_probs(probs: Tensor, top_k: usize) -> Result<Self> {
        if probs.rank() != 2 || probs.shape()[0] == 0 {
            return Err(shape_err!("router probabilities must be [T≥1, n], got {:?}", probs.shape()));
        }
        let n = probs.shape()[1];
        if top_k == 0 || top_k > n {
            return Err(Error::Config(format!("top_k {top_k} must lie in 1..={n}")));
        }
        let mut selected = Vec::with_capacity(probs.rows());
        let mut gates = Vec::with_capacity(probs.rows());
        for r in 0..probs.rows() {
            let row = probs.row(r);
            let sel = select_top_k(row, top_k);
            let mass: f64 = sel.iter().map(|&e| row[e]).sum();
            gates.push(sel.iter().map(|&e| row[e] / mass).collect());
            selected.push(sel);
        }
        Ok(Self { selected, gates, probs })
    }
}

/// Indices of the `k` largest entries, ties going to the lower index.
pub fn select_top_k(probs: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Routes every row of `h [T,d]` through `router_w [d, n_experts]`.
pub fn route(h: &Tensor, router_w: &Tensor, cfg: &MoeConfig) -> Result<RoutingRecord> {
    cfg.validate()?;
    if router_w.rank() != 2 || router_w.shape()[1] != cfg.n_experts {
        return Err(shape_err!("router {:?} for {} experts", router_w.shape(), cfg.n_experts));
    }
    let probs = kernels::softmax(&kernels::matmul(h, router_w)?)?;
    RoutingRecord::from_probs(probs, cfg.top_k)
}

/// Differentiable routing: returns the record and the router probabilities
/// as a tape variable. Selection indices are constants of the step.
pub fn route_var(tape: &Tape, h: Var, router_w: Var, cfg: &MoeConfig) -> Result<(RoutingRecord, Var)> {
    cfg.validate()?;
    let logits = tape.matmul(h, router_w)?;
    if tape.shape(logits)[1] != cfg.n_experts {
        return Err(shape_err!("router produces {:?} for {} experts", tape.shape(logits), cfg.n_experts));
    }
    let probs = tape.softmax(logits)?;
    let record = RoutingRecord::from_probs((*tape.value(probs)).clone(), cfg.top_k)?;
    Ok((record, probs))
}

/// One SwiGLU expert bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct ExpertParams {
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

/// `y_t = Σ_{j ∈ selected(t)} gate_{t,j} · expert_j(h_t)`.
///
/// Gates are recomputed on the tape from `probs` (the router distribution that
/// produced `record`) so the router receives gradients through them. Only the
/// tokens routed to an expert are evaluated by it.
pub fn moe_forward(tape: &Tape, h: Var, experts: &[ExpertParams], record: &RoutingRecord, probs: Var) -> Result<Var> {
    let h_shape = tape.shape(h);
    let t = h_shape[0];
    if record.tokens() != t || tape.shape(probs) != [t, experts.len()] || record.n_experts() != experts.len() {
        return Err(shape_err!(
            "routing record for {} tokens / {} experts vs hidden {:?}, {} experts",
            record.tokens(),
            record.n_experts(),
            h_shape,
            experts.len()
        ));
    }
    let k = record.selected.first().map_or(0, Vec::len);
    let pairs: Vec<(usize, usize)> = record
        .selected
        .iter()
        .enumerate()
        .flat_map(|(ti, sel)| sel.iter().map(move |&e| (ti, e)))
        .collect();
    if pairs.len() != t * k {
        return Err(Error::Contract("routing record has ragged selections".into()));
    }
    let picked = tape.gather_elems(probs, &pairs)?;
    let picked = tape.reshape(picked, &[t, k])?;
    let gates = tape.normalize_rows(picked)?;

    let mut total: Option<Var> = None;
    for (e, ex) in experts.iter().enumerate() {
        let mut rows = Vec::new();
        let mut slots = Vec::new();
        for (ti, sel) in record.selected.iter().enumerate() {
            if let Some(slot) = sel.iter().position(|&s| s == e) {
                rows.push(ti);
                slots.push((ti, slot));
            }
        }
        if rows.is_empty() {
            continue;
        }
        let xe = tape.gather_rows(h, &rows)?;
        let ye = swiglu_ffn_var(tape, xe, ex.w_gate, ex.w_up, ex.w_down)?;
        let ge = tape.gather_elems(gates, &slots)?;
        let ye = tape.mul_rows(ye, ge)?;
        let placed = tape.scatter_add_rows(ye, &rows, t)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, placed)?,
            None => placed,
        });
    }
    total.ok_or_else(|| Error::Contract("no expert received a token".into()))
}

/// Pooled routing statistics: per-expert selection counts and probability
/// sums over every token of every record.
fn pooled_stats(records: &[RoutingRecord], cfg: &MoeConfig) -> Result<(usize, Vec<f64>)> {
    let tokens: usize = records.iter().map(RoutingRecord::tokens).sum();
    if tokens == 0 {
        return Err(Error::Contract("balance loss over an empty batch".into()));
    }
    let mut counts = vec![0usize; cfg.n_experts];
    for r in records {
        if r.n_experts() != cfg.n_experts {
            return Err(shape_err!("record over {} experts, config has {}", r.n_experts(), cfg.n_experts));
        }
        for (c, n) in counts.iter_mut().zip(r.expert_counts()) {
            *c += n;
        }
    }
    let scale = cfg.n_experts as f64 / (cfg.top_k as f64 * tokens as f64);
    Ok((tokens, counts.into_iter().map(|c| scale * c as f64).collect()))
}

/// Global-batch load-balancing loss `L = Σ_i f_i·P_i` with
/// `f_i = n/(k·T)·#{t : i selected}` and `P_i = mean_t probs[t,i]`, where the
/// statistics pool all `T` tokens of all micro-batches in `records`.
///
/// `L ≥ 1`, with equality exactly when routing is uniform. The caller scales
/// it by `balance_alpha`.
pub fn global_balance_loss(records: &[RoutingRecord], cfg: &MoeConfig) -> Result<f64> {
    let (tokens, f) = pooled_stats(records, cfg)?;
    let mut p = vec![0.0; cfg.n_experts];
    for r in records {
        for t in 0..r.tokens() {
            for (acc, v) in p.iter_mut().zip(r.probs.row(t)) {
                *acc += v;
            }
        }
    }
    Ok(f.iter().zip(&p).map(|(fi, pi)| fi * pi / tokens as f64).sum())
}

/// Differentiable [`global_balance_loss`]: `probs[i]` is the router
/// distribution variable that produced `records[i]`.
pub fn global_balance_loss_var(tape: &Tape, probs: &[Var], records: &[RoutingRecord], cfg: &MoeConfig) -> Result<Var> {
    if probs.len() != records.len() || probs.is_empty() {
        return Err(shape_err!("{} probability tensors for {} records", probs.len(), records.len()));
    }
    let (tokens, f) = pooled_stats(records, cfg)?;
    let pooled = if probs.len() == 1 { probs[0] } else { tape.concat_rows(probs)? };
    let p = tape.sum_rows(pooled)?;
    let weights = Tensor::vector(f.iter().map(|fi| fi / tokens as f64).collect());
    let weighted = tape.mul_const(p, weights)?;
    tape.sum(weighted)
}
