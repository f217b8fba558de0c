//! Generator-augmented InfoNCE.
//!
//! For each row, with similarities scaled by `1/τ`:
//!
//! ```text
//! loss = -log (e^{q·k} + e^{q′·k}) / (Σ_{k⁻} e^{q·k⁻} + e^{q·k} + e^{q′·k})
//! ```
//!
//! computed as `lse(denominator terms) - lse(numerator terms)` and averaged
//! over the batch. Negatives enter through `q` only unless
//! `symmetric_negatives` also adds `q′·k⁻` terms.

use super::bank::MemoryBank;
use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub tau: f64,
    pub symmetric_negatives: bool,
}

impl LossOptions {
    pub fn new(tau: f64) -> Self {
        LossOptions {
            tau,
            symmetric_negatives: false,
        }
    }
}

fn check_rows(g: &Graph, name: &'static str, v: Var, like: &[usize]) -> Result<()> {
    if g.shape(v) != like {
        return Err(Error::ShapeMismatch {
            op: name,
            lhs: like.to_vec(),
            rhs: g.shape(v).to_vec(),
        });
    }
    Ok(())
}

/// Shared implementation; `q_prime = None` gives the plain momentum
/// contrast loss.
pub fn contrastive_loss(
    g: &mut Graph,
    q: Var,
    q_prime: Option<Var>,
    k: Var,
    negatives: &Tensor,
    opts: LossOptions,
) -> Result<Var> {
    if !(opts.tau > 0.0 && opts.tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature {} must be positive", opts.tau)));
    }
    let qs = g.shape(q).to_vec();
    if qs.len() != 2 {
        return Err(Error::InvalidShape {
            op: "contrastive_loss",
            shape: qs,
            reason: "expected [B, D]".into(),
        });
    }
    if qs[0] == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    check_rows(g, "contrastive_loss key", k, &qs)?;
    if let Some(qp) = q_prime {
        check_rows(g, "contrastive_loss generated", qp, &qs)?;
    }
    if g.requires_grad(k) {
        return Err(Error::InvalidArgument("keys must be detached from the graph".into()));
    }
    let ns = negatives.shape();
    if ns.len() != 2 || (ns[0] > 0 && ns[1] != qs[1]) {
        return Err(Error::ShapeMismatch {
            op: "contrastive_loss negatives",
            lhs: qs.clone(),
            rhs: ns.to_vec(),
        });
    }
    let b = qs[0];

    let pos_q = g.row_dot(q, k)?;
    let pos_q = g.reshape(pos_q, &[b, 1])?;
    let mut positives = vec![pos_q];
    if let Some(qp) = q_prime {
        let pos_g = g.row_dot(qp, k)?;
        positives.push(g.reshape(pos_g, &[b, 1])?);
    }

    let mut negs = Vec::new();
    if ns[0] > 0 {
        let bank = g.constant(negatives.clone());
        negs.push(g.matmul_bt(q, bank)?);
        if let (true, Some(qp)) = (opts.symmetric_negatives, q_prime) {
            negs.push(g.matmul_bt(qp, bank)?);
        }
    }
    let positives = g.concat(&positives, 1)?;
    let negatives = match negs.len() {
        0 => None,
        1 => Some(negs[0]),
        _ => Some(g.concat(&negs, 1)?),
    };
    loss_from_similarities(g, negatives, positives, opts.tau)
}

/// The objective on precomputed similarities: `negatives` is `[B, N]`
/// (absent when the bank is empty) and `positives` is `[B, P]`.
pub fn loss_from_similarities(g: &mut Graph, negatives: Option<Var>, positives: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    if g.shape(positives).first() == Some(&0) {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let inv_tau = 1.0 / tau;
    let mut denominator: Vec<Var> = negatives.into_iter().collect();
    denominator.push(positives);
    let num = g.scale(positives, inv_tau);
    let den = if denominator.len() == 1 { positives } else { g.concat(&denominator, 1)? };
    let den = g.scale(den, inv_tau);
    let lse_den = g.log_sum_exp(den)?;
    let lse_num = g.log_sum_exp(num)?;
    let per_row = g.sub(lse_den, lse_num)?;
    g.mean_all(per_row)
}

/// Loss with the generated positive `q′`.
pub fn genco_loss(g: &mut Graph, q: Var, q_prime: Var, k: Var, bank: &MemoryBank, opts: LossOptions) -> Result<Var> {
    contrastive_loss(g, q, Some(q_prime), k, &bank.keys(), opts)
}

/// Plain momentum-contrast loss (no generated positive).
pub fn moco_loss(g: &mut Graph, q: Var, k: Var, bank: &MemoryBank, tau: f64) -> Result<Var> {
    contrastive_loss(g, q, None, k, &bank.keys(), LossOptions::new(tau))
}
