//! Sparse Prompt Module: n learnable prompt experts behind a linear gate.
//! The gate softmaxes its logits, keeps the k largest weights (ties broken
//! toward the lowest index), and renormalizes the kept weights so they sum
//! to 1. Gradients flow only through the retained entries — the selection
//! mask and the renormalizer are treated as constants in backward, which
//! keeps the gate trainable even at k=1 and makes non-retained rows of the
//! gating matrix receive exactly zero gradient. For k = n no masking happens
//! and the gate is the plain softmax with its true Jacobian.

use crate::error::{Error, Result};
use crate::kernels;
use crate::seeds;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub const DEFAULT_EXPERTS: usize = 5;
pub const DEFAULT_ACTIVE: usize = 1;

#[derive(Debug, Clone)]
pub struct PromptBank {
    pub n: usize,
    pub k: usize,
    pub prompt_dim: usize,
    pub feature_dim: usize,
    experts: Tensor, // [n, d_p]
    w_g: Tensor,     // [n, d_x]
    b_g: Tensor,     // [n]
}

pub struct BankVars {
    pub experts: Var,
    pub w_g: Var,
    pub b_g: Var,
}

/// One gating decision. `weights_var` holds the differentiable retained
/// weights (aligned with `weights_rows`); `sparse_weights` is the detached
/// dense view with zeros outside the retained set.
#[derive(Debug, Clone)]
pub struct GateDecision {
    pub dense_probs: Vec<f64>,
    pub retained: Vec<usize>,
    pub sparse_weights: Vec<f64>,
    pub entropy_bits: f64,
    pub forced: Option<usize>,
    /// Stabilizing shift and exp-sum of the retained softmax at decision
    /// time, captured so a finite-difference harness can rebuild this
    /// decision with the normalizer frozen (`PromptBank::gate_frozen`).
    pub norm_shift: f64,
    pub norm_exp_sum: f64,
    weights_var: Var,
    weights_rows: Vec<usize>,
}

impl GateDecision {
    /// Index the positive pass selected (highest dense probability).
    pub fn argmax(&self) -> usize {
        kernels::topk_indices(&self.dense_probs, 1)[0]
    }
}

impl PromptBank {
    pub fn init(n: usize, k: usize, prompt_dim: usize, feature_dim: usize, seed: u64) -> Result<PromptBank> {
        if n == 0 || k == 0 || k > n {
            return Err(Error::Config(format!("need 1 ≤ k ≤ n, got k={k}, n={n}")));
        }
        // prompt_dim ≥ n is a whole-model constraint checked at assembly;
        // the bank itself only needs positive dimensions (init covers both)
        let bank = PromptBank {
            n,
            k,
            prompt_dim,
            feature_dim,
            // std 0.02: experts start near zero (small initial modulation)
            // yet mutually distinct with overwhelming probability
            experts: Tensor::randn(vec![n, prompt_dim], 0.02, seeds::derive(seed, "experts"))
                .with_requires_grad(),
            w_g: Tensor::randn(vec![n, feature_dim], 0.2, seeds::derive(seed, "gate-w"))
                .with_requires_grad(),
            b_g: Tensor::zeros(vec![n]).with_requires_grad(),
        };
        // distinctness invariant: pairwise ℓ2 distance strictly positive
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (bank.expert_row(i), bank.expert_row(j));
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                if d2 <= 0.0 {
                    return Err(Error::Config(format!("experts {i} and {j} initialized identically")));
                }
            }
        }
        Ok(bank)
    }

    pub fn expert_row(&self, i: usize) -> &[f64] {
        &self.experts.data()[i * self.prompt_dim..][..self.prompt_dim]
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("bank.experts".to_string(), &self.experts),
            ("bank.w_g".to_string(), &self.w_g),
            ("bank.b_g".to_string(), &self.b_g),
        ]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("bank.experts".to_string(), &mut self.experts),
            ("bank.w_g".to_string(), &mut self.w_g),
            ("bank.b_g".to_string(), &mut self.b_g),
        ]
    }

    pub fn register(&self, tape: &mut Tape) -> Result<BankVars> {
        Ok(BankVars {
            experts: tape.leaf(&self.experts)?,
            w_g: tape.leaf(&self.w_g)?,
            b_g: tape.leaf(&self.b_g)?,
        })
    }

    pub fn grads<'t>(&self, tape: &'t Tape, vars: &BankVars) -> Vec<(String, Option<&'t [f64]>)> {
        vec![
            ("bank.experts".to_string(), tape.grad(vars.experts)),
            ("bank.w_g".to_string(), tape.grad(vars.w_g)),
            ("bank.b_g".to_string(), tape.grad(vars.b_g)),
        ]
    }

    /// Gate the pooled feature vector x: softmax over z = W_g·x + b_g, keep
    /// the k largest, renormalize. Entropy is computed on the dense
    /// distribution in bits.
    pub fn gate(&self, tape: &mut Tape, vars: &BankVars, x: Var) -> Result<GateDecision> {
        self.gate_impl(tape, vars, x, None)
    }

    /// `gate` with the sparse branch's stabilizing shift and exp-sum injected
    /// from a base decision instead of recomputed. Finite-difference stencils
    /// evaluate this variant so the numeric derivative measures the frozen-
    /// normalizer rule the backward pass implements. At the base point the
    /// weights reproduce `gate` bit for bit; elsewhere they need not sum to 1.
    pub fn gate_frozen(
        &self,
        tape: &mut Tape,
        vars: &BankVars,
        x: Var,
        norm_shift: f64,
        norm_exp_sum: f64,
    ) -> Result<GateDecision> {
        self.gate_impl(tape, vars, x, Some((norm_shift, norm_exp_sum)))
    }

    fn gate_impl(
        &self,
        tape: &mut Tape,
        vars: &BankVars,
        x: Var,
        freeze: Option<(f64, f64)>,
    ) -> Result<GateDecision> {
        if tape.shape(x) != [self.feature_dim] {
            return Err(Error::shape(
                "gate",
                format!("x {:?} vs feature_dim {}", tape.shape(x), self.feature_dim),
            ));
        }
        let x_col = tape.reshape(x, vec![self.feature_dim, 1])?;
        let zx = tape.matmul(vars.w_g, x_col)?;
        let zx = tape.reshape(zx, vec![self.n])?;
        let logits = tape.add(zx, vars.b_g)?;

        let dense_probs = kernels::softmax(tape.value(logits));
        let entropy_bits = kernels::entropy_bits(&dense_probs);
        let retained = kernels::topk_indices(&dense_probs, self.k);
        let (norm_shift, norm_exp_sum) =
            kernels::softmax_over_normalizer(tape.value(logits), &retained);

        let (weights_var, weights_rows) = if self.k == self.n {
            // dense routing: the gate is exactly the softmax
            (tape.softmax(logits)?, (0..self.n).collect::<Vec<_>>())
        } else {
            let w = match freeze {
                None => tape.topk_renorm(logits, &retained)?,
                Some((shift, sum)) => tape.topk_renorm_frozen(logits, &retained, shift, sum)?,
            };
            (w, retained.clone())
        };

        let mut sparse_weights = vec![0.0; self.n];
        for (&row, &wv) in weights_rows.iter().zip(tape.value(weights_var)) {
            sparse_weights[row] = wv;
        }
        // frozen rebuilds at perturbed points renormalize by the base sum,
        // so only the live path promises unit mass
        debug_assert!(
            freeze.is_some() || (sparse_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9
        );

        Ok(GateDecision {
            dense_probs,
            retained,
            sparse_weights,
            entropy_bits,
            forced: None,
            norm_shift,
            norm_exp_sum,
            weights_var,
            weights_rows,
        })
    }

    /// p = Σ retained_weight_i · e_i, as a [d_p] vector on the tape.
    pub fn compose_prompt(&self, tape: &mut Tape, vars: &BankVars, decision: &GateDecision) -> Result<Var> {
        let rows = tape.gather_rows(vars.experts, &decision.weights_rows)?;
        let w_row = tape.reshape(decision.weights_var, vec![1, decision.weights_rows.len()])?;
        let p = tape.matmul(w_row, rows)?;
        tape.reshape(p, vec![self.prompt_dim])
    }

    /// Replace the selection with a forced one-hot at `forced_index` for a
    /// negative reconstruction. The one-hot is a tape constant: gradients
    /// still reach the chosen expert vector, but never the gating
    /// parameters. Dense probabilities and entropy are kept for logging.
    pub fn override_gate(
        &self,
        tape: &mut Tape,
        decision: &GateDecision,
        forced_index: usize,
    ) -> Result<GateDecision> {
        if forced_index >= self.n {
            return Err(Error::InvalidArgument(format!(
                "forced index {forced_index} out of range for {} experts",
                self.n
            )));
        }
        if forced_index == decision.argmax() {
            return Err(Error::InvalidArgument(format!(
                "forced index {forced_index} equals the positive selection"
            )));
        }
        let one = tape.constant(&Tensor::new(vec![1], vec![1.0])?)?;
        let mut sparse_weights = vec![0.0; self.n];
        sparse_weights[forced_index] = 1.0;
        Ok(GateDecision {
            dense_probs: decision.dense_probs.clone(),
            retained: vec![forced_index],
            sparse_weights,
            entropy_bits: decision.entropy_bits,
            forced: Some(forced_index),
            norm_shift: decision.norm_shift,
            norm_exp_sum: decision.norm_exp_sum,
            weights_var: one,
            weights_rows: vec![forced_index],
        })
    }
}

/// m distinct indices ≠ positive_index, uniform without replacement.
pub fn sample_negative_indices(positive_index: usize, n: usize, m: usize, seed: u64) -> Result<Vec<usize>> {
    if positive_index >= n {
        return Err(Error::InvalidArgument(format!("positive index {positive_index} out of range")));
    }
    if m + 1 > n {
        return Err(Error::InvalidArgument(format!("cannot draw {m} negatives from {n} experts")));
    }
    let mut candidates: Vec<usize> = (0..n).filter(|&i| i != positive_index).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(seed, "negatives"));
    candidates.shuffle(&mut rng);
    candidates.truncate(m);
    Ok(candidates)
}
