//! Contrastive prompt regularization: a frozen random-feature extractor φ
//! and the loss terms built on it. The positive term pulls φ(I_r⁺) toward
//! φ(I_gt); the negative term pushes mismatched-prompt reconstructions away
//! from a stop-gradient snapshot of φ(I_r⁺). Negative reconstructions never
//! contribute a pixel loss, and an overridden gate never propagates into the
//! gating parameters.

use crate::backbone::{Backbone, BackboneVars, Encoded};
use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::seeds;
use crate::spm::{self, GateDecision, PromptBank};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 0.01;
const PHI_CHANNELS: [usize; 4] = [3, 8, 16, 32];

/// Frozen seeded conv stack: 3 × (conv3×3 → relu → 2× average pool),
/// channels 3→8→16→32. Weights are deterministic in the seed and enter every
/// tape as constants, so no gradient can ever accumulate in them.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualExtractor {
    stages: Vec<Tensor>, // kernels only; bias-free keeps φ(0) = 0
}

pub struct PhiVars {
    stages: Vec<Var>,
}

impl PhiVars {
    /// The frozen weights' tape handles, for asserting they stay
    /// gradient-free.
    pub fn stage_vars(&self) -> &[Var] {
        &self.stages
    }
}

impl PerceptualExtractor {
    pub fn init(seed: u64) -> PerceptualExtractor {
        let stages = PHI_CHANNELS
            .windows(2)
            .enumerate()
            .map(|(i, cc)| {
                let std = (2.0 / (cc[0] * 9) as f64).sqrt();
                Tensor::randn(vec![cc[1], cc[0], 3, 3], std, seeds::derive1(seed, "phi", i as u64))
            })
            .collect();
        PerceptualExtractor { stages }
    }

    /// Frozen tensors for checkpoint verification; never trained.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.stages.iter().enumerate().map(|(i, t)| (format!("phi.stage{i}.w"), t)).collect()
    }

    pub fn register(&self, tape: &mut Tape) -> Result<PhiVars> {
        Ok(PhiVars { stages: self.stages.iter().map(|t| tape.constant(t)).collect::<Result<_>>()? })
    }

    /// Gradients flow through the activations into `img`, never into weights.
    pub fn forward(&self, tape: &mut Tape, vars: &PhiVars, img: Var) -> Result<Var> {
        let [c, h, w] = *tape.shape(img) else {
            return Err(Error::shape("phi", format!("expects C×H×W, got {:?}", tape.shape(img))));
        };
        if c != PHI_CHANNELS[0] {
            return Err(Error::shape("phi", format!("expects {} channels, got {c}", PHI_CHANNELS[0])));
        }
        let div = 1 << vars.stages.len();
        if h % div != 0 || w % div != 0 {
            return Err(Error::shape(
                "phi",
                format!("spatial size {h}×{w} not divisible by {div}"),
            ));
        }
        let mut cur = img;
        for &stage in &vars.stages {
            let y = tape.conv2d(cur, stage, 1, Padding::Same)?;
            let y = tape.relu(y)?;
            cur = tape.avg_pool2x(y)?;
        }
        Ok(cur)
    }

    /// Number of pooling stages (input extents must divide 2^stages).
    pub fn stages(&self) -> usize {
        self.stages.len()
    }
}

/// Scalar loss components of one batch (or one sample), as plain values for
/// logging. The defining identities are exact by construction and re-checked
/// against 1e-9 wherever terms are assembled.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CprTerms {
    pub l_pixel: f64,
    pub l_pos: f64,
    pub l_neg: f64,
    pub l_cpr: f64,
    pub total: f64,
    pub alpha: f64,
}

impl CprTerms {
    pub fn check_identities(&self) -> Result<()> {
        if (self.l_cpr - (self.l_pos - self.l_neg)).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "l_cpr {} deviates from l_pos − l_neg = {}",
                self.l_cpr,
                self.l_pos - self.l_neg
            )));
        }
        if (self.total - (self.l_pixel + self.alpha * self.l_cpr)).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "total {} deviates from l_pixel + α·l_cpr = {}",
                self.total,
                self.l_pixel + self.alpha * self.l_cpr
            )));
        }
        Ok(())
    }
}

/// φ-space squared distance, mean over feature elements.
pub fn loss_pos(
    phi: &PerceptualExtractor,
    tape: &mut Tape,
    vars: &PhiVars,
    i_r_pos: Var,
    i_gt: Var,
) -> Result<Var> {
    if tape.shape(i_r_pos) != tape.shape(i_gt) {
        return Err(Error::shape(
            "loss_pos",
            format!("{:?} vs {:?}", tape.shape(i_r_pos), tape.shape(i_gt)),
        ));
    }
    let f_r = phi.forward(tape, vars, i_r_pos)?;
    let f_gt = phi.forward(tape, vars, i_gt)?;
    let d = tape.sub(f_r, f_gt)?;
    tape.l2_sq_mean(d)
}

/// Mean over negatives of the φ-space squared distance to `target` (already
/// a φ feature map, detached by the caller when the stop-gradient variant is
/// on). Errors on an empty list.
pub fn loss_neg(
    phi: &PerceptualExtractor,
    tape: &mut Tape,
    vars: &PhiVars,
    negatives: &[Var],
    target_features: Var,
) -> Result<Var> {
    if negatives.is_empty() {
        return Err(Error::InvalidArgument("negative list must not be empty".into()));
    }
    let mut acc: Option<Var> = None;
    for &neg in negatives {
        let f = phi.forward(tape, vars, neg)?;
        let d = tape.sub(f, target_features)?;
        let l = tape.l2_sq_mean(d)?;
        acc = Some(match acc {
            None => l,
            Some(a) => tape.add(a, l)?,
        });
    }
    tape.mul_scalar(acc.expect("non-empty list"), 1.0 / negatives.len() as f64)
}

/// Mismatched-prompt reconstructions for one sample, sharing the positive
/// pass's encoder activations (identical math, one encode). Returns the
/// restored images and the forced expert indices.
pub fn build_negatives(
    backbone: &Backbone,
    bank: &PromptBank,
    tape: &mut Tape,
    bvars: &BackboneVars,
    kvars: &spm::BankVars,
    img: Var,
    enc: &Encoded,
    decision: &GateDecision,
    m: usize,
    seed: u64,
) -> Result<(Vec<Var>, Vec<usize>)> {
    let indices = spm::sample_negative_indices(decision.argmax(), bank.n, m, seed)?;
    let mut out = Vec::with_capacity(indices.len());
    for &j in &indices {
        let od = bank.override_gate(tape, decision, j)?;
        let p = bank.compose_prompt(tape, kvars, &od)?;
        out.push(backbone.decode(tape, bvars, img, enc, p)?);
    }
    Ok((out, indices))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::gradcheck;

    fn phi() -> PerceptualExtractor {
        PerceptualExtractor::init(404)
    }

    fn image(seed: u64) -> Tensor {
        Tensor::randn(vec![3, 16, 16], 0.25, seed).map(|v| (v + 0.5).clamp(0.0, 1.0))
    }

    #[test]
    fn phi_is_frozen_and_deterministic() {
        let a = phi();
        let b = phi();
        assert_eq!(a, b);
        let img = image(1);
        let run = |e: &PerceptualExtractor| {
            let mut tape = Tape::new();
            let vars = e.register(&mut tape).unwrap();
            let v = tape.constant(&img).unwrap();
            let f = e.forward(&mut tape, &vars, v).unwrap();
            tape.to_tensor(f)
        };
        assert_eq!(run(&a), run(&b));
    }

    #[test]
    fn phi_output_shape_and_divisibility() {
        let e = phi();
        let mut tape = Tape::new();
        let vars = e.register(&mut tape).unwrap();
        let v = tape.constant(&image(2)).unwrap();
        let f = e.forward(&mut tape, &vars, v).unwrap();
        assert_eq!(tape.shape(f), &[32, 2, 2]); // 16 / 2^3

        let odd = tape.constant(&Tensor::zeros(vec![3, 12, 12])).unwrap();
        assert!(e.forward(&mut tape, &vars, odd).is_err());
    }

    #[test]
    fn phi_distinguishes_random_pairs() {
        let e = phi();
        for i in 0..100u64 {
            let (a, b) = (image(1000 + i), image(2000 + i));
            let mut tape = Tape::new();
            let vars = e.register(&mut tape).unwrap();
            let (va, vb) = (tape.constant(&a).unwrap(), tape.constant(&b).unwrap());
            let l = loss_pos(&e, &mut tape, &vars, va, vb).unwrap();
            assert!(tape.value(l)[0] > 0.0, "pair {i} collapsed");
        }
    }

    #[test]
    fn phi_never_accumulates_weight_gradient() {
        let e = phi();
        let mut tape = Tape::new();
        let vars = e.register(&mut tape).unwrap();
        let img = tape.leaf(&image(3).with_requires_grad()).unwrap();
        let f = e.forward(&mut tape, &vars, img).unwrap();
        let s = tape.l2_sq_mean(f).unwrap();
        tape.backward(s).unwrap();
        for &sv in &vars.stages {
            assert!(tape.grad(sv).is_none());
        }
        assert!(tape.grad(img).is_some());
    }

    #[test]
    fn phi_input_gradcheck() {
        // d(l2_sq_mean(φ(X) − c)) / dX against central differences
        let e = phi();
        let x = Tensor::randn(vec![3, 8, 8], 0.3, 6).map(|v| (v + 0.5).clamp(0.05, 0.95));
        let tgt = {
            // fixed target with the matching 1×1-per-8px feature shape
            let mut tape = Tape::new();
            let vars = e.register(&mut tape).unwrap();
            let v = tape.constant(&Tensor::full(vec![3, 8, 8], 0.5)).unwrap();
            let f = e.forward(&mut tape, &vars, v).unwrap();
            tape.to_tensor(f)
        };
        let rep = gradcheck::fd_gradcheck(
            |tape, vars| {
                let pv = e.register(tape)?;
                let f = e.forward(tape, &pv, vars[0])?;
                let c = tape.constant(&tgt)?;
                let d = tape.sub(f, c)?;
                tape.l2_sq_mean(d)
            },
            &[x],
            gradcheck::DEFAULT_H,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
        assert!(rep.checked > 100);
    }

    #[test]
    fn loss_pos_identity_and_symmetry() {
        let e = phi();
        let (a, b) = (image(7), image(8));
        let mut tape = Tape::new();
        let vars = e.register(&mut tape).unwrap();
        let (va, vb) = (tape.constant(&a).unwrap(), tape.constant(&b).unwrap());
        let same = loss_pos(&e, &mut tape, &vars, va, va).unwrap();
        assert_eq!(tape.value(same), &[0.0]);
        let ab = loss_pos(&e, &mut tape, &vars, va, vb).unwrap();
        let ba = loss_pos(&e, &mut tape, &vars, vb, va).unwrap();
        assert!((tape.value(ab)[0] - tape.value(ba)[0]).abs() < 1e-12);
    }

    #[test]
    fn loss_pos_matches_independent_recomputation() {
        // oracle: recompute φ features and the mean square by hand
        let e = phi();
        let (a, b) = (image(9), image(10));
        let (fa, fb) = {
            let mut tape = Tape::new();
            let vars = e.register(&mut tape).unwrap();
            let (va, vb) = (tape.constant(&a).unwrap(), tape.constant(&b).unwrap());
            let fa = e.forward(&mut tape, &vars, va).unwrap();
            let fb = e.forward(&mut tape, &vars, vb).unwrap();
            (tape.to_tensor(fa), tape.to_tensor(fb))
        };
        let want = fa
            .data()
            .iter()
            .zip(fb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / fa.len() as f64;

        let mut tape = Tape::new();
        let vars = e.register(&mut tape).unwrap();
        let (va, vb) = (tape.constant(&a).unwrap(), tape.constant(&b).unwrap());
        let l = loss_pos(&e, &mut tape, &vars, va, vb).unwrap();
        assert!((tape.value(l)[0] - want).abs() < 1e-12);
    }

    #[test]
    fn loss_neg_mean_decomposition() {
        let e = phi();
        let (pos, n1, n2) = (image(11), image(12), image(13));
        let single = |neg: &Tensor| {
            let mut tape = Tape::new();
            let vars = e.register(&mut tape).unwrap();
            let vp = tape.constant(&pos).unwrap();
            let fp = e.forward(&mut tape, &vars, vp).unwrap();
            let vn = tape.constant(neg).unwrap();
            let l = loss_neg(&e, &mut tape, &vars, &[vn], fp).unwrap();
            tape.value(l)[0]
        };
        let pair = {
            let mut tape = Tape::new();
            let vars = e.register(&mut tape).unwrap();
            let vp = tape.constant(&pos).unwrap();
            let fp = e.forward(&mut tape, &vars, vp).unwrap();
            let v1 = tape.constant(&n1).unwrap();
            let v2 = tape.constant(&n2).unwrap();
            let l = loss_neg(&e, &mut tape, &vars, &[v1, v2], fp).unwrap();
            tape.value(l)[0]
        };
        assert!((pair - 0.5 * (single(&n1) + single(&n2))).abs() < 1e-12);

        // duplicated list == single value; coincident negatives == 0
        let dup = {
            let mut tape = Tape::new();
            let vars = e.register(&mut tape).unwrap();
            let vp = tape.constant(&pos).unwrap();
            let fp = e.forward(&mut tape, &vars, vp).unwrap();
            let v1 = tape.constant(&n1).unwrap();
            let v1b = tape.constant(&n1).unwrap();
            let l = loss_neg(&e, &mut tape, &vars, &[v1, v1b], fp).unwrap();
            tape.value(l)[0]
        };
        assert!((dup - single(&n1)).abs() < 1e-12);
        let coincident = {
            let mut tape = Tape::new();
            let vars = e.register(&mut tape).unwrap();
            let vp = tape.constant(&pos).unwrap();
            let fp = e.forward(&mut tape, &vars, vp).unwrap();
            let same = tape.constant(&pos).unwrap();
            let l = loss_neg(&e, &mut tape, &vars, &[same], fp).unwrap();
            tape.value(l)[0]
        };
        assert_eq!(coincident, 0.0);

        let mut tape = Tape::new();
        let vars = e.register(&mut tape).unwrap();
        let vp = tape.constant(&pos).unwrap();
        let fp = e.forward(&mut tape, &vars, vp).unwrap();
        assert!(loss_neg(&e, &mut tape, &vars, &[], fp).is_err());
    }

    #[test]
    fn negatives_at_identity_init_coincide_with_input() {
        let cfg = BackboneConfig { base_channels: 4, depth: 1, prompt_dim: 8, image_channels: 3 };
        let backbone = Backbone::init(cfg, 21).unwrap();
        let bank = PromptBank::init(5, 1, 8, cfg.bottleneck_channels(), 22).unwrap();
        let e = phi();
        let img_t = image(23);

        let mut tape = Tape::new();
        let bvars = backbone.register(&mut tape).unwrap();
        let kvars = bank.register(&mut tape).unwrap();
        let pvars = e.register(&mut tape).unwrap();
        let img = tape.constant(&img_t).unwrap();
        let enc = backbone.encode(&mut tape, &bvars, img).unwrap();
        let decision = bank.gate(&mut tape, &kvars, enc.x).unwrap();
        let p = bank.compose_prompt(&mut tape, &kvars, &decision).unwrap();
        let i_r = backbone.decode(&mut tape, &bvars, img, &enc, p).unwrap();
        assert_eq!(tape.value(i_r), img_t.data());

        let (negs, idx) =
            build_negatives(&backbone, &bank, &mut tape, &bvars, &kvars, img, &enc, &decision, 4, 77)
                .unwrap();
        assert_eq!(negs.len(), 4);
        assert_eq!(idx.len(), 4);
        assert!(!idx.contains(&decision.argmax()));
        for &n in &negs {
            assert_eq!(tape.value(n), img_t.data());
        }
        // every I⁻ == I_r⁺ ⇒ l_neg == 0 at identity initialization
        let f_pos = e.forward(&mut tape, &pvars, i_r).unwrap();
        let target = tape.detach(f_pos).unwrap();
        let ln = loss_neg(&e, &mut tape, &pvars, &negs, target).unwrap();
        assert_eq!(tape.value(ln), &[0.0]);
    }

    #[test]
    fn terms_identities() {
        let t = CprTerms { l_pixel: 0.5, l_pos: 0.3, l_neg: 0.1, l_cpr: 0.2, total: 0.502, alpha: 0.01 };
        t.check_identities().unwrap();
        let broken = CprTerms { l_cpr: 0.25, ..t };
        assert!(broken.check_identities().is_err());
    }
}
