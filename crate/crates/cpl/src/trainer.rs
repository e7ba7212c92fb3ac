//! Training loop: sample a degradation batch → encode → gate → compose →
//! positive restore → mismatched-prompt negatives → contrastive total →
//! one backward pass → one Adam step. Every random draw derives from the
//! root seed and the step index, so runs are bit-reproducible and an
//! interrupted run resumed from a checkpoint replays the exact tail of an
//! uninterrupted one.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::adam::{Adam, ParamGrad, DEFAULT_LR};
use crate::backbone::{Backbone, BackboneConfig, BackboneVars};
use crate::cpr::{self, CprTerms, PerceptualExtractor, PhiVars, DEFAULT_ALPHA};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckReport, DEFAULT_H};
use crate::seeds;
use crate::spm::{BankVars, GateDecision, PromptBank, DEFAULT_ACTIVE, DEFAULT_EXPERTS};
use crate::synth::{self, SampleTriple, Task};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

impl LrSchedule {
    /// Learning rate for the (0-based) step about to run.
    pub fn lr_at(self, base: f64, step: u64, total_steps: u64) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                if total_steps == 0 {
                    base
                } else {
                    base * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos())
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub tasks: Vec<Task>,
    pub steps: u64,
    pub batch_size: usize,
    pub crop: usize,
    pub lr: f64,
    pub alpha: f64,
    pub n_experts: usize,
    pub k_active: usize,
    pub m_negatives: usize,
    /// None means "not set anywhere"; resolution order is CLI flag, then
    /// this field, then the CPL_SEED environment variable, then 0.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub lr_schedule: LrSchedule,
    /// Freeze the positive's features when pushing negatives away (the
    /// default); false lets the repulsion also move the positive.
    pub detach_negative_target: bool,
    /// Optional cap on the negative term: distances beyond the margin stop
    /// contributing repulsion gradient.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub negative_margin: Option<f64>,
    pub backbone: BackboneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tasks: Task::ALL.to_vec(),
            steps: 2000,
            batch_size: 8,
            crop: 32,
            lr: DEFAULT_LR,
            alpha: DEFAULT_ALPHA,
            n_experts: DEFAULT_EXPERTS,
            k_active: DEFAULT_ACTIVE,
            m_negatives: 4,
            seed: None,
            checkpoint_every: 500,
            log_every: 10,
            lr_schedule: LrSchedule::Constant,
            detach_negative_target: true,
            negative_margin: None,
            backbone: BackboneConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn root_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.tasks.is_empty() {
            return Err(Error::Config("tasks must not be empty".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive and finite, got {}", self.lr)));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be ≥ 0 and finite, got {}", self.alpha)));
        }
        if self.n_experts == 0 {
            return Err(Error::Config("n_experts must be positive".into()));
        }
        if self.k_active == 0 || self.k_active > self.n_experts {
            return Err(Error::Config(format!(
                "need 1 ≤ k_active ≤ n_experts, got k={}, n={}",
                self.k_active, self.n_experts
            )));
        }
        if self.m_negatives + 1 > self.n_experts {
            return Err(Error::Config(format!(
                "m_negatives must be ≤ n_experts − 1, got m={}, n={}",
                self.m_negatives, self.n_experts
            )));
        }
        if self.backbone.prompt_dim < self.n_experts {
            return Err(Error::Config(format!(
                "prompt_dim {} must be ≥ n_experts {} so experts can stay linearly independent",
                self.backbone.prompt_dim, self.n_experts
            )));
        }
        let stride = 1usize << self.backbone.depth;
        if self.crop % stride != 0 {
            return Err(Error::Config(format!(
                "crop {} must be divisible by the encoder stride {stride}",
                self.crop
            )));
        }
        if self.crop % 8 != 0 {
            return Err(Error::Config(format!(
                "crop {} must be divisible by 8 (three pooling stages in the frozen extractor)",
                self.crop
            )));
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(Error::Config("checkpoint_every and log_every must be positive".into()));
        }
        if self.checkpoint_every % self.log_every != 0 {
            return Err(Error::Config(format!(
                "checkpoint_every {} must be a multiple of log_every {} so resumed runs replay \
                 the metrics log exactly",
                self.checkpoint_every, self.log_every
            )));
        }
        if let Some(m) = self.negative_margin {
            if !(m.is_finite() && m > 0.0) {
                return Err(Error::Config(format!(
                    "negative_margin must be positive and finite, got {m}"
                )));
            }
        }
        Ok(())
    }
}

/// Base-point values the training loss intentionally holds constant in
/// backward: the sparse gate's softmax normalizer and the detached
/// negative-feature target. A finite-difference stencil that injects a
/// captured freeze evaluates exactly the function whose derivative the
/// backward pass reports, which is what makes end-to-end checks meaningful.
#[derive(Debug, Clone)]
pub struct SampleFreeze {
    pub norm_shift: f64,
    pub norm_exp_sum: f64,
    /// φ(I_r⁺) at the base point; None when no detach boundary exists
    /// (no negatives, or the unstopped-target variant).
    pub neg_target: Option<Tensor>,
}

/// Handles into one sample's loss graph, all living on the shared tape,
/// plus the captured freeze for later stencil evaluations.
#[derive(Debug, Clone)]
pub struct SampleLoss {
    pub l_pixel: Var,
    pub l_pos: Var,
    pub l_neg: Option<Var>,
    pub l_cpr: Var,
    pub total: Var,
    pub decision: GateDecision,
    pub freeze: SampleFreeze,
}

/// Everything returned by one optimizer step, for logging and analysis.
#[derive(Debug, Clone)]
pub struct StepStats {
    /// 0-based index of the step that was just executed.
    pub step: u64,
    pub lr: f64,
    /// Batch means of the loss components.
    pub terms: CprTerms,
    /// Per-sample task label and gating decision, in batch order.
    pub samples: Vec<(Task, GateDecision)>,
}

/// One metrics-log line: means over the window since the previous line.
/// `argmax_hist` counts, per task, how often each expert was the gate's
/// top choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub step: u64,
    pub lr: f64,
    pub l_pixel: f64,
    pub l_pos: f64,
    pub l_neg: f64,
    pub l_cpr: f64,
    pub total: f64,
    pub mean_entropy_bits: f64,
    pub argmax_hist: BTreeMap<String, Vec<u64>>,
}

#[derive(Default)]
struct MetricsWindow {
    batches: u64,
    lr_last: f64,
    sums: [f64; 5], // l_pixel, l_pos, l_neg, l_cpr, total
    entropy_sum: f64,
    samples: u64,
    hist: BTreeMap<String, Vec<u64>>,
}

impl MetricsWindow {
    fn absorb(&mut self, stats: &StepStats, n_experts: usize) {
        self.batches += 1;
        self.lr_last = stats.lr;
        let t = &stats.terms;
        for (acc, v) in self.sums.iter_mut().zip([t.l_pixel, t.l_pos, t.l_neg, t.l_cpr, t.total]) {
            *acc += v;
        }
        for (task, decision) in &stats.samples {
            self.entropy_sum += decision.entropy_bits;
            self.samples += 1;
            let counts =
                self.hist.entry(task.name().to_string()).or_insert_with(|| vec![0; n_experts]);
            counts[decision.argmax()] += 1;
        }
    }

    fn emit(&self, step: u64) -> MetricsLine {
        let b = self.batches as f64;
        MetricsLine {
            step,
            lr: self.lr_last,
            l_pixel: self.sums[0] / b,
            l_pos: self.sums[1] / b,
            l_neg: self.sums[2] / b,
            l_cpr: self.sums[3] / b,
            total: self.sums[4] / b,
            mean_entropy_bits: self.entropy_sum / self.samples as f64,
            argmax_hist: self.hist.clone(),
        }
    }
}

/// Map a numeric failure inside one named loss term to a step-level
/// diagnostic; everything else passes through.
fn nf<T>(r: Result<T>, term: &'static str, step: u64) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { term, step },
        other => other,
    })
}

/// Rotate the task mix by the step index so every task gets equal coverage
/// even when the batch size is not a multiple of the task count.
fn rotated_tasks(tasks: &[Task], step: u64) -> Vec<Task> {
    let r = (step % tasks.len() as u64) as usize;
    tasks[r..].iter().chain(&tasks[..r]).copied().collect()
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub backbone: Backbone,
    pub bank: PromptBank,
    pub phi: PerceptualExtractor,
    pub adam: Adam,
    /// Completed optimizer steps.
    pub step: u64,
}

impl Trainer {
    pub fn init(cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let s = cfg.root_seed();
        let backbone = Backbone::init(cfg.backbone, seeds::derive(s, "backbone"))?;
        let bank = PromptBank::init(
            cfg.n_experts,
            cfg.k_active,
            cfg.backbone.prompt_dim,
            cfg.backbone.bottleneck_channels(),
            seeds::derive(s, "bank"),
        )?;
        let phi = PerceptualExtractor::init(seeds::derive(s, "phi"));
        let adam = Adam::new(cfg.lr);
        Ok(Trainer { cfg, backbone, bank, phi, adam, step: 0 })
    }

    /// Rebuild a trainer from checkpointed state. The model is first built
    /// from the config (fixing shapes and the frozen extractor), then every
    /// learnable tensor is overwritten from `params`.
    pub fn from_state(
        cfg: TrainConfig,
        step: u64,
        mut params: BTreeMap<String, Tensor>,
        adam: Adam,
    ) -> Result<Trainer> {
        let mut t = Trainer::init(cfg)?;
        if adam.step() != step {
            return Err(Error::Checkpoint(format!(
                "optimizer has {} steps but the checkpoint is at step {step}",
                adam.step()
            )));
        }
        let (backbone, bank) = (&mut t.backbone, &mut t.bank);
        for (name, tensor) in
            backbone.named_params_mut().into_iter().chain(bank.named_params_mut())
        {
            let src = params
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if src.shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?} but the config implies {:?}",
                    src.shape(),
                    tensor.shape()
                )));
            }
            tensor.data_mut().copy_from_slice(src.data());
        }
        if let Some(name) = params.keys().next() {
            return Err(Error::Checkpoint(format!("unknown parameter {name}")));
        }
        t.adam = adam;
        t.step = step;
        Ok(t)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.backbone.named_params();
        v.extend(self.bank.named_params());
        v
    }

    /// Total learnable scalar count (the frozen extractor excluded).
    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Build the loss graph for one sample on `tape`. `si` is the sample's
    /// position in its batch; together with `step` it pins the negative
    /// prompt draws, so rebuilding the same sample reproduces the graph
    /// bit-for-bit. Passing a previously captured `frozen` rebuilds the
    /// loss with its intentionally-constant quantities (gate normalizer,
    /// detached negative target) injected from that base evaluation; at the
    /// base parameters this reproduces the unfrozen values exactly.
    pub fn sample_loss(
        &self,
        tape: &mut Tape,
        bvars: &BackboneVars,
        kvars: &BankVars,
        pvars: &PhiVars,
        sample: &SampleTriple,
        si: u64,
        step: u64,
        frozen: Option<&SampleFreeze>,
    ) -> Result<SampleLoss> {
        let cfg = &self.cfg;
        let img = tape.constant(&sample.degraded)?;
        let gt = tape.constant(&sample.clean)?;

        // positive reconstruction under the gate's own decision
        let enc = nf(self.backbone.encode(tape, bvars, img), "restore", step)?;
        let decision = match frozen {
            None => nf(self.bank.gate(tape, kvars, enc.x), "restore", step)?,
            Some(fz) => nf(
                self.bank.gate_frozen(tape, kvars, enc.x, fz.norm_shift, fz.norm_exp_sum),
                "restore",
                step,
            )?,
        };
        let p = nf(self.bank.compose_prompt(tape, kvars, &decision), "restore", step)?;
        let i_r = nf(self.backbone.decode(tape, bvars, img, &enc, p), "restore", step)?;

        let pd = nf(tape.sub(i_r, gt), "l_pixel", step)?;
        let l_pixel = nf(tape.l1_mean(pd), "l_pixel", step)?;

        // contrastive terms: positive pull in feature space, negative
        // push from reconstructions under deliberately wrong prompts
        let f_r = nf(self.phi.forward(tape, pvars, i_r), "l_pos", step)?;
        let f_gt = nf(self.phi.forward(tape, pvars, gt), "l_pos", step)?;
        let fd = nf(tape.sub(f_r, f_gt), "l_pos", step)?;
        let l_pos = nf(tape.l2_sq_mean(fd), "l_pos", step)?;

        let l_neg = if cfg.m_negatives > 0 {
            let target = match (cfg.detach_negative_target, frozen) {
                (true, Some(fz)) => {
                    let base = fz.neg_target.as_ref().ok_or_else(|| {
                        Error::InvalidArgument("freeze is missing the negative target".into())
                    })?;
                    tape.constant(base)?
                }
                (true, None) => tape.detach(f_r)?,
                (false, _) => f_r,
            };
            let (negs, _idx) = nf(
                cpr::build_negatives(
                    &self.backbone,
                    &self.bank,
                    tape,
                    bvars,
                    kvars,
                    img,
                    &enc,
                    &decision,
                    cfg.m_negatives,
                    seeds::derive2(cfg.root_seed(), "negatives", step, si),
                ),
                "l_neg",
                step,
            )?;
            let raw = nf(cpr::loss_neg(&self.phi, tape, pvars, &negs, target), "l_neg", step)?;
            Some(match cfg.negative_margin {
                Some(margin) => nf(tape.clip(raw, 0.0, margin), "l_neg", step)?,
                None => raw,
            })
        } else {
            None
        };

        let l_cpr = match l_neg {
            Some(ln) => nf(tape.sub(l_pos, ln), "total", step)?,
            None => l_pos, // no negatives: the contrast is the pull alone
        };
        // α = 0 keeps the total literally the pixel term, so a run with
        // the contrast switched off is bit-identical to plain ℓ1 training
        let total = if cfg.alpha > 0.0 {
            let scaled = nf(tape.mul_scalar(l_cpr, cfg.alpha), "total", step)?;
            nf(tape.add(l_pixel, scaled), "total", step)?
        } else {
            l_pixel
        };
        let freeze = SampleFreeze {
            norm_shift: decision.norm_shift,
            norm_exp_sum: decision.norm_exp_sum,
            neg_target: (cfg.m_negatives > 0 && cfg.detach_negative_target)
                .then(|| tape.to_tensor(f_r)),
        };
        Ok(SampleLoss { l_pixel, l_pos, l_neg, l_cpr, total, decision, freeze })
    }

    /// Build the whole-batch loss graph — the scalar the optimizer actually
    /// differentiates — and return it with the per-sample handles. `frozen`
    /// takes one captured freeze per sample for stencil evaluations.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        bvars: &BackboneVars,
        kvars: &BankVars,
        pvars: &PhiVars,
        batch: &[SampleTriple],
        step: u64,
        frozen: Option<&[SampleFreeze]>,
    ) -> Result<(Var, Vec<SampleLoss>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("a batch needs at least one sample".into()));
        }
        if let Some(fz) = frozen {
            if fz.len() != batch.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} freezes for a batch of {}",
                    fz.len(),
                    batch.len()
                )));
            }
        }
        let mut acc: Option<Var> = None;
        let mut per = Vec::with_capacity(batch.len());
        for (si, sample) in batch.iter().enumerate() {
            let sl = self.sample_loss(
                tape,
                bvars,
                kvars,
                pvars,
                sample,
                si as u64,
                step,
                frozen.map(|fz| &fz[si]),
            )?;
            acc = Some(match acc {
                None => sl.total,
                Some(a) => nf(tape.add(a, sl.total), "total", step)?,
            });
            per.push(sl);
        }
        let b = batch.len() as f64;
        let total = nf(tape.mul_scalar(acc.expect("non-empty batch"), 1.0 / b), "total", step)?;
        Ok((total, per))
    }

    /// One optimizer step on an explicit batch. Builds the full loss graph,
    /// runs one backward pass, applies one Adam update, and returns the
    /// batch-mean loss terms plus every gating decision.
    pub fn train_step(&mut self, batch: &[SampleTriple]) -> Result<StepStats> {
        let step = self.step;
        let cfg = self.cfg.clone();
        let alpha = cfg.alpha;

        let mut tape = Tape::new();
        let bvars = self.backbone.register(&mut tape)?;
        let kvars = self.bank.register(&mut tape)?;
        let pvars = self.phi.register(&mut tape)?;

        let (batch_total, per) =
            self.batch_loss(&mut tape, &bvars, &kvars, &pvars, batch, step, None)?;
        let mut sums = [0.0f64; 4]; // l_pixel, l_pos, l_neg, l_cpr
        let mut samples = Vec::with_capacity(batch.len());
        for (sample, sl) in batch.iter().zip(per) {
            sums[0] += tape.value(sl.l_pixel)[0];
            sums[1] += tape.value(sl.l_pos)[0];
            sums[2] += sl.l_neg.map_or(0.0, |v| tape.value(v)[0]);
            sums[3] += tape.value(sl.l_cpr)[0];
            samples.push((sample.task, sl.decision));
        }

        let b = batch.len() as f64;
        let total_value = tape.value(batch_total)[0];
        nf(tape.backward(batch_total), "total", step)?;

        // the extractor entered the tape as constants; a gradient here
        // would mean the contrastive terms leak into frozen weights
        for &sv in pvars.stage_vars() {
            assert!(tape.grad(sv).is_none(), "frozen extractor accumulated gradient");
        }

        let grads: Vec<(String, Vec<f64>)> = self
            .backbone
            .grads(&tape, &bvars)
            .into_iter()
            .chain(self.bank.grads(&tape, &kvars))
            .zip(self.named_params())
            .map(|((name, g), (_, t))| (name, g.map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)))
            .collect();
        drop(tape);

        let lr = cfg.lr_schedule.lr_at(cfg.lr, step, cfg.steps);
        self.adam.set_lr(lr);
        let (backbone, bank, adam) = (&mut self.backbone, &mut self.bank, &mut self.adam);
        let mut params = backbone.named_params_mut();
        params.extend(bank.named_params_mut());
        let mut updates: Vec<ParamGrad<'_>> = params
            .iter_mut()
            .zip(&grads)
            .map(|((name, t), (gname, g))| {
                debug_assert_eq!(name, gname);
                ParamGrad { name: gname, data: t.data_mut(), grad: g }
            })
            .collect();
        nf(adam.apply(&mut updates), "gradient", step)?;
        self.step += 1;

        let terms = CprTerms {
            l_pixel: sums[0] / b,
            l_pos: sums[1] / b,
            l_neg: sums[2] / b,
            l_cpr: sums[3] / b,
            total: total_value,
            alpha,
        };
        terms.check_identities()?;
        Ok(StepStats { step, lr, terms, samples })
    }

    /// Run from the current step to `cfg.steps`. `on_metrics` receives one
    /// aggregate line every `log_every` steps (and at the end); `on_checkpoint`
    /// fires every `checkpoint_every` steps and at the end. With `steps == 0`
    /// the only effect is one checkpoint of the initialized model.
    pub fn train_loop(
        &mut self,
        mut on_metrics: impl FnMut(&MetricsLine) -> Result<()>,
        mut on_checkpoint: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        self.cfg.validate()?;
        if self.cfg.steps == 0 {
            return on_checkpoint(self);
        }
        let mut window = MetricsWindow::default();
        for step in self.step..self.cfg.steps {
            let mix = rotated_tasks(&self.cfg.tasks, step);
            let batch = synth::make_batch(
                &mix,
                self.cfg.batch_size,
                self.cfg.crop,
                seeds::derive1(self.cfg.root_seed(), "batch", step),
            )?;
            let stats = self.train_step(&batch)?;
            window.absorb(&stats, self.cfg.n_experts);
            let done = step + 1;
            if done % self.cfg.log_every == 0 || done == self.cfg.steps {
                on_metrics(&window.emit(done))?;
                window = MetricsWindow::default();
            }
            if done % self.cfg.checkpoint_every == 0 || done == self.cfg.steps {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }
}

/// The small configuration used for whole-model gradient validation: three
/// tasks, 16×16 crops, three experts with one active, two negatives.
pub fn gradcheck_config(seed: u64) -> TrainConfig {
    TrainConfig {
        tasks: vec![Task::Noise, Task::Rain, Task::Lowlight],
        batch_size: 2,
        crop: 16,
        n_experts: 3,
        k_active: 1,
        m_negatives: 2,
        seed: Some(seed),
        backbone: BackboneConfig { base_channels: 4, depth: 1, prompt_dim: 8, image_channels: 3 },
        ..TrainConfig::default()
    }
}

/// Validate the backward pass of the full training loss — restoration,
/// gating, prompt composition, frozen-extractor features, and the
/// contrastive terms — against central differences, one random parameter
/// coordinate at a time.
///
/// Each trial reseeds the model and data, runs two optimizer steps first
/// (at the symmetric initialization the decoder head is exactly zero and
/// most path gradients vanish identically, which would make the comparison
/// vacuous), then probes `coords_per_trial` coordinates of the step-2 batch
/// loss. Probes whose stencil crosses a gating or sign boundary are skipped
/// via the kink signature.
pub fn end_to_end_gradcheck(
    trials: usize,
    coords_per_trial: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if trials == 0 || coords_per_trial == 0 {
        return Err(Error::InvalidArgument(
            "need at least one trial and one coordinate per trial".into(),
        ));
    }
    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, skipped_kinks: 0 };
    for trial in 0..trials {
        let tseed = seeds::derive1(seed, "e2e", trial as u64);
        let cfg = gradcheck_config(tseed);
        let mut t = Trainer::init(cfg.clone())?;
        for step in 0..2u64 {
            let batch = synth::make_batch(
                &rotated_tasks(&cfg.tasks, step),
                cfg.batch_size,
                cfg.crop,
                seeds::derive1(cfg.root_seed(), "batch", step),
            )?;
            t.train_step(&batch)?;
        }
        let step = t.step;
        let batch = synth::make_batch(
            &rotated_tasks(&cfg.tasks, step),
            cfg.batch_size,
            cfg.crop,
            seeds::derive1(cfg.root_seed(), "batch", step),
        )?;

        // analytic gradients at the warmed point
        let mut tape = Tape::new();
        let bvars = t.backbone.register(&mut tape)?;
        let kvars = t.bank.register(&mut tape)?;
        let pvars = t.phi.register(&mut tape)?;
        let (total, per) = t.batch_loss(&mut tape, &bvars, &kvars, &pvars, &batch, step, None)?;
        let total_value = tape.value(total)[0];
        // The loss holds two values constant by construction: the gate's
        // retained-set normalizer and the stop-gradient negative target.
        // Stencil evaluations must reuse the base-point captures of both,
        // otherwise the differences measure a different function than the
        // one the backward pass reports a gradient for.
        let freezes: Vec<SampleFreeze> = per.iter().map(|sl| sl.freeze.clone()).collect();
        tape.backward(total)?;
        let grads: Vec<Option<Vec<f64>>> = t
            .backbone
            .grads(&tape, &bvars)
            .into_iter()
            .chain(t.bank.grads(&tape, &kvars))
            .map(|(_, g)| g.map(<[f64]>::to_vec))
            .collect();
        drop(tape);

        let eval = |probe: &Trainer| -> Result<(f64, u64)> {
            let mut tape = Tape::new();
            let bvars = probe.backbone.register(&mut tape)?;
            let kvars = probe.bank.register(&mut tape)?;
            let pvars = probe.phi.register(&mut tape)?;
            let (total, _) = probe.batch_loss(
                &mut tape,
                &bvars,
                &kvars,
                &pvars,
                &batch,
                step,
                Some(&freezes),
            )?;
            Ok((tape.value(total)[0], tape.kink_signature()))
        };
        let set = |probe: &mut Trainer, pi: usize, ci: usize, v: f64| {
            let (backbone, bank) = (&mut probe.backbone, &mut probe.bank);
            let mut params = backbone.named_params_mut();
            params.extend(bank.named_params_mut());
            params[pi].1.data_mut()[ci] = v;
        };

        let mut probe = t.clone();
        // The frozen rebuild must reproduce the training loss bit for bit at
        // the base point; drift here means the freeze changed the function
        // instead of pinning its constants.
        let (f0, base_sig) = eval(&probe)?;
        if f0.to_bits() != total_value.to_bits() {
            return Err(Error::GradCheckFailed {
                op: "end2end-base".into(),
                worst: (f0 - total_value).abs(),
            });
        }
        let lens: Vec<usize> = probe.named_params().iter().map(|(_, p)| p.len()).collect();
        for c in 0..coords_per_trial {
            let pi = (seeds::derive2(tseed, "pick", c as u64, 0) % lens.len() as u64) as usize;
            let ci = (seeds::derive2(tseed, "pick", c as u64, 1) % lens[pi] as u64) as usize;
            let analytic = grads[pi].as_ref().map_or(0.0, |g| g[ci]);
            let orig = probe.named_params()[pi].1.data()[ci];
            set(&mut probe, pi, ci, orig + DEFAULT_H);
            let (f_plus, sig_plus) = eval(&probe)?;
            set(&mut probe, pi, ci, orig - DEFAULT_H);
            let (f_minus, sig_minus) = eval(&probe)?;
            set(&mut probe, pi, ci, orig);
            if sig_plus != base_sig || sig_minus != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (f_plus - f_minus) / (2.0 * DEFAULT_H);
            // Roundoff bound of the quotient: each loss evaluation rounds
            // at ~ε·|f| (the 32 covers accumulation across the reduction),
            // and the stencil divides the difference by 2h. A warmed model
            // has directions with |∇| below this bound; flooring the
            // denominator at noise/TOLERANCE certifies those in absolute
            // terms instead of failing on unresolvable digits.
            let noise =
                32.0 * f64::EPSILON * f_plus.abs().max(f_minus.abs()) / (2.0 * DEFAULT_H);
            let rel = gradcheck::relative_error_with_floor(
                analytic,
                numeric,
                noise / gradcheck::TOLERANCE,
            );
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            tasks: vec![Task::Noise],
            steps: 4,
            batch_size: 2,
            crop: 16,
            n_experts: 3,
            k_active: 1,
            m_negatives: 2,
            seed: Some(9),
            checkpoint_every: 2,
            log_every: 2,
            backbone: BackboneConfig { base_channels: 4, depth: 1, prompt_dim: 8, image_channels: 3 },
            ..TrainConfig::default()
        }
    }

    fn tiny_batch(cfg: &TrainConfig, step: u64) -> Vec<SampleTriple> {
        synth::make_batch(
            &rotated_tasks(&cfg.tasks, step),
            cfg.batch_size,
            cfg.crop,
            seeds::derive1(cfg.root_seed(), "batch", step),
        )
        .unwrap()
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = tiny_cfg();
            f(&mut c);
            c.validate().unwrap_err()
        };
        bad(|c| c.tasks.clear());
        bad(|c| c.batch_size = 0);
        bad(|c| c.lr = 0.0);
        bad(|c| c.alpha = -0.1);
        bad(|c| c.k_active = 4); // k > n
        bad(|c| c.m_negatives = 3); // m > n − 1
        bad(|c| c.backbone.prompt_dim = 2); // d_p < n
        bad(|c| c.crop = 12); // divisible by the stride 2 but not by 8
        bad(|c| {
            c.backbone.depth = 4;
            c.crop = 24; // divisible by 8 but not by the stride 16
        });
        bad(|c| c.checkpoint_every = 3); // not a multiple of log_every = 2
        bad(|c| c.negative_margin = Some(0.0));
    }

    #[test]
    fn lr_schedule_values() {
        let c = LrSchedule::Constant;
        assert_eq!(c.lr_at(2e-4, 500, 1000), 2e-4);
        let cos = LrSchedule::Cosine;
        assert_eq!(cos.lr_at(1.0, 0, 1000), 1.0);
        assert!((cos.lr_at(1.0, 500, 1000) - 0.5).abs() < 1e-12);
        assert!(cos.lr_at(1.0, 999, 1000) < 1e-5);
    }

    #[test]
    fn step_runs_updates_params_and_reports() {
        let cfg = tiny_cfg();
        let mut t = Trainer::init(cfg.clone()).unwrap();
        let before: Vec<Vec<f64>> =
            t.named_params().iter().map(|(_, p)| p.data().to_vec()).collect();
        let batch = tiny_batch(&cfg, 0);
        let stats = t.train_step(&batch).unwrap();
        assert_eq!(t.step, 1);
        assert_eq!(t.adam.step(), 1);
        assert_eq!(stats.samples.len(), 2);
        stats.terms.check_identities().unwrap();
        assert!(stats.terms.l_pixel > 0.0);
        let after: Vec<Vec<f64>> =
            t.named_params().iter().map(|(_, p)| p.data().to_vec()).collect();
        assert!(before.iter().zip(&after).any(|(b, a)| b != a), "no parameter moved");
    }

    #[test]
    fn rotation_balances_tasks() {
        let tasks = [Task::Noise, Task::Rain, Task::Lowlight];
        assert_eq!(rotated_tasks(&tasks, 0), vec![Task::Noise, Task::Rain, Task::Lowlight]);
        assert_eq!(rotated_tasks(&tasks, 1), vec![Task::Rain, Task::Lowlight, Task::Noise]);
        assert_eq!(rotated_tasks(&tasks, 5), vec![Task::Lowlight, Task::Noise, Task::Rain]);
    }

    #[test]
    fn alpha_zero_no_negatives_matches_plain_l1_training() {
        // the contrast-free configuration must update exactly like a
        // hand-built ℓ1-only step on the same batch
        let mut cfg = tiny_cfg();
        cfg.alpha = 0.0;
        cfg.m_negatives = 0;
        let mut t = Trainer::init(cfg.clone()).unwrap();
        let batch = tiny_batch(&cfg, 0);
        t.train_step(&batch).unwrap();

        let mut r = Trainer::init(cfg.clone()).unwrap();
        let mut tape = Tape::new();
        let bvars = r.backbone.register(&mut tape).unwrap();
        let kvars = r.bank.register(&mut tape).unwrap();
        let _pvars = r.phi.register(&mut tape).unwrap();
        let mut acc: Option<Var> = None;
        for sample in &batch {
            let img = tape.constant(&sample.degraded).unwrap();
            let gt = tape.constant(&sample.clean).unwrap();
            let enc = r.backbone.encode(&mut tape, &bvars, img).unwrap();
            let decision = r.bank.gate(&mut tape, &kvars, enc.x).unwrap();
            let p = r.bank.compose_prompt(&mut tape, &kvars, &decision).unwrap();
            let i_r = r.backbone.decode(&mut tape, &bvars, img, &enc, p).unwrap();
            let d = tape.sub(i_r, gt).unwrap();
            let l1 = tape.l1_mean(d).unwrap();
            acc = Some(match acc {
                None => l1,
                Some(a) => tape.add(a, l1).unwrap(),
            });
        }
        let loss = tape.mul_scalar(acc.unwrap(), 1.0 / batch.len() as f64).unwrap();
        tape.backward(loss).unwrap();
        let grads: Vec<(String, Vec<f64>)> = r
            .backbone
            .grads(&tape, &bvars)
            .into_iter()
            .chain(r.bank.grads(&tape, &kvars))
            .zip(r.named_params())
            .map(|((n, g), (_, p))| (n, g.map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec)))
            .collect();
        drop(tape);
        let (backbone, bank, adam) = (&mut r.backbone, &mut r.bank, &mut r.adam);
        let mut params = backbone.named_params_mut();
        params.extend(bank.named_params_mut());
        let mut updates: Vec<ParamGrad<'_>> = params
            .iter_mut()
            .zip(&grads)
            .map(|((_, p), (n, g))| ParamGrad { name: n, data: p.data_mut(), grad: g })
            .collect();
        adam.apply(&mut updates).unwrap();

        for ((name, a), (_, b)) in t.named_params().iter().zip(r.named_params()) {
            assert_eq!(a.data(), b.data(), "parameter {name} diverged from the ℓ1 baseline");
        }
    }

    #[test]
    fn identical_seeds_are_bit_identical() {
        let cfg = tiny_cfg();
        let run = || {
            let mut t = Trainer::init(cfg.clone()).unwrap();
            let mut lines = Vec::new();
            t.train_loop(
                |l| {
                    lines.push(serde_json::to_string(l).unwrap());
                    Ok(())
                },
                |_| Ok(()),
            )
            .unwrap();
            let params: Vec<Vec<f64>> =
                t.named_params().iter().map(|(_, p)| p.data().to_vec()).collect();
            (lines, params)
        };
        let (la, pa) = run();
        let (lb, pb) = run();
        assert_eq!(la, lb);
        assert_eq!(pa, pb);
        assert!(!la.is_empty());
    }

    #[test]
    fn resume_from_state_is_bit_exact() {
        let cfg = tiny_cfg();
        // uninterrupted: 4 steps straight through
        let mut full = Trainer::init(cfg.clone()).unwrap();
        for step in 0..4 {
            full.train_step(&tiny_batch(&cfg, step)).unwrap();
        }
        // interrupted: 2 steps, state round-trip, 2 more
        let mut first = Trainer::init(cfg.clone()).unwrap();
        for step in 0..2 {
            first.train_step(&tiny_batch(&cfg, step)).unwrap();
        }
        let params: BTreeMap<String, Tensor> =
            first.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let mut resumed = Trainer::from_state(cfg.clone(), 2, params, first.adam.clone()).unwrap();
        for step in 2..4 {
            resumed.train_step(&tiny_batch(&cfg, step)).unwrap();
        }
        for ((name, a), (_, b)) in full.named_params().iter().zip(resumed.named_params()) {
            assert_eq!(a.data(), b.data(), "parameter {name} diverged after resume");
        }
        assert_eq!(full.step, resumed.step);
    }

    #[test]
    fn from_state_rejects_damage() {
        let cfg = tiny_cfg();
        let t = Trainer::init(cfg.clone()).unwrap();
        let params: BTreeMap<String, Tensor> =
            t.named_params().into_iter().map(|(n, p)| (n, p.clone())).collect();

        // missing parameter
        let mut missing = params.clone();
        missing.remove("bank.experts");
        assert!(Trainer::from_state(cfg.clone(), 0, missing, Adam::new(cfg.lr)).is_err());

        // unknown parameter
        let mut extra = params.clone();
        extra.insert("bank.extra".into(), Tensor::zeros(vec![1]));
        assert!(Trainer::from_state(cfg.clone(), 0, extra, Adam::new(cfg.lr)).is_err());

        // shape mismatch
        let mut bad_shape = params.clone();
        bad_shape.insert("bank.b_g".into(), Tensor::zeros(vec![7]));
        assert!(Trainer::from_state(cfg.clone(), 0, bad_shape, Adam::new(cfg.lr)).is_err());

        // optimizer step disagrees with the trainer step
        assert!(Trainer::from_state(cfg, 3, params, Adam::new(1e-3)).is_err());
    }

    #[test]
    fn non_finite_loss_aborts_with_named_term() {
        let cfg = tiny_cfg();
        let mut t = Trainer::init(cfg.clone()).unwrap();
        // a pathological target overflows the ℓ1 sum to infinity, so the
        // abort must name the pixel term and leave the step counter alone
        let mut batch = tiny_batch(&cfg, 0);
        batch[0].clean = Tensor::full(vec![3, 16, 16], f64::MAX);
        let err = t.train_step(&batch).unwrap_err();
        match err {
            Error::NonFiniteLoss { term, step } => {
                assert_eq!(term, "l_pixel");
                assert_eq!(step, 0);
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
        assert_eq!(t.step, 0);
    }

    #[test]
    fn steps_zero_checkpoints_init_only() {
        let mut cfg = tiny_cfg();
        cfg.steps = 0;
        let mut t = Trainer::init(cfg).unwrap();
        let init: Vec<Vec<f64>> = t.named_params().iter().map(|(_, p)| p.data().to_vec()).collect();
        let mut metrics = 0u32;
        let mut checkpoints = Vec::new();
        t.train_loop(
            |_| {
                metrics += 1;
                Ok(())
            },
            |tr| {
                checkpoints
                    .push(tr.named_params().iter().map(|(_, p)| p.data().to_vec()).collect::<Vec<_>>());
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(metrics, 0);
        assert_eq!(checkpoints.len(), 1);
        assert_eq!(checkpoints[0], init);
    }

    #[test]
    fn metrics_lines_are_emitted_on_schedule() {
        let cfg = tiny_cfg(); // steps 4, log_every 2, checkpoint_every 2
        let mut t = Trainer::init(cfg.clone()).unwrap();
        let mut lines = Vec::new();
        let mut ckpts = Vec::new();
        t.train_loop(
            |l| {
                lines.push(l.clone());
                Ok(())
            },
            |tr| {
                ckpts.push(tr.step);
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(lines.iter().map(|l| l.step).collect::<Vec<_>>(), vec![2, 4]);
        assert_eq!(ckpts, vec![2, 4]);
        for l in &lines {
            assert!(l.total > 0.0);
            assert!(l.mean_entropy_bits >= 0.0);
            let counted: u64 =
                l.argmax_hist.values().map(|v| v.iter().sum::<u64>()).sum();
            // 2 steps per window × batch 2
            assert_eq!(counted, 4);
            // one JSON line, key-stable round trip
            let s = serde_json::to_string(l).unwrap();
            let back: MetricsLine = serde_json::from_str(&s).unwrap();
            assert_eq!(&back, l);
        }
    }

    #[test]
    fn whole_model_gradients_match_central_differences() {
        let rep = end_to_end_gradcheck(2, 5, 31).unwrap();
        assert!(rep.checked >= 8, "{rep:?}"); // at most a couple of kink skips
        assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
    }

    #[test]
    fn whole_model_gradcheck_rejects_empty_plans() {
        assert!(end_to_end_gradcheck(0, 5, 1).is_err());
        assert!(end_to_end_gradcheck(5, 0, 1).is_err());
    }

    #[test]
    fn margin_caps_the_negative_term() {
        let mut cfg = tiny_cfg();
        cfg.negative_margin = Some(1e-12); // cap below any realistic distance
        let mut t = Trainer::init(cfg.clone()).unwrap();
        // push parameters off the identity so negatives actually differ
        for step in 0..3 {
            t.train_step(&tiny_batch(&cfg, step)).unwrap();
        }
        let stats = t.train_step(&tiny_batch(&cfg, 3)).unwrap();
        assert!(stats.terms.l_neg <= 1e-12 + 1e-15, "l_neg {} above margin", stats.terms.l_neg);
    }
}
