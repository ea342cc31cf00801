//! Conditional flow matching on optimal-transport paths, and the
//! pre-training / fine-tuning loops built on it.

use std::fmt::Write as _;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::augment::{finetune_corrupt, pretrain_corrupt, AugmentPolicy, NoiseClip};
use crate::error::{Error, Result};
use crate::infill::{sample_mask, zero_masked, FrameMask, MaskPolicy};
use crate::model::{
    DurationNet, DurationSample, FeatureSequence, PhonemeFrames, VectorField, VectorFieldNet, VfBatch,
    DROPPED_PHONEME,
};
use crate::numcore::{Adam, AdamConfig, LrSchedule, Matrix, Rng, Segments, Tape};

pub const DEFAULT_SIGMA_MIN: f64 = 1e-5;
pub const DEFAULT_COND_DROPOUT: f64 = 0.2;

/// Path parameters. `p0` is always the standard normal per entry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub sigma_min: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            sigma_min: DEFAULT_SIGMA_MIN,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sigma_min) {
            return Err(Error::invalid(format!("sigma_min {} outside [0, 1)", self.sigma_min)));
        }
        Ok(())
    }

    /// Interpolant `x_t` and target field `u_t` between `x0` and `x1`.
    pub fn ot_path(&self, x0: &FeatureSequence, x1: &FeatureSequence, t: f64) -> Result<(FeatureSequence, FeatureSequence)> {
        self.validate()?;
        if !x0.same_shape(x1) {
            return Err(Error::shape(format!(
                "x0 is {}x{}, x1 is {}x{}",
                x0.dim(),
                x0.frames(),
                x1.dim(),
                x1.frames()
            )));
        }
        check_t(t)?;
        let s = self.sigma_min;
        let xt = x0.data().zip_map(x1.data(), |a, b| (1.0 - (1.0 - s) * t) * a + t * b);
        let ut = x0.data().zip_map(x1.data(), |a, b| b - (1.0 - s) * a);
        Ok((FeatureSequence::new(xt)?, FeatureSequence::new(ut)?))
    }
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}

/// A `rows×cols` draw from p0, filled row by row.
pub fn draw_p0(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for v in m.row_mut(r) {
            *v = rng.normal();
        }
    }
    m
}

/// One fully specified training example: every random choice already made.
#[derive(Clone, Debug)]
pub struct CfmExample {
    /// Clean target `x1`.
    pub target: Matrix,
    /// Source of the context frames (possibly corrupted).
    pub source: Matrix,
    pub mask: FrameMask,
    pub phonemes: Vec<usize>,
    /// Whether `x_ctx` is blanked (conditioning dropout).
    pub drop_context: bool,
    pub x0: Matrix,
    pub t: f64,
}

/// Packed network input plus the regression target.
struct Assembled {
    batch: VfBatch,
    u: Rc<Matrix>,
    cols: Rc<[bool]>,
}

/// Lay the examples side by side. Generated frames of `x_t` follow the path;
/// context frames hold the context source, as they will at inference.
fn assemble(flow: &FlowConfig, examples: &[CfmExample]) -> Result<Assembled> {
    if examples.is_empty() {
        return Err(Error::empty("no examples in batch"));
    }
    let s = flow.sigma_min;
    let lengths: Vec<usize> = examples.iter().map(|e| e.target.cols()).collect();
    let mut xts = Vec::with_capacity(examples.len());
    let mut ctxs = Vec::with_capacity(examples.len());
    let mut us = Vec::with_capacity(examples.len());
    let mut cols = Vec::new();
    let mut phonemes = Vec::new();
    for e in examples {
        check_t(e.t)?;
        let shape = e.target.shape();
        if e.source.shape() != shape || e.x0.shape() != shape {
            return Err(Error::shape("target, context source and x0 differ in shape"));
        }
        if e.mask.len() != shape.1 || e.phonemes.len() != shape.1 {
            return Err(Error::shape("mask or phonemes do not match the frame count"));
        }
        if e.mask.masked_count() == 0 {
            return Err(Error::empty("mask selects no frames"));
        }
        let mut xt = e.source.clone();
        for r in 0..shape.0 {
            let (x0, x1) = (e.x0.row(r), e.target.row(r));
            for (c, v) in xt.row_mut(r).iter_mut().enumerate() {
                if e.mask.flags()[c] {
                    *v = (1.0 - (1.0 - s) * e.t) * x0[c] + e.t * x1[c];
                }
            }
        }
        let ctx = if e.drop_context {
            Matrix::zeros(shape.0, shape.1)
        } else {
            zero_masked(&e.source, &e.mask)?
        };
        xts.push(xt);
        ctxs.push(ctx);
        us.push(e.x0.zip_map(&e.target, |a, b| b - (1.0 - s) * a));
        cols.extend_from_slice(e.mask.flags());
        phonemes.extend_from_slice(&e.phonemes);
    }
    let refs = |v: &[Matrix]| -> Matrix { Matrix::hcat(&v.iter().collect::<Vec<_>>()) };
    Ok(Assembled {
        batch: VfBatch {
            x_t: refs(&xts),
            x_ctx: refs(&ctxs),
            phonemes: phonemes.into(),
            t: examples.iter().map(|e| e.t).collect(),
            segments: Rc::new(Segments::from_lengths(&lengths)),
        },
        u: Rc::new(refs(&us)),
        cols: cols.into(),
    })
}

fn masked_mean_sq(pred: &Matrix, target: &Matrix, cols: &[bool]) -> f64 {
    let (mut acc, mut n) = (0.0, 0usize);
    for r in 0..pred.rows() {
        for (c, (p, t)) in pred.row(r).iter().zip(target.row(r)).enumerate() {
            if cols[c] {
                acc += (p - t) * (p - t);
                n += 1;
            }
        }
    }
    acc / n as f64
}

/// Loss on fully specified examples, for any field.
pub fn cfm_loss_examples(net: &dyn VectorField, flow: &FlowConfig, examples: &[CfmExample]) -> Result<f64> {
    flow.validate()?;
    let a = assemble(flow, examples)?;
    let pred = net.field(&a.batch)?;
    Ok(masked_mean_sq(&pred, &a.u, &a.cols))
}

/// CFM loss for one sample with explicit `x0` and `t`.
#[allow(clippy::too_many_arguments)]
pub fn cfm_loss_with(
    net: &dyn VectorField,
    flow: &FlowConfig,
    target: &FeatureSequence,
    a: &PhonemeFrames,
    x_ctx: &FeatureSequence,
    mask: &FrameMask,
    x0: &FeatureSequence,
    t: f64,
) -> Result<f64> {
    if !target.same_shape(x_ctx) {
        return Err(Error::shape("target and x_ctx differ in shape"));
    }
    let ex = CfmExample {
        target: target.data().clone(),
        source: x_ctx.data().clone(),
        mask: mask.clone(),
        phonemes: a.ids().to_vec(),
        drop_context: false,
        x0: x0.data().clone(),
        t,
    };
    cfm_loss_examples(net, flow, &[ex])
}

/// CFM loss for one sample: `t` is drawn first, then `x0` row by row.
pub fn cfm_loss(
    net: &dyn VectorField,
    flow: &FlowConfig,
    target: &FeatureSequence,
    a: &PhonemeFrames,
    x_ctx: &FeatureSequence,
    mask: &FrameMask,
    rng: &mut Rng,
) -> Result<f64> {
    let t = rng.uniform();
    let x0 = FeatureSequence::new(draw_p0(target.dim(), target.frames(), rng))?;
    cfm_loss_with(net, flow, target, a, x_ctx, mask, &x0, t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Pretrain,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub mode: TrainMode,
    pub augment: AugmentPolicy,
    pub mask: MaskPolicy,
    pub flow: FlowConfig,
    pub adam: AdamConfig,
    /// Fine-tuning only: chance of dropping both `a` and `x_ctx`.
    pub cond_dropout: f64,
    /// Chance that a mask is a single trailing segment (prompt continuation)
    /// instead of a draw from `mask`.
    pub suffix_mask_prob: f64,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, steps: usize, batch_size: usize, peak_lr: f64) -> Self {
        Self {
            steps,
            batch_size,
            schedule: LrSchedule::new(peak_lr, steps),
            mode,
            augment: AugmentPolicy::default(),
            mask: MaskPolicy::default(),
            flow: FlowConfig::default(),
            adam: AdamConfig::default(),
            cond_dropout: DEFAULT_COND_DROPOUT,
            suffix_mask_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid("steps and batch_size must be >= 1"));
        }
        if self.schedule.total_updates != self.steps {
            return Err(Error::invalid(format!(
                "schedule covers {} updates but steps = {}",
                self.schedule.total_updates, self.steps
            )));
        }
        self.schedule.validate()?;
        self.augment.validate()?;
        self.mask.validate()?;
        self.flow.validate()?;
        for (name, p) in [("cond_dropout", self.cond_dropout), ("suffix_mask_prob", self.suffix_mask_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// A training utterance: clean features and their frame-level phonemes.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub features: FeatureSequence,
    pub phonemes: PhonemeFrames,
}

impl From<&crate::synthworld::SynthUtterance> for TrainSample {
    fn from(u: &crate::synthworld::SynthUtterance) -> Self {
        Self {
            features: u.features.clone(),
            phonemes: u.phonemes.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub noised_fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub records: Vec<StepRecord>,
}

impl LossCurve {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Mean loss over records `[start, end)`.
    pub fn window_mean(&self, start: usize, end: usize) -> f64 {
        let w = &self.records[start.min(self.records.len())..end.min(self.records.len())];
        w.iter().map(|r| r.loss).sum::<f64>() / w.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,lr,noised_flag_fraction\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{:e},{:e},{}", r.step, r.loss, r.lr, r.noised_fraction);
        }
        s
    }
}

fn trailing_mask(frames: usize, policy: &MaskPolicy, rng: &mut Rng) -> Result<FrameMask> {
    let hi = ((policy.max_total_fraction * frames as f64) + 1e-9).floor() as usize;
    let hi = hi.min(frames);
    if hi < policy.min_frames {
        return Err(Error::Infeasible(format!(
            "trailing mask of at least {} frames exceeds max_total_fraction·T = {hi}",
            policy.min_frames
        )));
    }
    let len = rng.int_in(policy.min_frames, hi);
    let mut flags = vec![false; frames];
    flags[frames - len..].fill(true);
    Ok(FrameMask::new(flags))
}

/// Draw every random choice for one sample. Each choice reads its own
/// derived stream, so changing one probability leaves the others untouched.
pub fn draw_example(
    corpus: &[TrainSample],
    bank: &[NoiseClip],
    cfg: &TrainConfig,
    rng: &Rng,
) -> Result<(CfmExample, bool)> {
    let n = corpus.len();
    let mut pick = rng.derive(0);
    let item = &corpus[pick.int_in(0, n - 1)];
    let clean = &item.features;
    let frames = clean.frames();

    let mut mr = rng.derive(1);
    let mask = if mr.uniform() < cfg.suffix_mask_prob {
        trailing_mask(frames, &cfg.mask, &mut mr)?
    } else {
        sample_mask(frames, &cfg.mask, &mut mr)?
    };

    let crng = rng.derive(2);
    let (source, event, phonemes, drop_context) = match cfg.mode {
        TrainMode::Pretrain => {
            let other = &corpus[pick.int_in(0, n - 1)].features;
            let (src, ev) = pretrain_corrupt(clean, &cfg.augment, bank, Some(other), &crng)?;
            (src, ev, vec![DROPPED_PHONEME; frames], false)
        }
        TrainMode::Finetune => {
            let (src, ev) = finetune_corrupt(clean, &cfg.augment, bank, &crng)?;
            let drop = rng.derive(3).uniform() < cfg.cond_dropout;
            let ph = if drop {
                vec![DROPPED_PHONEME; frames]
            } else {
                item.phonemes.ids().to_vec()
            };
            (src, ev, ph, drop)
        }
    };

    let mut nr = rng.derive(4);
    let t = nr.uniform();
    let x0 = draw_p0(clean.dim(), frames, &mut nr);
    Ok((
        CfmExample {
            target: clean.data().clone(),
            source: source.into_matrix(),
            mask,
            phonemes,
            drop_context,
            x0,
            t,
        },
        event.is_corrupted(),
    ))
}

/// Run the optimisation loop. Sample `b` of step `s` draws from
/// `Rng::new(seed, stream).derive2(s, b)`.
pub fn train(
    net: &mut VectorFieldNet,
    corpus: &[TrainSample],
    bank: &[NoiseClip],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<LossCurve> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::empty("training corpus is empty"));
    }
    if cfg.mode == TrainMode::Pretrain && cfg.augment.p_spk_pre > 0.0 && corpus.len() < 2 {
        return Err(Error::invalid("secondary-speaker mixing needs at least two utterances"));
    }
    let stream = match cfg.mode {
        TrainMode::Pretrain => 0x7072,
        TrainMode::Finetune => 0x6674,
    };
    let root = Rng::new(seed, stream);
    let mut adam = Adam::new(cfg.adam, net.params.len());
    let mut curve = LossCurve::default();
    for step in 1..=cfg.steps {
        let mut examples = Vec::with_capacity(cfg.batch_size);
        let mut noised = 0usize;
        for b in 0..cfg.batch_size {
            let (ex, corrupted) = draw_example(corpus, bank, cfg, &root.derive2(step as u64, b as u64))?;
            noised += corrupted as usize;
            examples.push(ex);
        }
        let asm = assemble(&cfg.flow, &examples)?;
        let mut tape = Tape::new();
        let pred = net.forward_tape(&mut tape, &asm.batch)?;
        let loss = tape.masked_mse(pred, asm.u.clone(), asm.cols.clone())?;
        let value = tape.backward(loss, &mut net.params)?;
        if !value.is_finite() {
            tape.check_finite()?;
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        let lr = cfg.schedule.lr_at(step)?;
        adam.step(&mut net.params, lr, step)?;
        curve.records.push(StepRecord {
            step,
            loss: value,
            lr,
            noised_fraction: noised as f64 / cfg.batch_size as f64,
        });
    }
    Ok(curve)
}

/// Masked-denoising pre-training: phonemes dropped, context from the
/// corrupted audio, clean target.
pub fn pretrain(
    net: &mut VectorFieldNet,
    corpus: &[TrainSample],
    bank: &[NoiseClip],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<LossCurve> {
    if cfg.mode != TrainMode::Pretrain {
        return Err(Error::invalid("pretrain needs mode = pretrain"));
    }
    train(net, corpus, bank, cfg, seed)
}

/// Fine-tuning with phonemes, noise mixing and conditioning dropout.
pub fn finetune(
    net: &mut VectorFieldNet,
    corpus: &[TrainSample],
    bank: &[NoiseClip],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<LossCurve> {
    if cfg.mode != TrainMode::Finetune {
        return Err(Error::invalid("finetune needs mode = finetune"));
    }
    train(net, corpus, bank, cfg, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DurTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub adam: AdamConfig,
}

impl Default for DurTrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 16,
            peak_lr: 3e-3,
            adam: AdamConfig::default(),
        }
    }
}

/// Train the duration regressor on random batches from `samples`.
pub fn train_duration(net: &mut DurationNet, samples: &[DurationSample], cfg: &DurTrainConfig, seed: u64) -> Result<LossCurve> {
    if samples.is_empty() {
        return Err(Error::empty("no duration samples"));
    }
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("steps and batch_size must be >= 1"));
    }
    let schedule = LrSchedule::new(cfg.peak_lr, cfg.steps);
    let root = Rng::new(seed, 0x6475);
    let mut adam = Adam::new(cfg.adam, net.params.len());
    let mut curve = LossCurve::default();
    for step in 1..=cfg.steps {
        let mut r = root.derive(step as u64);
        let batch: Vec<&DurationSample> = (0..cfg.batch_size)
            .map(|_| &samples[r.int_in(0, samples.len() - 1)])
            .collect();
        let mut tape = Tape::new();
        let loss = net.loss_tape(&mut tape, &batch)?;
        let value = tape.backward(loss, &mut net.params)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("duration loss at step {step}")));
        }
        let lr = schedule.lr_at(step)?;
        adam.step(&mut net.params, lr, step)?;
        curve.records.push(StepRecord {
            step,
            loss: value,
            lr,
            noised_fraction: 0.0,
        });
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: usize, cols: usize, v: f64) -> FeatureSequence {
        FeatureSequence::new(Matrix::filled(rows, cols, v)).unwrap()
    }

    #[test]
    fn path_endpoints_and_constant_field() {
        let flow = FlowConfig { sigma_min: 0.0 };
        let (x0, x1) = (seq(2, 3, 0.0), seq(2, 3, 1.0));
        let (xt, ut) = flow.ot_path(&x0, &x1, 0.25).unwrap();
        assert!(xt.data().as_slice().iter().all(|&v| v == 0.25));
        assert!(ut.data().as_slice().iter().all(|&v| v == 1.0));
        let (end, _) = flow.ot_path(&x0, &x1, 1.0).unwrap();
        assert_eq!(end, x1);
        let (start, _) = FlowConfig::default().ot_path(&x1, &x0, 0.0).unwrap();
        assert_eq!(start, x1);
    }

    #[test]
    fn path_rejects_bad_input() {
        let flow = FlowConfig::default();
        assert!(flow.ot_path(&seq(2, 3, 0.0), &seq(2, 4, 0.0), 0.5).is_err());
        assert!(flow.ot_path(&seq(2, 3, 0.0), &seq(2, 3, 0.0), 1.5).is_err());
        assert!(FlowConfig { sigma_min: 1.0 }.validate().is_err());
    }

    #[test]
    fn loss_csv_header() {
        let c = LossCurve {
            records: vec![StepRecord {
                step: 1,
                loss: 0.5,
                lr: 1e-3,
                noised_fraction: 0.25,
            }],
        };
        let csv = c.to_csv();
        assert!(csv.starts_with("step,loss,lr,noised_flag_fraction\n1,"));
        assert!(csv.trim_end().ends_with(",0.25"));
    }
}
