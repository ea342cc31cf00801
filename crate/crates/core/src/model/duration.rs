//! Masked per-phoneme duration regressor.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::blocks::ResBlock;
use crate::error::{Error, Result};
use crate::numcore::{Matrix, ParamId, ParamStore, Rng, Segments, Tape, Var};

/// Phonemes with partially known durations; unknown entries of `context` are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct DurationSample {
    phonemes: Vec<usize>,
    durations: Vec<f64>,
    context: Vec<f64>,
    known: Vec<bool>,
}

impl DurationSample {
    pub fn new(phonemes: Vec<usize>, durations: Vec<f64>, known: Vec<bool>) -> Result<Self> {
        let n = phonemes.len();
        if durations.len() != n || known.len() != n {
            return Err(Error::shape(format!(
                "phonemes {n}, durations {}, mask {}",
                durations.len(),
                known.len()
            )));
        }
        if durations.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::invalid("durations must be finite and non-negative"));
        }
        let context = durations
            .iter()
            .zip(&known)
            .map(|(&d, &k)| if k { d } else { 0.0 })
            .collect();
        Ok(Self {
            phonemes,
            durations,
            context,
            known,
        })
    }

    pub fn len(&self) -> usize {
        self.phonemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phonemes.is_empty()
    }

    pub fn phonemes(&self) -> &[usize] {
        &self.phonemes
    }

    pub fn durations(&self) -> &[f64] {
        &self.durations
    }

    pub fn context(&self) -> &[f64] {
        &self.context
    }

    pub fn known(&self) -> &[bool] {
        &self.known
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DurConfig {
    pub hidden: usize,
    pub depth: usize,
    pub conv_width: usize,
    pub vocab_size: usize,
}

impl Default for DurConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            depth: 2,
            conv_width: 3,
            vocab_size: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DurationNet {
    config: DurConfig,
    pub params: ParamStore,
    emb: ParamId,
    in_w: ParamId,
    in_b: ParamId,
    blocks: Vec<ResBlock>,
    out_w: ParamId,
    out_b: ParamId,
    skip: ParamId,
}

impl DurationNet {
    pub fn new(config: DurConfig, rng: &mut Rng) -> Result<Self> {
        if config.hidden == 0 || config.vocab_size == 0 || config.conv_width % 2 == 0 {
            return Err(Error::invalid("duration net needs hidden, vocab > 0 and odd conv width"));
        }
        let h = config.hidden;
        let mut s = ParamStore::new();
        let emb = s.register_normal("dur.emb", &[h, config.vocab_size], 0.3, rng)?;
        let in_w = s.register_normal("dur.in.w", &[h, 1], 0.1, rng)?;
        let in_b = s.register_zeros("dur.in.b", &[h])?;
        let mut blocks = Vec::new();
        for k in 0..config.depth {
            blocks.push(ResBlock::register(&mut s, &format!("dur.block{k}"), h, config.conv_width, rng)?);
        }
        let out_w = s.register_zeros("dur.out.w", &[1, h])?;
        let out_b = s.register_zeros("dur.out.b", &[1])?;
        let skip = s.register_zeros("dur.skip", &[1, 1])?;
        Ok(Self {
            config,
            params: s,
            emb,
            in_w,
            in_b,
            blocks,
            out_w,
            out_b,
            skip,
        })
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        let emb = params.id("dur.emb")?;
        let dims = params.info(emb).dims.clone();
        let mut blocks = Vec::new();
        while params.id(&format!("dur.block{}.conv.w", blocks.len())).is_ok() {
            blocks.push(ResBlock::load(&params, &format!("dur.block{}", blocks.len()))?);
        }
        let config = DurConfig {
            hidden: dims[0],
            depth: blocks.len(),
            conv_width: blocks.first().map(|b| b.width()).unwrap_or(1),
            vocab_size: dims[1],
        };
        Ok(Self {
            config,
            emb,
            in_w: params.id("dur.in.w")?,
            in_b: params.id("dur.in.b")?,
            blocks,
            out_w: params.id("dur.out.w")?,
            out_b: params.id("dur.out.b")?,
            skip: params.id("dur.skip")?,
            params,
        })
    }

    pub fn config(&self) -> &DurConfig {
        &self.config
    }

    /// Make the output the context itself: zero head, unit shortcut.
    pub fn set_identity_shortcut(&mut self) {
        self.params.slice_mut(self.out_w).fill(0.0);
        self.params.slice_mut(self.out_b).fill(0.0);
        self.params.slice_mut(self.skip).fill(1.0);
    }

    /// Packed forward over several samples; returns a `1×ΣN` prediction row.
    pub fn forward_tape(&self, tape: &mut Tape, samples: &[&DurationSample]) -> Result<Var> {
        self.forward_tape_with(tape, &self.params, samples)
    }

    /// Forward pass reading parameters from `p` (same layout as `self.params`).
    pub fn forward_tape_with(&self, tape: &mut Tape, p: &ParamStore, samples: &[&DurationSample]) -> Result<Var> {
        if samples.is_empty() || samples.iter().any(|s| s.is_empty()) {
            return Err(Error::empty("duration forward needs N >= 1"));
        }
        let lens: Vec<usize> = samples.iter().map(|s| s.len()).collect();
        let segs = Rc::new(Segments::from_lengths(&lens));
        let ids: Rc<[usize]> = samples.iter().flat_map(|s| s.phonemes.iter().copied()).collect();
        if let Some(bad) = ids.iter().find(|&&p| p >= self.config.vocab_size) {
            return Err(Error::invalid(format!("phoneme id {bad} outside vocabulary")));
        }
        let ctx: Vec<f64> = samples.iter().flat_map(|s| s.context.iter().copied()).collect();
        let ctx = tape.constant(Matrix::from_vec(1, segs.total(), ctx));

        let emb = tape.param(p, self.emb);
        let in_w = tape.param(p, self.in_w);
        let in_b = tape.param(p, self.in_b);
        let e = tape.gather(emb, ids);
        let c = tape.matmul(in_w, ctx);
        let h = tape.add(e, c);
        let mut h = tape.add_col(h, in_b);
        for block in &self.blocks {
            h = block.apply(tape, p, h, &segs);
        }
        let out_w = tape.param(p, self.out_w);
        let out_b = tape.param(p, self.out_b);
        let skip = tape.param(p, self.skip);
        let y = tape.matmul(out_w, h);
        let y = tape.add_col(y, out_b);
        let shortcut = tape.matmul(skip, ctx);
        let y = tape.add(y, shortcut);
        Ok(tape.name(y, "dur.output"))
    }

    pub fn duration_forward(&self, sample: &DurationSample) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let y = self.forward_tape(&mut tape, &[sample])?;
        tape.check_finite()?;
        Ok(tape.value(y).as_slice().to_vec())
    }

    /// Records the masked MSE over unknown positions of all `samples`.
    pub fn loss_tape(&self, tape: &mut Tape, samples: &[&DurationSample]) -> Result<Var> {
        self.loss_tape_with(tape, &self.params, samples)
    }

    pub fn loss_tape_with(&self, tape: &mut Tape, p: &ParamStore, samples: &[&DurationSample]) -> Result<Var> {
        let unknown: Rc<[bool]> = samples
            .iter()
            .flat_map(|s| s.known.iter().map(|k| !k))
            .collect();
        if !unknown.iter().any(|&u| u) {
            return Err(Error::empty("duration loss needs at least one unknown position"));
        }
        let target: Vec<f64> = samples.iter().flat_map(|s| s.durations.iter().copied()).collect();
        let pred = self.forward_tape_with(tape, p, samples)?;
        let target = Rc::new(Matrix::from_vec(1, target.len(), target));
        tape.masked_mse(pred, target, unknown)
    }

    pub fn duration_loss(&self, sample: &DurationSample) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.loss_tape(&mut tape, &[sample])?;
        tape.check_finite()?;
        Ok(tape.value(l).get(0, 0))
    }
}

/// Mean squared error of `pred` against `sample` durations on unknown positions.
pub fn masked_duration_mse(pred: &[f64], sample: &DurationSample) -> Result<f64> {
    if pred.len() != sample.len() {
        return Err(Error::shape("prediction length differs from sample"));
    }
    let (sum, n) = pred
        .iter()
        .zip(&sample.durations)
        .zip(&sample.known)
        .filter(|(_, &k)| !k)
        .fold((0.0, 0usize), |(s, n), ((p, d), _)| (s + (p - d) * (p - d), n + 1));
    if n == 0 {
        return Err(Error::empty("no unknown positions"));
    }
    Ok(sum / n as f64)
}
