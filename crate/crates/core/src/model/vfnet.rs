//! Conditional vector-field network `v(x_t; a, x_ctx, t)`.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::blocks::ResBlock;
use super::features::{FeatureSequence, PhonemeFrames};
use crate::error::{Error, Result};
use crate::numcore::{Matrix, ParamId, ParamStore, Rng, Segments, Tape, Var};

pub const TIME_EMBED_DIM: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VfConfig {
    pub feat_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub conv_width: usize,
    pub vocab_size: usize,
}

impl Default for VfConfig {
    fn default() -> Self {
        Self {
            feat_dim: 8,
            hidden: 64,
            depth: 4,
            conv_width: 3,
            vocab_size: 64,
        }
    }
}

impl VfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feat_dim == 0 || self.hidden == 0 || self.vocab_size == 0 {
            return Err(Error::invalid("feat_dim, hidden and vocab_size must be positive"));
        }
        if self.conv_width == 0 || self.conv_width % 2 == 0 {
            return Err(Error::invalid(format!(
                "conv_width must be odd and positive, got {}",
                self.conv_width
            )));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of `t`, `TIME_EMBED_DIM` values: sines then cosines
/// at geometrically spaced frequencies from 1 to 100.
pub fn time_embedding(t: f64) -> [f64; TIME_EMBED_DIM] {
    let half = TIME_EMBED_DIM / 2;
    let mut out = [0.0; TIME_EMBED_DIM];
    for i in 0..half {
        let freq = (i as f64 * (100f64).ln() / (half - 1) as f64).exp();
        out[i] = (freq * t).sin();
        out[half + i] = (freq * t).cos();
    }
    out
}

/// Several sequences packed side by side along the frame axis.
#[derive(Clone, Debug)]
pub struct VfBatch {
    pub x_t: Matrix,
    pub x_ctx: Matrix,
    pub phonemes: Rc<[usize]>,
    pub t: Vec<f64>,
    pub segments: Rc<Segments>,
}

impl VfBatch {
    pub fn single(x_t: &FeatureSequence, t: f64, a: &PhonemeFrames, x_ctx: &FeatureSequence) -> Self {
        Self {
            x_t: x_t.data().clone(),
            x_ctx: x_ctx.data().clone(),
            phonemes: a.ids().into(),
            t: vec![t],
            segments: Rc::new(Segments::single(x_t.frames())),
        }
    }

    fn validate(&self, cfg: &VfConfig) -> Result<()> {
        let total = self.segments.total();
        if self.x_t.shape() != (cfg.feat_dim, total) || self.x_ctx.shape() != (cfg.feat_dim, total) {
            return Err(Error::shape(format!(
                "x_t {:?} / x_ctx {:?}, expected ({}, {total})",
                self.x_t.shape(),
                self.x_ctx.shape(),
                cfg.feat_dim
            )));
        }
        if self.phonemes.len() != total {
            return Err(Error::shape(format!(
                "{} phoneme frames for {total} feature frames",
                self.phonemes.len()
            )));
        }
        if let Some(bad) = self.phonemes.iter().find(|&&p| p >= cfg.vocab_size) {
            return Err(Error::invalid(format!("phoneme id {bad} outside vocabulary")));
        }
        if self.t.len() != self.segments.count() {
            return Err(Error::shape("need one time value per segment"));
        }
        if let Some(t) = self.t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::invalid(format!("t = {t} outside [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct VfIds {
    in_w: ParamId,
    in_b: ParamId,
    phone_emb: ParamId,
    time_w: ParamId,
    time_b: ParamId,
    blocks: Vec<ResBlock>,
    proj_w: ParamId,
    proj_b: ParamId,
}

/// Anything that maps a packed batch to a `D×total` field. Implemented by
/// [`VectorFieldNet`]; tests plug in hand-built fields.
pub trait VectorField {
    fn field(&self, batch: &VfBatch) -> Result<Matrix>;
}

impl VectorField for VectorFieldNet {
    fn field(&self, batch: &VfBatch) -> Result<Matrix> {
        self.forward(batch)
    }
}

/// The vector-field network and its parameters.
#[derive(Clone, Debug)]
pub struct VectorFieldNet {
    config: VfConfig,
    pub params: ParamStore,
    ids: VfIds,
}

impl VectorFieldNet {
    pub fn new(config: VfConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let VfConfig {
            feat_dim: d,
            hidden: h,
            depth,
            conv_width,
            vocab_size,
        } = config;
        let mut s = ParamStore::new();
        let in_w = s.register_normal("vf.in.w", &[h, 2 * d], 1.0 / ((2 * d) as f64).sqrt(), rng)?;
        let in_b = s.register_zeros("vf.in.b", &[h])?;
        let phone_emb = s.register_normal("vf.phone_emb", &[h, vocab_size], 0.3, rng)?;
        let time_w = s.register_normal(
            "vf.time.w",
            &[h, TIME_EMBED_DIM],
            1.0 / (TIME_EMBED_DIM as f64).sqrt(),
            rng,
        )?;
        let time_b = s.register_zeros("vf.time.b", &[h])?;
        let mut blocks = Vec::with_capacity(depth);
        for k in 0..depth {
            blocks.push(ResBlock::register(&mut s, &format!("vf.block{k}"), h, conv_width, rng)?);
        }
        let proj_w = s.register_zeros("vf.proj.w", &[d, h])?;
        let proj_b = s.register_zeros("vf.proj.b", &[d])?;
        Ok(Self {
            config,
            params: s,
            ids: VfIds {
                in_w,
                in_b,
                phone_emb,
                time_w,
                time_b,
                blocks,
                proj_w,
                proj_b,
            },
        })
    }

    /// Rebuild from a parameter store, inferring the configuration from slice shapes.
    pub fn from_params(params: ParamStore) -> Result<Self> {
        let in_w = params.id("vf.in.w")?;
        let phone_emb = params.id("vf.phone_emb")?;
        let dims_in = params.info(in_w).dims.clone();
        let vocab_size = params.info(phone_emb).dims[1];
        let mut blocks = Vec::new();
        while params.id(&format!("vf.block{}.conv.w", blocks.len())).is_ok() {
            blocks.push(ResBlock::load(&params, &format!("vf.block{}", blocks.len()))?);
        }
        let conv_width = blocks.first().map(|b| b.width()).unwrap_or(1);
        let config = VfConfig {
            feat_dim: dims_in[1] / 2,
            hidden: dims_in[0],
            depth: blocks.len(),
            conv_width,
            vocab_size,
        };
        let ids = VfIds {
            in_w,
            in_b: params.id("vf.in.b")?,
            phone_emb,
            time_w: params.id("vf.time.w")?,
            time_b: params.id("vf.time.b")?,
            blocks,
            proj_w: params.id("vf.proj.w")?,
            proj_b: params.id("vf.proj.b")?,
        };
        Ok(Self { config, params, ids })
    }

    pub fn config(&self) -> &VfConfig {
        &self.config
    }

    pub fn phone_emb_id(&self) -> ParamId {
        self.ids.phone_emb
    }

    pub fn proj_ids(&self) -> (ParamId, ParamId) {
        (self.ids.proj_w, self.ids.proj_b)
    }

    /// Record the forward pass for a packed batch; returns the `D×total` field.
    pub fn forward_tape(&self, tape: &mut Tape, batch: &VfBatch) -> Result<Var> {
        self.forward_tape_with(tape, &self.params, batch)
    }

    /// Forward pass reading parameters from `store` (same layout as `self.params`).
    pub fn forward_tape_with(&self, tape: &mut Tape, store: &ParamStore, batch: &VfBatch) -> Result<Var> {
        batch.validate(&self.config)?;
        let segs = &batch.segments;
        let ids = &self.ids;

        let inp = Matrix::vcat(&[&batch.x_t, &batch.x_ctx]);
        let inp = tape.constant(inp);
        let in_w = tape.param(store, ids.in_w);
        let in_b = tape.param(store, ids.in_b);
        let h = tape.matmul(in_w, inp);
        let mut h = tape.add_col(h, in_b);

        let emb = tape.param(store, ids.phone_emb);
        let ph = tape.gather(emb, batch.phonemes.clone());
        h = tape.add(h, ph);

        let mut temb = Matrix::zeros(TIME_EMBED_DIM, batch.t.len());
        for (s, &t) in batch.t.iter().enumerate() {
            temb.set_col(s, &time_embedding(t));
        }
        let temb = tape.constant(temb);
        let time_w = tape.param(store, ids.time_w);
        let time_b = tape.param(store, ids.time_b);
        let tproj = tape.matmul(time_w, temb);
        let tproj = tape.add_col(tproj, time_b);
        let tproj = tape.broadcast(tproj, segs);
        h = tape.add(h, tproj);

        for block in &ids.blocks {
            h = block.apply(tape, store, h, segs);
        }

        let proj_w = tape.param(store, ids.proj_w);
        let proj_b = tape.param(store, ids.proj_b);
        let out = tape.matmul(proj_w, h);
        let out = tape.add_col(out, proj_b);
        Ok(tape.name(out, "vf.output"))
    }

    /// Evaluate the field for a packed batch without keeping the tape.
    pub fn forward(&self, batch: &VfBatch) -> Result<Matrix> {
        let mut tape = Tape::new();
        let out = self.forward_tape(&mut tape, batch)?;
        tape.check_finite()?;
        Ok(tape.value(out).clone())
    }

    /// Field for one sequence.
    pub fn vf_forward(
        &self,
        x_t: &FeatureSequence,
        t: f64,
        a: &PhonemeFrames,
        x_ctx: &FeatureSequence,
    ) -> Result<FeatureSequence> {
        if !x_t.same_shape(x_ctx) {
            return Err(Error::shape("x_t and x_ctx differ in shape"));
        }
        if a.len() != x_t.frames() {
            return Err(Error::shape(format!(
                "{} phoneme frames for {} feature frames",
                a.len(),
                x_t.frames()
            )));
        }
        FeatureSequence::new(self.forward(&VfBatch::single(x_t, t, a, x_ctx))?)
    }
}
