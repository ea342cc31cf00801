//! Residual frame-wise block shared by both networks.
//!
//! `h ← h + W_out · silu(W_conv · unfold(h) + b_conv + W_pool · mean(h)) + b_out`
//!
//! `mean(h)` is taken per packed segment and broadcast back, which gives every
//! frame a view of the whole utterance while keeping the block
//! permutation-equivariant when the convolution width is 1.

use std::rc::Rc;

use crate::error::Result;
use crate::numcore::{ParamId, ParamStore, Rng, Segments, Tape, Var};

#[derive(Clone, Debug)]
pub(crate) struct ResBlock {
    width: usize,
    conv_w: ParamId,
    conv_b: ParamId,
    pool_w: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl ResBlock {
    pub(crate) fn register(
        store: &mut ParamStore,
        prefix: &str,
        hidden: usize,
        width: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let h = hidden;
        let conv_std = 1.0 / ((h * width) as f64).sqrt();
        let lin_std = 1.0 / (h as f64).sqrt();
        Ok(Self {
            width,
            conv_w: store.register_normal(&format!("{prefix}.conv.w"), &[h, h * width], conv_std, rng)?,
            conv_b: store.register_zeros(&format!("{prefix}.conv.b"), &[h])?,
            pool_w: store.register_normal(&format!("{prefix}.pool.w"), &[h, h], 0.5 * lin_std, rng)?,
            out_w: store.register_normal(&format!("{prefix}.out.w"), &[h, h], 0.5 * lin_std, rng)?,
            out_b: store.register_zeros(&format!("{prefix}.out.b"), &[h])?,
        })
    }

    pub(crate) fn load(store: &ParamStore, prefix: &str) -> Result<Self> {
        let conv_w = store.id(&format!("{prefix}.conv.w"))?;
        let dims = &store.info(conv_w).dims;
        let width = dims[1] / dims[0].max(1);
        Ok(Self {
            width,
            conv_w,
            conv_b: store.id(&format!("{prefix}.conv.b"))?,
            pool_w: store.id(&format!("{prefix}.pool.w"))?,
            out_w: store.id(&format!("{prefix}.out.w"))?,
            out_b: store.id(&format!("{prefix}.out.b"))?,
        })
    }

    pub(crate) fn width(&self) -> usize {
        self.width
    }

    pub(crate) fn apply(&self, tape: &mut Tape, store: &ParamStore, h: Var, segs: &Rc<Segments>) -> Var {
        let conv_w = tape.param(store, self.conv_w);
        let conv_b = tape.param(store, self.conv_b);
        let pool_w = tape.param(store, self.pool_w);
        let out_w = tape.param(store, self.out_w);
        let out_b = tape.param(store, self.out_b);

        let cols = tape.unfold(h, self.width, segs);
        let local = tape.matmul(conv_w, cols);
        let local = tape.add_col(local, conv_b);
        let pooled = tape.seg_mean(h, segs);
        let pooled = tape.matmul(pool_w, pooled);
        let pooled = tape.broadcast(pooled, segs);
        let pre = tape.add(local, pooled);
        let act = tape.silu(pre);
        let delta = tape.matmul(out_w, act);
        let delta = tape.add_col(delta, out_b);
        tape.add(h, delta)
    }
}
