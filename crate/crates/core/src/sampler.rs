//! ODE sampling with classifier-free guidance and prompt clamping.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowmatch::draw_p0;
use crate::model::{FeatureSequence, PhonemeFrames, VectorField, VfBatch, DROPPED_PHONEME};
use crate::numcore::{Matrix, Rng, Segments};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    Midpoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Field evaluations per sample (one branch); midpoint spends two per step.
    pub nfe: usize,
    pub guidance: f64,
    pub solver: Solver,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            nfe: 32,
            guidance: 1.0,
            solver: Solver::Midpoint,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nfe == 0 {
            return Err(Error::invalid("nfe must be >= 1"));
        }
        if self.solver == Solver::Midpoint && self.nfe % 2 == 1 {
            return Err(Error::invalid(format!(
                "midpoint spends two evaluations per step; nfe = {} is odd",
                self.nfe
            )));
        }
        if !(self.guidance.is_finite() && self.guidance >= 0.0) {
            return Err(Error::invalid(format!("guidance {} must be >= 0", self.guidance)));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        match self.solver {
            Solver::Euler => self.nfe,
            Solver::Midpoint => self.nfe / 2,
        }
    }
}

/// Solver states: the initial draw, then one entry per completed step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Matrix>,
    /// Midpoint only: the projected half-step states.
    pub half_states: Vec<Matrix>,
}

/// Integrate from `t = 0` to `t = 1` on a uniform grid. `project` runs on
/// every state the field will see (half steps included) and after each step.
pub fn integrate_with<F, P>(
    mut field: F,
    x_init: Matrix,
    config: &SamplerConfig,
    mut project: P,
    mut trace: Option<&mut Trajectory>,
) -> Result<Matrix>
where
    F: FnMut(&Matrix, f64) -> Result<Matrix>,
    P: FnMut(&mut Matrix),
{
    config.validate()?;
    let n = config.steps();
    let h = 1.0 / n as f64;
    let mut x = x_init;
    project(&mut x);
    if let Some(tr) = trace.as_deref_mut() {
        tr.states.push(x.clone());
    }
    for k in 0..n {
        let t = k as f64 * h;
        let check = |m: &Matrix, what: &str| -> Result<()> {
            if m.is_finite() {
                Ok(())
            } else {
                Err(Error::NonFinite(format!("{what} at solver step {} of {n}", k + 1)))
            }
        };
        match config.solver {
            Solver::Euler => {
                let v = field(&x, t)?;
                check(&v, "field")?;
                x = x.zip_map(&v, |a, b| a + h * b);
            }
            Solver::Midpoint => {
                let v = field(&x, t)?;
                check(&v, "field")?;
                let mut mid = x.zip_map(&v, |a, b| a + 0.5 * h * b);
                project(&mut mid);
                check(&mid, "half step")?;
                if let Some(tr) = trace.as_deref_mut() {
                    tr.half_states.push(mid.clone());
                }
                let v = field(&mid, t + 0.5 * h)?;
                check(&v, "field")?;
                x = x.zip_map(&v, |a, b| a + h * b);
            }
        }
        project(&mut x);
        check(&x, "state")?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.states.push(x.clone());
        }
    }
    Ok(x)
}

/// Plain ODE solve of `dx/dt = field(x, t)` with no projection.
pub fn integrate<F>(field: F, x_init: &FeatureSequence, config: &SamplerConfig) -> Result<FeatureSequence>
where
    F: FnMut(&Matrix, f64) -> Result<Matrix>,
{
    let out = integrate_with(field, x_init.data().clone(), config, |_| {}, None)?;
    FeatureSequence::new(out)
}

/// One prompt-continuation job.
#[derive(Clone, Debug)]
pub struct SynthRequest {
    pub prompt: FeatureSequence,
    /// Phonemes for prompt and generated frames together.
    pub phonemes: PhonemeFrames,
    pub gen_frames: usize,
    pub rng: Rng,
}

/// Packed conditioning shared by every solver step.
struct Packed {
    ctx: Matrix,
    known: Vec<bool>,
    phonemes: Rc<[usize]>,
    dropped: Rc<[usize]>,
    lengths: Vec<usize>,
    segments: Rc<Segments>,
    doubled: Rc<Segments>,
}

impl Packed {
    fn new(reqs: &[SynthRequest]) -> Result<Self> {
        let mut ctxs = Vec::with_capacity(reqs.len());
        let mut known = Vec::new();
        let mut phonemes = Vec::new();
        let mut lengths = Vec::with_capacity(reqs.len());
        for r in reqs {
            let total = r.prompt.frames() + r.gen_frames;
            if r.gen_frames == 0 {
                return Err(Error::invalid("gen_frames must be >= 1"));
            }
            if r.phonemes.len() != total {
                return Err(Error::shape(format!(
                    "{} phoneme frames for {} prompt + {} generated frames",
                    r.phonemes.len(),
                    r.prompt.frames(),
                    r.gen_frames
                )));
            }
            let (ctx, mask) = crate::infill::prompt_context(&r.prompt, r.gen_frames)?;
            ctxs.push(ctx.into_matrix());
            known.extend(mask.flags().iter().map(|m| !m));
            phonemes.extend_from_slice(r.phonemes.ids());
            lengths.push(total);
        }
        let dims: Vec<usize> = ctxs.iter().map(|c| c.rows()).collect();
        if dims.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::shape("prompts differ in feature dimension"));
        }
        let doubled: Vec<usize> = lengths.iter().chain(&lengths).copied().collect();
        Ok(Self {
            ctx: Matrix::hcat(&ctxs.iter().collect::<Vec<_>>()),
            known,
            dropped: vec![DROPPED_PHONEME; phonemes.len()].into(),
            phonemes: phonemes.into(),
            segments: Rc::new(Segments::from_lengths(&lengths)),
            doubled: Rc::new(Segments::from_lengths(&doubled)),
            lengths,
        })
    }

    fn clamp(&self, x: &mut Matrix) {
        for r in 0..x.rows() {
            let src = self.ctx.row(r);
            for (c, v) in x.row_mut(r).iter_mut().enumerate() {
                if self.known[c] {
                    *v = src[c];
                }
            }
        }
    }

    fn guided(&self, net: &dyn VectorField, x: &Matrix, t: f64, alpha: f64) -> Result<Matrix> {
        let n = self.lengths.len();
        if alpha == 0.0 {
            return net.field(&VfBatch {
                x_t: x.clone(),
                x_ctx: self.ctx.clone(),
                phonemes: self.phonemes.clone(),
                t: vec![t; n],
                segments: self.segments.clone(),
            });
        }
        let total = x.cols();
        let ph: Vec<usize> = self.phonemes.iter().chain(self.dropped.iter()).copied().collect();
        let v = net.field(&VfBatch {
            x_t: Matrix::hcat(&[x, x]),
            x_ctx: Matrix::hcat(&[&self.ctx, &Matrix::zeros(x.rows(), total)]),
            phonemes: ph.into(),
            t: vec![t; 2 * n],
            segments: self.doubled.clone(),
        })?;
        let cond = v.cols_range(0, total);
        let uncond = v.cols_range(total, total);
        Ok(combine_guidance(&cond, &uncond, alpha))
    }
}

/// `(1 + α)·v_cond − α·v_uncond`.
pub fn combine_guidance(cond: &Matrix, uncond: &Matrix, alpha: f64) -> Matrix {
    cond.zip_map(uncond, |c, u| (1.0 + alpha) * c - alpha * u)
}

/// Guided field for one sequence; the unconditional branch drops both the
/// phonemes and the context.
pub fn cfg_field(
    net: &dyn VectorField,
    x: &FeatureSequence,
    t: f64,
    a: &PhonemeFrames,
    x_ctx: &FeatureSequence,
    alpha: f64,
) -> Result<FeatureSequence> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::invalid(format!("guidance {alpha} must be >= 0")));
    }
    let single = |ctx: Matrix, ph: Rc<[usize]>| VfBatch {
        x_t: x.data().clone(),
        x_ctx: ctx,
        phonemes: ph,
        t: vec![t],
        segments: Rc::new(Segments::single(x.frames())),
    };
    let cond = net.field(&single(x_ctx.data().clone(), a.ids().into()))?;
    if alpha == 0.0 {
        return FeatureSequence::new(cond);
    }
    let uncond = net.field(&single(
        Matrix::zeros(x.dim(), x.frames()),
        vec![DROPPED_PHONEME; a.len()].into(),
    ))?;
    FeatureSequence::new(combine_guidance(&cond, &uncond, alpha))
}

/// Full prompt+generated matrices for a batch of jobs, integrated jointly.
/// Each job's starting noise comes from its own RNG, so results do not
/// depend on how jobs are grouped.
pub fn synthesize_full(
    net: &dyn VectorField,
    reqs: &[SynthRequest],
    config: &SamplerConfig,
    trace: Option<&mut Trajectory>,
) -> Result<Vec<Matrix>> {
    config.validate()?;
    if reqs.is_empty() {
        return Ok(Vec::new());
    }
    let packed = Packed::new(reqs)?;
    let inits: Vec<Matrix> = reqs
        .iter()
        .zip(&packed.lengths)
        .map(|(r, &len)| draw_p0(r.prompt.dim(), len, &mut r.rng.clone()))
        .collect();
    let x0 = Matrix::hcat(&inits.iter().collect::<Vec<_>>());
    let alpha = config.guidance;
    let out = integrate_with(
        |x, t| packed.guided(net, x, t, alpha),
        x0,
        config,
        |x| packed.clamp(x),
        trace,
    )?;
    let mut at = 0;
    Ok(packed
        .lengths
        .iter()
        .map(|&len| {
            let m = out.cols_range(at, len);
            at += len;
            m
        })
        .collect())
}

/// Generated regions only, one per job.
pub fn synthesize_batch(net: &dyn VectorField, reqs: &[SynthRequest], config: &SamplerConfig) -> Result<Vec<FeatureSequence>> {
    let full = synthesize_full(net, reqs, config, None)?;
    full.into_iter()
        .zip(reqs)
        .map(|(m, r)| FeatureSequence::new(m.cols_range(r.prompt.frames(), r.gen_frames)))
        .collect()
}

/// Continue `prompt` by `gen_frames` frames; returns the generated region.
pub fn synthesize(
    net: &dyn VectorField,
    prompt: &FeatureSequence,
    a: &PhonemeFrames,
    gen_frames: usize,
    config: &SamplerConfig,
    rng: &Rng,
) -> Result<FeatureSequence> {
    let req = SynthRequest {
        prompt: prompt.clone(),
        phonemes: a.clone(),
        gen_frames,
        rng: rng.clone(),
    };
    Ok(synthesize_batch(net, &[req], config)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_accounting() {
        assert_eq!(SamplerConfig::default().steps(), 16);
        let e = SamplerConfig {
            solver: Solver::Euler,
            ..SamplerConfig::default()
        };
        assert_eq!(e.steps(), 32);
        let odd = SamplerConfig {
            nfe: 7,
            ..SamplerConfig::default()
        };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn nan_reports_step() {
        let x = FeatureSequence::new(Matrix::filled(1, 1, 1.0)).unwrap();
        let cfg = SamplerConfig {
            nfe: 4,
            guidance: 0.0,
            solver: Solver::Euler,
        };
        let err = integrate(
            |m, t| Ok(m.map(|v| if t > 0.4 { f64::NAN } else { v })),
            &x,
            &cfg,
        )
        .unwrap_err();
        assert!(err.to_string().contains("solver step 3 of 4"), "{err}");
    }
}
