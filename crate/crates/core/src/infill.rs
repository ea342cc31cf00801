//! Mask sampling and context construction for infilling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeatureSequence;
use crate::numcore::{Matrix, Rng};

pub const DEFAULT_MIN_FRAMES: usize = 5;

/// Number of masked segments per utterance: inclusive range, uniform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentCount {
    pub min: usize,
    pub max: usize,
}

impl SegmentCount {
    pub fn fixed(n: usize) -> Self {
        Self { min: n, max: n }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskPolicy {
    pub n_segments: SegmentCount,
    pub min_frames: usize,
    pub max_total_fraction: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            n_segments: SegmentCount { min: 1, max: 3 },
            min_frames: DEFAULT_MIN_FRAMES,
            max_total_fraction: 0.7,
        }
    }
}

impl MaskPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.min_frames == 0 {
            return Err(Error::invalid("min_frames must be >= 1"));
        }
        if self.n_segments.min == 0 || self.n_segments.min > self.n_segments.max {
            return Err(Error::invalid(format!(
                "segment count range {}..={} must be non-empty and start at >= 1",
                self.n_segments.min, self.n_segments.max
            )));
        }
        if !(self.max_total_fraction > 0.0 && self.max_total_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "max_total_fraction {} outside (0, 1]",
                self.max_total_fraction
            )));
        }
        Ok(())
    }

    fn budget(&self, frames: usize) -> usize {
        ((self.max_total_fraction * frames as f64) + 1e-9).floor() as usize
    }

    /// Why `n` segments cannot be placed in `frames`, if they cannot.
    fn infeasibility(&self, frames: usize, n: usize) -> Option<String> {
        let need = n * self.min_frames + n.saturating_sub(1);
        if need > frames {
            return Some(format!(
                "n·min_frames + (n-1) = {need} exceeds T = {frames} (n = {n}, min_frames = {})",
                self.min_frames
            ));
        }
        let budget = self.budget(frames);
        if n * self.min_frames > budget {
            return Some(format!(
                "n·min_frames = {} exceeds max_total_fraction·T = {budget} (n = {n})",
                n * self.min_frames
            ));
        }
        None
    }
}

/// Frame flags; `true` marks a frame to generate.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FrameMask {
    flags: Vec<bool>,
}

impl FrameMask {
    pub fn new(flags: Vec<bool>) -> Self {
        Self { flags }
    }

    pub fn none(frames: usize) -> Self {
        Self::new(vec![false; frames])
    }

    pub fn all(frames: usize) -> Self {
        Self::new(vec![true; frames])
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    /// Maximal runs of masked frames as `(start, len)`.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < self.flags.len() {
            if self.flags[i] {
                let start = i;
                while i < self.flags.len() && self.flags[i] {
                    i += 1;
                }
                out.push((start, i - start));
            } else {
                i += 1;
            }
        }
        out
    }
}

/// Draw a mask of non-adjacent segments.
///
/// Segment lengths are drawn left to right, each uniform between `min_frames`
/// and what the remaining budget allows; the unmasked frames are then split
/// into gaps by a uniform stars-and-bars draw with every inner gap at least
/// one frame. When the policy allows a range of segment counts, the count is
/// drawn uniformly among the feasible ones.
pub fn sample_mask(frames: usize, policy: &MaskPolicy, rng: &mut Rng) -> Result<FrameMask> {
    policy.validate()?;
    let feasible: Vec<usize> = (policy.n_segments.min..=policy.n_segments.max)
        .filter(|&n| policy.infeasibility(frames, n).is_none())
        .collect();
    if feasible.is_empty() {
        let why = policy
            .infeasibility(frames, policy.n_segments.min)
            .unwrap_or_default();
        return Err(Error::Infeasible(why));
    }
    let n = feasible[rng.int_in(0, feasible.len() - 1)];
    let min = policy.min_frames;
    let cap = policy.budget(frames).min(frames - (n - 1));

    let mut lengths = Vec::with_capacity(n);
    let mut left = cap;
    for i in 0..n {
        let reserve = (n - i - 1) * min;
        let len = rng.int_in(min, left - reserve);
        lengths.push(len);
        left -= len;
    }
    let masked: usize = lengths.iter().sum();

    // free frames beyond the mandatory single-frame separators
    let spare = frames - masked - (n - 1);
    let gaps = stars_and_bars(spare, n + 1, rng);

    let mut flags = vec![false; frames];
    let mut at = gaps[0];
    for (i, &len) in lengths.iter().enumerate() {
        flags[at..at + len].fill(true);
        at += len;
        if i + 1 < n {
            at += 1 + gaps[i + 1];
        }
    }
    Ok(FrameMask::new(flags))
}

/// Uniform composition of `total` into `bins` non-negative parts.
fn stars_and_bars(total: usize, bins: usize, rng: &mut Rng) -> Vec<usize> {
    // choose bins-1 bar positions among total+bins-1 slots (partial Fisher-Yates)
    let slots = total + bins - 1;
    let mut pool: Vec<usize> = (0..slots).collect();
    for i in 0..bins - 1 {
        let j = rng.int_in(i, slots - 1);
        pool.swap(i, j);
    }
    let mut bars: Vec<usize> = pool[..bins - 1].to_vec();
    bars.sort_unstable();
    let mut out = Vec::with_capacity(bins);
    let mut prev = 0usize;
    for (k, &b) in bars.iter().enumerate() {
        out.push(b - prev - if k == 0 { 0 } else { 1 });
        prev = b;
    }
    out.push(slots - prev - if bins > 1 { 1 } else { 0 });
    if bins == 1 {
        out[0] = total;
    }
    out
}

/// Zero the masked frames of `source`.
pub fn build_context(source: &FeatureSequence, mask: &FrameMask) -> Result<FeatureSequence> {
    Ok(FeatureSequence::new(zero_masked(source.data(), mask)?)?)
}

pub(crate) fn zero_masked(source: &Matrix, mask: &FrameMask) -> Result<Matrix> {
    if mask.len() != source.cols() {
        return Err(Error::shape(format!(
            "mask has {} frames, source has {}",
            mask.len(),
            source.cols()
        )));
    }
    let mut out = source.clone();
    for r in 0..out.rows() {
        for (v, &m) in out.row_mut(r).iter_mut().zip(mask.flags()) {
            if m {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Context for prompt-based generation: the prompt followed by `gen_frames`
/// zero frames, and a mask flagging exactly the appended frames.
pub fn prompt_context(prompt: &FeatureSequence, gen_frames: usize) -> Result<(FeatureSequence, FrameMask)> {
    if gen_frames == 0 {
        return Err(Error::invalid("gen_frames must be >= 1"));
    }
    let p = prompt.frames();
    let zeros = Matrix::zeros(prompt.dim(), gen_frames);
    let ctx = Matrix::hcat(&[prompt.data(), &zeros]);
    let mut flags = vec![false; p + gen_frames];
    flags[p..].fill(true);
    Ok((FeatureSequence::new(ctx)?, FrameMask::new(flags)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn policy(n: usize, min: usize, frac: f64) -> MaskPolicy {
        MaskPolicy {
            n_segments: SegmentCount::fixed(n),
            min_frames: min,
            max_total_fraction: frac,
        }
    }

    #[test]
    fn forced_full_span() {
        let mut rng = Rng::new(0, 0);
        for _ in 0..20 {
            let m = sample_mask(5, &policy(1, 5, 1.0), &mut rng).unwrap();
            assert_eq!(m.flags(), &[true; 5]);
        }
    }

    #[test]
    fn default_min_frames() {
        assert_eq!(MaskPolicy::default().min_frames, 5);
    }

    #[test]
    fn infeasible_names_the_bound() {
        let mut rng = Rng::new(0, 0);
        let err = sample_mask(10, &policy(2, 5, 1.0), &mut rng).unwrap_err();
        assert!(matches!(&err, Error::Infeasible(m) if m.contains("exceeds T")), "{err}");
        let err = sample_mask(12, &policy(2, 5, 0.7), &mut rng).unwrap_err();
        assert!(matches!(&err, Error::Infeasible(m) if m.contains("max_total_fraction")), "{err}");
    }

    #[test]
    fn range_falls_back_to_feasible_counts() {
        let mut rng = Rng::new(3, 0);
        let p = MaskPolicy {
            n_segments: SegmentCount { min: 1, max: 3 },
            min_frames: 5,
            max_total_fraction: 0.7,
        };
        // T = 12: only n = 1 fits under the 0.7 budget
        for _ in 0..100 {
            assert_eq!(sample_mask(12, &p, &mut rng).unwrap().segments().len(), 1);
        }
    }

    #[test]
    fn stars_and_bars_sums() {
        let mut rng = Rng::new(9, 9);
        for total in 0..6 {
            for bins in 1..5 {
                let g = stars_and_bars(total, bins, &mut rng);
                assert_eq!(g.len(), bins);
                assert_eq!(g.iter().sum::<usize>(), total);
            }
        }
    }

    #[test]
    fn context_splice() {
        let src = FeatureSequence::new(Matrix::from_fn(2, 4, |r, c| (r * 4 + c + 1) as f64)).unwrap();
        let all_off = build_context(&src, &FrameMask::none(4)).unwrap();
        assert_eq!(all_off, src);
        let all_on = build_context(&src, &FrameMask::all(4)).unwrap();
        assert_eq!(all_on.data(), &Matrix::zeros(2, 4));
        assert!(build_context(&src, &FrameMask::none(3)).is_err());
    }

    #[test]
    fn prompt_context_layout() {
        let prompt = FeatureSequence::new(Matrix::filled(2, 4, 1.5)).unwrap();
        let (ctx, mask) = prompt_context(&prompt, 6).unwrap();
        assert_eq!(ctx.data().shape(), (2, 10));
        assert_eq!(ctx.data().cols_range(0, 4), *prompt.data());
        assert_eq!(ctx.data().cols_range(4, 6), Matrix::zeros(2, 6));
        assert_eq!(mask.segments(), vec![(4, 6)]);

        let (_, one) = prompt_context(&prompt, 1).unwrap();
        assert_eq!(one.masked_count(), 1);
        assert!(one.flags()[4]);
        assert!(prompt_context(&prompt, 0).is_err());
    }
}
