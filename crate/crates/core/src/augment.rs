//! Noise and secondary-speaker mixing at exact overlap SNRs, the
//! pre-training / fine-tuning corruption policies, and a spectral-gate
//! enhancer used as the speech-enhancement baseline.
//!
//! Everything works in the feature domain. Power is the mean of squared
//! entries over the overlap region.

use std::f64::consts::FRAC_1_SQRT_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeatureSequence;
use crate::numcore::{Matrix, Rng};

/// Inclusive SNR range in dB.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnrRange {
    pub min_db: f64,
    pub max_db: f64,
}

impl SnrRange {
    pub const fn new(min_db: f64, max_db: f64) -> Self {
        Self { min_db, max_db }
    }

    pub fn draw(&self, rng: &mut Rng) -> f64 {
        rng.uniform_in(self.min_db, self.max_db)
    }

    pub fn contains(&self, snr_db: f64) -> bool {
        snr_db >= self.min_db && snr_db <= self.max_db
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub p_noise_pre: f64,
    pub p_spk_pre: f64,
    pub p_noise_ft: f64,
    pub snr_pre: SnrRange,
    pub snr_spk: SnrRange,
    pub snr_ft: SnrRange,
    pub max_noise_fraction: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            p_noise_pre: 0.5,
            p_spk_pre: 0.0,
            p_noise_ft: 0.5,
            snr_pre: SnrRange::new(0.0, 20.0),
            snr_spk: SnrRange::new(0.0, 10.0),
            snr_ft: SnrRange::new(-5.0, 20.0),
            max_noise_fraction: 0.5,
        }
    }
}

impl AugmentPolicy {
    /// No corruption at any stage.
    pub fn clean() -> Self {
        Self {
            p_noise_pre: 0.0,
            p_spk_pre: 0.0,
            p_noise_ft: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_noise_pre", self.p_noise_pre),
            ("p_spk_pre", self.p_spk_pre),
            ("p_noise_ft", self.p_noise_ft),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.p_noise_pre + self.p_spk_pre > 1.0 + 1e-12 {
            return Err(Error::invalid(
                "p_noise_pre + p_spk_pre must not exceed 1 (events are exclusive)",
            ));
        }
        for (name, r) in [("snr_pre", self.snr_pre), ("snr_spk", self.snr_spk), ("snr_ft", self.snr_ft)] {
            if !(r.min_db.is_finite() && r.max_db.is_finite() && r.min_db <= r.max_db) {
                return Err(Error::invalid(format!("{name} range is empty")));
            }
        }
        if !(self.max_noise_fraction > 0.0 && self.max_noise_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "max_noise_fraction {} outside (0, 1]",
                self.max_noise_fraction
            )));
        }
        Ok(())
    }
}

/// A noise excerpt in the feature domain.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseClip {
    data: Matrix,
    pub source_id: usize,
}

impl NoiseClip {
    pub fn new(data: Matrix, source_id: usize) -> Result<Self> {
        if data.cols() == 0 || data.rows() == 0 {
            return Err(Error::invalid("noise clip must have at least one frame"));
        }
        if power(&data) <= 0.0 {
            return Err(Error::invalid("noise clip has zero power"));
        }
        Ok(Self { data, source_id })
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn frames(&self) -> usize {
        self.data.cols()
    }

    /// Frames `start..start+len`.
    pub fn window(&self, start: usize, len: usize) -> Result<NoiseClip> {
        if len == 0 || start + len > self.frames() {
            return Err(Error::invalid(format!(
                "window {start}..{} outside clip of {} frames",
                start + len,
                self.frames()
            )));
        }
        NoiseClip::new(self.data.cols_range(start, len), self.source_id)
    }
}

/// Mean squared entry.
pub fn power(m: &Matrix) -> f64 {
    if m.is_empty() {
        0.0
    } else {
        m.sum_sq() / m.len() as f64
    }
}

pub fn snr_db(signal_power: f64, noise_power: f64) -> f64 {
    10.0 * (signal_power / noise_power).log10()
}

/// Gain that puts `noise_power·g²` exactly `snr_db` below `speech_power`.
pub fn snr_gain(speech_power: f64, noise_power: f64, snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        return 0.0;
    }
    (speech_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// Record of one mixing operation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixRecord {
    pub snr_db: f64,
    pub offset: usize,
    pub len: usize,
    pub gain: f64,
}

/// Add `noise` to `speech` starting at frame `offset`, scaled so the
/// overlap SNR equals `snr_db`.
pub fn mix_at_snr(
    speech: &FeatureSequence,
    noise: &NoiseClip,
    snr_db: f64,
    offset: usize,
) -> Result<(FeatureSequence, MixRecord)> {
    let len = noise.frames();
    if noise.data.rows() != speech.dim() {
        return Err(Error::shape(format!(
            "noise has {} dims, speech has {}",
            noise.data.rows(),
            speech.dim()
        )));
    }
    if offset + len > speech.frames() {
        return Err(Error::invalid(format!(
            "overlap {offset}..{} outside {} speech frames",
            offset + len,
            speech.frames()
        )));
    }
    if snr_db.is_nan() {
        return Err(Error::invalid("snr_db is NaN"));
    }
    let overlap = speech.data().cols_range(offset, len);
    let ps = power(&overlap);
    let pn = power(&noise.data);
    if pn <= 0.0 {
        return Err(Error::invalid("noise has zero power"));
    }
    if ps <= 0.0 {
        return Err(Error::invalid("speech has zero power over the overlap"));
    }
    let gain = snr_gain(ps, pn, snr_db);
    let mut out = speech.data().clone();
    for r in 0..out.rows() {
        let dst = &mut out.row_mut(r)[offset..offset + len];
        for (d, n) in dst.iter_mut().zip(noise.data.row(r)) {
            *d += gain * n;
        }
    }
    Ok((
        FeatureSequence::new(out)?,
        MixRecord {
            snr_db,
            offset,
            len,
            gain,
        },
    ))
}

/// Random excerpt no longer than `floor(max_fraction·frames)` plus a random
/// placement offset within an utterance of `frames` frames.
pub fn crop_noise(noise: &NoiseClip, frames: usize, max_fraction: f64, rng: &mut Rng) -> Result<(NoiseClip, usize)> {
    if frames < 2 {
        return Err(Error::invalid("crop_noise needs T >= 2"));
    }
    let cap = ((max_fraction * frames as f64) + 1e-9).floor() as usize;
    if cap == 0 {
        return Err(Error::invalid(format!(
            "floor({max_fraction}·{frames}) = 0 leaves no room for noise"
        )));
    }
    let len = rng.int_in(1, cap.min(noise.frames()));
    let start = rng.int_in(0, noise.frames() - len);
    let offset = rng.int_in(0, frames - len);
    Ok((noise.window(start, len)?, offset))
}

/// Mix a cropped excerpt of `secondary` into `primary` at a uniform SNR in `snr`.
pub fn mix_secondary_speaker(
    primary: &FeatureSequence,
    secondary: &FeatureSequence,
    snr: SnrRange,
    max_fraction: f64,
    rng: &mut Rng,
) -> Result<(FeatureSequence, MixRecord)> {
    let clip = NoiseClip::new(secondary.data().clone(), usize::MAX)?;
    let (cropped, offset) = crop_noise(&clip, primary.frames(), max_fraction, rng)?;
    let snr_db = snr.draw(rng);
    mix_at_snr(primary, &cropped, snr_db, offset)
}

/// What the policy did to one sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AugmentEvent {
    Clean,
    Noise(MixRecord),
    Speaker(MixRecord),
}

impl AugmentEvent {
    pub fn is_corrupted(&self) -> bool {
        !matches!(self, AugmentEvent::Clean)
    }
}

fn pick_clip<'a>(bank: &'a [NoiseClip], rng: &mut Rng) -> Result<&'a NoiseClip> {
    if bank.is_empty() {
        return Err(Error::empty("noise bank is empty"));
    }
    Ok(&bank[rng.int_in(0, bank.len() - 1)])
}

/// Pre-training corruption of the context source. One uniform draw picks
/// noise (`p_noise_pre`), secondary speaker (`p_spk_pre`) or nothing; the
/// event's own draws come from derived streams, so a zero-probability event
/// never perturbs the others.
pub fn pretrain_corrupt(
    clean: &FeatureSequence,
    policy: &AugmentPolicy,
    bank: &[NoiseClip],
    secondary: Option<&FeatureSequence>,
    rng: &Rng,
) -> Result<(FeatureSequence, AugmentEvent)> {
    let u = rng.derive(0).uniform();
    if u < policy.p_noise_pre {
        let mut r = rng.derive(1);
        let clip = pick_clip(bank, &mut r)?;
        let (cropped, offset) = crop_noise(clip, clean.frames(), policy.max_noise_fraction, &mut r)?;
        let snr = policy.snr_pre.draw(&mut r);
        let (mixed, rec) = mix_at_snr(clean, &cropped, snr, offset)?;
        return Ok((mixed, AugmentEvent::Noise(rec)));
    }
    if u < policy.p_noise_pre + policy.p_spk_pre {
        let other = secondary.ok_or_else(|| Error::invalid("secondary speaker requested but none supplied"))?;
        let mut r = rng.derive(2);
        let (mixed, rec) = mix_secondary_speaker(clean, other, policy.snr_spk, policy.max_noise_fraction, &mut r)?;
        return Ok((mixed, AugmentEvent::Speaker(rec)));
    }
    Ok((clean.clone(), AugmentEvent::Clean))
}

/// Fine-tuning corruption: with probability `p_noise_ft`, noise spanning the
/// whole utterance at an SNR drawn from `snr_ft`.
pub fn finetune_corrupt(
    clean: &FeatureSequence,
    policy: &AugmentPolicy,
    bank: &[NoiseClip],
    rng: &Rng,
) -> Result<(FeatureSequence, AugmentEvent)> {
    if rng.derive(0).uniform() >= policy.p_noise_ft {
        return Ok((clean.clone(), AugmentEvent::Clean));
    }
    let mut r = rng.derive(1);
    let clip = pick_clip(bank, &mut r)?;
    let t = clean.frames();
    if clip.frames() < t {
        return Err(Error::invalid(format!(
            "noise clip of {} frames is shorter than the {t}-frame utterance",
            clip.frames()
        )));
    }
    let start = r.int_in(0, clip.frames() - t);
    let window = clip.window(start, t)?;
    let snr = policy.snr_ft.draw(&mut r);
    let (mixed, rec) = mix_at_snr(clean, &window, snr, 0)?;
    Ok((mixed, AugmentEvent::Noise(rec)))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Soft-threshold every entry toward zero by `10^(gate_db/20)` times its
/// dimension's noise floor. The floor is the median frame-to-frame change
/// over `sqrt(2)`: held phonemes barely move, noise does, so speech dims get
/// a low floor and noisy dims a high one.
pub fn spectral_gate_enhance(noisy: &FeatureSequence, gate_db: f64) -> Result<FeatureSequence> {
    if noisy.frames() < 3 {
        return Err(Error::invalid("spectral gate needs at least 3 frames"));
    }
    if !gate_db.is_finite() {
        return Err(Error::invalid("gate_db must be finite"));
    }
    let k = 10f64.powf(gate_db / 20.0);
    let mut out = noisy.data().clone();
    for r in 0..out.rows() {
        let mut steps: Vec<f64> = out.row(r).windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        let thr = k * median(&mut steps) * FRAC_1_SQRT_2;
        for v in out.row_mut(r) {
            let m = (v.abs() - thr).max(0.0);
            *v = v.signum() * m;
        }
    }
    FeatureSequence::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: usize, cols: usize, f: impl FnMut(usize, usize) -> f64) -> FeatureSequence {
        FeatureSequence::new(Matrix::from_fn(rows, cols, f)).unwrap()
    }

    #[test]
    fn zero_db_equalises_power() {
        let speech = seq(2, 6, |r, c| 1.0 + (r + c) as f64);
        let noise = NoiseClip::new(Matrix::from_fn(2, 3, |r, c| ((r * 3 + c) as f64).sin() + 0.3), 0).unwrap();
        let (mixed, rec) = mix_at_snr(&speech, &noise, 0.0, 2).unwrap();
        let ps = power(&speech.data().cols_range(2, 3));
        let added = mixed.data().cols_range(2, 3).zip_map(&speech.data().cols_range(2, 3), |a, b| a - b);
        assert!((power(&added) - ps).abs() < 1e-12);
        assert_eq!(mixed.data().cols_range(0, 2), speech.data().cols_range(0, 2));
        assert_eq!(mixed.data().cols_range(5, 1), speech.data().cols_range(5, 1));
        assert_eq!(rec.len, 3);
    }

    #[test]
    fn gain_for_twenty_db() {
        assert!((snr_gain(1.0, 4.0, 20.0) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn infinite_snr_is_passthrough() {
        let speech = seq(2, 4, |r, c| (r + c) as f64 + 1.0);
        let noise = NoiseClip::new(Matrix::filled(2, 4, 3.0), 0).unwrap();
        let (mixed, rec) = mix_at_snr(&speech, &noise, f64::INFINITY, 0).unwrap();
        assert_eq!(rec.gain, 0.0);
        assert_eq!(mixed, speech);
        let (near, _) = mix_at_snr(&speech, &noise, 200.0, 0).unwrap();
        assert!(near.data().zip_map(speech.data(), |a, b| (a - b).abs()).max_abs() < 1e-9);
    }

    #[test]
    fn mixing_errors() {
        let speech = seq(2, 4, |_, _| 1.0);
        let noise = NoiseClip::new(Matrix::filled(2, 3, 1.0), 0).unwrap();
        assert!(mix_at_snr(&speech, &noise, 0.0, 2).is_err());
        assert!(NoiseClip::new(Matrix::zeros(2, 3), 0).is_err());
        let silent = seq(2, 4, |_, _| 0.0);
        assert!(mix_at_snr(&silent, &noise, 0.0, 0).is_err());
    }

    #[test]
    fn crop_lengths() {
        let clip = NoiseClip::new(Matrix::filled(1, 50, 1.0), 0).unwrap();
        let mut rng = Rng::new(5, 5);
        for _ in 0..200 {
            let (c, off) = crop_noise(&clip, 10, 0.5, &mut rng).unwrap();
            assert!((1..=5).contains(&c.frames()));
            assert!(off + c.frames() <= 10);
        }
        for _ in 0..20 {
            let (c, _) = crop_noise(&clip, 2, 0.5, &mut rng).unwrap();
            assert_eq!(c.frames(), 1);
        }
        assert!(crop_noise(&clip, 3, 0.2, &mut rng).is_err());
        assert!(crop_noise(&clip, 1, 0.5, &mut rng).is_err());
    }

    #[test]
    fn secondary_at_zero_db_doubles_with_cross_term() {
        let primary = seq(3, 8, |r, c| 1.0 + 0.1 * r as f64 + 0.05 * c as f64);
        let mut rng = Rng::new(1, 2);
        let (mixed, rec) =
            mix_secondary_speaker(&primary, &primary, SnrRange::new(0.0, 0.0), 0.5, &mut rng).unwrap();
        let over = primary.data().cols_range(rec.offset, rec.len);
        let got = power(&mixed.data().cols_range(rec.offset, rec.len));
        let added = mixed.data().cols_range(rec.offset, rec.len).zip_map(&over, |a, b| a - b);
        let cross = 2.0 * over.zip_map(&added, |a, b| a * b).sum() / over.len() as f64;
        let want = power(&over) + power(&added) + cross;
        assert!((got - want).abs() < 1e-12);
        assert!((power(&added) - power(&over)).abs() < 1e-12);
    }

    #[test]
    fn spectral_gate_cases() {
        // floor is zero when most frames are silent; a gate below every magnitude is a no-op
        let clean = seq(2, 5, |r, c| if c < 3 { 0.0 } else { 1.0 + r as f64 });
        assert_eq!(spectral_gate_enhance(&clean, 0.0).unwrap(), clean);
        // alternating sign: every step is 0.8, floor 0.566 swallows all of it
        let floor = seq(2, 6, |r, c| if (r + c) % 2 == 0 { 0.4 } else { -0.4 });
        assert!(spectral_gate_enhance(&floor, 0.0).unwrap().data().max_abs() < 1e-15);
        assert!(spectral_gate_enhance(&seq(2, 2, |_, _| 1.0), 0.0).is_err());
    }

    #[test]
    fn policy_validation() {
        assert!(AugmentPolicy::default().validate().is_ok());
        let bad = AugmentPolicy {
            p_noise_pre: 0.7,
            p_spk_pre: 0.5,
            ..AugmentPolicy::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentPolicy {
            snr_ft: SnrRange::new(5.0, -5.0),
            ..AugmentPolicy::default()
        };
        assert!(bad.validate().is_err());
    }
}
