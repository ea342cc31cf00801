//! Pre-training corpus filtering: speaker-change rejection, then a quality
//! threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeatureSequence;
use crate::synthworld::SynthUtterance;

pub const SCORE_MIN: f64 = 1.0;
pub const SCORE_MAX: f64 = 5.0;
pub const HISTOGRAM_BINS: usize = 20;

/// Estimated SNR that maps to the bottom / top of the score range.
const SNR_FLOOR_DB: f64 = -10.0;
const SNR_CEIL_DB: f64 = 30.0;

/// Quality estimator with a declared codomain.
pub trait QualityScorer: Sync {
    fn score(&self, features: &FeatureSequence) -> f64;

    fn range(&self) -> (f64, f64) {
        (SCORE_MIN, SCORE_MAX)
    }
}

/// Default scorer: SNR estimated against the mean-frame direction.
///
/// Clean synthetic speech is one timbre direction scaled per frame by a
/// positive amplitude, so its energy lies along the mean frame. Energy
/// orthogonal to that direction is treated as the noise floor.
#[derive(Clone, Copy, Debug, Default)]
pub struct ProxyScorer;

impl QualityScorer for ProxyScorer {
    fn score(&self, features: &FeatureSequence) -> f64 {
        proxy_quality_score(features)
    }
}

/// `(energy along the mean-frame direction, residual energy)`.
pub fn speech_noise_split(features: &FeatureSequence) -> (f64, f64) {
    let x = features.data();
    let mean: Vec<f64> = (0..x.rows()).map(|r| x.row(r).iter().sum::<f64>()).collect();
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    let total = x.sum_sq();
    if norm == 0.0 || !norm.is_finite() {
        return (0.0, total);
    }
    let along: f64 = (0..x.cols())
        .map(|c| {
            let p: f64 = (0..x.rows()).map(|r| mean[r] * x.get(r, c)).sum::<f64>() / norm;
            p * p
        })
        .sum();
    let along = along.min(total);
    (along, (total - along).max(0.0))
}

/// Estimated SNR in dB; `+inf` when nothing lies off the mean direction.
pub fn estimated_snr_db(features: &FeatureSequence) -> f64 {
    let (speech, residual) = speech_noise_split(features);
    if speech <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if residual <= 0.0 {
        return f64::INFINITY;
    }
    10.0 * (speech / residual).log10()
}

/// Map the estimated SNR linearly from [-10, 30] dB onto [1, 5].
/// An all-zero input scores the minimum.
pub fn proxy_quality_score(features: &FeatureSequence) -> f64 {
    let snr = estimated_snr_db(features);
    if snr.is_nan() {
        return SCORE_MIN;
    }
    let frac = (snr - SNR_FLOOR_DB) / (SNR_CEIL_DB - SNR_FLOOR_DB);
    (SCORE_MIN + frac * (SCORE_MAX - SCORE_MIN)).clamp(SCORE_MIN, SCORE_MAX)
}

/// Oracle speaker-change detector reading generator provenance.
pub fn detect_speaker_change(utt: &SynthUtterance) -> Result<bool> {
    let prov = utt
        .provenance
        .as_ref()
        .ok_or_else(|| Error::MissingProvenance(format!("utterance {}", utt.id)))?;
    Ok(prov.n_speakers > 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub quality_threshold: f64,
    pub enable_multispeaker_filter: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            quality_threshold: 2.8,
            enable_multispeaker_filter: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub total: usize,
    pub dropped_multispeaker: usize,
    pub dropped_quality: usize,
    pub kept: usize,
    pub score_histogram: Vec<usize>,
}

impl FilterStats {
    fn empty() -> Self {
        Self {
            score_histogram: vec![0; HISTOGRAM_BINS],
            ..Self::default()
        }
    }

    /// Combine shard statistics.
    pub fn merge(&mut self, other: &FilterStats) {
        self.total += other.total;
        self.dropped_multispeaker += other.dropped_multispeaker;
        self.dropped_quality += other.dropped_quality;
        self.kept += other.kept;
        if self.score_histogram.len() < other.score_histogram.len() {
            self.score_histogram.resize(other.score_histogram.len(), 0);
        }
        for (a, b) in self.score_histogram.iter_mut().zip(&other.score_histogram) {
            *a += b;
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("stats serialize")
    }
}

/// Decision for one utterance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Verdict {
    Keep(f64),
    MultiSpeaker,
    LowQuality(f64),
}

fn histogram_bin(score: f64, (lo, hi): (f64, f64)) -> usize {
    let frac = ((score - lo) / (hi - lo)).clamp(0.0, 1.0);
    ((frac * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
}

pub fn judge(utt: &SynthUtterance, config: &FilterConfig, scorer: &dyn QualityScorer) -> Result<Verdict> {
    if config.enable_multispeaker_filter && detect_speaker_change(utt)? {
        return Ok(Verdict::MultiSpeaker);
    }
    let s = scorer.score(&utt.features);
    Ok(if s < config.quality_threshold {
        Verdict::LowQuality(s)
    } else {
        Verdict::Keep(s)
    })
}

fn check_threshold(config: &FilterConfig, scorer: &dyn QualityScorer) -> Result<()> {
    let (lo, hi) = scorer.range();
    if !(lo..=hi).contains(&config.quality_threshold) {
        return Err(Error::invalid(format!(
            "quality_threshold {} outside scorer range [{lo}, {hi}]",
            config.quality_threshold
        )));
    }
    Ok(())
}

/// Single pass over `corpus`; kept items preserve input order. Scores enter
/// the histogram only for samples that reach the quality stage.
pub fn filter_corpus<'a, I>(
    corpus: I,
    config: &FilterConfig,
    scorer: &dyn QualityScorer,
) -> Result<(Vec<&'a SynthUtterance>, FilterStats)>
where
    I: IntoIterator<Item = &'a SynthUtterance>,
{
    check_threshold(config, scorer)?;
    let mut stats = FilterStats::empty();
    let mut kept = Vec::new();
    for utt in corpus {
        stats.total += 1;
        match judge(utt, config, scorer)? {
            Verdict::MultiSpeaker => stats.dropped_multispeaker += 1,
            Verdict::LowQuality(s) => {
                stats.dropped_quality += 1;
                stats.score_histogram[histogram_bin(s, scorer.range())] += 1;
            }
            Verdict::Keep(s) => {
                stats.kept += 1;
                stats.score_histogram[histogram_bin(s, scorer.range())] += 1;
                kept.push(utt);
            }
        }
    }
    if stats.total == 0 {
        return Err(Error::empty("corpus is empty"));
    }
    Ok((kept, stats))
}

/// Same result as [`filter_corpus`], scoring shards on the rayon pool and
/// merging their statistics.
pub fn filter_corpus_sharded<'a>(
    corpus: &'a [SynthUtterance],
    config: &FilterConfig,
    scorer: &dyn QualityScorer,
    shard_size: usize,
) -> Result<(Vec<&'a SynthUtterance>, FilterStats)> {
    use rayon::prelude::*;
    if corpus.is_empty() {
        return Err(Error::empty("corpus is empty"));
    }
    let shards: Vec<Result<(Vec<&SynthUtterance>, FilterStats)>> = corpus
        .par_chunks(shard_size.max(1))
        .map(|chunk| filter_corpus(chunk, config, scorer))
        .collect();
    let mut kept = Vec::new();
    let mut stats = FilterStats::empty();
    for shard in shards {
        let (k, s) = shard?;
        kept.extend(k);
        stats.merge(&s);
    }
    Ok((kept, stats))
}
