//! Synthetic feature world with known ground truth.
//!
//! A speaker is a unit timbre vector `theta` and a gain. Frame `f` of an
//! utterance is `gain · c(phoneme_f) · theta` plus Gaussian jitter, where `c`
//! is a fixed injective amplitude per phoneme. The clean signal is therefore
//! rank one, which is what the oracle metrics and the quality proxy exploit.
//! Noise families put most of their energy on two feature dimensions.

use std::f64::consts::FRAC_1_SQRT_2;

use serde::{Deserialize, Serialize};

use crate::augment::{mix_at_snr, MixRecord, NoiseClip, SnrRange};
use crate::datafilter::proxy_quality_score;
use crate::error::{Error, Result};
use crate::model::{DurationSample, FeatureSequence, PhonemeFrames, DROPPED_PHONEME};
use crate::numcore::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub feat_dim: usize,
    pub vocab_size: usize,
    pub jitter: f64,
    pub noise_families: usize,
    pub min_gain: f64,
    pub max_gain: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            feat_dim: 8,
            vocab_size: 64,
            jitter: 0.02,
            noise_families: 8,
            min_gain: 0.8,
            max_gain: 1.2,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feat_dim < 2 {
            return Err(Error::invalid("feat_dim must be >= 2"));
        }
        if self.vocab_size < 3 {
            return Err(Error::invalid("vocab_size must be >= 3 (id 0 is reserved)"));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::invalid("jitter must be finite and non-negative"));
        }
        if self.noise_families == 0 {
            return Err(Error::invalid("need at least one noise family"));
        }
        if !(self.min_gain > 0.0 && self.min_gain <= self.max_gain) {
            return Err(Error::invalid("gain range must be positive and non-empty"));
        }
        Ok(())
    }

    /// Amplitude of phoneme `p`; defined for `1..vocab_size`.
    pub fn amplitude(&self, p: usize) -> Result<f64> {
        if p == DROPPED_PHONEME || p >= self.vocab_size {
            return Err(Error::invalid(format!("unknown phoneme id {p}")));
        }
        Ok(0.5 + (p - 1) as f64 / (self.vocab_size - 2) as f64)
    }
}

/// Frames a phoneme lasts in this world.
pub fn duration_rule(p: usize) -> usize {
    3 + p % 4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerParams {
    pub theta: Vec<f64>,
    pub base_gain: f64,
}

impl SpeakerParams {
    pub fn new(theta: Vec<f64>, base_gain: f64) -> Result<Self> {
        let norm = theta.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::invalid("speaker direction must be non-zero"));
        }
        if !(base_gain > 0.0) {
            return Err(Error::invalid("base_gain must be positive"));
        }
        Ok(Self {
            theta: theta.iter().map(|x| x / norm).collect(),
            base_gain,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub noise_mixed: bool,
    pub snr_db: Option<f64>,
    pub n_speakers: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthUtterance {
    pub id: String,
    pub seed: u64,
    pub speaker_id: u64,
    pub speaker: SpeakerParams,
    pub features: FeatureSequence,
    pub phonemes: PhonemeFrames,
    /// Phoneme sequence and per-phoneme frame counts behind `phonemes`.
    pub phone_seq: Vec<usize>,
    pub phone_durations: Vec<usize>,
    pub provenance: Option<Provenance>,
}

impl SynthUtterance {
    pub fn frames(&self) -> usize {
        self.features.frames()
    }

    pub fn n_speakers(&self) -> usize {
        self.provenance.as_ref().map_or(1, |p| p.n_speakers)
    }
}

/// A deterministic universe of speakers and noise families.
#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    seed: u64,
    families: Vec<NoiseFamily>,
}

#[derive(Clone, Debug, PartialEq)]
struct NoiseFamily {
    dims: [usize; 2],
    rho: f64,
    floor: f64,
}

const STREAM_SPEAKER: u64 = 1;
const STREAM_NOISE_FAMILY: u64 = 2;

impl World {
    pub fn new(config: WorldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(seed, 0);
        let families = (0..config.noise_families)
            .map(|k| {
                let mut r = root.derive2(STREAM_NOISE_FAMILY, k as u64);
                let a = r.int_in(0, config.feat_dim - 1);
                let mut b = r.int_in(0, config.feat_dim - 2);
                if b >= a {
                    b += 1;
                }
                NoiseFamily {
                    dims: [a, b],
                    rho: r.uniform_in(-0.5, 0.5),
                    floor: 0.05,
                }
            })
            .collect();
        Ok(Self { config, seed, families })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn speaker(&self, id: u64) -> SpeakerParams {
        let mut r = Rng::new(self.seed, 0).derive2(STREAM_SPEAKER, id);
        let theta: Vec<f64> = (0..self.config.feat_dim).map(|_| r.normal()).collect();
        let gain = r.uniform_in(self.config.min_gain, self.config.max_gain);
        SpeakerParams::new(theta, gain).expect("gaussian direction is non-zero")
    }

    /// Random phoneme sequence laid out over exactly `frames` frames.
    pub fn gen_phonemes(&self, frames: usize, rng: &mut Rng) -> Result<(PhonemeFrames, Vec<usize>, Vec<usize>)> {
        if frames == 0 {
            return Err(Error::invalid("utterance needs at least one frame"));
        }
        let mut ids = Vec::with_capacity(frames);
        let (mut seq, mut durs) = (Vec::new(), Vec::new());
        while ids.len() < frames {
            let p = rng.int_in(1, self.config.vocab_size - 1);
            let d = duration_rule(p).min(frames - ids.len());
            ids.extend(std::iter::repeat(p).take(d));
            seq.push(p);
            durs.push(d);
        }
        Ok((PhonemeFrames::new(ids, self.config.vocab_size)?, seq, durs))
    }

    /// Clean features for `speaker` reading `phonemes`.
    pub fn render(&self, speaker: &SpeakerParams, phonemes: &PhonemeFrames, rng: &mut Rng) -> Result<Matrix> {
        let d = self.config.feat_dim;
        if speaker.theta.len() != d {
            return Err(Error::shape("speaker direction has the wrong dimension"));
        }
        let amps = phonemes
            .ids()
            .iter()
            .map(|&p| self.config.amplitude(p))
            .collect::<Result<Vec<_>>>()?;
        let mut m = Matrix::zeros(d, phonemes.len());
        for (f, a) in amps.iter().enumerate() {
            for (r, th) in speaker.theta.iter().enumerate() {
                m.set(r, f, speaker.base_gain * a * th + self.config.jitter * rng.normal());
            }
        }
        Ok(m)
    }

    pub fn gen_utterance(
        &self,
        id: impl Into<String>,
        speaker_id: u64,
        phonemes: &PhonemeFrames,
        seed: u64,
    ) -> Result<SynthUtterance> {
        let speaker = self.speaker(speaker_id);
        let mut rng = Rng::new(self.seed, 0).derive2(seed, 0xfea7);
        let features = FeatureSequence::new(self.render(&speaker, phonemes, &mut rng)?)?;
        let (phone_seq, phone_durations) = run_lengths(phonemes.ids());
        Ok(SynthUtterance {
            id: id.into(),
            seed,
            speaker_id,
            speaker,
            features,
            phonemes: phonemes.clone(),
            phone_seq,
            phone_durations,
            provenance: Some(Provenance {
                noise_mixed: false,
                snr_db: None,
                n_speakers: 1,
            }),
        })
    }

    /// Fresh utterance of `frames` frames with random content.
    pub fn random_utterance(&self, id: impl Into<String>, speaker_id: u64, frames: usize, seed: u64) -> Result<SynthUtterance> {
        let mut rng = Rng::new(self.seed, 0).derive2(seed, 0xc0de);
        let (phonemes, seq, durs) = self.gen_phonemes(frames, &mut rng)?;
        let mut utt = self.gen_utterance(id, speaker_id, &phonemes, seed)?;
        utt.phone_seq = seq;
        utt.phone_durations = durs;
        Ok(utt)
    }

    /// Two speakers back to back, split somewhere in the middle half.
    pub fn two_speaker_utterance(
        &self,
        id: impl Into<String>,
        speakers: (u64, u64),
        frames: usize,
        seed: u64,
    ) -> Result<SynthUtterance> {
        if frames < 4 {
            return Err(Error::invalid("two-speaker utterance needs at least 4 frames"));
        }
        let mut rng = Rng::new(self.seed, 0).derive2(seed, 0x2599);
        let split = rng.int_in(frames / 4, 3 * frames / 4).max(1);
        let mut utt = self.random_utterance(id, speakers.0, frames, seed)?;
        let second = self.speaker(speakers.1);
        let tail = PhonemeFrames::new(utt.phonemes.ids()[split..].to_vec(), self.config.vocab_size)?;
        let tail_feats = self.render(&second, &tail, &mut rng)?;
        let mut m = utt.features.data().clone();
        m.set_cols_range(split, &tail_feats);
        utt.features = FeatureSequence::new(m)?;
        utt.provenance = Some(Provenance {
            noise_mixed: false,
            snr_db: None,
            n_speakers: 2,
        });
        Ok(utt)
    }

    /// Noise clip of family `family`, `frames` long.
    pub fn noise_clip(&self, family: usize, frames: usize, rng: &mut Rng) -> Result<NoiseClip> {
        let fam = self
            .families
            .get(family)
            .ok_or_else(|| Error::invalid(format!("no noise family {family}")))?;
        let d = self.config.feat_dim;
        let mut m = Matrix::zeros(d, frames);
        let innov = (1.0 - fam.rho * fam.rho).sqrt();
        for &dim in &fam.dims {
            // differenced AR(1): a high-pass band whose window means telescope toward zero
            let mut state = rng.normal();
            for f in 0..frames {
                let next = fam.rho * state + innov * rng.normal();
                m.set(dim, f, FRAC_1_SQRT_2 * (next - state));
                state = next;
            }
        }
        for r in 0..d {
            if !fam.dims.contains(&r) {
                for f in 0..frames {
                    m.set(r, f, fam.floor * rng.normal());
                }
            }
        }
        NoiseClip::new(m, family)
    }

    /// One clip per family (cycling), each `frames` long.
    pub fn noise_bank(&self, clips: usize, frames: usize, rng: &mut Rng) -> Result<Vec<NoiseClip>> {
        (0..clips)
            .map(|i| self.noise_clip(i % self.families.len(), frames, rng))
            .collect()
    }

    /// Mix noise over the whole utterance at `snr_db`.
    pub fn add_background(&self, utt: &SynthUtterance, family: usize, snr_db: f64, rng: &mut Rng) -> Result<SynthUtterance> {
        let clip = self.noise_clip(family, utt.frames(), rng)?;
        let (mixed, _) = mix_at_snr(&utt.features, &clip, snr_db, 0)?;
        let mut out = utt.clone();
        out.features = mixed;
        let n_speakers = utt.n_speakers();
        out.provenance = Some(Provenance {
            noise_mixed: true,
            snr_db: Some(snr_db),
            n_speakers,
        });
        Ok(out)
    }

    /// Duration-model view of an utterance with a random known/unknown split
    /// (at least one unknown position).
    pub fn duration_sample(&self, utt: &SynthUtterance, known_prob: f64, rng: &mut Rng) -> Result<DurationSample> {
        let n = utt.phone_seq.len();
        let mut known: Vec<bool> = (0..n).map(|_| rng.bernoulli(known_prob)).collect();
        if known.iter().all(|&k| k) {
            let i = rng.int_in(0, n - 1);
            known[i] = false;
        }
        let durs = utt
            .phone_seq
            .iter()
            .map(|&p| duration_rule(p) as f64)
            .collect();
        DurationSample::new(utt.phone_seq.clone(), durs, known)
    }
}

fn run_lengths(ids: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let (mut seq, mut durs) = (Vec::new(), Vec::<usize>::new());
    for &p in ids {
        match seq.last() {
            Some(&last) if last == p => *durs.last_mut().unwrap() += 1,
            _ => {
                seq.push(p);
                durs.push(1);
            }
        }
    }
    (seq, durs)
}

/// Oracle speaker embedding: the leading direction of the frames (best
/// rank-one fit), signed to agree with the mean frame. Clean speech is rank
/// one, so this inverts the generator; noise energy tilts it.
pub fn speaker_embedding(features: &FeatureSequence) -> Result<Vec<f64>> {
    let x = features.data();
    let d = x.rows();
    let mut gram = vec![0.0; d * d];
    for f in 0..x.cols() {
        let col = x.col(f);
        for i in 0..d {
            for j in 0..d {
                gram[i * d + j] += col[i] * col[j];
            }
        }
    }
    let mean: Vec<f64> = (0..d).map(|r| x.row(r).iter().sum::<f64>()).collect();
    let unit = |v: Vec<f64>| -> Option<Vec<f64>> {
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        (n > 0.0 && n.is_finite()).then(|| v.into_iter().map(|a| a / n).collect())
    };
    // start from the mean frame, or the strongest dimension if it cancels
    let start = unit(mean.clone()).or_else(|| {
        let best = (0..d).max_by(|&a, &b| gram[a * d + a].total_cmp(&gram[b * d + b]))?;
        let mut e = vec![0.0; d];
        e[best] = 1.0;
        Some(e)
    });
    let mut v = match start {
        Some(v) if gram.iter().any(|&g| g != 0.0) => v,
        _ => return Err(Error::invalid("features carry no speaker energy")),
    };
    for _ in 0..10_000 {
        let w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| gram[i * d + j] * v[j]).sum()).collect();
        let Some(w) = unit(w) else { break };
        let delta = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        if delta < 1e-15 {
            break;
        }
    }
    let along: f64 = v.iter().zip(&mean).map(|(a, b)| a * b).sum();
    if along < 0.0 {
        v.iter_mut().for_each(|a| *a = -*a);
    }
    Ok(v)
}

/// Cosine between the oracle embedding of `features` and `reference.theta`.
pub fn oracle_similarity(features: &FeatureSequence, reference: &SpeakerParams) -> Result<f64> {
    let e = speaker_embedding(features)?;
    if e.len() != reference.theta.len() {
        return Err(Error::shape("embedding and reference differ in dimension"));
    }
    Ok(e.iter().zip(&reference.theta).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0))
}

/// Gain-normalised per-frame magnitude error against the amplitude profile
/// implied by `phonemes`. Zero means the frame energies follow the text.
pub fn intelligibility_proxy(world: &WorldConfig, generated: &FeatureSequence, phonemes: &PhonemeFrames) -> Result<f64> {
    if generated.frames() != phonemes.len() {
        return Err(Error::shape(format!(
            "{} frames vs {} phoneme frames",
            generated.frames(),
            phonemes.len()
        )));
    }
    let x = generated.data();
    let mags: Vec<f64> = (0..x.cols())
        .map(|c| (0..x.rows()).map(|r| x.get(r, c).powi(2)).sum::<f64>().sqrt())
        .collect();
    let expected = phonemes
        .ids()
        .iter()
        .map(|&p| world.amplitude(p))
        .collect::<Result<Vec<_>>>()?;
    let mean_mag = mags.iter().sum::<f64>() / mags.len() as f64;
    let mean_exp = expected.iter().sum::<f64>() / expected.len() as f64;
    if mean_mag == 0.0 {
        // silence: every frame misses its target by the full normalised amplitude
        return Ok(expected.iter().map(|e| (e / mean_exp).powi(2)).sum::<f64>() / expected.len() as f64);
    }
    Ok(mags
        .iter()
        .zip(&expected)
        .map(|(m, e)| (m / mean_mag - e / mean_exp).powi(2))
        .sum::<f64>()
        / mags.len() as f64)
}

/// Cleanness of generated output; same function as the filter's quality proxy.
pub fn leakage_score(generated: &FeatureSequence) -> f64 {
    proxy_quality_score(generated)
}

/// Corpus recipe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub utterances: usize,
    pub frames: usize,
    pub speakers: usize,
    pub multi_speaker_fraction: f64,
    pub noisy_fraction: f64,
    pub noisy_snr: SnrRange,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            utterances: 3000,
            frames: 32,
            speakers: 200,
            multi_speaker_fraction: 0.0,
            noisy_fraction: 0.0,
            noisy_snr: SnrRange::new(-5.0, 5.0),
        }
    }
}

/// Exact count of `fraction · n`, rounded to nearest.
pub fn planted_count(n: usize, fraction: f64) -> usize {
    (fraction * n as f64).round() as usize
}

/// Generate a corpus with exactly `round(multi·n)` two-speaker utterances and
/// exactly `round(noisy·(n - multi))` noisy single-speaker ones, in shuffled order.
pub fn gen_corpus(world: &World, spec: &CorpusSpec, prefix: &str, stream: u64) -> Result<Vec<SynthUtterance>> {
    if spec.utterances == 0 || spec.speakers == 0 {
        return Err(Error::invalid("corpus needs utterances and speakers"));
    }
    let n = spec.utterances;
    let n_multi = planted_count(n, spec.multi_speaker_fraction);
    let n_noisy = planted_count(n - n_multi, spec.noisy_fraction);
    let root = Rng::new(world.seed(), stream);
    let mut kinds: Vec<u8> = (0..n)
        .map(|i| if i < n_multi { 2 } else if i < n_multi + n_noisy { 1 } else { 0 })
        .collect();
    let mut shuffle = root.derive(0x5bff);
    for i in (1..n).rev() {
        let j = shuffle.int_in(0, i);
        kinds.swap(i, j);
    }
    kinds
        .iter()
        .enumerate()
        .map(|(i, kind)| {
            let mut r = root.derive(i as u64 + 1);
            let seed = r.next_u64();
            let spk = r.int_in(0, spec.speakers - 1) as u64;
            let id = format!("{prefix}{i:06}");
            match kind {
                2 => {
                    let mut other = r.int_in(0, spec.speakers.max(2) - 1) as u64;
                    if other == spk {
                        other = (spk + 1) % spec.speakers.max(2) as u64;
                    }
                    world.two_speaker_utterance(id, (spk, other), spec.frames, seed)
                }
                1 => {
                    let clean = world.random_utterance(id, spk, spec.frames, seed)?;
                    let fam = r.int_in(0, world.config.noise_families - 1);
                    let snr = spec.noisy_snr.draw(&mut r);
                    world.add_background(&clean, fam, snr, &mut r)
                }
                _ => world.random_utterance(id, spk, spec.frames, seed),
            }
        })
        .collect()
}

/// One zero-shot evaluation item.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub id: String,
    pub speaker: SpeakerParams,
    pub target: SynthUtterance,
    pub prompt_clean: FeatureSequence,
    pub prompt_phonemes: PhonemeFrames,
    pub prompt_noisy: FeatureSequence,
    pub noise: MixRecord,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSetSpec {
    pub samples: usize,
    pub prompt_frames: usize,
    pub gen_frames: usize,
    pub prompt_snr: SnrRange,
    /// First speaker id used for evaluation; keep it clear of training ids.
    pub speaker_offset: u64,
}

impl Default for EvalSetSpec {
    fn default() -> Self {
        Self {
            samples: 200,
            prompt_frames: 12,
            gen_frames: 20,
            prompt_snr: SnrRange::new(0.0, 20.0),
            speaker_offset: 1_000_000,
        }
    }
}

/// Targets plus clean and noisy prompts. The prompt is the trailing
/// `prompt_frames` of a different utterance by the same speaker; the noisy
/// prompt is that exact prompt with noise over all of it.
pub fn build_eval_set(world: &World, spec: &EvalSetSpec, rng: &Rng) -> Result<Vec<EvalSample>> {
    if spec.samples == 0 {
        return Err(Error::invalid("eval set needs at least one sample"));
    }
    if spec.prompt_frames == 0 || spec.gen_frames == 0 {
        return Err(Error::invalid("prompt and generation lengths must be positive"));
    }
    (0..spec.samples)
        .map(|i| {
            let mut r = rng.derive(i as u64);
            let spk = spec.speaker_offset + i as u64;
            let target = world.random_utterance(format!("eval{i:05}"), spk, spec.gen_frames, r.next_u64())?;
            let source_len = 2 * spec.prompt_frames;
            let source = world.random_utterance(format!("eval{i:05}_src"), spk, source_len, r.next_u64())?;
            let start = source_len - spec.prompt_frames;
            let prompt_clean = source.features.slice_frames(start, spec.prompt_frames)?;
            let prompt_phonemes =
                PhonemeFrames::new(source.phonemes.ids()[start..].to_vec(), world.config.vocab_size)?;
            let fam = r.int_in(0, world.config.noise_families - 1);
            let clip = world.noise_clip(fam, spec.prompt_frames, &mut r)?;
            let snr = spec.prompt_snr.draw(&mut r);
            let (prompt_noisy, noise) = mix_at_snr(&prompt_clean, &clip, snr, 0)?;
            Ok(EvalSample {
                id: format!("eval{i:05}"),
                speaker: target.speaker.clone(),
                target,
                prompt_clean,
                prompt_phonemes,
                prompt_noisy,
                noise,
            })
        })
        .collect()
}
