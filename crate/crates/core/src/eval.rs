//! Evaluation harness: oracle metrics over an eval set, paired t-tests,
//! and CSV/SVG report emission.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::spectral_gate_enhance;
use crate::error::{Error, Result};
use crate::model::{FeatureSequence, VectorField};
use crate::numcore::Rng;
use crate::sampler::{synthesize_batch, SamplerConfig, SynthRequest};
use crate::synthworld::{intelligibility_proxy, leakage_score, oracle_similarity, EvalSample, WorldConfig};

pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];
pub const CSV_HEADER: &str =
    "model,condition,intelligibility_mean,intelligibility_sd,similarity_mean,similarity_sd,quality_mean,quality_sd,n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    CleanPrompt,
    NoisyPrompt,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::CleanPrompt => "clean_prompt",
            Condition::NoisyPrompt => "noisy_prompt",
        }
    }
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, sd }
    }
}

/// Metrics of one synthesis, or their seed average.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Reconstruction error against the phoneme profile; lower is better.
    pub intelligibility: f64,
    /// Cosine with the clean speaker's timbre.
    pub similarity: f64,
    /// Leakage score in [1, 5]; higher is cleaner.
    pub quality: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub condition: Condition,
    pub intelligibility: Stat,
    pub similarity: Stat,
    pub quality: Stat,
    pub n_samples: usize,
    pub seeds: Vec<u64>,
}

impl MetricsReport {
    /// Aggregate over every (sample, seed) synthesis.
    pub fn aggregate(model: &str, condition: Condition, runs: &[Vec<Metrics>], seeds: &[u64]) -> Self {
        let flat: Vec<Metrics> = runs.iter().flatten().copied().collect();
        let pick = |f: fn(&Metrics) -> f64| Stat::of(&flat.iter().map(f).collect::<Vec<_>>());
        Self {
            model: model.to_string(),
            condition,
            intelligibility: pick(|m| m.intelligibility),
            similarity: pick(|m| m.similarity),
            quality: pick(|m| m.quality),
            n_samples: runs.len(),
            seeds: seeds.to_vec(),
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.model,
            self.condition.as_str(),
            self.intelligibility.mean,
            self.intelligibility.sd,
            self.similarity.mean,
            self.similarity.sd,
            self.quality.mean,
            self.quality.sd,
            self.n_samples * self.seeds.len()
        )
    }
}

/// Everything one condition produced.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionResult {
    pub report: MetricsReport,
    /// Per sample, per seed.
    pub runs: Vec<Vec<Metrics>>,
}

impl ConditionResult {
    /// Per-sample values averaged over seeds, in eval-set order.
    pub fn seed_averaged(&self) -> Vec<Metrics> {
        self.runs
            .iter()
            .map(|r| {
                let n = r.len() as f64;
                Metrics {
                    intelligibility: r.iter().map(|m| m.intelligibility).sum::<f64>() / n,
                    similarity: r.iter().map(|m| m.similarity).sum::<f64>() / n,
                    quality: r.iter().map(|m| m.quality).sum::<f64>() / n,
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub clean: ConditionResult,
    pub noisy: ConditionResult,
}

impl EvalOutput {
    pub fn reports(&self) -> [&MetricsReport; 2] {
        [&self.clean.report, &self.noisy.report]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub sampler: SamplerConfig,
    pub seeds: Vec<u64>,
    /// Run the spectral-gate enhancer over both prompts first.
    pub enhance_gate_db: Option<f64>,
    /// Samples synthesised together in one packed solve.
    pub chunk: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            seeds: DEFAULT_SEEDS.to_vec(),
            enhance_gate_db: None,
            chunk: 25,
        }
    }
}

/// Score one generated region.
pub fn score(world: &WorldConfig, sample: &EvalSample, generated: &FeatureSequence) -> Result<Metrics> {
    Ok(Metrics {
        intelligibility: intelligibility_proxy(world, generated, &sample.target.phonemes)?,
        similarity: oracle_similarity(generated, &sample.speaker)?,
        quality: leakage_score(generated),
    })
}

fn run_condition<N: VectorField + Sync>(
    net: &N,
    world: &WorldConfig,
    set: &[EvalSample],
    opts: &EvalOptions,
    condition: Condition,
) -> Result<Vec<Vec<Metrics>>> {
    let chunks: Vec<(usize, &[EvalSample])> = set
        .chunks(opts.chunk.max(1))
        .enumerate()
        .map(|(k, c)| (k * opts.chunk.max(1), c))
        .collect();
    let per_chunk: Vec<Result<Vec<Vec<Metrics>>>> = chunks
        .par_iter()
        .map(|&(first, chunk)| {
            let mut out = vec![Vec::with_capacity(opts.seeds.len()); chunk.len()];
            for &seed in &opts.seeds {
                let reqs = chunk
                    .iter()
                    .enumerate()
                    .map(|(j, s)| {
                        let prompt = match condition {
                            Condition::CleanPrompt => &s.prompt_clean,
                            Condition::NoisyPrompt => &s.prompt_noisy,
                        };
                        let prompt = match opts.enhance_gate_db {
                            Some(g) => spectral_gate_enhance(prompt, g)?,
                            None => prompt.clone(),
                        };
                        Ok(SynthRequest {
                            prompt,
                            phonemes: s.prompt_phonemes.concat(&s.target.phonemes)?,
                            gen_frames: s.target.frames(),
                            rng: Rng::new(seed, 0x5eed).derive((first + j) as u64),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let gens = synthesize_batch(net, &reqs, &opts.sampler)
                    .map_err(|e| Error::invalid(format!("sample {}: {e}", chunk[0].id)))?;
                for (j, g) in gens.iter().enumerate() {
                    let m = score(world, &chunk[j], g)
                        .map_err(|e| Error::invalid(format!("sample {}: {e}", chunk[j].id)))?;
                    out[j].push(m);
                }
            }
            Ok(out)
        })
        .collect();
    let mut runs = Vec::with_capacity(set.len());
    for r in per_chunk {
        runs.extend(r?);
    }
    Ok(runs)
}

/// Synthesise every sample under both prompt conditions for every seed.
/// A sample's starting noise depends only on (seed, sample index), so two
/// models or conditions see the same draws.
pub fn run_eval<N: VectorField + Sync>(
    net: &N,
    model: &str,
    world: &WorldConfig,
    set: &[EvalSample],
    opts: &EvalOptions,
) -> Result<EvalOutput> {
    if opts.seeds.is_empty() {
        return Err(Error::invalid("need at least one seed"));
    }
    if set.is_empty() {
        return Err(Error::empty("eval set is empty"));
    }
    opts.sampler.validate()?;
    let mut results = Vec::with_capacity(2);
    for cond in [Condition::CleanPrompt, Condition::NoisyPrompt] {
        let runs = run_condition(net, world, set, opts, cond)?;
        results.push(ConditionResult {
            report: MetricsReport::aggregate(model, cond, &runs, &opts.seeds),
            runs,
        });
    }
    let noisy = results.pop().unwrap();
    let clean = results.pop().unwrap();
    Ok(EvalOutput { clean, noisy })
}

/// Metrics of the eval targets themselves (no model involved).
pub fn ground_truth_report(world: &WorldConfig, set: &[EvalSample]) -> Result<MetricsReport> {
    let runs = set
        .iter()
        .map(|s| Ok(vec![score(world, s, &s.target.features)?]))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::aggregate("ground_truth", Condition::CleanPrompt, &runs, &[0]))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    pub mean_diff: f64,
}

/// Two-sided paired t-test of `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} vs {} paired values", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::invalid("paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let Stat { mean, sd } = Stat::of(&d);
    let df = n - 1;
    if sd == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, p: 1.0, df, mean_diff: 0.0 }
        } else {
            TTest {
                t: mean.signum() * f64::INFINITY,
                p: 0.0,
                df,
                mean_diff: mean,
            }
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    Ok(TTest {
        t,
        p: student_t_two_sided(t, df as f64),
        df,
        mean_diff: mean,
    })
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_beta(0.5 * df, 0.5, x).clamp(0.0, 1.0)
}

/// Natural log of the gamma function (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularised incomplete beta `I_x(a, b)`.
pub fn regularized_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

pub fn report_csv(reports: &[&MetricsReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Value range drawn by a chart: data range padded by 5% on each side.
pub fn axis_range(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pad = if span > 0.0 {
        0.05 * span
    } else if lo != 0.0 {
        0.05 * lo.abs()
    } else {
        0.05
    };
    (lo - pad, hi + pad)
}

const METRICS: [(&str, &str); 3] = [
    ("intelligibility", "intelligibility error (lower is better)"),
    ("similarity", "speaker similarity"),
    ("quality", "quality / leakage score (higher is cleaner)"),
];

fn metric_of(r: &MetricsReport, name: &str) -> f64 {
    match name {
        "intelligibility" => r.intelligibility.mean,
        "similarity" => r.similarity.mean,
        _ => r.quality.mean,
    }
}

/// Bar chart of one metric, one bar per report.
pub fn bar_chart_svg(reports: &[&MetricsReport], metric: &str, title: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const LEFT: f64 = 70.0;
    const BOTTOM: f64 = 300.0;
    const TOP: f64 = 40.0;
    let values: Vec<f64> = reports.iter().map(|r| metric_of(r, metric)).collect();
    let (lo, hi) = axis_range(&values);
    let y = |v: f64| BOTTOM - (v - lo) / (hi - lo) * (BOTTOM - TOP);
    let slot = (W - LEFT - 20.0) / values.len().max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<title>{title}</title>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{title}</text>"#, W / 2.0);
    let _ = writeln!(
        s,
        r#"<g id="axis" data-min="{lo:.6}" data-max="{hi:.6}" stroke="black">"#
    );
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{BOTTOM}"/>"#);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{BOTTOM}" x2="{}" y2="{BOTTOM}"/>"#, W - 20.0);
    let _ = writeln!(s, "</g>");
    for (v, label) in [(lo, "min"), (hi, "max")] {
        let _ = writeln!(
            s,
            r#"<text class="tick-{label}" x="{}" y="{:.2}" text-anchor="end" font-size="10">{v:.4}</text>"#,
            LEFT - 4.0,
            y(v) + 3.0
        );
    }
    for (i, (r, &v)) in reports.iter().zip(&values).enumerate() {
        let x = LEFT + slot * i as f64 + 0.15 * slot;
        let top = y(v);
        let _ = writeln!(
            s,
            r#"<rect class="bar" x="{x:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{}" data-value="{v:.6}"/>"#,
            0.7 * slot,
            BOTTOM - top,
            match r.condition {
                Condition::CleanPrompt => "#4c72b0",
                Condition::NoisyPrompt => "#dd8452",
            }
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="10">{} / {}</text>"#,
            x + 0.35 * slot,
            BOTTOM + 16.0,
            r.model,
            r.condition.as_str()
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Write `report.csv` and one SVG per metric into `dir`; returns the paths.
pub fn emit_report(reports: &[&MetricsReport], dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::empty("no reports to emit"));
    }
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    let csv = dir.join("report.csv");
    fs::write(&csv, report_csv(reports))?;
    paths.push(csv);
    for (metric, title) in METRICS {
        let p = dir.join(format!("{metric}.svg"));
        fs::write(&p, bar_chart_svg(reports, metric, title))?;
        paths.push(p);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lgamma_small_integers() {
        for (x, f) in [(1.0, 1.0f64), (2.0, 1.0), (5.0, 24.0), (0.5, std::f64::consts::PI.sqrt())] {
            assert!((ln_gamma(x) - f.ln()).abs() < 1e-12, "{x}");
        }
    }

    #[test]
    fn critical_value() {
        assert!((student_t_two_sided(2.776, 4.0) - 0.05).abs() < 1e-4);
    }

    #[test]
    fn degenerate_pairs() {
        let r = paired_t_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
        let r = paired_t_test(&[2.0; 4], &[1.0; 4]).unwrap();
        assert!(r.t.is_infinite() && r.p == 0.0);
    }
}
