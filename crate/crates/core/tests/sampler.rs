use std::f64::consts::E;

use rflow::flowmatch::draw_p0;
use rflow::model::{FeatureSequence, PhonemeFrames, VectorField, VectorFieldNet, VfBatch, VfConfig};
use rflow::numcore::{Matrix, Rng};
use rflow::sampler::{
    cfg_field, combine_guidance, integrate, synthesize, synthesize_batch, synthesize_full, SamplerConfig, Solver,
    SynthRequest, Trajectory,
};

fn cfg(nfe: usize, solver: Solver) -> SamplerConfig {
    SamplerConfig {
        nfe,
        guidance: 0.0,
        solver,
    }
}

fn scalar(x: f64) -> FeatureSequence {
    FeatureSequence::new(Matrix::from_vec(1, 1, vec![x])).unwrap()
}

fn exp_error(steps: usize, solver: Solver) -> f64 {
    let nfe = match solver {
        Solver::Euler => steps,
        Solver::Midpoint => 2 * steps,
    };
    let out = integrate(|x, _| Ok(x.clone()), &scalar(1.0), &cfg(nfe, solver)).unwrap();
    (out.data().get(0, 0) - E).abs()
}

#[test]
fn constant_field_is_exact() {
    let mut rng = Rng::new(1, 0);
    let x = FeatureSequence::new(Matrix::from_fn(3, 4, |_, _| rng.normal())).unwrap();
    let c = Matrix::from_fn(3, 4, |_, _| rng.normal());
    for solver in [Solver::Euler, Solver::Midpoint] {
        for nfe in [2, 6, 32, 64] {
            let out = integrate(|_, _| Ok(c.clone()), &x, &cfg(nfe, solver)).unwrap();
            let want = x.data().zip_map(&c, |a, b| a + b);
            // exact up to summation rounding
            assert!(out.data().zip_map(&want, |a, b| (a - b).abs()).max_abs() < 1e-14);
        }
    }
}

#[test]
fn exponential_against_closed_form() {
    // midpoint on x' = x multiplies by 1 + h + h^2/2 per step
    for steps in [8usize, 16, 32] {
        let h = 1.0 / steps as f64;
        let want = (1.0 + h + 0.5 * h * h).powi(steps as i32);
        let out = integrate(|x, _| Ok(x.clone()), &scalar(1.0), &cfg(2 * steps, Solver::Midpoint)).unwrap();
        assert!((out.data().get(0, 0) - want).abs() < 1e-13);
    }
    // 16 steps land 1.69e-3 from e; 32 steps are inside 1e-3
    let e16 = exp_error(16, Solver::Midpoint);
    assert!((e16 - 1.688e-3).abs() < 1e-6, "{e16}");
    assert!(exp_error(32, Solver::Midpoint) < 1e-3);
}

#[test]
fn convergence_orders() {
    for (solver, lo, hi) in [(Solver::Midpoint, 3.5, 4.5), (Solver::Euler, 1.8, 2.2)] {
        let errs: Vec<f64> = [8, 16, 32].iter().map(|&n| exp_error(n, solver)).collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((lo..=hi).contains(&ratio), "{solver:?}: {ratio}");
        }
    }
}

#[test]
fn single_euler_step() {
    let mut rng = Rng::new(2, 0);
    let x = FeatureSequence::new(Matrix::from_fn(2, 3, |_, _| rng.normal())).unwrap();
    let f = |m: &Matrix, t: f64| Ok(m.map(|v| v.sin() + t));
    let out = integrate(f, &x, &cfg(1, Solver::Euler)).unwrap();
    let want = x.data().map(|v| v + v.sin());
    assert_eq!(out.data(), &want);
}

#[test]
fn nan_names_the_step() {
    let mut calls = 0;
    let field = |x: &Matrix, _: f64| {
        calls += 1;
        Ok(if calls == 5 { x.map(|_| f64::NAN) } else { x.clone() })
    };
    let err = integrate(field, &scalar(1.0), &cfg(8, Solver::Midpoint)).unwrap_err().to_string();
    assert!(err.contains("solver step 3 of 4"), "{err}");
}

#[test]
fn config_validation() {
    assert!(cfg(31, Solver::Midpoint).validate().is_err());
    assert!(cfg(31, Solver::Euler).validate().is_ok());
    assert!(cfg(0, Solver::Euler).validate().is_err());
    let neg = SamplerConfig {
        guidance: -1.0,
        ..SamplerConfig::default()
    };
    assert!(neg.validate().is_err());
    let d = SamplerConfig::default();
    assert_eq!((d.nfe, d.guidance, d.solver, d.steps()), (32, 1.0, Solver::Midpoint, 16));
}

fn random_net(seed: u64) -> VectorFieldNet {
    let c = VfConfig {
        feat_dim: 4,
        hidden: 12,
        depth: 2,
        conv_width: 3,
        vocab_size: 10,
    };
    let mut net = VectorFieldNet::new(c, &mut Rng::new(seed, 0)).unwrap();
    let mut r = Rng::new(seed, 1);
    for v in net.params.values_mut() {
        *v = 0.3 * r.normal();
    }
    net
}

fn request(seed: u64, prompt_len: usize, gen: usize) -> SynthRequest {
    let mut r = Rng::new(seed, 2);
    SynthRequest {
        prompt: FeatureSequence::new(Matrix::from_fn(4, prompt_len, |_, _| r.normal())).unwrap(),
        phonemes: PhonemeFrames::new((0..prompt_len + gen).map(|i| 1 + i % 9).collect(), 10).unwrap(),
        gen_frames: gen,
        rng: Rng::new(seed, 3),
    }
}

#[test]
fn context_is_clamped_at_every_step() {
    let net = random_net(3);
    let reqs = [request(1, 5, 7), request(2, 3, 4)];
    for guidance in [0.0, 1.0] {
        let config = SamplerConfig {
            guidance,
            ..SamplerConfig::default()
        };
        let mut tr = Trajectory::default();
        let full = synthesize_full(&net, &reqs, &config, Some(&mut tr)).unwrap();
        assert_eq!(tr.states.len(), 17);
        assert_eq!(tr.half_states.len(), 16);
        for state in tr.states.iter().chain(&tr.half_states) {
            assert_eq!(state.cols_range(0, 5), *reqs[0].prompt.data());
            assert_eq!(state.cols_range(12, 3), *reqs[1].prompt.data());
        }
        assert_eq!(full[0].cols_range(0, 5), *reqs[0].prompt.data());
        assert_eq!(full[1].cols(), 7);
        assert_eq!(tr.states.last().unwrap().cols_range(0, 12), full[0]);
    }
}

#[test]
fn zero_field_returns_the_initial_draw() {
    let c = VfConfig {
        feat_dim: 4,
        hidden: 8,
        depth: 1,
        conv_width: 3,
        vocab_size: 10,
    };
    let net = VectorFieldNet::new(c, &mut Rng::new(4, 0)).unwrap();
    let req = request(5, 6, 9);
    let out = synthesize(&net, &req.prompt, &req.phonemes, 9, &SamplerConfig::default(), &req.rng).unwrap();
    let draw = draw_p0(4, 15, &mut req.rng.clone());
    assert_eq!(out.data(), &draw.cols_range(6, 9));
}

#[test]
fn grouping_does_not_change_results() {
    let net = random_net(6);
    let reqs = [request(7, 4, 5), request(8, 6, 3), request(9, 2, 8)];
    let config = SamplerConfig::default();
    let joint = synthesize_batch(&net, &reqs, &config).unwrap();
    for (r, j) in reqs.iter().zip(&joint) {
        let alone = synthesize(&net, &r.prompt, &r.phonemes, r.gen_frames, &config, &r.rng).unwrap();
        let diff = alone.data().zip_map(j.data(), |a, b| (a - b).abs()).max_abs();
        assert!(diff < 1e-12, "{diff}");
        assert_eq!(j.frames(), r.gen_frames);
    }
    assert!(synthesize_batch(&net, &[], &config).unwrap().is_empty());
    let mut bad = request(1, 3, 2);
    bad.gen_frames = 4;
    assert!(synthesize_batch(&net, &[bad], &config).is_err());
}

#[test]
fn guidance_is_affine_in_alpha() {
    let net = random_net(10);
    let mut r = Rng::new(11, 0);
    let x = FeatureSequence::new(Matrix::from_fn(4, 8, |_, _| r.normal())).unwrap();
    let ctx = FeatureSequence::new(Matrix::from_fn(4, 8, |_, c| if c < 3 { r.normal() } else { 0.0 })).unwrap();
    let a = PhonemeFrames::new(vec![3, 3, 4, 5, 5, 5, 6, 1], 10).unwrap();

    let cond = net.field(&VfBatch::single(&x, 0.4, &a, &ctx)).unwrap();
    let zeros = FeatureSequence::zeros(4, 8).unwrap();
    let dropped = PhonemeFrames::new(vec![0; 8], 10).unwrap();
    let uncond = net.field(&VfBatch::single(&x, 0.4, &dropped, &zeros)).unwrap();

    assert_eq!(cfg_field(&net, &x, 0.4, &a, &ctx, 0.0).unwrap().data(), &cond);
    let one = cfg_field(&net, &x, 0.4, &a, &ctx, 1.0).unwrap();
    assert_eq!(one.data(), &combine_guidance(&cond, &uncond, 1.0));
    let slope = cond.zip_map(&uncond, |c, u| c - u);
    for alpha in [0.5, 2.5, 7.0] {
        let g = cfg_field(&net, &x, 0.4, &a, &ctx, alpha).unwrap();
        let want = cond.zip_map(&slope, |c, s| c + alpha * s);
        assert!(g.data().zip_map(&want, |p, q| (p - q).abs()).max_abs() < 1e-12);
    }
    assert!(cfg_field(&net, &x, 0.4, &a, &ctx, -0.1).is_err());
}
