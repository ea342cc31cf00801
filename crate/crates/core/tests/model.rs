use rflow::model::checkpoint;
use rflow::model::vfnet::time_embedding;
use rflow::model::{
    DurConfig, DurationNet, DurationSample, FeatureSequence, PhonemeFrames, VectorFieldNet, VfConfig,
};
use rflow::numcore::{ParamStore, Rng};

fn seq(d: usize, t: usize, rng: &mut Rng) -> FeatureSequence {
    FeatureSequence::new(rflow::numcore::Matrix::from_fn(d, t, |_, _| rng.normal())).unwrap()
}

fn tiny() -> VfConfig {
    VfConfig {
        feat_dim: 2,
        hidden: 8,
        depth: 1,
        conv_width: 3,
        vocab_size: 6,
    }
}

fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = Rng::new(seed, 77);
    for v in store.values_mut() {
        *v = 0.4 * rng.normal();
    }
}

#[test]
fn zero_output_projection_gives_zero_field() {
    let net = VectorFieldNet::new(VfConfig::default(), &mut Rng::new(1, 0)).unwrap();
    let mut rng = Rng::new(2, 0);
    let (x, c) = (seq(8, 10, &mut rng), seq(8, 10, &mut rng));
    let a = PhonemeFrames::new((0..10).map(|i| i % 64).collect(), 64).unwrap();
    let out = net.vf_forward(&x, 0.3, &a, &c).unwrap();
    assert_eq!((out.dim(), out.frames()), (8, 10));
    assert!(out.data().as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn zeroed_embedding_makes_phonemes_irrelevant() {
    let mut net = VectorFieldNet::new(tiny(), &mut Rng::new(3, 0)).unwrap();
    randomize(&mut net.params, 3);
    let emb = net.phone_emb_id();
    net.params.slice_mut(emb).fill(0.0);
    let mut rng = Rng::new(4, 0);
    let (x, c) = (seq(2, 7, &mut rng), seq(2, 7, &mut rng));
    let dropped = PhonemeFrames::dropped(7, 6);
    let some = PhonemeFrames::new(vec![1, 2, 3, 4, 5, 5, 1], 6).unwrap();
    let a = net.vf_forward(&x, 0.8, &dropped, &c).unwrap();
    let b = net.vf_forward(&x, 0.8, &some, &c).unwrap();
    assert_eq!(a, b);
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Plain-loop forward pass written against the documented architecture.
fn reference_forward(store: &ParamStore, x: &FeatureSequence, t: f64, a: &[usize], c: &FeatureSequence) -> Vec<Vec<f64>> {
    let get = |name: &str| {
        let id = store.id(name).unwrap();
        (store.slice(id).to_vec(), store.info(id).dims.clone())
    };
    let (d, frames) = (x.dim(), x.frames());
    let (in_w, dims) = get("vf.in.w");
    let h = dims[0];
    let (in_b, _) = get("vf.in.b");
    let (emb, edims) = get("vf.phone_emb");
    let (tw, _) = get("vf.time.w");
    let (tb, _) = get("vf.time.b");
    let te = time_embedding(t);
    let mut hid = vec![vec![0.0; frames]; h];
    for i in 0..h {
        let tproj: f64 = tb[i] + (0..te.len()).map(|k| tw[i * te.len() + k] * te[k]).sum::<f64>();
        for f in 0..frames {
            let mut s = in_b[i] + emb[i * edims[1] + a[f]] + tproj;
            for k in 0..d {
                s += in_w[i * 2 * d + k] * x.data().get(k, f);
                s += in_w[i * 2 * d + d + k] * c.data().get(k, f);
            }
            hid[i][f] = s;
        }
    }
    let mut k = 0;
    while store.id(&format!("vf.block{k}.conv.w")).is_ok() {
        let (cw, cd) = get(&format!("vf.block{k}.conv.w"));
        let width = cd[1] / h;
        let half = (width - 1) / 2;
        let (cb, _) = get(&format!("vf.block{k}.conv.b"));
        let (pw, _) = get(&format!("vf.block{k}.pool.w"));
        let (ow, _) = get(&format!("vf.block{k}.out.w"));
        let (ob, _) = get(&format!("vf.block{k}.out.b"));
        let mean: Vec<f64> = hid.iter().map(|r| r.iter().sum::<f64>() / frames as f64).collect();
        let mut act = vec![vec![0.0; frames]; h];
        for i in 0..h {
            let pooled: f64 = (0..h).map(|j| pw[i * h + j] * mean[j]).sum();
            for f in 0..frames {
                let mut s = cb[i] + pooled;
                for tap in 0..width {
                    let src = f as isize + tap as isize - half as isize;
                    if src < 0 || src >= frames as isize {
                        continue;
                    }
                    for j in 0..h {
                        s += cw[i * h * width + tap * h + j] * hid[j][src as usize];
                    }
                }
                act[i][f] = silu(s);
            }
        }
        let prev = hid.clone();
        for i in 0..h {
            for f in 0..frames {
                hid[i][f] = prev[i][f] + ob[i] + (0..h).map(|j| ow[i * h + j] * act[j][f]).sum::<f64>();
            }
        }
        k += 1;
    }
    let (pw, _) = get("vf.proj.w");
    let (pb, _) = get("vf.proj.b");
    (0..d)
        .map(|r| {
            (0..frames)
                .map(|f| pb[r] + (0..h).map(|j| pw[r * h + j] * hid[j][f]).sum::<f64>())
                .collect()
        })
        .collect()
}

#[test]
fn forward_matches_reference_implementation() {
    let mut net = VectorFieldNet::new(tiny(), &mut Rng::new(5, 0)).unwrap();
    randomize(&mut net.params, 5);
    let mut rng = Rng::new(6, 0);
    let (x, c) = (seq(2, 4, &mut rng), seq(2, 4, &mut rng));
    let ids = vec![0, 3, 3, 5];
    let a = PhonemeFrames::new(ids.clone(), 6).unwrap();
    let got = net.vf_forward(&x, 0.42, &a, &c).unwrap();
    let want = reference_forward(&net.params, &x, 0.42, &ids, &c);
    for (r, row) in want.iter().enumerate() {
        for (f, &w) in row.iter().enumerate() {
            let g = got.data().get(r, f);
            assert!((g - w).abs() < 1e-12, "({r},{f}) {g} vs {w}");
        }
    }
}

#[test]
fn width_one_is_frame_permutation_equivariant() {
    let cfg = VfConfig {
        conv_width: 1,
        depth: 2,
        ..tiny()
    };
    let mut net = VectorFieldNet::new(cfg, &mut Rng::new(7, 0)).unwrap();
    randomize(&mut net.params, 7);
    let mut rng = Rng::new(8, 0);
    let (x, c) = (seq(2, 5, &mut rng), seq(2, 5, &mut rng));
    let ids = vec![1, 2, 3, 4, 5];
    let out = net
        .vf_forward(&x, 0.5, &PhonemeFrames::new(ids.clone(), 6).unwrap(), &c)
        .unwrap();
    let swap = |m: &FeatureSequence| {
        let mut d = m.data().clone();
        let (c1, c3) = (d.col(1), d.col(3));
        d.set_col(1, &c3);
        d.set_col(3, &c1);
        FeatureSequence::new(d).unwrap()
    };
    let mut ids_p = ids;
    ids_p.swap(1, 3);
    let out_p = net
        .vf_forward(&swap(&x), 0.5, &PhonemeFrames::new(ids_p, 6).unwrap(), &swap(&c))
        .unwrap();
    let back = swap(&out_p);
    for (a, b) in back.data().as_slice().iter().zip(out.data().as_slice()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn forward_rejects_bad_shapes_and_times() {
    let net = VectorFieldNet::new(tiny(), &mut Rng::new(9, 0)).unwrap();
    let mut rng = Rng::new(9, 1);
    let a = PhonemeFrames::dropped(4, 6);
    let x = seq(2, 4, &mut rng);
    assert!(net.vf_forward(&x, 0.5, &a, &seq(2, 5, &mut rng)).is_err());
    assert!(net.vf_forward(&x, 1.5, &a, &x).is_err());
    assert!(net.vf_forward(&x, -0.1, &a, &x).is_err());
    assert!(net.vf_forward(&x, 0.5, &PhonemeFrames::dropped(3, 6), &x).is_err());
}

#[test]
fn checkpoint_rebuilds_identical_network() {
    let mut net = VectorFieldNet::new(tiny(), &mut Rng::new(10, 0)).unwrap();
    randomize(&mut net.params, 10);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vf.ckpt");
    checkpoint::save(&net.params, &path).unwrap();
    let back = VectorFieldNet::from_params(checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(back.config(), net.config());
    let mut rng = Rng::new(11, 0);
    let (x, c) = (seq(2, 6, &mut rng), seq(2, 6, &mut rng));
    let a = PhonemeFrames::new(vec![1, 2, 0, 0, 5, 4], 6).unwrap();
    assert_eq!(
        net.vf_forward(&x, 0.1, &a, &c).unwrap(),
        back.vf_forward(&x, 0.1, &a, &c).unwrap()
    );
}

fn dur_net() -> DurationNet {
    DurationNet::new(
        DurConfig {
            hidden: 6,
            depth: 2,
            conv_width: 3,
            vocab_size: 8,
        },
        &mut Rng::new(12, 0),
    )
    .unwrap()
}

#[test]
fn duration_zero_head_and_identity_shortcut() {
    let mut net = dur_net();
    let s = DurationSample::new(vec![1, 2, 3], vec![4.0, 5.0, 6.0], vec![true, false, true]).unwrap();
    assert_eq!(net.duration_forward(&s).unwrap(), vec![0.0; 3]);
    randomize(&mut net.params, 12);
    net.set_identity_shortcut();
    let pred = net.duration_forward(&s).unwrap();
    assert_eq!(pred[0], 4.0);
    assert_eq!(pred[2], 6.0);
}

#[test]
fn duration_loss_formulas() {
    use rflow::model::duration::masked_duration_mse;
    let s = DurationSample::new(
        vec![1, 2, 3, 4, 5, 6],
        vec![3.0, 4.0, 5.0, 6.0, 3.0, 4.0],
        vec![false, true, false, false, true, false],
    )
    .unwrap();
    let plus_one: Vec<f64> = s.durations().iter().map(|d| d + 1.0).collect();
    assert_eq!(masked_duration_mse(&plus_one, &s).unwrap(), 1.0);
    assert_eq!(masked_duration_mse(s.durations(), &s).unwrap(), 0.0);

    let s = DurationSample::new(
        vec![1, 2, 3, 4, 5, 6],
        vec![3.0, 4.0, 5.0, 6.0, 3.0, 4.0],
        vec![true, false, true, false, false, true],
    )
    .unwrap();
    let pred = [9.0, 4.5, -2.0, 5.0, 3.25, 100.0];
    let want = ((4.5f64 - 4.0).powi(2) + (5.0f64 - 6.0).powi(2) + (3.25f64 - 3.0).powi(2)) / 3.0;
    assert!((masked_duration_mse(&pred, &s).unwrap() - want).abs() < 1e-15);

    // values at known positions never matter
    let mut other = pred;
    other[0] = -7.0;
    other[2] = 1e6;
    other[5] = 0.0;
    assert_eq!(masked_duration_mse(&other, &s).unwrap(), masked_duration_mse(&pred, &s).unwrap());

    let all_known = DurationSample::new(vec![1], vec![3.0], vec![true]).unwrap();
    assert!(masked_duration_mse(&[3.0], &all_known).is_err());
    assert!(dur_net().duration_loss(&all_known).is_err());
}

#[test]
fn duration_sample_context_is_zero_where_unknown() {
    let s = DurationSample::new(vec![1, 2], vec![3.0, 4.0], vec![true, false]).unwrap();
    assert_eq!(s.context(), &[3.0, 0.0]);
    assert!(DurationSample::new(vec![1, 2], vec![3.0], vec![true, false]).is_err());
}
