use pvseg_net::loss::LossWeights;
use pvseg_net::model::{build_model, loss_and_logit_grad, param_count, NetModel};
use pvseg_net::{Act, NetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn tiny_cfg() -> NetConfig {
    NetConfig {
        in_channels: 1,
        num_classes: 3,
        stages: 1,
        base_channels: 2,
        patch_size: [8, 8, 8],
        blocks_per_stage: 2,
    }
}

/// Standard-normal patches with labels in {0,1,2} and an ignored slab of
/// the top z-slices.
fn batch(seed: u64, items: usize, dims: [usize; 3]) -> (Vec<Act>, Vec<Vec<u8>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    let slab = dims[0] * dims[1] * (dims[2] * 5 / 8);
    let mut xs = Vec::new();
    let mut ls = Vec::new();
    for _ in 0..items {
        xs.push(Act {
            c: 1,
            dims,
            data: (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
        });
        ls.push((0..n).map(|i| if i >= slab { 255 } else { rng.random_range(0..3u8) }).collect());
    }
    (xs, ls)
}

fn patterns(m: &NetModel, xs: &[Act]) -> Vec<Vec<bool>> {
    m.forward_with_cache(xs).unwrap().iter().map(|(_, c)| c.rectifier_signs()).collect()
}

/// Every parameter against a Richardson-extrapolated central difference of
/// the loss on the current linear piece of each rectifier.
fn check_all_parameters(cfg: &NetConfig, seed: u64, tol: f64) {
    let model = build_model(cfg, seed).unwrap();
    let (xs, ls) = batch(seed + 100, 2, cfg.patch_size);
    let w = LossWeights::default();
    let g = model.gradients(&xs, &ls, &[1, 2], w).unwrap();
    let pats = patterns(&model, &xs);
    let f = |q: &NetModel| q.loss_with_frozen_rectifiers(&xs, &ls, &[1, 2], w, &pats).unwrap().total;
    assert_eq!(f(&model), g.loss.total);
    let diff = |j: usize, h: f64| {
        let mut p = model.clone();
        p.params[j] += h;
        let mut m = model.clone();
        m.params[j] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    };
    for j in 0..model.params.len() {
        let fd = (4.0 * diff(j, 5e-4) - diff(j, 1e-3)) / 3.0;
        let a = g.grads[j];
        // roundoff in the quotients is about eps * |loss| / h
        let err = (a - fd).abs();
        assert!(
            err < tol * a.abs().max(fd.abs()) + 1e-11,
            "param {j}: analytic {a:e}, extrapolated fd {fd:e}"
        );
    }
}

#[test]
fn gradients_match_differences_single_stage() {
    check_all_parameters(&tiny_cfg(), 0, 1e-6);
    check_all_parameters(&tiny_cfg(), 1, 1e-6);
}

#[test]
fn gradients_match_differences_through_down_and_up_paths() {
    let cfg = NetConfig {
        stages: 3,
        patch_size: [8, 8, 8],
        blocks_per_stage: 1,
        ..tiny_cfg()
    };
    check_all_parameters(&cfg, 2, 1e-6);
}

#[test]
fn frozen_pattern_loss_equals_loss_at_recording_point() {
    let model = build_model(&tiny_cfg(), 3).unwrap();
    let (xs, ls) = batch(3, 2, [8, 8, 8]);
    let w = LossWeights::default();
    let pats = patterns(&model, &xs);
    assert_eq!(pats[0].len(), model.rectifier_count());
    assert_eq!(
        model.loss_with_frozen_rectifiers(&xs, &ls, &[1, 2], w, &pats).unwrap(),
        model.loss(&xs, &ls, &[1, 2], w).unwrap()
    );
    assert!(model.loss_with_frozen_rectifiers(&xs, &ls, &[1, 2], w, &pats[..1]).is_err());
}

#[test]
fn loss_terms_combine_linearly() {
    let model = build_model(&tiny_cfg(), 4).unwrap();
    let (xs, ls) = batch(4, 2, [8, 8, 8]);
    let both = model.gradients(&xs, &ls, &[1, 2], LossWeights::default()).unwrap();
    let ce = model.gradients(&xs, &ls, &[1, 2], LossWeights::CE_ONLY).unwrap();
    let dice = model.gradients(&xs, &ls, &[1, 2], LossWeights::DICE_ONLY).unwrap();
    assert_eq!(ce.loss.total, ce.loss.ce);
    for j in 0..both.grads.len() {
        assert!((both.grads[j] - ce.grads[j] - dice.grads[j]).abs() < 1e-12);
    }
}

#[test]
fn dead_unit_has_zero_gradient() {
    // with an all-zero input the stem convolution sees nothing
    let model = build_model(&tiny_cfg(), 5).unwrap();
    let (_, ls) = batch(5, 1, [8, 8, 8]);
    let g = model
        .gradients(&[Act::zeros(1, [8, 8, 8])], &ls, &[1, 2], LossWeights::default())
        .unwrap();
    let stem = model.segments().into_iter().find(|s| s.name == "stem.conv.w").unwrap();
    assert!(g.grads[stem.offset..stem.offset + stem.len].iter().all(|&v| v == 0.0));
}

#[test]
fn ignored_voxels_get_no_logit_gradient() {
    let model = build_model(&tiny_cfg(), 6).unwrap();
    let (xs, ls) = batch(6, 2, [8, 8, 8]);
    let logits = model.forward(&xs).unwrap();
    let (loss, dl) = loss_and_logit_grad(&logits, &ls, &[1, 2], LossWeights::default()).unwrap();
    let n = 512;
    let mut garbage = logits.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (b, l) in ls.iter().enumerate() {
        for (i, &v) in l.iter().enumerate() {
            if v == 255 {
                for c in 0..3 {
                    assert_eq!(dl[b].data[c * n + i], 0.0);
                    garbage[b].data[c * n + i] = rng.random_range(-50.0..50.0);
                }
            }
        }
    }
    let (again, _) = loss_and_logit_grad(&garbage, &ls, &[1, 2], LossWeights::default()).unwrap();
    assert_eq!(again, loss);
}

#[test]
fn gradients_are_deterministic() {
    let model = build_model(&tiny_cfg(), 7).unwrap();
    let (xs, ls) = batch(7, 3, [8, 8, 8]);
    let a = model.gradients(&xs, &ls, &[1, 2], LossWeights::default()).unwrap();
    let b = model.gradients(&xs, &ls, &[1, 2], LossWeights::default()).unwrap();
    assert_eq!(a.grads, b.grads);
    assert_eq!(a.loss, b.loss);
}

/// Per-layer arithmetic for the residual-encoder U-Net.
fn count_params(cin: usize, k: usize, stages: usize, base: usize, blocks: usize) -> usize {
    let ch = |s: usize| (base * 2usize.pow(s as u32)).min(64);
    let conv3 = |a: usize, b: usize| a * b * 27;
    let norm = |c: usize| 2 * c;
    let mut total = conv3(cin, ch(0)) + norm(ch(0));
    for s in 0..stages {
        if s > 0 {
            total += ch(s - 1) * ch(s) * 8 + norm(ch(s));
        }
        total += blocks * (conv3(ch(s), ch(s)) + norm(ch(s)));
    }
    for s in 0..stages - 1 {
        total += ch(s + 1) * ch(s) * 8 + ch(s);
        total += conv3(2 * ch(s), ch(s)) + norm(ch(s));
    }
    total + ch(0) * k + k
}

#[test]
fn parameter_count_oracle() {
    let cfg = NetConfig {
        stages: 4,
        base_channels: 8,
        ..Default::default()
    };
    assert_eq!(param_count(&cfg), count_params(1, 3, 4, 8, 2));
    for (stages, base, blocks, cin, k) in [(1, 2, 2, 1, 3), (3, 4, 1, 2, 4), (6, 16, 2, 1, 3)] {
        let c = NetConfig {
            in_channels: cin,
            num_classes: k,
            stages,
            base_channels: base,
            patch_size: [1 << (stages - 1); 3],
            blocks_per_stage: blocks,
        };
        assert_eq!(param_count(&c), count_params(cin, k, stages, base, blocks), "{c:?}");
    }
}

/// Straight-line evaluation of a single-stage network from its named
/// segments.
fn reference_forward(m: &NetModel, x: &[f64]) -> Vec<f64> {
    let d = 8usize;
    let n = d * d * d;
    let seg = |name: &str| m.segment(name).unwrap().to_vec();
    let conv3 = |x: &[f64], cin: usize, w: &[f64], cout: usize| {
        let mut y = vec![0.0; cout * n];
        for co in 0..cout {
            for z in 0..d {
                for yy in 0..d {
                    for xx in 0..d {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for kz in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let (sx, sy, sz) = (xx + kx, yy + ky, z + kz);
                                        if sx < 1 || sy < 1 || sz < 1 || sx > d || sy > d || sz > d {
                                            continue;
                                        }
                                        let src = (sx - 1) + d * ((sy - 1) + d * (sz - 1));
                                        acc += w[co * cin * 27 + ci * 27 + kz * 9 + ky * 3 + kx] * x[ci * n + src];
                                    }
                                }
                            }
                        }
                        y[co * n + xx + d * (yy + d * z)] = acc;
                    }
                }
            }
        }
        y
    };
    let norm_act = |y: &mut [f64], c: usize, g: &[f64], b: &[f64]| {
        for ch in 0..c {
            let v = &mut y[ch * n..(ch + 1) * n];
            let mean = v.iter().sum::<f64>() / n as f64;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
            for a in v.iter_mut() {
                let t = g[ch] * (*a - mean) / (var + 1e-5).sqrt() + b[ch];
                *a = if t > 0.0 { t } else { 0.01 * t };
            }
        }
    };
    let c = 2;
    let mut h = conv3(x, 1, &seg("stem.conv.w"), c);
    norm_act(&mut h, c, &seg("stem.norm.gamma"), &seg("stem.norm.beta"));
    for b in 0..2 {
        let mut r = conv3(&h, c, &seg(&format!("enc0.res{b}.conv.w")), c);
        norm_act(&mut r, c, &seg(&format!("enc0.res{b}.norm.gamma")), &seg(&format!("enc0.res{b}.norm.beta")));
        for i in 0..h.len() {
            h[i] += r[i];
        }
    }
    let (hw, hb) = (seg("head.w"), seg("head.b"));
    let mut out = vec![0.0; 3 * n];
    for k in 0..3 {
        for i in 0..n {
            out[k * n + i] = hb[k] + (0..c).map(|ci| hw[k * c + ci] * h[ci * n + i]).sum::<f64>();
        }
    }
    out
}

#[test]
fn forward_matches_reference_evaluation() {
    for seed in 0..3 {
        let mut model = build_model(&tiny_cfg(), seed).unwrap();
        // non-trivial norm and head parameters
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for name in ["stem.norm.gamma", "enc0.res1.norm.beta", "head.b"] {
            for v in model.segment_mut(name).unwrap() {
                *v = rng.random_range(-1.5..1.5);
            }
        }
        let (xs, _) = batch(seed, 1, [8, 8, 8]);
        let fast = model.forward(&xs).unwrap();
        let slow = reference_forward(&model, &xs[0].data);
        for (a, b) in fast[0].data.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn single_stage_preserves_spatial_dims() {
    let m = build_model(&tiny_cfg(), 0).unwrap();
    let out = m.forward(&batch(0, 1, [8, 8, 8]).0).unwrap();
    assert_eq!(out[0].dims, [8, 8, 8]);
}

#[test]
fn zero_input_and_zero_head_give_constant_logits() {
    let cfg = NetConfig {
        stages: 2,
        ..tiny_cfg()
    };
    let mut m = build_model(&cfg, 1).unwrap();
    m.segment_mut("head.w").unwrap().fill(0.0);
    m.segment_mut("head.b").unwrap().copy_from_slice(&[0.5, -1.0, 2.0]);
    let out = m.forward(&[Act::zeros(1, [8, 8, 8])]).unwrap();
    for k in 0..3 {
        let ch = out[0].channel(k);
        assert!(ch.iter().all(|&v| v == ch[0]));
    }
}

#[test]
fn batch_items_are_independent() {
    let cfg = NetConfig {
        stages: 2,
        ..tiny_cfg()
    };
    let m = build_model(&cfg, 2).unwrap();
    let (xs, _) = batch(9, 2, [8, 8, 8]);
    let dup = vec![xs[0].clone(), xs[1].clone(), xs[0].clone()];
    let out = m.forward(&dup).unwrap();
    assert_eq!(out[0], out[2]);
    assert_eq!(out[1], m.forward(&xs[1..]).unwrap()[0]);
}

