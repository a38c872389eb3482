use std::collections::BTreeSet;

use proptest::prelude::*;
use pvseg_net::augment::{apply_spatial, augment, AugmentConfig, Displacement, Patch, SpatialTransform};
use pvseg_net::Act;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ramp_patch(dims: [usize; 3]) -> Patch {
    let n: usize = dims.iter().product();
    Patch {
        image: Act {
            c: 1,
            dims,
            data: (0..n).map(|i| (i as f64 * 0.37).sin()).collect(),
        },
        labels: (0..n).map(|i| (i % 3) as u8).collect(),
    }
}

fn at(dims: [usize; 3], i: usize, j: usize, k: usize) -> usize {
    i + dims[0] * (j + dims[1] * k)
}

#[test]
fn disabled_config_is_identity() {
    let p = ramp_patch([6, 5, 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(augment(p.clone(), &AugmentConfig::disabled(), &mut rng), p);
}

#[test]
fn mirror_twice_is_identity_and_flips_indices() {
    let dims = [6, 5, 4];
    let p = ramp_patch(dims);
    let t = SpatialTransform {
        flips: [true, false, true],
        ..Default::default()
    };
    let once = apply_spatial(&p, &t);
    assert_eq!(once.image.data[at(dims, 0, 2, 0)], p.image.data[at(dims, 5, 2, 3)]);
    assert_eq!(once.labels[at(dims, 1, 4, 1)], p.labels[at(dims, 4, 4, 2)]);
    assert_eq!(apply_spatial(&once, &t), p);
}

#[test]
fn quarter_turn_permutes_voxels_exactly() {
    // odd cube: the centre is a voxel, so a quarter turn maps the lattice onto itself
    let dims = [9, 9, 9];
    let mut labels = vec![0u8; 729];
    for i in 1..8 {
        labels[at(dims, i, 4, 4)] = 1;
        labels[at(dims, i, 5, 4)] = 2;
    }
    let p = Patch {
        image: Act {
            c: 1,
            dims,
            data: labels.iter().map(|&l| l as f64).collect(),
        },
        labels,
    };
    let t = SpatialTransform {
        matrix: [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
        ..Default::default()
    };
    let r = apply_spatial(&p, &t);
    for l in 0..3u8 {
        assert_eq!(r.labels.iter().filter(|&&x| x == l).count(), p.labels.iter().filter(|&&x| x == l).count());
    }
    // output (i,j) reads source (c-(j-c), c+(i-c)) = (8-j, i)
    for j in 0..9 {
        for i in 0..9 {
            assert_eq!(r.labels[at(dims, i, j, 4)], p.labels[at(dims, 8 - j, i, 4)]);
            assert_eq!(r.image.data[at(dims, i, j, 4)], p.image.data[at(dims, 8 - j, i, 4)]);
        }
    }
}

#[test]
fn integer_shift_pairs_image_and_labels() {
    let dims = [8, 6, 5];
    let p = ramp_patch(dims);
    let t = SpatialTransform {
        displacement: Some(Displacement::constant(dims, 4, [2.0, -1.0, 0.0])),
        ..Default::default()
    };
    let r = apply_spatial(&p, &t);
    for k in 0..5 {
        for j in 0..6 {
            for i in 0..8 {
                let o = at(dims, i, j, k);
                let (si, sj) = (i as i64 + 2, j as i64 - 1);
                if si < 8 && sj >= 0 {
                    let s = at(dims, si as usize, sj as usize, k);
                    assert_eq!(r.labels[o], p.labels[s]);
                    assert!((r.image.data[o] - p.image.data[s]).abs() < 1e-12);
                } else {
                    assert_eq!(r.labels[o], 255);
                    assert_eq!(r.image.data[o], 0.0);
                }
            }
        }
    }
}

#[test]
fn displacement_interpolates_nodes() {
    let mut d = Displacement::constant([8, 8, 8], 4, [0.0; 3]);
    let n = d.nodes;
    d.data[1 + n[0] * (1 + n[1])] = [8.0, 0.0, 0.0];
    assert_eq!(d.at([4.0, 4.0, 4.0]), [8.0, 0.0, 0.0]);
    assert_eq!(d.at([2.0, 4.0, 4.0]), [4.0, 0.0, 0.0]);
    assert_eq!(d.at([2.0, 2.0, 2.0]), [1.0, 0.0, 0.0]);
}

#[test]
fn invalid_configs_rejected() {
    let bad = [
        AugmentConfig {
            mirror_p: 1.5,
            ..Default::default()
        },
        AugmentConfig {
            scale_range: [1.2, 0.8],
            ..Default::default()
        },
        AugmentConfig {
            elastic_spacing: 0,
            ..Default::default()
        },
    ];
    for c in bad {
        assert!(c.validate().is_err());
    }
    assert!(AugmentConfig::default().validate().is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn augmented_labels_come_from_source_or_ignore(seed in any::<u64>()) {
        let p = ramp_patch([8, 8, 8]);
        let cfg = AugmentConfig {
            rotation_p: 1.0,
            scale_p: 1.0,
            elastic_p: 1.0,
            noise_p: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = augment(p, &cfg, &mut rng);
        let allowed: BTreeSet<u8> = [0, 1, 2, 255].into();
        prop_assert!(r.labels.iter().all(|l| allowed.contains(l)));
        prop_assert!(r.image.data.iter().all(|v| v.is_finite()));
        prop_assert_eq!(r.labels.len(), 512);
    }

    #[test]
    fn augmentation_is_reproducible(seed in any::<u64>()) {
        let p = ramp_patch([6, 6, 6]);
        let cfg = AugmentConfig::default();
        let a = augment(p.clone(), &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = augment(p, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn mirror_only_keeps_image_label_pairing(seed in any::<u64>()) {
        let mut p = ramp_patch([5, 6, 7]);
        p.image.data = p.labels.iter().map(|&l| l as f64).collect();
        let cfg = AugmentConfig { mirror: true, ..AugmentConfig::disabled() };
        let r = augment(p, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        for (v, l) in r.image.data.iter().zip(&r.labels) {
            prop_assert_eq!(*v, *l as f64);
        }
    }
}
