use atlasforge::fusion::{
    consensus_roi, majority_vote, mrf_regularize, rank_global, staple_multilabel, steps_fuse,
    vote_prior, FusionConfig, FusionMode,
};
use atlasforge::grid::{AtlasPair, ImageGrid, LabelMap, RoiBox, Structure};
use atlasforge::metrics::dice;
use atlasforge::phantom::{make_phantom, PhantomSpec};
use atlasforge::registration::lncc_map;
use atlasforge::transform::{resample_intensity, resample_labels, DisplacementField, Geometry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_stack(rng: &mut ChaCha8Rng, m: usize, w: usize, h: usize) -> Vec<LabelMap> {
    (0..m)
        .map(|_| {
            LabelMap::new(
                w,
                h,
                [1.0, 1.0],
                (0..w * h).map(|_| rng.gen_range(0..3u8)).collect(),
            )
            .unwrap()
        })
        .collect()
}

#[test]
fn majority_matches_exhaustive_mode_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let m = rng.gen_range(1..=8);
        let (w, h) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let stack = random_stack(&mut rng, m, w, h);
        let mv = majority_vote(&stack).unwrap();
        for i in 0..w * h {
            let mut best = (0usize, 0u8);
            for l in 0..3u8 {
                let c = stack.iter().filter(|s| s.data()[i] == l).count();
                // strictly greater keeps the smallest label on ties
                if c > best.0 {
                    best = (c, l);
                }
            }
            assert_eq!(mv.data()[i], best.1);
        }
    }
}

#[test]
fn consensus_roi_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let m = rng.gen_range(1..=6);
        let stack = random_stack(&mut rng, m, 8, 8);
        let roi = consensus_roi(&stack).unwrap();
        for (i, &flag) in roi.iter().enumerate() {
            let distinct: std::collections::BTreeSet<u8> =
                stack.iter().map(|s| s.data()[i]).collect();
            assert_eq!(flag, distinct.len() >= 2);
        }
    }
}

fn truth_map(w: usize, h: usize) -> LabelMap {
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let data = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64 - cx, (i / w) as f64 - cy);
            // three classes of roughly equal area
            let r = (x * x + y * y).sqrt();
            if r < 10.4 {
                1
            } else if r < 14.7 {
                2
            } else {
                0
            }
        })
        .collect();
    LabelMap::new(w, h, [1.0, 1.0], data).unwrap()
}

fn noisy_rater(truth: &LabelMap, p: f64, rng: &mut ChaCha8Rng) -> LabelMap {
    let data = truth
        .data()
        .iter()
        .map(|&l| {
            if rng.gen_bool(p) {
                (l + rng.gen_range(1..3u8)) % 3
            } else {
                l
            }
        })
        .collect();
    LabelMap::new(truth.width(), truth.height(), truth.spacing(), data).unwrap()
}

#[test]
fn staple_recovers_truth_and_rater_quality() {
    let truth = truth_map(32, 32);
    let config = FusionConfig::default();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack: Vec<LabelMap> = (0..5).map(|_| noisy_rater(&truth, 0.1, &mut rng)).collect();
        let roi = consensus_roi(&stack).unwrap();
        let prior = vote_prior(&stack, None).unwrap();
        let st = staple_multilabel(&stack, &roi, &prior, &config).unwrap();
        let labels = st.posterior.argmax();
        let agree = labels
            .data()
            .iter()
            .zip(truth.data())
            .filter(|(a, b)| a == b)
            .count() as f64
            / 1024.0;
        assert!(agree >= 0.98, "seed {seed}: agreement {agree}");
        for c in &st.confusion {
            for d in c.diagonal() {
                assert!((d - 0.9).abs() <= 0.05, "seed {seed}: diagonal {d}");
            }
        }
    }
}

#[test]
fn staple_with_identical_raters_is_their_map() {
    let truth = truth_map(16, 16);
    let stack = vec![truth.clone(); 3];
    let roi = consensus_roi(&stack).unwrap();
    let st = staple_multilabel(
        &stack,
        &roi,
        &vote_prior(&stack, None).unwrap(),
        &FusionConfig::default(),
    )
    .unwrap();
    assert_eq!(st.posterior.argmax(), truth);
    assert_eq!(mrf_regularize(&st.posterior, 0.5, 5).argmax(), truth);
}

fn phantom_pair(seed: u64) -> AtlasPair {
    make_phantom(
        &PhantomSpec {
            seed,
            ..PhantomSpec::small()
        },
        format!("p{seed}"),
    )
    .unwrap()
    .pair
}

fn shift_pair(p: &AtlasPair, d: [f64; 2], id: &str) -> AtlasPair {
    let field = DisplacementField::constant(Geometry::of(&p.intensity), [-d[0], -d[1]]);
    AtlasPair::new(
        id,
        resample_intensity(&p.intensity, &field),
        resample_labels(&p.labels, &field),
    )
    .unwrap()
}

#[test]
fn rank_global_matches_direct_mean_lncc() {
    let target = phantom_pair(1).intensity;
    let atlases: Vec<AtlasPair> = (0..4)
        .map(|k| {
            shift_pair(
                &phantom_pair(10 + k),
                [k as f64, -(k as f64)],
                &format!("a{k}"),
            )
        })
        .collect();
    let roi = RoiBox::new(10, 12, 50, 40).unwrap();
    let ranking = rank_global(&target, &atlases, roi, 2.0).unwrap();
    for &(i, score) in &ranking {
        let map = lncc_map(&target, &atlases[i].intensity, 2.0).unwrap();
        let mut sum = 0.0;
        for y in 12..40 {
            for x in 10..50 {
                sum += map[y * 64 + x];
            }
        }
        assert!((score - sum / (40.0 * 28.0)).abs() < 1e-12);
    }
    assert!(ranking.windows(2).all(|w| w[0].1 >= w[1].1));
    assert_eq!(ranking[0].0, 0, "the unshifted atlas ranks first");
}

#[test]
fn ranking_is_invariant_to_affine_intensity_rescaling() {
    let target = phantom_pair(2).intensity;
    let atlases: Vec<AtlasPair> = (0..5)
        .map(|k| {
            shift_pair(
                &phantom_pair(20 + k),
                [0.7 * k as f64, 0.3 * k as f64],
                &format!("a{k}"),
            )
        })
        .collect();
    let roi = RoiBox::full(&target);
    let base = rank_global(&target, &atlases, roi, 2.0).unwrap();
    let scaled = ImageGrid::new(
        64,
        64,
        [1.0, 1.0],
        target.data().iter().map(|v| 3.0 * v + 40.0).collect(),
    )
    .unwrap();
    let other = rank_global(&scaled, &atlases, roi, 2.0).unwrap();
    let order = |r: &[(usize, f64)]| r.iter().map(|p| p.0).collect::<Vec<_>>();
    assert_eq!(order(&base), order(&other));
    for (a, b) in base.iter().zip(&other) {
        assert!((a.1 - b.1).abs() < 1e-6);
    }
}

/// One atlas aligned with the target, the rest shifted by 3 to 6 px.
pub fn mixed_stack(seed: u64, misaligned: usize) -> (ImageGrid, LabelMap, Vec<AtlasPair>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = phantom_pair(1000 + seed);
    let mut atlases = vec![AtlasPair::new(
        "good",
        phantom_pair(2000 + seed).intensity,
        target.labels.clone(),
    )
    .unwrap()];
    for k in 0..misaligned {
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let mag = rng.gen_range(3.0..6.0);
        let src = phantom_pair(3000 + 10 * seed + k as u64);
        atlases.push(shift_pair(
            &src,
            [mag * angle.cos(), mag * angle.sin()],
            &format!("bad{k}"),
        ));
    }
    (target.intensity, target.labels, atlases)
}

#[test]
fn local_fusion_beats_majority_on_mixed_stacks() {
    let config = FusionConfig::default();
    let mut wins = 0;
    for seed in 0..10 {
        let (target, truth, atlases) = mixed_stack(seed, 4);
        let fused = steps_fuse(&target, &atlases, &config, FusionMode::LocalN).unwrap();
        let stack: Vec<LabelMap> = atlases.iter().map(|a| a.labels.clone()).collect();
        let mv = majority_vote(&stack).unwrap();
        let d = |m: &LabelMap| {
            dice(m, &truth, Structure::Endocardium).unwrap()
                + dice(m, &truth, Structure::Epicardium).unwrap()
        };
        if d(&fused.labels) >= d(&mv) {
            wins += 1;
        }
    }
    assert!(wins >= 9, "{wins}/10");
}

#[test]
fn steps_is_deterministic_and_reports_selection() {
    let (target, _, atlases) = mixed_stack(3, 5);
    let config = FusionConfig {
        top_fraction: 0.5,
        ..Default::default()
    };
    let a = steps_fuse(&target, &atlases, &config, FusionMode::GlobalTop).unwrap();
    let b = steps_fuse(&target, &atlases, &config, FusionMode::GlobalTop).unwrap();
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.report.to_text(), b.report.to_text());
    assert_eq!(a.report.selected.len(), 3);
    assert_eq!(a.report.selected[0], "good");
    let too_few = steps_fuse(&target, &atlases[..1], &config, FusionMode::LocalN);
    assert!(too_few.is_err());
}
