mod common;

use common::*;
use proptest::prelude::*;
use radpos::cohort::{RoiAnnotation, RunLengthMask, ScoreScale, SignificanceRule, SuspicionScore};
use radpos::fusion::{
    build_zone_map, classify_roi, combine_with_radiologist, lesion_to_zones, level_counts,
    transfer_to_external_cohort, ConfusionCounts, Level, LevelCounts, MlRates, Source, ZoneTemplate,
    DEFAULT_OVERLAP_MIN,
};
use radpos::metrics::rates;
use radpos::pipeline::{summarize_cohort, PipelineConfig};
use radpos::volume::{Channel, ChannelName, Shape, Spacing, VolumeBundle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn assert_tally(level: Level, lib: &LevelCounts, oracle: &Tally, ctx: &str) {
    assert_eq!(lib.rad.as_array(), oracle.rad, "{level} rad {ctx}");
    assert_eq!(lib.ml.as_array(), oracle.ml, "{level} ml {ctx}");
    assert_eq!(lib.combined.as_array(), oracle.combined, "{level} combined {ctx}");
}

#[test]
fn counts_match_brute_force_on_phantom() {
    let cohort = small_cohort(40, 11);
    let maps = noisy_prob_maps(&cohort, 3);
    let cfg = PipelineConfig::default();
    let cases = summarize_cohort(&cohort.records, &cohort.bundles, &maps, Some(&cohort.truth), &cfg).unwrap();
    for min_grade in [2, 3] {
        let rule = SignificanceRule::new(min_grade).unwrap();
        for cutoff in [2, 3, 4, 5] {
            for t in [0.0, 0.2, 0.5, 0.8, 1.0] {
                let ctx = format!("grade {min_grade} cutoff {cutoff} t {t}");
                let roi = roi_oracle(&cohort.records, &maps, min_grade, cutoff, t);
                assert_tally(Level::Roi, &level_counts(Level::Roi, &cases, rule, cutoff, t).unwrap(), &roi, &ctx);
                let pat = patient_oracle(&cohort.records, &maps, min_grade, cutoff, t);
                assert_tally(Level::Patient, &level_counts(Level::Patient, &cases, rule, cutoff, t).unwrap(), &pat, &ctx);
            }
        }
    }
    // zone truth is fixed by the configured rule when the cases are built
    for cutoff in [2, 3, 4] {
        for t in [0.0, 0.3, 0.9] {
            let z = zone_oracle(&cohort, &maps, [2, 2, 5], DEFAULT_OVERLAP_MIN, 2, cutoff, t);
            let lib = level_counts(Level::Zone, &cases, cfg.rule, cutoff, t).unwrap();
            assert_tally(Level::Zone, &lib, &z, &format!("cutoff {cutoff} t {t}"));
        }
    }
}

#[test]
fn patient_counts_match_on_200_patients() {
    let cohort = small_cohort(200, 5);
    let maps = noisy_prob_maps(&cohort, 9);
    let cfg = PipelineConfig::default();
    let cases = summarize_cohort(&cohort.records, &cohort.bundles, &maps, None, &cfg).unwrap();
    for t in [0.0, 0.1, 0.5] {
        let lib = level_counts(Level::Patient, &cases, cfg.rule, 3, t).unwrap();
        assert_tally(Level::Patient, &lib, &patient_oracle(&cohort.records, &maps, 2, 3, t), &format!("t {t}"));
    }
}

#[test]
fn roi_fraction_matches_voxel_loop() {
    let shape = Shape::new(9, 7, 5);
    let n = shape.voxel_count();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let mut p = Vec::with_capacity(n);
        let mut q = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for _ in 0..n {
            let raw: [f32; 3] = [rng.random(), rng.random(), rng.random()];
            let s: f32 = raw.iter().sum();
            p.push(raw[0] / s);
            q.push(raw[1] / s);
            b.push(1.0 - raw[0] / s - raw[1] / s);
        }
        let map = VolumeBundle::new(
            shape,
            Spacing::ISOTROPIC_1MM,
            vec![
                Channel::new(ChannelName::ProbPos, p),
                Channel::new(ChannelName::ProbNeg, q),
                Channel::new(ChannelName::ProbBg, b),
            ],
        )
        .unwrap();
        let offsets: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.3)).collect();
        let voxels = RunLengthMask::from_offsets(offsets).unwrap();
        let roi = RoiAnnotation {
            roi_id: "r".into(),
            voxels: voxels.clone(),
            score: SuspicionScore::new(ScoreScale::Ucla, 4).unwrap(),
            pathology: None,
        };
        let d = classify_roi(&map, &roi, 0.4).unwrap();
        let expected = roi_fraction(&map, voxels.runs());
        assert_eq!(d.positive_fraction, expected);
        assert_eq!(d.decision, expected > 0.4);
    }
}

#[test]
fn fusion_example_matches_case_simulation() {
    let rad = ConfusionCounts::new(Source::Rad, Level::Roi).with_counts(100, 200, 500, 50);
    let ml = ConfusionCounts::new(Source::MlOnPositives, Level::Roi).with_counts(80, 50, 150, 20);
    let c = combine_with_radiologist(&rad, &ml).unwrap();
    assert_eq!(c.as_array(), [80, 50, 650, 70]);
    let mut sim = [0u64; 4];
    let cases = std::iter::repeat_n((true, true, true), 80)
        .chain(std::iter::repeat_n((true, false, true), 20))
        .chain(std::iter::repeat_n((true, true, false), 50))
        .chain(std::iter::repeat_n((true, false, false), 150))
        .chain(std::iter::repeat_n((false, false, false), 500))
        .chain(std::iter::repeat_n((false, false, true), 50));
    for (rad_call, ml_call, truth) in cases {
        bump(&mut sim, rad_call && ml_call, truth);
    }
    assert_eq!(c.as_array(), sim);
    let r = rates(&c);
    assert!((r.sen.unwrap() - 0.5333).abs() < 5e-5);
    assert!((r.spc.unwrap() - 0.9286).abs() < 5e-5);
}

#[test]
fn transfer_reproduces_sensitivity_row() {
    let rad = ConfusionCounts::new(Source::Rad, Level::Patient).with_counts(5866, 2747, 7253, 4134);
    let e = transfer_to_external_cohort(MlRates { sen: 0.6512, spc: 0.0 }, &rad).unwrap();
    let sen = e.tp / (e.tp + e.fn_);
    assert!((sen * 100.0 - 38.20).abs() < 0.02, "{sen}");
}

#[test]
fn phantom_roi_spanning_three_sectors() {
    // gland is the cube 2..=21; with 2×2×5 splits x breaks at 12, y at 12
    // and z every 4 voxels from 2
    let shape = Shape::new(24, 24, 24);
    let gland: Vec<f32> = (0..shape.voxel_count())
        .map(|o| {
            let v = shape.index_of(o);
            [v.i, v.j, v.k].iter().all(|c| (2..=21).contains(c)) as u8 as f32
        })
        .collect();
    let map = build_zone_map(shape, &gland, ZoneTemplate::default()).unwrap();
    let cube = |x: std::ops::Range<usize>, y: std::ops::Range<usize>, z: std::ops::Range<usize>| {
        let mut v = Vec::new();
        for k in z {
            for j in y.clone() {
                for i in x.clone() {
                    v.push(shape.offset(i, j, k));
                }
            }
        }
        v
    };
    let mut voxels = cube(8..12, 4..8, 2..6);
    voxels.extend(cube(12..16, 4..8, 2..6));
    voxels.extend(cube(8..12, 4..8, 6..10));
    let roi = RunLengthMask::from_offsets(voxels).unwrap();
    let zones: Vec<u32> = lesion_to_zones(&roi, &map, DEFAULT_OVERLAP_MIN).into_iter().collect();
    assert_eq!(zones, vec![1, 2, 5]);
    assert_eq!(map.zones(), zone_ids(shape, &gland, [2, 2, 5]).as_slice());
}

#[test]
fn zones_partition_phantom_glands() {
    let cohort = small_cohort(10, 2);
    for b in &cohort.bundles {
        let gland = b.channel(ChannelName::GlandMask).unwrap();
        let map = build_zone_map(b.shape(), gland, ZoneTemplate::default()).unwrap();
        for (z, g) in map.zones().iter().zip(gland) {
            assert_eq!(*z == 0, *g == 0.0);
            assert!(*z as usize <= 20);
        }
        let sizes: usize = (1..=20).map(|z| map.zone_size(z)).sum();
        assert_eq!(sizes, gland.iter().filter(|g| **g != 0.0).count());
        assert_eq!(map.zones(), zone_ids(b.shape(), gland, [2, 2, 5]).as_slice());
    }
}

prop_compose! {
    fn tabulation()(tp in 1u64..500, fp in 1u64..500, tn in 0u64..500, fn_ in 0u64..500)
        (ptp in 0..=tp, ptn in 0..=fp, tp in Just(tp), fp in Just(fp), tn in Just(tn), fn_ in Just(fn_))
        -> (ConfusionCounts, ConfusionCounts) {
        (
            ConfusionCounts::new(Source::Rad, Level::Patient).with_counts(tp, fp, tn, fn_),
            ConfusionCounts::new(Source::MlOnPositives, Level::Patient).with_counts(ptp, fp - ptn, ptn, tp - ptp),
        )
    }
}

proptest! {
    #[test]
    fn fusion_identities_hold((rad, ml) in tabulation()) {
        let c = combine_with_radiologist(&rad, &ml).unwrap();
        prop_assert_eq!(c.total(), rad.total());
        // cross-multiplied so the comparison is exact in integers
        let (sen_n, sen_d) = (rad.tp as u128 * ml.tp as u128, (rad.tp + rad.fn_) as u128 * (ml.tp + ml.fn_) as u128);
        prop_assert_eq!(c.tp as u128 * sen_d, sen_n * (c.tp + c.fn_) as u128);
        let spc_n = rad.tn as u128 * (ml.tn + ml.fp) as u128 + rad.fp as u128 * ml.tn as u128;
        let spc_d = (rad.tn + rad.fp) as u128 * (ml.tn + ml.fp) as u128;
        prop_assert_eq!(c.tn as u128 * spc_d, spc_n * (c.tn + c.fp) as u128);
        let r = rates(&rad);
        let f = rates(&c);
        prop_assert!(f.sen.unwrap() <= r.sen.unwrap() + 1e-12);
        prop_assert!(f.spc.unwrap() >= r.spc.unwrap() - 1e-12);
    }

    #[test]
    fn incompatible_counts_are_rejected((rad, ml) in tabulation(), extra in 1u64..10) {
        let bad = ml.with_counts(ml.tp + extra, ml.fp, ml.tn, ml.fn_);
        prop_assert!(combine_with_radiologist(&rad, &bad).is_err());
    }
}
