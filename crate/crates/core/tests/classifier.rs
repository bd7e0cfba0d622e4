mod common;

use common::*;
use proptest::prelude::*;
use radpos::classifier::{
    build_training_labels, local_stats, predict_probability_map, prepare_input, roi_accuracy, softmax, train,
    FeatureMatrix, InputLayout, Objective, TrainConfig, VoxelClass, VoxelClassifierModel,
};
use radpos::cohort::{SignificanceRule, Split};
use radpos::phantom::{build_cohort, PhantomConfig};
use radpos::pipeline::{infer_all, train_model, PipelineConfig};
use radpos::volume::{Channel, ChannelName, Shape, Spacing, VolumeBundle};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_problem(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> (FeatureMatrix, Vec<VoxelClass>) {
    let data: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    let labels = (0..rows).map(|r| VoxelClass::ALL[r % 3]).collect();
    (FeatureMatrix { rows, cols, data }, labels)
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (x, y) = random_problem(&mut rng, 300, 11);
    let obj = Objective::new(x, &y, [1.5, 0.7, 0.2], 1e-2).unwrap();
    let h = 1e-5;
    for _ in 0..10 {
        let w: Vec<f64> = (0..obj.n_params())
            .map(|_| 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let (_, g) = obj.loss_and_gradient(&w);
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..w.len() {
            let mut a = w.clone();
            let mut b = w.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (obj.loss(&a) - obj.loss(&b)) / (2.0 * h);
            num += (g[i] - fd).powi(2);
            den += g[i].powi(2).max(fd.powi(2));
        }
        let rel = (num / den).sqrt();
        assert!(rel < 1e-5, "relative gradient error {rel}");
    }
}

fn random_input(rng: &mut ChaCha8Rng, shape: Shape) -> VolumeBundle {
    let n = shape.voxel_count();
    let mut scalar = || (0..n).map(|_| rng.random_range(-3.0f32..3.0)).collect::<Vec<_>>();
    let (t2, adc, dwi) = (scalar(), scalar(), scalar());
    let gland = (0..n).map(|o| (o % 3 != 0) as u8 as f32).collect();
    let roi = (0..n).map(|o| (o % 5 == 0) as u8 as f32).collect();
    VolumeBundle::new(
        shape,
        Spacing::ISOTROPIC_1MM,
        vec![
            Channel::new(ChannelName::T2w, t2),
            Channel::new(ChannelName::Adc, adc),
            Channel::new(ChannelName::DwiHb, dwi),
            Channel::new(ChannelName::RoiMask, roi),
            Channel::new(ChannelName::GlandMask, gland),
        ],
    )
    .unwrap()
}

#[test]
fn probabilities_sum_to_one_on_random_volumes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for layout in [InputLayout::T2, InputLayout::Bpmr] {
        for _ in 0..5 {
            let mut model = VoxelClassifierModel::zero(layout, 1);
            for w in model.weights.iter_mut() {
                *w = 4.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            }
            let bundle = random_input(&mut rng, Shape::new(7, 6, 5));
            let map = predict_probability_map(&model, &bundle).unwrap();
            let p = map.channel(ChannelName::ProbPos).unwrap();
            let q = map.channel(ChannelName::ProbNeg).unwrap();
            let b = map.channel(ChannelName::ProbBg).unwrap();
            for i in 0..p.len() {
                let s = p[i] as f64 + q[i] as f64 + b[i] as f64;
                assert!((s - 1.0).abs() < 1e-6, "sum {s}");
            }
        }
    }
}

#[test]
fn zero_epoch_model_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (x, y) = random_problem(&mut rng, 90, InputLayout::T2.n_features());
    let config = TrainConfig { epochs: 0, radius: 1, ..TrainConfig::default() };
    let (model, history) = train(&x, &y, InputLayout::T2, &config).unwrap();
    assert!(model.weights.iter().all(|w| *w == 0.0));
    assert_eq!(history.losses.len(), 1);
    let map = predict_probability_map(&model, &random_input(&mut rng, Shape::new(5, 5, 5))).unwrap();
    for c in map.channels() {
        assert!(c.data.iter().all(|v| (*v as f64 - 1.0 / 3.0).abs() < 1e-6));
    }
}

#[test]
fn shuffled_rows_give_identical_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (x, y) = random_problem(&mut rng, 5000, InputLayout::Bpmr.n_features());
    let config = TrainConfig { epochs: 25, ..TrainConfig::default() };
    let (a, _) = train(&x, &y, InputLayout::Bpmr, &config).unwrap();
    let mut order: Vec<usize> = (0..x.rows).collect();
    order.shuffle(&mut rng);
    let xs = x.select(&order);
    let ys: Vec<VoxelClass> = order.iter().map(|&i| y[i]).collect();
    let (b, _) = train(&xs, &ys, InputLayout::Bpmr, &config).unwrap();
    assert_eq!(a, b);
}

#[test]
fn labels_conserve_positive_roi_voxels() {
    let cohort = small_cohort(30, 4);
    let shape = cohort.truth.shape();
    for cutoff in [2, 3, 4] {
        for r in &cohort.records {
            let labels = build_training_labels(r, shape, SignificanceRule::GLEASON_3_PLUS_4, cutoff).unwrap();
            let mut union = vec![false; shape.voxel_count()];
            for roi in r.rois.iter().filter(|roi| roi.score.value() >= cutoff) {
                for &(s, l) in roi.voxels.runs() {
                    union[s..s + l].iter_mut().for_each(|u| *u = true);
                }
            }
            let labelled = labels.count(VoxelClass::Positive) + labels.count(VoxelClass::Negative);
            assert_eq!(labelled, union.iter().filter(|u| **u).count());
            for (c, u) in labels.classes.iter().zip(&union) {
                assert_eq!(*c != VoxelClass::Background, *u);
            }
        }
    }
}

#[test]
fn true_and_false_roi_voxel_counts() {
    let cohort = small_cohort(60, 12);
    let shape = cohort.truth.shape();
    let rule = SignificanceRule::GLEASON_3_PLUS_4;
    let mut seen = 0;
    for r in &cohort.records {
        let pos: Vec<_> = r.positive_rois(3).collect();
        let disjoint = pos.iter().enumerate().all(|(i, a)| {
            pos[..i].iter().all(|b| a.voxels.offsets().all(|o| !b.voxels.contains(o)))
        });
        let (tp, fp): (Vec<_>, Vec<_>) = pos.iter().partition(|roi| roi.pathology.unwrap().get() >= 2);
        if !disjoint || tp.is_empty() || fp.is_empty() {
            continue;
        }
        let size = |rois: &[&&radpos::cohort::RoiAnnotation]| rois.iter().map(|r| r.voxels.voxel_count()).sum::<usize>();
        let labels = build_training_labels(r, shape, rule, 3).unwrap();
        assert_eq!(labels.count(VoxelClass::Positive), size(&tp));
        assert_eq!(labels.count(VoxelClass::Negative), size(&fp));
        seen += 1;
    }
    assert!(seen > 0, "no patient with disjoint TP and FP ROIs");
}

fn direct_window(data: &[f32], shape: Shape, r: usize, o: usize) -> (f64, f64) {
    let v = shape.index_of(o);
    let [nx, ny, nz] = shape.as_array();
    let clamp = |c: isize, n: usize| c.clamp(0, n as isize - 1) as usize;
    let r = r as isize;
    let mut vals = Vec::new();
    for dk in -r..=r {
        for dj in -r..=r {
            for di in -r..=r {
                let i = clamp(v.i as isize + di, nx);
                let j = clamp(v.j as isize + dj, ny);
                let k = clamp(v.k as isize + dk, nz);
                vals.push(data[shape.offset(i, j, k)] as f64);
            }
        }
    }
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
    (m, var.sqrt())
}

#[test]
fn local_stats_match_direct_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = Shape::new(6, 5, 7);
    let data: Vec<f32> = (0..shape.voxel_count()).map(|_| rng.random_range(-10.0..10.0)).collect();
    for r in [1, 2] {
        let (mean, sd) = local_stats(&data, shape, r);
        for o in 0..data.len() {
            let (m, s) = direct_window(&data, shape, r, o);
            assert!((mean[o] - m).abs() < 1e-9, "mean at {o}");
            assert!((sd[o] - s).abs() < 1e-6, "sd at {o}");
        }
    }
}

#[test]
fn held_out_roi_accuracy_on_default_phantom() {
    let ph = build_cohort(&PhantomConfig::default()).unwrap();
    let cfg = PipelineConfig::default();
    let (model, _) = train_model(&ph.records, &ph.bundles, &cfg).unwrap();
    let (records, bundles): (Vec<_>, Vec<_>) = ph
        .records
        .iter()
        .zip(&ph.bundles)
        .filter(|(r, _)| r.split == Split::Test)
        .map(|(r, b)| (r.clone(), b.clone()))
        .unzip();
    let maps = infer_all(&model, &records, &bundles, cfg.cutoff).unwrap();
    let (mut hit, mut total) = (0, 0);
    for ((r, b), m) in records.iter().zip(&bundles).zip(&maps) {
        let labels = build_training_labels(r, b.shape(), cfg.rule, cfg.cutoff).unwrap();
        if let Some((h, t)) = roi_accuracy(m, &labels).unwrap() {
            hit += h;
            total += t;
        }
    }
    let acc = hit as f64 / total as f64;
    assert!(acc >= 0.8, "held-out ROI accuracy {acc}");
    let prepared = prepare_input(&bundles[0], &records[0], cfg.cutoff).unwrap();
    assert!(prepared.has_channel(ChannelName::RoiMask));
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(z in prop::array::uniform3(-700.0f64..700.0)) {
        let p = softmax(z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
