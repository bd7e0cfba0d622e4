//! Brute-force oracles and fixtures shared by the integration tests.
//! Nothing here calls the counting code under test.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use radpos::cohort::PatientRecord;
use radpos::phantom::{build_cohort, PhantomCohort, PhantomConfig, PatientTruth};
use radpos::volume::{Channel, ChannelName, Shape, Spacing, VolumeBundle};

pub const TP: usize = 0;
pub const FP: usize = 1;
pub const TN: usize = 2;
pub const FN: usize = 3;

/// 24³ voxels at 2 mm; quick to generate.
pub fn small_config(n: usize, seed: u64) -> PhantomConfig {
    PhantomConfig {
        n_patients: n,
        seed,
        shape: [24, 24, 24],
        spacing_mm: [2.0, 2.0, 2.0],
        gland_radius_mm: [14.0, 20.0],
        ..PhantomConfig::default()
    }
}

pub fn small_cohort(n: usize, seed: u64) -> PhantomCohort {
    build_cohort(&small_config(n, seed)).expect("phantom builds")
}

/// Probability maps loosely correlated with lesion grade, so ROI fractions
/// spread over (0, 1).
pub fn noisy_prob_maps(cohort: &PhantomCohort, seed: u64) -> Vec<VolumeBundle> {
    let shape = cohort.truth.shape();
    let spacing = cohort.truth.spacing();
    cohort
        .truth
        .patients
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let grades = p.grade_map(shape, spacing);
            let n = shape.voxel_count();
            let (mut pp, mut pn, mut pb) = (vec![0f32; n], vec![0f32; n], vec![0f32; n]);
            for o in 0..n {
                let base = if grades[o] >= 2 { 0.55 } else { 0.25 };
                let a: f64 = base + rng.random_range(0.0..0.45);
                let b: f64 = rng.random_range(0.05..0.6);
                let c: f64 = rng.random_range(0.05..0.4);
                let s = a + b + c;
                pp[o] = (a / s) as f32;
                pn[o] = (b / s) as f32;
                pb[o] = 1.0 - pp[o] - pn[o];
            }
            VolumeBundle::new(
                shape,
                spacing,
                vec![
                    Channel::new(ChannelName::ProbPos, pp),
                    Channel::new(ChannelName::ProbNeg, pn),
                    Channel::new(ChannelName::ProbBg, pb),
                ],
            )
            .expect("valid probability map")
        })
        .collect()
}

pub fn bump(c: &mut [u64; 4], call: bool, truth: bool) {
    let idx = match (call, truth) {
        (true, true) => TP,
        (true, false) => FP,
        (false, false) => TN,
        (false, true) => FN,
    };
    c[idx] += 1;
}

/// Radiologist, ML-on-positives and fused tallies as `[tp, fp, tn, fn]`.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Tally {
    pub rad: [u64; 4],
    pub ml: [u64; 4],
    pub combined: [u64; 4],
}

impl Tally {
    fn add(&mut self, rad: bool, ml: bool, truth: bool) {
        bump(&mut self.rad, rad, truth);
        if rad {
            bump(&mut self.ml, ml, truth);
        }
        bump(&mut self.combined, rad && ml, truth);
    }
}

fn channel<'a>(b: &'a VolumeBundle, name: ChannelName) -> &'a [f32] {
    b.channels()
        .iter()
        .find(|c| c.name == name)
        .map(|c| c.data.as_slice())
        .expect("channel present")
}

/// Fraction of ROI voxels where prob_pos is the (positive-first) argmax,
/// by walking the runs directly.
pub fn roi_fraction(prob_map: &VolumeBundle, runs: &[(usize, usize)]) -> f64 {
    let p = channel(prob_map, ChannelName::ProbPos);
    let n = channel(prob_map, ChannelName::ProbNeg);
    let b = channel(prob_map, ChannelName::ProbBg);
    let mut hits = 0usize;
    let mut size = 0usize;
    for &(start, len) in runs {
        for o in start..start + len {
            size += 1;
            if p[o] >= n[o] && p[o] >= b[o] {
                hits += 1;
            }
        }
    }
    hits as f64 / size as f64
}

pub fn roi_oracle(records: &[PatientRecord], maps: &[VolumeBundle], min_grade: u8, cutoff: u8, t: f64) -> Tally {
    let mut tally = Tally::default();
    for (r, m) in records.iter().zip(maps) {
        for roi in &r.rois {
            let Some(g) = roi.pathology else { continue };
            let rad = roi.score.value() >= cutoff;
            let ml = roi_fraction(m, roi.voxels.runs()) > t;
            tally.add(rad, ml, g.get() >= min_grade);
        }
    }
    tally
}

pub fn patient_oracle(records: &[PatientRecord], maps: &[VolumeBundle], min_grade: u8, cutoff: u8, t: f64) -> Tally {
    let mut tally = Tally::default();
    for (r, m) in records.iter().zip(maps) {
        if r.cores.is_empty() {
            continue;
        }
        let truth = r.cores.iter().any(|c| c.grade.get() >= min_grade);
        let mut rad = false;
        let mut ml = false;
        for roi in &r.rois {
            if roi.score.value() >= cutoff {
                rad = true;
                if roi_fraction(m, roi.voxels.runs()) > t {
                    ml = true;
                }
            }
        }
        tally.add(rad, ml, truth);
    }
    tally
}

/// Zone id per voxel: the gland bounding box cut into `splits` equal slabs
/// per axis, ids x-fastest from 1; 0 outside the gland.
pub fn zone_ids(shape: Shape, gland: &[f32], splits: [usize; 3]) -> Vec<u32> {
    let [nx, ny, nz] = shape.as_array();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if gland[i + nx * (j + ny * k)] != 0.0 {
                    for (a, c) in [i, j, k].into_iter().enumerate() {
                        lo[a] = lo[a].min(c);
                        hi[a] = hi[a].max(c);
                    }
                }
            }
        }
    }
    let mut out = vec![0u32; gland.len()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let o = i + nx * (j + ny * k);
                if gland[o] == 0.0 {
                    continue;
                }
                let s: Vec<usize> = [i, j, k]
                    .iter()
                    .enumerate()
                    .map(|(a, c)| (c - lo[a]) * splits[a] / (hi[a] - lo[a] + 1))
                    .collect();
                out[o] = (1 + s[0] + splits[0] * (s[1] + splits[1] * s[2])) as u32;
            }
        }
    }
    out
}

/// Zones whose overlap with `voxels` exceeds `overlap_min` of the zone or of
/// the voxel set.
pub fn claimed_zones(voxels: &[usize], zones: &[u32], n_zones: usize, overlap_min: f64) -> Vec<bool> {
    let mut size = vec![0usize; n_zones + 1];
    for z in zones {
        size[*z as usize] += 1;
    }
    let mut hit = vec![0usize; n_zones + 1];
    for o in voxels {
        hit[zones[*o] as usize] += 1;
    }
    (0..=n_zones)
        .map(|z| {
            z > 0
                && hit[z] > 0
                && (hit[z] as f64 / size[z] as f64 > overlap_min || hit[z] as f64 / voxels.len() as f64 > overlap_min)
        })
        .collect()
}

/// Offsets inside a lesion sphere, by testing every voxel of the volume.
pub fn sphere_voxels(center: [f64; 3], radius_mm: f64, shape: Shape, spacing: Spacing) -> Vec<usize> {
    let [nx, ny, nz] = shape.as_array();
    let mut out = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let d2: f64 = [i, j, k]
                    .iter()
                    .enumerate()
                    .map(|(a, c)| ((*c as f64 - center[a]) * spacing.0[a]).powi(2))
                    .sum();
                if d2 <= radius_mm * radius_mm {
                    out.push(i + nx * (j + ny * k));
                }
            }
        }
    }
    out
}

pub fn zone_truth(p: &PatientTruth, zones: &[u32], n_zones: usize, shape: Shape, spacing: Spacing, min_grade: u8, overlap_min: f64) -> Vec<bool> {
    let mut out = vec![false; n_zones + 1];
    for l in p.lesions.iter().filter(|l| l.grade >= min_grade) {
        let v = sphere_voxels(l.sphere.center, l.sphere.radius_mm, shape, spacing);
        if v.is_empty() {
            continue;
        }
        for (z, c) in claimed_zones(&v, zones, n_zones, overlap_min).into_iter().enumerate() {
            out[z] |= c;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn zone_oracle(
    cohort: &PhantomCohort,
    maps: &[VolumeBundle],
    splits: [usize; 3],
    overlap_min: f64,
    min_grade: u8,
    cutoff: u8,
    t: f64,
) -> Tally {
    let shape = cohort.truth.shape();
    let spacing = cohort.truth.spacing();
    let n_zones = splits.iter().product::<usize>();
    let mut tally = Tally::default();
    for ((r, b), (m, p)) in cohort.records.iter().zip(&cohort.bundles).zip(maps.iter().zip(&cohort.truth.patients)) {
        let zones = zone_ids(shape, channel(b, ChannelName::GlandMask), splits);
        let truth = zone_truth(p, &zones, n_zones, shape, spacing, min_grade, overlap_min);
        let mut rad = vec![false; n_zones + 1];
        let mut ml = vec![false; n_zones + 1];
        for roi in r.rois.iter().filter(|roi| roi.score.value() >= cutoff) {
            let voxels: Vec<usize> = roi.voxels.runs().iter().flat_map(|&(s, l)| s..s + l).collect();
            let call = roi_fraction(m, roi.voxels.runs()) > t;
            for (z, c) in claimed_zones(&voxels, &zones, n_zones, overlap_min).into_iter().enumerate() {
                if c {
                    rad[z] = true;
                    ml[z] |= call;
                }
            }
        }
        for z in 1..=n_zones {
            tally.add(rad[z], ml[z], truth[z]);
        }
    }
    tally
}
