//! Train, infer and evaluate over a cohort.

use rayon::prelude::*;

use crate::classifier::{
    assemble_training_set, predict_probability_map, prepare_input, train, InputLayout, TrainConfig,
    TrainHistory, VoxelClassifierModel,
};
use crate::cohort::{PatientRecord, ScoreScale, SignificanceRule, Split, DEFAULT_CUTOFF};
use crate::error::{Error, Result};
use crate::fusion::{
    build_zone_map, level_counts, summarize_patient, zone_truth_from_phantom, CaseSummary, Level,
    PatientInputs, Source, ZoneTemplate, DEFAULT_OVERLAP_MIN,
};
use crate::metrics::{interpolate_at_sensitivity, OperatingPoint, SweepCurve};
use crate::phantom::PhantomTruth;
use crate::volume::{ChannelName, VolumeBundle};

pub const DEFAULT_THRESHOLDS: [f64; 14] = [
    0.0, 0.01, 0.02, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5, 0.7, 0.9, 0.95, 1.0,
];

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub layout: InputLayout,
    pub cutoff: u8,
    pub rule: SignificanceRule,
    pub train: TrainConfig,
    pub overlap_min: f64,
    pub template: ZoneTemplate,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            layout: InputLayout::Bpmr,
            cutoff: DEFAULT_CUTOFF,
            rule: SignificanceRule::GLEASON_3_PLUS_4,
            train: TrainConfig::default(),
            overlap_min: DEFAULT_OVERLAP_MIN,
            template: ZoneTemplate::default(),
        }
    }
}

fn check_lengths(records: &[PatientRecord], bundles: &[VolumeBundle]) -> Result<()> {
    if records.len() != bundles.len() {
        return Err(Error::Domain(format!(
            "{} records but {} bundles",
            records.len(),
            bundles.len()
        )));
    }
    Ok(())
}

/// Fits the classifier on the training split.
pub fn train_model(
    records: &[PatientRecord],
    bundles: &[VolumeBundle],
    config: &PipelineConfig,
) -> Result<(VoxelClassifierModel, TrainHistory)> {
    check_lengths(records, bundles)?;
    let prepared: Vec<(&PatientRecord, VolumeBundle)> = records
        .iter()
        .zip(bundles)
        .filter(|(r, _)| r.split == Split::Train)
        .map(|(r, b)| Ok((r, prepare_input(b, r, config.cutoff)?)))
        .collect::<Result<_>>()?;
    let inputs: Vec<(&PatientRecord, &VolumeBundle)> = prepared.iter().map(|(r, b)| (*r, b)).collect();
    let (x, y) = assemble_training_set(&inputs, config.layout, config.rule, config.cutoff, &config.train)?;
    train(&x, &y, config.layout, &config.train)
}

/// Probability maps for each patient, in input order.
pub fn infer_all(
    model: &VoxelClassifierModel,
    records: &[PatientRecord],
    bundles: &[VolumeBundle],
    cutoff: u8,
) -> Result<Vec<VolumeBundle>> {
    check_lengths(records, bundles)?;
    records
        .par_iter()
        .zip(bundles)
        .map(|(r, b)| predict_probability_map(model, &prepare_input(b, r, cutoff)?))
        .collect()
}

/// Case summaries. Zones come from each bundle's gland mask when present;
/// zone truth needs the phantom truth.
pub fn summarize_cohort(
    records: &[PatientRecord],
    bundles: &[VolumeBundle],
    prob_maps: &[VolumeBundle],
    truth: Option<&PhantomTruth>,
    config: &PipelineConfig,
) -> Result<Vec<CaseSummary>> {
    check_lengths(records, bundles)?;
    check_lengths(records, prob_maps)?;
    records
        .par_iter()
        .enumerate()
        .map(|(i, record)| {
            let bundle = &bundles[i];
            let zone_map = match bundle.channel(ChannelName::GlandMask) {
                Some(g) => Some(build_zone_map(bundle.shape(), g, config.template)?),
                None => None,
            };
            let zone_truth = match (&zone_map, truth.and_then(|t| t.patient(&record.patient_id))) {
                (Some(z), Some(p)) => Some(zone_truth_from_phantom(
                    p,
                    z,
                    bundle.spacing(),
                    config.rule,
                    config.overlap_min,
                )?),
                _ => None,
            };
            summarize_patient(&PatientInputs {
                record,
                prob_map: &prob_maps[i],
                zone_map: zone_map.as_ref(),
                zone_truth: zone_truth.as_deref(),
                overlap_min: config.overlap_min,
            })
        })
        .collect()
}

/// Cutoffs that produce distinct radiologist calls on `scale`.
pub fn score_cutoffs(scale: ScoreScale) -> Vec<u8> {
    let (lo, hi) = scale.range();
    (lo + 1..=hi).collect()
}

/// Radiologist operating points over score cutoffs.
pub fn radiologist_curve(
    cases: &[CaseSummary],
    level: Level,
    rule: SignificanceRule,
    cutoffs: &[u8],
) -> Result<SweepCurve> {
    let points = cutoffs
        .iter()
        .map(|&c| Ok(OperatingPoint::from_counts(c as f64, level_counts(level, cases, rule, c, 0.0)?.rad)))
        .collect::<Result<_>>()?;
    Ok(SweepCurve::new(level, Source::Rad, points))
}

/// ML-on-positives and fused curves over `thresholds` at one cutoff.
pub fn fused_curves(
    cases: &[CaseSummary],
    level: Level,
    rule: SignificanceRule,
    cutoff: u8,
    thresholds: &[f64],
) -> Result<(SweepCurve, SweepCurve)> {
    let mut ml = Vec::new();
    let mut combined = Vec::new();
    for &t in thresholds {
        let c = level_counts(level, cases, rule, cutoff, t)?;
        ml.push(OperatingPoint::from_counts(t, c.ml));
        combined.push(OperatingPoint::from_counts(t, c.combined));
    }
    Ok((
        SweepCurve::new(level, Source::MlOnPositives, ml),
        SweepCurve::new(level, Source::RadPlusMl, combined),
    ))
}

/// Specificity of radiologist and fused readings at a controlled sensitivity.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlledComparison {
    pub target_sen: f64,
    /// Cutoff whose ⁺ROIs the ML gates.
    pub cutoff: u8,
    pub rad_spc: f64,
    pub fused_spc: f64,
    pub rad_curve: SweepCurve,
    pub fused_curve: SweepCurve,
}

/// Sweeps `t` at the strictest cutoff whose radiologist sensitivity reaches
/// `target` (looser cutoffs are tried if the fused curve falls short) and
/// interpolates both curves at `target`.
pub fn controlled_comparison(
    cases: &[CaseSummary],
    level: Level,
    rule: SignificanceRule,
    cutoffs: &[u8],
    thresholds: &[f64],
    target: f64,
) -> Result<ControlledComparison> {
    let rad_curve = radiologist_curve(cases, level, rule, cutoffs)?;
    let rad_spc = interpolate_at_sensitivity(&rad_curve, target)?;
    let mut eligible: Vec<u8> = rad_curve
        .points
        .iter()
        .filter(|p| p.sensitivity.is_some_and(|s| s >= target))
        .map(|p| p.threshold as u8)
        .collect();
    eligible.sort_unstable_by(|a, b| b.cmp(a));
    let mut last = Error::Domain(format!("no cutoff reaches sensitivity {target}"));
    for cutoff in eligible {
        let (_, fused_curve) = fused_curves(cases, level, rule, cutoff, thresholds)?;
        match interpolate_at_sensitivity(&fused_curve, target) {
            Ok(fused_spc) => {
                return Ok(ControlledComparison {
                    target_sen: target,
                    cutoff,
                    rad_spc,
                    fused_spc,
                    rad_curve,
                    fused_curve,
                })
            }
            Err(e) => last = e,
        }
    }
    Err(last)
}
