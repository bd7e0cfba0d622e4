//! Reference voxel classifier: multinomial logistic regression over local
//! intensity features, trained only on radiologist-positive ROIs.
//!
//! Output classes are ordered `[positive, negative, background]`, matching
//! the `prob_pos`, `prob_neg` and `prob_bg` channels.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{is_significant, PatientRecord, SignificanceRule};
use crate::error::{Error, Result};
use crate::volume::{normalize_scalar_channels, Channel, ChannelName, Shape, VolumeBundle};

pub const N_CLASSES: usize = 3;
pub const DEFAULT_RADIUS: usize = 2;
const GRADIENT_CHUNK: usize = 4096;
const MAX_STEP_HALVINGS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InputLayout {
    #[serde(rename = "t2")]
    T2,
    #[serde(rename = "bpmr")]
    Bpmr,
}

impl InputLayout {
    pub fn as_str(&self) -> &'static str {
        match self {
            InputLayout::T2 => "t2",
            InputLayout::Bpmr => "bpmr",
        }
    }

    pub fn image_channels(&self) -> &'static [ChannelName] {
        match self {
            InputLayout::T2 => &[ChannelName::T2w],
            InputLayout::Bpmr => &[ChannelName::T2w, ChannelName::DwiHb, ChannelName::Adc],
        }
    }

    /// Image channels plus the radiologist mask.
    pub fn input_channels(&self) -> Vec<ChannelName> {
        let mut v = self.image_channels().to_vec();
        v.push(ChannelName::RoiMask);
        v
    }

    pub fn n_features(&self) -> usize {
        3 * self.image_channels().len() + 2
    }
}

impl fmt::Display for InputLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InputLayout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t2" => Ok(InputLayout::T2),
            "bpmr" => Ok(InputLayout::Bpmr),
            _ => Err(Error::Layout(format!("unknown layout `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VoxelClass {
    Positive = 0,
    Negative = 1,
    Background = 2,
}

impl VoxelClass {
    pub const ALL: [VoxelClass; 3] = [VoxelClass::Positive, VoxelClass::Negative, VoxelClass::Background];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLabels {
    pub shape: Shape,
    pub classes: Vec<VoxelClass>,
}

impl TrainingLabels {
    pub fn count(&self, class: VoxelClass) -> usize {
        self.classes.iter().filter(|c| **c == class).count()
    }
}

/// Labels voxels of significant ⁺ROIs positive and of benign ⁺ROIs negative;
/// everything else is background. Positive wins where ROIs overlap.
pub fn build_training_labels(
    record: &PatientRecord,
    shape: Shape,
    rule: SignificanceRule,
    cutoff: u8,
) -> Result<TrainingLabels> {
    let mut classes = vec![VoxelClass::Background; shape.voxel_count()];
    for roi in record.positive_rois(cutoff) {
        let grade = roi.pathology.ok_or_else(|| {
            Error::MissingLabel(format!(
                "patient `{}` ROI `{}` has no pathology",
                record.patient_id, roi.roi_id
            ))
        })?;
        roi.voxels.check_within(shape)?;
        let class = if is_significant(grade, rule) {
            VoxelClass::Positive
        } else {
            VoxelClass::Negative
        };
        for o in roi.voxels.offsets() {
            if class < classes[o] {
                classes[o] = class;
            }
        }
    }
    Ok(TrainingLabels { shape, classes })
}

/// Binary mask of the patient's ⁺ROIs.
pub fn roi_mask_channel(record: &PatientRecord, shape: Shape, cutoff: u8) -> Result<Channel> {
    let mut data = vec![0.0f32; shape.voxel_count()];
    for roi in record.positive_rois(cutoff) {
        roi.voxels.check_within(shape)?;
        for o in roi.voxels.offsets() {
            data[o] = 1.0;
        }
    }
    Ok(Channel::new(ChannelName::RoiMask, data))
}

/// Normalises scalar channels within the gland and attaches the ⁺ROI mask.
pub fn prepare_input(bundle: &VolumeBundle, record: &PatientRecord, cutoff: u8) -> Result<VolumeBundle> {
    let normalized = normalize_scalar_channels(bundle)?;
    normalized.with_channel(roi_mask_channel(record, bundle.shape(), cutoff)?)
}

/// Row-major `rows × cols` matrix of f64 features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn select(&self, rows: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        FeatureMatrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Sum over a clamped 1-D window along `axis`.
fn box_sum_axis(src: &[f64], shape: Shape, axis: usize, r: usize) -> Vec<f64> {
    let dims = shape.as_array();
    let n = dims[axis];
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let mut out = vec![0.0; src.len()];
    out.par_chunks_mut(dims[0]).enumerate().for_each(|(line, dst)| {
        let j = line % dims[1];
        let k = line / dims[1];
        for (i, d) in dst.iter_mut().enumerate() {
            let c = [i, j, k][axis];
            let base = shape.offset(i, j, k) - c * stride;
            let mut acc = 0.0;
            for dc in -(r as isize)..=(r as isize) {
                let cc = (c as isize + dc).clamp(0, n as isize - 1) as usize;
                acc += src[base + cc * stride];
            }
            *d = acc;
        }
    });
    out
}

/// Local mean and population standard deviation over a `(2r+1)³` window
/// with edge clamping.
pub fn local_stats(data: &[f32], shape: Shape, r: usize) -> (Vec<f64>, Vec<f64>) {
    let n = data.len().max(1) as f64;
    let global = data.iter().map(|v| *v as f64).sum::<f64>() / n;
    let centered: Vec<f64> = data.iter().map(|v| *v as f64 - global).collect();
    let squared: Vec<f64> = centered.iter().map(|v| v * v).collect();
    let window = ((2 * r + 1) as f64).powi(3);
    let mut s1 = centered;
    let mut s2 = squared;
    for axis in 0..3 {
        s1 = box_sum_axis(&s1, shape, axis, r);
        s2 = box_sum_axis(&s2, shape, axis, r);
    }
    let mean = s1.iter().map(|s| global + s / window).collect();
    let sd = s1
        .iter()
        .zip(&s2)
        .map(|(a, b)| {
            let m = a / window;
            (b / window - m * m).max(0.0).sqrt()
        })
        .collect();
    (mean, sd)
}

/// Per-voxel features: for each image channel its raw value, local mean and
/// local sd; then the gland indicator and the ⁺ROI indicator.
pub fn extract_features(bundle: &VolumeBundle, layout: InputLayout, radius: usize) -> Result<FeatureMatrix> {
    for name in layout.input_channels() {
        if !bundle.has_channel(name) {
            return Err(Error::Layout(format!(
                "layout `{layout}` requires channel `{name}`"
            )));
        }
    }
    let shape = bundle.shape();
    let rows = shape.voxel_count();
    let cols = layout.n_features();
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for name in layout.image_channels() {
        let data = bundle.require_channel(*name)?;
        let (mean, sd) = local_stats(data, shape, radius);
        columns.push(data.iter().map(|v| *v as f64).collect());
        columns.push(mean);
        columns.push(sd);
    }
    columns.push(match bundle.channel(ChannelName::GlandMask) {
        Some(g) => g.iter().map(|v| if *v > 0.0 { 1.0 } else { 0.0 }).collect(),
        None => vec![1.0; rows],
    });
    columns.push(
        bundle
            .require_channel(ChannelName::RoiMask)?
            .iter()
            .map(|v| if *v > 0.0 { 1.0 } else { 0.0 })
            .collect(),
    );
    let mut data = vec![0.0; rows * cols];
    data.par_chunks_mut(cols).enumerate().for_each(|(r, row)| {
        for (c, col) in columns.iter().enumerate() {
            row[c] = col[r];
        }
    });
    if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidVolume(format!(
            "non-finite feature at voxel {}",
            bad / cols
        )));
    }
    Ok(FeatureMatrix { rows, cols, data })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub l2: f64,
    pub epochs: usize,
    pub step_size: f64,
    /// Per-class loss weights `[pos, neg, bg]`; inverse frequency when unset.
    pub class_weights: Option<[f64; 3]>,
    pub seed: u64,
    pub radius: usize,
    /// Background voxels drawn per training patient.
    pub background_per_patient: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            l2: 1e-3,
            epochs: 200,
            step_size: 1.0,
            class_weights: None,
            seed: 7,
            radius: DEFAULT_RADIUS,
            background_per_patient: 400,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::Config(format!("l2 weight {} must be finite and >= 0", self.l2)));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step size {} must be positive", self.step_size)));
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::Config("class weights must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Weighted, L2-regularised cross-entropy over standardised features.
///
/// Parameters are `(cols + 1) × 3` row-major with the bias in the last row;
/// the bias is not regularised.
#[derive(Debug, Clone)]
pub struct Objective {
    x: FeatureMatrix,
    y: Vec<usize>,
    sample_weight: Vec<f64>,
    total_weight: f64,
    l2: f64,
}

impl Objective {
    pub fn new(x: FeatureMatrix, labels: &[VoxelClass], class_weights: [f64; 3], l2: f64) -> Result<Self> {
        if x.rows != labels.len() {
            return Err(Error::DegenerateTraining(format!(
                "{} feature rows but {} labels",
                x.rows,
                labels.len()
            )));
        }
        let y: Vec<usize> = labels.iter().map(|c| c.index()).collect();
        let sample_weight: Vec<f64> = y.iter().map(|c| class_weights[*c]).collect();
        let total_weight = sample_weight.iter().sum();
        Ok(Objective {
            x,
            y,
            sample_weight,
            total_weight,
            l2,
        })
    }

    pub fn n_params(&self) -> usize {
        (self.x.cols + 1) * N_CLASSES
    }

    fn chunk_terms(&self, w: &[f64], start: usize, end: usize, grad: Option<&mut [f64]>) -> f64 {
        let cols = self.x.cols;
        let mut loss = 0.0;
        let mut g = grad;
        for r in start..end {
            let row = self.x.row(r);
            let z = scores(w, row);
            let p = softmax(z);
            let sw = self.sample_weight[r];
            let yr = self.y[r];
            loss -= sw * p[yr].max(f64::MIN_POSITIVE).ln();
            if let Some(g) = g.as_deref_mut() {
                for c in 0..N_CLASSES {
                    let d = sw * (p[c] - if c == yr { 1.0 } else { 0.0 });
                    for (f, xv) in row.iter().enumerate() {
                        g[f * N_CLASSES + c] += d * xv;
                    }
                    g[cols * N_CLASSES + c] += d;
                }
            }
        }
        loss
    }

    fn chunks(&self) -> Vec<(usize, usize)> {
        (0..self.x.rows)
            .step_by(GRADIENT_CHUNK)
            .map(|s| (s, (s + GRADIENT_CHUNK).min(self.x.rows)))
            .collect()
    }

    fn penalty(&self, w: &[f64]) -> f64 {
        let k = self.x.cols * N_CLASSES;
        0.5 * self.l2 * w[..k].iter().map(|v| v * v).sum::<f64>()
    }

    pub fn loss(&self, w: &[f64]) -> f64 {
        let partial: Vec<f64> = self
            .chunks()
            .par_iter()
            .map(|&(s, e)| self.chunk_terms(w, s, e, None))
            .collect();
        partial.iter().sum::<f64>() / self.total_weight + self.penalty(w)
    }

    pub fn loss_and_gradient(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let np = self.n_params();
        let partial: Vec<(f64, Vec<f64>)> = self
            .chunks()
            .par_iter()
            .map(|&(s, e)| {
                let mut g = vec![0.0; np];
                let l = self.chunk_terms(w, s, e, Some(&mut g));
                (l, g)
            })
            .collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; np];
        for (l, g) in partial {
            loss += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        for g in grad.iter_mut() {
            *g /= self.total_weight;
        }
        let k = self.x.cols * N_CLASSES;
        for (g, v) in grad[..k].iter_mut().zip(&w[..k]) {
            *g += self.l2 * v;
        }
        (loss / self.total_weight + self.penalty(w), grad)
    }
}

fn scores(w: &[f64], row: &[f64]) -> [f64; 3] {
    let cols = row.len();
    let mut z = [
        w[cols * N_CLASSES],
        w[cols * N_CLASSES + 1],
        w[cols * N_CLASSES + 2],
    ];
    for (f, xv) in row.iter().enumerate() {
        let wr = &w[f * N_CLASSES..f * N_CLASSES + N_CLASSES];
        z[0] += wr[0] * xv;
        z[1] += wr[1] * xv;
        z[2] += wr[2] * xv;
    }
    z
}

pub fn softmax(z: [f64; 3]) -> [f64; 3] {
    let m = z[0].max(z[1]).max(z[2]);
    let e = z.map(|v| (v - m).exp());
    let s = e[0] + e[1] + e[2];
    e.map(|v| v / s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelClassifierModel {
    pub layout: InputLayout,
    pub radius: usize,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    /// `(n_features + 1) × 3`, row-major, bias last.
    pub weights: Vec<f64>,
}

/// Training diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub losses: Vec<f64>,
    pub final_step: f64,
}

impl VoxelClassifierModel {
    pub fn zero(layout: InputLayout, radius: usize) -> Self {
        let nf = layout.n_features();
        VoxelClassifierModel {
            layout,
            radius,
            feature_mean: vec![0.0; nf],
            feature_scale: vec![1.0; nf],
            weights: vec![0.0; (nf + 1) * N_CLASSES],
        }
    }

    pub fn n_features(&self) -> usize {
        self.feature_mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let nf = self.layout.n_features();
        if self.feature_mean.len() != nf || self.feature_scale.len() != nf {
            return Err(Error::Layout(format!(
                "layout `{}` expects {nf} features, model has {}",
                self.layout,
                self.feature_mean.len()
            )));
        }
        if self.weights.len() != (nf + 1) * N_CLASSES {
            return Err(Error::format("weights", format!("expected {} values", (nf + 1) * N_CLASSES)));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.weights) || !finite(&self.feature_mean) || !finite(&self.feature_scale) {
            return Err(Error::format("weights", "non-finite value"));
        }
        if self.feature_scale.iter().any(|s| *s <= 0.0) {
            return Err(Error::format("feature_scale", "scale must be positive"));
        }
        Ok(())
    }

    pub fn standardize_into(&self, raw: &[f64], out: &mut [f64]) {
        for (f, o) in out.iter_mut().enumerate() {
            *o = (raw[f] - self.feature_mean[f]) / self.feature_scale[f];
        }
    }

    pub fn predict_row(&self, raw: &[f64]) -> [f64; 3] {
        let mut x = vec![0.0; raw.len()];
        self.standardize_into(raw, &mut x);
        softmax(scores(&self.weights, &x))
    }
}

fn inverse_frequency(labels: &[VoxelClass]) -> [f64; 3] {
    let n = labels.len() as f64;
    let mut counts = [0usize; 3];
    for l in labels {
        counts[l.index()] += 1;
    }
    counts.map(|c| n / (N_CLASSES as f64 * c as f64))
}

/// Sorts rows by `(label, feature bits)` so the fitted model does not depend
/// on input order.
fn canonical_order(x: &FeatureMatrix, labels: &[VoxelClass]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.rows).collect();
    idx.sort_by(|&a, &b| {
        labels[a].cmp(&labels[b]).then_with(|| {
            let ra = x.row(a).iter().map(|v| v.to_bits());
            let rb = x.row(b).iter().map(|v| v.to_bits());
            ra.cmp(rb)
        })
    });
    idx
}

/// Full-batch gradient descent from zero weights. A step that increases the
/// loss is undone and the step size halved.
pub fn train(
    features: &FeatureMatrix,
    labels: &[VoxelClass],
    layout: InputLayout,
    config: &TrainConfig,
) -> Result<(VoxelClassifierModel, TrainHistory)> {
    config.validate()?;
    if features.cols != layout.n_features() {
        return Err(Error::Layout(format!(
            "layout `{layout}` expects {} features, got {}",
            layout.n_features(),
            features.cols
        )));
    }
    if features.rows != labels.len() {
        return Err(Error::DegenerateTraining(format!(
            "{} feature rows but {} labels",
            features.rows,
            labels.len()
        )));
    }
    for class in VoxelClass::ALL {
        if !labels.contains(&class) {
            return Err(Error::DegenerateTraining(format!("no {class:?} voxels in the training set")));
        }
    }
    let order = canonical_order(features, labels);
    let raw = features.select(&order);
    let y: Vec<VoxelClass> = order.iter().map(|&i| labels[i]).collect();

    let cols = raw.cols;
    let n = raw.rows as f64;
    let mut mean = vec![0.0; cols];
    let mut scale = vec![0.0; cols];
    for r in 0..raw.rows {
        for (m, v) in mean.iter_mut().zip(raw.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for r in 0..raw.rows {
        for ((s, v), m) in scale.iter_mut().zip(raw.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in scale.iter_mut() {
        *s = (*s / n).sqrt();
        if *s <= 1e-12 {
            *s = 1.0;
        }
    }
    let mut model = VoxelClassifierModel::zero(layout, config.radius);
    model.feature_mean = mean;
    model.feature_scale = scale;
    let mut x = raw.clone();
    for r in 0..x.rows {
        let src = raw.row(r).to_vec();
        model.standardize_into(&src, &mut x.data[r * cols..(r + 1) * cols]);
    }

    let class_weights = config.class_weights.unwrap_or_else(|| inverse_frequency(&y));
    let objective = Objective::new(x, &y, class_weights, config.l2)?;
    let mut w = model.weights.clone();
    let mut step = config.step_size;
    let (mut loss, mut grad) = objective.loss_and_gradient(&w);
    let mut losses = vec![loss];
    for epoch in 0..config.epochs {
        let mut accepted = false;
        for _ in 0..=MAX_STEP_HALVINGS {
            let cand: Vec<f64> = w.iter().zip(&grad).map(|(a, g)| a - step * g).collect();
            let cand_loss = objective.loss(&cand);
            if cand_loss <= loss {
                w = cand;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            log::debug!("training converged at epoch {epoch}: no descent step found");
            losses.push(loss);
            continue;
        }
        let (l, g) = objective.loss_and_gradient(&w);
        loss = l;
        grad = g;
        losses.push(loss);
    }
    log::info!(
        "trained {} model on {} voxels: loss {:.6} -> {:.6}",
        layout,
        objective.x.rows,
        losses[0],
        loss
    );
    model.weights = w;
    model.validate()?;
    Ok((
        model,
        TrainHistory {
            losses,
            final_step: step,
        },
    ))
}

/// Training rows from one patient: every ⁺ROI voxel and a seeded sample of
/// background voxels.
pub fn patient_training_rows(
    features: &FeatureMatrix,
    labels: &TrainingLabels,
    background_samples: usize,
    seed: u64,
    stream: u64,
) -> (Vec<usize>, Vec<VoxelClass>) {
    let mut rows: Vec<usize> = Vec::new();
    let mut bg: Vec<usize> = Vec::new();
    for (i, c) in labels.classes.iter().enumerate() {
        if *c == VoxelClass::Background {
            bg.push(i);
        } else {
            rows.push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let take = background_samples.min(bg.len());
    let mut picked: Vec<usize> = sample(&mut rng, bg.len(), take).into_iter().map(|i| bg[i]).collect();
    picked.sort_unstable();
    rows.extend(picked);
    debug_assert!(rows.iter().all(|r| *r < features.rows));
    let classes = rows.iter().map(|r| labels.classes[*r]).collect();
    (rows, classes)
}

/// Assembles a training set over patients; `inputs` are prepared bundles
/// (see [`prepare_input`]) paired with their records.
pub fn assemble_training_set(
    inputs: &[(&PatientRecord, &VolumeBundle)],
    layout: InputLayout,
    rule: SignificanceRule,
    cutoff: u8,
    config: &TrainConfig,
) -> Result<(FeatureMatrix, Vec<VoxelClass>)> {
    let parts: Vec<(FeatureMatrix, Vec<VoxelClass>)> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, (record, bundle))| {
            let labels = build_training_labels(record, bundle.shape(), rule, cutoff)?;
            let features = extract_features(bundle, layout, config.radius)?;
            let (rows, classes) =
                patient_training_rows(&features, &labels, config.background_per_patient, config.seed, i as u64);
            Ok((features.select(&rows), classes))
        })
        .collect::<Result<_>>()?;
    let cols = layout.n_features();
    let mut x = FeatureMatrix {
        rows: 0,
        cols,
        data: Vec::new(),
    };
    let mut y = Vec::new();
    for (f, c) in parts {
        x.rows += f.rows;
        x.data.extend(f.data);
        y.extend(c);
    }
    Ok((x, y))
}

/// Per-voxel softmax probabilities as a bundle holding only the three
/// probability channels.
pub fn predict_probability_map(model: &VoxelClassifierModel, bundle: &VolumeBundle) -> Result<VolumeBundle> {
    model.validate()?;
    let features = extract_features(bundle, model.layout, model.radius)?;
    let cols = features.cols;
    let probs: Vec<[f64; 3]> = (0..features.rows)
        .into_par_iter()
        .map(|r| model.predict_row(&features.data[r * cols..(r + 1) * cols]))
        .collect();
    let channel = |c: usize, name| Channel::new(name, probs.iter().map(|p| p[c] as f32).collect());
    VolumeBundle::new(
        bundle.shape(),
        bundle.spacing(),
        vec![
            channel(0, ChannelName::ProbPos),
            channel(1, ChannelName::ProbNeg),
            channel(2, ChannelName::ProbBg),
        ],
    )
}

/// Argmax class per voxel, ties resolved positive > negative > background.
pub fn argmax_classes(prob_map: &VolumeBundle) -> Result<Vec<VoxelClass>> {
    let p = prob_map.require_channel(ChannelName::ProbPos)?;
    let n = prob_map.require_channel(ChannelName::ProbNeg)?;
    let b = prob_map.require_channel(ChannelName::ProbBg)?;
    Ok((0..p.len())
        .map(|i| {
            if p[i] >= n[i] && p[i] >= b[i] {
                VoxelClass::Positive
            } else if n[i] >= b[i] {
                VoxelClass::Negative
            } else {
                VoxelClass::Background
            }
        })
        .collect())
}

/// Fraction of labelled ⁺ROI voxels whose argmax class matches the label;
/// `None` when the patient has no labelled voxels.
pub fn roi_accuracy(prob_map: &VolumeBundle, labels: &TrainingLabels) -> Result<Option<(usize, usize)>> {
    let pred = argmax_classes(prob_map)?;
    let mut hit = 0;
    let mut total = 0;
    for (p, l) in pred.iter().zip(&labels.classes) {
        if *l != VoxelClass::Background {
            total += 1;
            hit += usize::from(p == l);
        }
    }
    Ok((total > 0).then_some((hit, total)))
}

pub const MODEL_MAGIC: &str = "RADPOS-MODEL v1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    layout: InputLayout,
    radius: usize,
    n_features: usize,
    classes: Vec<String>,
    feature_mean: Vec<f64>,
    feature_scale: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl VoxelClassifierModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = ModelHeader {
            layout: self.layout,
            radius: self.radius,
            n_features: self.n_features(),
            classes: vec!["positive".into(), "negative".into(), "background".into()],
            feature_mean: self.feature_mean.clone(),
            feature_scale: self.feature_scale.clone(),
            rows: self.n_features() + 1,
            cols: N_CLASSES,
        };
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(serde_json::to_string(&header).expect("header serializes").as_bytes());
        out.push(b'\n');
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let magic_end = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::format("magic", "missing header line"))?;
        if &bytes[..magic_end] != MODEL_MAGIC.as_bytes() {
            return Err(Error::format("magic", format!("expected `{MODEL_MAGIC}`")));
        }
        let rest = &bytes[magic_end + 1..];
        let header_end = rest
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::format("header", "missing JSON header line"))?;
        let header: ModelHeader = serde_json::from_slice(&rest[..header_end])
            .map_err(|e| Error::format("header", e.to_string()))?;
        if header.classes != ["positive", "negative", "background"] {
            return Err(Error::format("classes", "expected [positive, negative, background]"));
        }
        if header.cols != N_CLASSES || header.rows != header.n_features.saturating_add(1) {
            return Err(Error::format("rows", "weight matrix shape does not match n_features"));
        }
        if header.n_features != header.layout.n_features() {
            return Err(Error::Layout(format!(
                "layout `{}` expects {} features, header has {}",
                header.layout,
                header.layout.n_features(),
                header.n_features
            )));
        }
        let payload = &rest[header_end + 1..];
        let expected = header.rows * header.cols * 8;
        if payload.len() != expected {
            return Err(Error::SizeMismatch {
                channel: "weights".into(),
                expected,
                actual: payload.len(),
            });
        }
        let weights = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let model = VoxelClassifierModel {
            layout: header.layout,
            radius: header.radius,
            feature_mean: header.feature_mean,
            feature_scale: header.feature_scale,
            weights,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
