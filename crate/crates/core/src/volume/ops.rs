//! Geometry and intensity preprocessing: crop around the gland, z-score
//! normalisation and resampling to a fixed grid.

use super::{Channel, ChannelKind, ChannelName, Shape, Spacing, VolumeBundle};
use crate::error::{Error, Result};

pub const DEFAULT_TARGET_SHAPE: Shape = Shape::cube(64);
pub const DEFAULT_CROP_MARGIN: f64 = 0.1;

/// Inclusive voxel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoundingBox {
    pub fn extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.hi[a] - self.lo[a] + 1)
    }
}

/// Bounding box of nonzero voxels in `mask`, or `None` if the mask is empty.
pub fn gland_bounding_box(shape: Shape, mask: &[f32]) -> Option<BoundingBox> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (off, _) in mask.iter().enumerate().filter(|(_, v)| **v != 0.0) {
        any = true;
        let v = shape.index_of(off);
        for (a, c) in [v.i, v.j, v.k].into_iter().enumerate() {
            lo[a] = lo[a].min(c);
            hi[a] = hi[a].max(c);
        }
    }
    any.then_some(BoundingBox { lo, hi })
}

/// Crops every channel to the bounding box of `gland_mask`, dilated on each
/// side by `ceil(margin * extent)` voxels and clamped to the volume.
pub fn center_crop(bundle: &VolumeBundle, gland_mask: ChannelName, margin: f64) -> Result<VolumeBundle> {
    if !(margin.is_finite() && margin >= 0.0) {
        return Err(Error::Domain(format!("crop margin must be >= 0, got {margin}")));
    }
    let shape = bundle.shape();
    let mask = bundle.require_channel(gland_mask)?;
    let bb = gland_bounding_box(shape, mask)
        .ok_or_else(|| Error::DegenerateInput(format!("`{gland_mask}` is empty")))?;
    let dims = shape.as_array();
    let ext = bb.extent();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let pad = (margin * ext[a] as f64).ceil() as usize;
        lo[a] = bb.lo[a].saturating_sub(pad);
        hi[a] = (bb.hi[a] + pad).min(dims[a] - 1);
    }
    let out_shape = Shape::new(hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1);
    let channels = bundle
        .channels()
        .iter()
        .map(|ch| {
            let mut data = Vec::with_capacity(out_shape.voxel_count());
            for k in lo[2]..=hi[2] {
                for j in lo[1]..=hi[1] {
                    let row = shape.offset(lo[0], j, k);
                    data.extend_from_slice(&ch.data[row..row + out_shape.nx]);
                }
            }
            Channel::new(ch.name, data)
        })
        .collect();
    VolumeBundle::new(out_shape, bundle.spacing(), channels)
}

/// Sample positions along one axis with corner alignment: output voxel `d`
/// maps to input coordinate `d * (n_in - 1) / (n_out - 1)`.
struct AxisMap {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w: Vec<f64>,
    nearest: Vec<usize>,
}

impl AxisMap {
    fn new(n_in: usize, n_out: usize) -> Self {
        let mut m = AxisMap {
            lo: Vec::with_capacity(n_out),
            hi: Vec::with_capacity(n_out),
            w: Vec::with_capacity(n_out),
            nearest: Vec::with_capacity(n_out),
        };
        for d in 0..n_out {
            let pos = if n_in == 1 {
                0.0
            } else {
                d as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            };
            let lo = (pos.floor() as usize).min(n_in - 1);
            m.lo.push(lo);
            m.hi.push((lo + 1).min(n_in - 1));
            m.w.push(pos - lo as f64);
            m.nearest.push((pos.round() as usize).min(n_in - 1));
        }
        m
    }
}

/// Resamples to `target`. Scalar channels use trilinear interpolation, label
/// channels nearest-neighbour; probability channels are interpolated and then
/// renormalised per voxel. Physical extent `(n - 1) * spacing` is preserved.
pub fn resample_trilinear(bundle: &VolumeBundle, target: Shape) -> Result<VolumeBundle> {
    if target.nx < 2 || target.ny < 2 || target.nz < 2 {
        return Err(Error::Domain(format!("target shape {target} must be >= 2 per axis")));
    }
    let src = bundle.shape();
    let maps = [
        AxisMap::new(src.nx, target.nx),
        AxisMap::new(src.ny, target.ny),
        AxisMap::new(src.nz, target.nz),
    ];
    let n_out = target.voxel_count();

    let mut channels: Vec<Channel> = bundle
        .channels()
        .iter()
        .map(|ch| {
            let mut out = Vec::with_capacity(n_out);
            for k in 0..target.nz {
                for j in 0..target.ny {
                    for i in 0..target.nx {
                        let v = match ch.name.kind() {
                            ChannelKind::Label => {
                                ch.data[src.offset(maps[0].nearest[i], maps[1].nearest[j], maps[2].nearest[k])]
                            }
                            _ => trilinear(&ch.data, src, &maps, i, j, k) as f32,
                        };
                        out.push(v);
                    }
                }
            }
            Channel::new(ch.name, out)
        })
        .collect();

    renormalize_probabilities(&mut channels);

    let spacing = {
        let old = bundle.spacing().0;
        let n_in = src.as_array();
        let n_new = target.as_array();
        Spacing([0, 1, 2].map(|a| {
            if n_in[a] > 1 {
                old[a] * (n_in[a] - 1) as f64 / (n_new[a] - 1) as f64
            } else {
                old[a] / n_new[a] as f64
            }
        }))
    };
    VolumeBundle::new(target, spacing, channels)
}

fn trilinear(data: &[f32], shape: Shape, maps: &[AxisMap; 3], i: usize, j: usize, k: usize) -> f64 {
    let (x0, x1, wx) = (maps[0].lo[i], maps[0].hi[i], maps[0].w[i]);
    let (y0, y1, wy) = (maps[1].lo[j], maps[1].hi[j], maps[1].w[j]);
    let (z0, z1, wz) = (maps[2].lo[k], maps[2].hi[k], maps[2].w[k]);
    let at = |x, y, z| data[shape.offset(x, y, z)] as f64;
    let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + (b - a) * t };
    let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), wx);
    let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), wx);
    let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), wx);
    let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), wx);
    lerp(lerp(c00, c10, wy), lerp(c01, c11, wy), wz)
}

fn renormalize_probabilities(channels: &mut [Channel]) {
    let pos = channels.iter().position(|c| c.name == ChannelName::ProbPos);
    let neg = channels.iter().position(|c| c.name == ChannelName::ProbNeg);
    let bg = channels.iter().position(|c| c.name == ChannelName::ProbBg);
    let (Some(p), Some(n), Some(b)) = (pos, neg, bg) else {
        return;
    };
    let len = channels[p].data.len();
    for v in 0..len {
        let (a, c, d) = (
            channels[p].data[v] as f64,
            channels[n].data[v] as f64,
            channels[b].data[v] as f64,
        );
        let s = a + c + d;
        if s > 0.0 {
            channels[p].data[v] = (a / s) as f32;
            channels[n].data[v] = (c / s) as f32;
            channels[b].data[v] = (d / s) as f32;
        }
    }
}

/// Z-score normalisation of `channel` over the gland region (nonzero
/// `gland_mask`) when the bundle has one, otherwise over the whole volume.
/// All voxels receive the same affine map.
pub fn normalize_intensity(bundle: &VolumeBundle, channel: ChannelName) -> Result<VolumeBundle> {
    let data = bundle.require_channel(channel)?;
    let region: Vec<f64> = match bundle.channel(ChannelName::GlandMask) {
        Some(mask) => data
            .iter()
            .zip(mask)
            .filter(|(_, m)| **m != 0.0)
            .map(|(v, _)| *v as f64)
            .collect(),
        None => data.iter().map(|v| *v as f64).collect(),
    };
    if region.is_empty() {
        return Err(Error::DegenerateInput(format!("`{channel}` normalisation region is empty")));
    }
    let n = region.len() as f64;
    let mean = region.iter().sum::<f64>() / n;
    let var = region.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > 1e-12) || !sd.is_finite() {
        return Err(Error::DegenerateInput(format!(
            "`{channel}` has zero variance over the normalisation region"
        )));
    }
    let out = data.iter().map(|v| ((*v as f64 - mean) / sd) as f32).collect();
    bundle.with_channel(Channel::new(channel, out))
}

/// Normalises every scalar image channel present in the bundle.
pub fn normalize_scalar_channels(bundle: &VolumeBundle) -> Result<VolumeBundle> {
    bundle
        .channel_names()
        .into_iter()
        .filter(|c| c.kind() == ChannelKind::Scalar)
        .try_fold(bundle.clone(), |b, c| normalize_intensity(&b, c))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessConfig {
    pub gland_mask: ChannelName,
    pub margin: f64,
    pub target_shape: Shape,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            gland_mask: ChannelName::GlandMask,
            margin: DEFAULT_CROP_MARGIN,
            target_shape: DEFAULT_TARGET_SHAPE,
        }
    }
}

/// Crop, then normalise scalar channels, then resample.
pub fn preprocess(bundle: &VolumeBundle, config: &PreprocessConfig) -> Result<VolumeBundle> {
    let cropped = center_crop(bundle, config.gland_mask, config.margin)?;
    let normalized = normalize_scalar_channels(&cropped)?;
    resample_trilinear(&normalized, config.target_shape)
}
