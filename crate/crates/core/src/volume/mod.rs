//! Multi-channel 3D volumes.
//!
//! A [`VolumeBundle`] is a set of named `f32` grids sharing one shape and
//! voxel spacing. Voxels are stored with `i` (x) fastest and `k` (z) slowest,
//! so the linear offset of `(i, j, k)` is `i + nx * (j + ny * k)`.

mod io;
mod ops;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{decode_channel, encode_channel, load_bundle, save_bundle, BundleMeta};
pub use ops::{
    center_crop, gland_bounding_box, normalize_intensity, normalize_scalar_channels, preprocess,
    resample_trilinear,
    BoundingBox, PreprocessConfig, DEFAULT_CROP_MARGIN, DEFAULT_TARGET_SHAPE,
};

/// Tolerance on `prob_pos + prob_neg + prob_bg = 1`.
pub const PROBABILITY_SUM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Shape {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Shape { nx, ny, nz }
    }

    pub const fn cube(n: usize) -> Self {
        Shape::new(n, n, n)
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn from_array(a: [usize; 3]) -> Self {
        Shape::new(a[0], a[1], a[2])
    }

    /// Number of voxels. Saturates instead of overflowing for absurd shapes.
    pub fn voxel_count(&self) -> usize {
        self.nx
            .checked_mul(self.ny)
            .and_then(|v| v.checked_mul(self.nz))
            .unwrap_or(usize::MAX)
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.nx * (j + self.ny * k)
    }

    #[inline]
    pub fn index_of(&self, offset: usize) -> VoxelIndex {
        let i = offset % self.nx;
        let rest = offset / self.nx;
        VoxelIndex::new(i, rest % self.ny, rest / self.ny)
    }

    pub fn contains(&self, v: VoxelIndex) -> bool {
        v.i < self.nx && v.j < self.ny && v.k < self.nz
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelIndex {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

impl VoxelIndex {
    pub const fn new(i: usize, j: usize, k: usize) -> Self {
        VoxelIndex { i, j, k }
    }
}

/// Millimetres per voxel along x, y, z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing(pub [f64; 3]);

impl Spacing {
    pub const ISOTROPIC_1MM: Spacing = Spacing([1.0, 1.0, 1.0]);

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidVolume(format!(
                "spacing components must be finite and > 0, got {:?}",
                self.0
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ChannelName {
    T2w,
    Adc,
    DwiHb,
    RoiMask,
    GlandMask,
    ProbPos,
    ProbNeg,
    ProbBg,
    ZoneMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelKind {
    /// Continuous image intensities.
    Scalar,
    /// Integral label values (masks, zone ids).
    Label,
    Probability,
}

impl ChannelName {
    pub const ALL: [ChannelName; 9] = [
        ChannelName::T2w,
        ChannelName::Adc,
        ChannelName::DwiHb,
        ChannelName::RoiMask,
        ChannelName::GlandMask,
        ChannelName::ProbPos,
        ChannelName::ProbNeg,
        ChannelName::ProbBg,
        ChannelName::ZoneMap,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ChannelName::T2w => "T2w",
            ChannelName::Adc => "ADC",
            ChannelName::DwiHb => "DWI_hb",
            ChannelName::RoiMask => "roi_mask",
            ChannelName::GlandMask => "gland_mask",
            ChannelName::ProbPos => "prob_pos",
            ChannelName::ProbNeg => "prob_neg",
            ChannelName::ProbBg => "prob_bg",
            ChannelName::ZoneMap => "zone_map",
        }
    }

    pub fn kind(&self) -> ChannelKind {
        match self {
            ChannelName::T2w | ChannelName::Adc | ChannelName::DwiHb => ChannelKind::Scalar,
            ChannelName::RoiMask | ChannelName::GlandMask | ChannelName::ZoneMap => {
                ChannelKind::Label
            }
            ChannelName::ProbPos | ChannelName::ProbNeg | ChannelName::ProbBg => {
                ChannelKind::Probability
            }
        }
    }
}

impl fmt::Display for ChannelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChannelName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ChannelName::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::format("channels", format!("unknown channel name `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub name: ChannelName,
    pub data: Vec<f32>,
}

impl Channel {
    pub fn new(name: ChannelName, data: Vec<f32>) -> Self {
        Channel { name, data }
    }
}

/// Immutable multi-channel volume. Construction validates every invariant;
/// transformations return new bundles.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeBundle {
    shape: Shape,
    spacing: Spacing,
    channels: Vec<Channel>,
}

impl VolumeBundle {
    pub fn new(shape: Shape, spacing: Spacing, channels: Vec<Channel>) -> Result<Self> {
        if shape.nx == 0 || shape.ny == 0 || shape.nz == 0 {
            return Err(Error::InvalidVolume(format!("empty shape {shape}")));
        }
        spacing.validate()?;
        let n = shape.voxel_count();
        for (idx, ch) in channels.iter().enumerate() {
            if channels[..idx].iter().any(|c| c.name == ch.name) {
                return Err(Error::InvalidVolume(format!("duplicate channel `{}`", ch.name)));
            }
            if ch.data.len() != n {
                return Err(Error::InvalidVolume(format!(
                    "channel `{}` has {} values, shape {shape} needs {n}",
                    ch.name,
                    ch.data.len()
                )));
            }
            if ch.name.kind() == ChannelKind::Label {
                if let Some(v) = ch.data.iter().find(|v| !(v.is_finite() && **v >= 0.0 && v.fract() == 0.0)) {
                    return Err(Error::InvalidVolume(format!(
                        "label channel `{}` holds non-integral value {v}",
                        ch.name
                    )));
                }
            }
        }
        let bundle = VolumeBundle {
            shape,
            spacing,
            channels,
        };
        bundle.check_probability_sum()?;
        Ok(bundle)
    }

    fn check_probability_sum(&self) -> Result<()> {
        let (Some(p), Some(q), Some(r)) = (
            self.channel(ChannelName::ProbPos),
            self.channel(ChannelName::ProbNeg),
            self.channel(ChannelName::ProbBg),
        ) else {
            return Ok(());
        };
        for (idx, ((a, b), c)) in p.iter().zip(q).zip(r).enumerate() {
            let s = *a as f64 + *b as f64 + *c as f64;
            if !((s - 1.0).abs() <= PROBABILITY_SUM_TOLERANCE) {
                return Err(Error::InvalidVolume(format!(
                    "probabilities at voxel {idx} sum to {s}"
                )));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn channel_names(&self) -> Vec<ChannelName> {
        self.channels.iter().map(|c| c.name).collect()
    }

    pub fn channel(&self, name: ChannelName) -> Option<&[f32]> {
        self.channels
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.data.as_slice())
    }

    pub fn has_channel(&self, name: ChannelName) -> bool {
        self.channel(name).is_some()
    }

    pub fn require_channel(&self, name: ChannelName) -> Result<&[f32]> {
        self.channel(name)
            .ok_or_else(|| Error::Layout(format!("bundle has no `{name}` channel")))
    }

    /// Returns a copy with `channel` added, or replaced if the name exists.
    pub fn with_channel(&self, channel: Channel) -> Result<Self> {
        let mut channels = self.channels.clone();
        match channels.iter_mut().find(|c| c.name == channel.name) {
            Some(slot) => *slot = channel,
            None => channels.push(channel),
        }
        VolumeBundle::new(self.shape, self.spacing, channels)
    }

    pub fn without_channel(&self, name: ChannelName) -> Self {
        VolumeBundle {
            shape: self.shape,
            spacing: self.spacing,
            channels: self
                .channels
                .iter()
                .filter(|c| c.name != name)
                .cloned()
                .collect(),
        }
    }

    pub fn into_channels(self) -> Vec<Channel> {
        self.channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offset_round_trips() {
        let s = Shape::new(3, 4, 5);
        for off in 0..s.voxel_count() {
            let v = s.index_of(off);
            assert!(s.contains(v));
            assert_eq!(s.offset(v.i, v.j, v.k), off);
        }
        // k slowest
        assert_eq!(s.offset(0, 0, 1), 12);
        assert_eq!(s.offset(1, 0, 0), 1);
    }

    #[test]
    fn rejects_wrong_length() {
        let err = VolumeBundle::new(
            Shape::cube(2),
            Spacing::ISOTROPIC_1MM,
            vec![Channel::new(ChannelName::T2w, vec![0.0; 7])],
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidVolume(_)));
    }

    #[test]
    fn rejects_bad_spacing() {
        let err = VolumeBundle::new(Shape::cube(1), Spacing([1.0, 0.0, 1.0]), vec![]).unwrap_err();
        assert!(matches!(err, Error::InvalidVolume(_)));
    }

    #[test]
    fn rejects_fractional_mask() {
        let err = VolumeBundle::new(
            Shape::cube(1),
            Spacing::ISOTROPIC_1MM,
            vec![Channel::new(ChannelName::GlandMask, vec![0.5])],
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidVolume(_)));
    }

    #[test]
    fn rejects_unnormalized_probabilities() {
        let chans = vec![
            Channel::new(ChannelName::ProbPos, vec![0.5]),
            Channel::new(ChannelName::ProbNeg, vec![0.5]),
            Channel::new(ChannelName::ProbBg, vec![0.1]),
        ];
        assert!(VolumeBundle::new(Shape::cube(1), Spacing::ISOTROPIC_1MM, chans).is_err());
    }

    #[test]
    fn channel_names_parse() {
        for c in ChannelName::ALL {
            assert_eq!(c.as_str().parse::<ChannelName>().unwrap(), c);
        }
        assert!("t2".parse::<ChannelName>().is_err());
    }
}
