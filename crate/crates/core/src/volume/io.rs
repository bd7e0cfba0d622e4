//! Bundle directory format: `meta.json` plus one `<channel>.raw` per channel
//! (headerless little-endian `f32`, k-slowest voxel order).

use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use super::{Channel, ChannelName, Shape, Spacing, VolumeBundle};
use crate::error::{Error, Result};

pub const META_FILE: &str = "meta.json";

/// Parsed contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BundleMeta {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub channels: Vec<String>,
}

impl BundleMeta {
    pub fn of(bundle: &VolumeBundle) -> Self {
        BundleMeta {
            shape: bundle.shape().as_array(),
            spacing_mm: bundle.spacing().0,
            channels: bundle
                .channels()
                .iter()
                .map(|c| c.name.as_str().to_owned())
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("meta serializes");
        s.push('\n');
        s
    }

    /// Parses and validates a sidecar. Errors name the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let root: Value =
            serde_json::from_str(text).map_err(|e| Error::format("meta.json", e.to_string()))?;
        let obj = root
            .as_object()
            .ok_or_else(|| Error::format("meta.json", "top level is not an object"))?;

        let shape = triple(obj.get("shape"), "shape", |v| {
            v.as_u64().and_then(|u| usize::try_from(u).ok())
        })?;
        if shape.contains(&0) {
            return Err(Error::format("shape", "components must be >= 1"));
        }
        if shape
            .iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n))
            .and_then(|n| n.checked_mul(4))
            .is_none()
        {
            return Err(Error::format("shape", "voxel count overflows"));
        }

        let spacing_mm = triple(obj.get("spacing_mm"), "spacing_mm", Value::as_f64)?;
        if !spacing_mm.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::format("spacing_mm", "components must be finite and > 0"));
        }

        let channels = obj
            .get("channels")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::format("channels", "missing or not an array"))?
            .iter()
            .map(|v| {
                let name = v
                    .as_str()
                    .ok_or_else(|| Error::format("channels", "entry is not a string"))?;
                name.parse::<ChannelName>()?;
                Ok(name.to_owned())
            })
            .collect::<Result<Vec<_>>>()?;
        for (idx, c) in channels.iter().enumerate() {
            if channels[..idx].contains(c) {
                return Err(Error::format("channels", format!("duplicate channel `{c}`")));
            }
        }

        Ok(BundleMeta {
            shape,
            spacing_mm,
            channels,
        })
    }
}

fn triple<T: Copy + Default>(
    v: Option<&Value>,
    field: &str,
    get: impl Fn(&Value) -> Option<T>,
) -> Result<[T; 3]> {
    let arr = v
        .and_then(Value::as_array)
        .ok_or_else(|| Error::format(field, "missing or not an array"))?;
    if arr.len() != 3 {
        return Err(Error::format(field, format!("expected 3 entries, found {}", arr.len())));
    }
    let mut out = [T::default(); 3];
    for (slot, item) in out.iter_mut().zip(arr) {
        *slot = get(item).ok_or_else(|| Error::format(field, format!("invalid entry {item}")))?;
    }
    Ok(out)
}

pub fn encode_channel(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Decodes a raw channel, requiring exactly `4 * voxels` bytes.
pub fn decode_channel(channel: &str, bytes: &[u8], voxels: usize) -> Result<Vec<f32>> {
    let expected = voxels.checked_mul(4).unwrap_or(usize::MAX);
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            channel: channel.to_owned(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub fn save_bundle(bundle: &VolumeBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, BundleMeta::of(bundle).to_json()).map_err(|e| Error::io(&meta_path, e))?;
    for ch in bundle.channels() {
        let path = dir.join(format!("{}.raw", ch.name));
        fs::write(&path, encode_channel(&ch.data)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<VolumeBundle> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta = BundleMeta::from_json(&text)?;
    let shape = Shape::from_array(meta.shape);
    let channels = meta
        .channels
        .iter()
        .map(|name| {
            let path = dir.join(format!("{name}.raw"));
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            Ok(Channel::new(
                name.parse()?,
                decode_channel(name, &bytes, shape.voxel_count())?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    VolumeBundle::new(shape, Spacing(meta.spacing_mm), channels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_round_trip_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let b = VolumeBundle::new(
            Shape::cube(4),
            Spacing::ISOTROPIC_1MM,
            vec![Channel::new(ChannelName::T2w, vec![0.0; 64])],
        )
        .unwrap();
        save_bundle(&b, dir.path()).unwrap();
        let raw = fs::read(dir.path().join("T2w.raw")).unwrap();
        assert_eq!(raw, vec![0u8; 256]);
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(back, b);
        let dir2 = tempfile::tempdir().unwrap();
        save_bundle(&back, dir2.path()).unwrap();
        for f in ["meta.json", "T2w.raw"] {
            assert_eq!(
                fs::read(dir.path().join(f)).unwrap(),
                fs::read(dir2.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn short_raw_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join(META_FILE),
            r#"{"shape":[64,64,64],"spacing_mm":[1,1,1],"channels":["T2w"]}"#,
        )
        .unwrap();
        fs::write(dir.path().join("T2w.raw"), vec![0u8; (64 * 64 * 64 - 1) * 4]).unwrap();
        match load_bundle(dir.path()).unwrap_err() {
            Error::SizeMismatch {
                expected, actual, ..
            } => {
                assert_eq!(expected, 64 * 64 * 64 * 4);
                assert_eq!(actual, expected - 4);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn sidecar_errors_name_field() {
        let cases = [
            (r#"{"spacing_mm":[1,1,1],"channels":[]}"#, "shape"),
            (r#"{"shape":[1,1],"spacing_mm":[1,1,1],"channels":[]}"#, "shape"),
            (r#"{"shape":[1,1,1],"spacing_mm":[1,-1,1],"channels":[]}"#, "spacing_mm"),
            (r#"{"shape":[1,1,1],"spacing_mm":[1,1,1],"channels":["bogus"]}"#, "channels"),
            (r#"{"shape":[1,1,1],"spacing_mm":[1,1,1]}"#, "channels"),
            ("not json", "meta.json"),
        ];
        for (text, field) in cases {
            match BundleMeta::from_json(text).unwrap_err() {
                Error::Format { field: f, .. } => assert_eq!(f, field, "{text}"),
                e => panic!("unexpected {e}"),
            }
        }
    }
}
