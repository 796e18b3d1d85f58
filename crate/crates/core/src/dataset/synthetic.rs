//! Manifest-based synthetic dataset format.
//!
//! The manifest is a line-oriented text file (`manifest.txt`):
//!
//! ```text
//! splatrec_scene v1
//! width 320
//! height 240
//! fx 277.0
//! fy 277.0
//! cx 160.5
//! cy 120.5
//! depth_scale 1000
//! frame <idx> <color_path> <depth_path> <t> <tx> <ty> <tz> <qx> <qy> <qz> <qw>
//! ```
//!
//! Paths are relative to the manifest directory; poses are world-from-camera.

use std::path::Path;

use super::{FrameDescriptor, SequenceSource};
use crate::error::{Error, Result};
use crate::se3::Pose;
use crate::types::CameraIntrinsics;

pub const MANIFEST_NAME: &str = "manifest.txt";
const MAGIC: &str = "splatrec_scene v1";

/// Load a synthetic dataset directory written by the scene generator.
pub fn load_synthetic_sequence(dir: &Path) -> Result<SequenceSource> {
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();

    let err_at = |lineno: usize, msg: String| Error::Load(format!("{}:{}: {msg}", path.display(), lineno + 1));

    match lines.next() {
        Some((_, line)) if line.trim() == MAGIC => {}
        Some((n, line)) => return Err(err_at(n, format!("expected '{MAGIC}', got '{line}'"))),
        None => return Err(Error::Load(format!("{}: empty manifest", path.display()))),
    }

    let mut fields = std::collections::HashMap::new();
    let mut frames = Vec::new();
    let mut poses = Vec::new();
    for (lineno, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap();
        if key == "frame" {
            let rest: Vec<&str> = parts.collect();
            if rest.len() != 11 {
                return Err(err_at(lineno, format!("frame line needs 11 fields, got {}", rest.len())));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse().map_err(|e| err_at(lineno, format!("{e}")))
            };
            let timestamp = parse(rest[3])?;
            let t = nalgebra::Vector3::new(parse(rest[4])?, parse(rest[5])?, parse(rest[6])?);
            let q = [parse(rest[7])?, parse(rest[8])?, parse(rest[9])?, parse(rest[10])?];
            let color_path = dir.join(rest[1]);
            let depth_path = dir.join(rest[2]);
            if !color_path.exists() {
                return Err(err_at(lineno, format!("missing color file {}", rest[1])));
            }
            if !depth_path.exists() {
                return Err(err_at(lineno, format!("missing depth file {}", rest[2])));
            }
            frames.push(FrameDescriptor { timestamp, color_path, depth_path });
            poses.push((timestamp, Pose::from_translation_quaternion_xyzw(t, q)));
        } else {
            let value = parts
                .next()
                .ok_or_else(|| err_at(lineno, format!("key '{key}' without value")))?;
            let value: f64 =
                value.parse().map_err(|e| err_at(lineno, format!("key '{key}': {e}")))?;
            fields.insert(key.to_string(), value);
        }
    }

    let get = |key: &str| -> Result<f64> {
        fields.get(key).copied().ok_or_else(|| Error::Load(format!("{}: missing key '{key}'", path.display())))
    };
    let intrinsics = CameraIntrinsics {
        fx: get("fx")?,
        fy: get("fy")?,
        cx: get("cx")?,
        cy: get("cy")?,
        width: get("width")? as usize,
        height: get("height")? as usize,
        depth_scale: get("depth_scale")?,
    };
    intrinsics.validate().map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    if frames.is_empty() {
        return Err(Error::Load(format!("{}: no frames", path.display())));
    }

    Ok(SequenceSource {
        frames,
        intrinsics,
        ground_truth: Some(poses),
        dropped: 0,
        synthetic: true,
    })
}

/// Write a manifest for the given intrinsics and (timestamp, pose) frames;
/// file paths follow the generator layout `color/%06d.png`, `depth/%06d.png`.
pub fn write_manifest(
    dir: &Path,
    k: &CameraIntrinsics,
    poses: &[(f64, Pose)],
) -> Result<()> {
    use std::io::Write;
    let mut file = std::io::BufWriter::new(std::fs::File::create(dir.join(MANIFEST_NAME))?);
    writeln!(file, "{MAGIC}")?;
    writeln!(file, "width {}", k.width)?;
    writeln!(file, "height {}", k.height)?;
    writeln!(file, "fx {:.17}", k.fx)?;
    writeln!(file, "fy {:.17}", k.fy)?;
    writeln!(file, "cx {:.17}", k.cx)?;
    writeln!(file, "cy {:.17}", k.cy)?;
    writeln!(file, "depth_scale {:.17}", k.depth_scale)?;
    for (i, (t, pose)) in poses.iter().enumerate() {
        let q = pose.quaternion_xyzw();
        let tr = pose.translation;
        writeln!(
            file,
            "frame {i} color/{i:06}.png depth/{i:06}.png {t:.6} {:.17} {:.17} {:.17} {:.17} {:.17} {:.17} {:.17}",
            tr.x, tr.y, tr.z, q[0], q[1], q[2], q[3]
        )?;
    }
    Ok(())
}
