//! Sequence ingestion (TUM-format RGBD and the manifest-based synthetic
//! format), trajectory files, and PLY map serialization.

mod ply;
mod synthetic;
mod tum;

pub use ply::{export_ply, import_ply};
pub use synthetic::{load_synthetic_sequence, write_manifest, MANIFEST_NAME};
pub use tum::load_tum_sequence;

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::se3::Pose;
use crate::types::{CameraIntrinsics, RgbdFrame};

/// One frame on disk: registered color and depth paths plus a timestamp.
#[derive(Debug, Clone)]
pub struct FrameDescriptor {
    pub timestamp: f64,
    pub color_path: PathBuf,
    pub depth_path: PathBuf,
}

/// A loaded sequence: ordered frame descriptors, intrinsics, and the optional
/// ground-truth trajectory.
#[derive(Debug, Clone)]
pub struct SequenceSource {
    pub frames: Vec<FrameDescriptor>,
    pub intrinsics: CameraIntrinsics,
    pub ground_truth: Option<Vec<(f64, Pose)>>,
    /// Frames dropped during color/depth association.
    pub dropped: usize,
    /// True for synthetic data (bilateral filtering is skipped by default).
    pub synthetic: bool,
}

impl SequenceSource {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Decode one frame: color as [0,1]³, depth in meters via `depth_scale`.
    pub fn load_frame(&self, index: usize) -> Result<RgbdFrame> {
        let desc = self
            .frames
            .get(index)
            .ok_or_else(|| Error::Load(format!("frame {index} out of range")))?;
        let color =
            load_color_png(&desc.color_path, self.intrinsics.width, self.intrinsics.height)?;
        let depth = load_depth_png(
            &desc.depth_path,
            self.intrinsics.width,
            self.intrinsics.height,
            self.intrinsics.depth_scale,
        )?;
        Ok(RgbdFrame { color, depth, frame_index: index as u32, timestamp: desc.timestamp })
    }
}

pub fn load_color_png(path: &Path, width: usize, height: usize) -> Result<Grid<[f64; 3]>> {
    let img = image::open(path)
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?
        .to_rgb8();
    if (img.width() as usize, img.height() as usize) != (width, height) {
        return Err(Error::Load(format!(
            "{}: expected {width}x{height}, got {}x{}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    let mut grid = Grid::new(width, height, [0.0; 3]);
    for (x, y, p) in img.enumerate_pixels() {
        grid.set(
            x as usize,
            y as usize,
            [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0],
        );
    }
    Ok(grid)
}

pub fn load_depth_png(
    path: &Path,
    width: usize,
    height: usize,
    depth_scale: f64,
) -> Result<Grid<f64>> {
    let img = image::open(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let img = img.to_luma16();
    if (img.width() as usize, img.height() as usize) != (width, height) {
        return Err(Error::Load(format!(
            "{}: expected {width}x{height}, got {}x{}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    let mut grid = Grid::new(width, height, 0.0);
    for (x, y, p) in img.enumerate_pixels() {
        grid.set(x as usize, y as usize, p[0] as f64 / depth_scale);
    }
    Ok(grid)
}

/// Write a trajectory as `t tx ty tz qx qy qz qw` lines, nine decimal places.
pub fn export_trajectory(poses: &[(f64, Pose)], path: &Path) -> Result<()> {
    use std::io::Write;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (t, pose) in poses {
        let q = pose.quaternion_xyzw();
        let tr = pose.translation;
        writeln!(
            file,
            "{t:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            tr.x, tr.y, tr.z, q[0], q[1], q[2], q[3]
        )?;
    }
    Ok(())
}

/// Parse a trajectory file in the same format (also the TUM ground-truth
/// format). Comment lines start with '#'.
pub fn load_trajectory(path: &Path) -> Result<Vec<(f64, Pose)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Load(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if fields.len() != 8 {
            return Err(Error::Load(format!(
                "{}:{}: expected 8 fields, got {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let pose = Pose::from_translation_quaternion_xyzw(
            nalgebra::Vector3::new(fields[1], fields[2], fields[3]),
            [fields[4], fields[5], fields[6], fields[7]],
        );
        out.push((fields[0], pose));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::se3_exp;
    use nalgebra::Vector6;

    #[test]
    fn trajectory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.txt");
        let poses: Vec<(f64, Pose)> = (0..10)
            .map(|i| {
                let t = i as f64 * 0.1;
                (t, se3_exp(Vector6::new(0.1 * t, -0.2 * t, 0.05, 0.3 * t, 0.1, -0.2 * t)))
            })
            .collect();
        export_trajectory(&poses, &path).unwrap();
        let back = load_trajectory(&path).unwrap();
        assert_eq!(back.len(), poses.len());
        for ((t0, p0), (t1, p1)) in poses.iter().zip(&back) {
            assert!((t0 - t1).abs() < 1e-6);
            assert!((p0.translation - p1.translation).norm() < 1e-9, "ordering preserved");
            assert!((p0.rotation - p1.rotation).norm() < 1e-8);
        }
    }

    #[test]
    fn identity_pose_line_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.txt");
        export_trajectory(&[(1.5, Pose::identity())], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.trim(),
            "1.500000 0.000000000 0.000000000 0.000000000 0.000000000 0.000000000 0.000000000 1.000000000"
        );
    }
}
