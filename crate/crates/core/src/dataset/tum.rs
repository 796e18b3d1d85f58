//! TUM-RGBD sequence loader: `rgb.txt` / `depth.txt` listings associated by
//! nearest timestamp, optional `groundtruth.txt`.

use std::path::Path;

use super::{load_trajectory, FrameDescriptor, SequenceSource};
use crate::error::{Error, Result};
use crate::metrics::ASSOCIATION_MAX_GAP;
use crate::types::CameraIntrinsics;

/// Default TUM intrinsics (fr-series, pre-registered streams).
pub fn tum_default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 525.0,
        fy: 525.0,
        cx: 319.5,
        cy: 239.5,
        width: 640,
        height: 480,
        depth_scale: 5000.0,
    }
}

fn parse_listing(dir: &Path, name: &str) -> Result<Vec<(f64, std::path::PathBuf)>> {
    let path = dir.join(name);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(ts), Some(rel)) = (parts.next(), parts.next()) else {
            return Err(Error::Load(format!("{}:{}: malformed line", path.display(), lineno + 1)));
        };
        let ts: f64 = ts
            .parse()
            .map_err(|e| Error::Load(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push((ts, dir.join(rel)));
    }
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Ok(out)
}

/// Load a TUM-format directory: nearest-timestamp association within 0.02 s,
/// unmatched color frames dropped (counted in `dropped`).
pub fn load_tum_sequence(dir: &Path) -> Result<SequenceSource> {
    let rgb = parse_listing(dir, "rgb.txt")?;
    let depth = parse_listing(dir, "depth.txt")?;
    if rgb.is_empty() || depth.is_empty() {
        return Err(Error::Load("empty rgb.txt or depth.txt listing".into()));
    }

    let mut frames = Vec::new();
    let mut dropped = 0usize;
    let mut next_depth = 0usize;
    for (ts, color_path) in &rgb {
        // Depth timestamps are sorted; advance to the closest one not yet used.
        let mut best: Option<(f64, usize)> = None;
        for (j, (dts, _)) in depth.iter().enumerate().skip(next_depth) {
            let gap = (dts - ts).abs();
            if best.map_or(true, |(g, _)| gap < g) {
                best = Some((gap, j));
            }
            if dts - ts > ASSOCIATION_MAX_GAP {
                break;
            }
        }
        match best {
            Some((gap, j)) if gap <= ASSOCIATION_MAX_GAP => {
                frames.push(FrameDescriptor {
                    timestamp: *ts,
                    color_path: color_path.clone(),
                    depth_path: depth[j].1.clone(),
                });
                next_depth = j + 1;
            }
            _ => dropped += 1,
        }
    }
    if frames.is_empty() {
        return Err(Error::Load("no color/depth pairs within the association window".into()));
    }

    let gt_path = dir.join("groundtruth.txt");
    let ground_truth = if gt_path.exists() { Some(load_trajectory(&gt_path)?) } else { None };

    Ok(SequenceSource {
        frames,
        intrinsics: tum_default_intrinsics(),
        ground_truth,
        dropped,
        synthetic: false,
    })
}
