//! Binary little-endian PLY serialization of the Gaussian map.
//!
//! One vertex per Gaussian with `double` parameter properties (bit-exact
//! round trips of the in-memory f64 state), plus the lifecycle counters and
//! enums. SH coefficients are stored coefficient-major: `sh_{3·i + channel}`.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use nalgebra::{Vector3, Vector4};

use crate::error::{Error, Result};
use crate::sh;
use crate::types::{Gaussian, GaussianKind, GaussianMap, GaussianState, GeometryAnchor};

const VERSION_COMMENT: &str = "splatrec_map v1";

fn property_names(sh_degree: usize) -> Vec<String> {
    let mut names: Vec<String> = [
        "x", "y", "z", "nx", "ny", "nz", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1",
        "rot_2", "rot_3", "opacity",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for i in 0..3 * sh::coeff_count(sh_degree) {
        names.push(format!("sh_{i}"));
    }
    names
}

/// Write the map as a binary little-endian PLY, one vertex per Gaussian.
pub fn export_ply(map: &GaussianMap, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let sh_degree = map.sh_degree();
    writeln!(file, "ply")?;
    writeln!(file, "format binary_little_endian 1.0")?;
    writeln!(file, "comment {VERSION_COMMENT} sh_degree {sh_degree}")?;
    writeln!(file, "element vertex {}", map.len())?;
    for name in property_names(sh_degree) {
        writeln!(file, "property double {name}")?;
    }
    writeln!(file, "property uint confidence")?;
    writeln!(file, "property uint error_count")?;
    writeln!(file, "property uint created_at")?;
    writeln!(file, "property uchar kind")?;
    writeln!(file, "property uchar state")?;
    writeln!(file, "end_header")?;

    for (_, g) in map.iter_live() {
        let mut doubles: Vec<f64> = Vec::with_capacity(14 + 3 * g.sh.len());
        doubles.extend_from_slice(&[g.position.x, g.position.y, g.position.z]);
        doubles.extend_from_slice(&[g.normal.x, g.normal.y, g.normal.z]);
        doubles.extend_from_slice(&[g.scale.x, g.scale.y, g.scale.z]);
        doubles.extend_from_slice(&[g.rotation[0], g.rotation[1], g.rotation[2], g.rotation[3]]);
        doubles.push(g.opacity);
        for coeff in &g.sh {
            doubles.extend_from_slice(coeff);
        }
        for v in doubles {
            file.write_all(&v.to_le_bytes())?;
        }
        file.write_all(&g.confidence.to_le_bytes())?;
        file.write_all(&g.errors.to_le_bytes())?;
        file.write_all(&g.created_at.to_le_bytes())?;
        file.write_all(&[match g.kind {
            GaussianKind::Opaque => 0u8,
            GaussianKind::Transparent => 1u8,
        }])?;
        file.write_all(&[match g.state {
            GaussianState::Unstable => 0u8,
            GaussianState::Stable => 1u8,
        }])?;
    }
    Ok(())
}

/// Read a map written by [`export_ply`]. Unknown layouts are rejected with a
/// versioned error rather than guessed at.
pub fn import_ply(path: &Path) -> Result<GaussianMap> {
    let file = std::fs::File::open(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let mut reader = std::io::BufReader::new(file);

    let mut line = String::new();
    let mut read_line = |reader: &mut std::io::BufReader<std::fs::File>| -> Result<String> {
        line.clear();
        reader.read_line(&mut line)?;
        Ok(line.trim_end().to_string())
    };

    if read_line(&mut reader)? != "ply" {
        return Err(Error::Load("not a PLY file".into()));
    }
    if read_line(&mut reader)? != "format binary_little_endian 1.0" {
        return Err(Error::Load("unsupported PLY format (expected binary little-endian)".into()));
    }
    let comment = read_line(&mut reader)?;
    let sh_degree: usize = comment
        .strip_prefix(&format!("comment {VERSION_COMMENT} sh_degree "))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| {
            Error::Load(format!("unknown map layout: expected '{VERSION_COMMENT}' comment"))
        })?;
    let element = read_line(&mut reader)?;
    let count: usize = element
        .strip_prefix("element vertex ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Load("missing vertex element".into()))?;

    let mut expected: Vec<String> =
        property_names(sh_degree).iter().map(|n| format!("property double {n}")).collect();
    expected.push("property uint confidence".into());
    expected.push("property uint error_count".into());
    expected.push("property uint created_at".into());
    expected.push("property uchar kind".into());
    expected.push("property uchar state".into());
    for want in &expected {
        let got = read_line(&mut reader)?;
        if got != *want {
            return Err(Error::Load(format!(
                "unknown property layout for {VERSION_COMMENT}: expected '{want}', got '{got}'"
            )));
        }
    }
    if read_line(&mut reader)? != "end_header" {
        return Err(Error::Load("expected end_header".into()));
    }

    let coeffs = sh::coeff_count(sh_degree);
    let n_doubles = 14 + 3 * coeffs;
    let mut map = GaussianMap::new(sh_degree);
    let mut buf = vec![0u8; n_doubles * 8 + 12 + 2];
    for _ in 0..count {
        reader.read_exact(&mut buf)?;
        let d = |i: usize| f64::from_le_bytes(buf[i * 8..i * 8 + 8].try_into().unwrap());
        let ints_at = n_doubles * 8;
        let u = |i: usize| {
            u32::from_le_bytes(buf[ints_at + i * 4..ints_at + i * 4 + 4].try_into().unwrap())
        };
        let kind = match buf[ints_at + 12] {
            0 => GaussianKind::Opaque,
            1 => GaussianKind::Transparent,
            other => return Err(Error::Load(format!("invalid kind byte {other}"))),
        };
        let state = match buf[ints_at + 13] {
            0 => GaussianState::Unstable,
            1 => GaussianState::Stable,
            other => return Err(Error::Load(format!("invalid state byte {other}"))),
        };
        let position = Vector3::new(d(0), d(1), d(2));
        let scale = Vector3::new(d(6), d(7), d(8));
        let rotation = Vector4::new(d(9), d(10), d(11), d(12));
        let mut sh_coeffs = vec![[0.0; 3]; coeffs];
        for (i, coeff) in sh_coeffs.iter_mut().enumerate() {
            for (c, v) in coeff.iter_mut().enumerate() {
                *v = d(14 + 3 * i + c);
            }
        }
        // The regularizer anchor is not serialized; re-anchor transparent
        // Gaussians at their imported geometry.
        let anchor = (kind == GaussianKind::Transparent)
            .then_some(GeometryAnchor { position, scale, rotation });
        map.insert(Gaussian {
            position,
            scale,
            rotation,
            opacity: d(13),
            sh: sh_coeffs,
            normal: Vector3::new(d(3), d(4), d(5)),
            confidence: u(0),
            errors: u(1),
            created_at: u(2),
            kind,
            state,
            anchor,
        });
    }
    Ok(map)
}
