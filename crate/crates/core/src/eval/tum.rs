//! TUM trajectory files: `timestamp tx ty tz qx qy qz qw` per line,
//! world-from-camera, `#` comments.

use std::io::{self, BufRead, Write};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::model::Pose;

#[derive(Debug, Error)]
pub enum TumError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Writes `(timestamp, world-from-camera)` entries.
pub fn write_tum<W: Write>(mut w: W, entries: &[(f64, Pose)]) -> io::Result<()> {
    w.write_all(b"# timestamp tx ty tz qx qy qz qw\n")?;
    for (t, p) in entries {
        let q = p.rotation.quaternion();
        writeln!(
            w,
            "{} {} {} {} {} {} {} {}",
            t, p.translation.x, p.translation.y, p.translation.z, q.i, q.j, q.k, q.w
        )?;
    }
    w.flush()
}

/// Writes camera-from-world poses as a TUM trajectory with the view index
/// as timestamp; missing views are skipped.
pub fn write_tum_trajectory<W: Write>(w: W, camera_from_world: &[Option<Pose>]) -> io::Result<()> {
    let entries: Vec<(f64, Pose)> = camera_from_world
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|p| (i as f64, p.inverse())))
        .collect();
    write_tum(w, &entries)
}

/// Reads `(timestamp, world-from-camera)` entries.
pub fn read_tum<R: BufRead>(r: R) -> Result<Vec<(f64, Pose)>, TumError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let vals: Vec<f64> = body
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| TumError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        if vals.len() != 8 {
            return Err(TumError::Parse {
                line: i + 1,
                message: format!("expected 8 values, found {}", vals.len()),
            });
        }
        let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        if !(q.norm() > 0.0) {
            return Err(TumError::Parse {
                line: i + 1,
                message: "zero quaternion".into(),
            });
        }
        out.push((
            vals[0],
            Pose::new(
                UnitQuaternion::from_quaternion(q),
                Vector3::new(vals[1], vals[2], vals[3]),
            ),
        ));
    }
    Ok(out)
}

/// Pairs every entry of `a` with the entry of `b` nearest in time, keeping
/// pairs closer than `max_dt`. Both lists must be sorted by timestamp.
pub fn associate(a: &[f64], b: &[f64], max_dt: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut j = 0;
    for (i, t) in a.iter().enumerate() {
        while j + 1 < b.len() && (b[j + 1] - t).abs() <= (b[j] - t).abs() {
            j += 1;
        }
        if let Some(tb) = b.get(j) {
            if (tb - t).abs() <= max_dt {
                out.push((i, j));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let poses = vec![
            Some(Pose::new(
                UnitQuaternion::from_scaled_axis(Vector3::new(0.1, -0.2, 0.3)),
                Vector3::new(1.0, 2.0, 3.0),
            )),
            None,
            Some(Pose::identity()),
        ];
        let mut buf = Vec::new();
        write_tum_trajectory(&mut buf, &poses).unwrap();
        let back = read_tum(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, 0.0);
        assert_eq!(back[1].0, 2.0);
        let c = poses[0].unwrap().center();
        assert!((back[0].1.translation - c).norm() < 1e-12);
        assert!((back[0].1.rotation.inverse() * poses[0].unwrap().rotation.inverse()).angle() < 1e-12);
    }

    #[test]
    fn comments_and_bad_lines() {
        let ok = "# header\n\n1.0 0 0 0 0 0 0 1 # trailing\n";
        assert_eq!(read_tum(ok.as_bytes()).unwrap().len(), 1);
        let bad = "1.0 0 0 0 0 0 1\n";
        assert!(matches!(read_tum(bad.as_bytes()), Err(TumError::Parse { line: 1, .. })));
    }

    #[test]
    fn nearest_timestamp_association() {
        let a = [0.0, 1.0, 2.0, 10.0];
        let b = [0.02, 0.9, 1.2, 2.05];
        assert_eq!(associate(&a, &b, 0.1), vec![(0, 0), (1, 1), (2, 3)]);
    }
}
