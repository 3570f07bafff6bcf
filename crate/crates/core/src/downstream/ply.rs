use std::io::{self, BufRead, Write};

use nalgebra::Vector3;

/// Writes an ASCII PLY point cloud, coordinates in millimeters.
pub fn write_ply<W: Write>(mut w: W, points: &[Vector3<f64>], colors: Option<&[[u8; 3]]>) -> io::Result<()> {
    if let Some(c) = colors {
        if c.len() != points.len() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                "one color per point required",
            ));
        }
    }
    write!(w, "ply\nformat ascii 1.0\nelement vertex {}\n", points.len())?;
    w.write_all(b"property float x\nproperty float y\nproperty float z\n")?;
    if colors.is_some() {
        w.write_all(b"property uchar red\nproperty uchar green\nproperty uchar blue\n")?;
    }
    w.write_all(b"end_header\n")?;
    for (i, p) in points.iter().enumerate() {
        write!(w, "{} {} {}", p.x as f32, p.y as f32, p.z as f32)?;
        if let Some(c) = colors {
            let [r, g, b] = c[i];
            write!(w, " {r} {g} {b}")?;
        }
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Vertex count declared in a PLY header.
pub fn read_ply_vertex_count<R: BufRead>(r: R) -> io::Result<usize> {
    for line in r.lines() {
        let line = line?;
        if let Some(n) = line.strip_prefix("element vertex ") {
            return n
                .trim()
                .parse()
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e));
        }
        if line == "end_header" {
            break;
        }
    }
    Err(io::Error::new(io::ErrorKind::InvalidData, "no vertex element"))
}
