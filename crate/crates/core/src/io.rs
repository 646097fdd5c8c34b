//! File formats: PFM depth, 8- and 16-bit PNG images, OBJ meshes, ASCII PLY
//! point clouds, CSV loss histories and optimizer state.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::Map2;
use crate::recon::TriangleMesh;
use crate::supervision::{AdamState, LossRecord, TrainProgress};
use crate::Vec3;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

/// Single-channel little-endian PFM. Rows are stored bottom to top.
pub fn write_pfm(path: &Path, map: &Map2<f64>) -> Result<()> {
    ensure_parent(path)?;
    let mut out = Vec::with_capacity(32 + map.len() * 4);
    out.extend_from_slice(format!("Pf\n{} {}\n-1.0\n", map.width, map.height).as_bytes());
    for y in (0..map.height).rev() {
        for x in 0..map.width {
            out.extend_from_slice(&(*map.get(x, y) as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<Map2<f64>> {
    let bytes = fs::read(path)?;
    // Header is three whitespace-terminated tokens.
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated PFM header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if tokens[0] != "Pf" {
        return Err(format_err(
            path,
            format!("expected grayscale PFM, found '{}'", tokens[0]),
        ));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| format_err(path, format!("bad PFM size '{s}'")))
    };
    let (w, h) = (parse(&tokens[1])?, parse(&tokens[2])?);
    let scale: f64 = tokens[3]
        .parse()
        .map_err(|_| format_err(path, format!("bad PFM scale '{}'", tokens[3])))?;
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != w * h * 4 {
        return Err(format_err(
            path,
            format!("expected {} data bytes, found {}", w * h * 4, body.len()),
        ));
    }
    let mut map = Map2::filled(w, h, 0.0);
    for (i, c) in body.chunks_exact(4).enumerate() {
        let raw = [c[0], c[1], c[2], c[3]];
        let v = if scale < 0.0 {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (x, y) = (i % w, h - 1 - i / w);
        *map.get_mut(x, y) = v as f64;
    }
    Ok(map)
}

/// 8-bit mask: values in [0, 1] map to 0..255 (0 = lit, 255 = full shadow).
pub fn write_mask_png(path: &Path, mask: &Map2<f64>) -> Result<()> {
    ensure_parent(path)?;
    let img = GrayImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        Luma([(mask.get(x as usize, y as usize).clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path)?;
    Ok(())
}

/// Reads an 8-bit mask back into [0, 1].
pub fn read_mask_png(path: &Path) -> Result<Map2<f64>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Map2::from_vec(
        w as usize,
        h as usize,
        img.pixels().map(|p| p[0] as f64 / 255.0).collect(),
    )
}

/// Reads a mask and thresholds it at half intensity.
pub fn read_binary_mask(path: &Path) -> Result<Map2<f64>> {
    Ok(read_mask_png(path)?.map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthScale {
    /// World units per 16-bit step.
    pub scale: f64,
}

/// 16-bit PNG depth plus a JSON sidecar (`<stem>.json`) holding the scale.
/// The scale is chosen so the maximum value uses the full range.
pub fn write_depth_png16(path: &Path, depth: &Map2<f64>) -> Result<()> {
    ensure_parent(path)?;
    let max = depth
        .data
        .iter()
        .cloned()
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let scale = if max > 0.0 {
        max / u16::MAX as f64
    } else {
        1.0
    };
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(depth.width as u32, depth.height as u32, |x, y| {
            let v = *depth.get(x as usize, y as usize);
            let q = if v.is_finite() {
                (v.max(0.0) / scale).round()
            } else {
                0.0
            };
            Luma([q.min(u16::MAX as f64) as u16])
        });
    img.save(path)?;
    fs::write(
        path.with_extension("json"),
        serde_json::to_string(&DepthScale { scale })? + "\n",
    )?;
    Ok(())
}

pub fn read_depth_png16(path: &Path) -> Result<Map2<f64>> {
    let DepthScale { scale } =
        serde_json::from_str(&fs::read_to_string(path.with_extension("json"))?)?;
    let img = image::open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    Map2::from_vec(
        w as usize,
        h as usize,
        img.pixels().map(|p| p[0] as f64 * scale).collect(),
    )
}

pub fn write_obj(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    ensure_parent(path)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for f in &mesh.faces {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads vertices and faces (polygons are fan-triangulated; texture and
/// normal indices are ignored).
pub fn read_obj(path: &Path) -> Result<TriangleMesh> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let mut it = line.split_whitespace();
        let err = |msg: &str| format_err(path, format!("line {}: {msg}", lineno + 1));
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it
                    .take(3)
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| err("bad vertex coordinate"))?;
                if c.len() != 3 {
                    return Err(err("vertex needs three coordinates"));
                }
                vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in it {
                    let first = tok.split('/').next().unwrap_or_default();
                    let i: i64 = first.parse().map_err(|_| err("bad face index"))?;
                    let resolved = if i > 0 {
                        i - 1
                    } else if i < 0 {
                        vertices.len() as i64 + i
                    } else {
                        return Err(err("face index 0"));
                    };
                    if resolved < 0 || resolved as usize >= vertices.len() {
                        return Err(err("face index out of range"));
                    }
                    idx.push(resolved as usize);
                }
                if idx.len() < 3 {
                    return Err(err("face needs at least three vertices"));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    TriangleMesh::new(vertices, faces)
}

pub fn write_ply_points(path: &Path, points: &[Vec3]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", points.len())?;
    writeln!(
        w,
        "property double x\nproperty double y\nproperty double z\nend_header"
    )?;
    for p in points {
        writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ply_points(path: &Path) -> Result<Vec<Vec3>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err(format_err(path, "missing ply magic"));
    }
    let mut count = None;
    for line in lines.by_ref() {
        if line == "end_header" {
            break;
        }
        if line.starts_with("format") && !line.contains("ascii") {
            return Err(format_err(path, "only ASCII PLY is supported"));
        }
        if let Some(n) = line.strip_prefix("element vertex ") {
            count = Some(
                n.trim()
                    .parse::<usize>()
                    .map_err(|_| format_err(path, "bad vertex count"))?,
            );
        }
    }
    let count = count.ok_or_else(|| format_err(path, "no vertex element"))?;
    let mut pts = Vec::with_capacity(count);
    for line in lines.take(count) {
        let c: Vec<f64> = line
            .split_whitespace()
            .take(3)
            .map(|s| s.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| format_err(path, "bad point coordinate"))?;
        if c.len() != 3 {
            return Err(format_err(path, "point needs three coordinates"));
        }
        pts.push(Vec3::new(c[0], c[1], c[2]));
    }
    if pts.len() != count {
        return Err(format_err(path, "fewer points than declared"));
    }
    Ok(pts)
}

/// Loss history as CSV with columns `epoch, view, loss, sigma_dt, lr`.
pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| format_err(path, e.to_string()))?;
    for r in records {
        w.serialize(r)
            .map_err(|e| format_err(path, e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format_err(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| format_err(path, e.to_string())))
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
struct ProgressHeader {
    next_epoch: usize,
    step: u64,
    param_count: usize,
    moments_file: String,
}

/// Training progress as a JSON header plus a little-endian f64 sidecar
/// (`.bin`) holding the first moments followed by the second moments.
pub fn write_train_progress(path: &Path, progress: &TrainProgress) -> Result<()> {
    ensure_parent(path)?;
    let bin = path.with_extension("bin");
    let moments_file = bin
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| format_err(path, "path has no file name"))?
        .to_string();
    let mut bytes = Vec::with_capacity(progress.adam.m.len() * 16);
    for x in progress.adam.m.iter().chain(&progress.adam.v) {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(&bin, bytes)?;
    write_json(
        path,
        &ProgressHeader {
            next_epoch: progress.next_epoch,
            step: progress.adam.step,
            param_count: progress.adam.m.len(),
            moments_file,
        },
    )
}

pub fn read_train_progress(path: &Path) -> Result<TrainProgress> {
    let header: ProgressHeader = read_json(path)?;
    let bytes = fs::read(path.with_file_name(&header.moments_file))?;
    if bytes.len() != header.param_count * 16 {
        return Err(format_err(
            path,
            format!(
                "moments file holds {} bytes, expected {}",
                bytes.len(),
                header.param_count * 16
            ),
        ));
    }
    let mut values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let v = values.split_off(header.param_count);
    Ok(TrainProgress {
        next_epoch: header.next_epoch,
        adam: AdamState {
            m: values,
            v,
            step: header.step,
        },
    })
}

/// `1/depth` with zero depth mapped to zero.
pub fn disparity(depth: &Map2<f64>) -> Map2<f64> {
    depth.map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_preserves_orientation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let m = Map2::from_vec(3, 2, vec![0.0, 1.5, 2.0, 3.25, 4.0, 1e-3]).unwrap();
        write_pfm(&p, &m).unwrap();
        let r = read_pfm(&p).unwrap();
        for (a, b) in m.data.iter().zip(&r.data) {
            assert!((a - b).abs() < 1e-6);
        }
        // First stored row is the bottom one.
        let bytes = fs::read(&p).unwrap();
        let header = b"Pf\n3 2\n-1.0\n".len();
        assert_eq!(
            f32::from_le_bytes(bytes[header..header + 4].try_into().unwrap()),
            3.25
        );
    }

    #[test]
    fn truncated_pfm_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pfm");
        fs::write(&p, b"Pf\n4 4\n-1.0\n\x00\x00").unwrap();
        assert!(matches!(read_pfm(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn mask_png_levels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = Map2::from_vec(2, 2, vec![0.0, 1.0, 0.5, 2.0]).unwrap();
        write_mask_png(&p, &m).unwrap();
        let img = image::open(&p).unwrap().to_luma8();
        assert_eq!(img.as_raw(), &vec![0u8, 255, 128, 255]);
        let b = read_binary_mask(&p).unwrap();
        assert_eq!(b.data, vec![0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn depth_png16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.png");
        let m = Map2::from_vec(2, 2, vec![0.0, 1.0, 2.5, 7.0]).unwrap();
        write_depth_png16(&p, &m).unwrap();
        let r = read_depth_png16(&p).unwrap();
        for (a, b) in m.data.iter().zip(&r.data) {
            assert!((a - b).abs() <= 7.0 / 65535.0);
        }
    }

    #[test]
    fn obj_round_trip_and_polygons() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.obj");
        fs::write(
            &p,
            "# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1 -1//1\n",
        )
        .unwrap();
        let m = read_obj(&p).unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2], [0, 2, 3]]);
        let p2 = dir.path().join("out.obj");
        write_obj(&p2, &m).unwrap();
        assert_eq!(read_obj(&p2).unwrap(), m);
    }

    #[test]
    fn obj_bad_index() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.obj");
        fs::write(&p, "v 0 0 0\nf 1 2 3\n").unwrap();
        assert!(read_obj(&p).is_err());
    }

    #[test]
    fn ply_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ply");
        let pts = vec![Vec3::new(0.1, 0.2, 0.3), Vec3::new(-1.0, 2.0, 1e-9)];
        write_ply_points(&p, &pts).unwrap();
        assert_eq!(read_ply_points(&p).unwrap(), pts);
    }

    #[test]
    fn loss_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        let recs = vec![LossRecord {
            epoch: 0,
            view: "view_0000".into(),
            loss: 0.25,
            sigma_dt: 150.0,
            lr: 5e-4,
        }];
        write_loss_csv(&p, &recs).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,view,loss,sigma_dt,lr\n"));
        assert_eq!(read_loss_csv(&p).unwrap(), recs);
    }

    #[test]
    fn disparity_zero_convention() {
        let d = disparity(&Map2::from_vec(2, 1, vec![0.0, 4.0]).unwrap());
        assert_eq!(d.data, vec![0.0, 0.25]);
    }

    #[test]
    fn train_progress_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("optim.json");
        let progress = TrainProgress {
            next_epoch: 7,
            adam: AdamState {
                m: vec![0.5, -1.25, 3e-9],
                v: vec![1.0, 2.0, 0.1],
                step: 42,
            },
        };
        write_train_progress(&p, &progress).unwrap();
        assert_eq!(read_train_progress(&p).unwrap(), progress);
        fs::write(dir.path().join("optim.bin"), [0u8; 8]).unwrap();
        assert!(matches!(read_train_progress(&p), Err(Error::Format { .. })));
    }
}
