//! On-disk formats: point clouds, frame logs, split manifests, and BEV rasters.
//!
//! Point clouds:
//! - `.bin`: little-endian `f32` records `(x, y, z, intensity)`, 16 bytes per point.
//! - anything else: text, one point per line, 3 or 4 numbers separated by commas
//!   or whitespace. Blank lines and lines starting with `#` are skipped.
//!
//! Frame log (`frames.csv`): header `frame_id,timestamp,x,y,heading,radar,lidar`;
//! cloud paths are relative to the log's directory. Split manifests are text
//! files with one frame id per line.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::{BevImage, Point, PointCloud, Pose};
use crate::synthworld::{Split, SynthDataset};

pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path)?;
    if path.extension().is_some_and(|e| e == "bin") {
        parse_bin_cloud(&bytes, path)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "not UTF-8 text"))?;
        parse_text_cloud(&text, path)
    }
}

pub fn parse_bin_cloud(bytes: &[u8], origin: &Path) -> Result<PointCloud> {
    if bytes.len() % 16 != 0 {
        return Err(Error::format(
            origin,
            format!("{} bytes is not a whole number of 16-byte records", bytes.len()),
        ));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut intensity = Vec::with_capacity(bytes.len() / 16);
    for rec in bytes.chunks_exact(16) {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()) as f64;
        points.push(Point::new(f(0), f(1), f(2)));
        intensity.push(f(3));
    }
    PointCloud::with_intensity(points, Some(intensity)).map_err(|e| Error::format(origin, e.to_string()))
}

pub fn parse_text_cloud(text: &str, origin: &Path) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut intensity = Vec::new();
    let mut columns = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = |m: String| Error::format(origin, format!("line {}: {m}", lineno + 1));
        let fields: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| at(format!("`{s}` is not a number"))))
            .collect::<Result<_>>()?;
        if !(3..=4).contains(&fields.len()) {
            return Err(at(format!("expected 3 or 4 fields, found {}", fields.len())));
        }
        if *columns.get_or_insert(fields.len()) != fields.len() {
            return Err(at("inconsistent column count".into()));
        }
        points.push(Point::new(fields[0], fields[1], fields[2]));
        if fields.len() == 4 {
            intensity.push(fields[3]);
        }
    }
    let intensity = (columns == Some(4)).then_some(intensity);
    PointCloud::with_intensity(points, intensity).map_err(|e| Error::format(origin, e.to_string()))
}

/// Writes the `.bin` format; missing intensity is stored as 0.
pub fn write_point_cloud_bin(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for (k, p) in cloud.points().iter().enumerate() {
        let i = cloud.intensity().map_or(0.0, |v| v[k]);
        for v in [p.x, p.y, p.z, i] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub pose: Pose,
    pub radar: PathBuf,
    pub lidar: PathBuf,
}

const FRAME_LOG_HEADER: &str = "frame_id,timestamp,x,y,heading,radar,lidar";

pub fn parse_frame_log(text: &str, origin: &Path) -> Result<Vec<FrameRecord>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == FRAME_LOG_HEADER => {}
        _ => return Err(Error::format(origin, format!("line 1: expected header `{FRAME_LOG_HEADER}`"))),
    }
    let mut seen = std::collections::HashSet::new();
    lines
        .map(|(lineno, line)| {
            let at = |m: &str| Error::format(origin, format!("line {}: {m}", lineno + 1));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 7 {
                return Err(at(&format!("expected 7 fields, found {}", f.len())));
            }
            let frame_id: u64 = f[0].parse().map_err(|_| at("bad frame_id"))?;
            let num = |s: &str, what: &str| -> Result<f64> {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| at(&format!("bad {what}")))
            };
            let (t, x, y, h) = (num(f[1], "timestamp")?, num(f[2], "x")?, num(f[3], "y")?, num(f[4], "heading")?);
            if !seen.insert(frame_id) {
                return Err(at(&format!("duplicate frame id {frame_id}")));
            }
            Ok(FrameRecord {
                frame_id,
                pose: Pose::new(x, y, h, t),
                radar: PathBuf::from(f[5]),
                lidar: PathBuf::from(f[6]),
            })
        })
        .collect()
}

pub fn read_frame_log(path: &Path) -> Result<Vec<FrameRecord>> {
    parse_frame_log(&fs::read_to_string(path)?, path)
}

pub fn write_frame_log(path: &Path, records: &[FrameRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{FRAME_LOG_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.frame_id,
            r.pose.timestamp,
            r.pose.x,
            r.pose.y,
            r.pose.heading,
            r.radar.display(),
            r.lidar.display()
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_split(path: &Path) -> Result<Vec<u64>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .map(|(n, l)| (n, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(n, l)| {
            l.parse::<u64>()
                .map_err(|_| Error::format(path, format!("line {}: `{l}` is not a frame id", n + 1)))
        })
        .collect()
}

pub fn write_split(path: &Path, ids: &[u64]) -> Result<()> {
    let body: String = ids.iter().map(|id| format!("{id}\n")).collect();
    fs::write(path, body)?;
    Ok(())
}

pub const SPLIT_NAMES: [&str; 4] = ["train", "validation", "database", "query"];

const BEV_MAGIC: &[u8; 8] = b"RKDBEV01";

/// Magic, u32 height, u32 width, then row-major little-endian f64 values.
pub fn write_bev(path: &Path, img: &BevImage) -> Result<()> {
    let (h, w) = img.dim();
    let mut out = Vec::with_capacity(16 + 8 * h * w);
    out.extend_from_slice(BEV_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in img.values().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_bev(path: &Path) -> Result<BevImage> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != BEV_MAGIC {
        return Err(Error::format(path, "not a BEV raster"));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 8 * h * w {
        return Err(Error::format(path, "payload length does not match dimensions"));
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    BevImage::new(Array2::from_shape_vec((h, w), values).expect("length checked"))
}

/// 8-bit binary PGM preview, values scaled from [0, 1].
pub fn write_pgm(path: &Path, img: &BevImage) -> Result<()> {
    let (h, w) = img.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.values().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out)?;
    Ok(())
}

/// Writes `frames.csv`, `radar/*.bin`, `lidar/*.bin`, and `splits/*.txt` under `dir`.
pub fn write_synth_dataset(dir: &Path, ds: &SynthDataset) -> Result<()> {
    for sub in ["radar", "lidar", "splits"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut records = Vec::with_capacity(ds.frames.len());
    for f in &ds.frames {
        let radar = PathBuf::from(format!("radar/{:06}.bin", f.id));
        let lidar = PathBuf::from(format!("lidar/{:06}.bin", f.id));
        write_point_cloud_bin(&dir.join(&radar), &f.radar)?;
        write_point_cloud_bin(&dir.join(&lidar), &f.lidar)?;
        records.push(FrameRecord {
            frame_id: f.id,
            pose: f.pose,
            radar,
            lidar,
        });
    }
    write_frame_log(&dir.join("frames.csv"), &records)?;
    for (name, split) in [
        ("train", Some(Split::Train)),
        ("validation", None),
        ("database", Some(Split::Database)),
        ("query", Some(Split::Query)),
    ] {
        let ids = split.map(|s| ds.ids(s)).unwrap_or_default();
        write_split(&dir.join("splits").join(format!("{name}.txt")), &ids)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_cloud_variants() {
        let p = Path::new("mem");
        let c = parse_text_cloud("# x y z\n1 2 3\n\n4,5,6\n", p).unwrap();
        assert_eq!(c.len(), 2);
        assert!(c.intensity().is_none());
        let c = parse_text_cloud("1 2 3 0.5\n", p).unwrap();
        assert_eq!(c.intensity(), Some(&[0.5][..]));
        assert!(parse_text_cloud("1 2\n", p).is_err());
        assert!(parse_text_cloud("1 2 3\n1 2 3 4\n", p).is_err());
        let err = parse_text_cloud("1 2 3\n1 x 3\n", p).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn frame_log_errors_name_the_line() {
        let p = Path::new("frames.csv");
        let ok = format!("{FRAME_LOG_HEADER}\n3,0.5,1,2,0.1,r.bin,l.bin\n");
        assert_eq!(parse_frame_log(&ok, p).unwrap()[0].frame_id, 3);
        assert!(parse_frame_log("id,x\n", p).is_err());
        let dup = format!("{FRAME_LOG_HEADER}\n3,0,1,2,0,r,l\n3,0,1,2,0,r,l\n");
        assert!(parse_frame_log(&dup, p).unwrap_err().to_string().contains("line 3"));
    }

    #[test]
    fn binary_cloud_length_check() {
        assert!(parse_bin_cloud(&[0u8; 15], Path::new("x.bin")).is_err());
        assert!(parse_bin_cloud(&[], Path::new("x.bin")).unwrap().is_empty());
    }
}
