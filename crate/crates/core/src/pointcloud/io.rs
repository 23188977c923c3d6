//! Frame files, index files and ground-truth pose files.
//!
//! Binary frames are packed little-endian `f32` records `(x, y, z, intensity,
//! radial_velocity)`. Pose files hold one row-major 3x4 world-from-sensor matrix per
//! line; in memory poses are world-to-sensor, so rows are inverted on the way in and out.

use super::synth::Frame;
use super::{CloudError, PointCloud};
use crate::lie::Pose;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

const RECORD_BYTES: usize = 20;
pub const CSV_HEADER: &str = "x,y,z,intensity,radial_velocity";

fn io_err(path: &Path, source: std::io::Error) -> CloudError {
    CloudError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, message: impl Into<String>) -> CloudError {
    CloudError::Parse {
        path: path.display().to_string(),
        message: message.into(),
    }
}

fn from_records(records: impl Iterator<Item = [f64; 5]>) -> PointCloud {
    let mut points = Vec::new();
    let mut intensity = Vec::new();
    let mut radial = Vec::new();
    for r in records {
        points.push([r[0], r[1], r[2]]);
        intensity.push(r[3]);
        radial.push(r[4]);
    }
    PointCloud {
        points,
        intensity: Some(intensity),
        radial_velocity: Some(radial),
        frame_id: 0,
    }
}

fn records(cloud: &PointCloud) -> impl Iterator<Item = [f64; 5]> + '_ {
    cloud.points.iter().enumerate().map(|(i, p)| {
        [p[0], p[1], p[2], cloud.intensity_at(i), cloud.radial_velocity_at(i)]
    })
}

pub fn write_frame_bin(path: &Path, cloud: &PointCloud) -> Result<(), CloudError> {
    let mut bytes = Vec::with_capacity(cloud.len() * RECORD_BYTES);
    for r in records(cloud) {
        for v in r {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn read_frame_bin(path: &Path) -> Result<PointCloud, CloudError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(parse_err(
            path,
            format!("{} bytes is not a whole number of records", bytes.len()),
        ));
    }
    let cloud = from_records(bytes.chunks_exact(RECORD_BYTES).map(|rec| {
        let mut r = [0.0; 5];
        for (k, v) in r.iter_mut().enumerate() {
            let b: [u8; 4] = rec[4 * k..4 * k + 4].try_into().expect("4-byte slice");
            *v = f32::from_le_bytes(b) as f64;
        }
        r
    }));
    cloud.validate()?;
    Ok(cloud)
}

pub fn write_frame_csv(path: &Path, cloud: &PointCloud) -> Result<(), CloudError> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records(cloud) {
        let _ = writeln!(out, "{},{},{},{},{}", r[0], r[1], r[2], r[3], r[4]);
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn read_frame_csv(path: &Path) -> Result<PointCloud, CloudError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        other => {
            return Err(parse_err(
                path,
                format!("expected header `{CSV_HEADER}`, found {other:?}"),
            ))
        }
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let vals: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| parse_err(path, format!("row {}: {e}", n + 1)))?;
        let r: [f64; 5] = vals
            .try_into()
            .map_err(|_| parse_err(path, format!("row {}: expected 5 columns", n + 1)))?;
        rows.push(r);
    }
    let cloud = from_records(rows.into_iter());
    cloud.validate()?;
    Ok(cloud)
}

/// Reads a frame as binary or CSV depending on the file extension.
pub fn read_frame_file(path: &Path) -> Result<PointCloud, CloudError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_frame_csv(path),
        _ => read_frame_bin(path),
    }
}

/// Frame file paths listed in `index.txt`, relative to the dataset root.
pub fn read_index(root: &Path) -> Result<Vec<PathBuf>, CloudError> {
    let path = root.join("index.txt");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let files: Vec<PathBuf> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| root.join(l))
        .collect();
    if files.is_empty() {
        return Err(parse_err(&path, "index lists no frames"));
    }
    Ok(files)
}

/// Writes world-to-sensor poses as world-from-sensor 3x4 rows.
pub fn write_pose_file(path: &Path, poses: &[Pose]) -> Result<(), CloudError> {
    let mut out = String::new();
    for pose in poses {
        let row = pose.inverse().to_row_major_3x4();
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Reads 3x4 world-from-sensor rows back into world-to-sensor poses.
pub fn read_pose_file(path: &Path) -> Result<Vec<Pose>, CloudError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut poses = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<Result<_, _>>()
            .map_err(|e| parse_err(path, format!("line {}: {e}", n + 1)))?;
        let row: [f64; 12] = vals
            .try_into()
            .map_err(|_| parse_err(path, format!("line {}: expected 12 numbers", n + 1)))?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(path, format!("line {}: non-finite value", n + 1)));
        }
        poses.push(Pose::from_row_major_3x4(&row).inverse());
    }
    Ok(poses)
}

/// A sequence of frames with optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frames: Vec<PointCloud>,
    pub ground_truth: Option<Vec<Pose>>,
}

/// Writes `frames/NNNNNN.bin`, `index.txt`, `groundtruth.txt` and `manifest.json`.
pub fn write_dataset(
    root: &Path,
    frames: &[Frame],
    manifest: &serde_json::Value,
) -> Result<(), CloudError> {
    let frame_dir = root.join("frames");
    fs::create_dir_all(&frame_dir).map_err(|e| io_err(&frame_dir, e))?;
    let mut index = String::new();
    for (k, f) in frames.iter().enumerate() {
        let name = format!("frames/{k:06}.bin");
        write_frame_bin(&root.join(&name), &f.cloud)?;
        index.push_str(&name);
        index.push('\n');
    }
    let index_path = root.join("index.txt");
    fs::write(&index_path, index).map_err(|e| io_err(&index_path, e))?;
    let poses: Vec<Pose> = frames.iter().map(|f| f.pose).collect();
    write_pose_file(&root.join("groundtruth.txt"), &poses)?;
    let manifest_path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).expect("json values serialize");
    fs::write(&manifest_path, text + "\n").map_err(|e| io_err(&manifest_path, e))
}

/// Loads frames in index order; `groundtruth.txt` is optional.
pub fn load_dataset(root: &Path) -> Result<Dataset, CloudError> {
    let files = read_index(root)?;
    let frames = files
        .iter()
        .enumerate()
        .map(|(k, p)| read_frame_file(p).map(|c| c.with_frame_id(k as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    let gt_path = root.join("groundtruth.txt");
    let ground_truth = if gt_path.exists() {
        let poses = read_pose_file(&gt_path)?;
        if poses.len() != frames.len() {
            return Err(parse_err(
                &gt_path,
                format!("{} poses for {} frames", poses.len(), frames.len()),
            ));
        }
        Some(poses)
    } else {
        None
    };
    Ok(Dataset {
        frames,
        ground_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::Twist;

    fn sample_cloud() -> PointCloud {
        PointCloud::with_attributes(
            vec![[1.5, -2.25, 0.125], [10.0, 3.0, -1.0]],
            vec![12.0, 0.5],
            vec![-3.25, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn binary_and_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = sample_cloud();
        let bin = dir.path().join("a.bin");
        let csv = dir.path().join("a.csv");
        write_frame_bin(&bin, &cloud).unwrap();
        write_frame_csv(&csv, &cloud).unwrap();
        assert_eq!(read_frame_file(&bin).unwrap(), cloud);
        assert_eq!(read_frame_file(&csv).unwrap(), cloud);
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        fs::write(&p, [0u8; 21]).unwrap();
        assert!(matches!(read_frame_bin(&p), Err(CloudError::Parse { .. })));
    }

    #[test]
    fn pose_file_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("poses.txt");
        let poses = vec![
            Pose::identity(),
            Pose::exp(&Twist::from_slice(&[0.3, -1.0, 2.0, 0.1, -0.2, 0.3])),
        ];
        write_pose_file(&p, &poses).unwrap();
        let back = read_pose_file(&p).unwrap();
        for (a, b) in poses.iter().zip(&back) {
            assert!(a.distance(b).unwrap() < 1e-14);
        }
    }
}
