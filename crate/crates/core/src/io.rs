//! Text formats: sweep and IMU CSV, TUM trajectories, ASCII PLY, and the
//! dataset manifest.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::{HessePlane, Pose, Quat, Vec3};
use crate::imu::ImuSample;
use crate::scan::TimedPoint;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}:{line}: {message}", .path.display())]
    Format { path: PathBuf, line: u64, message: String },
    #[error("I/O error on {}: {source}", .path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl DatasetError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            DatasetError::MissingFile(path.to_path_buf())
        } else {
            DatasetError::Io { path: path.to_path_buf(), source }
        }
    }

    fn format(path: &Path, line: u64, message: impl Into<String>) -> Self {
        DatasetError::Format { path: path.to_path_buf(), line, message: message.into() }
    }
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>, DatasetError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| DatasetError::io(parent, e))?;
        }
    }
    File::create(path).map(BufWriter::new).map_err(|e| DatasetError::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> DatasetError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DatasetError::io(path, io),
        other => DatasetError::format(path, line, format!("{other:?}")),
    }
}

/// Reads a headed numeric CSV, checking the header and column count.
fn read_numeric_csv(path: &Path, header: &[&str]) -> Result<Vec<(u64, Vec<f64>)>, DatasetError> {
    let file = File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(BufReader::new(file));
    let found: Vec<String> = reader.headers().map_err(|e| csv_error(path, e))?.iter().map(str::to_string).collect();
    if found != header {
        return Err(DatasetError::format(
            path,
            1,
            format!("expected header {}, found {}", header.join(","), found.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(DatasetError::format(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let values = record
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| DatasetError::format(path, line, format!("not a number: '{f}'"))))
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push((line, values));
    }
    Ok(rows)
}

const SWEEP_HEADER: [&str; 5] = ["t", "x", "y", "z", "ring"];
const IMU_HEADER: [&str; 7] = ["t", "ax", "ay", "az", "gx", "gy", "gz"];

pub fn write_sweep_csv(path: &Path, points: &[TimedPoint]) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(SWEEP_HEADER).map_err(|e| csv_error(path, e))?;
    for p in points {
        w.write_record([
            p.t.to_string(),
            p.xyz.x.to_string(),
            p.xyz.y.to_string(),
            p.xyz.z.to_string(),
            p.ring.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| DatasetError::io(path, e))
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<TimedPoint>, DatasetError> {
    read_numeric_csv(path, &SWEEP_HEADER)?
        .into_iter()
        .map(|(line, v)| {
            if v[4] < 0.0 || v[4].fract() != 0.0 || v[4] > u16::MAX as f64 {
                return Err(DatasetError::format(path, line, format!("invalid ring index {}", v[4])));
            }
            Ok(TimedPoint::new(Vec3::new(v[1], v[2], v[3]), v[4] as u16, v[0]))
        })
        .collect()
}

pub fn write_imu_csv(path: &Path, samples: &[ImuSample]) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(IMU_HEADER).map_err(|e| csv_error(path, e))?;
    for s in samples {
        let fields = [s.t, s.accel.x, s.accel.y, s.accel.z, s.gyro.x, s.gyro.y, s.gyro.z].map(|v| v.to_string());
        w.write_record(fields).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| DatasetError::io(path, e))
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>, DatasetError> {
    let rows = read_numeric_csv(path, &IMU_HEADER)?;
    let mut out: Vec<ImuSample> = Vec::with_capacity(rows.len());
    for (line, v) in rows {
        if let Some(prev) = out.last() {
            if v[0] <= prev.t {
                return Err(DatasetError::format(path, line, "timestamps not strictly increasing"));
            }
        }
        out.push(ImuSample::new(v[0], Vec3::new(v[1], v[2], v[3]), Vec3::new(v[4], v[5], v[6])));
    }
    Ok(out)
}

const SRP_HEADER: [&str; 7] = ["keyframe_id", "plane_idx", "nx", "ny", "nz", "d", "inliers"];

/// SRP debug export, one row per `(keyframe id, plane index, plane, inliers)`.
pub fn write_srp_csv(path: &Path, rows: &[(usize, usize, HessePlane, usize)]) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(SRP_HEADER).map_err(|e| csv_error(path, e))?;
    for (id, idx, plane, inliers) in rows {
        let n = plane.normal();
        let fields = [
            id.to_string(),
            idx.to_string(),
            n.x.to_string(),
            n.y.to_string(),
            n.z.to_string(),
            plane.distance().to_string(),
            inliers.to_string(),
        ];
        w.write_record(fields).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| DatasetError::io(path, e))
}

pub fn format_tum_line(t: f64, pose: &Pose) -> String {
    let p = pose.translation;
    let q = pose.rotation.quaternion();
    format!("{} {} {} {} {} {} {} {}", t, p.x, p.y, p.z, q.i, q.j, q.k, q.w)
}

/// TUM trajectory: `t x y z qx qy qz qw` per line.
pub fn write_tum(path: &Path, poses: &[(f64, Pose)]) -> Result<(), DatasetError> {
    let mut w = create(path)?;
    for (t, pose) in poses {
        writeln!(w, "{}", format_tum_line(*t, pose)).map_err(|e| DatasetError::io(path, e))?;
    }
    w.flush().map_err(|e| DatasetError::io(path, e))
}

pub fn read_tum(path: &Path) -> Result<Vec<(f64, Pose)>, DatasetError> {
    let file = File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DatasetError::io(path, e))?;
        let line_no = i as u64 + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = trimmed
            .split_whitespace()
            .map(|f| f.parse::<f64>().map_err(|_| DatasetError::format(path, line_no, format!("not a number: '{f}'"))))
            .collect::<Result<_, _>>()?;
        if v.len() != 8 {
            return Err(DatasetError::format(path, line_no, format!("expected 8 fields, found {}", v.len())));
        }
        let q = nalgebra::Quaternion::new(v[7], v[4], v[5], v[6]);
        if !(q.norm() > 0.0) {
            return Err(DatasetError::format(path, line_no, "zero quaternion"));
        }
        out.push((v[0], Pose::new(Quat::from_quaternion(q), Vec3::new(v[1], v[2], v[3]))));
    }
    Ok(out)
}

/// ASCII PLY with `x y z` float properties.
pub fn write_ply(path: &Path, points: &[Vec3]) -> Result<(), DatasetError> {
    let mut w = create(path)?;
    let mut body = || -> std::io::Result<()> {
        writeln!(w, "ply")?;
        writeln!(w, "format ascii 1.0")?;
        writeln!(w, "element vertex {}", points.len())?;
        writeln!(w, "property float x")?;
        writeln!(w, "property float y")?;
        writeln!(w, "property float z")?;
        writeln!(w, "end_header")?;
        for p in points {
            writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
        }
        w.flush()
    };
    body().map_err(|e| DatasetError::io(path, e))
}

pub fn read_ply(path: &Path) -> Result<Vec<Vec3>, DatasetError> {
    let file = File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let mut count = None;
    for (i, line) in lines.by_ref() {
        let line = line.map_err(|e| DatasetError::io(path, e))?;
        if let Some(n) = line.strip_prefix("element vertex ") {
            count = Some(
                n.trim().parse::<usize>().map_err(|_| DatasetError::format(path, i as u64 + 1, "bad vertex count"))?,
            );
        }
        if line.trim() == "end_header" {
            break;
        }
    }
    let count = count.ok_or_else(|| DatasetError::format(path, 0, "missing element vertex"))?;
    let mut out = Vec::with_capacity(count);
    for (i, line) in lines {
        let line = line.map_err(|e| DatasetError::io(path, e))?;
        let v: Vec<f64> = line.split_whitespace().filter_map(|f| f.parse().ok()).collect();
        if v.len() != 3 {
            return Err(DatasetError::format(path, i as u64 + 1, "expected 3 coordinates"));
        }
        out.push(Vec3::new(v[0], v[1], v[2]));
    }
    if out.len() != count {
        return Err(DatasetError::format(path, 0, format!("header declares {count} vertices, body has {}", out.len())));
    }
    Ok(out)
}

/// One entry per sweep file in the manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepEntry {
    pub file: String,
    pub t_start: f64,
    pub t_end: f64,
}

/// Dataset metadata stored in `manifest.txt` as `key=value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub scenario: String,
    pub seed: u64,
    pub lidar_rate: f64,
    pub imu_rate: f64,
    pub extrinsic: Pose,
    pub gravity: Vec3,
    pub accel_noise_density: f64,
    pub gyro_noise_density: f64,
    pub accel_bias_walk: f64,
    pub gyro_bias_walk: f64,
    pub sweeps: Vec<SweepEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let e = &self.extrinsic;
        let q = e.rotation.quaternion();
        let mut s = String::new();
        s.push_str(&format!("scenario={}\n", self.scenario));
        s.push_str(&format!("seed={}\n", self.seed));
        s.push_str(&format!("lidar_rate={}\n", self.lidar_rate));
        s.push_str(&format!("imu_rate={}\n", self.imu_rate));
        s.push_str(&format!(
            "extrinsic={} {} {} {} {} {} {}\n",
            e.translation.x, e.translation.y, e.translation.z, q.i, q.j, q.k, q.w
        ));
        s.push_str(&format!("gravity={} {} {}\n", self.gravity.x, self.gravity.y, self.gravity.z));
        s.push_str(&format!("accel_noise_density={}\n", self.accel_noise_density));
        s.push_str(&format!("gyro_noise_density={}\n", self.gyro_noise_density));
        s.push_str(&format!("accel_bias_walk={}\n", self.accel_bias_walk));
        s.push_str(&format!("gyro_bias_walk={}\n", self.gyro_bias_walk));
        for sw in &self.sweeps {
            s.push_str(&format!("sweep={} {} {}\n", sw.file, sw.t_start, sw.t_end));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        let mut w = create(path)?;
        w.write_all(self.to_text().as_bytes()).and_then(|_| w.flush()).map_err(|e| DatasetError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Manifest, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Manifest, DatasetError> {
        let mut m = Manifest {
            scenario: String::new(),
            seed: 0,
            lidar_rate: 0.0,
            imu_rate: 0.0,
            extrinsic: Pose::identity(),
            gravity: Vec3::new(0.0, 0.0, -9.81),
            accel_noise_density: 0.0,
            gyro_noise_density: 0.0,
            accel_bias_walk: 0.0,
            gyro_bias_walk: 0.0,
            sweeps: Vec::new(),
        };
        let mut seen_rates = (false, false);
        for (i, raw) in text.lines().enumerate() {
            let line_no = i as u64 + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| DatasetError::format(path, line_no, "expected key=value"))?;
            let nums = |n: usize| -> Result<Vec<f64>, DatasetError> {
                let v: Vec<f64> = value
                    .split_whitespace()
                    .map(|f| {
                        f.parse::<f64>()
                            .map_err(|_| DatasetError::format(path, line_no, format!("not a number: '{f}'")))
                    })
                    .collect::<Result<_, _>>()?;
                if v.len() != n {
                    return Err(DatasetError::format(path, line_no, format!("{key} expects {n} values")));
                }
                Ok(v)
            };
            match key.trim() {
                "scenario" => m.scenario = value.trim().to_string(),
                "seed" => {
                    m.seed = value.trim().parse().map_err(|_| DatasetError::format(path, line_no, "invalid seed"))?
                }
                "lidar_rate" => {
                    m.lidar_rate = nums(1)?[0];
                    seen_rates.0 = true;
                }
                "imu_rate" => {
                    m.imu_rate = nums(1)?[0];
                    seen_rates.1 = true;
                }
                "extrinsic" => {
                    let v = nums(7)?;
                    let q = nalgebra::Quaternion::new(v[6], v[3], v[4], v[5]);
                    m.extrinsic = Pose::new(Quat::from_quaternion(q), Vec3::new(v[0], v[1], v[2]));
                }
                "gravity" => {
                    let v = nums(3)?;
                    m.gravity = Vec3::new(v[0], v[1], v[2]);
                }
                "accel_noise_density" => m.accel_noise_density = nums(1)?[0],
                "gyro_noise_density" => m.gyro_noise_density = nums(1)?[0],
                "accel_bias_walk" => m.accel_bias_walk = nums(1)?[0],
                "gyro_bias_walk" => m.gyro_bias_walk = nums(1)?[0],
                "sweep" => {
                    let parts: Vec<&str> = value.split_whitespace().collect();
                    if parts.len() != 3 {
                        return Err(DatasetError::format(path, line_no, "sweep expects: file t_start t_end"));
                    }
                    let t = |s: &str| {
                        s.parse::<f64>()
                            .map_err(|_| DatasetError::format(path, line_no, format!("not a number: '{s}'")))
                    };
                    let entry = SweepEntry { file: parts[0].to_string(), t_start: t(parts[1])?, t_end: t(parts[2])? };
                    if !(entry.t_start < entry.t_end) {
                        return Err(DatasetError::format(path, line_no, "sweep interval is empty"));
                    }
                    m.sweeps.push(entry);
                }
                other => return Err(DatasetError::format(path, line_no, format!("unknown manifest key '{other}'"))),
            }
        }
        if !(seen_rates.0 && seen_rates.1) {
            return Err(DatasetError::format(path, 0, "manifest must declare lidar_rate and imu_rate"));
        }
        Ok(m)
    }
}
