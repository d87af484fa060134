//! CSV dataset bundle: IMU, odometry streams, UWB ranges, anchors and
//! ground truth, one file each.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::anchors::{AnchorMap, AnchorRange};
use crate::error::{Error, Result};
use crate::manifold::{Quat, Vec3};
use crate::preintegration::ImuSample;
use crate::state::{NavState, StampedState};

pub const IMU_HEADER: &[&str] = &["stamp", "gx", "gy", "gz", "ax", "ay", "az"];
pub const OSL_HEADER: &[&str] = &["stamp", "qw", "qx", "qy", "qz", "px", "py", "pz"];
pub const UWB_HEADER: &[&str] = &["stamp", "node_id", "antenna_id", "anchor_id", "range", "snr_ok", "edge_ok"];
pub const ANCHOR_HEADER: &[&str] = &["anchor_id", "x", "y", "z"];
pub const STATE_HEADER: &[&str] = &["stamp", "qw", "qx", "qy", "qz", "px", "py", "pz", "vx", "vy", "vz"];
pub const SURVEY_HEADER: &[&str] = &["anchor_i", "anchor_j", "distance", "stamp"];

pub const IMU_FILE: &str = "imu.csv";
pub const UWB_FILE: &str = "uwb.csv";
pub const ANCHOR_FILE: &str = "anchors.csv";
pub const GROUNDTRUTH_FILE: &str = "groundtruth.csv";

/// One pose of an odometry stream, expressed in that stream's local frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OslPose {
    pub stamp: f64,
    pub q: Quat,
    pub p: Vec3,
}

/// A raw range with its quality flags.
#[derive(Debug, Clone, PartialEq)]
pub struct UwbRecord {
    pub stamp: f64,
    pub node_id: u32,
    pub antenna_id: String,
    pub anchor_id: u32,
    pub range: f64,
    pub snr_ok: bool,
    pub edge_ok: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub imu: Vec<ImuSample>,
    /// Stream name to poses.
    pub osl: BTreeMap<String, Vec<OslPose>>,
    pub uwb: Vec<UwbRecord>,
    pub anchors: AnchorMap,
    /// Empty when the bundle carries no ground truth.
    pub groundtruth: Vec<StampedState>,
}

fn osl_file(name: &str) -> String {
    format!("osl_{name}.csv")
}

fn stamp_str(t: f64) -> String {
    format!("{t:.9}")
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io { path: path.display().to_string(), msg: e.to_string() }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn to_csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    // Writing to a Vec cannot fail.
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Parsed rows of one CSV file with the header already checked.
struct Table {
    path: String,
    rows: Vec<(u64, csv::StringRecord)>,
}

impl Table {
    fn read(path: &Path, header: &[&str]) -> Result<Table> {
        let text = fs::read(path).map_err(|e| io_err(path, e))?;
        let name = path.display().to_string();
        let mut r = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_slice());
        let found = r.headers().map_err(|e| Error::Parse { path: name.clone(), line: 1, msg: e.to_string() })?;
        if found.iter().ne(header.iter().copied()) {
            return Err(Error::Parse {
                path: name,
                line: 1,
                msg: format!("expected header `{}`, found `{}`", header.join(","), found.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::Parse {
                path: name.clone(),
                line: e.position().map_or(0, |p| p.line()),
                msg: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec));
        }
        Ok(Table { path: name, rows })
    }

    fn err(&self, line: u64, msg: impl Into<String>) -> Error {
        Error::Parse { path: self.path.clone(), line, msg: msg.into() }
    }

    fn field<T: FromStr>(&self, line: u64, rec: &csv::StringRecord, i: usize, header: &[&str]) -> Result<T> {
        let raw = rec.get(i).ok_or_else(|| self.err(line, format!("missing column `{}`", header[i])))?;
        raw.parse()
            .map_err(|_| self.err(line, format!("cannot parse `{raw}` as column `{}`", header[i])))
    }

    fn floats<const N: usize>(&self, line: u64, rec: &csv::StringRecord, header: &[&str]) -> Result<[f64; N]> {
        if rec.len() != N {
            return Err(self.err(line, format!("expected {N} columns, found {}", rec.len())));
        }
        let mut out = [0.0f64; N];
        for (i, v) in out.iter_mut().enumerate() {
            *v = self.field(line, rec, i, header)?;
            if !v.is_finite() {
                return Err(self.err(line, format!("non-finite value in column `{}`", header[i])));
            }
        }
        Ok(out)
    }

    fn check_sorted(&self, stamps: impl Iterator<Item = (u64, f64)>) -> Result<()> {
        let mut prev = f64::NEG_INFINITY;
        for (line, t) in stamps {
            if t < prev {
                return Err(self.err(line, format!("stamp {t} is earlier than the previous row ({prev})")));
            }
            prev = t;
        }
        Ok(())
    }
}

fn quat_row(line: u64, table: &Table, w: f64, x: f64, y: f64, z: f64) -> Result<Quat> {
    let q = Quat::from_parts_unchecked(w, Vec3::new(x, y, z));
    if (q.norm() - 1.0).abs() > 1e-6 {
        return Err(table.err(line, format!("quaternion norm {} is not 1", q.norm())));
    }
    Ok(q)
}

fn parse_bool(table: &Table, line: u64, raw: &str) -> Result<bool> {
    match raw {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        _ => Err(table.err(line, format!("cannot parse `{raw}` as a flag"))),
    }
}

pub fn write_imu(path: &Path, imu: &[ImuSample]) -> Result<()> {
    let rows = imu.iter().map(|s| {
        let mut r = vec![stamp_str(s.stamp)];
        r.extend(s.gyro.iter().chain(s.accel.iter()).map(|v| v.to_string()));
        r
    });
    write_atomic(path, &to_csv(IMU_HEADER, rows))
}

pub fn read_imu(path: &Path) -> Result<Vec<ImuSample>> {
    let t = Table::read(path, IMU_HEADER)?;
    let mut out = Vec::with_capacity(t.rows.len());
    for (line, rec) in &t.rows {
        let [s, gx, gy, gz, ax, ay, az] = t.floats::<7>(*line, rec, IMU_HEADER)?;
        out.push(ImuSample::new(s, Vec3::new(gx, gy, gz), Vec3::new(ax, ay, az)));
    }
    t.check_sorted(t.rows.iter().map(|r| r.0).zip(out.iter().map(|s| s.stamp)))?;
    Ok(out)
}

pub fn write_osl(path: &Path, poses: &[OslPose]) -> Result<()> {
    let rows = poses.iter().map(|s| {
        let c = s.q.coords();
        let mut r = vec![stamp_str(s.stamp)];
        r.extend(c.iter().chain(s.p.iter()).map(|v| v.to_string()));
        r
    });
    write_atomic(path, &to_csv(OSL_HEADER, rows))
}

pub fn read_osl(path: &Path) -> Result<Vec<OslPose>> {
    let t = Table::read(path, OSL_HEADER)?;
    let mut out = Vec::with_capacity(t.rows.len());
    for (line, rec) in &t.rows {
        let [s, qw, qx, qy, qz, px, py, pz] = t.floats::<8>(*line, rec, OSL_HEADER)?;
        out.push(OslPose { stamp: s, q: quat_row(*line, &t, qw, qx, qy, qz)?, p: Vec3::new(px, py, pz) });
    }
    t.check_sorted(t.rows.iter().map(|r| r.0).zip(out.iter().map(|s| s.stamp)))?;
    Ok(out)
}

pub fn write_uwb(path: &Path, uwb: &[UwbRecord]) -> Result<()> {
    let rows = uwb.iter().map(|r| {
        vec![
            stamp_str(r.stamp),
            r.node_id.to_string(),
            r.antenna_id.clone(),
            r.anchor_id.to_string(),
            r.range.to_string(),
            u8::from(r.snr_ok).to_string(),
            u8::from(r.edge_ok).to_string(),
        ]
    });
    write_atomic(path, &to_csv(UWB_HEADER, rows))
}

pub fn read_uwb(path: &Path) -> Result<Vec<UwbRecord>> {
    let t = Table::read(path, UWB_HEADER)?;
    let mut out = Vec::with_capacity(t.rows.len());
    for (line, rec) in &t.rows {
        let line = *line;
        if rec.len() != UWB_HEADER.len() {
            return Err(t.err(line, format!("expected {} columns, found {}", UWB_HEADER.len(), rec.len())));
        }
        let stamp: f64 = t.field(line, rec, 0, UWB_HEADER)?;
        let range: f64 = t.field(line, rec, 4, UWB_HEADER)?;
        if !stamp.is_finite() || !range.is_finite() {
            return Err(t.err(line, "non-finite stamp or range"));
        }
        out.push(UwbRecord {
            stamp,
            node_id: t.field(line, rec, 1, UWB_HEADER)?,
            antenna_id: rec[2].to_string(),
            anchor_id: t.field(line, rec, 3, UWB_HEADER)?,
            range,
            snr_ok: parse_bool(&t, line, &rec[5])?,
            edge_ok: parse_bool(&t, line, &rec[6])?,
        });
    }
    t.check_sorted(t.rows.iter().map(|r| r.0).zip(out.iter().map(|s| s.stamp)))?;
    Ok(out)
}

pub fn write_anchors(path: &Path, anchors: &AnchorMap) -> Result<()> {
    let rows = anchors.iter().map(|(id, a)| {
        let mut r = vec![id.to_string()];
        r.extend(a.iter().map(|v| v.to_string()));
        r
    });
    write_atomic(path, &to_csv(ANCHOR_HEADER, rows))
}

pub fn read_anchors(path: &Path) -> Result<AnchorMap> {
    let t = Table::read(path, ANCHOR_HEADER)?;
    let mut out = AnchorMap::new();
    for (line, rec) in &t.rows {
        let line = *line;
        if rec.len() != ANCHOR_HEADER.len() {
            return Err(t.err(line, format!("expected {} columns, found {}", ANCHOR_HEADER.len(), rec.len())));
        }
        let id: u32 = t.field(line, rec, 0, ANCHOR_HEADER)?;
        let mut xyz = [0.0; 3];
        for (i, v) in xyz.iter_mut().enumerate() {
            *v = t.field(line, rec, i + 1, ANCHOR_HEADER)?;
        }
        if out.insert(id, Vec3::new(xyz[0], xyz[1], xyz[2])).is_some() {
            return Err(t.err(line, format!("duplicate anchor id {id}")));
        }
    }
    Ok(out)
}

/// Writes stamped `(q, p, v)` rows; used for ground truth and estimates alike.
pub fn write_states(path: &Path, states: &[StampedState]) -> Result<()> {
    let rows = states.iter().map(|s| {
        let x = &s.state;
        let mut r = vec![stamp_str(s.stamp)];
        r.extend(x.q.coords().iter().chain(x.p.iter()).chain(x.v.iter()).map(|v| v.to_string()));
        r
    });
    write_atomic(path, &to_csv(STATE_HEADER, rows))
}

pub fn read_states(path: &Path) -> Result<Vec<StampedState>> {
    let t = Table::read(path, STATE_HEADER)?;
    let mut out = Vec::with_capacity(t.rows.len());
    for (line, rec) in &t.rows {
        let [s, qw, qx, qy, qz, px, py, pz, vx, vy, vz] = t.floats::<11>(*line, rec, STATE_HEADER)?;
        out.push(StampedState {
            stamp: s,
            state: NavState::new(quat_row(*line, &t, qw, qx, qy, qz)?, Vec3::new(px, py, pz), Vec3::new(vx, vy, vz)),
        });
    }
    t.check_sorted(t.rows.iter().map(|r| r.0).zip(out.iter().map(|s| s.stamp)))?;
    Ok(out)
}

pub fn write_survey(path: &Path, samples: &[AnchorRange]) -> Result<()> {
    let rows = samples.iter().map(|s| {
        vec![s.anchor_i.to_string(), s.anchor_j.to_string(), s.distance.to_string(), stamp_str(s.stamp)]
    });
    write_atomic(path, &to_csv(SURVEY_HEADER, rows))
}

pub fn read_survey(path: &Path) -> Result<Vec<AnchorRange>> {
    let t = Table::read(path, SURVEY_HEADER)?;
    let mut out = Vec::with_capacity(t.rows.len());
    for (line, rec) in &t.rows {
        let line = *line;
        if rec.len() != SURVEY_HEADER.len() {
            return Err(t.err(line, format!("expected {} columns, found {}", SURVEY_HEADER.len(), rec.len())));
        }
        out.push(AnchorRange {
            anchor_i: t.field(line, rec, 0, SURVEY_HEADER)?,
            anchor_j: t.field(line, rec, 1, SURVEY_HEADER)?,
            distance: t.field(line, rec, 2, SURVEY_HEADER)?,
            stamp: t.field(line, rec, 3, SURVEY_HEADER)?,
        });
    }
    Ok(out)
}

impl Dataset {
    /// Writes every stream into `dir`, creating it if needed.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_imu(&dir.join(IMU_FILE), &self.imu)?;
        for (name, poses) in &self.osl {
            write_osl(&dir.join(osl_file(name)), poses)?;
        }
        write_uwb(&dir.join(UWB_FILE), &self.uwb)?;
        write_anchors(&dir.join(ANCHOR_FILE), &self.anchors)?;
        if !self.groundtruth.is_empty() {
            write_states(&dir.join(GROUNDTRUTH_FILE), &self.groundtruth)?;
        }
        Ok(())
    }

    /// Reads a bundle. `imu.csv` is required; UWB, anchors, ground truth and
    /// odometry streams are read when present.
    pub fn read_dir(dir: &Path) -> Result<Dataset> {
        let imu = read_imu(&dir.join(IMU_FILE))?;
        let mut osl = BTreeMap::new();
        let entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| io_err(dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(stream) = name.strip_prefix("osl_").and_then(|s| s.strip_suffix(".csv")) {
                osl.insert(stream.to_string(), read_osl(&entry.path())?);
            }
        }
        let optional = |file: &str| {
            let p = dir.join(file);
            p.exists().then_some(p)
        };
        let uwb = optional(UWB_FILE).map(|p| read_uwb(&p)).transpose()?.unwrap_or_default();
        let anchors = optional(ANCHOR_FILE).map(|p| read_anchors(&p)).transpose()?.unwrap_or_default();
        if let Some(r) = uwb.iter().find(|r| !anchors.contains_key(&r.anchor_id)) {
            return Err(Error::Parse {
                path: dir.join(UWB_FILE).display().to_string(),
                line: 0,
                msg: format!("range to anchor {} which is missing from {ANCHOR_FILE}", r.anchor_id),
            });
        }
        let groundtruth = optional(GROUNDTRUTH_FILE).map(|p| read_states(&p)).transpose()?.unwrap_or_default();
        Ok(Dataset { imu, osl, uwb, anchors, groundtruth })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_header_names_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("imu.csv");
        fs::write(&p, "t,gx,gy,gz,ax,ay,az\n").unwrap();
        let e = read_imu(&p).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }), "{e}");
        assert!(e.to_string().contains("imu.csv:1"));
    }

    #[test]
    fn bad_value_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("imu.csv");
        fs::write(&p, "stamp,gx,gy,gz,ax,ay,az\n0.0,0,0,0,0,0,9.81\n0.1,0,0,x,0,0,9.81\n").unwrap();
        let e = read_imu(&p).unwrap_err();
        assert!(e.to_string().contains("imu.csv:3"), "{e}");
        fs::write(&p, "stamp,gx,gy,gz,ax,ay,az\n0.2,0,0,0,0,0,9.81\n0.1,0,0,0,0,0,9.81\n").unwrap();
        assert!(read_imu(&p).unwrap_err().to_string().contains(":3"));
    }

    #[test]
    fn stamps_use_nine_decimals() {
        assert_eq!(stamp_str(0.0025), "0.002500000");
        assert_eq!(stamp_str(123.456789012), "123.456789012");
    }

    #[test]
    fn missing_required_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Dataset::read_dir(dir.path()), Err(Error::Io { .. })));
    }
}
