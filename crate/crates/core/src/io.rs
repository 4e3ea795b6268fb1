//! Point-cloud, trajectory, and configuration file I/O.
//!
//! Clouds are read from PLY (ascii or binary little-endian) and plain XYZ
//! text; unknown PLY properties are ignored and rows with non-finite
//! coordinates are dropped with a count. Trajectories use one line per frame,
//! `frame_id tx ty tz qx qy qz qw`, with the quaternion derived from the pose
//! Euler angles on write and converted back on read.

use crate::error::{Error, Location, Result};
use crate::geometry::{euler_from_rotation, Pose};
use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

/// One frame's points in its local coordinate system.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub frame_id: String,
    pub points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(frame_id: impl Into<String>, points: Vec<Vector3<f64>>) -> Self {
        PointCloud {
            frame_id: frame_id.into(),
            points,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Multiplies all coordinates by `scale` (unit conversion on ingest).
    pub fn scaled(mut self, scale: f64) -> Self {
        for p in &mut self.points {
            *p *= scale;
        }
        self
    }
}

/// One frame of a trajectory file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub frame_id: String,
    pub pose: Pose,
}

/// Supported cloud file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    PlyAscii,
    PlyBinaryLe,
    XyzText,
}

impl CloudFormat {
    /// Canonical names accepted on the command line.
    pub fn parse(name: &str) -> Option<CloudFormat> {
        match name {
            "ply-ascii" | "ply" => Some(CloudFormat::PlyAscii),
            "ply-binary" | "ply-binary-le" => Some(CloudFormat::PlyBinaryLe),
            "xyz" | "xyz-text" => Some(CloudFormat::XyzText),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyScalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyScalar {
    fn parse(name: &str) -> Option<PlyScalar> {
        match name {
            "char" | "int8" => Some(PlyScalar::I8),
            "uchar" | "uint8" => Some(PlyScalar::U8),
            "short" | "int16" => Some(PlyScalar::I16),
            "ushort" | "uint16" => Some(PlyScalar::U16),
            "int" | "int32" => Some(PlyScalar::I32),
            "uint" | "uint32" => Some(PlyScalar::U32),
            "float" | "float32" => Some(PlyScalar::F32),
            "double" | "float64" => Some(PlyScalar::F64),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            PlyScalar::I8 | PlyScalar::U8 => 1,
            PlyScalar::I16 | PlyScalar::U16 => 2,
            PlyScalar::I32 | PlyScalar::U32 | PlyScalar::F32 => 4,
            PlyScalar::F64 => 8,
        }
    }

    fn read_le(self, bytes: &[u8]) -> f64 {
        match self {
            PlyScalar::I8 => bytes[0] as i8 as f64,
            PlyScalar::U8 => bytes[0] as f64,
            PlyScalar::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            PlyScalar::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            PlyScalar::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            PlyScalar::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            PlyScalar::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            PlyScalar::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
struct PlyElement {
    name: String,
    count: usize,
    /// (type, name); `None` type marks a variable-length list property.
    properties: Vec<(Option<PlyScalar>, String)>,
}

impl PlyElement {
    fn fixed_row_size(&self) -> Option<usize> {
        self.properties
            .iter()
            .map(|(t, _)| t.map(PlyScalar::size))
            .sum()
    }
}

/// Reads a point cloud, auto-detecting PLY (either encoding) versus XYZ
/// text. Returns the cloud and the number of non-finite rows dropped. The
/// frame id is the file stem.
pub fn read_cloud(path: &Path) -> Result<(PointCloud, usize)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let frame_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "cloud".to_string());
    if bytes.starts_with(b"ply") {
        read_ply(path, &bytes, frame_id)
    } else {
        read_xyz(path, &bytes, frame_id)
    }
}

fn read_ply(path: &Path, bytes: &[u8], frame_id: String) -> Result<(PointCloud, usize)> {
    let parse_err =
        |offset: u64, msg: String| Error::parse(path, Location::ByteOffset(offset), msg);

    // Header is ascii lines up to and including "end_header".
    let mut offset = 0usize;
    let mut lines: Vec<(usize, String)> = Vec::new();
    let mut header_end = None;
    while offset < bytes.len() {
        let nl = bytes[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|p| offset + p)
            .ok_or_else(|| parse_err(offset as u64, "unterminated header".into()))?;
        let line = String::from_utf8_lossy(&bytes[offset..nl])
            .trim_end_matches('\r')
            .to_string();
        lines.push((offset, line.clone()));
        offset = nl + 1;
        if line == "end_header" {
            header_end = Some(offset);
            break;
        }
    }
    let data_start =
        header_end.ok_or_else(|| parse_err(offset as u64, "missing end_header".into()))?;

    let mut ascii = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    for (off, line) in &lines[1..] {
        let mut fields = line.split_whitespace();
        match fields.next() {
            Some("format") => match fields.next() {
                Some("ascii") => ascii = Some(true),
                Some("binary_little_endian") => ascii = Some(false),
                other => {
                    return Err(parse_err(
                        *off as u64,
                        format!("unsupported format {:?}", other.unwrap_or("")),
                    ))
                }
            },
            Some("comment") | Some("obj_info") | Some("end_header") | None => {}
            Some("element") => {
                let name = fields
                    .next()
                    .ok_or_else(|| parse_err(*off as u64, "element without name".into()))?;
                let count: usize = fields
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| parse_err(*off as u64, "element without count".into()))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(*off as u64, "property before element".into()))?;
                let ty = fields
                    .next()
                    .ok_or_else(|| parse_err(*off as u64, "property without type".into()))?;
                if ty == "list" {
                    // list <count type> <elem type> <name>
                    let name = fields
                        .nth(2)
                        .ok_or_else(|| parse_err(*off as u64, "malformed list property".into()))?;
                    element.properties.push((None, name.to_string()));
                } else {
                    let scalar = PlyScalar::parse(ty).ok_or_else(|| {
                        parse_err(*off as u64, format!("unsupported property type '{ty}'"))
                    })?;
                    let name = fields
                        .next()
                        .ok_or_else(|| parse_err(*off as u64, "property without name".into()))?;
                    element.properties.push((Some(scalar), name.to_string()));
                }
            }
            Some(other) => {
                return Err(parse_err(
                    *off as u64,
                    format!("unrecognised header line '{other}'"),
                ))
            }
        }
    }
    let ascii =
        ascii.ok_or_else(|| parse_err(data_start as u64, "header missing format line".into()))?;

    let vertex_index = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| parse_err(data_start as u64, "no vertex element".into()))?;
    let vertex = &elements[vertex_index];
    let mut xyz = [usize::MAX; 3];
    for (i, (ty, name)) in vertex.properties.iter().enumerate() {
        let slot = match name.as_str() {
            "x" => 0,
            "y" => 1,
            "z" => 2,
            _ => continue,
        };
        match ty {
            Some(PlyScalar::F32) | Some(PlyScalar::F64) => xyz[slot] = i,
            _ => {
                return Err(parse_err(
                    data_start as u64,
                    format!("vertex property '{name}' must be float or double"),
                ))
            }
        }
    }
    if xyz.contains(&usize::MAX) {
        return Err(parse_err(
            data_start as u64,
            "vertex element lacks x/y/z properties".into(),
        ));
    }

    let mut points = Vec::with_capacity(vertex.count);
    let mut dropped = 0usize;

    if ascii {
        let text = String::from_utf8_lossy(&bytes[data_start..]);
        let mut rows = text.lines();
        // Elements are stored in declaration order; skip rows of the ones
        // preceding vertex.
        for element in &elements[..vertex_index] {
            for _ in 0..element.count {
                rows.next().ok_or_else(|| {
                    parse_err(
                        bytes.len() as u64,
                        format!("file ends inside element '{}'", element.name),
                    )
                })?;
            }
        }
        for row in 0..vertex.count {
            let line = rows.next().ok_or_else(|| {
                parse_err(
                    bytes.len() as u64,
                    format!("vertex element truncated at row {row} of {}", vertex.count),
                )
            })?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < vertex.properties.len() {
                return Err(parse_err(
                    data_start as u64,
                    format!(
                        "vertex row {row} has {} fields, expected {}",
                        fields.len(),
                        vertex.properties.len()
                    ),
                ));
            }
            let mut coords = [0.0f64; 3];
            let mut finite = true;
            for (slot, &index) in xyz.iter().enumerate() {
                match fields[index].parse::<f64>() {
                    Ok(v) => coords[slot] = v,
                    Err(_) => {
                        return Err(parse_err(
                            data_start as u64,
                            format!("vertex row {row}: cannot parse '{}'", fields[index]),
                        ));
                    }
                }
                finite &= coords[slot].is_finite();
            }
            if finite {
                points.push(Vector3::new(coords[0], coords[1], coords[2]));
            } else {
                dropped += 1;
            }
        }
    } else {
        let mut cursor = data_start;
        for element in &elements[..vertex_index] {
            let row_size = element.fixed_row_size().ok_or_else(|| {
                parse_err(
                    cursor as u64,
                    format!(
                        "cannot skip element '{}' with variable-length list properties",
                        element.name
                    ),
                )
            })?;
            cursor += row_size * element.count;
        }
        let row_size = vertex.fixed_row_size().ok_or_else(|| {
            parse_err(
                cursor as u64,
                "vertex element with list properties is unsupported".into(),
            )
        })?;
        // Column byte offsets of x, y, z within a row.
        let mut col_offset = vec![0usize; vertex.properties.len()];
        let mut acc = 0;
        for (i, (ty, _)) in vertex.properties.iter().enumerate() {
            col_offset[i] = acc;
            acc += ty.expect("fixed rows only").size();
        }
        for row in 0..vertex.count {
            let start = cursor + row * row_size;
            let end = start + row_size;
            if end > bytes.len() {
                return Err(parse_err(
                    bytes.len() as u64,
                    format!(
                        "vertex element truncated at row {row} of {} (need {end} bytes)",
                        vertex.count
                    ),
                ));
            }
            let mut coords = [0.0f64; 3];
            for (slot, &index) in xyz.iter().enumerate() {
                let ty = vertex.properties[index].0.expect("fixed rows only");
                coords[slot] = ty.read_le(&bytes[start + col_offset[index]..end]);
            }
            if coords.iter().all(|c| c.is_finite()) {
                points.push(Vector3::new(coords[0], coords[1], coords[2]));
            } else {
                dropped += 1;
            }
        }
    }

    Ok((PointCloud { frame_id, points }, dropped))
}

fn read_xyz(path: &Path, bytes: &[u8], frame_id: String) -> Result<(PointCloud, usize)> {
    let mut points = Vec::new();
    let mut dropped = 0usize;
    for (lineno, line) in String::from_utf8_lossy(bytes).lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() < 3 {
            return Err(Error::parse(
                path,
                Location::Line(lineno + 1),
                format!("expected 3 coordinates, found {}", fields.len()),
            ));
        }
        let mut coords = [0.0f64; 3];
        for (i, f) in fields[..3].iter().enumerate() {
            coords[i] = f.parse::<f64>().map_err(|_| {
                Error::parse(
                    path,
                    Location::Line(lineno + 1),
                    format!("cannot parse '{f}'"),
                )
            })?;
        }
        if coords.iter().all(|c| c.is_finite()) {
            points.push(Vector3::new(coords[0], coords[1], coords[2]));
        } else {
            dropped += 1;
        }
    }
    Ok((PointCloud { frame_id, points }, dropped))
}

/// Writes a cloud in the requested format. Coordinates are stored as doubles
/// so a read-back reproduces them exactly.
pub fn write_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    match format {
        CloudFormat::PlyAscii | CloudFormat::PlyBinaryLe => {
            let fmt = if format == CloudFormat::PlyAscii {
                "ascii"
            } else {
                "binary_little_endian"
            };
            let mut header = String::new();
            writeln!(header, "ply").unwrap();
            writeln!(header, "format {fmt} 1.0").unwrap();
            writeln!(header, "element vertex {}", cloud.points.len()).unwrap();
            writeln!(header, "property double x").unwrap();
            writeln!(header, "property double y").unwrap();
            writeln!(header, "property double z").unwrap();
            writeln!(header, "end_header").unwrap();
            out.extend_from_slice(header.as_bytes());
            for p in &cloud.points {
                if format == CloudFormat::PlyAscii {
                    out.extend_from_slice(format!("{} {} {}\n", p.x, p.y, p.z).as_bytes());
                } else {
                    out.extend_from_slice(&p.x.to_le_bytes());
                    out.extend_from_slice(&p.y.to_le_bytes());
                    out.extend_from_slice(&p.z.to_le_bytes());
                }
            }
        }
        CloudFormat::XyzText => {
            for p in &cloud.points {
                out.extend_from_slice(format!("{} {} {}\n", p.x, p.y, p.z).as_bytes());
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Quaternion (x, y, z, w) of a pose's rotation.
pub fn pose_quaternion(pose: &Pose) -> [f64; 4] {
    let rot = Rotation3::from_matrix_unchecked(pose.rotation());
    let q = UnitQuaternion::from_rotation_matrix(&rot);
    [q.i, q.j, q.k, q.w]
}

fn pose_from_quaternion(t: Vector3<f64>, q: [f64; 4]) -> Pose {
    let quat = UnitQuaternion::from_quaternion(Quaternion::new(q[3], q[0], q[1], q[2]));
    let r: Matrix3<f64> = *quat.to_rotation_matrix().matrix();
    Pose::new(t, euler_from_rotation(&r))
}

/// Writes one `frame_id tx ty tz qx qy qz qw` line per record.
pub fn write_trajectory(records: &[TrajectoryRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for rec in records {
        let q = pose_quaternion(&rec.pose);
        writeln!(
            out,
            "{} {} {} {} {} {} {} {}",
            rec.frame_id, rec.pose.t.x, rec.pose.t.y, rec.pose.t.z, q[0], q[1], q[2], q[3]
        )
        .unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a trajectory file written by [`write_trajectory`].
pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(Error::parse(
                path,
                Location::Line(lineno + 1),
                format!("expected 8 fields, found {}", fields.len()),
            ));
        }
        let mut vals = [0.0f64; 7];
        for (i, f) in fields[1..].iter().enumerate() {
            vals[i] = f.parse::<f64>().map_err(|_| {
                Error::parse(
                    path,
                    Location::Line(lineno + 1),
                    format!("cannot parse '{f}'"),
                )
            })?;
        }
        let norm =
            (vals[3] * vals[3] + vals[4] * vals[4] + vals[5] * vals[5] + vals[6] * vals[6]).sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(Error::parse(
                path,
                Location::Line(lineno + 1),
                format!("quaternion norm {norm} is not 1"),
            ));
        }
        records.push(TrajectoryRecord {
            frame_id: fields[0].to_string(),
            pose: pose_from_quaternion(
                Vector3::new(vals[0], vals[1], vals[2]),
                [vals[3], vals[4], vals[5], vals[6]],
            ),
        });
    }
    Ok(records)
}

/// Reads a flat `key = value` config file; `#` starts a comment. Keys may
/// repeat; pairs are returned in file order with their line numbers.
pub fn read_key_values(path: &Path) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.split('#').next().unwrap_or("").trim().to_string();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::parse(
                path,
                Location::Line(lineno + 1),
                "expected 'key = value'".to_string(),
            )
        })?;
        out.push((key.trim().to_string(), value.trim().to_string(), lineno + 1));
    }
    Ok(out)
}
