//! ASCII XYZ and binary little-endian PLY point cloud files.
//!
//! Writers emit exactly one format each: XYZ as one `x y z` triple per line,
//! PLY as a `vertex` element of three `float` properties. The PLY reader also
//! accepts ASCII bodies, `double` coordinates and extra scalar properties,
//! which it skips.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Point, PointCloud};
use crate::error::{Error, Result};

pub fn write_xyz(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in cloud.points() {
        writeln!(w, "{} {} {}", p[0], p[1], p[2]).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .take(3)
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        if vals.len() != 3 {
            return Err(Error::format(
                path,
                format!("line {}: expected 3 coordinates", lineno + 1),
            ));
        }
        points.push([vals[0], vals[1], vals[2]]);
    }
    PointCloud::new(points).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_ply(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_ply_to(&mut w, cloud).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_ply_to(w: &mut impl Write, cloud: &PointCloud) -> std::io::Result<()> {
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.len()
    )?;
    for p in cloud.points() {
        for &c in p {
            w.write_f32::<LittleEndian>(c as f32)?;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn read(self, r: &mut impl Read) -> std::io::Result<f64> {
        Ok(match self {
            Self::I8 => r.read_i8()? as f64,
            Self::U8 => r.read_u8()? as f64,
            Self::I16 => r.read_i16::<LittleEndian>()? as f64,
            Self::U16 => r.read_u16::<LittleEndian>()? as f64,
            Self::I32 => r.read_i32::<LittleEndian>()? as f64,
            Self::U32 => r.read_u32::<LittleEndian>()? as f64,
            Self::F32 => r.read_f32::<LittleEndian>()? as f64,
            Self::F64 => r.read_f64::<LittleEndian>()?,
        })
    }
}

#[derive(Debug, PartialEq)]
enum Body {
    Ascii,
    BinaryLe,
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_ply_from(&mut BufReader::new(file)).map_err(|e| match e {
        PlyError::Io(e) => Error::io(path, e),
        PlyError::Format(msg) => Error::format(path, msg),
    })
}

enum PlyError {
    Io(std::io::Error),
    Format(String),
}

impl From<std::io::Error> for PlyError {
    fn from(e: std::io::Error) -> Self {
        PlyError::Io(e)
    }
}

fn read_ply_from(r: &mut impl BufRead) -> std::result::Result<PointCloud, PlyError> {
    let bad = |m: &str| PlyError::Format(m.to_string());
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != "ply" {
        return Err(bad("missing `ply` magic"));
    }
    let mut body = None;
    let mut vertex_count = None;
    let mut props: Vec<(String, ScalarType)> = Vec::new();
    let mut in_vertex = false;
    let mut seen_vertex = false;
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("header ended before `end_header`"));
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => body = Some(Body::Ascii),
            ["format", "binary_little_endian", _] => body = Some(Body::BinaryLe),
            ["format", other, _] => return Err(PlyError::Format(format!("unsupported format {other}"))),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                if seen_vertex && in_vertex {
                    in_vertex = false;
                }
                if *name == "vertex" {
                    if seen_vertex {
                        return Err(bad("duplicate vertex element"));
                    }
                    vertex_count = Some(
                        count
                            .parse::<usize>()
                            .map_err(|_| bad("invalid vertex count"))?,
                    );
                    in_vertex = true;
                    seen_vertex = true;
                } else if !seen_vertex {
                    return Err(bad("elements before `vertex` are not supported"));
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(bad("list properties on vertices are not supported"))
            }
            ["property", ty, name] if in_vertex => {
                let ty = ScalarType::parse(ty)
                    .ok_or_else(|| PlyError::Format(format!("unknown property type {ty}")))?;
                props.push((name.to_string(), ty));
            }
            ["property", ..] => {}
            _ => return Err(PlyError::Format(format!("unexpected header line `{}`", line.trim_end()))),
        }
    }
    let body = body.ok_or_else(|| bad("missing format line"))?;
    let n = vertex_count.ok_or_else(|| bad("missing vertex element"))?;
    let col = |axis: &str| {
        props
            .iter()
            .position(|(name, _)| name == axis)
            .ok_or_else(|| PlyError::Format(format!("missing vertex property {axis}")))
    };
    let (ix, iy, iz) = (col("x")?, col("y")?, col("z")?);
    let mut points: Vec<Point> = Vec::with_capacity(n);
    let mut vals = vec![0.0; props.len()];
    for v in 0..n {
        match body {
            Body::BinaryLe => {
                for (slot, (_, ty)) in vals.iter_mut().zip(&props) {
                    *slot = ty.read(r)?;
                }
            }
            Body::Ascii => {
                line.clear();
                r.read_line(&mut line)?;
                let parsed: Vec<f64> = line
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| PlyError::Format(format!("vertex {v}: bad number")))?;
                if parsed.len() < props.len() {
                    return Err(PlyError::Format(format!("vertex {v}: too few values")));
                }
                vals.copy_from_slice(&parsed[..props.len()]);
            }
        }
        points.push([vals[ix], vals[iy], vals[iz]]);
    }
    PointCloud::new(points).map_err(|e| PlyError::Format(e.to_string()))
}

/// Dispatch on extension: `.ply` or `.xyz`/`.txt`.
pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    match extension(path).as_deref() {
        Some("ply") => read_ply(path),
        Some("xyz") | Some("txt") | Some("pts") => read_xyz(path),
        _ => Err(Error::format(path, "unknown point cloud extension (want .ply or .xyz)")),
    }
}

pub fn write_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    match extension(path).as_deref() {
        Some("ply") => write_ply(path, cloud),
        Some("xyz") | Some("txt") | Some("pts") => write_xyz(path, cloud),
        _ => Err(Error::format(path, "unknown point cloud extension (want .ply or .xyz)")),
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn ply_round_trip_is_float32_exact(
            pts in prop::collection::vec(prop::array::uniform3(-100.0f64..100.0), 1..64)
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.ply");
            let cloud = PointCloud::new(pts).unwrap();
            write_ply(&path, &cloud).unwrap();
            let back = read_ply(&path).unwrap();
            prop_assert_eq!(back.len(), cloud.len());
            for (a, b) in cloud.points().iter().zip(back.points()) {
                for k in 0..3 {
                    prop_assert_eq!(b[k], a[k] as f32 as f64);
                }
            }
        }

        #[test]
        fn xyz_round_trip_is_exact(
            pts in prop::collection::vec(prop::array::uniform3(-1e3f64..1e3), 1..64)
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.xyz");
            let cloud = PointCloud::new(pts).unwrap();
            write_xyz(&path, &cloud).unwrap();
            prop_assert_eq!(read_xyz(&path).unwrap(), cloud);
        }
    }

    #[test]
    fn ascii_ply_with_extra_properties_and_faces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ply");
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\ncomment hi\nelement vertex 2\nproperty double x\n\
             property uchar red\nproperty double y\nproperty double z\n\
             element face 0\nproperty list uchar int vertex_indices\nend_header\n\
             1 255 2 3\n4 0 5 6\n",
        )
        .unwrap();
        let c = read_ply(&path).unwrap();
        assert_eq!(c.points(), &[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
    }

    #[test]
    fn malformed_files_report_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        std::fs::write(&path, "not a ply\n").unwrap();
        match read_ply(&path) {
            Err(Error::Format { path: p, .. }) => assert_eq!(p, path),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(read_xyz(dir.path().join("missing.xyz")), Err(Error::Io { .. })));
        let xyz = dir.path().join("short.xyz");
        std::fs::write(&xyz, "1 2\n").unwrap();
        assert!(matches!(read_xyz(&xyz), Err(Error::Format { .. })));
    }
}
