//! XYZ and ASCII PLY readers and writers.
//!
//! Coordinates are written with the shortest decimal form that parses back to
//! the same `f64`, so a round trip is exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{Point, PointCloud};

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses `x y z` separated by single spaces.
fn parse_point(path: &Path, line_no: usize, line: &str) -> Result<Point> {
    let fields: Vec<&str> = line.split(' ').collect();
    if fields.len() != 3 {
        return Err(parse_err(
            path,
            line_no,
            format!(
                "expected 3 space-separated coordinates, found {} fields",
                fields.len()
            ),
        ));
    }
    let mut p = [0.0; 3];
    for (slot, f) in p.iter_mut().zip(&fields) {
        let v: f64 = f
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("invalid coordinate {f:?}")))?;
        if !v.is_finite() {
            return Err(parse_err(
                path,
                line_no,
                format!("non-finite coordinate {f:?}"),
            ));
        }
        *slot = v;
    }
    Ok(p)
}

fn point_lines(cloud: &PointCloud, out: &mut String) {
    for p in cloud.points() {
        writeln!(out, "{} {} {}", p[0], p[1], p[2]).expect("string write");
    }
}

pub fn read_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        points.push(parse_point(path, i + 1, line)?);
    }
    if points.is_empty() {
        return Err(parse_err(
            path,
            1,
            "empty file: a cloud needs at least one point",
        ));
    }
    PointCloud::new(points)
}

pub fn write_xyz(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let mut out = String::with_capacity(cloud.len() * 64);
    point_lines(cloud, &mut out);
    write_text(path.as_ref(), &out)
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| parse_err(path, 0, format!("unexpected end of file, expected {what}")))
    };

    let (n, l) = next("ply")?;
    if l != "ply" {
        return Err(parse_err(path, n, format!("expected \"ply\", found {l:?}")));
    }
    let (n, l) = next("format")?;
    if l != "format ascii 1.0" {
        return Err(parse_err(
            path,
            n,
            format!("expected \"format ascii 1.0\", found {l:?}"),
        ));
    }
    let (mut n, mut l) = next("element vertex")?;
    while l.starts_with("comment") {
        (n, l) = next("element vertex")?;
    }
    let count: usize = l
        .strip_prefix("element vertex ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| {
            parse_err(
                path,
                n,
                format!("expected \"element vertex N\", found {l:?}"),
            )
        })?;
    if count == 0 {
        return Err(parse_err(path, n, "vertex count must be at least 1"));
    }
    for axis in ["x", "y", "z"] {
        let (n, l) = next("property")?;
        let parts: Vec<&str> = l.split(' ').collect();
        match parts.as_slice() {
            ["property", "float" | "double", name] if *name == axis => {}
            ["property", _, name] => {
                return Err(parse_err(
                    path,
                    n,
                    format!("expected property {axis}, found property {name}"),
                ))
            }
            _ => {
                return Err(parse_err(
                    path,
                    n,
                    format!("expected property {axis}, found {l:?}"),
                ))
            }
        }
    }
    let (n, l) = next("end_header")?;
    if l != "end_header" {
        return Err(parse_err(
            path,
            n,
            format!("expected \"end_header\", found {l:?}"),
        ));
    }
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, l) = next("vertex")?;
        points.push(parse_point(path, n, l)?);
    }
    if let Some((n, _)) = lines.next() {
        return Err(parse_err(
            path,
            n,
            format!("content after {count} vertices"),
        ));
    }
    PointCloud::new(points)
}

pub fn write_ply(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let mut out = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.len()
    );
    point_lines(cloud, &mut out);
    write_text(path.as_ref(), &out)
}

fn is_ply(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ply"))
}

/// Reads PLY for a `.ply` extension, XYZ otherwise.
pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    if is_ply(path) {
        read_ply(path)
    } else {
        read_xyz(path)
    }
}

pub fn write_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    if is_ply(path) {
        write_ply(path, cloud)
    } else {
        write_xyz(path, cloud)
    }
}
