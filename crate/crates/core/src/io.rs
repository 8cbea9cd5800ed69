//! Plain-text formats.
//!
//! * point cloud: one point per line, three whitespace-separated decimals;
//!   blank lines and lines starting with `#` are ignored.
//! * transform: four lines of four decimals, the row-major homogeneous matrix
//!   with last row `0 0 0 1`.
//! * mixture: a header line holding `J`, then `J` lines `π μx μy μz σ²`.
//!
//! Floats are written in Rust's shortest round-trip representation, so
//! reading back a written file reproduces the values bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom3d::{Mat4, PointCloud, RigidTransform, Vec3};
use crate::latent_gmm::Gmm;

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_floats(line: usize, s: &str, expected: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = s
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>().map_err(|e| Error::Parse { line, msg: format!("`{tok}`: {e}") })
        })
        .collect::<Result<_>>()?;
    if vals.len() != expected {
        return Err(Error::Parse { line, msg: format!("expected {expected} values, found {}", vals.len()) });
    }
    Ok(vals)
}

pub fn parse_point_cloud(text: &str) -> Result<PointCloud> {
    let mut pts = Vec::new();
    for (line, l) in data_lines(text) {
        let v = parse_floats(line, l, 3)?;
        pts.push(Vec3::new(v[0], v[1], v[2]));
    }
    PointCloud::new(pts)
}

pub fn format_point_cloud(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 64);
    for p in cloud.iter() {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    out
}

pub fn parse_transform(text: &str) -> Result<RigidTransform> {
    let rows: Vec<(usize, &str)> = data_lines(text).collect();
    if rows.len() != 4 {
        return Err(Error::Parse { line: rows.len(), msg: format!("expected 4 rows, found {}", rows.len()) });
    }
    let mut h = Mat4::zeros();
    for (r, (line, l)) in rows.iter().enumerate() {
        let v = parse_floats(*line, l, 4)?;
        for c in 0..4 {
            h[(r, c)] = v[c];
        }
    }
    RigidTransform::from_homogeneous(&h)
}

pub fn format_transform(t: &RigidTransform) -> String {
    let h = t.to_homogeneous();
    let mut out = String::new();
    for r in 0..4 {
        let _ = writeln!(out, "{} {} {} {}", h[(r, 0)], h[(r, 1)], h[(r, 2)], h[(r, 3)]);
    }
    out
}

pub fn parse_gmm(text: &str) -> Result<Gmm> {
    let mut lines = data_lines(text);
    let (hline, header) = lines.next().ok_or(Error::EmptyInput("mixture file"))?;
    let j: usize = header
        .parse()
        .map_err(|e| Error::Parse { line: hline, msg: format!("component count `{header}`: {e}") })?;
    let mut weights = Vec::with_capacity(j);
    let mut means = Vec::with_capacity(j);
    let mut variances = Vec::with_capacity(j);
    for (line, l) in lines {
        let v = parse_floats(line, l, 5)?;
        weights.push(v[0]);
        means.push(Vec3::new(v[1], v[2], v[3]));
        variances.push(v[4]);
    }
    if weights.len() != j {
        return Err(Error::Parse { line: hline, msg: format!("header says {j} components, found {}", weights.len()) });
    }
    Gmm::new(weights, means, variances)
}

pub fn format_gmm(g: &Gmm) -> String {
    let mut out = format!("{}\n", g.num_components());
    for j in 0..g.num_components() {
        let m = g.means()[j];
        let _ = writeln!(out, "{} {} {} {} {}", g.weights()[j], m.x, m.y, m.z, g.variances()[j]);
    }
    out
}

pub fn read_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    parse_point_cloud(&std::fs::read_to_string(path)?)
}

pub fn write_point_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    Ok(std::fs::write(path, format_point_cloud(cloud))?)
}

pub fn read_transform(path: impl AsRef<Path>) -> Result<RigidTransform> {
    parse_transform(&std::fs::read_to_string(path)?)
}

pub fn write_transform(path: impl AsRef<Path>, t: &RigidTransform) -> Result<()> {
    Ok(std::fs::write(path, format_transform(t))?)
}

pub fn read_gmm(path: impl AsRef<Path>) -> Result<Gmm> {
    parse_gmm(&std::fs::read_to_string(path)?)
}

pub fn write_gmm(path: impl AsRef<Path>, g: &Gmm) -> Result<()> {
    Ok(std::fs::write(path, format_gmm(g))?)
}
