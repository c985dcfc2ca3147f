//! ASCII XYZ, ASCII PLY and OFF readers, and the PLY writer.
//!
//! All readers work on `&str` so they can be driven directly by fuzzers;
//! the path-based entry points only add file I/O on top.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CloudFormat {
    Xyz,
    Ply,
    Off,
}

impl FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xyz" => Ok(Self::Xyz),
            "ply" => Ok(Self::Ply),
            "off" => Ok(Self::Off),
            other => Err(Error::Config(format!("unknown cloud format `{other}`"))),
        }
    }
}

/// Options for [`load_cloud`]; only OFF meshes use them.
#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    pub off_samples: usize,
    pub seed: u64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            off_samples: 1024,
            seed: 0,
        }
    }
}

pub fn load_cloud(path: &Path, format: CloudFormat, opts: &LoadOptions) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        CloudFormat::Xyz => parse_xyz(&text),
        CloudFormat::Ply => parse_ply(&text).map(|(cloud, _)| cloud),
        CloudFormat::Off => parse_off(&text)?.sample_surface(opts.off_samples, opts.seed),
    }
}

/// Loads a PLY file and its optional `variation` scalar.
pub fn load_ply_with_scalars(path: &Path) -> Result<(PointCloud, Option<Vec<f64>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&text)
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::format(line, format!("expected a number, found `{tok}`")))?;
    if !v.is_finite() {
        return Err(Error::format(line, format!("non-finite value `{tok}`")));
    }
    Ok(v)
}

fn parse_usize(tok: &str, line: usize) -> Result<usize> {
    tok.parse()
        .map_err(|_| Error::format(line, format!("expected a count, found `{tok}`")))
}

/// Whitespace-separated rows of three or more numbers; `#` starts a comment.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut width = None;
    for (no, raw) in text.lines().enumerate() {
        let line = no + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let row = content
            .split_whitespace()
            .map(|t| parse_f64(t, line))
            .collect::<Result<Vec<_>>>()?;
        if row.len() < 3 {
            return Err(Error::format(line, format!("expected at least 3 values, found {}", row.len())));
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::format(line, format!("expected {w} values, found {}", row.len())))
            }
            _ => {}
        }
        points.extend(row);
    }
    let width = width.ok_or_else(|| Error::InvalidInput("xyz file holds no points".into()))?;
    PointCloud::new(points, width)
}

#[derive(Debug)]
enum PlyProperty {
    Scalar(String),
    List,
}

#[derive(Debug)]
struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<PlyProperty>,
}

const PLY_SCALAR_TYPES: &[&str] = &[
    "char", "uchar", "short", "ushort", "int", "uint", "float", "double", "int8", "uint8",
    "int16", "uint16", "int32", "uint32", "float32", "float64",
];

/// ASCII PLY: returns the vertex xyz and the optional `variation` property.
pub fn parse_ply(text: &str) -> Result<(PointCloud, Option<Vec<f64>>)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(Error::format(1, "missing `ply` magic")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut saw_format = false;
    let mut header_done = false;
    for (line, content) in lines.by_ref() {
        let toks: Vec<&str> = content.split_whitespace().collect();
        match toks.as_slice() {
            [] => continue,
            ["comment", ..] | ["obj_info", ..] => continue,
            ["format", "ascii", _] => saw_format = true,
            ["format", kind, ..] => {
                return Err(Error::format(line, format!("unsupported PLY format `{kind}`")))
            }
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: parse_usize(count, line)?,
                properties: Vec::new(),
            }),
            ["property", "list", count_ty, item_ty, _name] => {
                if !PLY_SCALAR_TYPES.contains(count_ty) || !PLY_SCALAR_TYPES.contains(item_ty) {
                    return Err(Error::format(line, "unknown PLY list property type"));
                }
                elements
                    .last_mut()
                    .ok_or_else(|| Error::format(line, "property before any element"))?
                    .properties
                    .push(PlyProperty::List);
            }
            ["property", ty, name] => {
                if !PLY_SCALAR_TYPES.contains(ty) {
                    return Err(Error::format(line, format!("unknown PLY property type `{ty}`")));
                }
                elements
                    .last_mut()
                    .ok_or_else(|| Error::format(line, "property before any element"))?
                    .properties
                    .push(PlyProperty::Scalar(name.to_string()));
            }
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(Error::format(line, format!("unrecognized header line `{content}`"))),
        }
    }
    if !saw_format {
        return Err(Error::format(0, "missing `format ascii 1.0` line"));
    }
    if !header_done {
        return Err(Error::format(0, "missing `end_header`"));
    }

    let vertex_pos = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::format(0, "no vertex element"))?;
    let column = |name: &str| {
        elements[vertex_pos]
            .properties
            .iter()
            .position(|p| matches!(p, PlyProperty::Scalar(n) if n == name))
    };
    let (cx, cy, cz) = match (column("x"), column("y"), column("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(Error::format(0, "vertex element lacks x, y or z")),
    };
    let cvar = column("variation");

    let mut body = lines.filter(|(_, l)| !l.is_empty());
    let mut points = Vec::new();
    let mut scalars = cvar.map(|_| Vec::new());
    for (e, element) in elements.iter().enumerate() {
        for _ in 0..element.count {
            let (line, content) = body
                .next()
                .ok_or_else(|| Error::format(0, format!("file ends inside element `{}`", element.name)))?;
            let mut toks = content.split_whitespace();
            let mut values = Vec::with_capacity(element.properties.len());
            for prop in &element.properties {
                match prop {
                    PlyProperty::Scalar(_) => {
                        let tok = toks
                            .next()
                            .ok_or_else(|| Error::format(line, "row has too few values"))?;
                        values.push(parse_f64(tok, line)?);
                    }
                    PlyProperty::List => {
                        let tok = toks
                            .next()
                            .ok_or_else(|| Error::format(line, "row has too few values"))?;
                        let n = parse_usize(tok, line)?;
                        for _ in 0..n {
                            let tok = toks
                                .next()
                                .ok_or_else(|| Error::format(line, "list shorter than its count"))?;
                            parse_f64(tok, line)?;
                        }
                        values.push(f64::NAN);
                    }
                }
            }
            if toks.next().is_some() {
                return Err(Error::format(line, "row has too many values"));
            }
            if e == vertex_pos {
                points.extend_from_slice(&[values[cx], values[cy], values[cz]]);
                if let (Some(c), Some(s)) = (cvar, scalars.as_mut()) {
                    s.push(values[c]);
                }
            }
        }
    }
    if points.is_empty() {
        return Err(Error::InvalidInput("PLY file holds no vertices".into()));
    }
    Ok((PointCloud::new(points, 3)?, scalars))
}

/// Renders `cloud` (xyz only) as ASCII PLY, with an optional per-point
/// `variation` property.
pub fn write_ply(cloud: &PointCloud, scalars: Option<&[f64]>) -> Result<String> {
    if let Some(s) = scalars {
        if s.len() != cloud.n_points() {
            return Err(Error::InvalidInput(format!(
                "{} scalars for {} points",
                s.len(),
                cloud.n_points()
            )));
        }
    }
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.n_points());
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    if scalars.is_some() {
        out.push_str("property float variation\n");
    }
    out.push_str("end_header\n");
    for i in 0..cloud.n_points() {
        let [x, y, z] = cloud.xyz(i);
        let _ = write!(out, "{x} {y} {z}");
        if let Some(s) = scalars {
            let _ = write!(out, " {}", s[i]);
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_ply(cloud: &PointCloud, scalars: Option<&[f64]>, path: &Path) -> Result<()> {
    let text = write_ply(cloud, scalars)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Triangle mesh read from an OFF file.
#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
}

/// OFF: `OFF`, then `n_vertices n_faces n_edges`, vertex rows, and
/// triangular face rows `3 a b c`. `#` starts a comment.
pub fn parse_off(text: &str) -> Result<TriMesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (line, first) = lines.next().ok_or_else(|| Error::format(0, "empty OFF file"))?;
    let rest = first
        .strip_prefix("OFF")
        .ok_or_else(|| Error::format(line, "missing `OFF` header"))?
        .trim();
    // Some exporters glue the counts onto the header line.
    let (line, counts) = if rest.is_empty() {
        lines
            .next()
            .ok_or_else(|| Error::format(line, "missing element counts"))?
    } else {
        (line, rest)
    };
    let counts = counts
        .split_whitespace()
        .map(|t| parse_usize(t, line))
        .collect::<Result<Vec<_>>>()?;
    let (nv, nf) = match counts.as_slice() {
        [nv, nf] | [nv, nf, _] => (*nv, *nf),
        _ => return Err(Error::format(line, "expected `n_vertices n_faces n_edges`")),
    };

    let mut vertices = Vec::new();
    for _ in 0..nv {
        let (line, content) = lines
            .next()
            .ok_or_else(|| Error::format(0, "file ends inside the vertex list"))?;
        let v = content
            .split_whitespace()
            .map(|t| parse_f64(t, line))
            .collect::<Result<Vec<_>>>()?;
        if v.len() < 3 {
            return Err(Error::format(line, "vertex needs 3 coordinates"));
        }
        vertices.push([v[0], v[1], v[2]]);
    }
    let mut faces = Vec::new();
    for _ in 0..nf {
        let (line, content) = lines
            .next()
            .ok_or_else(|| Error::format(0, "file ends inside the face list"))?;
        let idx = content
            .split_whitespace()
            .map(|t| parse_usize(t, line))
            .collect::<Result<Vec<_>>>()?;
        match idx.as_slice() {
            [3, a, b, c, ..] => {
                if let Some(bad) = [a, b, c].into_iter().find(|&&i| i >= nv) {
                    return Err(Error::format(line, format!("vertex index {bad} out of range")));
                }
                faces.push([*a, *b, *c]);
            }
            [n, ..] => {
                return Err(Error::format(line, format!("only triangular faces are supported, found {n}-gon")))
            }
            [] => unreachable!("blank lines are filtered"),
        }
    }
    Ok(TriMesh { vertices, faces })
}

impl TriMesh {
    fn area(&self, f: &[usize; 3]) -> f64 {
        let [a, b, c] = f.map(|i| self.vertices[i]);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let n = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
    }

    /// Draws `n` points uniformly by area over the mesh surface.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Result<PointCloud> {
        if n == 0 {
            return Err(Error::InvalidInput("requested zero surface samples".into()));
        }
        let mut cumulative = Vec::with_capacity(self.faces.len());
        let mut total = 0.0;
        for f in &self.faces {
            total += self.area(f);
            cumulative.push(total);
        }
        if !(total > 0.0) {
            return Err(Error::InvalidInput("mesh has zero surface area".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::with_capacity(3 * n);
        for _ in 0..n {
            let target = rng.random::<f64>() * total;
            let f = cumulative
                .partition_point(|&c| c <= target)
                .min(self.faces.len() - 1);
            let [a, b, c] = self.faces[f].map(|i| self.vertices[i]);
            let s = rng.random::<f64>().sqrt();
            let t = rng.random::<f64>();
            let (wa, wb, wc) = (1.0 - s, s * (1.0 - t), s * t);
            for k in 0..3 {
                points.push(wa * a[k] + wb * b[k] + wc * c[k]);
            }
        }
        PointCloud::new(points, 3)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const UNIT_CUBE_OFF: &str = "OFF
8 12 0
-0.5 -0.5 -0.5
0.5 -0.5 -0.5
0.5 0.5 -0.5
-0.5 0.5 -0.5
-0.5 -0.5 0.5
0.5 -0.5 0.5
0.5 0.5 0.5
-0.5 0.5 0.5
3 0 2 1
3 0 3 2
3 4 5 6
3 4 6 7
3 0 1 5
3 0 5 4
3 2 3 7
3 2 7 6
3 1 2 6
3 1 6 5
3 0 4 7
3 0 7 3
";

    #[test]
    fn xyz_single_point() {
        let c = parse_xyz("0 0 0\n").unwrap();
        assert_eq!((c.n_points(), c.n_channels()), (1, 3));
    }

    #[test]
    fn xyz_errors_name_the_line() {
        match parse_xyz("0 0 0\n1 2\n") {
            Err(Error::Format { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse_xyz("0 0 0\n1 x 2\n") {
            Err(Error::Format { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_xyz("# only a comment\n"), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn xyz_extra_channels() {
        let c = parse_xyz("0 0 0 1 # with a normal-ish column\n1 1 1 0\n").unwrap();
        assert_eq!((c.n_points(), c.n_channels()), (2, 4));
    }

    #[test]
    fn ply_single_vertex_with_scalar() {
        let c = PointCloud::from_xyz(&[[0.25, -1.0, 3.5]]).unwrap();
        let text = write_ply(&c, Some(&[0.5])).unwrap();
        assert!(text.contains("property float variation"));
        let body: Vec<&str> = text.split("end_header\n").nth(1).unwrap().lines().collect();
        assert_eq!(body.len(), 1);
        let (back, s) = parse_ply(&text).unwrap();
        assert_eq!(back.xyz(0), [0.25, -1.0, 3.5]);
        assert_eq!(s.unwrap(), vec![0.5]);
    }

    #[test]
    fn ply_skips_faces_and_extra_properties() {
        let text = "ply
format ascii 1.0
comment made by hand
element vertex 3
property float x
property float y
property float z
property uchar red
element face 1
property list uchar int vertex_indices
end_header
0 0 0 255
1 0 0 0
0 1 0 7
3 0 1 2
";
        let (c, s) = parse_ply(text).unwrap();
        assert_eq!(c.n_points(), 3);
        assert!(s.is_none());
        assert_eq!(c.xyz(2), [0.0, 1.0, 0.0]);
    }

    #[test]
    fn ply_rejects_binary_and_truncation() {
        let bin = "ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nend_header\n";
        assert!(matches!(parse_ply(bin), Err(Error::Format { line: 2, .. })));
        let short = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n";
        assert!(matches!(parse_ply(short), Err(Error::Format { .. })));
    }

    #[test]
    fn off_cube_samples_lie_on_the_surface() {
        let mesh = parse_off(UNIT_CUBE_OFF).unwrap();
        assert_eq!((mesh.vertices.len(), mesh.faces.len()), (8, 12));
        let cloud = mesh.sample_surface(1024, 3).unwrap();
        assert_eq!(cloud.n_points(), 1024);
        // Each face of the cube is axis-aligned: a sample on face f must have
        // the face's constant coordinate at +-0.5 and the others inside.
        for i in 0..cloud.n_points() {
            let p = cloud.xyz(i);
            let on_face = (0..3).any(|a| (p[a].abs() - 0.5).abs() < 1e-6);
            let inside = p.iter().all(|v| v.abs() <= 0.5 + 1e-6);
            assert!(on_face && inside, "{p:?} is off the cube surface");
        }
    }

    #[test]
    fn off_sampling_covers_every_face() {
        let mesh = parse_off(UNIT_CUBE_OFF).unwrap();
        let cloud = mesh.sample_surface(1024, 9).unwrap();
        let mut per_face = [0usize; 6];
        for i in 0..cloud.n_points() {
            let p = cloud.xyz(i);
            for a in 0..3 {
                if (p[a] - 0.5).abs() < 1e-9 {
                    per_face[2 * a] += 1;
                } else if (p[a] + 0.5).abs() < 1e-9 {
                    per_face[2 * a + 1] += 1;
                }
            }
        }
        // Equal areas; expect ~171 each.
        assert!(per_face.iter().all(|&n| (110..240).contains(&n)), "{per_face:?}");
    }

    #[test]
    fn off_errors() {
        assert!(matches!(parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n4 0 1 2 0\n"), Err(Error::Format { line: 6, .. })));
        assert!(matches!(parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n"), Err(Error::Format { line: 6, .. })));
        assert!(matches!(parse_off("PLY\n"), Err(Error::Format { line: 1, .. })));
        let glued = parse_off("OFF3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n").unwrap();
        assert_eq!(glued.faces.len(), 1);
        let flat = parse_off("OFF\n3 1 0\n0 0 0\n0 0 0\n0 0 0\n3 0 1 2\n").unwrap();
        assert!(matches!(flat.sample_surface(4, 0), Err(Error::InvalidInput(_))));
    }
}
