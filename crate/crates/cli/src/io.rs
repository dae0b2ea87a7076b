//! Point cloud and mesh files: PLY (ASCII and binary, read), binary
//! little-endian float32 PLY (write), Wavefront OBJ (read) and XYZ text.

use std::fmt::Write as _;
use std::path::Path;

use vpcnet::geometry::{Point3, PointCloud, TriangleMesh};

use crate::error::{CliError, ParseError, Result};

type ParseResult<T> = std::result::Result<T, ParseError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLe,
    BinaryBe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Scalar> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }
}

#[derive(Clone, Debug)]
enum Property {
    Scalar(Scalar, String),
    List(Scalar, Scalar, String),
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

/// Vertices and polygons read from a PLY file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlyData {
    pub vertices: Vec<Point3>,
    pub faces: Vec<Vec<usize>>,
}

/// Splits off the next line, returning it without the terminator and the
/// offset just past it.
fn next_line(buf: &[u8], start: usize) -> Option<(&[u8], usize)> {
    if start >= buf.len() {
        return None;
    }
    let end = buf[start..].iter().position(|&b| b == b'\n').map_or(buf.len(), |p| start + p);
    let mut line = &buf[start..end];
    if line.last() == Some(&b'\r') {
        line = &line[..line.len() - 1];
    }
    Some((line, (end + 1).min(buf.len())))
}

fn parse_header(buf: &[u8]) -> ParseResult<(Format, Vec<Element>, usize)> {
    let (magic, mut pos) = next_line(buf, 0).ok_or_else(|| ParseError::new(0, "empty file"))?;
    if magic != b"ply" {
        return Err(ParseError::new(0, "missing `ply` magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let at = pos;
        let (line, next) = next_line(buf, pos).ok_or_else(|| ParseError::new(at, "header ends without end_header"))?;
        pos = next;
        let line = std::str::from_utf8(line).map_err(|_| ParseError::new(at, "header is not UTF-8"))?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", f, _version] => {
                format = Some(match *f {
                    "ascii" => Format::Ascii,
                    "binary_little_endian" => Format::BinaryLe,
                    "binary_big_endian" => Format::BinaryBe,
                    other => return Err(ParseError::new(at, format!("unknown format `{other}`"))),
                })
            }
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| ParseError::new(at, format!("bad element count `{count}`")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            ["property", "list", ct, it, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| ParseError::new(at, "property before any element"))?;
                let ct = Scalar::parse(ct).ok_or_else(|| ParseError::new(at, format!("unknown type `{ct}`")))?;
                let it = Scalar::parse(it).ok_or_else(|| ParseError::new(at, format!("unknown type `{it}`")))?;
                el.props.push(Property::List(ct, it, name.to_string()));
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| ParseError::new(at, "property before any element"))?;
                let ty = Scalar::parse(ty).ok_or_else(|| ParseError::new(at, format!("unknown type `{ty}`")))?;
                el.props.push(Property::Scalar(ty, name.to_string()));
            }
            ["end_header"] => break,
            _ => return Err(ParseError::new(at, format!("unexpected header line `{line}`"))),
        }
    }
    let format = format.ok_or_else(|| ParseError::new(pos, "header has no format line"))?;
    Ok((format, elements, pos))
}

/// Sequential reader over the body in any of the three encodings.
struct Body<'a> {
    buf: &'a [u8],
    pos: usize,
    format: Format,
}

impl Body<'_> {
    fn read(&mut self, ty: Scalar) -> ParseResult<f64> {
        match self.format {
            Format::Ascii => self.read_ascii(ty),
            Format::BinaryLe | Format::BinaryBe => self.read_binary(ty),
        }
    }

    fn read_ascii(&mut self, ty: Scalar) -> ParseResult<f64> {
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.buf.len() && !self.buf[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ParseError::new(start, "unexpected end of data"));
        }
        let tok = std::str::from_utf8(&self.buf[start..self.pos]).map_err(|_| ParseError::new(start, "non-UTF-8 token"))?;
        let bad = || ParseError::new(start, format!("cannot parse `{tok}` as {ty:?}"));
        match ty {
            Scalar::F32 => tok.parse::<f32>().map(f64::from).map_err(|_| bad()),
            Scalar::F64 => tok.parse::<f64>().map_err(|_| bad()),
            _ => tok.parse::<i64>().map(|v| v as f64).map_err(|_| bad()),
        }
    }

    fn read_binary(&mut self, ty: Scalar) -> ParseResult<f64> {
        let n = ty.size();
        if self.pos + n > self.buf.len() {
            return Err(ParseError::new(self.pos, "unexpected end of data"));
        }
        let mut b = [0u8; 8];
        b[..n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
        if self.format == Format::BinaryBe {
            b[..n].reverse();
        }
        self.pos += n;
        Ok(match ty {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b),
        })
    }
}

fn list_len(v: f64, at: usize) -> ParseResult<usize> {
    if v < 0.0 || v.fract() != 0.0 {
        return Err(ParseError::new(at, format!("bad list length {v}")));
    }
    Ok(v as usize)
}

/// Parses a PLY file held in memory.
pub fn parse_ply(buf: &[u8]) -> ParseResult<PlyData> {
    let (format, elements, start) = parse_header(buf)?;
    let mut body = Body { buf, pos: start, format };
    let mut out = PlyData::default();
    for el in &elements {
        let find = |n: &str| {
            el.props
                .iter()
                .position(|p| matches!(p, Property::Scalar(_, name) if name == n))
        };
        let xyz = if el.name == "vertex" {
            match (find("x"), find("y"), find("z")) {
                (Some(x), Some(y), Some(z)) => Some([x, y, z]),
                _ => return Err(ParseError::new(start, "vertex element lacks x, y or z")),
            }
        } else {
            None
        };
        let face_list = (el.name == "face").then(|| {
            el.props
                .iter()
                .position(|p| matches!(p, Property::List(_, _, n) if n == "vertex_indices" || n == "vertex_index"))
        });
        for _ in 0..el.count {
            let mut vals = [0.0; 3];
            for (k, prop) in el.props.iter().enumerate() {
                match prop {
                    Property::Scalar(ty, _) => {
                        let v = body.read(*ty)?;
                        if let Some(idx) = xyz {
                            if let Some(c) = idx.iter().position(|&i| i == k) {
                                vals[c] = v;
                            }
                        }
                    }
                    Property::List(ct, it, _) => {
                        let at = body.pos;
                        let n = list_len(body.read(*ct)?, at)?;
                        let mut items = Vec::with_capacity(n);
                        for _ in 0..n {
                            let at = body.pos;
                            let v = body.read(*it)?;
                            if v < 0.0 || v.fract() != 0.0 {
                                return Err(ParseError::new(at, format!("bad vertex index {v}")));
                            }
                            items.push(v as usize);
                        }
                        if face_list == Some(Some(k)) {
                            out.faces.push(items);
                        }
                    }
                }
            }
            if xyz.is_some() {
                out.vertices.push(vals);
            }
        }
    }
    if format != Format::Ascii && body.pos != buf.len() {
        log::warn!("{} trailing bytes after PLY body", buf.len() - body.pos);
    }
    Ok(out)
}

/// Binary little-endian PLY with float32 `x y z` vertices.
pub fn write_ply(pc: &PointCloud) -> Vec<u8> {
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        pc.len()
    );
    let mut out = Vec::with_capacity(header.len() + pc.len() * 12);
    out.extend_from_slice(header.as_bytes());
    for p in &pc.points {
        for c in p {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    out
}

/// Parses whitespace- or comma-separated XYZ text. Lines may carry extra
/// columns; `#` starts a comment.
pub fn parse_xyz(buf: &[u8]) -> ParseResult<PointCloud> {
    let mut points = Vec::new();
    let mut pos = 0;
    while let Some((line, next)) = next_line(buf, pos) {
        let at = pos;
        pos = next;
        let line = std::str::from_utf8(line).map_err(|_| ParseError::new(at, "line is not UTF-8"))?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<&str> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .collect();
        if vals.len() < 3 {
            return Err(ParseError::new(at, "expected at least three coordinates"));
        }
        let mut p = [0.0; 3];
        for (c, v) in p.iter_mut().zip(&vals) {
            *c = v.parse().map_err(|_| ParseError::new(at, format!("cannot parse `{v}`")))?;
        }
        points.push(p);
    }
    Ok(PointCloud::new(points))
}

pub fn write_xyz(pc: &PointCloud) -> String {
    let mut s = String::new();
    for p in &pc.points {
        let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
    }
    s
}

/// Vertices and polygons of a Wavefront OBJ file. Texture and normal
/// references in face entries are ignored.
pub fn parse_obj(buf: &[u8]) -> ParseResult<PlyData> {
    let mut out = PlyData::default();
    let mut pos = 0;
    while let Some((line, next)) = next_line(buf, pos) {
        let at = pos;
        pos = next;
        let line = std::str::from_utf8(line).map_err(|_| ParseError::new(at, "line is not UTF-8"))?;
        let mut words = line.split_whitespace();
        match words.next() {
            Some("v") => {
                let mut p = [0.0; 3];
                for c in &mut p {
                    let w = words.next().ok_or_else(|| ParseError::new(at, "vertex needs three coordinates"))?;
                    *c = w.parse().map_err(|_| ParseError::new(at, format!("cannot parse `{w}`")))?;
                }
                out.vertices.push(p);
            }
            Some("f") => {
                let mut face = Vec::new();
                for w in words {
                    let idx = w.split('/').next().unwrap_or("");
                    let i: i64 = idx.parse().map_err(|_| ParseError::new(at, format!("bad face index `{w}`")))?;
                    let n = out.vertices.len() as i64;
                    let resolved = if i > 0 { i - 1 } else { n + i };
                    if i == 0 || resolved < 0 {
                        return Err(ParseError::new(at, format!("face index {i} out of range")));
                    }
                    face.push(resolved as usize);
                }
                if face.len() < 3 {
                    return Err(ParseError::new(at, "face needs at least three vertices"));
                }
                out.faces.push(face);
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Triangulates polygons as fans.
pub fn to_mesh(data: PlyData) -> vpcnet::error::Result<TriangleMesh> {
    let mut tris = Vec::new();
    for f in &data.faces {
        for k in 1..f.len().saturating_sub(1) {
            tris.push([f[0], f[k], f[k + 1]]);
        }
    }
    TriangleMesh::new(data.vertices, tris)
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default()
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

fn parse_err(path: &Path) -> impl FnOnce(ParseError) -> CliError + '_ {
    move |source| CliError::Parse {
        path: path.to_path_buf(),
        source,
    }
}

pub fn is_cloud_file(path: &Path) -> bool {
    matches!(extension(path).as_str(), "ply" | "xyz" | "txt")
}

pub fn is_mesh_file(path: &Path) -> bool {
    matches!(extension(path).as_str(), "ply" | "obj")
}

/// Reads a point cloud from `.ply`, `.xyz` or `.txt`.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let buf = read_bytes(path)?;
    match extension(path).as_str() {
        "ply" => Ok(PointCloud::new(parse_ply(&buf).map_err(parse_err(path))?.vertices)),
        "xyz" | "txt" => parse_xyz(&buf).map_err(parse_err(path)),
        other => Err(CliError::Config(format!("{}: unsupported cloud format `{other}`", path.display()))),
    }
}

/// Reads a triangle mesh from `.obj` or `.ply`.
pub fn read_mesh(path: &Path) -> Result<TriangleMesh> {
    let buf = read_bytes(path)?;
    let data = match extension(path).as_str() {
        "ply" => parse_ply(&buf).map_err(parse_err(path))?,
        "obj" => parse_obj(&buf).map_err(parse_err(path))?,
        other => return Err(CliError::Config(format!("{}: unsupported mesh format `{other}`", path.display()))),
    };
    Ok(to_mesh(data)?)
}

/// Writes `.xyz`/`.txt` as text and anything else as binary PLY.
pub fn write_cloud(path: &Path, pc: &PointCloud) -> Result<()> {
    let bytes = match extension(path).as_str() {
        "xyz" | "txt" => write_xyz(pc).into_bytes(),
        _ => write_ply(pc),
    };
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}
