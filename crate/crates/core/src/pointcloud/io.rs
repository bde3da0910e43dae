//! Text `.xyz` / `.normals` files and ASCII or binary little-endian PLY.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{PointCloud, Vec3};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    Ply,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) => ext.parse(),
            None => Err(Error::InvalidInput(format!(
                "cannot infer cloud format of {}",
                path.display()
            ))),
        }
    }
}

impl FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xyz" | "txt" | "pts" => Ok(CloudFormat::Xyz),
            "ply" => Ok(CloudFormat::Ply),
            other => Err(Error::InvalidInput(format!("unknown cloud format '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PlyEncoding {
    #[default]
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Debug, Default)]
pub struct PlyWriteOptions<'a> {
    pub encoding: PlyEncoding,
    pub normals: Option<&'a [Vec3]>,
    pub colors: Option<&'a [[u8; 3]]>,
    pub comments: Vec<String>,
}

/// Loads a cloud. For `.xyz` input without normal columns, a row-aligned
/// `.normals` file next to it (same stem) is picked up as ground truth.
pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    match format {
        CloudFormat::Xyz => load_xyz(path),
        CloudFormat::Ply => load_ply(path),
    }
}

/// Writes positions; normals go to a `.normals` sidecar for `.xyz` and into
/// the vertex properties for PLY.
pub fn save_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    match format {
        CloudFormat::Xyz => {
            write_rows(path, cloud.points())?;
            if let Some(normals) = cloud.gt_normals() {
                write_rows(&sidecar_path(path), normals)?;
            }
            Ok(())
        }
        CloudFormat::Ply => write_ply(
            path,
            cloud.points(),
            &PlyWriteOptions {
                normals: cloud.gt_normals(),
                ..Default::default()
            },
        ),
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("normals")
}

pub fn load_normals(path: &Path) -> Result<Vec<Vec3>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = parse_rows(&text, &[3])?;
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let n = Vec3::new(r[0], r[1], r[2]);
            let len = n.norm();
            if len < 1e-3 {
                return Err(Error::InvalidInput(format!(
                    "{}: normal on row {} has length {len}",
                    path.display(),
                    i + 1
                )));
            }
            Ok(n / len)
        })
        .collect()
}

pub fn save_normals(path: &Path, normals: &[Vec3]) -> Result<()> {
    write_rows(path, normals)
}

fn write_rows(path: &Path, rows: &[Vec3]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in rows {
        writeln!(out, "{} {} {}", r.x, r.y, r.z).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn load_xyz(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = parse_rows(&text, &[3, 6])?;
    if rows.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let points: Vec<Vec3> = rows.iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect();
    let normals = if rows.iter().all(|r| r.len() == 6) {
        Some(rows.iter().map(|r| Vec3::new(r[3], r[4], r[5]).normalize()).collect())
    } else if rows.iter().any(|r| r.len() == 6) {
        return Err(Error::Parse {
            line: 1 + rows.iter().position(|r| r.len() != rows[0].len()).unwrap_or(0),
            msg: "mixed 3- and 6-column rows".into(),
        });
    } else {
        let side = sidecar_path(path);
        if side.exists() {
            Some(load_normals(&side)?)
        } else {
            None
        }
    };
    PointCloud::with_normals(points, normals)
}

/// Parses whitespace-separated numeric rows. Blank lines and `#` comments are
/// skipped; line numbers in errors are 1-based.
fn parse_rows(text: &str, widths: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        line: i + 1,
                        msg: format!("'{tok}' is not a finite number"),
                    })
            })
            .collect::<Result<_>>()?;
        if !widths.contains(&row.len()) {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected {widths:?} columns, found {}", row.len()),
            });
        }
        rows.push(row);
    }
    Ok(rows)
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
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => b[0] as i8 as f64,
            ScalarType::U8 => b[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<(String, ScalarType)>,
    has_list: bool,
}

fn load_ply(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header_end = find_header_end(&bytes).ok_or(Error::Parse {
        line: 1,
        msg: "missing end_header".into(),
    })?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| Error::Parse {
        line: 1,
        msg: "header is not valid text".into(),
    })?;
    let mut lines = header.lines().enumerate();
    if lines.next().map(|(_, l)| l.trim()) != Some("ply") {
        return Err(Error::Parse {
            line: 1,
            msg: "not a PLY file".into(),
        });
    }
    let mut encoding = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut header_lines = 1;
    for (i, line) in lines {
        header_lines = i + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        let perr = |msg: &str| Error::Parse {
            line: i + 1,
            msg: msg.to_string(),
        };
        match toks.first().copied() {
            Some("format") => {
                encoding = Some(match toks.get(1).copied() {
                    Some("ascii") => PlyEncoding::Ascii,
                    Some("binary_little_endian") => PlyEncoding::BinaryLittleEndian,
                    _ => return Err(perr("unsupported PLY format")),
                })
            }
            Some("element") => {
                let name = toks.get(1).ok_or_else(|| perr("element without name"))?;
                let count = toks
                    .get(2)
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| perr("bad element count"))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                    has_list: false,
                });
            }
            Some("property") => {
                let el = elements.last_mut().ok_or_else(|| perr("property before element"))?;
                if toks.get(1) == Some(&"list") {
                    el.has_list = true;
                } else {
                    let ty = toks
                        .get(1)
                        .and_then(|t| ScalarType::parse(t))
                        .ok_or_else(|| perr("unknown property type"))?;
                    let name = toks.get(2).ok_or_else(|| perr("property without name"))?;
                    el.properties.push((name.to_string(), ty));
                }
            }
            Some("comment") | Some("obj_info") | Some("end_header") | None => {}
            Some(_) => return Err(perr("unexpected header line")),
        }
    }
    let encoding = encoding.ok_or(Error::Parse {
        line: 2,
        msg: "missing format line".into(),
    })?;
    let vi = elements.iter().position(|e| e.name == "vertex").ok_or(Error::Parse {
        line: header_lines,
        msg: "no vertex element".into(),
    })?;
    if elements[..=vi].iter().any(|e| e.has_list) {
        return Err(Error::Parse {
            line: header_lines,
            msg: "list properties before or inside the vertex element are not supported".into(),
        });
    }
    let vertex = &elements[vi];
    let col = |name: &str| vertex.properties.iter().position(|(n, _)| n == name);
    let (ix, iy, iz) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => {
            return Err(Error::Parse {
                line: header_lines,
                msg: "vertex element lacks x/y/z".into(),
            })
        }
    };
    let normal_cols = match (col("nx"), col("ny"), col("nz")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };

    let body = &bytes[header_end..];
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(vertex.count);
    match encoding {
        PlyEncoding::Ascii => {
            let text = std::str::from_utf8(body).map_err(|_| Error::Parse {
                line: header_lines + 1,
                msg: "body is not valid text".into(),
            })?;
            let skip: usize = elements[..vi].iter().map(|e| e.count).sum();
            let mut rows = text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .skip(skip);
            for _ in 0..vertex.count {
                let (li, line) = rows.next().ok_or(Error::Parse {
                    line: header_lines + 1,
                    msg: "fewer vertices than declared".into(),
                })?;
                let lineno = header_lines + 1 + li;
                let row: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| {
                        t.parse::<f64>().map_err(|_| Error::Parse {
                            line: lineno,
                            msg: format!("'{t}' is not a number"),
                        })
                    })
                    .collect::<Result<_>>()?;
                if row.len() < vertex.properties.len() {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: "too few vertex properties".into(),
                    });
                }
                values.push(row);
            }
        }
        PlyEncoding::BinaryLittleEndian => {
            let skip: usize = elements[..vi]
                .iter()
                .map(|e| e.count * e.properties.iter().map(|(_, t)| t.size()).sum::<usize>())
                .sum();
            let stride: usize = vertex.properties.iter().map(|(_, t)| t.size()).sum();
            let need = skip + stride * vertex.count;
            if body.len() < need {
                return Err(Error::Parse {
                    line: header_lines + 1,
                    msg: "binary body shorter than declared".into(),
                });
            }
            for v in 0..vertex.count {
                let mut off = skip + v * stride;
                let mut row = Vec::with_capacity(vertex.properties.len());
                for (_, ty) in &vertex.properties {
                    row.push(ty.read_le(&body[off..off + ty.size()]));
                    off += ty.size();
                }
                values.push(row);
            }
        }
    }
    if values.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let points = values.iter().map(|r| Vec3::new(r[ix], r[iy], r[iz])).collect();
    let normals = normal_cols.map(|(a, b, c)| values.iter().map(|r| Vec3::new(r[a], r[b], r[c]).normalize()).collect());
    PointCloud::with_normals(points, normals)
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let marker = b"end_header";
    let pos = bytes.windows(marker.len()).position(|w| w == marker)?;
    let mut end = pos + marker.len();
    if bytes.get(end) == Some(&b'\r') {
        end += 1;
    }
    if bytes.get(end) == Some(&b'\n') {
        end += 1;
    }
    Some(end)
}

pub fn write_ply(path: &Path, points: &[Vec3], opts: &PlyWriteOptions<'_>) -> Result<()> {
    if opts.normals.is_some_and(|n| n.len() != points.len()) || opts.colors.is_some_and(|c| c.len() != points.len()) {
        return Err(Error::ShapeMismatch(
            "per-vertex attributes do not match point count".into(),
        ));
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let ioerr = |e| Error::io(path, e);
    let format = match opts.encoding {
        PlyEncoding::Ascii => "ascii",
        PlyEncoding::BinaryLittleEndian => "binary_little_endian",
    };
    writeln!(out, "ply\nformat {format} 1.0").map_err(ioerr)?;
    for c in &opts.comments {
        writeln!(out, "comment {c}").map_err(ioerr)?;
    }
    writeln!(out, "element vertex {}", points.len()).map_err(ioerr)?;
    writeln!(out, "property double x\nproperty double y\nproperty double z").map_err(ioerr)?;
    if opts.normals.is_some() {
        writeln!(out, "property double nx\nproperty double ny\nproperty double nz").map_err(ioerr)?;
    }
    if opts.colors.is_some() {
        writeln!(out, "property uchar red\nproperty uchar green\nproperty uchar blue").map_err(ioerr)?;
    }
    writeln!(out, "end_header").map_err(ioerr)?;
    for (i, p) in points.iter().enumerate() {
        match opts.encoding {
            PlyEncoding::Ascii => {
                write!(out, "{} {} {}", p.x, p.y, p.z).map_err(ioerr)?;
                if let Some(n) = opts.normals {
                    write!(out, " {} {} {}", n[i].x, n[i].y, n[i].z).map_err(ioerr)?;
                }
                if let Some(c) = opts.colors {
                    write!(out, " {} {} {}", c[i][0], c[i][1], c[i][2]).map_err(ioerr)?;
                }
                writeln!(out).map_err(ioerr)?;
            }
            PlyEncoding::BinaryLittleEndian => {
                for v in p.iter() {
                    out.write_all(&v.to_le_bytes()).map_err(ioerr)?;
                }
                if let Some(n) = opts.normals {
                    for v in n[i].iter() {
                        out.write_all(&v.to_le_bytes()).map_err(ioerr)?;
                    }
                }
                if let Some(c) = opts.colors {
                    out.write_all(&c[i]).map_err(ioerr)?;
                }
            }
        }
    }
    out.flush().map_err(ioerr)
}
