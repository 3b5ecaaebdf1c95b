//! Colored point clouds and their PLY encoding.
//!
//! Written headers are exactly
//!
//! ```text
//! ply
//! format ascii 1.0            (or: format binary_little_endian 1.0)
//! element vertex <count>
//! property float x
//! property float y
//! property float z
//! property uchar red
//! property uchar green
//! property uchar blue
//! end_header
//! ```
//!
//! each line ending in `\n`. ASCII bodies hold one `x y z r g b` line per
//! vertex; binary bodies hold 15 bytes per vertex (three `f32`, three `u8`).
//! The reader accepts either encoding and ignores extra vertex properties
//! and elements following the vertices.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{MvsError, Result};

/// Where a fused point came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Provenance {
    pub view: usize,
    pub x: usize,
    pub y: usize,
    /// Smallest consistent-view requirement that accepted the pixel.
    pub mu: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub colors: Vec<[u8; 3]>,
    /// Empty, or one entry per point.
    pub provenance: Vec<Provenance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

impl PointCloud {
    pub fn from_points(points: Vec<[f64; 3]>) -> Self {
        let colors = vec![[255, 255, 255]; points.len()];
        Self {
            points,
            colors,
            provenance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn write_ply<W: Write>(&self, mut w: W, encoding: PlyEncoding) -> std::io::Result<()> {
        let format = match encoding {
            PlyEncoding::Ascii => "ascii",
            PlyEncoding::BinaryLittleEndian => "binary_little_endian",
        };
        write!(
            w,
            "ply\nformat {format} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
            self.points.len()
        )?;
        match encoding {
            PlyEncoding::Ascii => {
                for (p, c) in self.points.iter().zip(&self.colors) {
                    writeln!(
                        w,
                        "{} {} {} {} {} {}",
                        p[0] as f32, p[1] as f32, p[2] as f32, c[0], c[1], c[2]
                    )?;
                }
            }
            PlyEncoding::BinaryLittleEndian => {
                let mut buf = Vec::with_capacity(15 * self.points.len());
                for (p, c) in self.points.iter().zip(&self.colors) {
                    for v in p {
                        buf.extend_from_slice(&(*v as f32).to_le_bytes());
                    }
                    buf.extend_from_slice(c);
                }
                w.write_all(&buf)?;
            }
        }
        w.flush()
    }

    pub fn save_ply(&self, path: impl AsRef<Path>, encoding: PlyEncoding) -> Result<()> {
        let f = std::fs::File::create(path.as_ref()).map_err(|e| MvsError::io(&path, e))?;
        self.write_ply(std::io::BufWriter::new(f), encoding)
            .map_err(|e| MvsError::io(&path, e))
    }

    pub fn read_ply<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let header = read_header(&mut r)?;
        let mut cloud = PointCloud {
            points: Vec::with_capacity(header.count),
            colors: Vec::with_capacity(header.count),
            provenance: Vec::new(),
        };
        match header.encoding {
            PlyEncoding::Ascii => {
                let mut line = String::new();
                while cloud.points.len() < header.count {
                    line.clear();
                    if r.read_line(&mut line).map_err(|e| MvsError::Format(e.to_string()))? == 0 {
                        return Err(MvsError::Format("PLY ended before all vertices".into()));
                    }
                    let fields: Vec<f64> = line
                        .split_whitespace()
                        .zip(header.props.iter().chain(std::iter::repeat(&header.props[0])))
                        .map(|(t, p)| match p.kind {
                            Kind::F32 => t.parse::<f32>().map(f64::from),
                            _ => t.parse::<f64>(),
                        })
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| MvsError::Format(format!("bad PLY vertex: {e}")))?;
                    if fields.len() != header.props.len() {
                        return Err(MvsError::Format(format!(
                            "vertex has {} values, header declares {}",
                            fields.len(),
                            header.props.len()
                        )));
                    }
                    push_vertex(&mut cloud, &header, |i| fields[i]);
                }
            }
            PlyEncoding::BinaryLittleEndian => {
                let stride: usize = header.props.iter().map(|p| p.kind.size()).sum();
                let offsets: Vec<usize> = header
                    .props
                    .iter()
                    .scan(0, |o, p| {
                        let start = *o;
                        *o += p.kind.size();
                        Some(start)
                    })
                    .collect();
                let mut buf = vec![0u8; stride];
                for _ in 0..header.count {
                    r.read_exact(&mut buf)
                        .map_err(|_| MvsError::Format("PLY ended before all vertices".into()))?;
                    push_vertex(&mut cloud, &header, |i| header.props[i].kind.decode(&buf[offsets[i]..]));
                }
            }
        }
        Ok(cloud)
    }

    pub fn load_ply(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path.as_ref()).map_err(|e| MvsError::io(&path, e))?;
        Self::read_ply(f).map_err(|e| match e {
            MvsError::Format(m) => MvsError::Format(format!("{}: {m}", path.as_ref().display())),
            other => other,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Kind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Kind::I8,
            "uchar" | "uint8" => Kind::U8,
            "short" | "int16" => Kind::I16,
            "ushort" | "uint16" => Kind::U16,
            "int" | "int32" => Kind::I32,
            "uint" | "uint32" => Kind::U32,
            "float" | "float32" => Kind::F32,
            "double" | "float64" => Kind::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Kind::I8 | Kind::U8 => 1,
            Kind::I16 | Kind::U16 => 2,
            Kind::I32 | Kind::U32 | Kind::F32 => 4,
            Kind::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Kind::I8 => b[0] as i8 as f64,
            Kind::U8 => b[0] as f64,
            Kind::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Kind::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Kind::I32 => i32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Kind::U32 => u32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Kind::F32 => f32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Kind::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

#[derive(Debug)]
struct Prop {
    name: String,
    kind: Kind,
}

#[derive(Debug)]
struct Header {
    encoding: PlyEncoding,
    count: usize,
    props: Vec<Prop>,
    xyz: [usize; 3],
    rgb: Option<[usize; 3]>,
}

fn read_header<R: BufRead>(r: &mut R) -> Result<Header> {
    let bad = |m: &str| MvsError::Format(format!("PLY header: {m}"));
    let mut line = String::new();
    let mut next = |r: &mut R| -> Result<String> {
        line.clear();
        let n = r.read_line(&mut line).map_err(|e| MvsError::Format(e.to_string()))?;
        if n == 0 {
            return Err(bad("unexpected end of file"));
        }
        Ok(line.trim_end().to_string())
    };
    if next(r)? != "ply" {
        return Err(bad("missing 'ply' magic"));
    }
    let mut encoding = None;
    let mut count = None;
    let mut props = Vec::new();
    let mut in_vertex = false;
    loop {
        let l = next(r)?;
        let tok: Vec<&str> = l.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["format", "ascii", _] => encoding = Some(PlyEncoding::Ascii),
            ["format", "binary_little_endian", _] => encoding = Some(PlyEncoding::BinaryLittleEndian),
            ["format", f, _] => return Err(bad(&format!("unsupported format {f}"))),
            ["element", name, n] => {
                if count.is_none() && *name != "vertex" {
                    return Err(bad("vertex element must come first"));
                }
                in_vertex = *name == "vertex" && count.is_none();
                if in_vertex {
                    count = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?);
                }
            }
            ["property", "list", ..] if in_vertex => return Err(bad("list properties on vertices")),
            ["property", kind, name] if in_vertex => props.push(Prop {
                name: name.to_string(),
                kind: Kind::parse(kind).ok_or_else(|| bad(&format!("unknown type {kind}")))?,
            }),
            ["property", ..] => {}
            _ => return Err(bad(&format!("unexpected line '{l}'"))),
        }
    }
    let find = |n: &str| props.iter().position(|p| p.name == n);
    let xyz = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => [x, y, z],
        _ => return Err(bad("vertex needs x, y, z")),
    };
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    Ok(Header {
        encoding: encoding.ok_or_else(|| bad("missing format line"))?,
        count: count.ok_or_else(|| bad("missing vertex element"))?,
        props,
        xyz,
        rgb,
    })
}

fn push_vertex(cloud: &mut PointCloud, h: &Header, get: impl Fn(usize) -> f64) {
    cloud.points.push([get(h.xyz[0]), get(h.xyz[1]), get(h.xyz[2])]);
    cloud.colors.push(match h.rgb {
        Some([r, g, b]) => [get(r) as u8, get(g) as u8, get(b) as u8],
        None => [255, 255, 255],
    });
}
