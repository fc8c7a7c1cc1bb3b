//! Triangle meshes and point clouds on disk: ASCII OBJ and binary
//! little-endian PLY.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use sahmr_core::Vec3;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Vertices print with the shortest representation that parses back to the
/// same `f64`.
pub fn write_obj(path: &Path, mesh: &Mesh) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v.x, v.y, v.z).map_err(io)?;
    }
    for f in &mesh.faces {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// `v` and `f` records only; polygons are fan-triangulated, texture and
/// normal indices are dropped and negative indices count from the end.
pub fn read_obj(path: &Path) -> Result<Mesh> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut mesh = Mesh::default();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let bad = |what: &str| Error::format(path, format!("line {}: {what}", lineno + 1));
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let c: Vec<f64> = tok
                    .take(3)
                    .map(|t| t.parse().map_err(|_| bad("bad coordinate")))
                    .collect::<Result<_>>()?;
                if c.len() != 3 {
                    return Err(bad("vertex needs three coordinates"));
                }
                mesh.vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let n = mesh.vertices.len() as i64;
                let idx: Vec<u32> = tok
                    .map(|t| {
                        let i: i64 = t.split('/').next().unwrap_or("").parse().map_err(|_| bad("bad face index"))?;
                        let i = if i < 0 { n + i } else { i - 1 };
                        if i < 0 || i >= n {
                            return Err(bad("face index out of range"));
                        }
                        Ok(i as u32)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(bad("face needs at least three vertices"));
                }
                for k in 1..idx.len() - 1 {
                    mesh.faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Ok(mesh)
}

/// Binary little-endian PLY with `double` coordinates and, when there are
/// faces, a `uchar`/`int` index list.
pub fn write_ply(path: &Path, mesh: &Mesh) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n",
        mesh.vertices.len()
    );
    if !mesh.faces.is_empty() {
        header += &format!("element face {}\nproperty list uchar int vertex_indices\n", mesh.faces.len());
    }
    header += "end_header\n";
    w.write_all(header.as_bytes()).map_err(io)?;
    for v in &mesh.vertices {
        for c in v.to_array() {
            w.write_all(&c.to_le_bytes()).map_err(io)?;
        }
    }
    for f in &mesh.faces {
        w.write_all(&[3u8]).map_err(io)?;
        for i in f {
            w.write_all(&(*i as i32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn write_points(path: &Path, points: &[Vec3]) -> Result<()> {
    write_ply(
        path,
        &Mesh {
            vertices: points.to_vec(),
            faces: Vec::new(),
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
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
    fn parse(s: &str) -> Option<Self> {
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

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Cursor<'a> {
    path: &'a Path,
    data: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::format(self.path, "truncated PLY body"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn scalar(&mut self, t: Scalar) -> Result<f64> {
        Ok(t.read(self.take(t.size())?))
    }
}

/// Binary little-endian PLY. Vertex `x`/`y`/`z` may be any scalar type;
/// faces are read from `vertex_indices` (or `vertex_index`) and
/// fan-triangulated. Other elements and properties are skipped.
pub fn read_ply(path: &Path) -> Result<Mesh> {
    let mut raw = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut raw)
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m);
    let end = b"end_header\n";
    let hlen = raw
        .windows(end.len())
        .position(|w| w == end)
        .ok_or_else(|| bad("missing end_header"))?
        + end.len();
    let header = std::str::from_utf8(&raw[..hlen]).map_err(|_| bad("header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(bad("not a PLY file"));
    }
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", f, ..] => return Err(bad(&format!("unsupported PLY format {f}"))),
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| bad("bad element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", c, i, name] => {
                let (c, i) = Scalar::parse(c).zip(Scalar::parse(i)).ok_or_else(|| bad("bad list type"))?;
                elements
                    .last_mut()
                    .ok_or_else(|| bad("property before element"))?
                    .props
                    .push(Property::List(name.to_string(), c, i));
            }
            ["property", ty, name] => {
                let s = Scalar::parse(ty).ok_or_else(|| bad("bad property type"))?;
                elements
                    .last_mut()
                    .ok_or_else(|| bad("property before element"))?
                    .props
                    .push(Property::Scalar(name.to_string(), s));
            }
            ["comment", ..] | ["obj_info", ..] | ["end_header"] | [] => {}
            _ => return Err(bad(&format!("unexpected header line `{line}`"))),
        }
    }
    let mut cur = Cursor {
        path,
        data: &raw,
        pos: hlen,
    };
    let mut mesh = Mesh::default();
    for el in &elements {
        for _ in 0..el.count {
            let mut xyz = [None; 3];
            for p in &el.props {
                match p {
                    Property::Scalar(name, t) => {
                        let v = cur.scalar(*t)?;
                        if el.name == "vertex" {
                            if let Some(k) = ["x", "y", "z"].iter().position(|a| a == name) {
                                xyz[k] = Some(v);
                            }
                        }
                    }
                    Property::List(name, ct, it) => {
                        let n = cur.scalar(*ct)? as usize;
                        let idx = (0..n).map(|_| cur.scalar(*it)).collect::<Result<Vec<f64>>>()?;
                        if el.name == "face" && (name == "vertex_indices" || name == "vertex_index") {
                            if n < 3 {
                                return Err(bad("face needs at least three vertices"));
                            }
                            let idx: Vec<u32> = idx.into_iter().map(|i| i as u32).collect();
                            for k in 1..n - 1 {
                                mesh.faces.push([idx[0], idx[k], idx[k + 1]]);
                            }
                        }
                    }
                }
            }
            if el.name == "vertex" {
                match xyz {
                    [Some(x), Some(y), Some(z)] => mesh.vertices.push(Vec3::new(x, y, z)),
                    _ => return Err(bad("vertex element lacks x, y or z")),
                }
            }
        }
    }
    if mesh.faces.iter().flatten().any(|&i| i as usize >= mesh.vertices.len()) {
        return Err(bad("face index out of range"));
    }
    Ok(mesh)
}

pub fn read_points(path: &Path) -> Result<Vec<Vec3>> {
    Ok(read_ply(path)?.vertices)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Mesh {
        Mesh {
            vertices: vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.1, -0.3),
                Vec3::new(0.1 + 0.2, 2.0, 1e-17),
                Vec3::new(-4.5, 3.25, 7.0),
            ],
            faces: vec![[0, 1, 2], [0, 2, 3]],
        }
    }

    #[test]
    fn obj_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.obj");
        write_obj(&p, &sample()).unwrap();
        assert_eq!(read_obj(&p).unwrap(), sample());
    }

    #[test]
    fn ply_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ply");
        write_ply(&p, &sample()).unwrap();
        assert_eq!(read_ply(&p).unwrap(), sample());
        let q = dir.path().join("pts.ply");
        write_points(&q, &sample().vertices).unwrap();
        assert_eq!(read_points(&q).unwrap(), sample().vertices);
    }

    #[test]
    fn obj_quads_and_relative_indices() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.obj");
        fs::write(&p, "# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1 4//1\nf -4 -3 -2\n").unwrap();
        let m = read_obj(&p).unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2], [0, 2, 3], [0, 1, 2]]);
    }

    #[test]
    fn ply_with_float_coordinates_and_extra_properties() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ply");
        let mut b = b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nend_header\n".to_vec();
        for (v, c) in [([1.5f32, 2.0, -1.0], 7u8), ([0.25, 0.0, 3.0], 9)] {
            for x in v {
                b.extend_from_slice(&x.to_le_bytes());
            }
            b.push(c);
        }
        fs::write(&p, b).unwrap();
        let m = read_ply(&p).unwrap();
        assert_eq!(m.vertices, vec![Vec3::new(1.5, 2.0, -1.0), Vec3::new(0.25, 0.0, 3.0)]);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ply");
        fs::write(&p, "ply\nformat ascii 1.0\nelement vertex 0\nend_header\n").unwrap();
        assert!(matches!(read_ply(&p), Err(Error::Format { .. })));
        fs::write(&p, "ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty double x\nproperty double y\nproperty double z\nend_header\n").unwrap();
        assert!(matches!(read_ply(&p), Err(Error::Format { .. })));
        let o = dir.path().join("a.obj");
        fs::write(&o, "v 0 0 0\nf 1 2 3\n").unwrap();
        assert!(matches!(read_obj(&o), Err(Error::Format { .. })));
        assert!(matches!(read_obj(&dir.path().join("none.obj")), Err(Error::Missing(_))));
    }
}
