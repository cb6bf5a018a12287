//! CSV (`x,y,z[,nx,ny,nz]`) and binary little-endian PLY readers/writers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use super::PointCloud;
use crate::error::{Error, Result};

pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let cloud = match extension(path).as_deref() {
        Some("ply") => read_ply(path)?,
        Some("csv") | Some("txt") => read_csv(path)?,
        other => {
            return Err(Error::Unknown {
                what: "point cloud format",
                name: other.unwrap_or("").to_string(),
            })
        }
    };
    cloud.validate()?;
    Ok(cloud)
}

pub fn write_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    match extension(path).as_deref() {
        Some("csv") | Some("txt") => write_csv(path, cloud),
        _ => write_ply(path, cloud),
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let context = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::parse(&context, e.to_string()))?;

    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut with_normals = None;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::parse(&context, e.to_string()))?;
        let values: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse).collect();
        let values = match values {
            Ok(v) => v,
            // tolerate a single header row
            Err(_) if line == 0 => continue,
            Err(e) => return Err(Error::parse(&context, format!("row {}: {e}", line + 1))),
        };
        let has_n = match values.len() {
            3 => false,
            6 => true,
            n => {
                return Err(Error::parse(
                    &context,
                    format!("row {}: {n} columns", line + 1),
                ))
            }
        };
        if *with_normals.get_or_insert(has_n) != has_n {
            return Err(Error::parse(
                &context,
                format!("row {}: inconsistent column count", line + 1),
            ));
        }
        points.push(Vector3::new(values[0], values[1], values[2]));
        if has_n {
            normals.push(Vector3::new(values[3], values[4], values[5]));
        }
    }
    Ok(PointCloud {
        points,
        normals: with_normals.unwrap_or(false).then_some(normals),
    })
}

pub fn write_csv(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())
        .map_err(|e| Error::parse(path.as_ref().display().to_string(), e.to_string()))?;
    let to_err = |e: csv::Error| Error::parse("csv writer", e.to_string());
    for (i, p) in cloud.points.iter().enumerate() {
        let mut row = vec![p.x.to_string(), p.y.to_string(), p.z.to_string()];
        if let Some(ns) = &cloud.normals {
            row.extend(ns[i].iter().map(f64::to_string));
        }
        writer.write_record(&row).map_err(to_err)?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Clone, Copy)]
enum Scalar {
    F32,
    F64,
    Other(usize),
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            "char" | "int8" | "uchar" | "uint8" => Scalar::Other(1),
            "short" | "int16" | "ushort" | "uint16" => Scalar::Other(2),
            "int" | "int32" | "uint" | "uint32" => Scalar::Other(4),
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::F32 => 4,
            Scalar::F64 => 8,
            Scalar::Other(n) => n,
        }
    }
}

/// Reads the vertex element of a binary little-endian PLY file.
pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let context = path.as_ref().display().to_string();
    let bad = |msg: String| Error::parse(&context, msg);
    let mut reader = BufReader::new(File::open(path.as_ref())?);

    let mut line = String::new();
    let mut next_line = |reader: &mut BufReader<File>| -> Result<String> {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::parse(&context, "unexpected end of header"));
        }
        Ok(line.trim().to_string())
    };

    if next_line(&mut reader)? != "ply" {
        return Err(bad("missing ply magic".into()));
    }
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    loop {
        let l = next_line(&mut reader)?;
        let words: Vec<&str> = l.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(bad(format!("unsupported format {fmt}")));
                }
            }
            ["element", name, count] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertex_count = Some(count.parse::<usize>().map_err(|e| bad(e.to_string()))?);
                } else if vertex_count.is_none() {
                    return Err(bad("vertex element must come first".into()));
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(bad("list properties on vertices are unsupported".into()))
            }
            ["property", ty, name] if in_vertex => {
                let scalar = Scalar::parse(ty).ok_or_else(|| bad(format!("unknown type {ty}")))?;
                props.push((name.to_string(), scalar));
            }
            _ => {}
        }
    }
    let count = vertex_count.ok_or_else(|| bad("no vertex element".into()))?;
    let slot = |name: &str| props.iter().position(|(n, _)| n == name);
    let xyz = [slot("x"), slot("y"), slot("z")];
    let nxyz = [slot("nx"), slot("ny"), slot("nz")];
    if xyz.iter().any(Option::is_none) {
        return Err(bad("vertex element lacks x/y/z".into()));
    }
    let has_normals = nxyz.iter().all(Option::is_some);

    let stride: usize = props.iter().map(|(_, s)| s.size()).sum();
    let mut buf = vec![0u8; stride];
    let mut values = vec![0.0f64; props.len()];
    let mut points = Vec::with_capacity(count);
    let mut normals = Vec::with_capacity(if has_normals { count } else { 0 });
    for _ in 0..count {
        reader.read_exact(&mut buf)?;
        let mut offset = 0;
        for (v, (_, scalar)) in values.iter_mut().zip(&props) {
            let bytes = &buf[offset..offset + scalar.size()];
            *v = match scalar {
                Scalar::F32 => f32::from_le_bytes(bytes.try_into().unwrap()) as f64,
                Scalar::F64 => f64::from_le_bytes(bytes.try_into().unwrap()),
                Scalar::Other(_) => 0.0,
            };
            offset += scalar.size();
        }
        let get = |s: [Option<usize>; 3]| {
            Vector3::new(
                values[s[0].unwrap()],
                values[s[1].unwrap()],
                values[s[2].unwrap()],
            )
        };
        points.push(get(xyz));
        if has_normals {
            normals.push(get(nxyz));
        }
    }
    Ok(PointCloud {
        points,
        normals: has_normals.then_some(normals),
    })
}

/// Writes float32 x/y/z (and nx/ny/nz when present).
pub fn write_ply(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    for name in ["x", "y", "z"] {
        writeln!(w, "property float {name}")?;
    }
    if cloud.normals.is_some() {
        for name in ["nx", "ny", "nz"] {
            writeln!(w, "property float {name}")?;
        }
    }
    writeln!(w, "end_header")?;
    for (i, p) in cloud.points.iter().enumerate() {
        for v in p.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        if let Some(ns) = &cloud.normals {
            for v in ns[i].iter() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
