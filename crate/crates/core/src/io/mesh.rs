//! Mesh frames and external descriptors, both stored as binary PLY.
//!
//! A mesh frame has a `vertex` element with `double` x, y, z and a `face`
//! element with `property list uchar uint vertex_indices`. An animated mesh
//! is a sequence of such files sharing the same faces.
//!
//! A descriptor file has a single `descriptor` element, one record per point,
//! with `property list ushort float values`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::scan::with_path;
use super::ply::{read_ply, write_ply, Element, Encoding, Ply, Property, Scalar};
use crate::error::{Error, Result};
use crate::types::{Descriptor, Vec3};

fn write_file(path: &Path, ply: &Ply) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_ply(BufWriter::new(file), ply)
}

fn read_file(path: &Path) -> Result<Ply> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_ply(BufReader::new(file)).map_err(|e| with_path(path, e))
}

pub fn write_mesh_frame(path: &Path, vertices: &[Vec3], faces: &[[u32; 3]]) -> Result<()> {
    let col = |a: usize| vertices.iter().map(|v| v[a]).collect();
    let verts = Element::new(
        "vertex",
        vertices.len(),
        vec![
            Property::scalar("x", Scalar::F64, col(0)),
            Property::scalar("y", Scalar::F64, col(1)),
            Property::scalar("z", Scalar::F64, col(2)),
        ],
    )?;
    let faces = Element::new(
        "face",
        faces.len(),
        vec![Property::list(
            "vertex_indices",
            Scalar::U8,
            Scalar::U32,
            faces.iter().map(|f| f.iter().map(|&i| i as f64).collect()).collect(),
        )],
    )?;
    write_file(
        path,
        &Ply {
            encoding: Encoding::BinaryLittleEndian,
            comments: Vec::new(),
            elements: vec![verts, faces],
        },
    )
}

pub fn read_mesh_frame(path: &Path) -> Result<(Vec<Vec3>, Vec<[u32; 3]>)> {
    let ply = read_file(path)?;
    let bad = |m: &str| Error::PlyBody(format!("{}: {m}", path.display()));
    let v = ply.element("vertex").ok_or_else(|| bad("missing `vertex` element"))?;
    let col = |n: &str| {
        v.property(n)
            .and_then(|p| p.as_scalars())
            .ok_or_else(|| bad(&format!("missing scalar property `{n}`")))
    };
    let (xs, ys, zs) = (col("x")?, col("y")?, col("z")?);
    let vertices: Vec<Vec3> = (0..v.count).map(|i| Vec3::new(xs[i], ys[i], zs[i])).collect();
    let f = ply.element("face").ok_or_else(|| bad("missing `face` element"))?;
    let lists = f
        .property("vertex_indices")
        .and_then(|p| p.as_lists())
        .ok_or_else(|| bad("missing list property `vertex_indices`"))?;
    let faces = lists
        .iter()
        .map(|l| match l.as_slice() {
            [a, b, c] if [a, b, c].iter().all(|&&i| i >= 0.0 && (i as usize) < vertices.len()) => {
                Ok([*a as u32, *b as u32, *c as u32])
            }
            _ => Err(bad("faces must be triangles with valid vertex indices")),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((vertices, faces))
}

pub fn write_descriptor(path: &Path, d: &Descriptor) -> Result<()> {
    let rows = (0..d.len()).map(|i| d.row(i).to_vec()).collect();
    let e = Element::new("descriptor", d.len(), vec![Property::list("values", Scalar::U16, Scalar::F32, rows)])?;
    write_file(
        path,
        &Ply {
            encoding: Encoding::BinaryLittleEndian,
            comments: Vec::new(),
            elements: vec![e],
        },
    )
}

pub fn read_descriptor(path: &Path) -> Result<Descriptor> {
    let ply = read_file(path)?;
    let bad = |m: &str| Error::PlyBody(format!("{}: {m}", path.display()));
    let rows = ply
        .element("descriptor")
        .and_then(|e| e.property("values"))
        .and_then(|p| p.as_lists())
        .ok_or_else(|| bad("missing `descriptor` element with list property `values`"))?;
    let dim = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(bad("descriptor rows differ in length"));
    }
    Descriptor::new(rows.concat(), dim)
}
