//! Per-frame point records stored as PLY `vertex` elements.
//!
//! | property              | type   | meaning                                  |
//! |-----------------------|--------|------------------------------------------|
//! | x, y, z               | float  | point position (m)                       |
//! | flow_x, flow_y, flow_z| float  | flow vector (m), optional                |
//! | label                 | ushort | 0-based body part, optional              |
//! | lidar_id              | uchar  | index of the returning sensor, optional  |
//! | timestamp             | double | pulse time (s), optional                 |
//! | mesh_face             | uint   | triangle hit on the person mesh, optional|
//! | bary_u, bary_v        | double | barycentric weights of the hit, optional |
//! | src_index             | uint   | index into the source frame, optional    |
//!
//! Other properties survive reading in [`ScanRecord::extra`] but are not
//! written back.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::ply::{read_ply, write_ply, Element, Encoding, Ply, Property, Scalar};
use crate::error::{Error, Result};
use crate::synth::SurfaceAnchor;
use crate::types::Vec3;

const KNOWN: [&str; 13] = [
    "x", "y", "z", "flow_x", "flow_y", "flow_z", "label", "lidar_id", "timestamp", "mesh_face", "bary_u", "bary_v",
    "src_index",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScanRecord {
    pub points: Vec<Vec3>,
    pub flow: Option<Vec<Vec3>>,
    pub labels: Option<Vec<usize>>,
    pub lidar_ids: Option<Vec<u8>>,
    pub timestamps: Option<Vec<f64>>,
    pub anchors: Option<Vec<SurfaceAnchor>>,
    pub src_index: Option<Vec<usize>>,
    /// Unrecognized scalar properties, by name.
    pub extra: Vec<(String, Vec<f64>)>,
}

impl ScanRecord {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self {
            points,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.points.len();
        let lens = [
            ("flow", self.flow.as_ref().map(Vec::len)),
            ("labels", self.labels.as_ref().map(Vec::len)),
            ("lidar ids", self.lidar_ids.as_ref().map(Vec::len)),
            ("timestamps", self.timestamps.as_ref().map(Vec::len)),
            ("anchors", self.anchors.as_ref().map(Vec::len)),
            ("source indices", self.src_index.as_ref().map(Vec::len)),
        ];
        for (what, len) in lens {
            if let Some(len) = len {
                if len != n {
                    return Err(Error::LengthMismatch { what, expected: n, found: len });
                }
            }
        }
        Ok(())
    }

    pub fn to_ply(&self, encoding: Encoding) -> Result<Ply> {
        self.check()?;
        if !self.extra.is_empty() {
            let names: Vec<&str> = self.extra.iter().map(|(n, _)| n.as_str()).collect();
            log::warn!("dropping unknown point properties on write: {}", names.join(", "));
        }
        let col = |f: &dyn Fn(&Vec3) -> f64, v: &[Vec3]| v.iter().map(f).collect::<Vec<f64>>();
        let mut props = vec![
            Property::scalar("x", Scalar::F32, col(&|p| p.x, &self.points)),
            Property::scalar("y", Scalar::F32, col(&|p| p.y, &self.points)),
            Property::scalar("z", Scalar::F32, col(&|p| p.z, &self.points)),
        ];
        if let Some(f) = &self.flow {
            props.push(Property::scalar("flow_x", Scalar::F32, col(&|p| p.x, f)));
            props.push(Property::scalar("flow_y", Scalar::F32, col(&|p| p.y, f)));
            props.push(Property::scalar("flow_z", Scalar::F32, col(&|p| p.z, f)));
        }
        if let Some(l) = &self.labels {
            props.push(Property::scalar("label", Scalar::U16, l.iter().map(|&v| v as f64).collect()));
        }
        if let Some(l) = &self.lidar_ids {
            props.push(Property::scalar("lidar_id", Scalar::U8, l.iter().map(|&v| v as f64).collect()));
        }
        if let Some(t) = &self.timestamps {
            props.push(Property::scalar("timestamp", Scalar::F64, t.clone()));
        }
        if let Some(a) = &self.anchors {
            props.push(Property::scalar("mesh_face", Scalar::U32, a.iter().map(|a| a.face as f64).collect()));
            props.push(Property::scalar("bary_u", Scalar::F64, a.iter().map(|a| a.u).collect()));
            props.push(Property::scalar("bary_v", Scalar::F64, a.iter().map(|a| a.v).collect()));
        }
        if let Some(s) = &self.src_index {
            props.push(Property::scalar("src_index", Scalar::U32, s.iter().map(|&v| v as f64).collect()));
        }
        Ok(Ply {
            encoding,
            comments: Vec::new(),
            elements: vec![Element::new("vertex", self.points.len(), props)?],
        })
    }

    pub fn from_ply(ply: &Ply) -> Result<Self> {
        let v = ply
            .element("vertex")
            .ok_or_else(|| Error::PlyBody("missing `vertex` element".into()))?;
        let get = |name: &str| -> Result<Option<&[f64]>> {
            match v.property(name) {
                None => Ok(None),
                Some(p) => p
                    .as_scalars()
                    .map(Some)
                    .ok_or_else(|| Error::PlyBody(format!("property `{name}` must be a scalar"))),
            }
        };
        let require = |name: &str| -> Result<&[f64]> {
            get(name)?.ok_or_else(|| Error::PlyBody(format!("missing required property `{name}`")))
        };
        let vec3 = |xs: &[f64], ys: &[f64], zs: &[f64]| -> Vec<Vec3> {
            xs.iter().zip(ys).zip(zs).map(|((x, y), z)| Vec3::new(*x, *y, *z)).collect()
        };
        let all_or_none = |names: &[&str]| -> Result<Option<Vec<&[f64]>>> {
            let cols = names.iter().map(|n| get(n)).collect::<Result<Vec<_>>>()?;
            match cols.iter().filter(|c| c.is_some()).count() {
                0 => Ok(None),
                k if k == names.len() => Ok(Some(cols.into_iter().flatten().collect())),
                _ => Err(Error::PlyBody(format!("properties {names:?} must appear together"))),
            }
        };
        let int = |c: &[f64], name: &str| -> Result<Vec<usize>> {
            c.iter()
                .map(|&x| {
                    if x >= 0.0 && x.fract() == 0.0 {
                        Ok(x as usize)
                    } else {
                        Err(Error::PlyBody(format!("`{name}` value {x} is not a nonnegative integer")))
                    }
                })
                .collect()
        };

        let points = vec3(require("x")?, require("y")?, require("z")?);
        let flow = all_or_none(&["flow_x", "flow_y", "flow_z"])?.map(|c| vec3(c[0], c[1], c[2]));
        let labels = get("label")?.map(|c| int(c, "label")).transpose()?;
        let lidar_ids = get("lidar_id")?
            .map(|c| int(c, "lidar_id").map(|v| v.into_iter().map(|x| x as u8).collect()))
            .transpose()?;
        let timestamps = get("timestamp")?.map(<[f64]>::to_vec);
        let anchors = match all_or_none(&["mesh_face", "bary_u", "bary_v"])? {
            None => None,
            Some(c) => {
                let faces = int(c[0], "mesh_face")?;
                Some(
                    faces
                        .iter()
                        .zip(c[1].iter().zip(c[2]))
                        .map(|(&face, (&u, &v))| SurfaceAnchor { face: face as u32, u, v })
                        .collect(),
                )
            }
        };
        let src_index = get("src_index")?.map(|c| int(c, "src_index")).transpose()?;
        let extra = v
            .properties
            .iter()
            .filter(|p| !KNOWN.contains(&p.name.as_str()))
            .filter_map(|p| p.as_scalars().map(|s| (p.name.clone(), s.to_vec())))
            .collect();
        Ok(Self {
            points,
            flow,
            labels,
            lidar_ids,
            timestamps,
            anchors,
            src_index,
            extra,
        })
    }

    pub fn write(&self, path: &Path, encoding: Encoding) -> Result<()> {
        let ply = self.to_ply(encoding)?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        write_ply(BufWriter::new(file), &ply)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ply = read_ply(BufReader::new(file)).map_err(|e| with_path(path, e))?;
        Self::from_ply(&ply).map_err(|e| with_path(path, e))
    }
}

pub(super) fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::PlyBody(m) => Error::PlyBody(format!("{}: {m}", path.display())),
        Error::PlyHeader { line, message } => Error::PlyHeader {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_record(n: usize) -> ScanRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut v = || Vec3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(0.0..2.0));
        let points = (0..n).map(|_| v()).collect();
        let flow = Some((0..n).map(|_| v() * 0.01).collect());
        ScanRecord {
            points,
            flow,
            labels: Some((0..n).map(|i| i % 14).collect()),
            lidar_ids: Some((0..n).map(|i| (i % 4) as u8).collect()),
            timestamps: Some((0..n).map(|i| i as f64 * 1e-5).collect()),
            anchors: Some((0..n).map(|i| SurfaceAnchor { face: i as u32 * 7, u: 0.25, v: 1.0 / 3.0 }).collect()),
            src_index: None,
            extra: Vec::new(),
        }
    }

    fn to_f32(v: &[Vec3]) -> Vec<Vec3> {
        v.iter().map(|p| p.map(|c| c as f32 as f64)).collect()
    }

    #[test]
    fn binary_round_trip_is_bitwise_at_f32() {
        let rec = random_record(512);
        let ply = rec.to_ply(Encoding::BinaryLittleEndian).unwrap();
        let mut buf = Vec::new();
        write_ply(&mut buf, &ply).unwrap();
        let back = ScanRecord::from_ply(&read_ply(buf.as_slice()).unwrap()).unwrap();
        assert_eq!(back.points, to_f32(&rec.points));
        assert_eq!(back.flow.as_deref(), Some(to_f32(rec.flow.as_ref().unwrap()).as_slice()));
        assert_eq!(back.labels, rec.labels);
        assert_eq!(back.anchors, rec.anchors);
        assert_eq!(back.timestamps, rec.timestamps);
    }

    #[test]
    fn ascii_and_binary_agree() {
        let rec = random_record(100);
        let decode = |enc| {
            let mut buf = Vec::new();
            write_ply(&mut buf, &rec.to_ply(enc).unwrap()).unwrap();
            ScanRecord::from_ply(&read_ply(buf.as_slice()).unwrap()).unwrap()
        };
        assert_eq!(decode(Encoding::Ascii), decode(Encoding::BinaryLittleEndian));
    }

    #[test]
    fn unknown_properties_are_kept_on_read() {
        let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty float intensity\nend_header\n0 0 0 5\n1 1 1 7\n";
        let rec = ScanRecord::from_ply(&read_ply(text.as_bytes()).unwrap()).unwrap();
        assert_eq!(rec.extra, vec![("intensity".to_string(), vec![5.0, 7.0])]);
        let out = rec.to_ply(Encoding::Ascii).unwrap();
        assert!(out.elements[0].property("intensity").is_none());
    }

    #[test]
    fn partial_flow_is_rejected() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty float flow_x\nend_header\n0 0 0 5\n";
        assert!(ScanRecord::from_ply(&read_ply(text.as_bytes()).unwrap()).is_err());
    }
}
