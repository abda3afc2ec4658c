//! Minimal PLY reader and writer (ASCII and binary little endian).
//!
//! Every value is held as `f64`, which represents all PLY scalar types up to
//! 32-bit integers exactly. Values are converted back to the declared type on
//! write.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scalar {
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
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::I8 => "char",
            Self::U8 => "uchar",
            Self::I16 => "short",
            Self::U16 => "ushort",
            Self::I32 => "int",
            Self::U32 => "uint",
            Self::F32 => "float",
            Self::F64 => "double",
        }
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn is_integer(self) -> bool {
        !matches!(self, Self::F32 | Self::F64)
    }

    fn range(self) -> (f64, f64) {
        match self {
            Self::I8 => (i8::MIN as f64, i8::MAX as f64),
            Self::U8 => (0.0, u8::MAX as f64),
            Self::I16 => (i16::MIN as f64, i16::MAX as f64),
            Self::U16 => (0.0, u16::MAX as f64),
            Self::I32 => (i32::MIN as f64, i32::MAX as f64),
            Self::U32 => (0.0, u32::MAX as f64),
            Self::F32 => (f32::MIN as f64, f32::MAX as f64),
            Self::F64 => (f64::MIN, f64::MAX),
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    fn encode(self, v: f64, out: &mut Vec<u8>) {
        match self {
            Self::I8 => out.push(v as i8 as u8),
            Self::U8 => out.push(v as u8),
            Self::I16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
            Self::U16 => out.extend_from_slice(&(v as u16).to_le_bytes()),
            Self::I32 => out.extend_from_slice(&(v as i32).to_le_bytes()),
            Self::U32 => out.extend_from_slice(&(v as u32).to_le_bytes()),
            Self::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Self::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }

    /// Parses an ASCII token; `float` tokens round to 32 bits like binary data.
    fn parse_value(self, tok: &str) -> Option<f64> {
        match self {
            Self::F32 => tok.parse::<f32>().ok().map(f64::from),
            _ => tok.parse::<f64>().ok(),
        }
    }

    fn format(self, v: f64) -> String {
        match self {
            Self::F32 => format!("{}", v as f32),
            Self::F64 => format!("{v}"),
            _ => format!("{}", v as i64),
        }
    }

    /// Checks that `v` is representable without coercion.
    fn check(self, v: f64, what: &str) -> Result<()> {
        let (lo, hi) = self.range();
        let ok = if self.is_integer() {
            v.fract() == 0.0 && v >= lo && v <= hi
        } else {
            !v.is_finite() || (v >= lo && v <= hi)
        };
        if ok {
            Ok(())
        } else {
            Err(Error::PlyBody(format!("value {v} of `{what}` does not fit PLY type {}", self.name())))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Values {
    Scalar(Vec<f64>),
    List(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Kind {
    Scalar(Scalar),
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Property {
    pub name: String,
    pub kind: Kind,
    pub values: Values,
}

impl Property {
    pub fn scalar(name: &str, ty: Scalar, values: Vec<f64>) -> Self {
        Self {
            name: name.to_string(),
            kind: Kind::Scalar(ty),
            values: Values::Scalar(values),
        }
    }

    pub fn list(name: &str, count: Scalar, item: Scalar, values: Vec<Vec<f64>>) -> Self {
        Self {
            name: name.to_string(),
            kind: Kind::List { count, item },
            values: Values::List(values),
        }
    }

    fn len(&self) -> usize {
        match &self.values {
            Values::Scalar(v) => v.len(),
            Values::List(v) => v.len(),
        }
    }

    pub fn as_scalars(&self) -> Option<&[f64]> {
        match &self.values {
            Values::Scalar(v) => Some(v),
            Values::List(_) => None,
        }
    }

    pub fn as_lists(&self) -> Option<&[Vec<f64>]> {
        match &self.values {
            Values::List(v) => Some(v),
            Values::Scalar(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    pub name: String,
    pub count: usize,
    pub properties: Vec<Property>,
}

impl Element {
    pub fn new(name: &str, count: usize, properties: Vec<Property>) -> Result<Self> {
        for p in &properties {
            if p.len() != count {
                return Err(Error::LengthMismatch {
                    what: "PLY property values",
                    expected: count,
                    found: p.len(),
                });
            }
        }
        Ok(Self {
            name: name.to_string(),
            count,
            properties,
        })
    }

    pub fn property(&self, name: &str) -> Option<&Property> {
        self.properties.iter().find(|p| p.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ply {
    pub encoding: Encoding,
    pub comments: Vec<String>,
    pub elements: Vec<Element>,
}

impl Ply {
    pub fn element(&self, name: &str) -> Option<&Element> {
        self.elements.iter().find(|e| e.name == name)
    }
}

fn header_error(line: usize, message: impl Into<String>) -> Error {
    Error::PlyHeader {
        line,
        message: message.into(),
    }
}

struct Header {
    encoding: Encoding,
    comments: Vec<String>,
    elements: Vec<(String, usize, Vec<(String, Kind)>)>,
}

fn read_header(reader: &mut impl BufRead) -> Result<Header> {
    let mut line_no = 0;
    let mut next_line = |reader: &mut dyn BufRead| -> Result<(usize, String)> {
        let mut buf = Vec::new();
        let n = reader
            .read_until(b'\n', &mut buf)
            .map_err(|e| header_error(line_no + 1, e.to_string()))?;
        line_no += 1;
        if n == 0 {
            return Err(header_error(line_no, "unexpected end of file before end_header"));
        }
        let text = String::from_utf8(buf).map_err(|_| header_error(line_no, "header is not valid text"))?;
        Ok((line_no, text.trim_end_matches(['\n', '\r']).to_string()))
    };

    let (l, magic) = next_line(reader)?;
    if magic != "ply" {
        return Err(header_error(l, format!("expected `ply`, found `{magic}`")));
    }
    let mut encoding = None;
    let mut comments = Vec::new();
    let mut elements: Vec<(String, usize, Vec<(String, Kind)>)> = Vec::new();
    loop {
        let (l, line) = next_line(reader)?;
        let mut words = line.split_whitespace();
        match words.next() {
            Some("format") => {
                let fmt = words.next().unwrap_or("");
                let version = words.next().unwrap_or("");
                if version != "1.0" {
                    return Err(header_error(l, format!("unsupported format version `{version}`")));
                }
                encoding = Some(match fmt {
                    "ascii" => Encoding::Ascii,
                    "binary_little_endian" => Encoding::BinaryLittleEndian,
                    other => return Err(header_error(l, format!("unsupported format `{other}`"))),
                });
            }
            Some("comment") | Some("obj_info") => {
                comments.push(line.splitn(2, ' ').nth(1).unwrap_or("").to_string());
            }
            Some("element") => {
                let name = words.next().ok_or_else(|| header_error(l, "element without a name"))?;
                let count = words
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| header_error(l, format!("element `{name}` lacks a valid count")))?;
                elements.push((name.to_string(), count, Vec::new()));
            }
            Some("property") => {
                let Some(element) = elements.last_mut() else {
                    return Err(header_error(l, "property before any element"));
                };
                let words: Vec<&str> = words.collect();
                let kind_and_name = match words.as_slice() {
                    ["list", count, item, name] => {
                        let count = Scalar::parse(count).ok_or_else(|| header_error(l, format!("unknown type `{count}`")))?;
                        let item = Scalar::parse(item).ok_or_else(|| header_error(l, format!("unknown type `{item}`")))?;
                        if !count.is_integer() {
                            return Err(header_error(l, "list count type must be an integer"));
                        }
                        (Kind::List { count, item }, name)
                    }
                    [ty, name] => {
                        let ty = Scalar::parse(ty).ok_or_else(|| header_error(l, format!("unknown type `{ty}`")))?;
                        (Kind::Scalar(ty), name)
                    }
                    _ => return Err(header_error(l, format!("malformed property line `{line}`"))),
                };
                if element.2.iter().any(|(n, _)| n == kind_and_name.1) {
                    return Err(header_error(l, format!("duplicate property `{}`", kind_and_name.1)));
                }
                element.2.push((kind_and_name.1.to_string(), kind_and_name.0));
            }
            Some("end_header") => break,
            Some(other) => return Err(header_error(l, format!("unexpected keyword `{other}`"))),
            None => return Err(header_error(l, "empty header line")),
        }
    }
    let encoding = encoding.ok_or_else(|| header_error(line_no, "missing format line"))?;
    Ok(Header {
        encoding,
        comments,
        elements,
    })
}

fn short_body(element: &str, expected: usize, found: usize) -> Error {
    Error::PlyBody(format!("element `{element}`: header declares {expected} records, body has {found}"))
}

/// Parses a PLY stream.
pub fn read_ply(mut reader: impl BufRead) -> Result<Ply> {
    let header = read_header(&mut reader)?;
    let mut body = Vec::new();
    reader
        .read_to_end(&mut body)
        .map_err(|e| Error::PlyBody(e.to_string()))?;
    let elements = match header.encoding {
        Encoding::Ascii => parse_ascii(&header, &body)?,
        Encoding::BinaryLittleEndian => parse_binary(&header, &body)?,
    };
    Ok(Ply {
        encoding: header.encoding,
        comments: header.comments,
        elements,
    })
}

fn empty_values(props: &[(String, Kind)], count: usize) -> Vec<Values> {
    props
        .iter()
        .map(|(_, k)| match k {
            Kind::Scalar(_) => Values::Scalar(Vec::with_capacity(count)),
            Kind::List { .. } => Values::List(Vec::with_capacity(count)),
        })
        .collect()
}

fn assemble(props: &[(String, Kind)], values: Vec<Values>, name: &str, count: usize) -> Element {
    Element {
        name: name.to_string(),
        count,
        properties: props
            .iter()
            .zip(values)
            .map(|((n, k), v)| Property {
                name: n.clone(),
                kind: k.clone(),
                values: v,
            })
            .collect(),
    }
}

fn parse_ascii(header: &Header, body: &[u8]) -> Result<Vec<Element>> {
    let text = std::str::from_utf8(body).map_err(|_| Error::PlyBody("ASCII body is not valid text".into()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let mut elements = Vec::new();
    for (name, count, props) in &header.elements {
        let mut values = empty_values(props, *count);
        for record in 0..*count {
            let line = lines.next().ok_or_else(|| short_body(name, *count, record))?;
            let mut tokens = line.split_whitespace();
            let mut take = |what: &str, ty: Scalar| -> Result<f64> {
                let tok = tokens
                    .next()
                    .ok_or_else(|| Error::PlyBody(format!("element `{name}` record {record}: missing `{what}`")))?;
                ty.parse_value(tok)
                    .ok_or_else(|| Error::PlyBody(format!("element `{name}` record {record}: bad number `{tok}`")))
            };
            for ((pname, kind), vals) in props.iter().zip(values.iter_mut()) {
                match (kind, vals) {
                    (Kind::Scalar(ty), Values::Scalar(v)) => v.push(take(pname, *ty)?),
                    (Kind::List { count, item }, Values::List(v)) => {
                        let n = take(pname, *count)?;
                        if n < 0.0 || n.fract() != 0.0 {
                            return Err(Error::PlyBody(format!("element `{name}` record {record}: bad list length {n}")));
                        }
                        let items = (0..n as usize).map(|_| take(pname, *item)).collect::<Result<Vec<_>>>()?;
                        v.push(items);
                    }
                    _ => unreachable!("values are built from the same property kinds"),
                }
            }
            if tokens.next().is_some() {
                return Err(Error::PlyBody(format!("element `{name}` record {record}: trailing values")));
            }
        }
        elements.push(assemble(props, values, name, *count));
    }
    if lines.next().is_some() {
        let last = header.elements.last().map_or("", |e| e.0.as_str());
        let declared = header.elements.last().map_or(0, |e| e.1);
        return Err(Error::PlyBody(format!(
            "element `{last}`: header declares {declared} records, body has more"
        )));
    }
    Ok(elements)
}

fn parse_binary(header: &Header, body: &[u8]) -> Result<Vec<Element>> {
    let mut pos = 0usize;
    let mut elements = Vec::new();
    for (name, count, props) in &header.elements {
        let mut values = empty_values(props, *count);
        for record in 0..*count {
            let mut take = |ty: Scalar| -> Option<f64> {
                let end = pos + ty.size();
                let v = ty.decode(body.get(pos..end)?);
                pos = end;
                Some(v)
            };
            for ((_, kind), vals) in props.iter().zip(values.iter_mut()) {
                match (kind, vals) {
                    (Kind::Scalar(ty), Values::Scalar(v)) => v.push(take(*ty).ok_or_else(|| short_body(name, *count, record))?),
                    (Kind::List { count: ct, item }, Values::List(v)) => {
                        let n = take(*ct).ok_or_else(|| short_body(name, *count, record))?;
                        if n < 0.0 {
                            return Err(Error::PlyBody(format!("element `{name}` record {record}: negative list length")));
                        }
                        let items = (0..n as usize)
                            .map(|_| take(*item).ok_or_else(|| short_body(name, *count, record)))
                            .collect::<Result<Vec<_>>>()?;
                        v.push(items);
                    }
                    _ => unreachable!("values are built from the same property kinds"),
                }
            }
        }
        elements.push(assemble(props, values, name, *count));
    }
    if pos != body.len() {
        return Err(Error::PlyBody(format!(
            "{} bytes after the last declared record",
            body.len() - pos
        )));
    }
    Ok(elements)
}

/// Serializes `ply`. Fails if a value does not fit its declared type.
pub fn write_ply(mut writer: impl Write, ply: &Ply) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(b"ply\n");
    let fmt = match ply.encoding {
        Encoding::Ascii => "ascii",
        Encoding::BinaryLittleEndian => "binary_little_endian",
    };
    out.extend_from_slice(format!("format {fmt} 1.0\n").as_bytes());
    for c in &ply.comments {
        out.extend_from_slice(format!("comment {c}\n").as_bytes());
    }
    for e in &ply.elements {
        out.extend_from_slice(format!("element {} {}\n", e.name, e.count).as_bytes());
        for p in &e.properties {
            let line = match p.kind {
                Kind::Scalar(t) => format!("property {} {}\n", t.name(), p.name),
                Kind::List { count, item } => format!("property list {} {} {}\n", count.name(), item.name(), p.name),
            };
            out.extend_from_slice(line.as_bytes());
        }
    }
    out.extend_from_slice(b"end_header\n");

    for e in &ply.elements {
        for p in &e.properties {
            if p.len() != e.count {
                return Err(Error::LengthMismatch {
                    what: "PLY property values",
                    expected: e.count,
                    found: p.len(),
                });
            }
        }
        for r in 0..e.count {
            let mut fields: Vec<String> = Vec::new();
            for p in &e.properties {
                match (&p.kind, &p.values) {
                    (Kind::Scalar(t), Values::Scalar(v)) => {
                        t.check(v[r], &p.name)?;
                        match ply.encoding {
                            Encoding::Ascii => fields.push(t.format(v[r])),
                            Encoding::BinaryLittleEndian => t.encode(v[r], &mut out),
                        }
                    }
                    (Kind::List { count, item }, Values::List(v)) => {
                        let n = v[r].len() as f64;
                        count.check(n, &p.name)?;
                        for x in &v[r] {
                            item.check(*x, &p.name)?;
                        }
                        match ply.encoding {
                            Encoding::Ascii => {
                                fields.push(count.format(n));
                                fields.extend(v[r].iter().map(|x| item.format(*x)));
                            }
                            Encoding::BinaryLittleEndian => {
                                count.encode(n, &mut out);
                                for x in &v[r] {
                                    item.encode(*x, &mut out);
                                }
                            }
                        }
                    }
                    _ => return Err(Error::PlyBody(format!("property `{}` kind does not match its values", p.name))),
                }
            }
            if ply.encoding == Encoding::Ascii {
                out.extend_from_slice(fields.join(" ").as_bytes());
                out.push(b'\n');
            }
        }
    }
    writer.write_all(&out).map_err(|e| Error::PlyBody(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(encoding: Encoding) -> Ply {
        let verts = Element::new(
            "vertex",
            3,
            vec![
                Property::scalar("x", Scalar::F32, vec![0.5, -1.25, 3.0e-7]),
                Property::scalar("label", Scalar::U16, vec![0.0, 13.0, 65535.0]),
                Property::scalar("t", Scalar::F64, vec![0.1, 0.2, 1.0 / 3.0]),
            ],
        )
        .unwrap();
        let faces = Element::new(
            "face",
            2,
            vec![Property::list("vertex_indices", Scalar::U8, Scalar::U32, vec![vec![0.0, 1.0, 2.0], vec![2.0, 1.0, 0.0]])],
        )
        .unwrap();
        Ply {
            encoding,
            comments: vec!["test".into()],
            elements: vec![verts, faces],
        }
    }

    fn round_trip(ply: &Ply) -> Ply {
        let mut buf = Vec::new();
        write_ply(&mut buf, ply).unwrap();
        read_ply(buf.as_slice()).unwrap()
    }

    #[test]
    fn both_encodings_round_trip() {
        for enc in [Encoding::Ascii, Encoding::BinaryLittleEndian] {
            let ply = sample(enc);
            let back = round_trip(&ply);
            // float columns come back at f32 precision
            let x = back.element("vertex").unwrap().property("x").unwrap().as_scalars().unwrap();
            assert_eq!(x[2], 3.0e-7f32 as f64);
            assert_eq!(back.elements[1], ply.elements[1]);
            assert_eq!(back.elements[0].properties[1..], ply.elements[0].properties[1..]);
        }
    }

    #[test]
    fn header_errors_carry_line_numbers() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty floot x\nend_header\n1\n";
        match read_ply(text.as_bytes()) {
            Err(Error::PlyHeader { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        assert!(matches!(read_ply("plx\n".as_bytes()), Err(Error::PlyHeader { line: 1, .. })));
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n";
        assert!(matches!(read_ply(text.as_bytes()), Err(Error::PlyHeader { .. })));
    }

    #[test]
    fn count_mismatch_names_counts() {
        let text = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nend_header\n1\n2\n";
        let err = read_ply(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains('3') && err.contains('2'), "{err}");
        let mut buf = Vec::new();
        write_ply(&mut buf, &sample(Encoding::BinaryLittleEndian)).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_ply(buf.as_slice()).is_err());
    }

    #[test]
    fn out_of_range_values_are_rejected_on_write() {
        let e = Element::new("vertex", 1, vec![Property::scalar("label", Scalar::U16, vec![70000.0])]).unwrap();
        let ply = Ply {
            encoding: Encoding::Ascii,
            comments: vec![],
            elements: vec![e],
        };
        assert!(write_ply(Vec::new(), &ply).is_err());
    }
}
