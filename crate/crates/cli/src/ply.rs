//! Binary little-endian PLY in the reference 3DGS vertex layout.
//!
//! Per vertex: `x y z [nx ny nz] f_dc_0..2 f_rest_* opacity scale_0..2
//! rot_0..3`. `f_rest_*` is channel-major: all higher-band coefficients of
//! red, then green, then blue. Scales are log-scales, opacity is a logit and
//! `rot_*` is `(w, x, y, z)`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use sfgs_core::primitives::{GaussianParams, Quat};
use sfgs_core::sh::{coeff_count, ShCoeffs, MAX_DEGREE};

use crate::error::{CliError, Result};

/// Header comment recording whether colors carry the `+0.5` offset.
const OFFSET_COMMENT: &str = "sfgs color_offset";

#[derive(Debug, Clone, PartialEq)]
pub struct PlyScene {
    pub gaussians: Vec<GaussianParams>,
    /// `Some` only when the file declares its color-offset convention.
    pub color_offset: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
struct Property {
    name: String,
    scalar: Scalar,
    offset: usize,
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
    stride: usize,
    has_list: bool,
}

#[derive(Debug)]
struct Header {
    elements: Vec<Element>,
    color_offset: Option<bool>,
}

fn read_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut line = String::new();
    let n = r.read_line(&mut line).map_err(|e| CliError::Data(format!("PLY header: {e}")))?;
    if n == 0 {
        return Err(CliError::Data("PLY header ended before end_header".into()));
    }
    Ok(line.trim_end_matches(['\n', '\r']).to_string())
}

fn parse_header<R: BufRead>(r: &mut R) -> Result<Header> {
    if read_line(r)? != "ply" {
        return Err(CliError::Data("not a PLY file (missing `ply` magic)".into()));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut color_offset = None;
    let mut format_seen = false;
    loop {
        let line = read_line(r)?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["format", encoding, _version] => {
                if *encoding != "binary_little_endian" {
                    return Err(CliError::UnsupportedEncoding(encoding.to_string()));
                }
                format_seen = true;
            }
            ["comment", rest @ ..] => {
                let text = rest.join(" ");
                if let Some(v) = text.strip_prefix(OFFSET_COMMENT) {
                    color_offset = match v.trim() {
                        "1" | "true" => Some(true),
                        "0" | "false" => Some(false),
                        other => return Err(CliError::Data(format!("bad color offset flag `{other}`"))),
                    };
                }
            }
            ["obj_info", ..] => {}
            ["element", name, count] => {
                let count = count.parse().map_err(|_| CliError::Data(format!("bad element count `{count}`")))?;
                elements.push(Element { name: name.to_string(), count, properties: Vec::new(), stride: 0, has_list: false });
            }
            ["property", "list", ..] => {
                let el = elements.last_mut().ok_or_else(|| CliError::Data("property before element".into()))?;
                el.has_list = true;
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| CliError::Data("property before element".into()))?;
                let scalar = Scalar::parse(ty).ok_or_else(|| CliError::Data(format!("unknown PLY type `{ty}`")))?;
                el.properties.push(Property { name: name.to_string(), scalar, offset: el.stride });
                el.stride += scalar.size();
            }
            _ => return Err(CliError::Data(format!("malformed PLY header line `{line}`"))),
        }
    }
    if !format_seen {
        return Err(CliError::Data("PLY header has no format line".into()));
    }
    Ok(Header { elements, color_offset })
}

/// Column lookup for the vertex element.
struct Columns<'a> {
    props: &'a [Property],
}

impl<'a> Columns<'a> {
    fn find(&self, name: &str) -> Result<&'a Property> {
        self.props.iter().find(|p| p.name == name).ok_or_else(|| CliError::MissingProperty(name.to_string()))
    }
}

struct Layout<'a> {
    position: [&'a Property; 3],
    dc: [&'a Property; 3],
    rest: Vec<&'a Property>,
    opacity: &'a Property,
    scale: [&'a Property; 3],
    rot: [&'a Property; 4],
    /// Coefficients per channel in the file.
    coeffs: usize,
}

fn layout(props: &[Property]) -> Result<Layout<'_>> {
    let cols = Columns { props };
    let three = |p: &str| -> Result<[&Property; 3]> { Ok([cols.find(&format!("{p}0"))?, cols.find(&format!("{p}1"))?, cols.find(&format!("{p}2"))?]) };
    let position = [cols.find("x")?, cols.find("y")?, cols.find("z")?];
    let dc = three("f_dc_")?;
    let rest_count = props.iter().filter(|p| p.name.strip_prefix("f_rest_").is_some_and(|i| i.parse::<usize>().is_ok())).count();
    let coeffs = rest_count / 3 + 1;
    if rest_count % 3 != 0 || !(0..=MAX_DEGREE).any(|l| (l + 1) * (l + 1) == coeffs) {
        return Err(CliError::Data(format!("{rest_count} f_rest properties do not form complete SH bands")));
    }
    let rest = (0..rest_count).map(|i| cols.find(&format!("f_rest_{i}"))).collect::<Result<Vec<_>>>()?;
    let opacity = cols.find("opacity")?;
    let scale = three("scale_")?;
    let rot = [cols.find("rot_0")?, cols.find("rot_1")?, cols.find("rot_2")?, cols.find("rot_3")?];
    Ok(Layout { position, dc, rest, opacity, scale, rot, coeffs })
}

fn decode_vertex(row: &[u8], lay: &Layout, index: usize) -> Result<GaussianParams> {
    let get = |p: &Property| p.scalar.read(&row[p.offset..]);
    let mut c = ShCoeffs::zeros(MAX_DEGREE);
    let per_channel = lay.coeffs - 1;
    for ch in 0..3 {
        c.set(ch, 0, get(lay.dc[ch]));
        for k in 1..lay.coeffs {
            c.set(ch, k, get(lay.rest[ch * per_channel + k - 1]));
        }
    }
    let q = Quat::new(get(lay.rot[0]), get(lay.rot[1]), get(lay.rot[2]), get(lay.rot[3]));
    GaussianParams::new(
        Vector3::new(get(lay.position[0]), get(lay.position[1]), get(lay.position[2])),
        q,
        Vector3::new(get(lay.scale[0]), get(lay.scale[1]), get(lay.scale[2])),
        c,
        get(lay.opacity),
    )
    .map_err(|e| CliError::Data(format!("vertex {index}: {e}")))
}

/// Reads a 3DGS PLY. Lower SH degrees are zero-padded to degree 3.
pub fn read_ply<R: BufRead>(mut r: R) -> Result<PlyScene> {
    let header = parse_header(&mut r)?;
    let mut gaussians = Vec::new();
    for el in &header.elements {
        if el.has_list {
            if el.name == "vertex" {
                return Err(CliError::Data("list properties in the vertex element are not supported".into()));
            }
            break;
        }
        let mut row = vec![0u8; el.stride];
        if el.name != "vertex" {
            for _ in 0..el.count {
                r.read_exact(&mut row).map_err(|e| CliError::Data(format!("truncated `{}` element: {e}", el.name)))?;
            }
            continue;
        }
        let lay = layout(&el.properties)?;
        gaussians.reserve(el.count);
        for i in 0..el.count {
            r.read_exact(&mut row).map_err(|e| CliError::Data(format!("truncated vertex data at vertex {i}: {e}")))?;
            gaussians.push(decode_vertex(&row, &lay, i)?);
        }
        return Ok(PlyScene { gaussians, color_offset: header.color_offset });
    }
    Err(CliError::MissingProperty("x".into()))
}

pub fn load_ply(path: &Path) -> Result<PlyScene> {
    let f = File::open(path).map_err(CliError::io(path))?;
    read_ply(BufReader::new(f))
}

/// Writes float32 vertices with zero normals, the layout produced by the
/// reference exporter.
pub fn write_ply<W: Write>(mut w: W, gaussians: &[GaussianParams], color_offset: Option<bool>) -> Result<()> {
    let l_max = gaussians.first().map_or(MAX_DEGREE, |g| g.c.l_max());
    if let Some(i) = gaussians.iter().position(|g| g.c.l_max() != l_max) {
        return Err(CliError::Data(format!("vertex {i} has SH degree {} but vertex 0 has {l_max}", gaussians[i].c.l_max())));
    }
    let k = coeff_count(l_max)?;
    let mut header = format!("ply\nformat binary_little_endian 1.0\n");
    if let Some(flag) = color_offset {
        header.push_str(&format!("comment {OFFSET_COMMENT} {}\n", flag as u8));
    }
    header.push_str(&format!("element vertex {}\n", gaussians.len()));
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz"].iter().map(|s| s.to_string()).collect();
    names.extend((0..3).map(|i| format!("f_dc_{i}")));
    names.extend((0..3 * (k - 1)).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    for n in &names {
        header.push_str(&format!("property float {n}\n"));
    }
    header.push_str("end_header\n");
    let io = |e: std::io::Error| CliError::Data(format!("PLY write: {e}"));
    w.write_all(header.as_bytes()).map_err(io)?;
    let mut row: Vec<f64> = Vec::with_capacity(names.len());
    let mut bytes: Vec<u8> = Vec::with_capacity(4 * names.len());
    for g in gaussians {
        row.clear();
        row.extend(g.mu.iter());
        row.extend([0.0; 3]);
        row.extend((0..3).map(|ch| g.c.get(ch, 0)));
        for ch in 0..3 {
            row.extend(&g.c.channel(ch)[1..]);
        }
        row.push(g.o);
        row.extend(g.s.iter());
        row.extend(g.q().to_array());
        bytes.clear();
        for v in &row {
            bytes.extend((*v as f32).to_le_bytes());
        }
        w.write_all(&bytes).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn save_ply(path: &Path, gaussians: &[GaussianParams], color_offset: Option<bool>) -> Result<()> {
    let f = File::create(path).map_err(CliError::io(path))?;
    write_ply(BufWriter::new(f), gaussians, color_offset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(props: &[&str], count: usize) -> Vec<u8> {
        let mut h = format!("ply\nformat binary_little_endian 1.0\nelement vertex {count}\n");
        for p in props {
            h.push_str(&format!("property float {p}\n"));
        }
        h.push_str("end_header\n");
        h.into_bytes()
    }

    fn dc_only_props() -> Vec<&'static str> {
        vec!["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    }

    fn push(buf: &mut Vec<u8>, vals: &[f32]) {
        for v in vals {
            buf.extend(v.to_le_bytes());
        }
    }

    #[test]
    fn dc_only_file_is_zero_padded() {
        let mut buf = header(&dc_only_props(), 1);
        push(&mut buf, &[1.0, -2.0, 0.5, 0.1, 0.2, 0.3, 1.5, -1.0, -2.0, -3.0, 1.0, 0.0, 0.0, 0.0]);
        let scene = read_ply(&buf[..]).unwrap();
        let g = &scene.gaussians[0];
        assert_eq!(g.c.l_max(), 3);
        assert_eq!(g.c.get(0, 0), 0.1f32 as f64);
        assert_eq!(g.c.get(2, 0), 0.3f32 as f64);
        assert!((1..16).all(|k| (0..3).all(|ch| g.c.get(ch, k) == 0.0)));
        assert_eq!(g.s, Vector3::new(-1.0, -2.0, -3.0));
        assert_eq!(g.o, 1.5);
        assert_eq!(scene.color_offset, None);
    }

    #[test]
    fn rotation_is_normalized() {
        let mut buf = header(&dc_only_props(), 1);
        push(&mut buf, &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
        let g = &read_ply(&buf[..]).unwrap().gaussians[0];
        assert_eq!(g.q().to_array(), [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn missing_property_is_named() {
        let props: Vec<&str> = dc_only_props().into_iter().filter(|p| *p != "scale_1").collect();
        let mut buf = header(&props, 1);
        push(&mut buf, &[0.0; 13]);
        match read_ply(&buf[..]) {
            Err(CliError::MissingProperty(p)) => assert_eq!(p, "scale_1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gap_in_rest_coefficients_is_named() {
        let mut props = dc_only_props();
        let rest: Vec<String> = (0..9).map(|i| format!("f_rest_{}", if i == 4 { 20 } else { i })).collect();
        props.extend(rest.iter().map(String::as_str));
        let buf = header(&props, 0);
        match read_ply(&buf[..]) {
            Err(CliError::MissingProperty(p)) => assert_eq!(p, "f_rest_4"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ascii_is_rejected() {
        let buf = b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n";
        assert!(matches!(read_ply(&buf[..]), Err(CliError::UnsupportedEncoding(e)) if e == "ascii"));
    }

    #[test]
    fn offset_flag_round_trips() {
        let g = GaussianParams::new(Vector3::zeros(), Quat::IDENTITY, Vector3::zeros(), ShCoeffs::zeros(3), 0.0).unwrap();
        for flag in [None, Some(true), Some(false)] {
            let mut out = Vec::new();
            write_ply(&mut out, std::slice::from_ref(&g), flag).unwrap();
            assert_eq!(read_ply(&out[..]).unwrap().color_offset, flag);
        }
    }

    #[test]
    fn double_and_extra_properties_are_read() {
        let mut h = String::from("ply\nformat binary_little_endian 1.0\nelement camera 1\nproperty uchar id\nelement vertex 1\n");
        for p in dc_only_props() {
            h.push_str(&format!("property double {p}\n"));
        }
        h.push_str("property uchar red\nend_header\n");
        let mut buf = h.into_bytes();
        buf.push(7);
        for v in [0.25f64, 0.0, 0.0, 0.1, 0.2, 0.3, 2.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0] {
            buf.extend(v.to_le_bytes());
        }
        buf.push(255);
        let g = &read_ply(&buf[..]).unwrap().gaussians[0];
        assert_eq!(g.mu.x, 0.25);
        assert_eq!(g.c.get(1, 0), 0.2);
        assert_eq!(g.q().to_array(), [0.0, 1.0, 0.0, 0.0]);
    }
}
