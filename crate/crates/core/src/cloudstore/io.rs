//! Whitespace-separated `x y z r g b [label]` text and ASCII PLY.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::cloud::PointCloud;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    PlyAscii,
    XyzrgblTsv,
}

impl FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ply_ascii" | "ply" => Ok(CloudFormat::PlyAscii),
            "xyzrgbl_tsv" | "tsv" => Ok(CloudFormat::XyzrgblTsv),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

impl CloudFormat {
    /// Guess from the file extension (`.ply`, `.tsv`/`.txt`/`.xyz`).
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("ply") => Ok(CloudFormat::PlyAscii),
            Some("tsv" | "txt" | "xyz") => Ok(CloudFormat::XyzrgblTsv),
            other => Err(Error::UnknownFormat(other.unwrap_or("").to_string())),
        }
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn num<T: FromStr>(path: &Path, line: usize, tok: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| parse_err(path, line, format!("cannot parse `{tok}`")))
}

pub fn load_cloud(path: impl AsRef<Path>, format: CloudFormat) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        CloudFormat::XyzrgblTsv => parse_tsv(path, &text),
        CloudFormat::PlyAscii => parse_ply(path, &text),
    }
}

pub fn save_cloud(path: impl AsRef<Path>, cloud: &PointCloud, format: CloudFormat) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        CloudFormat::XyzrgblTsv => format_tsv(cloud),
        CloudFormat::PlyAscii => format_ply(cloud),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_byte(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn parse_tsv(path: &Path, text: &str) -> Result<PointCloud> {
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    let mut labels = Vec::new();
    let mut labelled: Option<bool> = None;
    for (no, raw) in text.lines().enumerate() {
        let line_no = no + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let has_label = match toks.len() {
            6 => false,
            7 => true,
            n => return Err(parse_err(path, line_no, format!("expected 6 or 7 fields, found {n}"))),
        };
        if *labelled.get_or_insert(has_label) != has_label {
            return Err(parse_err(path, line_no, "label column present on some lines only"));
        }
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = num(path, line_no, toks[a])?;
        }
        let mut c = [0.0; 3];
        for a in 0..3 {
            let v: f64 = num(path, line_no, toks[3 + a])?;
            c[a] = (v / 255.0).clamp(0.0, 1.0);
        }
        positions.push(p);
        colors.push(c);
        if has_label {
            labels.push(num(path, line_no, toks[6])?);
        }
    }
    let labels = (labelled == Some(true)).then_some(labels);
    PointCloud::new(positions, colors, labels).map_err(|e| parse_err(path, 0, e.to_string()))
}

pub fn format_tsv(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 48);
    out.push_str(if cloud.has_labels() {
        "# x y z r g b label\n"
    } else {
        "# x y z r g b\n"
    });
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        let c = cloud.colors[i];
        let _ = write!(out, "{} {} {} {} {} {}", p[0], p[1], p[2], to_byte(c[0]), to_byte(c[1]), to_byte(c[2]));
        if let Some(l) = cloud.label(i) {
            let _ = write!(out, " {l}");
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Channel {
    Axis(usize),
    Color(usize, bool),
    Label,
    Ignored,
}

fn parse_ply(path: &Path, text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(parse_err(path, 1, "missing `ply` magic")),
    }
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut channels = Vec::new();
    loop {
        let Some((no, raw)) = lines.next() else {
            return Err(parse_err(path, 0, "header without end_header"));
        };
        let toks: Vec<&str> = raw.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", ..] => {}
            ["format", other, ..] => {
                return Err(parse_err(path, no + 1, format!("unsupported PLY format `{other}`")));
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertex_count = Some(num::<usize>(path, no + 1, count)?);
                }
            }
            ["property", "list", ..] => {}
            ["property", ty, name] if in_vertex => {
                let integer = matches!(*ty, "uchar" | "uint8" | "char" | "int8" | "ushort" | "uint16" | "short" | "int16" | "int" | "int32" | "uint" | "uint32");
                channels.push(match *name {
                    "x" => Channel::Axis(0),
                    "y" => Channel::Axis(1),
                    "z" => Channel::Axis(2),
                    "red" | "r" => Channel::Color(0, integer),
                    "green" | "g" => Channel::Color(1, integer),
                    "blue" | "b" => Channel::Color(2, integer),
                    "label" | "class" => Channel::Label,
                    _ => Channel::Ignored,
                });
            }
            ["property", ..] => {}
            ["end_header"] => break,
            _ => return Err(parse_err(path, no + 1, format!("unexpected header line `{raw}`"))),
        }
    }
    let count = vertex_count.ok_or_else(|| parse_err(path, 0, "no vertex element"))?;
    for a in 0..3 {
        if !channels.contains(&Channel::Axis(a)) {
            return Err(parse_err(path, 0, "vertex element lacks x/y/z"));
        }
    }
    let has_label = channels.contains(&Channel::Label);
    let mut positions = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(if has_label { count } else { 0 });
    while positions.len() < count {
        let Some((no, raw)) = lines.next() else {
            return Err(parse_err(path, 0, format!("expected {count} vertices, found {}", positions.len())));
        };
        let toks: Vec<&str> = raw.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() < channels.len() {
            return Err(parse_err(path, no + 1, format!("expected {} values, found {}", channels.len(), toks.len())));
        }
        let mut p = [0.0; 3];
        let mut c = [0.0; 3];
        for (ch, tok) in channels.iter().zip(&toks) {
            match *ch {
                Channel::Axis(a) => p[a] = num(path, no + 1, tok)?,
                Channel::Color(a, integer) => {
                    let v: f64 = num(path, no + 1, tok)?;
                    c[a] = if integer { v / 255.0 } else { v };
                }
                Channel::Label => labels.push(num::<i32>(path, no + 1, tok)?),
                Channel::Ignored => {}
            }
        }
        positions.push(p);
        colors.push(c);
    }
    PointCloud::new(positions, colors, has_label.then_some(labels)).map_err(|e| parse_err(path, 0, e.to_string()))
}

pub fn format_ply(cloud: &PointCloud) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "ply\nformat ascii 1.0\nelement vertex {}", cloud.len());
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    if cloud.has_labels() {
        out.push_str("property int label\n");
    }
    out.push_str("end_header\n");
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        let c = cloud.colors[i];
        let _ = write!(out, "{} {} {} {} {} {}", p[0], p[1], p[2], to_byte(c[0]), to_byte(c[1]), to_byte(c[2]));
        if let Some(l) = cloud.label(i) {
            let _ = write!(out, " {l}");
        }
        out.push('\n');
    }
    out
}

/// Path used when a format is implied by the file name.
pub fn load_cloud_auto(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path: PathBuf = path.as_ref().to_path_buf();
    let format = CloudFormat::from_path(&path)?;
    load_cloud(&path, format)
}
