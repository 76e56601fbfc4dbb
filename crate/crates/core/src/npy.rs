//! NPY v1.0 reader/writer, restricted to little-endian C-order `<f8` and
//! `<i8` arrays of rank 1 or 2.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{FeatureMatrix, LabelMap, Matrix, ProbMatrix};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub enum NpyData {
    F64(Vec<f64>),
    I64(Vec<i64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: NpyData,
}

impl NpyArray {
    pub fn from_matrix(m: &Matrix) -> Self {
        NpyArray {
            shape: vec![m.rows(), m.cols()],
            data: NpyData::F64(m.as_slice().to_vec()),
        }
    }

    pub fn from_labels(l: &LabelMap) -> Self {
        NpyArray {
            shape: vec![l.len()],
            data: NpyData::I64(l.raw().to_vec()),
        }
    }

    /// Rank-1 arrays become a single column.
    pub fn into_matrix(self) -> Result<Matrix> {
        let (rows, cols) = match self.shape[..] {
            [n] => (n, 1),
            [r, c] => (r, c),
            _ => unreachable!("rank checked at parse time"),
        };
        match self.data {
            NpyData::F64(v) => Matrix::new(rows, cols, v),
            NpyData::I64(_) => Err(Error::Unsupported("expected <f8 data, found <i8".into())),
        }
    }

    pub fn into_labels(self, classes: usize) -> Result<LabelMap> {
        if self.shape.len() != 1 && !(self.shape.len() == 2 && self.shape[1] == 1) {
            return Err(Error::Unsupported(format!(
                "label array must be rank 1, got shape {:?}",
                self.shape
            )));
        }
        match self.data {
            NpyData::I64(v) => LabelMap::new(v, classes),
            NpyData::F64(_) => Err(Error::Unsupported("expected <i8 labels, found <f8".into())),
        }
    }
}

pub fn encode(arr: &NpyArray) -> Result<Vec<u8>> {
    let count: usize = arr.shape.iter().product();
    let (descr, len) = match &arr.data {
        NpyData::F64(v) => ("<f8", v.len()),
        NpyData::I64(v) => ("<i8", v.len()),
    };
    if !(1..=2).contains(&arr.shape.len()) {
        return Err(Error::Unsupported(format!("rank {} arrays", arr.shape.len())));
    }
    if len != count {
        return Err(Error::Dimension(format!(
            "shape {:?} holds {count} values, data has {len}",
            arr.shape
        )));
    }
    if let NpyData::F64(v) = &arr.data {
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            let cols = arr.shape.get(1).copied().unwrap_or(1).max(1);
            return Err(Error::Validation {
                row: i / cols,
                reason: "non-finite value".into(),
            });
        }
    }
    let shape = match arr.shape[..] {
        [n] => format!("({n},)"),
        [r, c] => format!("({r}, {c})"),
        _ => unreachable!(),
    };
    let mut header =
        format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape}, }}");
    // magic(6) + version(2) + header_len(2) + header + '\n'
    let unpadded = 10 + header.len() + 1;
    let total = unpadded.div_ceil(ALIGN) * ALIGN;
    header.push_str(&" ".repeat(total - unpadded));
    header.push('\n');

    let mut out = Vec::with_capacity(total + 8 * count);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    match &arr.data {
        NpyData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        NpyData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<NpyArray> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::Format("missing \\x93NUMPY magic".into()));
    }
    if bytes[6..8] != [1, 0] {
        return Err(Error::Unsupported(format!(
            "npy version {}.{}",
            bytes[6], bytes[7]
        )));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let body = 10 + hlen;
    if bytes.len() < body {
        return Err(Error::Format("truncated header".into()));
    }
    let header = std::str::from_utf8(&bytes[10..body])
        .map_err(|_| Error::Format("header is not ASCII".into()))?;
    let dict = header.trim();
    let dict = dict
        .strip_prefix('{')
        .and_then(|d| d.strip_suffix('}'))
        .ok_or_else(|| Error::Format(format!("header is not a dict: {dict:?}")))?;

    let descr = dict_value(dict, "descr")?;
    let descr = descr.trim_matches(|c| c == '\'' || c == '"');
    let fortran = dict_value(dict, "fortran_order")?;
    let shape = parse_shape(dict_value(dict, "shape")?)?;

    match fortran {
        "False" => {}
        "True" => return Err(Error::Unsupported("fortran_order arrays".into())),
        other => return Err(Error::Format(format!("fortran_order = {other}"))),
    }
    if !(1..=2).contains(&shape.len()) {
        return Err(Error::Unsupported(format!("rank {} arrays", shape.len())));
    }
    let count: usize = shape.iter().product();
    let payload = &bytes[body..];
    if payload.len() != count * 8 {
        return Err(Error::Format(format!(
            "expected {} data bytes for shape {shape:?}, found {}",
            count * 8,
            payload.len()
        )));
    }
    let words = payload.chunks_exact(8).map(|c| {
        let mut b = [0u8; 8];
        b.copy_from_slice(c);
        b
    });
    let data = match descr {
        "<f8" => NpyData::F64(words.map(f64::from_le_bytes).collect()),
        "<i8" => NpyData::I64(words.map(i64::from_le_bytes).collect()),
        other => return Err(Error::Unsupported(format!("dtype {other}"))),
    };
    Ok(NpyArray { shape, data })
}

/// Value text for `key` in a python-literal dict body. Values here never
/// contain a top-level comma except inside the shape tuple.
fn dict_value<'a>(dict: &'a str, key: &str) -> Result<&'a str> {
    let quoted = [format!("'{key}'"), format!("\"{key}\"")];
    let start = quoted
        .iter()
        .find_map(|q| dict.find(q.as_str()).map(|p| p + q.len()))
        .ok_or_else(|| Error::Format(format!("header lacks '{key}'")))?;
    let rest = dict[start..].trim_start();
    let rest = rest
        .strip_prefix(':')
        .ok_or_else(|| Error::Format(format!("no ':' after '{key}'")))?
        .trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')').map(|p| p + 1)
    } else {
        rest.find(',').or(Some(rest.len()))
    }
    .ok_or_else(|| Error::Format(format!("unterminated value for '{key}'")))?;
    Ok(rest[..end].trim())
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    let inner = s
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| Error::Format(format!("bad shape {s}")))?;
    inner
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad shape entry {t:?}")))
        })
        .collect()
}

pub fn read(path: impl AsRef<Path>) -> Result<NpyArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write(path: impl AsRef<Path>, arr: &NpyArray) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(arr)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    read(path)?.into_matrix()
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    FeatureMatrix::new(load_matrix(path)?)
}

pub fn load_probs(path: impl AsRef<Path>) -> Result<ProbMatrix> {
    ProbMatrix::new(load_matrix(path)?)
}

pub fn load_labels(path: impl AsRef<Path>, classes: usize) -> Result<LabelMap> {
    read(path)?.into_labels(classes)
}

pub fn save_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    write(path, &NpyArray::from_matrix(m))
}

pub fn save_labels(path: impl AsRef<Path>, l: &LabelMap) -> Result<()> {
    write(path, &NpyArray::from_labels(l))
}
