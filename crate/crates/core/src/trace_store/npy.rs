//! Reading and writing the numpy `.npy` format.
//!
//! Versions 1.0, 2.0 and 3.0 of the header are read; files are written as
//! version 1.0 unless the header does not fit, in which case 2.0 is used.
//! Only C-order arrays of the basic integer, unsigned and float types are
//! supported. Fortran-order files are rejected.
//!
//! Format description: <https://numpy.org/devdocs/reference/generated/numpy.lib.format.html>

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub(crate) const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    U8,
    I8,
    U16,
    I16,
    U32,
    I32,
    U64,
    I64,
    F32,
    F64,
    Bool,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U8 | Dtype::I8 | Dtype::Bool => 1,
            Dtype::U16 | Dtype::I16 => 2,
            Dtype::U32 | Dtype::I32 | Dtype::F32 => 4,
            Dtype::U64 | Dtype::I64 | Dtype::F64 => 8,
        }
    }

    fn code(self) -> &'static str {
        match self {
            Dtype::U8 => "u1",
            Dtype::I8 => "i1",
            Dtype::U16 => "u2",
            Dtype::I16 => "i2",
            Dtype::U32 => "u4",
            Dtype::I32 => "i4",
            Dtype::U64 => "u8",
            Dtype::I64 => "i8",
            Dtype::F32 => "f4",
            Dtype::F64 => "f8",
            Dtype::Bool => "b1",
        }
    }

    fn parse(descr: &str) -> Result<(Dtype, Endian)> {
        if descr.len() < 3 {
            return Err(Error::Npy(format!("unsupported descr {descr:?}")));
        }
        let (order, code) = descr.split_at(1);
        let endian = match order {
            "<" | "|" | "=" => Endian::Little,
            ">" => Endian::Big,
            _ => return Err(Error::Npy(format!("unsupported byte order in {descr:?}"))),
        };
        let dtype = match code {
            "u1" => Dtype::U8,
            "i1" => Dtype::I8,
            "u2" => Dtype::U16,
            "i2" => Dtype::I16,
            "u4" => Dtype::U32,
            "i4" => Dtype::I32,
            "u8" => Dtype::U64,
            "i8" => Dtype::I64,
            "f4" => Dtype::F32,
            "f8" => Dtype::F64,
            "b1" => Dtype::Bool,
            _ => return Err(Error::Npy(format!("unsupported descr {descr:?}"))),
        };
        Ok((dtype, endian))
    }
}

/// Parsed `.npy` header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub dtype: Dtype,
    pub endian: Endian,
    pub fortran_order: bool,
    pub shape: Vec<usize>,
}

impl Header {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reads the magic string, version and header dictionary.
    pub fn read<R: Read>(reader: &mut R) -> Result<Header> {
        let mut preamble = [0u8; 8];
        reader
            .read_exact(&mut preamble)
            .map_err(|e| Error::Npy(format!("truncated preamble: {e}")))?;
        if &preamble[..6] != MAGIC {
            return Err(Error::Npy("missing magic string".into()));
        }
        let header_len = match preamble[6] {
            1 => {
                let mut b = [0u8; 2];
                reader
                    .read_exact(&mut b)
                    .map_err(|e| Error::Npy(format!("truncated header length: {e}")))?;
                u16::from_le_bytes(b) as usize
            }
            2 | 3 => {
                let mut b = [0u8; 4];
                reader
                    .read_exact(&mut b)
                    .map_err(|e| Error::Npy(format!("truncated header length: {e}")))?;
                u32::from_le_bytes(b) as usize
            }
            v => return Err(Error::Npy(format!("unsupported format version {v}"))),
        };
        let mut dict = vec![0u8; header_len];
        reader
            .read_exact(&mut dict)
            .map_err(|e| Error::Npy(format!("truncated header: {e}")))?;
        let dict = String::from_utf8(dict).map_err(|_| Error::Npy("header is not utf-8".into()))?;
        parse_dict(&dict)
    }

    fn dict_string(&self) -> String {
        let order = match self.endian {
            Endian::Little if self.dtype.size() == 1 => '|',
            Endian::Little => '<',
            Endian::Big => '>',
        };
        let shape = match self.shape.len() {
            1 => format!("({},)", self.shape[0]),
            _ => format!(
                "({})",
                self.shape
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        };
        format!(
            "{{'descr': '{}{}', 'fortran_order': {}, 'shape': {}, }}",
            order,
            self.dtype.code(),
            if self.fortran_order { "True" } else { "False" },
            shape
        )
    }

    pub fn write<W: Write>(&self, writer: &mut W) -> std::io::Result<()> {
        let dict = self.dict_string();
        // preamble (magic + version + length) is 10 bytes for v1, 12 for v2
        let (version, prefix) = if dict.len() + 11 <= u16::MAX as usize {
            (1u8, 10usize)
        } else {
            (2u8, 12usize)
        };
        let total = (prefix + dict.len() + 1).div_ceil(ALIGN) * ALIGN;
        let pad = total - prefix - dict.len() - 1;
        let mut header = dict.into_bytes();
        header.extend(std::iter::repeat_n(b' ', pad));
        header.push(b'\n');

        writer.write_all(MAGIC)?;
        writer.write_all(&[version, 0])?;
        if version == 1 {
            writer.write_all(&(header.len() as u16).to_le_bytes())?;
        } else {
            writer.write_all(&(header.len() as u32).to_le_bytes())?;
        }
        writer.write_all(&header)
    }
}

/// Minimal parser for the python dict literal found in npy headers.
fn parse_dict(text: &str) -> Result<Header> {
    let mut p = Parser {
        s: text.trim().as_bytes(),
        pos: 0,
    };
    p.expect(b'{')?;
    let mut descr = None;
    let mut fortran = None;
    let mut shape = None;
    loop {
        p.skip_ws();
        if p.eat(b'}') {
            break;
        }
        let key = p.string()?;
        p.skip_ws();
        p.expect(b':')?;
        p.skip_ws();
        match key.as_str() {
            "descr" => descr = Some(p.string()?),
            "fortran_order" => fortran = Some(p.boolean()?),
            "shape" => shape = Some(p.tuple()?),
            other => return Err(Error::Npy(format!("unexpected header key {other:?}"))),
        }
        p.skip_ws();
        if !p.eat(b',') {
            p.skip_ws();
            p.expect(b'}')?;
            break;
        }
    }
    let descr = descr.ok_or_else(|| Error::Npy("header missing 'descr'".into()))?;
    let (dtype, endian) = Dtype::parse(&descr)?;
    Ok(Header {
        dtype,
        endian,
        fortran_order: fortran.ok_or_else(|| Error::Npy("header missing 'fortran_order'".into()))?,
        shape: shape.ok_or_else(|| Error::Npy("header missing 'shape'".into()))?,
    })
}

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.s.get(self.pos) == Some(&c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(Error::Npy(format!(
                "expected {:?} at header offset {}",
                c as char, self.pos
            )))
        }
    }

    fn string(&mut self) -> Result<String> {
        let quote = match self.s.get(self.pos) {
            Some(&q @ (b'\'' | b'"')) => q,
            _ => return Err(Error::Npy(format!("expected string at offset {}", self.pos))),
        };
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos == self.s.len() {
            return Err(Error::Npy("unterminated string in header".into()));
        }
        let out = String::from_utf8_lossy(&self.s[start..self.pos]).into_owned();
        self.pos += 1;
        Ok(out)
    }

    fn boolean(&mut self) -> Result<bool> {
        let rest = &self.s[self.pos..];
        if rest.starts_with(b"True") {
            self.pos += 4;
            Ok(true)
        } else if rest.starts_with(b"False") {
            self.pos += 5;
            Ok(false)
        } else {
            Err(Error::Npy(format!("expected boolean at offset {}", self.pos)))
        }
    }

    fn tuple(&mut self) -> Result<Vec<usize>> {
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            self.skip_ws();
            if self.eat(b')') {
                return Ok(dims);
            }
            let start = self.pos;
            while self.pos < self.s.len() && self.s[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            // python 2 era files may carry an `L` suffix
            let digits = std::str::from_utf8(&self.s[start..self.pos]).unwrap_or("");
            let dim = digits
                .parse::<usize>()
                .map_err(|_| Error::Npy(format!("bad shape entry at offset {start}")))?;
            self.eat(b'L');
            dims.push(dim);
            self.skip_ws();
            if !self.eat(b',') {
                self.skip_ws();
                self.expect(b')')?;
                return Ok(dims);
            }
        }
    }
}

/// Array payload decoded from an `.npy` stream.
#[derive(Debug, Clone, PartialEq)]
pub enum NpyData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

/// A decoded `.npy` array: shape plus row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: NpyData,
}

macro_rules! decode {
    ($bytes:expr, $endian:expr, $t:ty, $n:expr) => {{
        $bytes
            .chunks_exact($n)
            .map(|c| {
                let arr: [u8; $n] = c.try_into().unwrap();
                match $endian {
                    Endian::Little => <$t>::from_le_bytes(arr),
                    Endian::Big => <$t>::from_be_bytes(arr),
                }
            })
            .collect::<Vec<$t>>()
    }};
}

impl NpyArray {
    /// Decodes a whole array. Integers wider than 8 bits widen to `i64`
    /// (`u64` values above `i64::MAX` are rejected); floats keep their width.
    pub fn read<R: Read>(reader: &mut R) -> Result<NpyArray> {
        let header = Header::read(reader)?;
        if header.fortran_order {
            return Err(Error::Npy("fortran-order arrays are not supported".into()));
        }
        let n = header.len();
        let mut bytes = vec![0u8; n * header.dtype.size()];
        reader
            .read_exact(&mut bytes)
            .map_err(|e| Error::Npy(format!("payload shorter than shape {:?}: {e}", header.shape)))?;
        let e = header.endian;
        let data = match header.dtype {
            Dtype::F32 => NpyData::F32(decode!(bytes, e, f32, 4)),
            Dtype::F64 => NpyData::F64(decode!(bytes, e, f64, 8)),
            Dtype::U8 | Dtype::Bool => NpyData::U8(bytes),
            Dtype::I8 => NpyData::I64(bytes.iter().map(|&b| b as i8 as i64).collect()),
            Dtype::U16 => NpyData::I64(decode!(bytes, e, u16, 2).into_iter().map(i64::from).collect()),
            Dtype::I16 => NpyData::I64(decode!(bytes, e, i16, 2).into_iter().map(i64::from).collect()),
            Dtype::U32 => NpyData::I64(decode!(bytes, e, u32, 4).into_iter().map(i64::from).collect()),
            Dtype::I32 => NpyData::I64(decode!(bytes, e, i32, 4).into_iter().map(i64::from).collect()),
            Dtype::I64 => NpyData::I64(decode!(bytes, e, i64, 8)),
            Dtype::U64 => NpyData::I64(
                decode!(bytes, e, u64, 8)
                    .into_iter()
                    .map(|v| i64::try_from(v).map_err(|_| Error::Npy(format!("u64 value {v} overflows i64"))))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        Ok(NpyArray {
            shape: header.shape,
            data,
        })
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            NpyData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            NpyData::F64(v) => v.clone(),
            NpyData::I64(v) => v.iter().map(|&x| x as f64).collect(),
            NpyData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn to_i64(&self) -> Result<Vec<i64>> {
        match &self.data {
            NpyData::I64(v) => Ok(v.clone()),
            NpyData::U8(v) => Ok(v.iter().map(|&x| x as i64).collect()),
            NpyData::F32(_) | NpyData::F64(_) => {
                Err(Error::Npy("expected an integer array, found floats".into()))
            }
        }
    }
}

/// Writes `values` (row-major, `shape`) as a little-endian `<f4` array.
pub fn write_f32<W: Write>(writer: &mut W, shape: &[usize], values: &[f32]) -> std::io::Result<()> {
    debug_assert_eq!(shape.iter().product::<usize>(), values.len());
    Header {
        dtype: Dtype::F32,
        endian: Endian::Little,
        fortran_order: false,
        shape: shape.to_vec(),
    }
    .write(writer)?;
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    writer.write_all(&buf)
}

/// Writes `values` (row-major, `shape`) as a little-endian `<f8` array.
pub fn write_f64<W: Write>(writer: &mut W, shape: &[usize], values: &[f64]) -> std::io::Result<()> {
    debug_assert_eq!(shape.iter().product::<usize>(), values.len());
    Header {
        dtype: Dtype::F64,
        endian: Endian::Little,
        fortran_order: false,
        shape: shape.to_vec(),
    }
    .write(writer)?;
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    writer.write_all(&buf)
}

/// Writes `values` (row-major, `shape`) as a little-endian `<i8` array.
pub fn write_i64<W: Write>(writer: &mut W, shape: &[usize], values: &[i64]) -> std::io::Result<()> {
    Header {
        dtype: Dtype::I64,
        endian: Endian::Little,
        fortran_order: false,
        shape: shape.to_vec(),
    }
    .write(writer)?;
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    writer.write_all(&buf)
}

/// Writes `values` (row-major, `shape`) as a `|u1` array.
pub fn write_u8<W: Write>(writer: &mut W, shape: &[usize], values: &[u8]) -> std::io::Result<()> {
    Header {
        dtype: Dtype::U8,
        endian: Endian::Little,
        fortran_order: false,
        shape: shape.to_vec(),
    }
    .write(writer)?;
    writer.write_all(values)
}
