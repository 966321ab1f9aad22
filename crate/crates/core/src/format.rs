//! Packed storage for 2:4 and paired 4:8 sparse matrices.
//!
//! A packed matrix holds two sections: the kept values in row-major group
//! order, then a 2-bit metadata stream.
//!
//! * FP16 / INT8 (2:4): every group of four columns stores two values and
//!   two metadata entries giving their column within the group, strictly
//!   increasing.
//! * INT4 (paired 4:8): every group of eight columns stores four values
//!   (two two-wide sub-chunks) and two metadata entries giving the sub-chunk
//!   indices, strictly increasing.
//!
//! Byte conventions: FP16 values are IEEE half precision, little-endian,
//! rounded to nearest even. INT8 values are two's complement bytes. INT4
//! values are two's complement nibbles, two per byte, low nibble first.
//! Metadata entries are packed LSB-first; only the final byte may carry
//! zero padding.

use std::fmt;

use half::f16;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::codec::{read_crumb, BitWriter, PutLe, Reader};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::quant::{BitWidth, QuantParams};
use crate::sparsity::{validate_mask, SparsityMask, SparsityPattern};

/// Element format of the stored non-zeros.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ElementFormat {
    Fp16,
    Int8,
    Int4,
}

impl ElementFormat {
    pub fn bits(self) -> u64 {
        match self {
            ElementFormat::Fp16 => 16,
            ElementFormat::Int8 => 8,
            ElementFormat::Int4 => 4,
        }
    }

    /// Sparsity pattern the hardware requires for this format.
    pub fn pattern(self) -> SparsityPattern {
        match self {
            ElementFormat::Fp16 | ElementFormat::Int8 => SparsityPattern::TwoOfFour,
            ElementFormat::Int4 => SparsityPattern::PairedFourOfEight,
        }
    }

    pub fn bit_width(self) -> Option<BitWidth> {
        match self {
            ElementFormat::Fp16 => None,
            ElementFormat::Int8 => Some(BitWidth::Int8),
            ElementFormat::Int4 => Some(BitWidth::Int4),
        }
    }

    pub fn from_bit_width(bits: BitWidth) -> Self {
        match bits {
            BitWidth::Int8 => ElementFormat::Int8,
            BitWidth::Int4 => ElementFormat::Int4,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            ElementFormat::Fp16 => 0,
            ElementFormat::Int8 => 1,
            ElementFormat::Int4 => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ElementFormat::Fp16),
            1 => Some(ElementFormat::Int8),
            2 => Some(ElementFormat::Int4),
            _ => None,
        }
    }
}

impl fmt::Display for ElementFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ElementFormat::Fp16 => "FP16",
            ElementFormat::Int8 => "INT8",
            ElementFormat::Int4 => "INT4",
        })
    }
}

/// Bits used to store a `rows x cols` matrix, dense or packed.
pub fn storage_bits(rows: u64, cols: u64, fmt: ElementFormat, packed: bool) -> u64 {
    let elems = rows * cols;
    if !packed {
        return fmt.bits() * elems;
    }
    let kept = elems / 2;
    let metadata = match fmt {
        ElementFormat::Fp16 | ElementFormat::Int8 => kept * 2,
        ElementFormat::Int4 => (elems / 8) * 2 * 2,
    };
    kept * fmt.bits() + metadata
}

/// Fraction of storage saved by packing, as an exact ratio.
pub fn storage_saving(rows: u64, cols: u64, fmt: ElementFormat) -> Ratio<u64> {
    let dense = storage_bits(rows, cols, fmt, false);
    let packed = storage_bits(rows, cols, fmt, true);
    Ratio::new(dense - packed, dense)
}

/// Size reduction of one packed group relative to the same group in dense
/// FP32.
pub fn compression_ratio(fmt: ElementFormat) -> Ratio<u64> {
    let group = fmt.pattern().group() as u64;
    Ratio::new(32 * group, storage_bits(1, group, fmt, true))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackedSparseMatrix {
    rows: usize,
    cols: usize,
    fmt: ElementFormat,
    values: Vec<u8>,
    metadata: Vec<u8>,
    quant: Option<QuantParams>,
}

impl PackedSparseMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Logical (unpacked) column count `K`.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn format(&self) -> ElementFormat {
        self.fmt
    }

    pub fn pattern(&self) -> SparsityPattern {
        self.fmt.pattern()
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn metadata(&self) -> &[u8] {
        &self.metadata
    }

    pub fn quant(&self) -> Option<&QuantParams> {
        self.quant.as_ref()
    }

    /// Number of stored non-zero values.
    pub fn nnz(&self) -> usize {
        self.rows * self.cols / 2
    }

    fn metadata_entries(&self) -> usize {
        match self.fmt {
            ElementFormat::Fp16 | ElementFormat::Int8 => self.nnz(),
            ElementFormat::Int4 => self.nnz() / 2,
        }
    }

    /// Stored values per row.
    fn row_nnz(&self) -> usize {
        self.cols / 2
    }

    #[inline]
    fn scale_for_row(&self, r: usize) -> f32 {
        self.quant.as_ref().map_or(1.0, |q| q.scale_for_row(r))
    }

    /// Integer code of the `v`-th stored value (integer formats only).
    #[inline]
    fn code(&self, v: usize) -> i32 {
        match self.fmt {
            ElementFormat::Int8 => self.values[v] as i8 as i32,
            ElementFormat::Int4 => {
                let byte = self.values[v / 2];
                let nib = if v.is_multiple_of(2) { byte & 0x0f } else { byte >> 4 };
                ((nib << 4) as i8 >> 4) as i32
            }
            ElementFormat::Fp16 => unreachable!("fp16 has no integer codes"),
        }
    }

    #[inline]
    fn value(&self, v: usize, row: usize) -> f32 {
        match self.fmt {
            ElementFormat::Fp16 => {
                f16::from_le_bytes([self.values[2 * v], self.values[2 * v + 1]]).to_f32()
            }
            _ => self.code(v) as f32 * self.scale_for_row(row),
        }
    }

    /// Calls `f(column, stored_index)` for every stored element of row `r`
    /// in ascending column order.
    #[inline]
    pub(crate) fn for_each_in_row(&self, r: usize, mut f: impl FnMut(usize, usize)) {
        let base = r * self.row_nnz();
        match self.fmt {
            ElementFormat::Fp16 | ElementFormat::Int8 => {
                for j in 0..self.row_nnz() {
                    let v = base + j;
                    let col = (j / 2) * 4 + read_crumb(&self.metadata, v) as usize;
                    f(col, v);
                }
            }
            ElementFormat::Int4 => {
                for j in 0..self.row_nnz() / 2 {
                    let e = base / 2 + j;
                    let col = (j / 2) * 8 + 2 * read_crumb(&self.metadata, e) as usize;
                    let v = base + 2 * j;
                    f(col, v);
                    f(col + 1, v + 1);
                }
            }
        }
    }

    /// Stored `(column, value)` pairs of row `r`, ascending by column.
    pub fn row_entries(&self, r: usize) -> Vec<(usize, f32)> {
        let mut out = Vec::with_capacity(self.row_nnz());
        self.for_each_in_row(r, |c, v| out.push((c, self.value(v, r))));
        out
    }

    /// Keep mask implied by the metadata. Duplicate or out-of-order indices
    /// show up as violations under [`validate_mask`](crate::sparsity::validate_mask).
    pub fn mask(&self) -> Result<SparsityMask> {
        let mut bits = vec![false; self.rows * self.cols];
        for r in 0..self.rows {
            self.for_each_in_row(r, |c, _| {
                if c < self.cols {
                    bits[r * self.cols + c] = true;
                }
            });
        }
        SparsityMask::from_bits(self.rows, self.cols, bits, self.pattern())
    }

    /// Stored `(column, code)` pairs of row `r` for integer formats.
    pub fn row_codes(&self, r: usize) -> Result<Vec<(usize, i32)>> {
        if self.fmt == ElementFormat::Fp16 {
            return Err(Error::config("fp16 matrices carry no integer codes"));
        }
        let mut out = Vec::with_capacity(self.row_nnz());
        self.for_each_in_row(r, |c, v| out.push((c, self.code(v))));
        Ok(out)
    }

    /// Checks metadata ordering and value finiteness.
    pub fn check(&self) -> Result<()> {
        let meta_bytes = (self.metadata_entries() * 2).div_ceil(8);
        if self.metadata.len() != meta_bytes {
            return Err(Error::format(
                0,
                format!("metadata is {} bytes, expected {meta_bytes}", self.metadata.len()),
            ));
        }
        let value_bytes = (self.nnz() * self.fmt.bits() as usize).div_ceil(8);
        if self.values.len() != value_bytes {
            return Err(Error::format(
                0,
                format!("values are {} bytes, expected {value_bytes}", self.values.len()),
            ));
        }
        for e in (0..self.metadata_entries()).step_by(2) {
            let a = read_crumb(&self.metadata, e);
            let b = read_crumb(&self.metadata, e + 1);
            if a >= b {
                return Err(Error::format(
                    e / 4,
                    format!("metadata entries {a},{b} at group {} are not increasing", e / 2),
                ));
            }
        }
        if self.fmt == ElementFormat::Fp16 {
            for v in 0..self.nnz() {
                if !self.value(v, 0).is_finite() {
                    return Err(Error::format(2 * v, "non-finite fp16 value"));
                }
            }
        }
        if self.fmt == ElementFormat::Int4 {
            // -8 is outside the symmetric code range.
            for v in 0..self.nnz() {
                if self.code(v) == -8 {
                    return Err(Error::format(v / 2, "int4 code -8 is not a valid symmetric code"));
                }
            }
        }
        if self.fmt == ElementFormat::Int8 && self.values.iter().any(|&b| b as i8 == i8::MIN) {
            return Err(Error::format(0, "int8 code -128 is not a valid symmetric code"));
        }
        Ok(())
    }
}

fn encode_code(
    x: f32,
    scale: f32,
    qmax: i32,
    at: (usize, usize),
) -> Result<i32> {
    let n = (x / scale).round_ties_even();
    if n.abs() > qmax as f32 || n * scale != x {
        return Err(Error::Range(format!(
            "value {x} at ({}, {}) is not an integer multiple of scale {scale} within ±{qmax}",
            at.0, at.1
        )));
    }
    Ok(n as i32)
}

/// Packs the kept entries of `w` selected by `mask`.
///
/// Integer formats need `w` to lie exactly on the quantization grid of
/// `quant` (one scale per tensor or per row); `None` means scale 1.
pub fn pack(
    w: &Matrix,
    mask: &SparsityMask,
    fmt: ElementFormat,
    quant: Option<&QuantParams>,
) -> Result<PackedSparseMatrix> {
    if w.shape() != (mask.rows(), mask.cols()) {
        return Err(Error::shape(format!(
            "mask {}x{} does not match matrix {}x{}",
            mask.rows(),
            mask.cols(),
            w.rows(),
            w.cols()
        )));
    }
    if mask.pattern() != fmt.pattern() {
        return Err(Error::Pattern(format!(
            "{fmt} needs a {:?} mask, got {:?}",
            fmt.pattern(),
            mask.pattern()
        )));
    }
    let report = validate_mask(mask);
    if !report.is_legal() {
        return Err(Error::Pattern(format!(
            "mask has {} illegal groups (first {:?})",
            report.violations.len(),
            report.violations.first()
        )));
    }
    let quant = match (fmt.bit_width(), quant) {
        (None, _) => None,
        (Some(bits), Some(q)) => {
            if q.bits != bits {
                return Err(Error::config(format!("{fmt} matrix given {:?} scales", q.bits)));
            }
            if q.scales.len() != 1 && q.scales.len() != w.rows() {
                return Err(Error::shape(format!(
                    "{} scales for {} rows",
                    q.scales.len(),
                    w.rows()
                )));
            }
            Some(q.clone())
        }
        (Some(bits), None) => Some(QuantParams::per_tensor(bits, 1.0)?),
    };

    let group = fmt.pattern().group();
    let mut values = Vec::with_capacity(w.len() / 2 * fmt.bits() as usize / 8 + 1);
    let mut nibbles: Vec<u8> = Vec::new();
    let mut meta = BitWriter::default();
    for r in 0..w.rows() {
        let scale = quant.as_ref().map_or(1.0, |q| q.scale_for_row(r));
        let qmax = quant.as_ref().map_or(0, |q| q.qmax());
        for g in 0..w.cols() / group {
            let base = g * group;
            match fmt {
                ElementFormat::Fp16 | ElementFormat::Int8 => {
                    for i in 0..4 {
                        if !mask.keep(r, base + i) {
                            continue;
                        }
                        let x = w.get(r, base + i);
                        meta.push(i as u8, 2);
                        if fmt == ElementFormat::Fp16 {
                            let h = f16::from_f32(x);
                            if !h.is_finite() {
                                return Err(Error::Range(format!(
                                    "value {x} at ({r}, {}) overflows fp16",
                                    base + i
                                )));
                            }
                            values.extend_from_slice(&h.to_le_bytes());
                        } else {
                            values.push(encode_code(x, scale, qmax, (r, base + i))? as i8 as u8);
                        }
                    }
                }
                ElementFormat::Int4 => {
                    for s in 0..4 {
                        if !mask.keep(r, base + 2 * s) {
                            continue;
                        }
                        meta.push(s as u8, 2);
                        for c in [base + 2 * s, base + 2 * s + 1] {
                            let code = encode_code(w.get(r, c), scale, qmax, (r, c))?;
                            nibbles.push((code as u8) & 0x0f);
                        }
                    }
                }
            }
        }
    }
    if fmt == ElementFormat::Int4 {
        values = nibbles
            .chunks(2)
            .map(|p| p[0] | p.get(1).map_or(0, |hi| hi << 4))
            .collect();
    }
    Ok(PackedSparseMatrix {
        rows: w.rows(),
        cols: w.cols(),
        fmt,
        values,
        metadata: meta.into_bytes(),
        quant,
    })
}

/// Expands a packed matrix back to dense, zeros in dropped positions.
pub fn unpack(p: &PackedSparseMatrix) -> Result<Matrix> {
    p.check()?;
    let mut out = Matrix::zeros(p.rows, p.cols);
    for r in 0..p.rows {
        for (c, v) in p.row_entries(r) {
            out.set(r, c, v);
        }
    }
    Ok(out)
}

const SPQZ_MAGIC: &[u8; 4] = b"SPQZ";
pub const SPQZ_VERSION: u8 = 1;

impl PackedSparseMatrix {
    /// Serializes to the SPQZ container (see `docs/formats.md`).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.values.len() + self.metadata.len());
        out.extend_from_slice(SPQZ_MAGIC);
        out.put_u8(SPQZ_VERSION);
        out.put_u8(self.fmt.code());
        out.put_u8(self.fmt.pattern().code());
        out.put_u8(self.quant.is_some() as u8);
        out.put_u32(self.rows as u32);
        out.put_u32(self.cols as u32);
        if let Some(q) = &self.quant {
            out.put_u32(q.scales.len() as u32);
            for &s in &q.scales {
                out.put_f32(s);
            }
        }
        out.put_u32(self.values.len() as u32);
        out.extend_from_slice(&self.values);
        out.put_u32(self.metadata.len() as u32);
        out.extend_from_slice(&self.metadata);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut rd = Reader::new(buf);
        if rd.bytes(4, "magic")? != SPQZ_MAGIC {
            return Err(Error::format(0, "bad magic, expected SPQZ"));
        }
        let version = rd.u8("version")?;
        if version != SPQZ_VERSION {
            return Err(Error::Version {
                found: version,
                supported: SPQZ_VERSION,
            });
        }
        let at = rd.pos();
        let fmt = ElementFormat::from_code(rd.u8("format")?)
            .ok_or_else(|| Error::format(at, "unknown element format"))?;
        let at = rd.pos();
        let pattern = SparsityPattern::from_code(rd.u8("pattern")?)
            .ok_or_else(|| Error::format(at, "unknown sparsity pattern"))?;
        if pattern != fmt.pattern() {
            return Err(Error::format(at, format!("{fmt} cannot use {pattern:?}")));
        }
        let at = rd.pos();
        let has_quant = match rd.u8("quant flag")? {
            0 => false,
            1 => true,
            _ => return Err(Error::format(at, "quant flag must be 0 or 1")),
        };
        let rows = rd.u32_le("rows")? as usize;
        let at = rd.pos();
        let cols = rd.u32_le("cols")? as usize;
        if !cols.is_multiple_of(pattern.group()) {
            return Err(Error::format(at, format!("{cols} columns not divisible by {}", pattern.group())));
        }
        let quant = if has_quant {
            let bits = fmt
                .bit_width()
                .ok_or_else(|| Error::format(at, "fp16 matrix with quant scales"))?;
            let at = rd.pos();
            let n = rd.u32_le("scale count")? as usize;
            if n != 1 && n != rows {
                return Err(Error::format(at, format!("{n} scales for {rows} rows")));
            }
            let scales = rd.f32_vec(n, "scales")?;
            Some(QuantParams::new(bits, scales).map_err(|e| Error::format(at, e.to_string()))?)
        } else {
            None
        };
        let nnz = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::format(at, "dimension overflow"))?
            / 2;
        let at = rd.pos();
        let vlen = rd.u32_le("values length")? as usize;
        if vlen != (nnz * fmt.bits() as usize).div_ceil(8) {
            return Err(Error::format(at, format!("values section of {vlen} bytes does not fit {rows}x{cols}")));
        }
        let values = rd.bytes(vlen, "values")?.to_vec();
        let at = rd.pos();
        let mlen = rd.u32_le("metadata length")? as usize;
        let entries = match fmt {
            ElementFormat::Int4 => nnz / 2,
            _ => nnz,
        };
        if mlen != (entries * 2).div_ceil(8) {
            return Err(Error::format(at, format!("metadata section of {mlen} bytes does not fit {rows}x{cols}")));
        }
        let metadata = rd.bytes(mlen, "metadata")?.to_vec();
        rd.finish()?;
        let p = PackedSparseMatrix {
            rows,
            cols,
            fmt,
            values,
            metadata,
            quant,
        };
        let meta_start = rd.pos() - mlen;
        p.check().map_err(|e| match e {
            Error::Format { offset, msg } => Error::Format {
                offset: meta_start + offset,
                msg,
            },
            other => other,
        })?;
        Ok(p)
    }
}
