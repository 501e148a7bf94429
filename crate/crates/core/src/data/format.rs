//! Binary containers.
//!
//! Slide files (`FST1`):
//!
//! ```text
//! magic      4 bytes   "FST1"
//! version    u32 LE    1
//! hdr_len    u32 LE    byte length of the JSON header
//! header     UTF-8 JSON {slide_id, n_orig, n_pseudo, d, G, gene_names}
//! grid       f64 LE    n_total × 2, row-major
//! phys       f64 LE    n_total × 2
//! features   f64 LE    n_total × d
//! targets    f64 LE    n_orig × G
//! ```
//!
//! Checkpoints (`FSTW`) use the same framing with a header
//! `{model_config, tensors: [{name, kind, rows, cols}]}` followed by every
//! tensor's f64 LE payload in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SlideRecord;
use crate::error::{Error, Result};
use crate::geometry::{Point, SpotCoords};
use crate::model::{param_layout, FeastModel, ModelConfig, ParamSpec};
use crate::numerics::Matrix;

pub const SLIDE_MAGIC: &[u8; 4] = b"FST1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FSTW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SlideHeader {
    slide_id: String,
    n_orig: usize,
    n_pseudo: usize,
    d: usize,
    #[serde(rename = "G")]
    n_genes: usize,
    gene_names: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    model_config: ModelConfig,
    tensors: Vec<ParamSpec>,
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

fn frame(magic: &[u8; 4], header: &[u8], payload_len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + header.len() + payload_len);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out
}

fn put_f64s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Reader over a byte buffer that reports absolute offsets on failure.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format_err(
                self.bytes.len(),
                format!(
                    "truncated {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(count * 8, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Checks magic and version, then returns the raw header and a cursor
/// positioned at the payload.
fn open_frame<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<(&'a [u8], Cursor<'a>)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let m = cur.take(4, "magic")?;
    if m != magic {
        return Err(format_err(
            0,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let len = cur.u32("header length")? as usize;
    let header = cur.take(len, "header")?;
    Ok((header, cur))
}

fn expect_payload(cur: &Cursor<'_>, count: usize) -> Result<()> {
    let need = count
        .checked_mul(8)
        .ok_or_else(|| format_err(cur.pos, "payload size overflows"))?;
    match cur.remaining().cmp(&need) {
        std::cmp::Ordering::Less => Err(format_err(
            cur.bytes.len(),
            format!(
                "truncated payload: header implies {need} bytes, {} present",
                cur.remaining()
            ),
        )),
        std::cmp::Ordering::Greater => Err(format_err(
            cur.pos + need,
            format!(
                "payload length {} disagrees with header ({need} bytes)",
                cur.remaining()
            ),
        )),
        std::cmp::Ordering::Equal => Ok(()),
    }
}

pub fn encode_slide(slide: &SlideRecord) -> Result<Vec<u8>> {
    slide.check()?;
    let header = SlideHeader {
        slide_id: slide.slide_id.clone(),
        n_orig: slide.n_orig(),
        n_pseudo: slide.n_pseudo(),
        d: slide.d(),
        n_genes: slide.n_genes(),
        gene_names: slide.gene_names.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    let payload = 8 * (slide.n_total() * 4 + slide.features.len() + slide.targets.len());
    let mut out = frame(SLIDE_MAGIC, &header, payload);
    put_f64s(&mut out, slide.coords.grid.iter().flatten().copied());
    put_f64s(&mut out, slide.coords.phys.iter().flatten().copied());
    put_f64s(&mut out, slide.features.data().iter().copied());
    put_f64s(&mut out, slide.targets.data().iter().copied());
    Ok(out)
}

fn points(flat: Vec<f64>) -> Vec<Point> {
    flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
}

/// Parses a complete slide or fails; never returns a partial record.
pub fn decode_slide(bytes: &[u8]) -> Result<SlideRecord> {
    let (header_bytes, mut cur) = open_frame(bytes, SLIDE_MAGIC)?;
    let header: SlideHeader = serde_json::from_slice(header_bytes)
        .map_err(|e| format_err(12, format!("bad header: {e}")))?;
    if header.gene_names.len() != header.n_genes {
        return Err(format_err(
            12,
            format!(
                "header lists {} gene names for G = {}",
                header.gene_names.len(),
                header.n_genes
            ),
        ));
    }
    let n_total = header
        .n_orig
        .checked_add(header.n_pseudo)
        .ok_or_else(|| format_err(12, "spot count overflows"))?;
    let sizes = [
        n_total.checked_mul(2),
        n_total.checked_mul(2),
        n_total.checked_mul(header.d),
        header.n_orig.checked_mul(header.n_genes),
    ];
    let mut total = 0usize;
    for s in sizes {
        total = s
            .and_then(|s| total.checked_add(s))
            .ok_or_else(|| format_err(12, "section size overflows"))?;
    }
    expect_payload(&cur, total)?;
    let grid = points(cur.f64s(n_total * 2, "grid")?);
    let phys = points(cur.f64s(n_total * 2, "phys")?);
    let features = Matrix::from_vec(n_total, header.d, cur.f64s(n_total * header.d, "features")?)?;
    let targets = Matrix::from_vec(
        header.n_orig,
        header.n_genes,
        cur.f64s(header.n_orig * header.n_genes, "targets")?,
    )?;
    let mut is_pseudo = vec![false; header.n_orig];
    is_pseudo.resize(n_total, true);
    let slide = SlideRecord {
        slide_id: header.slide_id,
        coords: SpotCoords::new(grid, phys, is_pseudo),
        features,
        targets,
        gene_names: header.gene_names,
    };
    slide.check()?;
    Ok(slide)
}

pub fn write_slide(slide: &SlideRecord, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_slide(slide)?)?;
    Ok(())
}

pub fn read_slide(path: impl AsRef<Path>) -> Result<SlideRecord> {
    decode_slide(&fs::read(path)?)
}

pub fn encode_checkpoint(model: &FeastModel) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        model_config: model.config.clone(),
        tensors: model.params.specs.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    let payload = 8 * model.params.count();
    let mut out = frame(CHECKPOINT_MAGIC, &header, payload);
    for t in &model.params.tensors {
        if !t.is_finite() {
            return Err(Error::Numeric(
                "refusing to save non-finite parameters".into(),
            ));
        }
        put_f64s(&mut out, t.data().iter().copied());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<FeastModel> {
    let (header_bytes, mut cur) = open_frame(bytes, CHECKPOINT_MAGIC)?;
    let header: CheckpointHeader = serde_json::from_slice(header_bytes)
        .map_err(|e| format_err(12, format!("bad header: {e}")))?;
    header
        .model_config
        .validate()
        .map_err(|e| format_err(12, e.to_string()))?;
    let (specs, _) = param_layout(&header.model_config);
    if specs != header.tensors {
        return Err(format_err(
            12,
            "tensor list does not match the model configuration",
        ));
    }
    let total: usize = specs.iter().map(|s| s.rows * s.cols).sum();
    expect_payload(&cur, total)?;
    let mut tensors = Vec::with_capacity(specs.len());
    for s in &specs {
        let data = cur.f64s(s.rows * s.cols, &s.name)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value in tensor {}",
                s.name
            )));
        }
        tensors.push(Matrix::from_vec(s.rows, s.cols, data)?);
    }
    let mut model = FeastModel::new(header.model_config)?;
    model.params.set_tensors(tensors)?;
    Ok(model)
}

pub fn write_checkpoint(model: &FeastModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<FeastModel> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy_slide;

    #[test]
    fn header_layout() {
        let bytes = encode_slide(&toy_slide(1, 4, 2)).unwrap();
        assert_eq!(&bytes[..4], b"FST1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
        assert_eq!(header["n_orig"], 8);
        assert_eq!(header["n_pseudo"], 4);
        assert_eq!(header["d"], 4);
        assert_eq!(header["G"], 2);
        assert_eq!(bytes.len(), 12 + len + 8 * (12 * 2 * 2 + 12 * 4 + 8 * 2));
        // first grid value follows the header directly
        let first = f64::from_le_bytes(bytes[12 + len..20 + len].try_into().unwrap());
        assert_eq!(first, toy_slide(1, 4, 2).coords.grid[0][0]);
    }

    #[test]
    fn round_trip() {
        let s = toy_slide(9, 5, 3);
        assert_eq!(decode_slide(&encode_slide(&s).unwrap()).unwrap(), s);
    }

    #[test]
    fn every_truncation_fails() {
        let bytes = encode_slide(&toy_slide(3, 2, 1)).unwrap();
        for cut in 0..bytes.len() {
            match decode_slide(&bytes[..cut]) {
                Err(Error::Format { .. }) => {}
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn header_d_disagreeing_with_payload() {
        let s = toy_slide(3, 4, 2);
        let mut bytes = encode_slide(&s).unwrap();
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[12..12 + len].to_vec()).unwrap();
        let patched = header.replace("\"d\":4", "\"d\":5");
        assert_eq!(patched.len(), header.len());
        bytes.splice(12..12 + len, patched.into_bytes());
        assert!(matches!(decode_slide(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_slide(&toy_slide(3, 4, 2)).unwrap();
        bytes[4] = 2;
        assert!(matches!(
            decode_slide(&bytes),
            Err(Error::Format { offset: 4, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            decode_slide(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn nan_payload_is_a_validation_error() {
        let s = toy_slide(3, 4, 2);
        let mut bytes = encode_slide(&s).unwrap();
        let n = bytes.len();
        bytes[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode_slide(&bytes), Err(Error::Validation(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_magic() {
        let model = FeastModel::new(ModelConfig::toy()).unwrap();
        let bytes = encode_checkpoint(&model).unwrap();
        assert_eq!(&bytes[..4], b"FSTW");
        assert_eq!(decode_checkpoint(&bytes).unwrap(), model);
        assert!(decode_slide(&bytes).is_err());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }
}
