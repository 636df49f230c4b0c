//! `RDA1` binary container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "RDA1" | kind u8 (0 embeddings, 1 classes) | version u8 = 1 | reserved u16 = 0
//! rows u32 | cols u32 | rows*cols f64
//! kind 0: rows × u32 label | split u8 | normalized u8
//! kind 1: rows × (u16 len, utf-8 name) | learnable u8 | normalized u8
//! crc32 of all preceding bytes, u32
//! ```

use std::fs;
use std::path::Path;

use super::codec::{ByteReader, ByteWriter};
use super::{rows_are_unit, ClassMatrix, EmbeddingBatch, SplitTag};
use crate::error::{FormatError, RadaError, Result};
use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = *b"RDA1";
pub const VERSION: u8 = 1;

const KIND_EMBEDDINGS: u8 = 0;
const KIND_CLASSES: u8 = 1;

/// Contents of one `RDA1` file.
#[derive(Clone, Debug, PartialEq)]
pub enum RdaFile {
    Embeddings(EmbeddingBatch),
    Classes(ClassMatrix),
}

pub fn encode(file: &RdaFile) -> Result<Vec<u8>> {
    let (kind, matrix) = match file {
        RdaFile::Embeddings(b) => (KIND_EMBEDDINGS, b.features()),
        RdaFile::Classes(c) => (KIND_CLASSES, c.weights()),
    };
    let (rows, cols) = (matrix.shape()[0], matrix.shape()[1]);
    if rows == 0 || cols == 0 {
        return Err(RadaError::Degenerate(format!(
            "refusing to save a {rows}×{cols} matrix"
        )));
    }
    let rows32 = u32::try_from(rows).map_err(|_| RadaError::Size(format!("{rows} rows")))?;
    let cols32 = u32::try_from(cols).map_err(|_| RadaError::Size(format!("{cols} cols")))?;

    let mut w = ByteWriter::new();
    w.bytes(&MAGIC);
    w.u8(kind);
    w.u8(VERSION);
    w.u16(0);
    w.u32(rows32);
    w.u32(cols32);
    w.f64s(matrix.data());
    match file {
        RdaFile::Embeddings(b) => {
            for &y in b.labels() {
                w.u32(u32::try_from(y).map_err(|_| RadaError::Size(format!("label {y}")))?);
            }
            w.u8(b.split().code());
            w.u8(b.is_normalized() as u8);
        }
        RdaFile::Classes(c) => {
            for name in c.names() {
                let len = u16::try_from(name.len())
                    .map_err(|_| RadaError::Size(format!("class name of {} bytes", name.len())))?;
                w.u16(len);
                w.bytes(name.as_bytes());
            }
            w.u8(c.is_learnable() as u8);
            w.u8(c.is_normalized() as u8);
        }
    }
    Ok(w.finish())
}

pub fn decode(bytes: &[u8]) -> Result<RdaFile, FormatError> {
    let mut r = ByteReader::new(bytes);
    let magic = r.magic()?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let kind = r.u8()?;
    let version = r.u8()?;
    if version != VERSION {
        return Err(FormatError::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    if kind != KIND_EMBEDDINGS && kind != KIND_CLASSES {
        return Err(FormatError::Malformed(format!("unknown kind {kind}")));
    }
    let reserved = r.u16()?;
    if reserved != 0 {
        return Err(FormatError::Malformed(format!("reserved field is {reserved}")));
    }
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    if rows == 0 || cols == 0 {
        return Err(FormatError::Malformed(format!("empty {rows}×{cols} matrix")));
    }
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| FormatError::Malformed(format!("{rows}×{cols} overflows")))?;
    let data = r.f64s(count)?;
    let matrix = Tensor::new(&[rows, cols], data).map_err(|e| FormatError::Malformed(e.to_string()))?;

    let file = if kind == KIND_EMBEDDINGS {
        let labels = (0..rows)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let split_code = r.u8()?;
        let split = SplitTag::from_code(split_code)
            .ok_or_else(|| FormatError::Malformed(format!("unknown split tag {split_code}")))?;
        let normalized = flag(r.u8()?, "normalized")?;
        r.verify_trailer()?;
        if normalized && !rows_are_unit(&matrix) {
            return Err(FormatError::Malformed("normalized flag set but rows are not unit length".into()));
        }
        RdaFile::Embeddings(EmbeddingBatch::from_parts(matrix, labels, normalized, split))
    } else {
        let mut names = Vec::with_capacity(rows);
        for _ in 0..rows {
            let len = r.u16()? as usize;
            let raw = r.take(len)?;
            let name = std::str::from_utf8(raw)
                .map_err(|e| FormatError::Malformed(format!("class name is not UTF-8: {e}")))?;
            names.push(name.to_owned());
        }
        let learnable = flag(r.u8()?, "learnable")?;
        let normalized = flag(r.u8()?, "normalized")?;
        r.verify_trailer()?;
        let classes = ClassMatrix::new(matrix.clone(), names.clone(), learnable)
            .map_err(|e| FormatError::Malformed(e.to_string()))?;
        if normalized && !classes.is_normalized() {
            return Err(FormatError::Malformed("normalized flag set but rows are not unit length".into()));
        }
        RdaFile::Classes(ClassMatrix::from_parts(matrix, names, learnable, normalized))
    };
    Ok(file)
}

fn flag(v: u8, what: &str) -> Result<bool, FormatError> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(FormatError::Malformed(format!("{what} flag is {other}"))),
    }
}

pub fn save(path: &Path, file: &RdaFile) -> Result<()> {
    let bytes = encode(file)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<RdaFile> {
    let bytes = fs::read(path)?;
    Ok(decode(&bytes)?)
}

pub fn load_batch(path: &Path) -> Result<EmbeddingBatch> {
    match load(path)? {
        RdaFile::Embeddings(b) => Ok(b),
        RdaFile::Classes(_) => Err(RadaError::Contract(format!(
            "{} holds class embeddings, expected an embedding batch",
            path.display()
        ))),
    }
}

pub fn load_classes(path: &Path) -> Result<ClassMatrix> {
    match load(path)? {
        RdaFile::Classes(c) => Ok(c),
        RdaFile::Embeddings(_) => Err(RadaError::Contract(format!(
            "{} holds an embedding batch, expected class embeddings",
            path.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_batch() -> EmbeddingBatch {
        let rows: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64 + 0.5, -1.25, 3.0e-7]).collect();
        EmbeddingBatch::new(Tensor::from_rows(&rows).unwrap(), vec![0, 1, 2, 1], SplitTag::NewTest).unwrap()
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = encode(&RdaFile::Embeddings(sample_batch())).unwrap();
        assert_eq!(&bytes[..4], b"RDA1");
        assert_eq!(bytes[4], 0);
        assert_eq!(bytes[5], 1);
        assert_eq!(&bytes[6..8], &[0, 0]);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        // header + data + labels + split + normalized + crc
        assert_eq!(bytes.len(), 16 + 4 * 3 * 8 + 4 * 4 + 2 + 4);
        let body = &bytes[..bytes.len() - 4];
        let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        assert_eq!(crc, crc32fast::hash(body));
    }

    #[test]
    fn classes_round_trip_with_names() {
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]).unwrap();
        let names = vec!["cat".to_string(), "chien".into(), "猫".into()];
        let classes = ClassMatrix::new(w, names, true).unwrap();
        let file = RdaFile::Classes(classes);
        assert_eq!(decode(&encode(&file).unwrap()).unwrap(), file);
    }

    #[test]
    fn corruption_classes_are_distinct() {
        let bytes = encode(&RdaFile::Embeddings(sample_batch())).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(FormatError::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[5] = 2;
        assert!(matches!(decode(&bad), Err(FormatError::VersionMismatch { found: 2, .. })));

        let bad = &bytes[..bytes.len() - 9];
        assert!(matches!(decode(bad), Err(FormatError::Truncated { .. })));

        let mut bad = bytes.clone();
        bad[20] ^= 0x40;
        assert!(matches!(decode(&bad), Err(FormatError::Checksum { .. })));
    }

    #[test]
    fn empty_batch_rejected_at_save() {
        let empty = EmbeddingBatch::new(Tensor::new(&[0, 3], vec![]).unwrap(), vec![], SplitTag::BaseTrain).unwrap();
        assert!(matches!(
            encode(&RdaFile::Embeddings(empty)),
            Err(RadaError::Degenerate(_))
        ));
    }
}
