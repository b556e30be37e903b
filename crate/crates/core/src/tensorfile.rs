//! Flat parameter files: one JSON header line, then every block's values as
//! little-endian `f64`, row-major, in header order. Reloading is bit-exact.

use std::io::{BufRead, BufReader, Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("expected {expected} v{version}, found {found} v{found_version}")]
    Format {
        expected: String,
        version: u32,
        found: String,
        found_version: u32,
    },
    #[error("bad header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("block {name}: {message}")]
    Block { name: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl BlockSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope<H> {
    format: String,
    version: u32,
    header: H,
    blocks: Vec<BlockSpec>,
}

/// A named block of values with its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub spec: BlockSpec,
    pub data: Vec<f64>,
}

pub fn write<H: Serialize>(
    mut out: impl Write,
    format: &str,
    version: u32,
    header: &H,
    blocks: &[(BlockSpec, &[f64])],
) -> Result<(), TensorFileError> {
    for (spec, data) in blocks {
        if spec.len() != data.len() {
            return Err(TensorFileError::Block {
                name: spec.name.clone(),
                message: format!("shape {:?} but {} values", spec.shape, data.len()),
            });
        }
    }
    let envelope = Envelope {
        format: format.to_string(),
        version,
        header,
        blocks: blocks.iter().map(|(s, _)| s.clone()).collect(),
    };
    let mut line = serde_json::to_vec(&envelope)?;
    line.push(b'\n');
    out.write_all(&line)?;
    let mut bytes = Vec::new();
    for (_, data) in blocks {
        bytes.clear();
        bytes.reserve(data.len() * 8);
        for v in data.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&bytes)?;
    }
    Ok(())
}

pub fn read<H: DeserializeOwned>(
    input: impl Read,
    format: &str,
    version: u32,
) -> Result<(H, Vec<Block>), TensorFileError> {
    let mut reader = BufReader::new(input);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    let envelope: Envelope<H> = serde_json::from_slice(&line)?;
    if envelope.format != format || envelope.version != version {
        return Err(TensorFileError::Format {
            expected: format.to_string(),
            version,
            found: envelope.format,
            found_version: envelope.version,
        });
    }
    let mut blocks = Vec::with_capacity(envelope.blocks.len());
    for spec in envelope.blocks {
        let mut raw = vec![0u8; spec.len() * 8];
        reader
            .read_exact(&mut raw)
            .map_err(|e| TensorFileError::Block {
                name: spec.name.clone(),
                message: e.to_string(),
            })?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blocks.push(Block { spec, data });
    }
    let mut rest = [0u8; 1];
    if reader.read(&mut rest)? != 0 {
        return Err(TensorFileError::Block {
            name: "<trailer>".into(),
            message: "unexpected bytes after last block".into(),
        });
    }
    Ok((envelope.header, blocks))
}

/// Pull the block called `name` out of a decoded list, checking its shape.
pub fn take_block(
    blocks: &mut Vec<Block>,
    name: &str,
    shape: &[usize],
) -> Result<Vec<f64>, TensorFileError> {
    let pos = blocks
        .iter()
        .position(|b| b.spec.name == name)
        .ok_or_else(|| TensorFileError::Block {
            name: name.into(),
            message: "missing".into(),
        })?;
    let block = blocks.remove(pos);
    if block.spec.shape != shape {
        return Err(TensorFileError::Block {
            name: name.into(),
            message: format!("shape {:?}, expected {:?}", block.spec.shape, shape),
        });
    }
    Ok(block.data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let a = [1.0, -0.0, f64::MIN_POSITIVE, 1.0 / 3.0];
        let b = [7.5, 8.25];
        let mut buf = Vec::new();
        write(
            &mut buf,
            "demo",
            1,
            &"hdr",
            &[
                (
                    BlockSpec {
                        name: "a".into(),
                        shape: vec![2, 2],
                    },
                    &a,
                ),
                (
                    BlockSpec {
                        name: "b".into(),
                        shape: vec![2],
                    },
                    &b,
                ),
            ],
        )
        .unwrap();
        let (h, mut blocks): (String, _) = read(buf.as_slice(), "demo", 1).unwrap();
        assert_eq!(h, "hdr");
        let back_a = take_block(&mut blocks, "a", &[2, 2]).unwrap();
        for (x, y) in back_a.iter().zip(&a) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(take_block(&mut blocks, "b", &[2]).unwrap(), b);
    }

    #[test]
    fn wrong_format_or_truncation_fails() {
        let mut buf = Vec::new();
        let v = [1.0, 2.0];
        write(
            &mut buf,
            "demo",
            1,
            &0u8,
            &[(
                BlockSpec {
                    name: "v".into(),
                    shape: vec![2],
                },
                &v,
            )],
        )
        .unwrap();
        assert!(matches!(
            read::<u8>(buf.as_slice(), "demo", 2),
            Err(TensorFileError::Format { .. })
        ));
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            read::<u8>(buf.as_slice(), "demo", 1),
            Err(TensorFileError::Block { .. })
        ));
    }

    #[test]
    fn shape_mismatch_on_write() {
        let v = [1.0];
        let err = write(
            Vec::new(),
            "demo",
            1,
            &0u8,
            &[(
                BlockSpec {
                    name: "v".into(),
                    shape: vec![2],
                },
                &v,
            )],
        );
        assert!(err.is_err());
    }
}
