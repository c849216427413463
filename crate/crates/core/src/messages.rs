//! Byte-exact wire format for protocol messages.
//!
//! A frame is a one-byte tag, `u32` rows and `u32` cols (little-endian),
//! then `rows * cols` little-endian `f64` values in row-major order. A model
//! broadcast is two consecutive frames with the same tag: the flat
//! parameter row followed by the omega matrix. Every other message is a
//! single frame.

use crate::error::{FedError, Result};
use crate::linalg::{CholeskyFactor, DenseMatrix, SYMMETRY_TOL};

const HEADER: usize = 9;

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    /// Flat parameter values and the shared omega matrix (samples as rows,
    /// replication noise appended as extra columns).
    ModelBroadcast {
        params: Vec<f64>,
        omegas: DenseMatrix,
    },
    ClientModelUpdate {
        params: Vec<f64>,
    },
    /// `Phi_c Phi_c^T`, full square matrix.
    ScatterMatrix(DenseMatrix),
    /// Lower Cholesky factor of the global precision.
    PrecisionBroadcast(DenseMatrix),
    IntermediateWeights(Vec<f64>),
    GlobalWeights(Vec<f64>),
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::ModelBroadcast { .. } => 1,
            Message::ClientModelUpdate { .. } => 2,
            Message::ScatterMatrix(_) => 3,
            Message::PrecisionBroadcast(_) => 4,
            Message::IntermediateWeights(_) => 5,
            Message::GlobalWeights(_) => 6,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let tag = self.tag();
        match self {
            Message::ModelBroadcast { params, omegas } => {
                write_frame(&mut out, tag, 1, params.len(), params);
                write_frame(&mut out, tag, omegas.rows(), omegas.cols(), omegas.as_slice());
            }
            Message::ClientModelUpdate { params } => write_frame(&mut out, tag, 1, params.len(), params),
            Message::ScatterMatrix(m) | Message::PrecisionBroadcast(m) => {
                write_frame(&mut out, tag, m.rows(), m.cols(), m.as_slice())
            }
            Message::IntermediateWeights(v) | Message::GlobalWeights(v) => write_frame(&mut out, tag, v.len(), 1, v),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (tag, first, rest) = read_frame(bytes)?;
        let (msg, rest) = match tag {
            1 => {
                let (tag2, omegas, rest) = read_frame(rest)?;
                if tag2 != 1 {
                    return Err(FedError::Codec(format!("model broadcast continued with tag {tag2}")));
                }
                expect_row(&first)?;
                (Message::ModelBroadcast { params: first.into_vec(), omegas }, rest)
            }
            2 => {
                expect_row(&first)?;
                (Message::ClientModelUpdate { params: first.into_vec() }, rest)
            }
            3 => {
                if !first.is_square() {
                    return Err(FedError::Codec(format!("scatter matrix is {}x{}", first.rows(), first.cols())));
                }
                if !first.is_symmetric(SYMMETRY_TOL) {
                    return Err(FedError::NotSymmetric(first.asymmetry()));
                }
                (Message::ScatterMatrix(first), rest)
            }
            4 => {
                let factor = CholeskyFactor::from_lower(first)?;
                (Message::PrecisionBroadcast(factor.lower().clone()), rest)
            }
            5 | 6 => {
                if first.cols() != 1 {
                    return Err(FedError::Codec(format!("weight vector frame has {} columns", first.cols())));
                }
                let v = first.into_vec();
                (if tag == 5 { Message::IntermediateWeights(v) } else { Message::GlobalWeights(v) }, rest)
            }
            t => return Err(FedError::Codec(format!("unknown message tag {t}"))),
        };
        if !rest.is_empty() {
            return Err(FedError::Codec(format!("{} trailing bytes", rest.len())));
        }
        Ok(msg)
    }
}

fn expect_row(m: &DenseMatrix) -> Result<()> {
    if m.rows() != 1 {
        return Err(FedError::Codec(format!("parameter frame has {} rows", m.rows())));
    }
    Ok(())
}

fn write_frame(out: &mut Vec<u8>, tag: u8, rows: usize, cols: usize, data: &[f64]) {
    debug_assert_eq!(rows * cols, data.len());
    out.reserve(HEADER + 8 * data.len());
    out.push(tag);
    out.extend_from_slice(&u32::try_from(rows).expect("frame rows fit in u32").to_le_bytes());
    out.extend_from_slice(&u32::try_from(cols).expect("frame cols fit in u32").to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_frame(bytes: &[u8]) -> Result<(u8, DenseMatrix, &[u8])> {
    if bytes.len() < HEADER {
        return Err(FedError::Codec(format!("frame header needs {HEADER} bytes, got {}", bytes.len())));
    }
    let tag = bytes[0];
    let rows = u32::from_le_bytes(bytes[1..5].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| FedError::Codec("frame size overflows".into()))?;
    let body = &bytes[HEADER..];
    if body.len() < len {
        return Err(FedError::Codec(format!("frame payload needs {len} bytes, got {}", body.len())));
    }
    let data = body[..len].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let m = DenseMatrix::new(rows, cols, data).map_err(|e| FedError::Codec(e.to_string()))?;
    Ok((tag, m, &body[len..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_layout() {
        let bytes = Message::IntermediateWeights(vec![1.5, -2.0]).encode();
        let mut expected = vec![5u8, 2, 0, 0, 0, 1, 0, 0, 0];
        expected.extend_from_slice(&1.5f64.to_le_bytes());
        expected.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trips() {
        let s = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let l = crate::linalg::cholesky(&s).unwrap().lower().clone();
        let msgs = [
            Message::ModelBroadcast {
                params: vec![0.1, 0.2, 0.3],
                omegas: DenseMatrix::from_fn(4, 2, |r, c| (r * c) as f64),
            },
            Message::ClientModelUpdate { params: vec![f64::MIN_POSITIVE, -0.0] },
            Message::ScatterMatrix(s),
            Message::PrecisionBroadcast(l),
            Message::IntermediateWeights(vec![1.0; 3]),
            Message::GlobalWeights(vec![]),
        ];
        for m in msgs {
            assert_eq!(Message::decode(&m.encode()).unwrap(), m);
        }
    }

    #[test]
    fn rejects_bad_frames() {
        let asym = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let bytes = Message::ScatterMatrix(asym).encode();
        assert!(matches!(Message::decode(&bytes), Err(FedError::NotSymmetric(_))));
        let mut bytes = Message::GlobalWeights(vec![1.0]).encode();
        bytes.push(0);
        assert!(matches!(Message::decode(&bytes), Err(FedError::Codec(_))));
        assert!(matches!(Message::decode(&bytes[..12]), Err(FedError::Codec(_))));
        let mut bytes = Message::GlobalWeights(vec![1.0]).encode();
        bytes[0] = 9;
        assert!(matches!(Message::decode(&bytes), Err(FedError::Codec(_))));
    }
}
