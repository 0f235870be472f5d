//! Binary checkpoint container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"EQTCKPT1"
//! u8     scalar width in bytes (4 = f32, 8 = f64)
//! u32    tensor count
//! per tensor:
//!   u32        name length, then that many UTF-8 bytes
//!   u32        rank, then rank × u32 dimensions
//!   width × Π dims  raw scalar bytes
//! ```
//!
//! Loads are bitwise-faithful: a save/load round trip reproduces every scalar
//! exactly, which downstream exactness guarantees rely on.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::nn::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"EQTCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint stores {file}-byte scalars but {expected}-byte were requested")]
    PrecisionMismatch { file: u8, expected: u8 },
    #[error("checkpoint ends mid-record")]
    Truncated,
    #[error("tensor name is not valid UTF-8")]
    NameNotUtf8,
    #[error("tensor {name:?} appears twice")]
    DuplicateName { name: String },
    #[error("tensor {name:?} has shape {file:?} in the file but {model:?} in the model")]
    ShapeMismatch {
        name: String,
        file: Vec<usize>,
        model: Vec<usize>,
    },
    #[error("model expects tensor {name:?} which the file lacks")]
    MissingTensor { name: String },
    #[error("file carries tensor {name:?} which the model lacks")]
    UnknownTensor { name: String },
}

/// Serialize `named` tensors to `path`.
pub fn save<S: Scalar>(
    path: impl AsRef<Path>,
    named: &[(&str, &Tensor<S>)],
) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(S::BYTES as u8);
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, tensor) in named {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            v.write_le(&mut buf);
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Deserialize every tensor in `path`, in file order.
pub fn load<S: Scalar>(
    path: impl AsRef<Path>,
) -> Result<Vec<(String, Tensor<S>)>, CheckpointError> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(MAGIC.len())? != MAGIC.as_slice() {
        return Err(CheckpointError::BadMagic);
    }
    let width = cur.take(1)?[0];
    if width as usize != S::BYTES {
        return Err(CheckpointError::PrecisionMismatch {
            file: width,
            expected: S::BYTES as u8,
        });
    }
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| CheckpointError::NameNotUtf8)?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(S::read_le(cur.take(S::BYTES)?));
        }
        if out.iter().any(|(n, _)| *n == name) {
            return Err(CheckpointError::DuplicateName { name });
        }
        out.push((
            name,
            Tensor::from_vec(shape, data).expect("length is the shape product by construction"),
        ));
    }
    Ok(out)
}

/// Save a model's parameters under their canonical names.
pub fn save_params<S: Scalar, M: ParamSet<S>>(
    path: impl AsRef<Path>,
    model: &M,
) -> Result<(), CheckpointError> {
    let names = model.param_names();
    let params = model.params();
    let named: Vec<(&str, &Tensor<S>)> = names
        .iter()
        .map(String::as_str)
        .zip(params.into_iter())
        .collect();
    save(path, &named)
}

/// Overwrite a model's parameters from a checkpoint, matching by name.
/// The file must carry exactly the model's tensors with matching shapes.
pub fn load_into<S: Scalar, M: ParamSet<S>>(
    path: impl AsRef<Path>,
    model: &mut M,
) -> Result<(), CheckpointError> {
    let loaded = load::<S>(path)?;
    let names = model.param_names();
    let mut by_name: BTreeMap<String, Tensor<S>> = loaded.into_iter().collect();
    for (name, param) in names.iter().zip(model.params_mut()) {
        let tensor = by_name
            .remove(name)
            .ok_or_else(|| CheckpointError::MissingTensor { name: name.clone() })?;
        if tensor.shape() != param.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                file: tensor.shape().to_vec(),
                model: param.shape().to_vec(),
            });
        }
        *param = tensor;
    }
    if let Some((name, _)) = by_name.into_iter().next() {
        return Err(CheckpointError::UnknownTensor { name });
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mlp;
    use crate::rng::stream;

    #[test]
    fn round_trip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let t1 = Tensor::from_vec(vec![2, 2], vec![1.5f64, -0.0, f64::MIN_POSITIVE, 3.25]).unwrap();
        let t2 = Tensor::from_vec(vec![3], vec![1e-300, 2.0, -7.0]).unwrap();
        save(&path, &[("w", &t1), ("b", &t2)]).unwrap();
        let got = load::<f64>(&path).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].0, "w");
        assert_eq!(got[1].0, "b");
        for (orig, (_, read)) in [&t1, &t2].iter().zip(&got) {
            assert_eq!(orig.shape(), read.shape());
            let a: Vec<u64> = orig.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = read.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn same_content_gives_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("x"), dir.path().join("y"));
        let t = Tensor::from_vec(vec![4], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        save(&p1, &[("t", &t)]).unwrap();
        save(&p2, &[("t", &t)]).unwrap();
        assert_eq!(fs::read(p1).unwrap(), fs::read(p2).unwrap());
    }

    #[test]
    fn precision_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f32.ckpt");
        let t = Tensor::from_vec(vec![1], vec![1.0f32]).unwrap();
        save(&path, &[("t", &t)]).unwrap();
        match load::<f64>(&path) {
            Err(CheckpointError::PrecisionMismatch {
                file: 4,
                expected: 8,
            }) => {}
            other => panic!("expected precision mismatch, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_magic_and_truncation_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        let t = Tensor::from_vec(vec![2], vec![1.0f64, 2.0]).unwrap();
        save(&path, &[("t", &t)]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load::<f64>(&path), Err(CheckpointError::BadMagic)));
        bytes[0] ^= 0xff;
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load::<f64>(&path),
            Err(CheckpointError::Truncated)
        ));
    }

    #[test]
    fn model_round_trip_through_named_params() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mlp.ckpt");
        let mut rng = stream(31, "ckpt");
        let src = Mlp::<f64>::new(&[3, 5, 2], &mut rng);
        save_params(&path, &src).unwrap();
        let mut dst = Mlp::<f64>::new(&[3, 5, 2], &mut stream(99, "other"));
        load_into(&path, &mut dst).unwrap();
        for (a, b) in src.params().iter().zip(dst.params()) {
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn shape_mismatch_is_reported_with_the_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let src = Mlp::<f64>::new(&[3, 5, 2], &mut stream(1, "a"));
        save_params(&path, &src).unwrap();
        let mut dst = Mlp::<f64>::new(&[3, 4, 2], &mut stream(2, "b"));
        match load_into(&path, &mut dst) {
            Err(CheckpointError::ShapeMismatch { name, .. }) => {
                assert!(
                    name.contains('w') || name.contains('b'),
                    "name was {name:?}"
                )
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }
}
