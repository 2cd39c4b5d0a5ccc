//! Model checkpoints: magic + spec hash header, tensor shape table, flat
//! little-endian f32 payload. Loading validates the spec hash so weights
//! never silently attach to a mismatched architecture.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::seed::fnv1a;
use crate::tensor::Tensor;

use super::nets::{Autoencoder, AutoencoderSpec, Classifier, ClassifierSpec};
use super::{Result, TrainError};

const MAGIC: &[u8; 8] = b"XCKP0001";
const KIND_AUTOENCODER: u8 = 1;
const KIND_CLASSIFIER: u8 = 2;

fn write_params(path: &Path, kind: u8, spec_hash: u64, params: &[&Tensor]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u8(kind)?;
    w.write_u64::<LittleEndian>(spec_hash)?;
    w.write_u32::<LittleEndian>(params.len() as u32)?;
    for p in params {
        w.write_u32::<LittleEndian>(p.shape().len() as u32)?;
        for &d in p.shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
    }
    for p in params {
        for &v in p.data() {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_params(path: &Path, kind: u8, spec_hash: u64) -> Result<Vec<Tensor>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TrainError::Checkpoint(format!(
            "{}: bad magic",
            path.display()
        )));
    }
    let found_kind = r.read_u8()?;
    if found_kind != kind {
        return Err(TrainError::Checkpoint(format!(
            "{}: kind {found_kind} does not match expected {kind}",
            path.display()
        )));
    }
    let found_hash = r.read_u64::<LittleEndian>()?;
    if found_hash != spec_hash {
        return Err(TrainError::Checkpoint(format!(
            "{}: checkpoint was saved for a different model spec",
            path.display()
        )));
    }
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut shapes = Vec::with_capacity(n);
    for _ in 0..n {
        let rank = r.read_u32::<LittleEndian>()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        shapes.push(shape);
    }
    let mut tensors = Vec::with_capacity(n);
    for shape in shapes {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.read_f32::<LittleEndian>().map_err(|_| {
                TrainError::Checkpoint(format!("{}: truncated payload", path.display()))
            })?);
        }
        tensors.push(Tensor::new(shape, data).map_err(|e| TrainError::Checkpoint(e.to_string()))?);
    }
    Ok(tensors)
}

fn fill(model_params: Vec<&mut Tensor>, loaded: Vec<Tensor>, path: &Path) -> Result<()> {
    if model_params.len() != loaded.len() {
        return Err(TrainError::Checkpoint(format!(
            "{}: {} tensors stored, model has {}",
            path.display(),
            loaded.len(),
            model_params.len()
        )));
    }
    for (slot, tensor) in model_params.into_iter().zip(loaded) {
        if slot.shape() != tensor.shape() {
            return Err(TrainError::Checkpoint(format!(
                "{}: shape {:?} stored, model expects {:?}",
                path.display(),
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor;
    }
    Ok(())
}

pub fn save_autoencoder(model: &Autoencoder, path: &Path) -> Result<()> {
    let hash = fnv1a(model.spec.canonical().as_bytes());
    write_params(path, KIND_AUTOENCODER, hash, &model.params())
}

pub fn load_autoencoder(spec: &AutoencoderSpec, path: &Path) -> Result<Autoencoder> {
    let hash = fnv1a(spec.canonical().as_bytes());
    let tensors = read_params(path, KIND_AUTOENCODER, hash)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Autoencoder::init(spec, &mut rng)?;
    fill(model.params_mut(), tensors, path)?;
    Ok(model)
}

pub fn save_classifier(model: &Classifier, path: &Path) -> Result<()> {
    let hash = fnv1a(model.spec.canonical().as_bytes());
    let mut params = model.encoder.params();
    params.extend(model.head.params());
    write_params(path, KIND_CLASSIFIER, hash, &params)
}

pub fn load_classifier(spec: &ClassifierSpec, path: &Path) -> Result<Classifier> {
    let hash = fnv1a(spec.canonical().as_bytes());
    let tensors = read_params(path, KIND_CLASSIFIER, hash)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Classifier::init(spec, &mut rng)?;
    let mut params: Vec<&mut Tensor> = model.encoder.params_mut();
    params.extend(model.head.params_mut());
    fill(params, tensors, path)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn autoencoder_roundtrip_and_hash_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ae.ckpt");
        let spec = AutoencoderSpec {
            input_dims: [8, 8, 8],
            channels: [2, 3, 4],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Autoencoder::init(&spec, &mut rng).unwrap();
        save_autoencoder(&model, &path).unwrap();
        let loaded = load_autoencoder(&spec, &path).unwrap();
        assert_eq!(loaded.params(), model.params());

        let other = AutoencoderSpec {
            input_dims: [8, 8, 8],
            channels: [4, 3, 2],
        };
        assert!(matches!(
            load_autoencoder(&other, &path),
            Err(TrainError::Checkpoint(_))
        ));
    }
}
