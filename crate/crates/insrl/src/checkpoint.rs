//! Named-tensor checkpoint container with a bit-exact round trip.
//!
//! Layout: magic, format version, scalar width, tensor count, then per
//! tensor: name, shape, little-endian values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"INSRLCKP";
const VERSION: u32 = 1;

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(T::BYTES as u8).to_le_bytes())?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (_, name, tensor) in store.iter() {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(tensor.shape().len() as u8).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(tensor.numel() * T::BYTES);
        for &v in tensor.data() {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r, 4)?.try_into().unwrap()))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r, 8)?.try_into().unwrap()))
}

/// Read every named tensor from a checkpoint file.
pub fn load<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_exact(&mut r, 8)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let width = read_exact(&mut r, 1)?[0] as usize;
    if width != T::BYTES {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {width}-byte scalars but {}-byte were requested",
            T::BYTES
        )));
    }
    let count = read_u64(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = String::from_utf8(read_exact(&mut r, name_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad tensor name: {e}")))?;
        let ndim = read_exact(&mut r, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = read_exact(&mut r, numel * T::BYTES)?;
        let data: Vec<T> = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(out)
}

/// Load checkpoint values into an already-built store. Every parameter must
/// be present with a matching shape.
pub fn load_into<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let tensors = load::<T>(path)?;
    let mut found = vec![false; store.len()];
    for (name, tensor) in tensors {
        let id = store.id(&name).map_err(|_| {
            Error::Checkpoint(format!("checkpoint tensor '{name}' is not a model parameter"))
        })?;
        if store.value(id).shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for '{name}': model {:?}, checkpoint {:?}",
                store.value(id).shape(),
                tensor.shape()
            )));
        }
        *store.value_mut(id) = tensor;
        found[id] = true;
    }
    if let Some(missing) = found.iter().position(|f| !f) {
        return Err(Error::Checkpoint(format!(
            "checkpoint is missing parameter '{}'",
            store.name(missing)
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let mut store = ParamStore::<f64>::new();
        store.add(
            "a.weird",
            Tensor::from_vec(
                &[2, 3],
                vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.25, 3.5e-320],
            )
            .unwrap(),
        );
        store.add("b.kernels", Tensor::filled(&[3, 2, 2], 0.125));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&store, &path).unwrap();

        let mut other = ParamStore::<f64>::new();
        other.add("a.weird", Tensor::zeros(&[2, 3]));
        other.add("b.kernels", Tensor::zeros(&[3, 2, 2]));
        load_into(&mut other, &path).unwrap();

        for (id, _, t) in store.iter() {
            let bits_a: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = other.value(id).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn repeated_saves_are_byte_identical() {
        let mut store = ParamStore::<f32>::new();
        store.add("x", Tensor::from_vec(&[1, 4], vec![1.0f32, 2.5, -3.0, 0.0]).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save(&store, &p1).unwrap();
        save(&store, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn shape_and_precision_mismatches_are_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.add("x", Tensor::zeros(&[2, 2]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&store, &path).unwrap();

        // wrong scalar width
        assert!(load::<f32>(&path).is_err());

        // wrong shape
        let mut other = ParamStore::<f64>::new();
        other.add("x", Tensor::zeros(&[4]));
        assert!(load_into(&mut other, &path).is_err());

        // missing parameter in checkpoint
        let mut bigger = ParamStore::<f64>::new();
        bigger.add("x", Tensor::zeros(&[2, 2]));
        bigger.add("y", Tensor::zeros(&[1, 1]));
        assert!(load_into(&mut bigger, &path).is_err());
    }

    #[test]
    fn garbage_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(load::<f64>(&path).is_err());
    }
}
