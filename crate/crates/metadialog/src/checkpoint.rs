//! Parameter checkpoint container.
//!
//! Layout: magic, version, JSON manifest of hyperparameters, then each
//! parameter as (name, shape, little-endian f32 values) in set order.
//! Values are stored as f32; save -> load -> save reproduces the file
//! byte-for-byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::autodiff::{ParamSet, Tensor};
use crate::error::Error;

const MAGIC: &[u8; 4] = b"MDLG";
const VERSION: u8 = 1;

pub fn save_checkpoint(path: &Path, params: &ParamSet, manifest: &Value) -> Result<(), Error> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    let mjson = serde_json::to_vec(manifest)?;
    w.write_all(&(mjson.len() as u32).to_le_bytes())?;
    w.write_all(&mjson)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, p) in params.iter() {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&(p.value.shape.len() as u32).to_le_bytes())?;
        for &d in &p.value.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &p.value.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, Value), Error> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic in {}: expected {MAGIC:?}, got {magic:?}",
            path.display()
        )));
    }
    let mut ver = [0u8; 1];
    r.read_exact(&mut ver)?;
    if ver[0] != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", ver[0])));
    }
    let mlen = read_u32(&mut r)? as usize;
    let mut mjson = vec![0u8; mlen];
    r.read_exact(&mut mjson)?;
    let manifest: Value = serde_json::from_slice(&mjson)?;
    let nparams = read_u32(&mut r)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..nparams {
        let nlen = read_u32(&mut r)? as usize;
        let mut nb = vec![0u8; nlen];
        r.read_exact(&mut nb)?;
        let name = String::from_utf8(nb)
            .map_err(|e| Error::Checkpoint(format!("bad parameter name: {e}")))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        params.insert(&name, Tensor::new(shape, data));
    }
    Ok((params, manifest))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, Error> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use serde_json::json;

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ParamSet::new();
        params.insert("emb", Tensor::uniform_init(vec![7, 4], &mut rng));
        params.insert("enc.w_z", Tensor::uniform_init(vec![4, 4], &mut rng));
        let manifest = json!({"hidden": 4, "lr": 0.003});

        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &params, &manifest).unwrap();
        let (loaded, m) = load_checkpoint(&p1).unwrap();
        assert_eq!(m, manifest);
        let names: Vec<&str> = loaded.names().collect();
        assert_eq!(names, vec!["emb", "enc.w_z"]);
        save_checkpoint(&p2, &loaded, &m).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.ckpt");
        std::fs::write(&p, b"NOPE_this_is_not_a_checkpoint").unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}
