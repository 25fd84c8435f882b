//! Versioned binary checkpoints.
//!
//! Layout: magic `RPNT`, format version (u32 LE), length-prefixed JSON header
//! (config + rotary spec + head flag), then named parameter blobs: u32 name
//! length + name bytes, u32 rank, u64 extents, raw little-endian f64 data.
//! Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{RpntConfig, RpntModel};
use crate::nn::ParamVisitor;
use crate::posenc::RopeGroupSpec;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RPNT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: RpntConfig,
    rope_spec: RopeGroupSpec,
    has_task_head: bool,
}

pub fn save(model: &RpntModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let header = Header {
        config: model.config.clone(),
        rope_spec: model.rope_spec.clone(),
        has_task_head: model.head.is_some(),
    };
    let hjson = serde_json::to_vec(&header)?;
    w.write_all(&(hjson.len() as u32).to_le_bytes())?;
    w.write_all(&hjson)?;

    let mut names = Vec::new();
    model.visit("model", &mut |name, t| names.push((name.to_string(), t.clone())));
    w.write_all(&(names.len() as u32).to_le_bytes())?;
    for (name, t) in &names {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn load(path: &Path) -> Result<RpntModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!("not a checkpoint: bad magic {:?}", magic)));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {} (expected {})",
            version, VERSION
        )));
    }
    let hlen = read_u32(&mut r)? as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf)?;
    let header: Header = serde_json::from_slice(&hbuf)?;

    // rebuild the structure, then overwrite every tensor by name
    let mut seed_rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = RpntModel::new(header.config, &mut seed_rng)?;
    if header.has_task_head {
        model.attach_task_head(&mut seed_rng);
    }
    if model.rope_spec != header.rope_spec {
        return Err(Error::Data("checkpoint rope spec disagrees with its config".into()));
    }

    let n_params = read_u32(&mut r)? as usize;
    let mut loaded: Vec<(String, Tensor)> = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let nlen = read_u32(&mut r)? as usize;
        let mut nbuf = vec![0u8; nlen];
        r.read_exact(&mut nbuf)?;
        let name = String::from_utf8(nbuf)
            .map_err(|e| Error::Data(format!("bad parameter name: {}", e)))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        loaded.push((name, Tensor::new(shape, data)?.param()));
    }

    let mut i = 0;
    let mut mismatch: Option<String> = None;
    model.visit_mut("model", &mut |name, t| {
        if let Some((lname, lt)) = loaded.get(i) {
            if lname != name || lt.shape != t.shape {
                mismatch.get_or_insert_with(|| {
                    format!("parameter {} expected '{}' {:?}, found '{}' {:?}", i, name, t.shape, lname, lt.shape)
                });
            } else {
                t.data.copy_from_slice(&lt.data);
                t.grad = None;
            }
        } else {
            mismatch.get_or_insert_with(|| format!("checkpoint is missing parameter '{}'", name));
        }
        i += 1;
    });
    if let Some(m) = mismatch {
        return Err(Error::Data(m));
    }
    if i != loaded.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} parameters, model expects {}",
            loaded.len(),
            i
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut model = RpntModel::new(RpntConfig::tiny(), &mut rng).unwrap();
        model.attach_task_head(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rpnt");
        save(&model, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        assert!(loaded.head.is_some());
        let mut orig = Vec::new();
        model.visit("model", &mut |n, t| orig.push((n.to_string(), t.data.clone())));
        let mut back = Vec::new();
        loaded.visit("model", &mut |n, t| back.push((n.to_string(), t.data.clone())));
        assert_eq!(orig.len(), back.len());
        for ((n0, d0), (n1, d1)) in orig.iter().zip(&back) {
            assert_eq!(n0, n1);
            // bitwise comparison
            for (a, b) in d0.iter().zip(d1) {
                assert_eq!(a.to_bits(), b.to_bits(), "parameter {n0} drifted");
            }
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.rpnt");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(matches!(load(&path), Err(Error::Data(_))));
    }
}
