//! Flat name-to-tensor archives with a JSON header.
//!
//! Layout: the 8-byte magic `SSHSCKPT`, a little-endian `u64` header length,
//! the JSON header, then raw little-endian `f32` data at the offsets listed
//! in the header.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sshs_tensor::nn::{Module, Optimizer};
use sshs_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SSHSCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    /// `net2d`, `stage2` or `stage1-cache`.
    pub kind: String,
    pub arch_hash: String,
    pub config_hash: String,
    pub num_classes: usize,
    pub input_size: Vec<usize>,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Hash of parameter names and shapes.
pub fn arch_hash(params: &[(String, Vec<usize>)]) -> String {
    let mut h = Sha256::new();
    for (n, s) in params {
        h.update(n.as_bytes());
        for d in s {
            h.update((*d as u64).to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..8])
}

pub fn module_arch_hash<T: Scalar, M: Module<T>>(m: &M) -> String {
    let mut v = Vec::new();
    m.visit("", &mut |n, p| v.push((n.to_string(), p.value.shape().to_vec())));
    arch_hash(&v)
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
}

pub struct Archive {
    pub header: Header,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write_archive(path: &Path, mut header: Header, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let mut offset = 0u64;
    header.tensors = tensors
        .iter()
        .map(|(n, t)| {
            let len = (t.numel() * 4) as u64;
            let e = TensorEntry { name: n.clone(), shape: t.shape().to_vec(), dtype: "f32".into(), offset, len };
            offset += len;
            e
        })
        .collect();
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(&tmp, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for (_, t) in tensors {
        for v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_header(path: &Path) -> Result<(Header, u64)> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint archive", path.display())));
    }
    let mut len = [0u8; 8];
    f.read_exact(&mut len).map_err(|e| Error::io(path, e))?;
    let len = u64::from_le_bytes(len);
    let mut json = vec![0u8; len as usize];
    f.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("{}: unsupported version {}", path.display(), header.version)));
    }
    Ok((header, 16 + len))
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let (header, start) = read_header(path)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let body = &bytes[start as usize..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let (a, b) = (e.offset as usize, (e.offset + e.len) as usize);
        if e.dtype != "f32" || b > body.len() || e.len as usize != 4 * e.shape.iter().product::<usize>() {
            return Err(Error::Checkpoint(format!("{}: corrupt entry {}", path.display(), e.name)));
        }
        let data = body[a..b].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.push((e.name.clone(), Tensor::from_vec(e.shape.clone(), data)));
    }
    Ok(Archive { header, tensors })
}

/// Module parameters, buffers and (optionally) optimiser state as archive entries.
pub fn module_tensors<T: Scalar, M: Module<T>>(m: &M, opt: Option<&Optimizer<T>>) -> Vec<(String, Tensor<f32>)> {
    let mut out: Vec<(String, Tensor<f32>)> = m.named_params().into_iter().map(|(n, t)| (n, t.cast())).collect();
    if let Some(o) = opt {
        let mut keys: Vec<&String> = o.state.keys().collect();
        keys.sort();
        for k in keys {
            for (i, t) in o.state[k].iter().enumerate() {
                out.push((format!("optim.{k}.{i}"), t.cast()));
            }
        }
    }
    out
}

/// Copies archive tensors into `m` by name, failing on any missing or
/// mis-shaped entry.
pub fn load_module<T: Scalar, M: Module<T>>(m: &mut M, archive: &Archive) -> Result<()> {
    let map: HashMap<&str, &Tensor<f32>> = archive.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut err = None;
    m.visit_mut("", &mut |name, p| {
        if err.is_some() {
            return;
        }
        match map.get(name) {
            Some(t) if t.shape() == p.value.shape() => p.value = t.cast(),
            Some(t) => err = Some(Error::Checkpoint(format!("tensor {name}: shape {:?} vs {:?}", t.shape(), p.value.shape()))),
            None => err = Some(Error::Checkpoint(format!("checkpoint lacks tensor {name}"))),
        }
    });
    err.map_or(Ok(()), Err)
}

/// Restores optimiser state saved by [`module_tensors`]; `step` comes from the header meta.
pub fn load_optimizer<T: Scalar>(opt: &mut Optimizer<T>, archive: &Archive) {
    opt.state.clear();
    let mut grouped: HashMap<String, Vec<(usize, Tensor<T>)>> = HashMap::new();
    for (n, t) in &archive.tensors {
        if let Some(rest) = n.strip_prefix("optim.") {
            if let Some((key, i)) = rest.rsplit_once('.') {
                if let Ok(i) = i.parse::<usize>() {
                    grouped.entry(key.to_string()).or_default().push((i, t.cast()));
                }
            }
        }
    }
    for (k, mut v) in grouped {
        v.sort_by_key(|(i, _)| *i);
        opt.state.insert(k, v.into_iter().map(|(_, t)| t).collect());
    }
    opt.step = archive.header.meta.get("optim_step").and_then(|s| s.as_u64()).unwrap_or(0);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use sshs_tensor::nn::{Conv, OptimKind};
    use sshs_tensor::ops::ConvOpts;

    fn header() -> Header {
        Header {
            version: FORMAT_VERSION,
            kind: "test".into(),
            arch_hash: "x".into(),
            config_hash: "y".into(),
            num_classes: 3,
            input_size: vec![4, 4],
            meta: serde_json::json!({"optim_step": 7}),
            tensors: vec![],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv::<f32>::new(&mut rng, 3, 4, [1, 3, 3], ConvOpts::default(), true);
        let mut opt = Optimizer::new(OptimKind::adam(0.0));
        opt.state.insert("weight".into(), vec![Tensor::full(vec![2], 1.5), Tensor::full(vec![2], 2.5)]);
        write_archive(&p, header(), &module_tensors(&conv, Some(&opt))).unwrap();
        let a = read_archive(&p).unwrap();
        let mut other = Conv::<f32>::new(&mut rng, 3, 4, [1, 3, 3], ConvOpts::default(), true);
        load_module(&mut other, &a).unwrap();
        assert_eq!(other.weight.value.data(), conv.weight.value.data());
        let mut o2 = Optimizer::<f32>::new(OptimKind::adam(0.0));
        load_optimizer(&mut o2, &a);
        assert_eq!(o2.step, 7);
        assert_eq!(o2.state["weight"][1].data(), &[2.5, 2.5]);
        conv.bias = None;
        let mut small = Conv::<f32>::new(&mut rng, 3, 2, [1, 3, 3], ConvOpts::default(), true);
        assert!(load_module(&mut small, &a).unwrap_err().to_string().contains("weight"));
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b"not a checkpoint at all").unwrap();
        assert!(read_archive(&p).is_err());
    }
}
