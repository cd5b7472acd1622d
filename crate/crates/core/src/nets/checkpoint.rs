//! Versioned little-endian binary container for parameter stores.
//!
//! Layout: magic, version, fingerprint string, store count, then per store
//! its tag and named tensors (shape, raw f64 bits). Values round-trip
//! bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use sha2::{Digest, Sha256};

use super::{AnchorClassifier, ModelConfig, Segmenter};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"LPA3DCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

pub fn write_stores(path: &Path, fingerprint: &str, stores: &[&ParamStore]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let body = (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        put_u32(&mut w, CHECKPOINT_VERSION)?;
        put_str(&mut w, fingerprint)?;
        put_u32(&mut w, stores.len() as u32)?;
        for s in stores {
            put_u32(&mut w, s.tag)?;
            put_u32(&mut w, s.len() as u32)?;
            for (name, t) in s.names.iter().zip(&s.tensors) {
                put_str(&mut w, name)?;
                put_u32(&mut w, t.shape.len() as u32)?;
                for &d in &t.shape {
                    w.write_all(&(d as u64).to_le_bytes())?;
                }
                for v in &t.data {
                    w.write_all(&v.to_bits().to_le_bytes())?;
                }
            }
        }
        w.flush()
    })();
    body.map_err(io)
}

struct Reader<'a> {
    inner: BufReader<File>,
    path: &'a Path,
}

impl Reader<'_> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| Error::format(self.path, format!("truncated checkpoint: {e}")))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes::<4>()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes::<8>()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let mut b = vec![0u8; n];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| Error::format(self.path, format!("truncated string: {e}")))?;
        String::from_utf8(b).map_err(|_| Error::format(self.path, "non-UTF-8 name"))
    }
}

/// Returns the fingerprint and the stores in file order.
pub fn read_stores(path: &Path) -> Result<(String, Vec<ParamStore>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
        path,
    };
    if &r.bytes::<8>()? != MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let fingerprint = r.string()?;
    let n_stores = r.u32()?;
    let mut stores = Vec::with_capacity(n_stores as usize);
    for _ in 0..n_stores {
        let mut store = ParamStore::new(r.u32()?);
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| r.u64().map(f64::from_bits))
                .collect::<Result<Vec<_>>>()?;
            store.names.push(name);
            store.tensors.push(Tensor::new(shape, data));
        }
        stores.push(store);
    }
    Ok((fingerprint, stores))
}

/// Hash of a model configuration; stored with standalone network files.
pub fn model_fingerprint(config: &ModelConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// Copies `src` into `dst` after checking tag, names and shapes.
pub fn replace_store(dst: &mut ParamStore, src: ParamStore, path: &Path) -> Result<()> {
    let same_shapes = dst.tensors.len() == src.tensors.len()
        && dst
            .tensors
            .iter()
            .zip(&src.tensors)
            .all(|(a, b)| a.shape == b.shape);
    if dst.tag != src.tag || dst.names != src.names || !same_shapes {
        return Err(Error::format(
            path,
            format!(
                "store with tag {} does not match the configured model",
                src.tag
            ),
        ));
    }
    *dst = src;
    Ok(())
}

fn read_for(path: &Path, config: &ModelConfig, count: usize) -> Result<Vec<ParamStore>> {
    let (fp, stores) = read_stores(path)?;
    if fp != model_fingerprint(config) {
        return Err(Error::Config(format!(
            "{} was written for a different model configuration",
            path.display()
        )));
    }
    if stores.len() != count {
        return Err(Error::format(
            path,
            format!("expected {count} stores, found {}", stores.len()),
        ));
    }
    Ok(stores)
}

pub fn save_segmenter(path: &Path, seg: &Segmenter, config: &ModelConfig) -> Result<()> {
    write_stores(
        path,
        &model_fingerprint(config),
        &[&seg.backbone.store, &seg.head_store],
    )
}

pub fn load_segmenter(path: &Path, config: &ModelConfig) -> Result<Segmenter> {
    let mut stores = read_for(path, config, 2)?.into_iter();
    let mut seg = Segmenter::new(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
    replace_store(
        &mut seg.backbone.store,
        stores.next().expect("counted"),
        path,
    )?;
    replace_store(&mut seg.head_store, stores.next().expect("counted"), path)?;
    Ok(seg)
}

pub fn save_classifier(path: &Path, clf: &AnchorClassifier, config: &ModelConfig) -> Result<()> {
    write_stores(path, &model_fingerprint(config), &[&clf.store])
}

pub fn load_classifier(path: &Path, config: &ModelConfig) -> Result<AnchorClassifier> {
    let mut stores = read_for(path, config, 1)?.into_iter();
    let mut clf = AnchorClassifier::new(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
    replace_store(&mut clf.store, stores.next().expect("counted"), path)?;
    Ok(clf)
}
