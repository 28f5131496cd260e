//! Checkpoint files: a text manifest plus one raw little-endian f32 blob.
//!
//! A checkpoint is a directory holding `manifest.txt` and `params.bin`.
//! The manifest has one header line and one line per tensor:
//!
//! ```text
//! format=vlprompt-checkpoint-v1
//! tensor name=vision.spatial.w shape=6x256 offset=0 count=1536
//! ```
//!
//! `offset` is a byte offset into `params.bin`, `count` an element count.
//! Values are written bit-for-bit, so save followed by load restores every
//! parameter exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Module;

const FORMAT_LINE: &str = "format=vlprompt-checkpoint-v1";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "params.bin";

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".to_string()
    } else {
        shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    if s == "scalar" {
        return Ok(Vec::new());
    }
    s.split('x')
        .map(|d| d.parse::<usize>().map_err(|_| Error::Data(format!("bad shape field {s:?}"))))
        .collect()
}

/// Writes `model`'s parameters under `dir`, creating it if needed.
pub fn save(model: &impl Module, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut manifest = String::from(FORMAT_LINE);
    manifest.push('\n');
    let mut blob: Vec<u8> = Vec::new();
    model.visit(&mut |p| {
        manifest.push_str(&format!(
            "tensor name={} shape={} offset={} count={}\n",
            p.name,
            shape_str(&p.shape),
            blob.len(),
            p.data.len()
        ));
        for v in &p.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    });
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let bpath = dir.join(BLOB_FILE);
    fs::write(&bpath, blob).map_err(|e| Error::io(bpath.display().to_string(), e))?;
    Ok(())
}

struct Entry {
    shape: Vec<usize>,
    offset: usize,
    count: usize,
}

fn parse_manifest(text: &str) -> Result<std::collections::BTreeMap<String, Entry>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(l) if l == FORMAT_LINE => {}
        other => return Err(Error::Data(format!("unrecognized checkpoint header {other:?}"))),
    }
    let mut entries = std::collections::BTreeMap::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let rest = line
            .strip_prefix("tensor ")
            .ok_or_else(|| Error::Data(format!("unrecognized manifest line {line:?}")))?;
        let mut name = None;
        let mut shape = None;
        let mut offset = None;
        let mut count = None;
        for field in rest.split(' ') {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("bad manifest field {field:?}")))?;
            match k {
                "name" => name = Some(v.to_string()),
                "shape" => shape = Some(parse_shape(v)?),
                "offset" => offset = v.parse::<usize>().ok(),
                "count" => count = v.parse::<usize>().ok(),
                other => return Err(Error::Data(format!("unknown manifest key {other:?}"))),
            }
        }
        let (name, shape, offset, count) = match (name, shape, offset, count) {
            (Some(n), Some(s), Some(o), Some(c)) => (n, s, o, c),
            _ => return Err(Error::Data(format!("incomplete manifest line {line:?}"))),
        };
        if shape.iter().product::<usize>() != count {
            return Err(Error::Data(format!("manifest count mismatch for {name}")));
        }
        if entries.insert(name.clone(), Entry { shape, offset, count }).is_some() {
            return Err(Error::Data(format!("duplicate tensor {name} in manifest")));
        }
    }
    Ok(entries)
}

/// Loads a checkpoint into `model`. The set of names and the shape of every
/// tensor must match the model exactly.
pub fn load(model: &mut impl Module, dir: &Path) -> Result<()> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let mut entries = parse_manifest(&text)?;
    let bpath = dir.join(BLOB_FILE);
    let blob = fs::read(&bpath).map_err(|e| Error::io(bpath.display().to_string(), e))?;

    let mut err: Option<Error> = None;
    model.visit_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        let entry = match entries.remove(&p.name) {
            Some(e) => e,
            None => {
                err = Some(Error::Data(format!("checkpoint is missing tensor {}", p.name)));
                return;
            }
        };
        if entry.shape != p.shape {
            err = Some(Error::Data(format!(
                "checkpoint shape {:?} does not match model shape {:?} for {}",
                entry.shape, p.shape, p.name
            )));
            return;
        }
        let end = entry.offset + entry.count * 4;
        if end > blob.len() {
            err = Some(Error::Data(format!(
                "checkpoint blob too short for {} (needs {end} bytes, has {})",
                p.name,
                blob.len()
            )));
            return;
        }
        for (i, chunk) in blob[entry.offset..end].chunks_exact(4).enumerate() {
            p.data[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(name) = entries.keys().next() {
        return Err(Error::Data(format!("checkpoint has extra tensor {name}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{DecoderStack, Module, Param};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat(m: &impl Module) -> Vec<f32> {
        let mut v = Vec::new();
        m.visit(&mut |p| v.extend_from_slice(&p.data));
        v
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = DecoderStack::init("d", 8, 2, 2, 3, &mut rng).unwrap();
        save(&model, dir.path()).unwrap();

        let mut other = DecoderStack::init("d", 8, 2, 2, 3, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_ne!(flat(&model), flat(&other));
        load(&mut other, dir.path()).unwrap();
        let (a, b) = (flat(&model), flat(&other));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = DecoderStack::init("d", 8, 2, 1, 3, &mut rng).unwrap();
        save(&model, dir.path()).unwrap();
        let mut other = DecoderStack::init("d", 8, 2, 1, 5, &mut rng).unwrap();
        assert!(load(&mut other, dir.path()).is_err());
    }

    #[test]
    fn extra_and_missing_tensors_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let small = crate::nn::Linear { w: Param::new("m.w", &[1, 1], vec![1.0]), b: Param::new("m.b", &[1], vec![0.0]) };
        save(&small, dir.path()).unwrap();
        // Model with a name the checkpoint lacks.
        let mut renamed = crate::nn::Linear { w: Param::new("n.w", &[1, 1], vec![1.0]), b: Param::new("n.b", &[1], vec![0.0]) };
        assert!(load(&mut renamed, dir.path()).is_err());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let small = crate::nn::Linear { w: Param::new("m.w", &[2, 2], vec![1.0; 4]), b: Param::new("m.b", &[2], vec![0.0; 2]) };
        save(&small, dir.path()).unwrap();
        let blob_path = dir.path().join(BLOB_FILE);
        let blob = std::fs::read(&blob_path).unwrap();
        std::fs::write(&blob_path, &blob[..blob.len() - 4]).unwrap();
        let mut back = small.clone();
        assert!(load(&mut back, dir.path()).is_err());
    }
}
