use super::{Dataset, Sample, SceneConfig};
use crate::error::{BtnError, Result};
use crate::numerics::{tensor_from_bytes, tensor_to_bytes, Tensor};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    scene: Option<SceneConfig>,
    n: usize,
    samples: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    image: String,
    density: String,
    true_count: usize,
    heads: Vec<(f64, f64)>,
}

fn write_checked(path: &Path, t: &Tensor<f64>) -> Result<()> {
    let mut bytes = tensor_to_bytes(t);
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, bytes).map_err(|e| BtnError::io(path, e))
}

fn read_checked(path: &Path) -> Result<Tensor<f64>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(BtnError::MissingFile(path.into())),
        Err(e) => return Err(BtnError::io(path, e)),
    };
    if bytes.len() < 4 {
        return Err(BtnError::Truncated("tensor file checksum"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(BtnError::Checksum {
            path: path.into(),
            stored,
            computed,
        });
    }
    tensor_from_bytes(body)
}

/// Writes `manifest.json` and two checksummed tensor files per sample.
pub fn save_dataset(dir: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| BtnError::io(dir, e))?;
    let mut entries = Vec::with_capacity(data.len());
    for (i, s) in data.samples.iter().enumerate() {
        let image = format!("{i:05}_image.btnt");
        let density = format!("{i:05}_density.btnt");
        write_checked(&dir.join(&image), &s.image)?;
        write_checked(&dir.join(&density), &s.gt_density)?;
        entries.push(ManifestEntry {
            image,
            density,
            true_count: s.true_count,
            heads: s.head_positions.clone(),
        });
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        scene: data.scene.clone(),
        n: data.len(),
        samples: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(&path, json).map_err(|e| BtnError::io(&path, e))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = match fs::read(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(BtnError::MissingFile(path)),
        Err(e) => return Err(BtnError::io(&path, e)),
    };
    let manifest: Manifest = serde_json::from_slice(&text)?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(BtnError::VersionMismatch {
            expected: MANIFEST_VERSION,
            found: manifest.format_version,
        });
    }
    if manifest.n != manifest.samples.len() {
        return Err(BtnError::Malformed {
            what: path.display().to_string(),
            reason: format!("n = {} but {} sample entries", manifest.n, manifest.samples.len()),
        });
    }
    let mut samples = Vec::with_capacity(manifest.n);
    for e in manifest.samples {
        let image = read_checked(&dir.join(&e.image))?;
        let gt_density = read_checked(&dir.join(&e.density))?;
        if image.rank() != 3 || gt_density.rank() != 3 {
            return Err(BtnError::Malformed {
                what: e.image,
                reason: "image and density must be [channels, height, width]".into(),
            });
        }
        samples.push(Sample {
            image,
            gt_density,
            true_count: e.true_count,
            head_positions: e.heads,
        });
    }
    Ok(Dataset {
        scene: manifest.scene,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::super::generate;
    use super::*;

    fn small() -> Dataset {
        let cfg = SceneConfig {
            canvas: [16, 16],
            count_range: [1, 4],
            seed: 5,
            ..SceneConfig::default()
        };
        generate(&cfg, 3).unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = small();
        save_dataset(dir.path(), &d).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), d);
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        save_dataset(a.path(), &small()).unwrap();
        save_dataset(b.path(), &small()).unwrap();
        for name in ["manifest.json", "00000_image.btnt", "00002_density.btnt"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &small()).unwrap();
        fs::remove_file(dir.path().join("00001_density.btnt")).unwrap();
        match load_dataset(dir.path()) {
            Err(BtnError::MissingFile(p)) => assert!(p.ends_with("00001_density.btnt")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &small()).unwrap();
        let p = dir.path().join("00000_image.btnt");
        let mut bytes = fs::read(&p).unwrap();
        bytes[40] ^= 0x01;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(BtnError::Checksum { .. })));
    }

    #[test]
    fn manifest_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &small()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).unwrap().replace("\"n\": 3", "\"n\": 4");
        fs::write(&p, text).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(BtnError::Malformed { .. })));
    }
}
