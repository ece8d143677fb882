//! On-disk layout:
//!
//! ```text
//! root/manifest.json
//! root/<domain_id>/<sample_id>.png
//! root/<domain_id>/annotations.jsonl
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Cursor, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BoxAnnotation, Dataset, DomainSpec, Image, ImageSample};
use crate::error::{DmsnError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEntry {
    pub sample_id: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainEntry {
    pub domain_id: u32,
    pub num_images: usize,
    pub spec: DomainSpec,
    pub annotations_sha256: String,
    pub images: Vec<ImageEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub domains: Vec<DomainEntry>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    sample_id: String,
    boxes: Vec<BoxAnnotation>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| DmsnError::Serde(format!("png header: {e}")))?;
        let bytes: Vec<u8> = img.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        writer
            .write_image_data(&bytes)
            .map_err(|e| DmsnError::Serde(format!("png data: {e}")))?;
    }
    Ok(buf)
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<Image> {
    let corrupt = |reason: String| DmsnError::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let dec = png::Decoder::new(Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(|e| corrupt(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| corrupt("png too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| corrupt(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(corrupt("expected 8-bit RGB png".into()));
    }
    buf.truncate(info.buffer_size());
    Ok(Image {
        height: info.height as usize,
        width: info.width as usize,
        data: buf.iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| DmsnError::io(path, e))
}

/// Writes the dataset under `root` and returns the manifest path.
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| DmsnError::io(root, e))?;
    let mut domains = Vec::new();
    for spec in &dataset.specs {
        let samples = dataset.domain(spec.domain_id)?;
        let dir = root.join(spec.domain_id.to_string());
        fs::create_dir_all(&dir).map_err(|e| DmsnError::io(&dir, e))?;
        let mut images = Vec::with_capacity(samples.len());
        let mut ann = Vec::new();
        for s in samples {
            let png = encode_png(&s.pixels)?;
            write_file(&dir.join(format!("{}.png", s.sample_id)), &png)?;
            images.push(ImageEntry {
                sample_id: s.sample_id.clone(),
                sha256: sha256_hex(&png),
            });
            serde_json::to_writer(
                &mut ann,
                &AnnotationRecord {
                    sample_id: s.sample_id.clone(),
                    boxes: s.boxes.clone(),
                },
            )?;
            ann.push(b'\n');
        }
        write_file(&dir.join("annotations.jsonl"), &ann)?;
        domains.push(DomainEntry {
            domain_id: spec.domain_id,
            num_images: samples.len(),
            spec: spec.clone(),
            annotations_sha256: sha256_hex(&ann),
            images,
        });
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        seed: dataset.seed,
        class_names: dataset.classes().iter().map(|c| c.name().to_string()).collect(),
        domains,
    };
    let path = root.join(MANIFEST_FILE);
    let file = fs::File::create(&path).map_err(|e| DmsnError::io(&path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.flush().map_err(|e| DmsnError::io(&path, e))?;
    Ok(path)
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let mpath = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| DmsnError::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DmsnError::Corrupt {
        path: mpath.clone(),
        reason: e.to_string(),
    })?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(DmsnError::Corrupt {
            path: mpath,
            reason: format!("unsupported schema version {}", manifest.schema_version),
        });
    }
    let mut domains = BTreeMap::new();
    let mut specs = Vec::new();
    for entry in &manifest.domains {
        let dir = root.join(entry.domain_id.to_string());
        let apath = dir.join("annotations.jsonl");
        let abytes = fs::read(&apath).map_err(|e| DmsnError::io(&apath, e))?;
        if sha256_hex(&abytes) != entry.annotations_sha256 {
            return Err(DmsnError::Corrupt {
                path: apath,
                reason: "checksum mismatch".into(),
            });
        }
        let mut ann: BTreeMap<String, Vec<BoxAnnotation>> = BTreeMap::new();
        for line in BufReader::new(abytes.as_slice()).lines() {
            let line = line.map_err(|e| DmsnError::io(&apath, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| DmsnError::Corrupt {
                path: apath.clone(),
                reason: e.to_string(),
            })?;
            ann.insert(rec.sample_id, rec.boxes);
        }
        let mut samples = Vec::with_capacity(entry.images.len());
        for img in &entry.images {
            let ipath = dir.join(format!("{}.png", img.sample_id));
            let bytes = fs::read(&ipath).map_err(|e| DmsnError::io(&ipath, e))?;
            if sha256_hex(&bytes) != img.sha256 {
                return Err(DmsnError::Corrupt {
                    path: ipath,
                    reason: "checksum mismatch".into(),
                });
            }
            let pixels = decode_png(&bytes, &ipath)?;
            let boxes = ann.remove(&img.sample_id).ok_or_else(|| DmsnError::Corrupt {
                path: apath.clone(),
                reason: format!("no annotation record for {}", img.sample_id),
            })?;
            samples.push(ImageSample {
                pixels,
                domain_id: entry.domain_id,
                boxes,
                sample_id: img.sample_id.clone(),
            });
        }
        if samples.len() != entry.num_images {
            return Err(DmsnError::Corrupt {
                path: mpath.clone(),
                reason: format!("domain {} lists {} images", entry.domain_id, entry.num_images),
            });
        }
        specs.push(entry.spec.clone());
        domains.insert(entry.domain_id, samples);
    }
    if specs.is_empty() {
        return Err(DmsnError::Corrupt {
            path: mpath,
            reason: "manifest lists no domains".into(),
        });
    }
    Ok(Dataset {
        specs,
        seed: manifest.seed,
        domains,
    })
}
