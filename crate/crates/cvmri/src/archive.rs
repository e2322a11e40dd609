//! On-disk dataset formats.
//!
//! Patch and latent archives are raw little-endian 32-bit float record
//! files with a JSON sidecar index; volume archives store multi-coil
//! k-space the same way. All writes go through a temp file and an
//! atomic rename.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::ComplexField;
use crate::ingest::KSpaceStack;
use crate::label::{ConditionLabel, Sequence, VolumeClass};
use crate::patching::{PatchRecord, SplitManifest, PATCH_SIZE};
use crate::phantom::BoundingBox;

pub const LATENT_SIZE: usize = 48;

/// Sidecar entry for one stored patch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchMeta {
    pub condition: ConditionLabel,
    pub class: VolumeClass,
    pub volume_id: String,
    pub slice: usize,
    pub origin: (usize, usize),
    pub overlap: f64,
}

/// Sidecar entry for one stored latent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentMeta {
    pub condition: ConditionLabel,
    pub class: VolumeClass,
    pub provenance: Provenance,
    /// Source volume id; empty for synthetic samples.
    pub volume_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Real,
    Synthetic,
}

/// Writes `bytes` to `path` atomically (temp file + rename).
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    atomic_write(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_f32_le(path: &Path, samples: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(samples.len() * 4);
    for s in samples {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    atomic_write(path, &bytes)
}

fn read_f32_le(path: &Path) -> Result<Vec<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!("{}: length not a multiple of 4", path.display())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// SHA-256 of a file, hex-encoded.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path.display().to_string(), e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex_string(&h.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A patch archive split: records in a raw f32 file plus the sidecar
/// index.
pub struct PatchArchive;

impl PatchArchive {
    pub fn data_path(dir: &Path, split: &str) -> PathBuf {
        dir.join(format!("{split}.f32"))
    }

    pub fn index_path(dir: &Path, split: &str) -> PathBuf {
        dir.join(format!("{split}.index.json"))
    }

    pub fn write(dir: &Path, split: &str, patches: &[PatchRecord]) -> Result<()> {
        let mut samples = Vec::with_capacity(patches.len() * 2 * PATCH_SIZE * PATCH_SIZE);
        let mut index = Vec::with_capacity(patches.len());
        for p in patches {
            if p.field.dim() != (PATCH_SIZE, PATCH_SIZE) {
                return Err(Error::shape(format!("patch {:?}", p.field.dim())));
            }
            samples.extend(p.field.to_channels_f32());
            index.push(PatchMeta {
                condition: p.condition,
                class: p.class,
                volume_id: p.volume_id.clone(),
                slice: p.slice_index,
                origin: p.origin,
                overlap: p.overlap_fraction,
            });
        }
        write_f32_le(&Self::data_path(dir, split), &samples)?;
        write_json(&Self::index_path(dir, split), &index)
    }

    pub fn read(dir: &Path, split: &str) -> Result<(Vec<ComplexField>, Vec<PatchMeta>)> {
        let index: Vec<PatchMeta> = read_json(&Self::index_path(dir, split))?;
        let samples = read_f32_le(&Self::data_path(dir, split))?;
        let rec_len = 2 * PATCH_SIZE * PATCH_SIZE;
        if samples.len() != index.len() * rec_len {
            return Err(Error::Format(format!(
                "{split}: {} samples for {} index entries",
                samples.len(),
                index.len()
            )));
        }
        let fields = samples
            .chunks_exact(rec_len)
            .map(|c| ComplexField::from_channels_f32(c, PATCH_SIZE, PATCH_SIZE))
            .collect::<Result<Vec<_>>>()?;
        Ok((fields, index))
    }
}

/// Latent archive: 2 x 48 x 48 records, same layout as patches.
pub struct LatentArchive;

impl LatentArchive {
    pub fn data_path(dir: &Path, name: &str) -> PathBuf {
        dir.join(format!("{name}.f32"))
    }

    pub fn index_path(dir: &Path, name: &str) -> PathBuf {
        dir.join(format!("{name}.index.json"))
    }

    pub fn write(dir: &Path, name: &str, latents: &[Vec<f32>], meta: &[LatentMeta]) -> Result<()> {
        let rec_len = 2 * LATENT_SIZE * LATENT_SIZE;
        if latents.len() != meta.len() {
            return Err(Error::shape("latents vs meta length".to_string()));
        }
        let mut samples = Vec::with_capacity(latents.len() * rec_len);
        for l in latents {
            if l.len() != rec_len {
                return Err(Error::shape(format!("latent record length {}", l.len())));
            }
            samples.extend_from_slice(l);
        }
        write_f32_le(&Self::data_path(dir, name), &samples)?;
        write_json(&Self::index_path(dir, name), &meta.to_vec())
    }

    pub fn read(dir: &Path, name: &str) -> Result<(Vec<Vec<f32>>, Vec<LatentMeta>)> {
        let meta: Vec<LatentMeta> = read_json(&Self::index_path(dir, name))?;
        let samples = read_f32_le(&Self::data_path(dir, name))?;
        let rec_len = 2 * LATENT_SIZE * LATENT_SIZE;
        if samples.len() != meta.len() * rec_len {
            return Err(Error::Format(format!(
                "{name}: {} samples for {} entries",
                samples.len(),
                meta.len()
            )));
        }
        let latents = samples.chunks_exact(rec_len).map(|c| c.to_vec()).collect();
        Ok((latents, meta))
    }
}

/// Volume archive header.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub volume_id: String,
    pub sequence: Sequence,
    pub class: VolumeClass,
    pub coils: usize,
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    pub boxes: Vec<BoundingBox>,
}

/// Multi-coil k-space volume storage: JSON header plus interleaved
/// (re, im) f32 samples in (coil, slice, row, col) order.
pub struct VolumeArchive;

impl VolumeArchive {
    pub fn data_path(dir: &Path, volume_id: &str) -> PathBuf {
        dir.join(format!("{volume_id}.kspace.f32"))
    }

    pub fn meta_path(dir: &Path, volume_id: &str) -> PathBuf {
        dir.join(format!("{volume_id}.json"))
    }

    pub fn write(
        dir: &Path,
        stack: &KSpaceStack,
        class: VolumeClass,
        boxes: &[BoundingBox],
    ) -> Result<()> {
        let (coils, slices, h, w) = stack.data.dim();
        let meta = VolumeMeta {
            volume_id: stack.volume_id.clone(),
            sequence: stack.sequence,
            class,
            coils,
            slices,
            height: h,
            width: w,
            boxes: boxes.to_vec(),
        };
        let mut samples = Vec::with_capacity(stack.data.len() * 2);
        for z in stack.data.iter() {
            samples.push(z.re as f32);
            samples.push(z.im as f32);
        }
        write_f32_le(&Self::data_path(dir, &stack.volume_id), &samples)?;
        write_json(&Self::meta_path(dir, &stack.volume_id), &meta)
    }

    pub fn read(dir: &Path, volume_id: &str) -> Result<(KSpaceStack, VolumeMeta)> {
        let meta: VolumeMeta = read_json(&Self::meta_path(dir, volume_id))?;
        let samples = read_f32_le(&Self::data_path(dir, volume_id))?;
        let n = meta.coils * meta.slices * meta.height * meta.width;
        if samples.len() != 2 * n {
            return Err(Error::Format(format!(
                "{volume_id}: {} samples for {} voxels",
                samples.len(),
                n
            )));
        }
        let data = Array4::from_shape_fn(
            (meta.coils, meta.slices, meta.height, meta.width),
            |(c, z, r, col)| {
                let i = ((c * meta.slices + z) * meta.height + r) * meta.width + col;
                Complex64::new(samples[2 * i] as f64, samples[2 * i + 1] as f64)
            },
        );
        Ok((
            KSpaceStack { data, sequence: meta.sequence, volume_id: volume_id.to_string() },
            meta,
        ))
    }

    /// Lists volume ids present in a directory, sorted.
    pub fn list(dir: &Path) -> Result<Vec<String>> {
        let mut out = Vec::new();
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
            let name = entry.file_name().to_string_lossy().to_string();
            if let Some(stem) = name.strip_suffix(".json") {
                out.push(stem.to_string());
            }
        }
        out.sort();
        Ok(out)
    }
}

/// Dataset manifest written by the prepare step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: SplitManifest,
    /// sha256 of each patch data file, keyed by split name.
    pub checksums: std::collections::BTreeMap<String, String>,
    /// Patch counts per (class, sequence, split).
    pub counts: Vec<CountRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountRow {
    pub class: VolumeClass,
    pub sequence: Sequence,
    pub split: String,
    pub patches: usize,
}

/// Writes a delimited results table; the reporting format shared by all
/// experiments.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join("\t"));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::Abnormality;

    #[test]
    fn patch_archive_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let field = ComplexField::from_fn(PATCH_SIZE, PATCH_SIZE, |r, c| {
            Complex64::new(r as f64 / 100.0, c as f64 / 100.0)
        });
        let rec = PatchRecord {
            field,
            condition: ConditionLabel::new(Sequence::Flair, Abnormality::Abnormal),
            class: VolumeClass::Abnormal,
            volume_id: "v0".into(),
            slice_index: 3,
            origin: (10, 20),
            overlap_fraction: 0.5,
        };
        PatchArchive::write(dir.path(), "train", &[rec.clone()]).unwrap();
        let (fields, metas) = PatchArchive::read(dir.path(), "train").unwrap();
        assert_eq!(fields.len(), 1);
        assert!(fields[0].max_abs_diff(&rec.field) < 1e-6);
        assert_eq!(metas[0].volume_id, "v0");
        assert_eq!(metas[0].origin, (10, 20));
        assert_eq!(metas[0].condition, rec.condition);
    }

    #[test]
    fn volume_archive_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let data = Array4::from_shape_fn((2, 1, 8, 8), |(c, _, r, col)| {
            Complex64::new((c + r) as f64, col as f64)
        });
        let stack =
            KSpaceStack { data, sequence: Sequence::T2, volume_id: "T2-unlabeled-000".into() };
        VolumeArchive::write(dir.path(), &stack, VolumeClass::Unlabeled, &[]).unwrap();
        let (back, meta) = VolumeArchive::read(dir.path(), "T2-unlabeled-000").unwrap();
        assert_eq!(back.data, stack.data);
        assert_eq!(meta.class, VolumeClass::Unlabeled);
        assert_eq!(VolumeArchive::list(dir.path()).unwrap(), vec!["T2-unlabeled-000"]);
    }

    #[test]
    fn checksums_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        atomic_write(&p, b"hello").unwrap();
        let a = sha256_file(&p).unwrap();
        atomic_write(&p, b"hello").unwrap();
        assert_eq!(a, sha256_file(&p).unwrap());
        atomic_write(&p, b"world").unwrap();
        assert_ne!(a, sha256_file(&p).unwrap());
    }
}
