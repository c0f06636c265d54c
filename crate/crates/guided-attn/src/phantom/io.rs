//! Raw-payload file format with plain-text sidecar headers, and the cohort
//! manifest (one JSON record per patient).
//!
//! Volumes: little-endian `f32` payload (`<stem>.raw`) + TOML sidecar
//! (`<stem>.toml`); the pre-contrast baseline, when present, lives next to
//! the volume as `<stem>_pre.raw/.toml`. Masks: `u8` payload.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Grid, Precision};
use crate::phantom::{
    ClinicalRaw, CohortTag, Laterality, Mask, Orientation, PatientRecord, Provenance, Volume,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Sidecar {
    shape: Vec<usize>,
    spacing: [f64; 3],
    orientation: Orientation,
    laterality: Laterality,
    dtype: String,
}

fn write_sidecar(path: &Path, sc: &Sidecar) -> Result<()> {
    let text = toml::to_string(sc).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
    toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))
}

fn write_f32_raw(path: &Path, data: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_f32_raw(path: &Path, expect: usize) -> Result<Vec<f64>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?
        .read_to_end(&mut buf)?;
    if buf.len() != expect * 4 {
        return Err(Error::Data(format!(
            "{}: expected {} f32 values, found {} bytes",
            path.display(),
            expect,
            buf.len()
        )));
    }
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Write `<stem>.raw/.toml` (+ `<stem>_pre.*` when a baseline is present).
pub fn write_volume(stem: &Path, v: &Volume) -> Result<()> {
    let sc = Sidecar {
        shape: v.data.shape().to_vec(),
        spacing: v.spacing,
        orientation: v.orientation,
        laterality: v.laterality,
        dtype: "f32le".into(),
    };
    write_f32_raw(&stem.with_extension("raw"), v.data.data())?;
    write_sidecar(&stem.with_extension("toml"), &sc)?;
    if let Some(b) = &v.baseline {
        let pre_stem = pre_stem(stem);
        write_f32_raw(&pre_stem.with_extension("raw"), b.data())?;
        write_sidecar(
            &pre_stem.with_extension("toml"),
            &Sidecar {
                shape: b.shape().to_vec(),
                ..sc
            },
        )?;
    }
    Ok(())
}

fn pre_stem(stem: &Path) -> PathBuf {
    let mut name = stem.file_name().unwrap().to_os_string();
    name.push("_pre");
    stem.with_file_name(name)
}

pub fn read_volume(stem: &Path) -> Result<Volume> {
    let sc = read_sidecar(&stem.with_extension("toml"))?;
    if sc.dtype != "f32le" {
        return Err(Error::Data(format!(
            "{}: expected dtype f32le, found {}",
            stem.display(),
            sc.dtype
        )));
    }
    let n: usize = sc.shape.iter().product();
    let data = read_f32_raw(&stem.with_extension("raw"), n)?;
    let pre = pre_stem(stem);
    let baseline = if pre.with_extension("raw").exists() {
        let psc = read_sidecar(&pre.with_extension("toml"))?;
        let pn: usize = psc.shape.iter().product();
        Some(Grid::new(
            psc.shape,
            read_f32_raw(&pre.with_extension("raw"), pn)?,
            Precision::F64,
        ))
    } else {
        None
    };
    Ok(Volume {
        data: Grid::new(sc.shape, data, Precision::F64),
        baseline,
        spacing: sc.spacing,
        orientation: sc.orientation,
        laterality: sc.laterality,
    })
}

pub fn write_mask(stem: &Path, m: &Mask, v: &Volume) -> Result<()> {
    let buf: Vec<u8> = m
        .data
        .data()
        .iter()
        .map(|&x| if x != 0.0 { 1u8 } else { 0u8 })
        .collect();
    let mut f = fs::File::create(stem.with_extension("raw"))?;
    f.write_all(&buf)?;
    write_sidecar(
        &stem.with_extension("toml"),
        &Sidecar {
            shape: m.data.shape().to_vec(),
            spacing: v.spacing,
            orientation: v.orientation,
            laterality: v.laterality,
            dtype: "u8".into(),
        },
    )?;
    Ok(())
}

pub fn read_mask(stem: &Path) -> Result<Mask> {
    let sc = read_sidecar(&stem.with_extension("toml"))?;
    if sc.dtype != "u8" {
        return Err(Error::Data(format!(
            "{}: expected dtype u8, found {}",
            stem.display(),
            sc.dtype
        )));
    }
    let n: usize = sc.shape.iter().product();
    let buf = fs::read(stem.with_extension("raw"))?;
    if buf.len() != n {
        return Err(Error::Data(format!(
            "{}: expected {} bytes, found {}",
            stem.display(),
            n,
            buf.len()
        )));
    }
    Ok(Mask {
        data: Grid::new(sc.shape, buf.iter().map(|&b| b as f64).collect(), Precision::F64),
        provenance: Provenance::Synthetic,
    })
}

/// One manifest record; paths are file stems relative to the manifest's
/// directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub cohort: CohortTag,
    pub label: u8,
    pub volume: String,
    pub mask: String,
    pub clinical: ClinicalRaw,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).map_err(|e| Error::Data(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("manifest: {}", e))))
        .collect()
}

/// Load a full patient record following manifest paths.
pub fn read_patient(manifest_dir: &Path, row: &ManifestRow) -> Result<PatientRecord> {
    let volume = read_volume(&manifest_dir.join(&row.volume))?;
    let mask = read_mask(&manifest_dir.join(&row.mask))?;
    Ok(PatientRecord {
        id: row.id.clone(),
        cohort: row.cohort,
        volume,
        mask,
        clinical: row.clinical.clone(),
        label: row.label,
    })
}
