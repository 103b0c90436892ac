//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/center_<id>/case_<id>_{image.pgm,image.f64,label.pgm,clean.pgm}
//! <root>/generic/case_<id>_{...}
//! ```
//!
//! PGM files are 8-bit P5; images are affinely quantized over their own
//! range and the exact values live in the little-endian `.f64` sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CenterData, CenterSpec, DataError, Federation, GeomConfig, Result, SegSample, Split};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCase {
    pub id: u64,
    /// `None` for the generic set.
    pub center: Option<u32>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub geom: GeomConfig,
    pub centers: Vec<CenterSpec>,
    pub cases: Vec<ManifestCase>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn fmt_err(path: &Path, reason: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn write_pgm(path: &Path, h: usize, w: usize, pixels: &[u8]) -> Result<()> {
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(io_err(path))
}

/// Returns (height, width, pixels).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fmt_err(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(fmt_err(path, format!("expected P5, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| fmt_err(path, format!("bad PGM field {s}")));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(fmt_err(path, "only 8-bit PGM is supported"));
    }
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != h * w {
        return Err(fmt_err(path, format!("expected {} pixels, found {}", h * w, body.len())));
    }
    Ok((h, w, body.to_vec()))
}

fn quantize(image: &[f64]) -> Vec<u8> {
    let lo = image.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = image.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    image.iter().map(|v| ((v - lo) / span * 255.0).round() as u8).collect()
}

fn label_bytes(label: &[u8]) -> Vec<u8> {
    label.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect()
}

fn case_dir(root: &Path, center: Option<u32>) -> PathBuf {
    match center {
        Some(c) => root.join(format!("center_{c}")),
        None => root.join("generic"),
    }
}

fn stem(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("case_{id:05}"))
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_case(dir: &Path, s: &SegSample) -> Result<()> {
    let st = stem(dir, s.id);
    write_pgm(&with_suffix(&st, "_image.pgm"), s.height, s.width, &quantize(&s.image))?;
    let raw: Vec<u8> = s.image.iter().flat_map(|v| v.to_le_bytes()).collect();
    let p = with_suffix(&st, "_image.f64");
    fs::write(&p, raw).map_err(io_err(&p))?;
    write_pgm(&with_suffix(&st, "_label.pgm"), s.height, s.width, &label_bytes(&s.label))?;
    write_pgm(&with_suffix(&st, "_clean.pgm"), s.height, s.width, &label_bytes(&s.clean_label))
}

fn read_label(path: &Path, geom: &GeomConfig) -> Result<Vec<u8>> {
    let (h, w, px) = read_pgm(path)?;
    if (h, w) != (geom.height, geom.width) {
        return Err(fmt_err(path, format!("label is {h}x{w}, manifest says {}x{}", geom.height, geom.width)));
    }
    Ok(px.iter().map(|&v| (v > 127) as u8).collect())
}

fn read_case(dir: &Path, id: u64, geom: &GeomConfig) -> Result<SegSample> {
    let st = stem(dir, id);
    let p = with_suffix(&st, "_image.f64");
    let raw = fs::read(&p).map_err(io_err(&p))?;
    if raw.len() != 8 * geom.height * geom.width {
        return Err(fmt_err(&p, "raw image size does not match the grid"));
    }
    let image = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(SegSample {
        id,
        height: geom.height,
        width: geom.width,
        image,
        label: read_label(&with_suffix(&st, "_label.pgm"), geom)?,
        clean_label: read_label(&with_suffix(&st, "_clean.pgm"), geom)?,
    })
}

pub fn write_dataset(root: &Path, fed: &Federation) -> Result<Manifest> {
    let mut cases = Vec::new();
    let mut emit = |center: Option<u32>, split: Split, samples: &[SegSample]| -> Result<()> {
        let dir = case_dir(root, center);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for s in samples {
            write_case(&dir, s)?;
            cases.push(ManifestCase {
                id: s.id,
                center,
                split,
            });
        }
        Ok(())
    };
    for c in &fed.centers {
        emit(Some(c.spec.center_id), Split::Train, &c.train)?;
        emit(Some(c.spec.center_id), Split::Test, &c.test)?;
    }
    emit(None, Split::Generic, &fed.generic)?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: fed.seed,
        geom: fed.geom,
        centers: fed.centers.iter().map(|c| c.spec.clone()).collect(),
        cases,
    };
    let p = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&p, text + "\n").map_err(io_err(&p))?;
    Ok(manifest)
}

pub fn read_dataset(root: &Path) -> Result<Federation> {
    let p = root.join("manifest.json");
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| fmt_err(&p, e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(fmt_err(&p, format!("manifest version {} != {MANIFEST_VERSION}", m.version)));
    }
    let mut centers: Vec<CenterData> = m
        .centers
        .iter()
        .map(|spec| CenterData {
            spec: spec.clone(),
            train: Vec::new(),
            test: Vec::new(),
        })
        .collect();
    let mut generic = Vec::new();
    for c in &m.cases {
        let s = read_case(&case_dir(root, c.center), c.id, &m.geom)?;
        match (c.center, c.split) {
            (None, Split::Generic) => generic.push(s),
            (Some(id), split @ (Split::Train | Split::Test)) => {
                let cd = centers
                    .iter_mut()
                    .find(|cd| cd.spec.center_id == id)
                    .ok_or_else(|| fmt_err(&p, format!("case {} names unknown center {id}", c.id)))?;
                if split == Split::Train {
                    cd.train.push(s);
                } else {
                    cd.test.push(s);
                }
            }
            _ => return Err(fmt_err(&p, format!("case {} has inconsistent split", c.id))),
        }
    }
    Ok(Federation {
        geom: m.geom,
        seed: m.seed,
        centers,
        generic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{build_federation_data, default_centers};

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        let px: Vec<u8> = (0..12).map(|v| v * 20).collect();
        write_pgm(&p, 3, 4, &px).unwrap();
        assert_eq!(read_pgm(&p).unwrap(), (3, 4, px));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut specs = default_centers();
        specs.iter_mut().for_each(|s| {
            s.n_train = 2;
            s.n_test = 1;
        });
        let fed = build_federation_data(&specs, 3, &GeomConfig::default(), 9).unwrap();
        write_dataset(dir.path(), &fed).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), fed);
    }

    #[test]
    fn missing_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("manifest.json"), "{err}");
    }
}
