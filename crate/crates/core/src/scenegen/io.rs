//! Dataset layout:
//!
//! ```text
//! <root>/palette.json
//! <root>/samples/<id>/{t1.png, t2.png, sem1.png, sem2.png, change.png, stage1.png, stage2.png, meta.json}
//! <root>/splits.json
//! ```
//!
//! Images are 8-bit RGB, maps 8-bit grayscale. Change maps store 0/255.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ExtendedColorType, ImageReader};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ClassPalette, SceneSample};

pub const PALETTE_FILE: &str = "palette.json";
pub const SPLITS_FILE: &str = "splits.json";
pub const SAMPLES_DIR: &str = "samples";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sample_id: String,
    pub height: usize,
    pub width: usize,
    pub stages_t1: Vec<u8>,
    pub stages_t2: Vec<u8>,
    pub palette: ClassPalette,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub sample_ids: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::config("split", format!("unknown split `{other}`"))),
        }
    }
}

/// `round(v · 255)` with halves rounded up.
pub fn quantize(v: f32) -> u8 {
    ((v.clamp(0.0, 1.0) as f64) * 255.0 + 0.5).floor().min(255.0) as u8
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

fn save_png(path: &Path, data: &[u8], w: usize, h: usize, color: ExtendedColorType) -> Result<()> {
    image::save_buffer(path, data, w as u32, h as u32, color).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_rgb_png(path: &Path, image: &[f32], h: usize, w: usize) -> Result<()> {
    let bytes: Vec<u8> = image.iter().map(|&v| quantize(v)).collect();
    save_png(path, &bytes, w, h, ExtendedColorType::Rgb8)
}

pub fn write_gray_png(path: &Path, map: &[u8], h: usize, w: usize) -> Result<()> {
    save_png(path, map, w, h, ExtendedColorType::L8)
}

fn decode(path: &Path) -> std::result::Result<DynamicImage, String> {
    ImageReader::open(path)
        .map_err(|e| e.to_string())?
        .decode()
        .map_err(|e| e.to_string())
}

/// Reads an 8-bit RGB PNG as `H×W×3` values in `[0,1]`.
pub fn read_rgb_png(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    match decode(path).map_err(|m| Error::Image {
        path: path.to_path_buf(),
        message: m,
    })? {
        DynamicImage::ImageRgb8(img) => {
            let (w, h) = img.dimensions();
            let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
            Ok((data, h as usize, w as usize))
        }
        other => Err(Error::Image {
            path: path.to_path_buf(),
            message: format!("expected 8-bit RGB, found {:?}", other.color()),
        }),
    }
}

pub fn read_gray_png(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    match decode(path).map_err(|m| Error::Image {
        path: path.to_path_buf(),
        message: m,
    })? {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            Ok((img.into_raw(), h as usize, w as usize))
        }
        other => Err(Error::Image {
            path: path.to_path_buf(),
            message: format!("expected 8-bit grayscale, found {:?}", other.color()),
        }),
    }
}

fn sample_dir(root: &Path, id: &str) -> PathBuf {
    root.join(SAMPLES_DIR).join(id)
}

fn distinct(v: &[u8]) -> Vec<u8> {
    v.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
}

pub fn write_dataset(samples: &[SceneSample], palette: &ClassPalette, root: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(root.join(SAMPLES_DIR)).map_err(|e| Error::io(root, e))?;
    write_json(&root.join(PALETTE_FILE), palette)?;
    let mut ids = Vec::with_capacity(samples.len());
    for s in samples {
        let dir = sample_dir(root, &s.sample_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (h, w) = (s.height, s.width);
        write_rgb_png(&dir.join("t1.png"), &s.image_t1, h, w)?;
        write_rgb_png(&dir.join("t2.png"), &s.image_t2, h, w)?;
        write_gray_png(&dir.join("sem1.png"), &s.sem_t1, h, w)?;
        write_gray_png(&dir.join("sem2.png"), &s.sem_t2, h, w)?;
        let change: Vec<u8> = s.change.iter().map(|&c| c * 255).collect();
        write_gray_png(&dir.join("change.png"), &change, h, w)?;
        write_gray_png(&dir.join("stage1.png"), &s.stage_t1, h, w)?;
        write_gray_png(&dir.join("stage2.png"), &s.stage_t2, h, w)?;
        write_json(
            &dir.join("meta.json"),
            &SampleMeta {
                sample_id: s.sample_id.clone(),
                height: h,
                width: w,
                stages_t1: distinct(&s.stage_t1),
                stages_t2: distinct(&s.stage_t2),
                palette: palette.clone(),
            },
        )?;
        ids.push(s.sample_id.clone());
    }
    Ok(DatasetManifest { sample_ids: ids })
}

pub fn write_splits(root: &Path, splits: &Splits) -> Result<()> {
    write_json(&root.join(SPLITS_FILE), splits)
}

pub fn read_splits(root: &Path) -> Result<Splits> {
    read_json(&root.join(SPLITS_FILE))
}

fn read_sample(root: &Path, id: &str, palette: &ClassPalette) -> Result<SceneSample> {
    let dir = sample_dir(root, id);
    let ingest = |message: String| Error::Ingestion {
        sample: id.to_string(),
        message,
    };
    let meta: SampleMeta = read_json(&dir.join("meta.json")).map_err(|e| ingest(e.to_string()))?;
    if meta.sample_id != id {
        return Err(ingest(format!("meta.json names `{}`", meta.sample_id)));
    }
    let (h, w) = (meta.height, meta.width);
    let rgb = |name: &str| -> Result<Vec<f32>> {
        let (data, ih, iw) = read_rgb_png(&dir.join(name)).map_err(|e| ingest(e.to_string()))?;
        if (ih, iw) != (h, w) {
            return Err(ingest(format!("{name} is {ih}x{iw}, expected {h}x{w}")));
        }
        Ok(data)
    };
    let gray = |name: &str| -> Result<Vec<u8>> {
        let (data, ih, iw) = read_gray_png(&dir.join(name)).map_err(|e| ingest(e.to_string()))?;
        if (ih, iw) != (h, w) {
            return Err(ingest(format!("{name} is {ih}x{iw}, expected {h}x{w}")));
        }
        Ok(data)
    };
    let sem_t1 = gray("sem1.png")?;
    let sem_t2 = gray("sem2.png")?;
    let k = palette.num_classes() as u8;
    if sem_t1.iter().chain(&sem_t2).any(|&c| c >= k) {
        return Err(ingest(format!("semantic map holds a class id >= {k}")));
    }
    let change = gray("change.png")?
        .into_iter()
        .map(|v| match v {
            0 => Ok(0),
            255 => Ok(1),
            other => Err(ingest(format!("change.png holds non-binary value {other}"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(SceneSample {
        sample_id: id.to_string(),
        height: h,
        width: w,
        image_t1: rgb("t1.png")?,
        image_t2: rgb("t2.png")?,
        sem_t1,
        sem_t2,
        change,
        stage_t1: gray("stage1.png")?,
        stage_t2: gray("stage2.png")?,
    })
}

/// Reads the listed samples (all sample directories, sorted, when `ids` is
/// `None`).
pub fn read_dataset(root: &Path, ids: Option<&[String]>) -> Result<(ClassPalette, Vec<SceneSample>)> {
    let palette: ClassPalette = read_json(&root.join(PALETTE_FILE))?;
    palette.validate()?;
    let ids: Vec<String> = match ids {
        Some(ids) => ids.to_vec(),
        None => {
            let dir = root.join(SAMPLES_DIR);
            let mut v: Vec<String> = fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_dir())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .collect();
            v.sort();
            v
        }
    };
    let samples = ids
        .iter()
        .map(|id| read_sample(root, id, &palette))
        .collect::<Result<Vec<_>>>()?;
    Ok((palette, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_dataset, SceneConfig};

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        // 127.5/255 and 126.5/255 sit exactly on a half
        assert_eq!(quantize((127.5f64 / 255.0) as f32), 128);
        assert_eq!(quantize(2.0 / 255.0), 2);
    }

    fn small() -> (ClassPalette, Vec<SceneSample>) {
        let p = ClassPalette::standard(4, 4).unwrap();
        let cfg = SceneConfig {
            height: 16,
            width: 24,
            ..SceneConfig::default()
        };
        let s = generate_dataset(&cfg, &p, 5).unwrap();
        (p, s)
    }

    #[test]
    fn round_trip_maps_exact_images_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let (p, samples) = small();
        let manifest = write_dataset(&samples, &p, dir.path()).unwrap();
        assert_eq!(manifest.sample_ids.len(), 5);
        let (p2, back) = read_dataset(dir.path(), None).unwrap();
        assert_eq!(p, p2);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.sem_t1, b.sem_t1);
            assert_eq!(a.sem_t2, b.sem_t2);
            assert_eq!(a.change, b.change);
            assert_eq!(a.stage_t1, b.stage_t1);
            assert_eq!(a.stage_t2, b.stage_t2);
            for (x, y) in a.image_t1.iter().zip(&b.image_t1).chain(a.image_t2.iter().zip(&b.image_t2)) {
                assert!((x - y).abs() <= 1.0 / 255.0 + 1e-7);
            }
        }
    }

    #[test]
    fn missing_change_map_names_sample() {
        let dir = tempfile::tempdir().unwrap();
        let (p, samples) = small();
        write_dataset(&samples, &p, dir.path()).unwrap();
        fs::remove_file(dir.path().join("samples/s00003/change.png")).unwrap();
        let err = read_dataset(dir.path(), None).unwrap_err();
        assert!(err.to_string().contains("s00003"), "{err}");
    }

    #[test]
    fn dimension_mismatch_names_sample() {
        let dir = tempfile::tempdir().unwrap();
        let (p, samples) = small();
        write_dataset(&samples, &p, dir.path()).unwrap();
        write_gray_png(&dir.path().join("samples/s00001/sem2.png"), &[0; 16], 4, 4).unwrap();
        let err = read_dataset(dir.path(), None).unwrap_err();
        assert!(err.to_string().contains("s00001"), "{err}");
    }

    #[test]
    fn malformed_meta_names_sample() {
        let dir = tempfile::tempdir().unwrap();
        let (p, samples) = small();
        write_dataset(&samples, &p, dir.path()).unwrap();
        fs::write(dir.path().join("samples/s00002/meta.json"), "{not json").unwrap();
        let err = read_dataset(dir.path(), None).unwrap_err();
        assert!(err.to_string().contains("s00002"), "{err}");
    }
}
