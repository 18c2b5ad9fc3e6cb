use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{FlipPairs, Frame, KeypointSet, Point, Visibility, NUM_KEYPOINTS};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

use super::{
    augment, crop_to_aspect, quantize, render_sample, Affine, AugmentConfig, AugmentParams,
    BoundingBox, Difficulty, SampleMeta, SampleRecord,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// Seed of sample `index`: bit 63 is the split, bits 32..63 the low 31 bits of the
/// dataset seed and bits 0..32 the index, so the two splits never share a seed.
pub fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    let split_bit = match split {
        Split::Train => 0,
        Split::Val => 1u64 << 63,
    };
    split_bit | ((seed & 0x7fff_ffff) << 32) | (index as u64 & 0xffff_ffff)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n: usize,
    pub seed: u64,
    pub split: Split,
    pub difficulty: Difficulty,
    /// Crop size `(h, w)`.
    pub input_size: (usize, usize),
    /// One augmentation draw per sample, baked into the stored crops.
    pub augment: Option<AugmentConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub split: Split,
    pub difficulty: Difficulty,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub augment: Option<AugmentParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<SampleRecord>,
    pub manifest: Vec<ManifestEntry>,
}

/// Renders, crops and optionally augments `spec.n` samples. Pixels are quantized to
/// 8 bits so a saved and reloaded dataset is identical to the generated one.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.n == 0 || spec.n > u32::MAX as usize {
        return Err(Error::Dataset(format!(
            "sample count {} out of range",
            spec.n
        )));
    }
    let (h, w) = spec.input_size;
    let pairs = FlipPairs::coco();
    let mut samples = Vec::with_capacity(spec.n);
    let mut manifest = Vec::with_capacity(spec.n);
    for index in 0..spec.n {
        let seed = sample_seed(spec.seed, spec.split, index);
        let raw = render_sample(seed, spec.difficulty);
        let mut s = crop_to_aspect(&raw, &raw.bbox, h, w)?;
        if let Some(cfg) = &spec.augment {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1);
            s = augment(&s, &mut rng, cfg, &pairs)?;
        }
        quantize(&mut s.image);
        manifest.push(ManifestEntry {
            index,
            seed,
            split: spec.split,
            difficulty: spec.difficulty,
            bbox: s.bbox,
            augment: s.meta.augment,
        });
        samples.push(s);
    }
    Ok(Dataset {
        spec: spec.clone(),
        samples,
        manifest,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Annotation {
    index: usize,
    seed: u64,
    difficulty: Difficulty,
    frame: Frame,
    #[serde(rename = "box")]
    bbox: BoundingBox,
    transform: Affine,
    augment: Option<AugmentParams>,
    /// `(x, y, labeled)` per keypoint.
    keypoints: Vec<(f64, f64, u8)>,
}

const SPEC_FILE: &str = "dataset.json";
const MANIFEST_FILE: &str = "manifest.jsonl";

impl Dataset {
    /// Writes `dataset.json`, `manifest.jsonl`, `images/NNNNNN.ppm` and `annotations/NNNNNN.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        fs::create_dir_all(dir.join("annotations"))?;
        fs::write(
            dir.join(SPEC_FILE),
            serde_json::to_string_pretty(&self.spec)? + "\n",
        )?;
        let mut manifest = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
        for entry in &self.manifest {
            writeln!(manifest, "{}", serde_json::to_string(entry)?)?;
        }
        manifest.flush()?;
        for (i, s) in self.samples.iter().enumerate() {
            save_ppm(&s.image, &dir.join("images").join(format!("{i:06}.ppm")))?;
            let ann = Annotation {
                index: i,
                seed: s.meta.seed,
                difficulty: s.meta.difficulty,
                frame: s.keypoints.frame,
                bbox: s.bbox,
                transform: s.meta.transform,
                augment: s.meta.augment,
                keypoints: (0..NUM_KEYPOINTS)
                    .map(|k| {
                        let p = s.keypoints.coords[k];
                        (p.x, p.y, s.keypoints.labeled(k) as u8)
                    })
                    .collect(),
            };
            fs::write(
                dir.join("annotations").join(format!("{i:06}.json")),
                serde_json::to_string(&ann)? + "\n",
            )?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let spec: DatasetSpec = serde_json::from_str(&fs::read_to_string(dir.join(SPEC_FILE))?)?;
        let mut manifest = Vec::new();
        for line in BufReader::new(File::open(dir.join(MANIFEST_FILE))?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                manifest.push(serde_json::from_str::<ManifestEntry>(&line)?);
            }
        }
        if manifest.len() != spec.n {
            return Err(Error::Dataset(format!(
                "manifest lists {} samples, spec says {}",
                manifest.len(),
                spec.n
            )));
        }
        let mut samples = Vec::with_capacity(spec.n);
        for i in 0..spec.n {
            let ann: Annotation = serde_json::from_str(&fs::read_to_string(
                dir.join("annotations").join(format!("{i:06}.json")),
            )?)?;
            if ann.keypoints.len() != NUM_KEYPOINTS || ann.index != i {
                return Err(Error::Dataset(format!("annotation {i} is malformed")));
            }
            let mut keypoints = KeypointSet::new(ann.frame);
            for (k, &(x, y, labeled)) in ann.keypoints.iter().enumerate() {
                keypoints.coords[k] = Point::new(x, y);
                if labeled != 0 {
                    keypoints.visibility[k] = Visibility::Labeled;
                }
            }
            let image = load_image(&dir.join("images").join(format!("{i:06}.ppm")))?;
            let (h, w) = spec.input_size;
            image.expect_shape("dataset image", Shape::new(1, 3, h, w))?;
            samples.push(SampleRecord {
                image,
                keypoints,
                bbox: ann.bbox,
                meta: SampleMeta {
                    seed: ann.seed,
                    difficulty: ann.difficulty,
                    transform: ann.transform,
                    augment: ann.augment,
                },
            });
        }
        Ok(Dataset {
            spec,
            samples,
            manifest,
        })
    }
}

/// Writes a `1×3×H×W` image in `[0, 1]` as binary 8-bit PPM.
pub fn save_ppm(img: &Tensor, path: &Path) -> Result<()> {
    let s = img.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::invalid(
            "save_ppm",
            format!("expected 1x3xHxW, got {s}"),
        ));
    }
    let mut buf = Vec::with_capacity(3 * s.h * s.w);
    for i in 0..s.h * s.w {
        for c in 0..3 {
            buf.push((img.plane(0, c)[i] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let file = BufWriter::new(File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(&buf, s.w as u32, s.h as u32, ExtendedColorType::Rgb8)?;
    Ok(())
}

/// Reads any supported image file as `1×3×H×W` in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            t.plane_mut(0, c)[i] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(t)
}
