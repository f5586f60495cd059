//! Seeded synthetic dataset: small terrain scenes with elliptical puddles,
//! per-instance masks, two robot profiles and a simulated annotator panel.
//!
//! Used as the test fixture and for offline demos; the same seed always
//! produces byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{
    to_jsonl, AnnotationRecord, DatasetError, DatasetManifest, ImageRecord, ImageSource,
    RobotProfile, WaterInstance,
};
use crate::mask::foreground_stats;
use crate::rating::TraversabilityRating;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_images: usize,
    pub instances_per_image: usize,
    pub width: u32,
    pub height: u32,
    pub n_annotators: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 42,
            n_images: 4,
            instances_per_image: 3,
            width: 96,
            height: 72,
            n_annotators: 7,
        }
    }
}

pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub annotations: Vec<AnnotationRecord>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn save_png<P: image::PixelWithColorType>(
    img: &image::ImageBuffer<P, Vec<P::Subpixel>>,
    path: &Path,
) -> Result<(), DatasetError>
where
    [P::Subpixel]: image::EncodableLayout,
{
    img.save(path).map_err(|e| DatasetError::Raster {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn clamp_rating(v: i64) -> TraversabilityRating {
    TraversabilityRating::new(v.clamp(1, 4)).expect("clamped into range")
}

/// Write the dataset under `root` (created if needed) and return it.
pub fn generate(root: impl AsRef<Path>, spec: &SyntheticSpec) -> Result<SyntheticDataset, DatasetError> {
    let root = root.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let (w, h) = (spec.width, spec.height);
    let column = w / spec.instances_per_image.max(1) as u32;

    let mut images = Vec::new();
    let mut instances = Vec::new();
    for i in 0..spec.n_images {
        let image_id = format!("scene_{:02}", i + 1);
        let base = [
            rng.random_range(90..140u8),
            rng.random_range(70..110u8),
            rng.random_range(40..70u8),
        ];
        let mut img = RgbImage::from_fn(w, h, |_, _| {
            let n: i16 = rng.random_range(-12..=12);
            Rgb(base.map(|c| (c as i16 + n).clamp(0, 255) as u8))
        });
        for k in 0..spec.instances_per_image {
            let cx = column as f64 * (k as f64 + 0.5);
            let cy = rng.random_range(h as f64 * 0.3..h as f64 * 0.7);
            let rx = rng.random_range(column as f64 * 0.2..column as f64 * 0.4);
            let ry = rng.random_range(h as f64 * 0.08..h as f64 * 0.18);
            let mask = GrayImage::from_fn(w, h, |x, y| {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                Luma([if dx * dx + dy * dy <= 1.0 { 255 } else { 0 }])
            });
            let depth = rng.random_range(0..60u8);
            for (x, y, m) in mask.enumerate_pixels() {
                if m.0[0] != 0 {
                    let n: u8 = rng.random_range(0..10);
                    img.put_pixel(x, y, Rgb([40 + n, 80 + n + depth / 2, 150 + n + depth]));
                }
            }
            let (pixel_count, bbox) = foreground_stats(&mask).expect("ellipse is non-empty");
            let id = format!("w{:02}", instances.len() + 1);
            let rel = PathBuf::from("masks").join(format!("{id}.png"));
            save_png(&mask, &root.join(&rel))?;
            instances.push(WaterInstance {
                id,
                image_id: image_id.clone(),
                mask: rel,
                pixel_count,
                bbox,
            });
        }
        let rel = PathBuf::from("images").join(format!("{image_id}.png"));
        save_png(&img, &root.join(&rel))?;
        images.push(ImageRecord {
            id: image_id,
            path: rel,
            width: w,
            height: h,
            source: ImageSource::Synthetic,
        });
    }

    let robots = vec![RobotProfile::husky_a200(), RobotProfile::unitree_b1()];
    let mut annotations = Vec::new();
    let mut ts = 1_700_000_000i64;
    for inst in &instances {
        let wheeled: i64 = rng.random_range(1..=4);
        let legged = (wheeled - rng.random_range(0..=1)).max(1);
        for (robot, truth) in robots.iter().zip([wheeled, legged]) {
            for a in 0..spec.n_annotators {
                let roll: f64 = rng.random();
                let offset = if roll < 0.6 {
                    0
                } else if roll < 0.9 {
                    if rng.random_bool(0.5) { 1 } else { -1 }
                } else if rng.random_bool(0.5) {
                    2
                } else {
                    -2
                };
                ts += 1;
                annotations.push(AnnotationRecord {
                    annotator_id: format!("a{}", a + 1),
                    instance_id: inst.id.clone(),
                    robot_id: robot.id.clone(),
                    rating: clamp_rating(truth + offset),
                    timestamp: ts,
                });
            }
        }
    }

    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        images,
        instances,
        robots,
    };
    manifest.write()?;
    let path = manifest.annotations_path();
    fs::write(&path, to_jsonl(&annotations)).map_err(io_err(&path))?;
    Ok(SyntheticDataset {
        manifest,
        annotations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_manifest, read_annotations, validate_manifest};

    #[test]
    fn generated_dataset_is_valid_and_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::default();
        let ds = generate(a.path(), &spec).unwrap();
        generate(b.path(), &spec).unwrap();
        assert_eq!(ds.manifest.instances.len(), 12);
        assert_eq!(ds.annotations.len(), 12 * 2 * 7);
        let loaded = load_manifest(a.path()).unwrap();
        assert!(validate_manifest(&loaded).is_empty(), "{:?}", validate_manifest(&loaded));
        assert_eq!(read_annotations(loaded.annotations_path()).unwrap(), ds.annotations);
        for rel in ["manifest.json", "annotations.jsonl", "images/scene_02.png", "masks/w07.png"] {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap());
        }
    }
}
