use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Component, Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::store::{read_raw_annotations, RawAnnotationLine};
use super::DatasetError;
use crate::mask::{self, BBox};
use crate::rating::TraversabilityRating;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSource {
    Rugd,
    Rellis3d,
    #[serde(rename = "self")]
    SelfTaken,
    Cc0,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobotProfile {
    pub id: String,
    pub display_name: String,
    /// Free-form capability description inserted into prompts.
    pub prompt_description: String,
}

impl RobotProfile {
    /// Wheeled reference platform. The description is editable configuration.
    pub fn husky_a200() -> Self {
        RobotProfile {
            id: "husky_a200".into(),
            display_name: "Clearpath Husky A200".into(),
            prompt_description: "Clearpath Husky A200, a four-wheeled skid-steer ground robot about \
                1 m long with roughly 13 cm of ground clearance. Its body and electronics are not \
                waterproof."
                .into(),
        }
    }

    /// Legged reference platform. The description is editable configuration.
    pub fn unitree_b1() -> Self {
        RobotProfile {
            id: "unitree_b1".into(),
            display_name: "Unitree B1".into(),
            prompt_description: "Unitree B1, a quadruped legged robot with noticeably higher ground \
                clearance than a wheeled platform. Its body is splash-resistant but must not be \
                submerged."
                .into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub source: ImageSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaterInstance {
    pub id: String,
    pub image_id: String,
    /// Single-instance binary mask, relative to the dataset root.
    pub mask: PathBuf,
    pub pixel_count: u64,
    pub bbox: BBox,
}

/// The dataset index: images, water instances and robot profiles, resolved
/// against the directory the manifest was read from.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub images: Vec<ImageRecord>,
    pub instances: Vec<WaterInstance>,
    pub robots: Vec<RobotProfile>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    images: Vec<ImageRecord>,
    instances: Vec<WaterInstance>,
    robots: Vec<RobotProfile>,
}

/// One broken invariant found by [`validate_manifest`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub entity: String,
    pub rule: Rule,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    DuplicateId,
    EmptyDescription,
    InvalidDimensions,
    PathOutsideRoot,
    MissingFile,
    DanglingReference,
    UnreadableRaster,
    ImageDimensionMismatch,
    MaskDimensionMismatch,
    EmptyMask,
    PixelCountMismatch,
    BboxMismatch,
    MalformedAnnotation,
    RatingOutOfRange,
}

impl Rule {
    pub fn name(self) -> &'static str {
        match self {
            Rule::DuplicateId => "duplicate_id",
            Rule::EmptyDescription => "empty_description",
            Rule::InvalidDimensions => "invalid_dimensions",
            Rule::PathOutsideRoot => "path_outside_root",
            Rule::MissingFile => "missing_file",
            Rule::DanglingReference => "dangling_reference",
            Rule::UnreadableRaster => "unreadable_raster",
            Rule::ImageDimensionMismatch => "image_dimension_mismatch",
            Rule::MaskDimensionMismatch => "mask_dimension_mismatch",
            Rule::EmptyMask => "empty_mask",
            Rule::PixelCountMismatch => "pixel_count_mismatch",
            Rule::BboxMismatch => "bbox_mismatch",
            Rule::MalformedAnnotation => "malformed_annotation",
            Rule::RatingOutOfRange => "rating_out_of_range",
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}: {}", self.entity, self.rule.name(), self.detail)
    }
}

fn is_contained(rel: &Path) -> bool {
    let mut depth = 0i32;
    for c in rel.components() {
        match c {
            Component::Normal(_) => depth += 1,
            Component::CurDir => {}
            Component::ParentDir => {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
            }
            Component::RootDir | Component::Prefix(_) => return false,
        }
    }
    true
}

impl DatasetManifest {
    /// Parse `manifest.json` without checking any cross-references.
    pub fn read_unchecked(root: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let root = root.as_ref();
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|source| DatasetError::Io {
            path: path.clone(),
            source,
        })?;
        let file: ManifestFile =
            serde_json::from_str(&text).map_err(|e| DatasetError::Malformed {
                path: path.clone(),
                detail: e.to_string(),
            })?;
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            images: file.images,
            instances: file.instances,
            robots: file.robots,
        })
    }

    pub fn write(&self) -> Result<(), DatasetError> {
        let path = self.root.join(MANIFEST_FILE);
        let file = ManifestFile {
            images: self.images.clone(),
            instances: self.instances.clone(),
            robots: self.robots.clone(),
        };
        let mut text = serde_json::to_string_pretty(&file).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|source| DatasetError::Io { path, source })
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn instance(&self, id: &str) -> Option<&WaterInstance> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn robot(&self, id: &str) -> Option<&RobotProfile> {
        self.robots.iter().find(|r| r.id == id)
    }

    pub fn instances_of<'a>(&'a self, image_id: &'a str) -> impl Iterator<Item = &'a WaterInstance> {
        self.instances.iter().filter(move |i| i.image_id == image_id)
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn annotations_path(&self) -> PathBuf {
        self.root.join(ANNOTATIONS_FILE)
    }

    pub fn load_image(&self, image: &ImageRecord) -> Result<RgbImage, DatasetError> {
        let path = self.resolve(&image.path);
        image::open(&path)
            .map(|img| img.to_rgb8())
            .map_err(|e| DatasetError::Raster {
                path,
                detail: e.to_string(),
            })
    }

    pub fn load_mask(&self, instance: &WaterInstance) -> Result<GrayImage, DatasetError> {
        let path = self.resolve(&instance.mask);
        image::open(&path)
            .map(|img| img.to_luma8())
            .map_err(|e| DatasetError::Raster {
                path,
                detail: e.to_string(),
            })
    }
}

/// Load `manifest.json` under `root` and check that every reference resolves:
/// instance → image, and every image / mask file exists under the root.
pub fn load_manifest(root: impl AsRef<Path>) -> Result<DatasetManifest, DatasetError> {
    let manifest = DatasetManifest::read_unchecked(root)?;
    let manifest_path = manifest.root.join(MANIFEST_FILE);
    let dangling = |entity: &str, field: &str, detail: String| DatasetError::DanglingReference {
        path: manifest_path.clone(),
        entity: entity.to_string(),
        field: field.to_string(),
        detail,
    };
    for image in &manifest.images {
        if !is_contained(&image.path) || !manifest.resolve(&image.path).is_file() {
            return Err(dangling(
                &image.id,
                "path",
                format!("image file {} not found under dataset root", image.path.display()),
            ));
        }
    }
    for inst in &manifest.instances {
        if manifest.image(&inst.image_id).is_none() {
            return Err(dangling(
                &inst.id,
                "image_id",
                format!("unknown image {}", inst.image_id),
            ));
        }
        if !is_contained(&inst.mask) || !manifest.resolve(&inst.mask).is_file() {
            return Err(dangling(
                &inst.id,
                "mask",
                format!("mask file {} not found under dataset root", inst.mask.display()),
            ));
        }
    }
    Ok(manifest)
}

fn push(out: &mut Vec<Violation>, entity: &str, rule: Rule, detail: impl Into<String>) {
    out.push(Violation {
        entity: entity.to_string(),
        rule,
        detail: detail.into(),
    });
}

fn check_unique<'a>(out: &mut Vec<Violation>, kind: &str, ids: impl Iterator<Item = &'a str>) {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            push(out, id, Rule::DuplicateId, format!("{kind} id appears more than once"));
        }
    }
}

/// Check every dataset invariant, including mask contents and the annotation
/// store next to the manifest. Returns an empty list for a consistent dataset.
pub fn validate_manifest(manifest: &DatasetManifest) -> Vec<Violation> {
    let mut out = Vec::new();
    check_unique(&mut out, "image", manifest.images.iter().map(|i| i.id.as_str()));
    check_unique(&mut out, "instance", manifest.instances.iter().map(|i| i.id.as_str()));
    check_unique(&mut out, "robot", manifest.robots.iter().map(|r| r.id.as_str()));

    for robot in &manifest.robots {
        if robot.prompt_description.trim().is_empty() {
            push(&mut out, &robot.id, Rule::EmptyDescription, "prompt_description is empty");
        }
    }

    let mut image_dims = BTreeMap::new();
    for image in &manifest.images {
        if image.width == 0 || image.height == 0 {
            push(
                &mut out,
                &image.id,
                Rule::InvalidDimensions,
                format!("{}x{}", image.width, image.height),
            );
        }
        if !is_contained(&image.path) {
            push(&mut out, &image.id, Rule::PathOutsideRoot, image.path.display().to_string());
            continue;
        }
        let path = manifest.resolve(&image.path);
        if !path.is_file() {
            push(&mut out, &image.id, Rule::MissingFile, path.display().to_string());
            continue;
        }
        match image::image_dimensions(&path) {
            Ok((w, h)) if (w, h) != (image.width, image.height) => push(
                &mut out,
                &image.id,
                Rule::ImageDimensionMismatch,
                format!("file is {w}x{h}, manifest says {}x{}", image.width, image.height),
            ),
            Ok(_) => {}
            Err(e) => push(&mut out, &image.id, Rule::UnreadableRaster, e.to_string()),
        }
        image_dims.insert(image.id.as_str(), (image.width, image.height));
    }

    for inst in &manifest.instances {
        let Some(image) = manifest.image(&inst.image_id) else {
            push(
                &mut out,
                &inst.id,
                Rule::DanglingReference,
                format!("image_id {} does not exist", inst.image_id),
            );
            continue;
        };
        if !is_contained(&inst.mask) {
            push(&mut out, &inst.id, Rule::PathOutsideRoot, inst.mask.display().to_string());
            continue;
        }
        let path = manifest.resolve(&inst.mask);
        if !path.is_file() {
            push(
                &mut out,
                &inst.id,
                Rule::DanglingReference,
                format!("mask {} does not exist", inst.mask.display()),
            );
            continue;
        }
        let mask = match manifest.load_mask(inst) {
            Ok(m) => m,
            Err(e) => {
                push(&mut out, &inst.id, Rule::UnreadableRaster, e.to_string());
                continue;
            }
        };
        if mask.dimensions() != (image.width, image.height) {
            push(
                &mut out,
                &inst.id,
                Rule::MaskDimensionMismatch,
                format!(
                    "mask is {}x{}, image {} is {}x{}",
                    mask.width(),
                    mask.height(),
                    image.id,
                    image.width,
                    image.height
                ),
            );
        }
        if inst.pixel_count == 0 {
            push(&mut out, &inst.id, Rule::EmptyMask, "pixel_count is 0");
        }
        match mask::foreground_stats(&mask) {
            None => {
                if inst.pixel_count != 0 {
                    push(&mut out, &inst.id, Rule::EmptyMask, "mask has no foreground pixels");
                }
            }
            Some((count, bbox)) => {
                if count != inst.pixel_count {
                    push(
                        &mut out,
                        &inst.id,
                        Rule::PixelCountMismatch,
                        format!("mask has {count} foreground pixels, manifest says {}", inst.pixel_count),
                    );
                }
                if bbox != inst.bbox {
                    push(
                        &mut out,
                        &inst.id,
                        Rule::BboxMismatch,
                        format!("tight bbox is {bbox}, manifest says {}", inst.bbox),
                    );
                }
            }
        }
    }

    validate_store(manifest, &mut out);
    out
}

fn validate_store(manifest: &DatasetManifest, out: &mut Vec<Violation>) {
    let path = manifest.annotations_path();
    if !path.exists() {
        return;
    }
    let lines = match read_raw_annotations(&path) {
        Ok(lines) => lines,
        Err(e) => {
            push(out, ANNOTATIONS_FILE, Rule::MalformedAnnotation, e.to_string());
            return;
        }
    };
    for (lineno, line) in lines.into_iter().enumerate() {
        let entity = format!("{ANNOTATIONS_FILE}:{}", lineno + 1);
        match line {
            RawAnnotationLine::Malformed(detail) => {
                push(out, &entity, Rule::MalformedAnnotation, detail)
            }
            RawAnnotationLine::Record(raw) => {
                if TraversabilityRating::new(raw.rating).is_err() {
                    push(
                        out,
                        &entity,
                        Rule::RatingOutOfRange,
                        format!("rating {} is outside 1..=4", raw.rating),
                    );
                }
                if manifest.instance(&raw.instance_id).is_none() {
                    push(
                        out,
                        &entity,
                        Rule::DanglingReference,
                        format!("unknown instance {}", raw.instance_id),
                    );
                }
                if manifest.robot(&raw.robot_id).is_none() {
                    push(
                        out,
                        &entity,
                        Rule::DanglingReference,
                        format!("unknown robot {}", raw.robot_id),
                    );
                }
                if raw.annotator_id.trim().is_empty() {
                    push(out, &entity, Rule::MalformedAnnotation, "empty annotator_id");
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn containment_rejects_escapes() {
        assert!(is_contained(Path::new("images/a.png")));
        assert!(is_contained(Path::new("./a/../b.png")));
        assert!(!is_contained(Path::new("../outside.png")));
        assert!(!is_contained(Path::new("/etc/passwd")));
        assert!(!is_contained(Path::new("a/../../b")));
    }

    #[test]
    fn manifest_json_shape() {
        let text = r#"{
            "images": [{"id": "img", "path": "images/img.png", "width": 4, "height": 3, "source": "self"}],
            "instances": [{"id": "w0", "image_id": "img", "mask": "masks/w0.png", "pixel_count": 2, "bbox": [0, 0, 1, 0]}],
            "robots": [{"id": "husky_a200", "display_name": "Husky", "prompt_description": "wheeled"}]
        }"#;
        let parsed: ManifestFile = serde_json::from_str(text).unwrap();
        assert_eq!(parsed.images[0].source, ImageSource::SelfTaken);
        assert_eq!(parsed.instances[0].bbox, BBox::new(0, 0, 1, 0));
    }

    #[test]
    fn default_robot_profiles_have_descriptions() {
        for r in [RobotProfile::husky_a200(), RobotProfile::unitree_b1()] {
            assert!(!r.prompt_description.is_empty());
            assert!(!r.prompt_description.contains("  "));
        }
    }
}
