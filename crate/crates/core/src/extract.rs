//! Instance crops for VLM input and connected-component splitting of
//! combined water masks.

use std::collections::VecDeque;
use std::path::PathBuf;

use image::imageops::{self, FilterType};
use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::dataset::WaterInstance;
use crate::mask::{self, is_foreground, BBox};

pub const OUTLINE_COLOR: Rgb<u8> = Rgb([255, 0, 255]);
pub const OUTLINE_WIDTH: u32 = 2;
/// Brightness multiplier applied to background pixels under `DimBackground`.
pub const DIM_FACTOR: f32 = 0.35;
pub const DEFAULT_MIN_AREA: u64 = 25;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ExtractError {
    #[error("instance {0} has an empty mask")]
    EmptyMask(String),
    #[error("mask is {mask:?} but image is {image:?}")]
    DimensionMismatch { mask: (u32, u32), image: (u32, u32) },
    #[error("invalid crop spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Highlight {
    None,
    #[default]
    Outline,
    DimBackground,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropSpec {
    /// Fraction of `max(bbox_w, bbox_h)` added on each side.
    pub padding_ratio: f64,
    pub highlight: Highlight,
    /// Crops are downscaled so neither edge exceeds this.
    pub max_edge: u32,
}

impl Default for CropSpec {
    fn default() -> Self {
        CropSpec {
            padding_ratio: 0.25,
            highlight: Highlight::Outline,
            max_edge: 768,
        }
    }
}

impl CropSpec {
    pub fn validate(&self) -> Result<(), ExtractError> {
        if !(0.0..=2.0).contains(&self.padding_ratio) {
            return Err(ExtractError::InvalidSpec(format!(
                "padding_ratio {} outside [0, 2]",
                self.padding_ratio
            )));
        }
        if self.max_edge < 64 {
            return Err(ExtractError::InvalidSpec(format!(
                "max_edge {} below 64",
                self.max_edge
            )));
        }
        Ok(())
    }

    /// Pixels of padding added on each side of `bbox`, rounded half-up.
    pub fn padding_px(&self, bbox: &BBox) -> u32 {
        let longest = bbox.width().max(bbox.height()) as f64;
        (self.padding_ratio * longest + 0.5).floor() as u32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceCrop {
    pub instance_id: String,
    pub pixels: RgbImage,
    /// Inclusive crop rectangle in source-image coordinates.
    pub crop_box: BBox,
    /// Downscale factor applied after cropping (1.0 when none).
    pub scale: f64,
}

/// Crop box: `bbox` grown by the configured padding on every side, clamped to the image.
pub fn crop_box(bbox: &BBox, spec: &CropSpec, width: u32, height: u32) -> BBox {
    let pad = spec.padding_px(bbox);
    BBox::new(
        bbox.x_min.saturating_sub(pad),
        bbox.y_min.saturating_sub(pad),
        bbox.x_max.saturating_add(pad).min(width - 1),
        bbox.y_max.saturating_add(pad).min(height - 1),
    )
}

/// Foreground pixels within `OUTLINE_WIDTH` (Chebyshev) of a background pixel.
/// Pixels outside the image do not count as background.
fn contour_pixels(mask: &GrayImage, region: &BBox) -> Vec<(u32, u32)> {
    let r = OUTLINE_WIDTH as i64;
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let mut out = Vec::new();
    for y in region.y_min..=region.y_max {
        for x in region.x_min..=region.x_max {
            if !is_foreground(mask.get_pixel(x, y).0[0]) {
                continue;
            }
            let near_background = (-r..=r).any(|dy| {
                (-r..=r).any(|dx| {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    nx >= 0
                        && ny >= 0
                        && nx < w
                        && ny < h
                        && !is_foreground(mask.get_pixel(nx as u32, ny as u32).0[0])
                })
            });
            if near_background {
                out.push((x, y));
            }
        }
    }
    out
}

fn check_dims(image: &RgbImage, mask: &GrayImage) -> Result<(), ExtractError> {
    if image.dimensions() != mask.dimensions() {
        return Err(ExtractError::DimensionMismatch {
            mask: mask.dimensions(),
            image: image.dimensions(),
        });
    }
    Ok(())
}

/// Draw the instance highlight onto a full-resolution copy of `image`.
pub fn highlight_instance(image: &mut RgbImage, mask: &GrayImage, highlight: Highlight) {
    match highlight {
        Highlight::None => {}
        Highlight::Outline => {
            let full = BBox::new(0, 0, mask.width() - 1, mask.height() - 1);
            for (x, y) in contour_pixels(mask, &full) {
                image.put_pixel(x, y, OUTLINE_COLOR);
            }
        }
        Highlight::DimBackground => {
            for (x, y, px) in image.enumerate_pixels_mut() {
                if !is_foreground(mask.get_pixel(x, y).0[0]) {
                    for c in px.0.iter_mut() {
                        *c = (*c as f32 * DIM_FACTOR).round() as u8;
                    }
                }
            }
        }
    }
}

/// Downscale so the longest edge is at most `max_edge` (bilinear).
pub fn fit_max_edge(image: RgbImage, max_edge: u32) -> (RgbImage, f64) {
    let longest = image.width().max(image.height());
    if longest <= max_edge {
        return (image, 1.0);
    }
    let scale = max_edge as f64 / longest as f64;
    let w = ((image.width() as f64 * scale).round() as u32).clamp(1, max_edge);
    let h = ((image.height() as f64 * scale).round() as u32).clamp(1, max_edge);
    (imageops::resize(&image, w, h, FilterType::Triangle), scale)
}

/// Cut one water instance out of `image`, keeping padded surrounding context.
pub fn extract_instance(
    image: &RgbImage,
    instance_id: &str,
    mask: &GrayImage,
    spec: &CropSpec,
) -> Result<InstanceCrop, ExtractError> {
    spec.validate()?;
    check_dims(image, mask)?;
    let (_, bbox) =
        mask::foreground_stats(mask).ok_or_else(|| ExtractError::EmptyMask(instance_id.into()))?;
    let cbox = crop_box(&bbox, spec, image.width(), image.height());

    let mut crop = imageops::crop_imm(image, cbox.x_min, cbox.y_min, cbox.width(), cbox.height())
        .to_image();
    let mask_crop =
        imageops::crop_imm(mask, cbox.x_min, cbox.y_min, cbox.width(), cbox.height()).to_image();
    match spec.highlight {
        Highlight::Outline => {
            // Contour is computed on the full mask so the crop edge is not mistaken for shoreline.
            for (x, y) in contour_pixels(mask, &cbox) {
                crop.put_pixel(x - cbox.x_min, y - cbox.y_min, OUTLINE_COLOR);
            }
        }
        other => highlight_instance(&mut crop, &mask_crop, other),
    }
    let (pixels, scale) = fit_max_edge(crop, spec.max_edge);
    Ok(InstanceCrop {
        instance_id: instance_id.to_string(),
        pixels,
        crop_box: cbox,
        scale,
    })
}

/// Full scene with every listed instance outlined, downscaled to `max_edge`.
pub fn annotate_scene(
    image: &RgbImage,
    masks: &[&GrayImage],
    spec: &CropSpec,
) -> Result<RgbImage, ExtractError> {
    let mut scene = image.clone();
    for mask in masks {
        check_dims(image, mask)?;
        if spec.highlight == Highlight::Outline {
            highlight_instance(&mut scene, mask, Highlight::Outline);
        }
    }
    Ok(fit_max_edge(scene, spec.max_edge).0)
}

/// One connected foreground region of a combined mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskComponent {
    pub pixel_count: u64,
    pub bbox: BBox,
    /// Full-size single-instance mask (0 / 255).
    pub mask: GrayImage,
}

impl MaskComponent {
    pub fn into_instance(
        self,
        id: impl Into<String>,
        image_id: impl Into<String>,
        mask_path: impl Into<PathBuf>,
    ) -> WaterInstance {
        WaterInstance {
            id: id.into(),
            image_id: image_id.into(),
            mask: mask_path.into(),
            pixel_count: self.pixel_count,
            bbox: self.bbox,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSplit {
    /// Ordered by first pixel in row-major scan order.
    pub components: Vec<MaskComponent>,
    /// Foreground pixels in components smaller than the minimum area.
    pub dropped_pixels: u64,
}

/// Split a combined mask into 8-connected components, dropping those with
/// fewer than `min_area` pixels.
pub fn split_connected_components(mask: &GrayImage, min_area: u64) -> ComponentSplit {
    let (w, h) = mask.dimensions();
    let mut visited = vec![false; (w as usize) * (h as usize)];
    let idx = |x: u32, y: u32| (y as usize) * (w as usize) + x as usize;
    let mut components = Vec::new();
    let mut dropped_pixels = 0;
    let mut queue = VecDeque::new();

    for y in 0..h {
        for x in 0..w {
            if visited[idx(x, y)] || !is_foreground(mask.get_pixel(x, y).0[0]) {
                continue;
            }
            visited[idx(x, y)] = true;
            queue.push_back((x, y));
            let mut pixels = Vec::new();
            let mut bbox = BBox::point(x, y);
            while let Some((cx, cy)) = queue.pop_front() {
                pixels.push((cx, cy));
                bbox.include(cx, cy);
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (cx as i64 + dx, cy as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let (nx, ny) = (nx as u32, ny as u32);
                        if !visited[idx(nx, ny)] && is_foreground(mask.get_pixel(nx, ny).0[0]) {
                            visited[idx(nx, ny)] = true;
                            queue.push_back((nx, ny));
                        }
                    }
                }
            }
            let count = pixels.len() as u64;
            if count < min_area {
                dropped_pixels += count;
                continue;
            }
            let mut single = GrayImage::new(w, h);
            for (px, py) in pixels {
                single.put_pixel(px, py, Luma([255]));
            }
            components.push(MaskComponent {
                pixel_count: count,
                bbox,
                mask: single,
            });
        }
    }
    ComponentSplit {
        components,
        dropped_pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rect_mask(w: u32, h: u32, bbox: BBox) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| {
            let inside = x >= bbox.x_min && x <= bbox.x_max && y >= bbox.y_min && y <= bbox.y_max;
            Luma([if inside { 255 } else { 0 }])
        })
    }

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8]))
    }

    fn spec(padding: f64, highlight: Highlight) -> CropSpec {
        CropSpec {
            padding_ratio: padding,
            highlight,
            max_edge: 768,
        }
    }

    #[test]
    fn padded_crop_box() {
        let img = gradient(100, 100);
        let mask = rect_mask(100, 100, BBox::new(40, 50, 59, 69));
        let crop = extract_instance(&img, "w", &mask, &spec(0.25, Highlight::None)).unwrap();
        assert_eq!(crop.crop_box, BBox::new(35, 45, 64, 74));
        assert_eq!(crop.pixels.dimensions(), (30, 30));
        assert_eq!(crop.scale, 1.0);
        // context is kept untouched
        assert_eq!(crop.pixels.get_pixel(0, 0), img.get_pixel(35, 45));
    }

    #[test]
    fn zero_padding_is_the_bbox() {
        let img = gradient(100, 100);
        let mask = rect_mask(100, 100, BBox::new(40, 50, 59, 69));
        let crop = extract_instance(&img, "w", &mask, &spec(0.0, Highlight::None)).unwrap();
        assert_eq!(crop.crop_box, BBox::new(40, 50, 59, 69));
    }

    #[test]
    fn crop_clamps_at_image_edge() {
        let img = gradient(100, 100);
        let mask = rect_mask(100, 100, BBox::new(0, 50, 19, 69));
        let crop = extract_instance(&img, "w", &mask, &spec(0.25, Highlight::None)).unwrap();
        assert_eq!((crop.crop_box.x_min, crop.crop_box.x_max), (0, 24));
    }

    #[test]
    fn padding_rounds_half_up() {
        // 10 px wide, ratio 0.25 -> 2.5 -> 3
        let s = spec(0.25, Highlight::None);
        assert_eq!(s.padding_px(&BBox::new(0, 0, 9, 3)), 3);
        assert_eq!(s.padding_px(&BBox::new(0, 0, 8, 3)), 2);
    }

    #[test]
    fn errors() {
        let img = gradient(10, 10);
        assert_eq!(
            extract_instance(&img, "w", &GrayImage::new(10, 10), &CropSpec::default()),
            Err(ExtractError::EmptyMask("w".into()))
        );
        assert!(matches!(
            extract_instance(&img, "w", &GrayImage::new(10, 9), &CropSpec::default()),
            Err(ExtractError::DimensionMismatch { .. })
        ));
        let bad = CropSpec {
            max_edge: 10,
            ..CropSpec::default()
        };
        assert!(matches!(
            extract_instance(&img, "w", &rect_mask(10, 10, BBox::point(1, 1)), &bad),
            Err(ExtractError::InvalidSpec(_))
        ));
    }

    #[test]
    fn outline_traces_inner_boundary() {
        let img = RgbImage::from_pixel(40, 40, Rgb([10, 20, 30]));
        let mask = rect_mask(40, 40, BBox::new(10, 10, 29, 29));
        let crop = extract_instance(&img, "w", &mask, &spec(0.0, Highlight::Outline)).unwrap();
        // crop starts at (10,10): two-pixel ring is outlined, interior untouched
        assert_eq!(*crop.pixels.get_pixel(0, 0), OUTLINE_COLOR);
        assert_eq!(*crop.pixels.get_pixel(1, 5), OUTLINE_COLOR);
        assert_eq!(*crop.pixels.get_pixel(2, 5), Rgb([10, 20, 30]));
        assert_eq!(*crop.pixels.get_pixel(10, 10), Rgb([10, 20, 30]));
    }

    #[test]
    fn outline_ignores_image_border() {
        let img = RgbImage::from_pixel(20, 20, Rgb([1, 1, 1]));
        let mask = rect_mask(20, 20, BBox::new(0, 0, 19, 9));
        let crop = extract_instance(&img, "w", &mask, &spec(0.0, Highlight::Outline)).unwrap();
        assert_eq!(*crop.pixels.get_pixel(0, 0), Rgb([1, 1, 1]));
        assert_eq!(*crop.pixels.get_pixel(5, 9), OUTLINE_COLOR);
    }

    #[test]
    fn dim_background_only_touches_background() {
        let img = RgbImage::from_pixel(20, 20, Rgb([200, 100, 50]));
        let mask = rect_mask(20, 20, BBox::new(5, 5, 9, 9));
        let crop = extract_instance(&img, "w", &mask, &spec(0.5, Highlight::DimBackground)).unwrap();
        assert_eq!(crop.crop_box, BBox::new(2, 2, 12, 12));
        assert_eq!(*crop.pixels.get_pixel(0, 0), Rgb([70, 35, 18]));
        assert_eq!(*crop.pixels.get_pixel(5, 5), Rgb([200, 100, 50]));
    }

    #[test]
    fn downscale_bounds_edges() {
        let img = gradient(400, 200);
        let mask = rect_mask(400, 200, BBox::new(0, 0, 399, 199));
        let s = CropSpec {
            padding_ratio: 0.0,
            highlight: Highlight::None,
            max_edge: 100,
        };
        let crop = extract_instance(&img, "w", &mask, &s).unwrap();
        assert_eq!(crop.pixels.dimensions(), (100, 50));
        assert_eq!(crop.scale, 0.25);
    }

    #[test]
    fn two_squares_two_components() {
        let mut m = rect_mask(40, 20, BBox::new(2, 2, 11, 11));
        for (x, y, p) in rect_mask(40, 20, BBox::new(20, 5, 29, 14)).enumerate_pixels() {
            if p.0[0] != 0 {
                m.put_pixel(x, y, *p);
            }
        }
        let split = split_connected_components(&m, DEFAULT_MIN_AREA);
        assert_eq!(split.components.len(), 2);
        assert!(split.components.iter().all(|c| c.pixel_count == 100));
        assert_eq!(split.components[0].bbox, BBox::new(2, 2, 11, 11));
        assert_eq!(split.dropped_pixels, 0);
    }

    #[test]
    fn empty_mask_no_components() {
        let split = split_connected_components(&GrayImage::new(8, 8), DEFAULT_MIN_AREA);
        assert!(split.components.is_empty());
    }

    #[test]
    fn small_components_dropped() {
        let mut m = rect_mask(30, 30, BBox::new(0, 0, 9, 9));
        m.put_pixel(20, 20, Luma([255]));
        let split = split_connected_components(&m, DEFAULT_MIN_AREA);
        assert_eq!(split.components.len(), 1);
        assert_eq!(split.dropped_pixels, 1);
    }

    /// Independent union-find labelling used as an oracle for the BFS split.
    fn union_find_component_sizes(mask: &GrayImage) -> Vec<u64> {
        let (w, h) = mask.dimensions();
        let n = (w * h) as usize;
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        let fg = |x: u32, y: u32| mask.get_pixel(x, y).0[0] != 0;
        for y in 0..h {
            for x in 0..w {
                if !fg(x, y) {
                    continue;
                }
                for (dx, dy) in [(1i64, 0i64), (-1, 1), (0, 1), (1, 1)] {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx >= 0 && nx < w as i64 && ny < h as i64 && fg(nx as u32, ny as u32) {
                        let a = find(&mut parent, (y * w + x) as usize);
                        let b = find(&mut parent, (ny as u32 * w + nx as u32) as usize);
                        parent[a] = b;
                    }
                }
            }
        }
        let mut sizes = std::collections::BTreeMap::new();
        for y in 0..h {
            for x in 0..w {
                if fg(x, y) {
                    let root = find(&mut parent, (y * w + x) as usize);
                    *sizes.entry(root).or_insert(0u64) += 1;
                }
            }
        }
        let mut v: Vec<u64> = sizes.into_values().collect();
        v.sort_unstable();
        v
    }

    #[test]
    fn diagonal_touch_is_one_component() {
        // L-shape plus a block touching it only at one corner pair
        let mut m = GrayImage::new(30, 30);
        for y in 0..10 {
            m.put_pixel(2, y, Luma([255]));
            m.put_pixel(3, y, Luma([255]));
        }
        for x in 2..10 {
            m.put_pixel(x, 9, Luma([255]));
            m.put_pixel(x, 10, Luma([255]));
        }
        for y in 11..16 {
            for x in 10..15 {
                m.put_pixel(x, y, Luma([255]));
            }
        }
        let split = split_connected_components(&m, DEFAULT_MIN_AREA);
        assert_eq!(split.components.len(), 1);
        assert_eq!(
            union_find_component_sizes(&m),
            vec![split.components[0].pixel_count]
        );
    }

    proptest! {
        #[test]
        fn extraction_contains_instance_and_is_deterministic(
            x0 in 0u32..60, y0 in 0u32..40, w in 1u32..40, h in 1u32..30,
            padding in 0.0f64..2.0, hl in 0usize..3,
        ) {
            let (iw, ih) = (100u32, 70u32);
            let bbox = BBox::new(x0, y0, (x0 + w - 1).min(iw - 1), (y0 + h - 1).min(ih - 1));
            let img = gradient(iw, ih);
            let mask = rect_mask(iw, ih, bbox);
            let s = spec(padding, [Highlight::None, Highlight::Outline, Highlight::DimBackground][hl]);
            let a = extract_instance(&img, "w", &mask, &s).unwrap();
            let b = extract_instance(&img, "w", &mask, &s).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.crop_box.contains_box(&bbox));
            prop_assert!(a.crop_box.x_max < iw && a.crop_box.y_max < ih);
        }

        #[test]
        fn components_partition_foreground(bits in prop::collection::vec(prop::bool::weighted(0.45), 24 * 18), min_area in 0u64..6) {
            let mask = GrayImage::from_fn(24, 18, |x, y| Luma([if bits[(y * 24 + x) as usize] { 255 } else { 0 }]));
            let total = bits.iter().filter(|b| **b).count() as u64;
            let split = split_connected_components(&mask, min_area);
            let kept: u64 = split.components.iter().map(|c| c.pixel_count).sum();
            prop_assert_eq!(kept + split.dropped_pixels, total);
            let mut owner = vec![0u32; 24 * 18];
            for c in &split.components {
                for (x, y, p) in c.mask.enumerate_pixels() {
                    if p.0[0] != 0 {
                        owner[(y * 24 + x) as usize] += 1;
                    }
                }
            }
            prop_assert!(owner.iter().all(|&o| o <= 1));
            let mut sizes: Vec<u64> = union_find_component_sizes(&mask).into_iter().filter(|&s| s >= min_area).collect();
            let mut got: Vec<u64> = split.components.iter().map(|c| c.pixel_count).collect();
            sizes.sort_unstable();
            got.sort_unstable();
            prop_assert_eq!(got, sizes);
        }
    }
}
