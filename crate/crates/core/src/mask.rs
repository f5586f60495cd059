//! Binary mask helpers shared by dataset validation, cropping and cost-maps.
//!
//! A mask pixel is foreground when its value is non-zero; dataset masks use
//! 0 for background and 255 for the instance.

use std::fmt;

use image::GrayImage;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Self {
        debug_assert!(x_min <= x_max && y_min <= y_max);
        BBox { x_min, y_min, x_max, y_max }
    }

    pub fn point(x: u32, y: u32) -> Self {
        BBox::new(x, y, x, y)
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min + 1
    }

    pub fn include(&mut self, x: u32, y: u32) {
        self.x_min = self.x_min.min(x);
        self.y_min = self.y_min.min(y);
        self.x_max = self.x_max.max(x);
        self.y_max = self.y_max.max(y);
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "x:[{},{}] y:[{},{}]",
            self.x_min, self.x_max, self.y_min, self.y_max
        )
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        [self.x_min, self.y_min, self.x_max, self.y_max].serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [x_min, y_min, x_max, y_max] = <[u32; 4]>::deserialize(deserializer)?;
        if x_min > x_max || y_min > y_max {
            return Err(serde::de::Error::custom("bbox min exceeds max"));
        }
        Ok(BBox { x_min, y_min, x_max, y_max })
    }
}

#[inline]
pub fn is_foreground(value: u8) -> bool {
    value != 0
}

/// Foreground pixel count and tight bounding box, or `None` for an empty mask.
pub fn foreground_stats(mask: &GrayImage) -> Option<(u64, BBox)> {
    let mut count = 0u64;
    let mut bbox: Option<BBox> = None;
    for (x, y, p) in mask.enumerate_pixels() {
        if is_foreground(p.0[0]) {
            count += 1;
            match bbox.as_mut() {
                Some(b) => b.include(x, y),
                None => bbox = Some(BBox::point(x, y)),
            }
        }
    }
    bbox.map(|b| (count, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Luma;

    #[test]
    fn stats_of_empty_mask() {
        assert_eq!(foreground_stats(&GrayImage::new(5, 5)), None);
    }

    #[test]
    fn stats_of_scattered_pixels() {
        let mut m = GrayImage::new(10, 8);
        m.put_pixel(2, 3, Luma([255]));
        m.put_pixel(7, 1, Luma([255]));
        m.put_pixel(4, 6, Luma([1]));
        assert_eq!(foreground_stats(&m), Some((3, BBox::new(2, 1, 7, 6))));
    }

    #[test]
    fn bbox_serializes_as_array() {
        let b = BBox::new(1, 2, 3, 4);
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1,2,3,4]");
        assert!(serde_json::from_str::<BBox>("[3,0,1,0]").is_err());
    }
}
