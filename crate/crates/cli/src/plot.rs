//! Bar chart of the agreement histogram as a PNG, drawn pixel by pixel.

use image::{Rgb, RgbImage};

use wadeable::dataset::AgreementStats;

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: u32 = 40;
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const BAR: Rgb<u8> = Rgb([52, 101, 164]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

fn fill(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, color: Rgb<u8>) {
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            img.put_pixel(x, y, color);
        }
    }
}

/// One bar per bin, heights relative to the tallest bin, with horizontal
/// grid lines at quarters of that height and a tick under each bin edge.
pub fn histogram_png(stats: &AgreementStats) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let plot_w = WIDTH - 2 * MARGIN;
    let plot_h = HEIGHT - 2 * MARGIN;
    let base = HEIGHT - MARGIN;
    for q in 1..=4 {
        let y = base - plot_h * q / 4;
        fill(&mut img, MARGIN, y, WIDTH - MARGIN, y + 1, GRID);
    }
    let n = stats.histogram.len().max(1) as u32;
    let slot = plot_w / n;
    let max = stats.histogram.iter().map(|b| b.count).max().unwrap_or(0);
    for (i, bin) in stats.histogram.iter().enumerate() {
        let x0 = MARGIN + slot * i as u32;
        if max > 0 && bin.count > 0 {
            let h = ((bin.count as f64 / max as f64) * plot_h as f64).round().max(1.0) as u32;
            fill(&mut img, x0 + 2, base - h, x0 + slot - 2, base, BAR);
        }
        fill(&mut img, x0, base, x0 + 1, base + 6, AXIS);
    }
    fill(&mut img, MARGIN + slot * n, base, MARGIN + slot * n + 1, base + 6, AXIS);
    fill(&mut img, MARGIN, base, WIDTH - MARGIN + 1, base + 1, AXIS);
    fill(&mut img, MARGIN, MARGIN, MARGIN + 1, base + 1, AXIS);
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use wadeable::dataset::HistogramBin;

    #[test]
    fn tallest_bar_reaches_top() {
        let mut stats = AgreementStats::empty(0.25).unwrap();
        stats.histogram[0] = HistogramBin { lo: 0.0, hi: 0.25, count: 4 };
        stats.histogram[2] = HistogramBin { lo: 0.5, hi: 0.75, count: 2 };
        let img = histogram_png(&stats);
        let slot = (WIDTH - 2 * MARGIN) / 6;
        let mid = |i: u32| MARGIN + slot * i + slot / 2;
        assert_eq!(*img.get_pixel(mid(0), MARGIN + 1), BAR);
        assert_ne!(*img.get_pixel(mid(2), MARGIN + 1), BAR);
        assert_eq!(*img.get_pixel(mid(2), HEIGHT - MARGIN - 2), BAR);
        assert_ne!(*img.get_pixel(mid(1), HEIGHT - MARGIN - 2), BAR);
    }
}
