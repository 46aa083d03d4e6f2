use std::path::Path;

use dayolo::data::{write_png, RgbImage};
use dayolo::model::Detection;
use dayolo::Result;

const PALETTE: [[u8; 3]; 6] = [
    [255, 64, 64],
    [64, 220, 64],
    [80, 120, 255],
    [255, 200, 0],
    [255, 0, 255],
    [0, 230, 230],
];

/// Copy of `img` with a two-pixel outline around every detection.
pub fn annotate(img: &RgbImage, dets: &[Detection], out: &Path) -> Result<()> {
    let mut canvas = img.clone();
    let (w, h) = (img.width as f64, img.height as f64);
    for d in dets {
        let color = PALETTE[d.class_id() % PALETTE.len()];
        let (x1, y1, x2, y2) = d.bbox.corners();
        let px = |v: f64, n: f64| ((v * n).round().max(0.0) as usize).min(n as usize - 1);
        let (x1, x2, y1, y2) = (px(x1, w), px(x2, w), px(y1, h), px(y2, h));
        for t in 0..2 {
            for x in x1..=x2 {
                canvas.set(x, (y1 + t).min(y2), color);
                canvas.set(x, y2.saturating_sub(t).max(y1), color);
            }
            for y in y1..=y2 {
                canvas.set((x1 + t).min(x2), y, color);
                canvas.set(x2.saturating_sub(t).max(x1), y, color);
            }
        }
    }
    write_png(out, &canvas)
}
