//! Rasterizer for scenes: white background, one pure-color glyph per
//! occupied cell, drawn fully inside the cell.

use super::{Scene, GRID};

const COLOR_RGB: [[f64; 3]; 4] = [
    [1.0, 0.0, 0.0], // red
    [0.0, 1.0, 0.0], // green
    [0.0, 0.0, 1.0], // blue
    [1.0, 1.0, 0.0], // yellow
];

/// Render to interleaved RGB in `[0,1]`, `image_px` square, cells of
/// `image_px / 3` pixels. Deterministic given the scene.
pub fn render(scene: &Scene, image_px: usize) -> Vec<f64> {
    assert!(image_px % GRID == 0, "image size must split into a 3x3 grid");
    let cell_px = image_px / GRID;
    let mut pixels = vec![1.0; image_px * image_px * 3];
    for obj in scene.objects() {
        let row = obj.cell / GRID;
        let col = obj.cell % GRID;
        let y0 = row * cell_px;
        let x0 = col * cell_px;
        let rgb = COLOR_RGB[obj.color];
        for ly in 0..cell_px {
            for lx in 0..cell_px {
                if covers(obj.shape, lx, ly, cell_px) {
                    let idx = ((y0 + ly) * image_px + x0 + lx) * 3;
                    pixels[idx] = rgb[0];
                    pixels[idx + 1] = rgb[1];
                    pixels[idx + 2] = rgb[2];
                }
            }
        }
    }
    pixels
}

/// Whether local pixel (lx, ly) of a cell belongs to the glyph. A 2px
/// margin keeps every glyph strictly inside its cell.
fn covers(shape: usize, lx: usize, ly: usize, cell_px: usize) -> bool {
    let m = 2.0;
    let size = cell_px as f64;
    let lo = m;
    let hi = size - m;
    let x = lx as f64 + 0.5;
    let y = ly as f64 + 0.5;
    if x < lo || x >= hi || y < lo || y >= hi {
        return false;
    }
    let c = size / 2.0;
    match shape {
        // circle: disk of radius (size/2 - margin)
        0 => {
            let r = c - m;
            (x - c) * (x - c) + (y - c) * (y - c) <= r * r
        }
        // square: the full inner box
        1 => true,
        // triangle: apex at top-center, base at the bottom of the inner box
        2 => {
            let frac = (y - lo) / (hi - lo);
            let half = frac * (hi - lo) / 2.0;
            (x - c).abs() <= half
        }
        // cross: vertical and horizontal bars through the center
        3 => {
            let bar = (hi - lo) / 3.0;
            (x - c).abs() <= bar / 2.0 || (y - c).abs() <= bar / 2.0
        }
        _ => unreachable!("shape index"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Scene, SceneObject};

    fn scene_one(shape: usize, color: usize, cell: usize) -> Scene {
        Scene::new(vec![SceneObject { shape, color, cell }]).unwrap()
    }

    fn cell_mean(pixels: &[f64], image_px: usize, cell: usize) -> f64 {
        let cell_px = image_px / GRID;
        let row = cell / GRID;
        let col = cell % GRID;
        let mut sum = 0.0;
        for ly in 0..cell_px {
            for lx in 0..cell_px {
                let idx = ((row * cell_px + ly) * image_px + col * cell_px + lx) * 3;
                sum += pixels[idx] + pixels[idx + 1] + pixels[idx + 2];
            }
        }
        sum / (cell_px * cell_px * 3) as f64
    }

    #[test]
    fn empty_cells_stay_white() {
        let px = render(&scene_one(0, 0, 4), 48);
        for cell in [0, 1, 2, 3, 5, 6, 7, 8] {
            assert_eq!(cell_mean(&px, 48, cell), 1.0, "cell {cell} touched");
        }
    }

    #[test]
    fn render_is_deterministic() {
        let s = scene_one(0, 0, 4);
        assert_eq!(render(&s, 48), render(&s, 48));
    }

    #[test]
    fn object_cells_differ_from_white_by_margin() {
        // Every (shape, color) combination must move the cell mean by > 0.05.
        for shape in 0..4 {
            for color in 0..4 {
                let px = render(&scene_one(shape, color, 4), 48);
                let mean = cell_mean(&px, 48, 4);
                assert!(
                    (1.0 - mean) > 0.05,
                    "shape {shape} color {color}: cell mean {mean}"
                );
            }
        }
    }

    #[test]
    fn glyphs_stay_inside_their_cell() {
        for shape in 0..4 {
            let px = render(&scene_one(shape, 2, 4), 48);
            // Border pixels of the center cell must still be white.
            let cell_px = 16;
            for t in 0..cell_px {
                for (y, x) in [
                    (cell_px, cell_px + t),
                    (2 * cell_px - 1, cell_px + t),
                    (cell_px + t, cell_px),
                    (cell_px + t, 2 * cell_px - 1),
                ] {
                    let idx = (y * 48 + x) * 3;
                    assert_eq!(px[idx..idx + 3], [1.0, 1.0, 1.0], "shape {shape} leaked");
                }
            }
        }
    }
}
