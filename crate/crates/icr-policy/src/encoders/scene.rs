//! Deterministic scene rendering and image preprocessing.
//!
//! When the clipart art pack is available (directory of png assets named as
//! in the inventory), scenes are composited from the real art. Without it, a
//! documented fallback draws one solid rectangle per placed clipart, color
//! keyed by clipart id, exactly covering its bounding box. Both modes are
//! bit-deterministic and draw far-to-near so closer cliparts occlude.

use std::path::Path;

use image::{Rgb, RgbImage, RgbaImage};

use crate::error::Result;
use crate::game_state::{compute_bounding_box, inventory::inventory, Gallery};
use crate::{CANVAS_HEIGHT, CANVAS_WIDTH};

/// Default square render resolution; divisible by the backbone stride 32.
pub const RENDER_RESOLUTION: u32 = 224;

/// Background color of the fallback renderer.
pub const BACKGROUND: Rgb<u8> = Rgb([236, 240, 241]);

/// Channel normalisation applied before a backbone.
#[derive(Debug, Clone, Copy)]
pub struct ImageNorm {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

/// The ImageNet statistics used by the pretrained backbones.
pub const IMAGENET_NORM: ImageNorm = ImageNorm {
    mean: [0.485, 0.456, 0.406],
    std: [0.229, 0.224, 0.225],
};

fn id_color(idx: usize) -> Rgb<u8> {
    // evenly spaced hues over the inventory
    let h = (idx as f32) * 360.0 / 58.0;
    let (r, g, b) = hsv_to_rgb(h, 0.65, 0.85);
    Rgb([r, g, b])
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (u8, u8, u8) {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (
        ((r + m) * 255.0) as u8,
        ((g + m) * 255.0) as u8,
        ((b + m) * 255.0) as u8,
    )
}

/// Pixel bounds of a clipart's box at the given resolution, clipped to the
/// image. Returns `None` when fully outside.
fn pixel_box(
    x: f32,
    y: f32,
    w: f32,
    h: f32,
    res: u32,
) -> Option<(u32, u32, u32, u32)> {
    let sx = res as f32 / CANVAS_WIDTH;
    let sy = res as f32 / CANVAS_HEIGHT;
    let x0 = ((x - w / 2.0) * sx).floor().max(0.0) as i64;
    let y0 = ((y - h / 2.0) * sy).floor().max(0.0) as i64;
    let x1 = (((x + w / 2.0) * sx).ceil() as i64).min(res as i64);
    let y1 = (((y + h / 2.0) * sy).ceil() as i64).min(res as i64);
    if x0 >= x1 || y0 >= y1 {
        return None;
    }
    Some((x0 as u32, y0 as u32, x1 as u32, y1 as u32))
}

/// Render a gallery state into an RGB image.
///
/// `assets` points at the clipart art pack; `None` selects the fallback
/// renderer. Cliparts are drawn in decreasing size-category order (distant
/// first), ties broken by id, so the composition is deterministic.
pub fn render_scene(gallery: &Gallery, resolution: u32, assets: Option<&Path>) -> RgbImage {
    let mut img = RgbImage::from_pixel(resolution, resolution, BACKGROUND);
    let mut order: Vec<usize> = gallery
        .cliparts()
        .iter()
        .enumerate()
        .filter(|(_, c)| c.present)
        .map(|(i, _)| i)
        .collect();
    order.sort_by_key(|&i| {
        let c = &gallery.cliparts()[i];
        (std::cmp::Reverse(c.size), c.id)
    });
    for i in order {
        let c = &gallery.cliparts()[i];
        let b = compute_bounding_box(c).expect("present clipart");
        let Some((x0, y0, x1, y1)) = pixel_box(b.x_center, b.y_center, b.width, b.height, resolution)
        else {
            continue;
        };
        let mut drawn = false;
        if let Some(dir) = assets {
            let class = inventory().get(c.id);
            let path = dir.join(class.png_name(c.pose, c.face));
            if let Ok(art) = image::open(&path) {
                let mut art: RgbaImage = art.to_rgba8();
                if c.orientation == 2 {
                    art = image::imageops::flip_horizontal(&art);
                }
                let resized = image::imageops::resize(
                    &art,
                    x1 - x0,
                    y1 - y0,
                    image::imageops::FilterType::Triangle,
                );
                for (dx, dy, px) in resized.enumerate_pixels() {
                    let a = px.0[3] as u32;
                    if a == 0 {
                        continue;
                    }
                    let dst = img.get_pixel_mut(x0 + dx, y0 + dy);
                    for ch in 0..3 {
                        let src = px.0[ch] as u32;
                        let bg = dst.0[ch] as u32;
                        dst.0[ch] = ((src * a + bg * (255 - a)) / 255) as u8;
                    }
                }
                drawn = true;
            }
        }
        if !drawn {
            let color = id_color(c.id.index());
            for py in y0..y1 {
                for px in x0..x1 {
                    img.put_pixel(px, py, color);
                }
            }
        }
    }
    img
}

/// Flatten an image into normalised CHW f32 data for a backbone.
pub fn preprocess_image(img: &RgbImage, norm: ImageNorm) -> Vec<f32> {
    let (w, h) = img.dimensions();
    let mut out = vec![0.0f32; (3 * w * h) as usize];
    let plane = (w * h) as usize;
    for (x, y, px) in img.enumerate_pixels() {
        let base = (y * w + x) as usize;
        for ch in 0..3 {
            let v = px.0[ch] as f32 / 255.0;
            out[ch * plane + base] = (v - norm.mean[ch]) / norm.std[ch];
        }
    }
    out
}

/// CHW image data for one gallery state, ready for [`super::backbone`].
pub fn render_and_preprocess(
    gallery: &Gallery,
    resolution: u32,
    assets: Option<&Path>,
    norm: ImageNorm,
) -> Result<Vec<f32>> {
    let img = render_scene(gallery, resolution, assets);
    Ok(preprocess_image(&img, norm))
}
