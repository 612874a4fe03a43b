//! Synthetic images and dataset scaffolding shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rgb8 = ImageBuffer<Rgb<u8>, Vec<u8>>;

/// Random rectangles over a fine checker texture; sharp edges everywhere.
pub fn scene(width: u32, height: u32, seed: u64) -> Rgb8 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [u8; 3] = rng.gen();
    let mut img = ImageBuffer::from_fn(width, height, |x, y| {
        let checker = if (x / 3 + y / 3) % 2 == 0 { 40 } else { 0 };
        Rgb(base.map(|c| c.saturating_add(checker)))
    });
    for _ in 0..40 {
        let (w, h) = (rng.gen_range(4..width / 3), rng.gen_range(4..height / 3));
        let (x0, y0) = (rng.gen_range(0..width - w), rng.gen_range(0..height - h));
        let color: [u8; 3] = rng.gen();
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                img.put_pixel(x, y, Rgb(color));
            }
        }
    }
    img
}

/// Gaussian blur with standard deviation `sigma` (identity for 0).
pub fn blurred(img: &Rgb8, sigma: f32) -> Rgb8 {
    if sigma <= 0.0 {
        img.clone()
    } else {
        image::imageops::blur(img, sigma)
    }
}

/// Blur strengths and the matching MOS, which decreases with blur.
pub fn blur_levels(n: usize, max_sigma: f32) -> Vec<(f32, f64)> {
    (0..n)
        .map(|i| {
            let sigma = max_sigma * i as f32 / (n - 1).max(1) as f32;
            (sigma, 100.0 * (-(sigma as f64) / 3.0).exp())
        })
        .collect()
}

pub fn to_core(img: &Rgb8) -> iqa_core::image::RgbImage {
    iqa_core::image::RgbImage::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw()).unwrap()
}

pub fn save_png(img: &Rgb8, path: &Path) {
    img.save_with_format(path, image::ImageFormat::Png).unwrap();
}

pub fn save_ppm(img: &Rgb8, path: &Path) {
    img.save_with_format(path, image::ImageFormat::Pnm).unwrap();
}

/// Writes blurred scenes plus a manifest. Splits cycle through `splits`.
pub fn write_dataset(dir: &Path, count: usize, size: u32, splits: &[&str]) -> PathBuf {
    let mut csv = String::from("path,mos,split\n");
    for (i, (sigma, mos)) in blur_levels(count, 4.0).into_iter().enumerate() {
        let img = blurred(&scene(size, size, 100 + i as u64), sigma);
        let name = if i % 2 == 0 { format!("img{i}.png") } else { format!("img{i}.ppm") };
        let path = dir.join(&name);
        if i % 2 == 0 {
            save_png(&img, &path);
        } else {
            save_ppm(&img, &path);
        }
        csv.push_str(&format!("{name},{mos},{}\n", splits[i % splits.len()]));
    }
    let manifest = dir.join("manifest.csv");
    std::fs::write(&manifest, csv).unwrap();
    manifest
}

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

/// A fast configuration for small images.
pub const SMALL_CONFIG: &str = "\
patch_size = 32
grid_n = 8
k = 3
d = 8
layers = 2
gate_hidden = 8
head_hidden = 8
batch_size = 4
epochs = 3
lr = 0.003
seed = 5
";
