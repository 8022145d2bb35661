//! Image loading, tensor conversion, the synthetic test corpus and training
//! crops.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

/// `[1, 3, H, W]` tensor in `[0, 1]` from an 8-bit image.
pub fn image_to_tensor(img: &RgbImage, device: &Device) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut v = vec![0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            v[(c * h + y as usize) * w + x as usize] = p[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(v, (1, 3, h, w), device)?)
}

/// Rounds a `[1, 3, H, W]` tensor in `[0, 1]` back to 8 bits.
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let (b, c, h, w) = t.dims4()?;
    if b != 1 || c != 3 {
        return Err(Error::Shape(format!("expected [1, 3, H, W], got {:?}", t.dims())));
    }
    let v = t.flatten_all()?.to_vec1::<f32>()?;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| (v[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([at(0), at(1), at(2)])
    }))
}

fn is_image_path(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Lazily decoded images of a folder, in sorted file-name order.
pub struct Dataset {
    paths: std::vec::IntoIter<PathBuf>,
}

impl Iterator for Dataset {
    type Item = (String, RgbImage);

    fn next(&mut self) -> Option<Self::Item> {
        for path in self.paths.by_ref() {
            match image::open(&path) {
                Ok(img) => {
                    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                    return Some((name, img.to_rgb8()));
                }
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
        None
    }
}

/// Images under `path` (a folder, or a single image file). Unreadable files
/// are skipped with a warning.
pub fn ingest_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut paths = if path.is_file() {
        vec![path.to_path_buf()]
    } else {
        let mut v = Vec::new();
        for entry in std::fs::read_dir(path)? {
            let p = entry?.path();
            if p.is_file() && is_image_path(&p) {
                v.push(p);
            }
        }
        v
    };
    paths.sort();
    if paths.is_empty() {
        log::warn!("no images found in {}", path.display());
    }
    Ok(Dataset { paths: paths.into_iter() })
}

/// Kinds of synthetic image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Synthetic {
    Gradient,
    Checkerboard,
    SmoothNoise,
    WhiteNoise,
    Flat,
}

impl Synthetic {
    pub const ALL: [Synthetic; 5] =
        [Synthetic::Gradient, Synthetic::Checkerboard, Synthetic::SmoothNoise, Synthetic::WhiteNoise, Synthetic::Flat];

    pub fn name(self) -> &'static str {
        match self {
            Synthetic::Gradient => "gradient",
            Synthetic::Checkerboard => "checker",
            Synthetic::SmoothNoise => "smooth",
            Synthetic::WhiteNoise => "noise",
            Synthetic::Flat => "flat",
        }
    }
}

/// Band-limited noise: bilinear upsampling of a coarse random grid.
fn smooth_noise<R: Rng>(w: u32, h: u32, cell: u32, rng: &mut R) -> RgbImage {
    let gw = w / cell + 2;
    let gh = h / cell + 2;
    let grid: Vec<[f32; 3]> = (0..gw * gh).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    RgbImage::from_fn(w, h, |x, y| {
        let fx = x as f32 / cell as f32;
        let fy = y as f32 / cell as f32;
        let (x0, y0) = (fx as u32, fy as u32);
        let (tx, ty) = (fx - x0 as f32, fy - y0 as f32);
        let g = |i: u32, j: u32| grid[(j * gw + i) as usize];
        let mut px = [0u8; 3];
        for (c, out) in px.iter_mut().enumerate() {
            let top = g(x0, y0)[c] * (1.0 - tx) + g(x0 + 1, y0)[c] * tx;
            let bot = g(x0, y0 + 1)[c] * (1.0 - tx) + g(x0 + 1, y0 + 1)[c] * tx;
            *out = ((top * (1.0 - ty) + bot * ty) * 255.0).round() as u8;
        }
        Rgb(px)
    })
}

pub fn synthetic_image<R: Rng>(kind: Synthetic, w: u32, h: u32, rng: &mut R) -> RgbImage {
    match kind {
        Synthetic::Gradient => {
            let a: [f32; 3] = [rng.random(), rng.random(), rng.random()];
            let b: [f32; 3] = [rng.random(), rng.random(), rng.random()];
            let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            let span = (w as f32).hypot(h as f32).max(1.0);
            RgbImage::from_fn(w, h, |x, y| {
                let t = (((x as f32 - w as f32 / 2.0) * dx + (y as f32 - h as f32 / 2.0) * dy) / span + 0.5).clamp(0.0, 1.0);
                Rgb(std::array::from_fn(|c| ((a[c] * (1.0 - t) + b[c] * t) * 255.0).round() as u8))
            })
        }
        Synthetic::Checkerboard => {
            let cell = rng.random_range(4..=16u32);
            let a: [u8; 3] = std::array::from_fn(|_| rng.random());
            let b: [u8; 3] = std::array::from_fn(|_| rng.random());
            RgbImage::from_fn(w, h, |x, y| if (x / cell + y / cell) % 2 == 0 { Rgb(a) } else { Rgb(b) })
        }
        Synthetic::SmoothNoise => {
            let cell = rng.random_range(4..=16u32);
            smooth_noise(w, h, cell, rng)
        }
        Synthetic::WhiteNoise => RgbImage::from_fn(w, h, |_, _| Rgb(std::array::from_fn(|_| rng.random()))),
        Synthetic::Flat => {
            let v: [u8; 3] = std::array::from_fn(|_| rng.random());
            RgbImage::from_pixel(w, h, Rgb(v))
        }
    }
}

/// `count` deterministic `size × size` images cycling through the synthetic
/// kinds, named `{kind}-{index}`.
pub fn synthetic_corpus(seed: u64, count: usize, size: u32) -> Vec<(String, RgbImage)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let kind = Synthetic::ALL[i % Synthetic::ALL.len()];
            (format!("{}-{i:03}", kind.name()), synthetic_image(kind, size, size, &mut rng))
        })
        .collect()
}

/// Natural-looking training content: sums of smooth noise at several cell
/// sizes blended with hard edges.
pub fn training_image<R: Rng>(size: u32, rng: &mut R) -> RgbImage {
    let layers: Vec<RgbImage> = [32u32, 12, 4].iter().map(|&c| smooth_noise(size, size, c, rng)).collect();
    let weights = [0.55f32, 0.3, 0.15];
    let edge_kind = rng.random_range(0..3);
    let cell = rng.random_range(6..=20u32);
    RgbImage::from_fn(size, size, |x, y| {
        let mut px = [0u8; 3];
        let edge = match edge_kind {
            0 => ((x / cell + y / cell) % 2) as f32,
            1 => ((x / cell) % 2) as f32,
            _ => 0.5,
        };
        for (c, out) in px.iter_mut().enumerate() {
            let mut v: f32 = layers.iter().zip(weights).map(|(l, w)| l.get_pixel(x, y)[c] as f32 * w).sum();
            v = 0.8 * v + 0.2 * edge * 255.0;
            *out = v.round().clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    })
}

/// Source of square training crops: random crops of the loaded images, or
/// procedurally generated content when no images are given.
pub struct CropSampler {
    images: Vec<RgbImage>,
    crop: u32,
    rng: ChaCha8Rng,
}

impl CropSampler {
    pub fn new(images: Vec<RgbImage>, crop: u32, seed: u64) -> Result<Self> {
        if crop == 0 || crop % 64 != 0 {
            return Err(invalid(format!("crop size {crop} must be a positive multiple of 64")));
        }
        let images: Vec<RgbImage> = images.into_iter().filter(|i| i.width() >= crop && i.height() >= crop).collect();
        Ok(Self { images, crop, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn from_folder(path: impl AsRef<Path>, crop: u32, seed: u64) -> Result<Self> {
        Self::new(ingest_dataset(path)?.map(|(_, i)| i).collect(), crop, seed)
    }

    pub fn crop_size(&self) -> u32 {
        self.crop
    }

    fn one(&mut self) -> RgbImage {
        if self.images.is_empty() {
            return training_image(self.crop, &mut self.rng);
        }
        let img = self.images.choose(&mut self.rng).expect("nonempty");
        let x = self.rng.random_range(0..=img.width() - self.crop);
        let y = self.rng.random_range(0..=img.height() - self.crop);
        let mut out = image::imageops::crop_imm(img, x, y, self.crop, self.crop).to_image();
        if self.rng.random_bool(0.5) {
            image::imageops::flip_horizontal_in_place(&mut out);
        }
        out
    }

    /// `[batch, 3, crop, crop]` in `[0, 1]`.
    pub fn batch(&mut self, batch: usize, device: &Device) -> Result<Tensor> {
        let items = (0..batch)
            .map(|_| {
                let img = self.one();
                image_to_tensor(&img, device)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&items, 0)?)
    }
}
