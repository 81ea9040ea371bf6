//! Synthetic annotated scenes: bright disk-shaped "nuclei" on a textured,
//! noisy background, plus the point-set dilation and patch cropping used to
//! build training data.
//!
//! Pixel coordinates follow image conventions: origin top-left, `x` is the
//! column, `y` the row. Centers are integer pixels.

use std::f64::consts::TAU;

use image::{GrayImage, Luma};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mixture::{Point, TargetSet};
use crate::tiling::tile_offsets;

/// Integer pixel center `[x, y]`.
pub type Center = [u32; 2];

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub image_size: usize,
    /// Inclusive range of blobs per image.
    pub blob_count: (usize, usize),
    /// Blob radius range in pixels.
    pub blob_radius: (f64, f64),
    pub blob_intensity: (f64, f64),
    pub background_intensity: (f64, f64),
    /// Fraction of blobs placed touching an earlier blob.
    pub touching_fraction: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise_level: f64,
    /// Peak amplitude of the smooth background texture.
    pub texture_amplitude: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 500,
            blob_count: (60, 120),
            blob_radius: (4.0, 9.0),
            blob_intensity: (0.55, 0.85),
            background_intensity: (0.15, 0.3),
            touching_fraction: 0.2,
            noise_level: 0.04,
            texture_amplitude: 0.08,
            seed: 0,
        }
    }
}

fn ordered(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::config(format!(
            "{name} range ({lo}, {hi}) is not ordered"
        )));
    }
    Ok(())
}

impl SceneConfig {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if self.image_size < patch_size || self.image_size < 3 {
            return Err(Error::config(format!(
                "image size {} is smaller than the patch size {patch_size}",
                self.image_size
            )));
        }
        if self.blob_count.0 > self.blob_count.1 {
            return Err(Error::config("blob count range is not ordered"));
        }
        ordered("blob radius", self.blob_radius)?;
        if self.blob_radius.0 <= 0.0 {
            return Err(Error::config("blob radius must be positive"));
        }
        ordered("blob intensity", self.blob_intensity)?;
        ordered("background intensity", self.background_intensity)?;
        for (name, v) in [
            ("touching fraction", self.touching_fraction),
            ("noise level", self.noise_level),
            ("texture amplitude", self.texture_amplitude),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!(
                    "{name} must be finite and nonnegative"
                )));
            }
        }
        if self.touching_fraction > 1.0 {
            return Err(Error::config("touching fraction must be at most 1"));
        }
        Ok(())
    }
}

/// A generated image with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: GrayImage,
    pub centers: Vec<Center>,
    pub radii: Vec<f64>,
}

/// Blobs never come closer than this multiple of their summed radii;
/// touching pairs are placed in `[TOUCH_MIN, TOUCH_MAX]`.
pub const TOUCH_MIN: f64 = 0.8;
pub const TOUCH_MAX: f64 = 1.2;
const PLACEMENT_ATTEMPTS: usize = 2000;
/// Width of the soft blob edge in pixels.
const EDGE_WIDTH: f64 = 0.8;

struct Blob {
    x: f64,
    y: f64,
    radius: f64,
    intensity: f64,
}

impl Blob {
    fn value(&self, px: f64, py: f64) -> f64 {
        let r = ((px - self.x).powi(2) + (py - self.y).powi(2)).sqrt();
        let edge = 1.0 / (1.0 + ((r - self.radius) / EDGE_WIDTH).exp());
        // Slight dome so the center is the brightest point.
        let dome = 1.0 - 0.15 * (r / self.radius).min(1.0).powi(2);
        self.intensity * edge * dome
    }
}

fn placement_ok(blobs: &[Blob], x: f64, y: f64, radius: f64) -> bool {
    blobs.iter().all(|b| {
        let d = ((b.x - x).powi(2) + (b.y - y).powi(2)).sqrt();
        d >= TOUCH_MIN * (b.radius + radius)
    })
}

/// Renders one scene. Deterministic in `config.seed`.
pub fn generate_image(config: &SceneConfig) -> Result<Scene> {
    config.validate(1)?;
    let size = config.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..hi)
        }
    };

    let count = rng.random_range(config.blob_count.0..=config.blob_count.1);
    let lo = 1i64;
    let hi = size as i64 - 2;
    let mut blobs: Vec<Blob> = Vec::with_capacity(count);
    let mut paired = vec![false; count];
    for i in 0..count {
        let radius = uniform(&mut rng, config.blob_radius);
        let intensity = uniform(&mut rng, config.blob_intensity);
        let touching = i > 0 && rng.random_bool(config.touching_fraction);
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let (x, y) = if touching {
                let anchor = rng.random_range(0..blobs.len());
                if paired[anchor] {
                    continue;
                }
                let a = &blobs[anchor];
                let angle = rng.random_range(0.0..TAU);
                let dist = rng.random_range(TOUCH_MIN..TOUCH_MAX) * (a.radius + radius);
                let x = (a.x + dist * angle.cos()).round();
                let y = (a.y + dist * angle.sin()).round();
                let d = ((a.x - x).powi(2) + (a.y - y).powi(2)).sqrt();
                let sum = a.radius + radius;
                if d < TOUCH_MIN * sum || d > TOUCH_MAX * sum {
                    continue;
                }
                (x, y)
            } else {
                (
                    rng.random_range(lo..=hi) as f64,
                    rng.random_range(lo..=hi) as f64,
                )
            };
            if x < lo as f64 || x > hi as f64 || y < lo as f64 || y > hi as f64 {
                continue;
            }
            if placement_ok(&blobs, x, y, radius) {
                placed = Some((x, y));
                break;
            }
        }
        let (x, y) = placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not place blob {} of {count} after {PLACEMENT_ATTEMPTS} attempts; \
                 lower the blob count or radius",
                i + 1
            ))
        })?;
        blobs.push(Blob {
            x,
            y,
            radius,
            intensity,
        });
        if touching {
            paired[i] = true;
        }
    }

    let background = uniform(&mut rng, config.background_intensity);
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let wavelength = rng.random_range(30.0..150.0);
            let angle = rng.random_range(0.0..TAU);
            let phase = rng.random_range(0.0..TAU);
            let amp = rng.random_range(0.5..1.0);
            (
                TAU / wavelength * angle.cos(),
                TAU / wavelength * angle.sin(),
                phase,
                amp,
            )
        })
        .collect();
    let wave_norm: f64 = waves.iter().map(|w| w.3).sum();
    let noise = Normal::new(0.0, config.noise_level.max(0.0)).expect("valid std");

    // Blob lookup grid so each pixel only checks nearby blobs.
    let cell = 32usize;
    let cells = size.div_ceil(cell);
    let mut grid: Vec<Vec<usize>> = vec![Vec::new(); cells * cells];
    for (i, b) in blobs.iter().enumerate() {
        let reach = b.radius + 6.0 * EDGE_WIDTH;
        let c0 = ((b.x - reach).max(0.0) as usize / cell).min(cells - 1);
        let c1 = ((b.x + reach).max(0.0) as usize / cell).min(cells - 1);
        let r0 = ((b.y - reach).max(0.0) as usize / cell).min(cells - 1);
        let r1 = ((b.y + reach).max(0.0) as usize / cell).min(cells - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                grid[r * cells + c].push(i);
            }
        }
    }

    let mut image = GrayImage::new(size as u32, size as u32);
    for row in 0..size {
        for col in 0..size {
            let (px, py) = (col as f64, row as f64);
            let texture: f64 = waves
                .iter()
                .map(|(kx, ky, phase, amp)| amp * (kx * px + ky * py + phase).sin())
                .sum::<f64>()
                / wave_norm;
            let mut v = background + config.texture_amplitude * texture;
            for &i in &grid[(row / cell) * cells + col / cell] {
                v = v.max(blobs[i].value(px, py));
            }
            if config.noise_level > 0.0 {
                v += noise.sample(&mut rng);
            }
            image.put_pixel(
                col as u32,
                row as u32,
                Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8]),
            );
        }
    }

    Ok(Scene {
        image,
        centers: blobs.iter().map(|b| [b.x as u32, b.y as u32]).collect(),
        radii: blobs.iter().map(|b| b.radius).collect(),
    })
}

/// Point-set dilation of annotated centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DilationConfig {
    pub n_samples: usize,
    pub radius_px: f64,
    /// Keep the annotated center itself as a target next to its samples.
    pub include_center: bool,
}

impl Default for DilationConfig {
    fn default() -> Self {
        Self {
            n_samples: 10,
            radius_px: 6.0,
            include_center: true,
        }
    }
}

const DILATION_ATTEMPTS: usize = 1000;

/// Samples `n_samples` points around each patch-local pixel center from an
/// isotropic Gaussian with std `radius_px / 3`, rejecting draws farther than
/// `radius_px` from the center or outside the patch. Output is normalized by
/// `patch_size`.
pub fn dilate_points(
    centers: &[Point],
    n_samples: usize,
    radius_px: f64,
    patch_size: usize,
    seed: u64,
) -> Result<TargetSet> {
    if n_samples == 0 {
        return Err(Error::config(
            "dilation needs at least one sample per center",
        ));
    }
    if !(radius_px >= 0.0 && radius_px.is_finite()) {
        return Err(Error::config(
            "dilation radius must be finite and nonnegative",
        ));
    }
    let size = patch_size as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, radius_px / 3.0).expect("valid std");
    let mut points = Vec::with_capacity(centers.len() * n_samples);
    for c in centers {
        if !c.iter().all(|v| (0.0..=size).contains(v)) {
            return Err(Error::config(format!(
                "center ({}, {}) lies outside the {patch_size}-pixel patch",
                c[0], c[1]
            )));
        }
        for _ in 0..n_samples {
            let mut p = *c;
            for _ in 0..DILATION_ATTEMPTS {
                let q = [
                    c[0] + normal.sample(&mut rng),
                    c[1] + normal.sample(&mut rng),
                ];
                let d2 = (q[0] - c[0]).powi(2) + (q[1] - c[1]).powi(2);
                if d2 <= radius_px * radius_px && q.iter().all(|v| (0.0..=size).contains(v)) {
                    p = q;
                    break;
                }
            }
            points.push([p[0] / size, p[1] / size]);
        }
    }
    TargetSet::new(points)
}

/// One training or inference patch cut from a parent image.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    /// Row-major grayscale values in `[0, 1]`.
    pub pixels: Vec<f32>,
    /// Normalized dilated targets.
    pub targets: TargetSet,
    /// Annotated centers inside the patch, in global pixel coordinates.
    pub raw_centers: Vec<Center>,
    /// `(row, col)` of the patch's top-left pixel in the parent image.
    pub offset: (usize, usize),
    pub parent_id: String,
}

/// Mixes a base seed with two indices into an independent stream seed.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Normalized grayscale values of an image region.
pub fn patch_pixels(image: &GrayImage, offset: (usize, usize), size: usize) -> Vec<f32> {
    let (row0, col0) = offset;
    let mut pixels = Vec::with_capacity(size * size);
    for r in row0..row0 + size {
        for c in col0..col0 + size {
            pixels.push(image.get_pixel(c as u32, r as u32)[0] as f32 / 255.0);
        }
    }
    pixels
}

/// Cuts `image` into patches and attaches the dilated targets of the centers
/// each patch contains (half-open `[offset, offset + size)` on both axes).
/// Patches without centers are kept with an empty target set.
pub fn crop_patches(
    image: &GrayImage,
    centers: &[Center],
    patch_size: usize,
    stride: usize,
    dilation: &DilationConfig,
    parent_id: &str,
    seed: u64,
) -> Result<Vec<PatchRecord>> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let offsets = tile_offsets(h, w, patch_size, stride)?;
    let mut records = Vec::with_capacity(offsets.len());
    for (idx, &(row, col)) in offsets.iter().enumerate() {
        let inside: Vec<Center> = centers
            .iter()
            .copied()
            .filter(|c| {
                let (x, y) = (c[0] as usize, c[1] as usize);
                (col..col + patch_size).contains(&x) && (row..row + patch_size).contains(&y)
            })
            .collect();
        let local: Vec<Point> = inside
            .iter()
            .map(|c| [(c[0] as usize - col) as f64, (c[1] as usize - row) as f64])
            .collect();
        let mut points = Vec::new();
        if dilation.include_center {
            points.extend(
                local
                    .iter()
                    .map(|p| [p[0] / patch_size as f64, p[1] / patch_size as f64]),
            );
        }
        if !local.is_empty() && dilation.n_samples > 0 {
            let dilated = dilate_points(
                &local,
                dilation.n_samples,
                dilation.radius_px,
                patch_size,
                derive_seed(seed, idx as u64, 0),
            )?;
            points.extend_from_slice(dilated.points());
        }
        records.push(PatchRecord {
            pixels: patch_pixels(image, (row, col), patch_size),
            targets: TargetSet::new(points)?,
            raw_centers: inside,
            offset: (row, col),
            parent_id: parent_id.to_string(),
        });
    }
    Ok(records)
}

/// An image with its center annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub image: GrayImage,
    pub centers: Vec<Center>,
}

/// Removes `⌊fraction · N⌋` of the `N` centers across the whole dataset,
/// chosen uniformly. Pixels are untouched.
pub fn drop_annotations(
    dataset: &[AnnotatedImage],
    fraction: f64,
    seed: u64,
) -> Result<Vec<AnnotatedImage>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::config(format!(
            "drop fraction {fraction} must lie in [0, 1)"
        )));
    }
    let total: usize = dataset.iter().map(|d| d.centers.len()).sum();
    // The epsilon absorbs representation error such as 0.3 * 1000 = 299.999...
    let n_drop = ((fraction * total as f64) + 1e-9).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dropped = vec![false; total];
    for i in sample(&mut rng, total, n_drop) {
        dropped[i] = true;
    }
    let mut next = 0;
    Ok(dataset
        .iter()
        .map(|d| {
            let centers = d
                .centers
                .iter()
                .filter(|_| {
                    let keep = !dropped[next];
                    next += 1;
                    keep
                })
                .copied()
                .collect();
            AnnotatedImage {
                id: d.id.clone(),
                image: d.image.clone(),
                centers,
            }
        })
        .collect())
}

/// Crops every image of a dataset into training patches.
pub fn build_patches(
    dataset: &[AnnotatedImage],
    patch_size: usize,
    stride: usize,
    dilation: &DilationConfig,
    seed: u64,
) -> Result<Vec<PatchRecord>> {
    let mut out = Vec::new();
    for (i, d) in dataset.iter().enumerate() {
        out.extend(crop_patches(
            &d.image,
            &d.centers,
            patch_size,
            stride,
            dilation,
            &d.id,
            derive_seed(seed, i as u64, 1),
        )?);
    }
    Ok(out)
}

/// Generates `count` scenes with per-image seeds derived from `config.seed`.
pub fn generate_dataset(
    config: &SceneConfig,
    count: usize,
    id_prefix: &str,
) -> Result<Vec<AnnotatedImage>> {
    (0..count)
        .map(|i| {
            let scene = generate_image(&SceneConfig {
                seed: derive_seed(config.seed, i as u64, 2),
                ..config.clone()
            })?;
            Ok(AnnotatedImage {
                id: format!("{id_prefix}{i:04}"),
                image: scene.image,
                centers: scene.centers,
            })
        })
        .collect()
}
