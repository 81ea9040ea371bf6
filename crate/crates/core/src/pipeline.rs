//! Image-wide inference: tile the image, predict a mixture per patch, keep
//! confident components, render and stitch per-patch probability maps and
//! read detections off the local maxima.
//!
//! Rendered values are mixture densities in normalized patch units, evaluated
//! at pixel centers `((col + 0.5) / size, (row + 0.5) / size)`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mixture::{constrain, kernel_density, MixtureParams, Point};
use crate::network::Checkpoint;
use crate::synth::patch_pixels;
use crate::tiling::tile_offsets;

/// Gate threshold below which a patch is considered empty.
pub const DEFAULT_E_THRESH: f64 = 0.5;
/// Mixing-coefficient threshold for keeping a component.
pub const DEFAULT_ALPHA_THRESH: f64 = 0.001;
pub const DEFAULT_MIN_DISTANCE_PX: f64 = 6.0;
pub const DEFAULT_PEAK_FRACTION: f64 = 0.05;

/// A kept mixture component, in normalized patch coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Component {
    pub alpha: f64,
    pub mu: Point,
    pub sigma: f64,
}

/// Components of a confident patch whose weight reaches `alpha_thresh`.
/// Empty when the gate is below `e_thresh`.
pub fn filter_components(
    params: &MixtureParams,
    e_thresh: f64,
    alpha_thresh: f64,
) -> Vec<Component> {
    if params.gate_e() < e_thresh {
        return Vec::new();
    }
    (0..params.k())
        .filter(|&k| params.alphas()[k] >= alpha_thresh)
        .map(|k| Component {
            alpha: params.alphas()[k],
            mu: params.mus()[k],
            sigma: params.sigmas()[k],
        })
        .collect()
}

fn component_density(c: &Component, t: Point) -> f64 {
    c.alpha * kernel_density(c.mu, c.sigma, t).expect("kept components have positive sigma")
}

/// Weighted density of the kept components on the pixel grid of one patch.
/// Weights are not renormalized after filtering.
pub fn render_probmap(components: &[Component], patch_size: usize) -> Vec<f64> {
    let mut grid = vec![0.0; patch_size * patch_size];
    if components.is_empty() {
        return grid;
    }
    let size = patch_size as f64;
    for row in 0..patch_size {
        for col in 0..patch_size {
            let t = [(col as f64 + 0.5) / size, (row as f64 + 0.5) / size];
            grid[row * patch_size + col] = components.iter().map(|c| component_density(c, t)).sum();
        }
    }
    grid
}

/// Mixture prediction for one tile.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPrediction {
    /// `(row, col)` of the tile in the image.
    pub offset: (usize, usize),
    pub params: MixtureParams,
}

fn run_pool<R: Send>(workers: usize, job: impl FnOnce() -> R + Send) -> Result<R> {
    if workers <= 1 {
        return Ok(job());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(job))
}

/// Predicts a mixture for every tile, in row-major tile order.
pub fn tile_and_predict(
    image: &GrayImage,
    checkpoint: &Checkpoint,
    stride: usize,
    workers: usize,
) -> Result<Vec<PatchPrediction>> {
    let config = checkpoint.config();
    if config.in_channels != 1 {
        return Err(Error::config(format!(
            "grayscale inference needs a 1-channel network, checkpoint has {}",
            config.in_channels
        )));
    }
    let size = config.patch_size;
    let offsets = tile_offsets(
        image.height() as usize,
        image.width() as usize,
        size,
        stride,
    )?;
    let predict = |&offset: &(usize, usize)| -> Result<PatchPrediction> {
        let raw = checkpoint.forward(&patch_pixels(image, offset, size))?;
        Ok(PatchPrediction {
            offset,
            params: constrain(&raw)?,
        })
    };
    run_pool(workers, || {
        if workers <= 1 {
            offsets.iter().map(predict).collect()
        } else {
            offsets.par_iter().map(predict).collect()
        }
    })?
}

/// Dense per-pixel map over an image.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub width: usize,
    pub height: usize,
    /// Row-major values.
    pub values: Vec<f64>,
    /// Number of patches covering each pixel.
    pub coverage: Vec<u32>,
}

impl ProbabilityMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Combines per-patch grids by averaging over the patches covering each
/// pixel. The result does not depend on the order of `grids`.
pub fn stitch(
    grids: &[((usize, usize), Vec<f64>)],
    patch_size: usize,
    height: usize,
    width: usize,
) -> Result<ProbabilityMap> {
    let mut sum = vec![0.0; height * width];
    let mut coverage = vec![0u32; height * width];
    // Summation in offset order keeps the floating-point result independent
    // of the order the grids arrive in.
    let mut order: Vec<usize> = (0..grids.len()).collect();
    order.sort_by_key(|&i| grids[i].0);
    for ((row0, col0), grid) in order.iter().map(|&i| &grids[i]) {
        if grid.len() != patch_size * patch_size
            || row0 + patch_size > height
            || col0 + patch_size > width
        {
            return Err(Error::config(format!(
                "patch grid at ({row0}, {col0}) does not fit a {height}×{width} map"
            )));
        }
        for r in 0..patch_size {
            let dst = (row0 + r) * width + col0;
            for c in 0..patch_size {
                sum[dst + c] += grid[r * patch_size + c];
                coverage[dst + c] += 1;
            }
        }
    }
    if let Some(i) = coverage.iter().position(|&c| c == 0) {
        return Err(Error::config(format!(
            "pixel ({}, {}) is not covered by any patch",
            i % width,
            i / width
        )));
    }
    let values = sum
        .iter()
        .zip(&coverage)
        .map(|(s, &c)| s / c as f64)
        .collect();
    Ok(ProbabilityMap {
        width,
        height,
        values,
        coverage,
    })
}

/// A detected object center in image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PeakThreshold {
    Absolute(f64),
    /// Fraction of the map maximum.
    Relative(f64),
}

impl PeakThreshold {
    fn resolve(self, map: &ProbabilityMap) -> f64 {
        match self {
            PeakThreshold::Absolute(v) => v,
            PeakThreshold::Relative(f) => f * map.max(),
        }
    }
}

/// Pixels that dominate every other pixel within `min_distance_px`
/// (ties go to the earlier row-major pixel) and exceed the threshold,
/// sorted by descending score.
pub fn find_peaks(
    map: &ProbabilityMap,
    min_distance_px: f64,
    threshold: PeakThreshold,
) -> Vec<Detection> {
    let threshold = threshold.resolve(map);
    let reach = min_distance_px.max(0.0).floor() as i64;
    let r2 = min_distance_px * min_distance_px;
    let mut window = Vec::new();
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            if (dx != 0 || dy != 0) && ((dx * dx + dy * dy) as f64) <= r2 {
                window.push((dx, dy));
            }
        }
    }
    let (w, h) = (map.width as i64, map.height as i64);
    let mut peaks = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let idx = (y * w + x) as usize;
            let v = map.values[idx];
            if v.is_nan() || v <= threshold {
                continue;
            }
            let dominated = window.iter().any(|&(dx, dy)| {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    return false;
                }
                let nidx = (ny * w + nx) as usize;
                let nv = map.values[nidx];
                nv > v || (nv == v && nidx < idx)
            });
            if !dominated {
                peaks.push(Detection {
                    x: x as f64,
                    y: y as f64,
                    score: v,
                });
            }
        }
    }
    peaks.sort_by(|a, b| b.score.total_cmp(&a.score));
    peaks
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectConfig {
    pub stride: usize,
    pub e_thresh: f64,
    pub alpha_thresh: f64,
    pub min_distance_px: f64,
    pub peak_threshold: PeakThreshold,
    pub workers: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            stride: 50,
            e_thresh: DEFAULT_E_THRESH,
            alpha_thresh: DEFAULT_ALPHA_THRESH,
            min_distance_px: DEFAULT_MIN_DISTANCE_PX,
            peak_threshold: PeakThreshold::Relative(DEFAULT_PEAK_FRACTION),
            workers: 1,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.e_thresh) {
            return Err(Error::config("gate threshold must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.alpha_thresh) {
            return Err(Error::config("alpha threshold must lie in [0, 1]"));
        }
        if !(self.min_distance_px >= 0.0 && self.min_distance_px.is_finite()) {
            return Err(Error::config(
                "peak distance must be finite and nonnegative",
            ));
        }
        Ok(())
    }
}

/// Full inference output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub detections: Vec<Detection>,
    pub map: ProbabilityMap,
    pub predictions: Vec<PatchPrediction>,
    pub patch_size: usize,
    pub e_thresh: f64,
    pub alpha_thresh: f64,
}

impl DetectionResult {
    /// Kept component with the largest weighted density at a detection,
    /// over every patch covering it. Scale is in normalized patch units.
    pub fn dominant_component(&self, det: &Detection) -> Option<Component> {
        let size = self.patch_size;
        let (x, y) = (det.x as usize, det.y as usize);
        let mut best: Option<(f64, Component)> = None;
        for p in &self.predictions {
            let (row0, col0) = p.offset;
            if !(row0..row0 + size).contains(&y) || !(col0..col0 + size).contains(&x) {
                continue;
            }
            let t = [
                (x - col0) as f64 / size as f64 + 0.5 / size as f64,
                (y - row0) as f64 / size as f64 + 0.5 / size as f64,
            ];
            for c in filter_components(&p.params, self.e_thresh, self.alpha_thresh) {
                let v = component_density(&c, t);
                if best.is_none_or(|(bv, _)| v > bv) {
                    best = Some((v, c));
                }
            }
        }
        best.map(|(_, c)| c)
    }
}

/// Complete per-image procedure: tile, predict, filter, render, stitch and
/// find peaks.
pub fn detect(
    image: &GrayImage,
    checkpoint: &Checkpoint,
    config: &DetectConfig,
) -> Result<DetectionResult> {
    config.validate()?;
    let size = checkpoint.config().patch_size;
    let predictions = tile_and_predict(image, checkpoint, config.stride, config.workers)?;
    let grids: Vec<((usize, usize), Vec<f64>)> = predictions
        .iter()
        .map(|p| {
            let kept = filter_components(&p.params, config.e_thresh, config.alpha_thresh);
            (p.offset, render_probmap(&kept, size))
        })
        .collect();
    let map = stitch(
        &grids,
        size,
        image.height() as usize,
        image.width() as usize,
    )?;
    let detections = find_peaks(&map, config.min_distance_px, config.peak_threshold);
    Ok(DetectionResult {
        detections,
        map,
        predictions,
        patch_size: size,
        e_thresh: config.e_thresh,
        alpha_thresh: config.alpha_thresh,
    })
}

pub fn write_detections_csv(path: &Path, detections: &[Detection]) -> Result<()> {
    let mut text = String::from("x,y,score\n");
    for d in detections {
        text.push_str(&format!("{},{},{}\n", d.x, d.y, d.score));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a detections CSV. The `x,y,score` header is optional; a missing
/// score column reads as 1.
pub fn read_detections_csv(path: &Path) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with('x')) {
            continue;
        }
        let bad = || {
            Error::format(
                path,
                format!("line {}: expected x,y[,score], got {line:?}", i + 1),
            )
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        out.push(Detection {
            x: num(fields[0])?,
            y: num(fields[1])?,
            score: if fields.len() == 3 {
                num(fields[2])?
            } else {
                1.0
            },
        });
    }
    Ok(out)
}

/// Sidecar holding the scale of a 16-bit probability map PNG.
pub fn probmap_sidecar(png_path: &Path) -> PathBuf {
    png_path.with_extension("max.txt")
}

/// Writes the map as a 16-bit PNG scaled so the maximum maps to 65535, with
/// the maximum recorded in a sidecar text file.
pub fn write_probmap_png(path: &Path, map: &ProbabilityMap) -> Result<()> {
    let max = map.max();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(map.width as u32, map.height as u32, |x, y| {
            let v = map.get(x as usize, y as usize);
            let scaled = if max > 0.0 { v / max * 65535.0 } else { 0.0 };
            Luma([scaled.round().clamp(0.0, 65535.0) as u16])
        });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let sidecar = probmap_sidecar(path);
    fs::write(&sidecar, format!("{max}\n")).map_err(|e| Error::io(&sidecar, e))
}

pub fn write_probmap_csv(path: &Path, map: &ProbabilityMap) -> Result<()> {
    let mut text = String::with_capacity(map.values.len() * 8);
    for row in map.values.chunks_exact(map.width) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        text.push_str(&line.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(alphas: Vec<f64>, gate: f64) -> MixtureParams {
        let k = alphas.len();
        MixtureParams::new(alphas, vec![[0.5, 0.5]; k], vec![0.05; k], gate).unwrap()
    }

    #[test]
    fn low_gate_keeps_nothing() {
        assert!(filter_components(&params(vec![1.0], 0.4), 0.5, 0.001).is_empty());
    }

    #[test]
    fn alpha_threshold_drops_negligible_components() {
        let kept = filter_components(&params(vec![0.9995, 0.0005], 0.9), 0.5, 0.001);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].alpha, 0.9995);
        let kept = filter_components(&params(vec![0.01; 100], 0.9), 0.5, 0.001);
        assert_eq!(kept.len(), 100);
    }

    #[test]
    fn empty_render_is_zero() {
        assert!(render_probmap(&[], 50).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_component_peaks_at_its_pixel() {
        let c = Component {
            alpha: 1.0,
            mu: [25.5 / 50.0, 25.5 / 50.0],
            sigma: 0.05,
        };
        let grid = render_probmap(&[c], 50);
        let argmax = (0..grid.len())
            .max_by(|&a, &b| grid[a].total_cmp(&grid[b]))
            .unwrap();
        assert_eq!(argmax, 25 * 50 + 25);
        // Isotropy: pixels mirrored about the mean render equally.
        let (a, b) = (25 * 50 + 20, 25 * 50 + 30);
        assert!((grid[a] - grid[b]).abs() < 1e-9);
        let (a, b) = (22 * 50 + 25, 25 * 50 + 28);
        assert!((grid[a] - grid[b]).abs() < 1e-9);
    }

    #[test]
    fn non_overlapping_stitch_is_concatenation() {
        let g1: Vec<f64> = (0..4).map(f64::from).collect();
        let g2: Vec<f64> = (4..8).map(f64::from).collect();
        let map = stitch(&[((0, 0), g1), ((0, 2), g2)], 2, 2, 4).unwrap();
        assert_eq!(map.values, vec![0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0]);
        assert!(map.coverage.iter().all(|&c| c == 1));
    }

    #[test]
    fn overlapping_identical_grids_average_to_themselves() {
        let g = vec![2.0; 4];
        let map = stitch(&[((0, 0), g.clone()), ((0, 1), g)], 2, 2, 3).unwrap();
        assert!(map.values.iter().all(|v| *v == 2.0));
        assert_eq!(map.coverage, vec![1, 2, 1, 1, 2, 1]);
    }

    #[test]
    fn uncovered_pixels_are_rejected() {
        assert!(stitch(&[((0, 0), vec![0.0; 4])], 2, 2, 3).is_err());
    }

    #[test]
    fn zero_map_has_no_peaks() {
        let map = stitch(&[((0, 0), vec![0.0; 100])], 10, 10, 10).unwrap();
        assert!(find_peaks(&map, 6.0, PeakThreshold::Relative(0.05)).is_empty());
    }

    #[test]
    fn plateau_tie_goes_to_first_pixel() {
        let mut g = vec![0.0; 100];
        g[33] = 1.0;
        g[34] = 1.0;
        let map = stitch(&[((0, 0), g)], 10, 10, 10).unwrap();
        let peaks = find_peaks(&map, 2.0, PeakThreshold::Absolute(0.5));
        assert_eq!(peaks.len(), 1);
        assert_eq!((peaks[0].x, peaks[0].y), (3.0, 3.0));
    }

    #[test]
    fn default_detect_config_mirrors_thresholds() {
        let c = DetectConfig::default();
        assert_eq!((c.e_thresh, c.alpha_thresh, c.stride), (0.5, 0.001, 50));
        assert!(DetectConfig { e_thresh: 1.5, ..c }.validate().is_err());
    }
}
