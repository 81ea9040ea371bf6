//! On-disk dataset layout.
//!
//! A dataset directory holds one 8-bit grayscale PNG per image, a sibling CSV
//! of integer `x,y` centers (no header, one per line) and `manifest.txt`
//! whose lines read `image_path,csv_path,split` with paths relative to the
//! directory and `split` either `train` or `test`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::GrayImage;

use crate::error::{Error, Result};
use crate::synth::{AnnotatedImage, Center};

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub csv_path: PathBuf,
    pub split: Split,
}

/// First half of `n` images trains, the rest tests.
pub fn halves(n: usize) -> Vec<Split> {
    (0..n)
        .map(|i| {
            if i < n.div_ceil(2) {
                Split::Train
            } else {
                Split::Test
            }
        })
        .collect()
}

pub fn write_centers_csv(path: &Path, centers: &[Center]) -> Result<()> {
    let mut text = String::with_capacity(centers.len() * 8);
    for c in centers {
        text.push_str(&format!("{},{}\n", c[0], c[1]));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_centers_csv(path: &Path) -> Result<Vec<Center>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = || {
                Error::format(
                    path,
                    format!("line {}: expected \"x,y\", got {line:?}", i + 1),
                )
            };
            let (x, y) = line.trim().split_once(',').ok_or_else(bad)?;
            Ok([
                x.trim().parse().map_err(|_| bad())?,
                y.trim().parse().map_err(|_| bad())?,
            ])
        })
        .collect()
}

pub fn save_png(path: &Path, image: &GrayImage) -> Result<()> {
    image.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads any PNG as 8-bit grayscale.
pub fn load_png(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })?;
    Ok(img.to_luma8())
}

/// Writes images, center lists and the manifest into `dir` (created if
/// missing).
pub fn write_dataset(
    dir: &Path,
    images: &[AnnotatedImage],
    splits: &[Split],
) -> Result<Vec<ManifestEntry>> {
    if images.len() != splits.len() {
        return Err(Error::config("every image needs exactly one split"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(images.len());
    let mut manifest = String::new();
    for (img, &split) in images.iter().zip(splits) {
        let image_path = PathBuf::from(format!("{}.png", img.id));
        let csv_path = PathBuf::from(format!("{}.csv", img.id));
        save_png(&dir.join(&image_path), &img.image)?;
        write_centers_csv(&dir.join(&csv_path), &img.centers)?;
        manifest.push_str(&format!(
            "{},{},{}\n",
            image_path.display(),
            csv_path.display(),
            split
        ));
        entries.push(ManifestEntry {
            image_path,
            csv_path,
            split,
        });
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let [image, csv, split] = fields[..] else {
                return Err(Error::format(
                    &path,
                    format!("line {}: expected image_path,csv_path,split", i + 1),
                ));
            };
            Ok(ManifestEntry {
                image_path: PathBuf::from(image),
                csv_path: PathBuf::from(csv),
                split: split
                    .parse()
                    .map_err(|e: String| Error::format(&path, format!("line {}: {e}", i + 1)))?,
            })
        })
        .collect()
}

/// Loads every manifest entry with its split.
pub fn load_dataset(dir: &Path) -> Result<Vec<(AnnotatedImage, Split)>> {
    read_manifest(dir)?
        .into_iter()
        .map(|e| {
            let image = load_png(&dir.join(&e.image_path))?;
            let centers = read_centers_csv(&dir.join(&e.csv_path))?;
            let id = e.image_path.file_stem().map_or_else(
                || e.image_path.display().to_string(),
                |s| s.to_string_lossy().into_owned(),
            );
            Ok((AnnotatedImage { id, image, centers }, e.split))
        })
        .collect()
}

/// Images of one split, in manifest order.
pub fn split_of(dataset: &[(AnnotatedImage, Split)], split: Split) -> Vec<AnnotatedImage> {
    dataset
        .iter()
        .filter(|(_, s)| *s == split)
        .map(|(img, _)| img.clone())
        .collect()
}
