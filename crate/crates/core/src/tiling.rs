//! Patch grid layout shared by dataset cropping and inference.

use crate::error::{Error, Result};

/// Start positions of `patch`-sized windows along an axis of length `len`.
///
/// Windows step by `stride`; if the last regular window stops short of the
/// end, one more window is clamped to `len - patch`.
pub fn tile_starts(len: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if patch == 0 || stride == 0 {
        return Err(Error::config("patch size and stride must be positive"));
    }
    if stride > patch {
        return Err(Error::config(format!(
            "stride {stride} exceeds patch size {patch}; tiles would leave gaps"
        )));
    }
    if len < patch {
        return Err(Error::config(format!(
            "image side {len} is smaller than the patch size {patch}"
        )));
    }
    let mut starts: Vec<usize> = (0..=len - patch).step_by(stride).collect();
    if starts.last().is_none_or(|&s| s + patch < len) {
        starts.push(len - patch);
    }
    Ok(starts)
}

/// Row-major `(row, col)` offsets of every tile of a `height × width` image.
pub fn tile_offsets(
    height: usize,
    width: usize,
    patch: usize,
    stride: usize,
) -> Result<Vec<(usize, usize)>> {
    let rows = tile_starts(height, patch, stride)?;
    let cols = tile_starts(width, patch, stride)?;
    Ok(rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiling_counts() {
        assert_eq!(tile_offsets(500, 500, 50, 50).unwrap().len(), 100);
        assert_eq!(tile_offsets(50, 50, 50, 50).unwrap().len(), 1);
        assert_eq!(tile_starts(500, 50, 25).unwrap().len(), 19);
        assert_eq!(tile_offsets(500, 500, 50, 25).unwrap().len(), 361);
    }

    #[test]
    fn border_tile_is_clamped() {
        assert_eq!(tile_starts(120, 50, 50).unwrap(), vec![0, 50, 70]);
        assert_eq!(tile_starts(100, 50, 30).unwrap(), vec![0, 30, 50]);
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(tile_starts(40, 50, 50).is_err());
        assert!(tile_starts(100, 50, 60).is_err());
        assert!(tile_starts(100, 50, 0).is_err());
    }
}
