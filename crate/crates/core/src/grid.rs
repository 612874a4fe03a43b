//! Aspect-ratio-aligned patch lattice.
//!
//! A budget of `N` patches is laid out on a `cols x rows` grid whose shape
//! follows the image aspect ratio, so that each patch covers a roughly
//! isotropic region of the image. Centers are cell midpoints; windows that
//! would cross the border are shifted back inside the image.

use crate::error::{IqaError, Result};
use crate::exec;
use crate::image::{Patch, RgbImage};

/// Two grid shapes whose log-aspect errors differ by less than this are tied.
const ASPECT_TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageDims {
    pub width: usize,
    pub height: usize,
}

impl ImageDims {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(IqaError::InvalidConfig(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }
}

/// Sampling lattice: `cols * rows` patches of `patch_size x patch_size` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridSpec {
    pub cols: usize,
    pub rows: usize,
    pub patch_size: usize,
}

impl GridSpec {
    pub fn n_patches(&self) -> usize {
        self.cols * self.rows
    }
}

/// Pixel geometry a layout was generated from. Absent for layouts read back
/// from a feature cache, which only stores normalized centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutGeometry {
    pub dims: ImageDims,
    pub cols: usize,
    pub rows: usize,
}

/// Patch centers in row-major order (column index varies fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchLayout {
    pub geometry: Option<LayoutGeometry>,
    /// Pixel-space centers; empty when `geometry` is `None`.
    pub centers_px: Vec<[f64; 2]>,
    /// Centers divided by image width and height.
    pub centers_norm: Vec<[f64; 2]>,
}

impl PatchLayout {
    /// Layout known only through normalized centers.
    pub fn from_normalized(centers_norm: Vec<[f64; 2]>) -> Self {
        Self {
            geometry: None,
            centers_px: Vec::new(),
            centers_norm,
        }
    }

    pub fn len(&self) -> usize {
        self.centers_norm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers_norm.is_empty()
    }
}

fn log_aspect_error(cols: usize, rows: usize, dims: ImageDims) -> f64 {
    ((cols as f64 / rows as f64).ln() - (dims.width as f64 / dims.height as f64).ln()).abs()
}

/// Picks the factor pair of `n_patches` whose shape best matches the image
/// aspect ratio in log space. Ties go to the wider grid.
///
/// # Panics
/// If `n_patches` is zero.
pub fn select_grid(n_patches: usize, dims: ImageDims, patch_size: usize) -> GridSpec {
    assert!(n_patches >= 1, "patch budget must be at least 1");
    let mut best: Option<(usize, usize, f64)> = None;
    // Ascending cols, so a tie is replaced by the wider candidate.
    for cols in 1..=n_patches {
        if n_patches % cols != 0 {
            continue;
        }
        let rows = n_patches / cols;
        let err = log_aspect_error(cols, rows, dims);
        let take = match best {
            Some((_, _, best_err)) => err <= best_err + ASPECT_TIE_TOLERANCE,
            None => true,
        };
        if take {
            best = Some((cols, rows, err));
        }
    }
    let (cols, rows, _) = best.expect("n_patches >= 1 always has the pair (n, 1)");
    GridSpec {
        cols,
        rows,
        patch_size,
    }
}

/// Cell-midpoint centers `((i + 0.5) W / cols, (j + 0.5) H / rows)`.
pub fn patch_centers(grid: &GridSpec, dims: ImageDims) -> PatchLayout {
    let w = dims.width as f64;
    let h = dims.height as f64;
    let n = grid.n_patches();
    let mut centers_px = Vec::with_capacity(n);
    let mut centers_norm = Vec::with_capacity(n);
    for j in 0..grid.rows {
        for i in 0..grid.cols {
            let x = (i as f64 + 0.5) * w / grid.cols as f64;
            let y = (j as f64 + 0.5) * h / grid.rows as f64;
            centers_px.push([x, y]);
            centers_norm.push([x / w, y / h]);
        }
    }
    PatchLayout {
        geometry: Some(LayoutGeometry {
            dims,
            cols: grid.cols,
            rows: grid.rows,
        }),
        centers_px,
        centers_norm,
    }
}

/// Top-left corner of the `patch_size` window centered on `center`, clamped
/// so the window lies inside `[0, extent)`.
pub fn window_origin(center: f64, patch_size: usize, extent: usize) -> usize {
    let max_origin = extent.saturating_sub(patch_size) as f64;
    let origin = (center - patch_size as f64 / 2.0).round();
    origin.clamp(0.0, max_origin) as usize
}

fn check_patch_fits(patch_size: usize, dims: ImageDims) -> Result<()> {
    if patch_size == 0 || patch_size > dims.width || patch_size > dims.height {
        return Err(IqaError::PatchExceedsImage {
            patch: patch_size,
            width: dims.width,
            height: dims.height,
        });
    }
    Ok(())
}

/// Cuts one window per layout center, in layout order.
pub fn extract_patches(
    image: &RgbImage,
    layout: &PatchLayout,
    patch_size: usize,
) -> Result<Vec<Patch>> {
    let dims = image.dims();
    check_patch_fits(patch_size, dims)?;
    let geometry = layout.geometry.ok_or(IqaError::MissingGeometry)?;
    if geometry.dims != dims {
        return Err(IqaError::shape(
            "layout source dims",
            format!("{}x{}", geometry.dims.width, geometry.dims.height),
            format!("{}x{}", dims.width, dims.height),
        ));
    }
    let patches = exec::map_slice(&layout.centers_px, |&[cx, cy]| {
        let x0 = window_origin(cx, patch_size, dims.width);
        let y0 = window_origin(cy, patch_size, dims.height);
        let src = image.as_slice();
        let mut data = Vec::with_capacity(patch_size * patch_size * 3);
        for y in y0..y0 + patch_size {
            let row = (y * dims.width + x0) * 3;
            data.extend_from_slice(&src[row..row + patch_size * 3]);
        }
        Patch {
            size: patch_size,
            origin: (x0, y0),
            data,
        }
    });
    Ok(patches)
}

/// Shifts every center by `fraction` of the cell pitch along both axes.
///
/// A shifted center whose window would leave the image is pulled back so the
/// window sits flush with the far border. `fraction == 0` reproduces the
/// input layout exactly.
pub fn offset_layout(layout: &PatchLayout, patch_size: usize, fraction: f64) -> Result<PatchLayout> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(IqaError::InvalidConfig(format!(
            "offset fraction must be in [0, 1), got {fraction}"
        )));
    }
    let geometry = layout.geometry.ok_or(IqaError::MissingGeometry)?;
    let dims = geometry.dims;
    check_patch_fits(patch_size, dims)?;
    let w = dims.width as f64;
    let h = dims.height as f64;
    let dx = fraction * w / geometry.cols as f64;
    let dy = fraction * h / geometry.rows as f64;
    let half = patch_size as f64 / 2.0;
    let shift = |c: f64, delta: f64, extent: f64| {
        let moved = c + delta;
        let limit = extent - half;
        if moved > limit {
            limit.max(c)
        } else {
            moved
        }
    };
    let centers_px: Vec<[f64; 2]> = layout
        .centers_px
        .iter()
        .map(|&[x, y]| [shift(x, dx, w), shift(y, dy, h)])
        .collect();
    let centers_norm = centers_px.iter().map(|&[x, y]| [x / w, y / h]).collect();
    Ok(PatchLayout {
        geometry: Some(geometry),
        centers_px,
        centers_norm,
    })
}
