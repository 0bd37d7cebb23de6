//! Top-down label images as binary portable pixmaps.

use std::path::Path;

use crate::error::{invalid, shape_err, Result};
use crate::geometry::VoxelGridSpec;

/// RGB per class id; ids past the table wrap around.
pub const PALETTE: [[u8; 3]; 7] = [
    [255, 255, 255],
    [140, 140, 140],
    [200, 120, 40],
    [40, 160, 60],
    [30, 90, 220],
    [230, 40, 40],
    [240, 200, 20],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BevMode {
    /// The highest non-empty cell of each column, as seen from above.
    TopDown,
    /// One horizontal layer.
    Slice(usize),
}

/// Renders a label grid laid out like `spec` (row-major `i, j, k`) to a P6
/// pixmap with one pixel per `(i, j)` column: image row `i`, column `j`.
pub fn export_bev_image(labels: &[u8], spec: &VoxelGridSpec, mode: BevMode) -> Result<Vec<u8>> {
    let [h, w, z] = spec.dims;
    if labels.len() != spec.num_cells() {
        return Err(shape_err("export_bev_image", &[labels.len()], &spec.dims));
    }
    if let BevMode::Slice(k) = mode {
        if k >= z {
            return Err(invalid("export_bev_image", format!("slice {k} outside {z} layers")));
        }
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for col in labels.chunks(z) {
        let label = match mode {
            BevMode::TopDown => col.iter().rev().copied().find(|&l| l != 0).unwrap_or(0),
            BevMode::Slice(k) => col[k],
        };
        out.extend_from_slice(&PALETTE[label as usize % PALETTE.len()]);
    }
    Ok(out)
}

pub fn write_bev_image(path: &Path, labels: &[u8], spec: &VoxelGridSpec, mode: BevMode) -> Result<()> {
    std::fs::write(path, export_bev_image(labels, spec, mode)?)?;
    Ok(())
}
