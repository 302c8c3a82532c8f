//! Overlapped tile extraction and stitched inference for images larger
//! than one forward pass.

use crate::error::{AfError, Result};
use crate::model::{argmax_classes, AerialFormer};
use crate::params::{Binder, ParamStore};
use crate::tensor::Tape;

#[derive(Clone, Debug)]
pub struct TileGrid {
    pub height: usize,
    pub width: usize,
    pub tile: (usize, usize),
    pub step: (usize, usize),
    /// Row-major `(y, x)` tile origins.
    pub origins: Vec<(usize, usize)>,
}

/// Origins along one axis: `ceil((dim − tile)/step) + 1` of them when the
/// image exceeds the tile, with the last clamped inward to `dim − tile`.
fn axis_origins(dim: usize, tile: usize, step: usize) -> Vec<usize> {
    if dim <= tile {
        return vec![0];
    }
    let count = (dim - tile).div_ceil(step) + 1;
    (0..count).map(|i| (i * step).min(dim - tile)).collect()
}

pub fn make_grid(h: usize, w: usize, tile: (usize, usize), step: (usize, usize)) -> Result<TileGrid> {
    if tile.0 < 1 || tile.1 < 1 {
        return Err(AfError::Config("tile must be >= 1".into()));
    }
    if step.0 < 1 || step.1 < 1 || step.0 > tile.0 || step.1 > tile.1 {
        return Err(AfError::Config(format!(
            "step {step:?} must be in [1, tile {tile:?}]"
        )));
    }
    let mut origins = Vec::new();
    for &oy in &axis_origins(h, tile.0, step.0) {
        for &ox in &axis_origins(w, tile.1, step.1) {
            origins.push((oy, ox));
        }
    }
    Ok(TileGrid {
        height: h,
        width: w,
        tile,
        step,
        origins,
    })
}

impl TileGrid {
    /// Effective tile extent at an origin (tiles never exceed the image).
    pub fn extent(&self, origin: (usize, usize)) -> (usize, usize) {
        (
            self.tile.0.min(self.height - origin.0),
            self.tile.1.min(self.width - origin.1),
        )
    }

    /// Crop one tile from interleaved row-major data with `ch` channels.
    pub fn extract(&self, data: &[u8], ch: usize, origin: (usize, usize)) -> Vec<u8> {
        let (th, tw) = self.extent(origin);
        let mut out = Vec::with_capacity(th * tw * ch);
        for y in 0..th {
            let row = ((origin.0 + y) * self.width + origin.1) * ch;
            out.extend_from_slice(&data[row..row + tw * ch]);
        }
        out
    }
}

/// Per-pixel mean of all covering tiles' logits; `tiles[i]` is `[L, th, tw]`
/// row-major for `grid.origins[i]`.
pub fn stitch(tiles: &[Vec<f64>], grid: &TileGrid, num_classes: usize) -> Result<Vec<f64>> {
    if tiles.len() != grid.origins.len() {
        return Err(AfError::Geometry {
            op: "stitch",
            msg: format!(
                "{} logit tiles for {} grid origins",
                tiles.len(),
                grid.origins.len()
            ),
        });
    }
    let (h, w) = (grid.height, grid.width);
    let plane = h * w;
    let mut sum = vec![0.0f64; num_classes * plane];
    let mut cover = vec![0u32; plane];
    for (tile, &(oy, ox)) in tiles.iter().zip(&grid.origins) {
        let (th, tw) = grid.extent((oy, ox));
        if tile.len() != num_classes * th * tw {
            return Err(AfError::Geometry {
                op: "stitch",
                msg: format!(
                    "tile at ({oy}, {ox}) has {} values, expected {}",
                    tile.len(),
                    num_classes * th * tw
                ),
            });
        }
        for c in 0..num_classes {
            for y in 0..th {
                for x in 0..tw {
                    sum[c * plane + (oy + y) * w + ox + x] += tile[(c * th + y) * tw + x];
                }
            }
        }
        for y in 0..th {
            for x in 0..tw {
                cover[(oy + y) * w + ox + x] += 1;
            }
        }
    }
    if let Some(p) = cover.iter().position(|&c| c == 0) {
        return Err(AfError::Geometry {
            op: "stitch",
            msg: format!("pixel ({}, {}) covered by no tile", p / w, p % w),
        });
    }
    for c in 0..num_classes {
        for p in 0..plane {
            sum[c * plane + p] /= cover[p] as f64;
        }
    }
    Ok(sum)
}

/// Tiled inference: grid → per-tile forward → logit stitch → argmax.
/// Returns the predicted id-mask and the stitched logits `[L, H, W]`.
pub fn infer_image(
    model: &AerialFormer,
    store: &ParamStore,
    image: &[u8],
    h: usize,
    w: usize,
    tile: (usize, usize),
    step: (usize, usize),
) -> Result<(Vec<u8>, Vec<f64>)> {
    let grid = make_grid(h, w, tile, step)?;
    let num_classes = model.cfg.num_classes;
    let mut tiles = Vec::with_capacity(grid.origins.len());
    for &origin in &grid.origins {
        let (th, tw) = grid.extent(origin);
        let crop = grid.extract(image, 3, origin);
        let mut chw = Vec::with_capacity(3 * th * tw);
        for c in 0..3 {
            chw.extend(crop.chunks_exact(3).map(|p| p[c] as f64 / 255.0));
        }
        let tape = Tape::new();
        let binder = Binder::new(&tape);
        let x = tape.constant(chw, vec![1, 3, th, tw]);
        let logits = model.forward(&binder, store, x, false)?;
        tiles.push(logits.to_vec());
    }
    let stitched = stitch(&tiles, &grid, num_classes)?;
    let mask = argmax_classes(&stitched, &[1, num_classes, h, w]);
    Ok((mask, stitched))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(h: usize, w: usize, tile: usize, step: usize) -> usize {
        make_grid(h, w, (tile, tile), (step, step)).unwrap().origins.len()
    }

    #[test]
    fn grid_counts_for_standard_geometries() {
        assert_eq!(counts(1024, 1024, 512, 256), 9);
        assert_eq!(counts(512, 512, 512, 256), 1);
        assert_eq!(counts(100, 100, 512, 256), 1);
        assert_eq!(counts(1408, 896, 512, 512), 3 * 2);
        // 1025 needs one clamped extra row/column beyond the 1024 grid
        assert_eq!(counts(1025, 1024, 512, 256), 12);
    }

    #[test]
    fn last_origin_is_clamped_inward() {
        let g = make_grid(1000, 1000, (512, 512), (256, 256)).unwrap();
        let max_oy = g.origins.iter().map(|o| o.0).max().unwrap();
        assert_eq!(max_oy, 1000 - 512);
        for &o in &g.origins {
            assert_eq!(g.extent(o), (512, 512));
        }
    }

    #[test]
    fn grid_covers_every_pixel_exactly() {
        let g = make_grid(70, 45, (32, 32), (20, 20)).unwrap();
        let mut cover = vec![0u32; 70 * 45];
        for &(oy, ox) in &g.origins {
            let (th, tw) = g.extent((oy, ox));
            for y in 0..th {
                for x in 0..tw {
                    cover[(oy + y) * 45 + ox + x] += 1;
                }
            }
        }
        assert!(cover.iter().all(|&c| c >= 1));
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        assert!(make_grid(10, 10, (0, 4), (1, 1)).is_err());
        assert!(make_grid(10, 10, (4, 4), (0, 2)).is_err());
        assert!(make_grid(10, 10, (4, 4), (5, 4)).is_err());
    }

    #[test]
    fn extract_crops_interleaved_rows() {
        let g = make_grid(3, 4, (2, 2), (2, 2)).unwrap();
        let data: Vec<u8> = (0..3 * 4).collect();
        assert_eq!(g.extract(&data, 1, (1, 2)), vec![6, 7, 10, 11]);
    }

    #[test]
    fn stitch_single_tile_is_identity() {
        let g = make_grid(4, 4, (4, 4), (4, 4)).unwrap();
        let tile: Vec<f64> = (0..2 * 16).map(|i| i as f64).collect();
        assert_eq!(stitch(&[tile.clone()], &g, 2).unwrap(), tile);
    }

    #[test]
    fn stitch_averages_in_overlap_regions() {
        // two 1-class 1x4 tiles at x = 0 and 2 over a 1x6 image: middle
        // pixels 2..4 are covered twice
        let g = make_grid(1, 6, (1, 4), (1, 2)).unwrap();
        assert_eq!(g.origins, vec![(0, 0), (0, 2)]);
        let a = vec![1.0, 1.0, 1.0, 1.0];
        let b = vec![3.0, 3.0, 3.0, 3.0];
        let out = stitch(&[a, b], &g, 1).unwrap();
        assert_eq!(out, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn stitch_validates_tile_shapes() {
        let g = make_grid(4, 4, (4, 4), (4, 4)).unwrap();
        assert!(stitch(&[], &g, 1).is_err());
        assert!(stitch(&[vec![0.0; 15]], &g, 1).is_err());
    }
}
