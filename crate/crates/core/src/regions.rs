//! Region division of the latent grid into adjacent bands.
//!
//! Region `i` of `N` along an axis of length `L` covers indices
//! `floor(i·L/N) .. floor((i+1)·L/N)`. The resulting flattened masks always
//! form an exact partition of the grid.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegionError {
    #[error("region count must be at least 1")]
    ZeroRegions,
    #[error("cannot split an axis of length {axis_len} into {count} regions")]
    TooSmall { count: usize, axis_len: usize },
    #[error("grid dimensions must be at least 1x1, got {height}x{width}")]
    EmptyGrid { height: usize, width: usize },
    #[error("cannot downsample {from_h}x{from_w} to {to_h}x{to_w}: dimensions must be integer multiples")]
    UnsupportedRatio {
        from_h: usize,
        from_w: usize,
        to_h: usize,
        to_w: usize,
    },
    #[error("mask values must be 0 or 1 (found {0})")]
    NotBinary(u8),
    #[error("mask for region {0} is empty")]
    EmptyMask(usize),
    #[error("mask length {got} does not match {expected} grid cells")]
    Length { expected: usize, got: usize },
    #[error("masks do not partition the grid: cell {cell} covered {coverage} times")]
    NotPartition { cell: usize, coverage: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Height,
    Width,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Height => "height",
            Axis::Width => "width",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub axis: Axis,
    pub count: usize,
}

/// How regions are laid out: parallel stripes, or a rows×cols grid whose
/// cells are products of a height partition and a width partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "layout", rename_all = "lowercase")]
pub enum RegionLayout {
    Stripes(RegionSpec),
    Grid { rows: usize, cols: usize },
}

impl RegionLayout {
    pub fn count(&self) -> usize {
        match self {
            RegionLayout::Stripes(s) => s.count,
            RegionLayout::Grid { rows, cols } => rows * cols,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentGrid {
    pub height: usize,
    pub width: usize,
}

impl LatentGrid {
    pub fn new(height: usize, width: usize) -> Result<Self, RegionError> {
        if height == 0 || width == 0 {
            return Err(RegionError::EmptyGrid { height, width });
        }
        Ok(LatentGrid { height, width })
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    fn axis_len(&self, axis: Axis) -> usize {
        match axis {
            Axis::Height => self.height,
            Axis::Width => self.width,
        }
    }
}

/// A binary mask over the flattened (row-major) latent grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    region_index: usize,
    values: Vec<u8>,
}

impl RegionMask {
    pub fn new(region_index: usize, values: Vec<u8>) -> Result<Self, RegionError> {
        if let Some(&bad) = values.iter().find(|&&v| v > 1) {
            return Err(RegionError::NotBinary(bad));
        }
        if !values.contains(&1) {
            return Err(RegionError::EmptyMask(region_index));
        }
        Ok(RegionMask {
            region_index,
            values,
        })
    }

    pub fn region_index(&self) -> usize {
        self.region_index
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn contains(&self, cell: usize) -> bool {
        self.values.get(cell) == Some(&1)
    }

    /// Flattened indices of the cells inside the region, ascending.
    pub fn cells(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v == 1).then_some(i))
            .collect()
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }
}

/// A 2-d binary grid (the un-flattened form of a mask).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryGrid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

impl BinaryGrid {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self, RegionError> {
        if height == 0 || width == 0 {
            return Err(RegionError::EmptyGrid { height, width });
        }
        if values.len() != height * width {
            return Err(RegionError::Length {
                expected: height * width,
                got: values.len(),
            });
        }
        if let Some(&bad) = values.iter().find(|&&v| v > 1) {
            return Err(RegionError::NotBinary(bad));
        }
        Ok(BinaryGrid {
            height,
            width,
            values,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.values[row * self.width + col]
    }
}

fn band(i: usize, len: usize, n: usize) -> std::ops::Range<usize> {
    (i * len / n)..((i + 1) * len / n)
}

fn check_count(count: usize, axis_len: usize) -> Result<(), RegionError> {
    if count == 0 {
        return Err(RegionError::ZeroRegions);
    }
    if count > axis_len {
        return Err(RegionError::TooSmall { count, axis_len });
    }
    Ok(())
}

/// Split the grid into `spec.count` adjacent stripes along `spec.axis`.
pub fn divide_regions(spec: RegionSpec, grid: LatentGrid) -> Result<Vec<RegionMask>, RegionError> {
    let axis_len = grid.axis_len(spec.axis);
    check_count(spec.count, axis_len)?;
    (0..spec.count)
        .map(|i| {
            let range = band(i, axis_len, spec.count);
            let mut values = vec![0u8; grid.cells()];
            for r in 0..grid.height {
                for c in 0..grid.width {
                    let coord = match spec.axis {
                        Axis::Height => r,
                        Axis::Width => c,
                    };
                    if range.contains(&coord) {
                        values[r * grid.width + c] = 1;
                    }
                }
            }
            RegionMask::new(i, values)
        })
        .collect()
}

/// Masks for a layout. Grid cells are numbered row-major: index = r·cols + c.
pub fn divide_layout(layout: RegionLayout, grid: LatentGrid) -> Result<Vec<RegionMask>, RegionError> {
    match layout {
        RegionLayout::Stripes(spec) => divide_regions(spec, grid),
        RegionLayout::Grid { rows, cols } => {
            let horiz = divide_regions(
                RegionSpec {
                    axis: Axis::Height,
                    count: rows,
                },
                grid,
            )?;
            let vert = divide_regions(
                RegionSpec {
                    axis: Axis::Width,
                    count: cols,
                },
                grid,
            )?;
            let mut out = Vec::with_capacity(rows * cols);
            for h in &horiz {
                for v in &vert {
                    let values = h.values.iter().zip(&v.values).map(|(a, b)| a * b).collect();
                    out.push(RegionMask::new(out.len(), values)?);
                }
            }
            Ok(out)
        }
    }
}

/// Resample a full-resolution mask onto the latent grid.
///
/// Each latent cell covers an `sh × sw` block of full-resolution cells and
/// takes the value of the block's last (bottom-right) cell. With band
/// boundaries at `floor(i·L/N)` this representative commutes with
/// [`divide_regions`] for every scale factor and every `N`.
pub fn downsample_mask(
    full: &BinaryGrid,
    grid: LatentGrid,
    region_index: usize,
) -> Result<RegionMask, RegionError> {
    let ratio_err = || RegionError::UnsupportedRatio {
        from_h: full.height,
        from_w: full.width,
        to_h: grid.height,
        to_w: grid.width,
    };
    if full.height < grid.height
        || full.width < grid.width
        || full.height % grid.height != 0
        || full.width % grid.width != 0
    {
        return Err(ratio_err());
    }
    let sh = full.height / grid.height;
    let sw = full.width / grid.width;
    let mut values = Vec::with_capacity(grid.cells());
    for r in 0..grid.height {
        for c in 0..grid.width {
            values.push(full.get(r * sh + sh - 1, c * sw + sw - 1));
        }
    }
    RegionMask::new(region_index, values)
}

/// Row-major flatten of a 2-d mask.
pub fn flatten_mask(mask: &BinaryGrid, region_index: usize) -> Result<RegionMask, RegionError> {
    RegionMask::new(region_index, mask.values.clone())
}

pub fn unflatten_mask(mask: &RegionMask, grid: LatentGrid) -> Result<BinaryGrid, RegionError> {
    BinaryGrid::new(grid.height, grid.width, mask.values.clone())
}

/// Verify that `masks` cover each of `cells` positions exactly once.
pub fn check_partition(masks: &[RegionMask], cells: usize) -> Result<(), RegionError> {
    let owners = region_owners(masks, cells)?;
    debug_assert_eq!(owners.len(), cells);
    Ok(())
}

/// For every cell, the index (into `masks`) of the region that contains it.
pub fn region_owners(masks: &[RegionMask], cells: usize) -> Result<Vec<usize>, RegionError> {
    if masks.is_empty() {
        return Err(RegionError::ZeroRegions);
    }
    let mut owner = vec![usize::MAX; cells];
    let mut coverage = vec![0usize; cells];
    for (i, m) in masks.iter().enumerate() {
        if m.len() != cells {
            return Err(RegionError::Length {
                expected: cells,
                got: m.len(),
            });
        }
        for cell in m.cells() {
            coverage[cell] += 1;
            owner[cell] = i;
        }
    }
    if let Some((cell, &c)) = coverage.iter().enumerate().find(|(_, &c)| c != 1) {
        return Err(RegionError::NotPartition { cell, coverage: c });
    }
    Ok(owner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rows_of(mask: &RegionMask, grid: LatentGrid) -> Vec<usize> {
        (0..grid.height)
            .filter(|r| mask.contains(r * grid.width))
            .collect()
    }

    #[test]
    fn even_and_uneven_height_splits() {
        let g = LatentGrid::new(8, 3).unwrap();
        let m = divide_regions(RegionSpec { axis: Axis::Height, count: 2 }, g).unwrap();
        assert_eq!(rows_of(&m[0], g), vec![0, 1, 2, 3]);
        assert_eq!(rows_of(&m[1], g), vec![4, 5, 6, 7]);

        let g = LatentGrid::new(9, 2).unwrap();
        let m = divide_regions(RegionSpec { axis: Axis::Height, count: 2 }, g).unwrap();
        assert_eq!(rows_of(&m[0], g), vec![0, 1, 2, 3]);
        assert_eq!(rows_of(&m[1], g), vec![4, 5, 6, 7, 8]);
    }

    #[test]
    fn counts_two_four_nine_partition() {
        let g = LatentGrid::new(32, 32).unwrap();
        for n in [2, 4, 9] {
            for axis in [Axis::Height, Axis::Width] {
                let m = divide_regions(RegionSpec { axis, count: n }, g).unwrap();
                assert_eq!(m.len(), n);
                check_partition(&m, g.cells()).unwrap();
            }
        }
    }

    #[test]
    fn too_many_regions() {
        let g = LatentGrid::new(4, 16).unwrap();
        assert_eq!(
            divide_regions(RegionSpec { axis: Axis::Height, count: 5 }, g),
            Err(RegionError::TooSmall { count: 5, axis_len: 4 })
        );
        assert!(divide_regions(RegionSpec { axis: Axis::Width, count: 5 }, g).is_ok());
        assert_eq!(
            divide_regions(RegionSpec { axis: Axis::Width, count: 0 }, g),
            Err(RegionError::ZeroRegions)
        );
    }

    #[test]
    fn grid_layout_is_product_of_stripes() {
        let g = LatentGrid::new(9, 9).unwrap();
        let m = divide_layout(RegionLayout::Grid { rows: 3, cols: 3 }, g).unwrap();
        assert_eq!(m.len(), 9);
        check_partition(&m, g.cells()).unwrap();
        for mask in &m {
            assert_eq!(mask.count_ones(), 9);
        }
        // region 4 is the centre block
        assert!(m[4].contains(4 * 9 + 4));
        let stripes = divide_regions(RegionSpec { axis: Axis::Height, count: 9 }, g).unwrap();
        assert_ne!(stripes[4], m[4]);
    }

    #[test]
    fn downsample_cases() {
        let g = LatentGrid::new(2, 2).unwrap();
        let full = BinaryGrid::new(4, 4, vec![1; 16]).unwrap();
        assert_eq!(downsample_mask(&full, g, 0).unwrap().values(), &[1, 1, 1, 1]);

        let mut top = vec![0u8; 16];
        top[..8].fill(1);
        let full = BinaryGrid::new(4, 4, top).unwrap();
        assert_eq!(downsample_mask(&full, g, 0).unwrap().values(), &[1, 1, 0, 0]);

        let full = BinaryGrid::new(5, 4, vec![1; 20]).unwrap();
        assert!(matches!(
            downsample_mask(&full, g, 0),
            Err(RegionError::UnsupportedRatio { .. })
        ));
    }

    #[test]
    fn downsample_commutes_with_division_64_to_16() {
        let hi = LatentGrid::new(64, 64).unwrap();
        let lo = LatentGrid::new(16, 16).unwrap();
        for n in 1..=16 {
            for axis in [Axis::Height, Axis::Width] {
                let spec = RegionSpec { axis, count: n };
                let direct = divide_regions(spec, lo).unwrap();
                let full = divide_regions(spec, hi).unwrap();
                for (i, f) in full.iter().enumerate() {
                    let bg = unflatten_mask(f, hi).unwrap();
                    assert_eq!(downsample_mask(&bg, lo, i).unwrap(), direct[i], "n={n} {axis}");
                }
            }
        }
    }

    #[test]
    fn flatten_cases() {
        let g = BinaryGrid::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        assert_eq!(flatten_mask(&g, 0).unwrap().values(), &[1, 0, 0, 1]);
        let row = BinaryGrid::new(1, 5, vec![0, 1, 1, 0, 1]).unwrap();
        assert_eq!(flatten_mask(&row, 0).unwrap().values(), &row.values[..]);
    }

    #[test]
    fn invalid_masks() {
        assert_eq!(RegionMask::new(0, vec![0, 2]), Err(RegionError::NotBinary(2)));
        assert_eq!(RegionMask::new(3, vec![0, 0]), Err(RegionError::EmptyMask(3)));
        let a = RegionMask::new(0, vec![1, 1, 0]).unwrap();
        let b = RegionMask::new(1, vec![0, 1, 1]).unwrap();
        assert_eq!(
            check_partition(&[a, b], 3),
            Err(RegionError::NotPartition { cell: 1, coverage: 2 })
        );
    }

    proptest! {
        #[test]
        fn partition_of_unity(h in 1usize..40, w in 1usize..40, n in 1usize..12, by_height: bool) {
            let axis = if by_height { Axis::Height } else { Axis::Width };
            let g = LatentGrid::new(h, w).unwrap();
            let len = if by_height { h } else { w };
            match divide_regions(RegionSpec { axis, count: n }, g) {
                Ok(masks) => {
                    prop_assert!(n <= len);
                    let mut sum = vec![0u8; g.cells()];
                    for m in &masks {
                        for (s, v) in sum.iter_mut().zip(m.values()) { *s += v; }
                        // contiguous band
                        let coords: Vec<usize> = m.cells().iter()
                            .map(|&c| if by_height { c / w } else { c % w }).collect();
                        let lo = *coords.iter().min().unwrap();
                        let hi = *coords.iter().max().unwrap();
                        prop_assert_eq!(m.count_ones(), (hi - lo + 1) * if by_height { w } else { h });
                    }
                    prop_assert!(sum.iter().all(|&s| s == 1));
                }
                Err(e) => {
                    prop_assert!(n > len);
                    prop_assert_eq!(e, RegionError::TooSmall { count: n, axis_len: len });
                }
            }
        }

        #[test]
        fn flatten_round_trip(vals in prop::collection::vec(0u8..2, 15)) {
            prop_assume!(vals.contains(&1));
            let g = BinaryGrid::new(3, 5, vals).unwrap();
            let m = flatten_mask(&g, 0).unwrap();
            prop_assert_eq!(unflatten_mask(&m, LatentGrid::new(3, 5).unwrap()).unwrap(), g);
        }

        #[test]
        fn downsample_commutes_any_multiple(h in 1usize..12, w in 1usize..12, s in 1usize..5, n in 1usize..12, by_height: bool) {
            let axis = if by_height { Axis::Height } else { Axis::Width };
            prop_assume!(n <= if by_height { h } else { w });
            let lo = LatentGrid::new(h, w).unwrap();
            let hi = LatentGrid::new(h * s, w * s).unwrap();
            let spec = RegionSpec { axis, count: n };
            let direct = divide_regions(spec, lo).unwrap();
            for (i, f) in divide_regions(spec, hi).unwrap().iter().enumerate() {
                let d = downsample_mask(&unflatten_mask(f, hi).unwrap(), lo, i).unwrap();
                prop_assert_eq!(&d, &direct[i]);
            }
        }
    }
}
