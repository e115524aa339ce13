//! Block-wise random patch masking.
//!
//! The image is tiled into square blocks of `block_side` pixels; a fixed
//! number of blocks is masked and every patch inside a masked block is
//! masked. The block count is `round_half_up(mask_ratio × total_blocks)`,
//! and the blocks are a uniform sample without replacement drawn from
//! [`crate::rng::stream`]`(seed, "mask")`.

use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{io, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSpec {
    pub image_side: usize,
    pub patch_side: usize,
    pub block_side: usize,
    pub mask_ratio: f64,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            image_side: 224,
            patch_side: 16,
            block_side: 32,
            mask_ratio: 0.6,
            seed: 0,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: String| Err(Error::config(format!("mask.{field}"), msg));
        if self.patch_side == 0 {
            return err("patch_side", "must be positive".into());
        }
        if self.block_side == 0 || !self.block_side.is_multiple_of(self.patch_side) {
            return err(
                "block_side",
                format!(
                    "{} is not a positive multiple of patch_side {}",
                    self.block_side, self.patch_side
                ),
            );
        }
        if self.image_side == 0 || !self.image_side.is_multiple_of(self.block_side) {
            return err(
                "image_side",
                format!(
                    "{} is not a positive multiple of block_side {}",
                    self.image_side, self.block_side
                ),
            );
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return err("mask_ratio", format!("{} is outside (0, 1)", self.mask_ratio));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side().pow(2)
    }

    /// Patches per block side.
    pub fn block_patches(&self) -> usize {
        self.block_side / self.patch_side
    }

    pub fn blocks_per_side(&self) -> usize {
        self.image_side / self.block_side
    }

    pub fn total_blocks(&self) -> usize {
        self.blocks_per_side().pow(2)
    }

    pub fn masked_blocks(&self) -> usize {
        (self.mask_ratio * self.total_blocks() as f64 + 0.5).floor() as usize
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Patch-level mask; `true` in `grid` means masked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    grid_side: usize,
    grid: Vec<bool>,
    masked: Vec<usize>,
    visible: Vec<usize>,
}

impl PatchMask {
    /// Builds a mask from a per-patch flag grid (row-major).
    pub fn from_grid(grid_side: usize, grid: Vec<bool>) -> Result<Self> {
        if grid.len() != grid_side * grid_side {
            return Err(Error::Dimension(format!(
                "mask grid of {} cells for side {grid_side}",
                grid.len()
            )));
        }
        let (masked, visible) = (0..grid.len()).partition(|&i| grid[i]);
        Ok(Self {
            grid_side,
            grid,
            masked,
            visible,
        })
    }

    pub fn all_visible(grid_side: usize) -> Self {
        Self::from_grid(grid_side, vec![false; grid_side * grid_side]).expect("square grid")
    }

    pub fn grid_side(&self) -> usize {
        self.grid_side
    }

    pub fn num_patches(&self) -> usize {
        self.grid.len()
    }

    pub fn grid(&self) -> &[bool] {
        &self.grid
    }

    pub fn is_masked(&self, patch: usize) -> bool {
        self.grid[patch]
    }

    /// Sorted masked patch indices.
    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    /// Sorted visible patch indices.
    pub fn visible(&self) -> &[usize] {
        &self.visible
    }

    /// Fraction of patches masked.
    pub fn ratio(&self) -> f64 {
        if self.grid.is_empty() {
            return 0.0;
        }
        self.masked.len() as f64 / self.grid.len() as f64
    }

    /// 0/1 floats over the patch grid, shape `[side, side]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.grid.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![self.grid_side, self.grid_side], data).expect("square grid")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::save(path, &self.to_tensor())
    }
}

pub fn generate_mask(spec: &MaskSpec) -> Result<PatchMask> {
    spec.validate()?;
    let total = spec.total_blocks();
    let n_masked = spec.masked_blocks();
    if n_masked >= total {
        return Err(Error::DegenerateMask(format!(
            "ratio {} masks all {total} blocks, leaving no visible patch",
            spec.mask_ratio
        )));
    }
    let mut rng = rng::stream(spec.seed, "mask");
    let chosen = index::sample(&mut rng, total, n_masked);

    let side = spec.grid_side();
    let per = spec.block_patches();
    let blocks_side = spec.blocks_per_side();
    let mut grid = vec![false; side * side];
    for b in chosen.iter() {
        let (by, bx) = (b / blocks_side, b % blocks_side);
        for dy in 0..per {
            for dx in 0..per {
                grid[(by * per + dy) * side + bx * per + dx] = true;
            }
        }
    }
    PatchMask::from_grid(side, grid)
}

pub fn mask_ratio_actual(mask: &PatchMask) -> f64 {
    mask.ratio()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn standard_geometry(seed: u64) -> MaskSpec {
        MaskSpec {
            seed,
            ..MaskSpec::default()
        }
    }

    #[test]
    fn default_geometry_counts() {
        let spec = standard_geometry(0);
        assert_eq!(spec.total_blocks(), 49);
        assert_eq!(spec.masked_blocks(), 29);
        let mask = generate_mask(&spec).unwrap();
        assert_eq!(mask.masked().len(), 116);
        assert_eq!(mask.visible().len(), 80);
        assert!((mask_ratio_actual(&mask) - 116.0 / 196.0).abs() < 1e-15);
    }

    #[test]
    fn rounding_is_half_up() {
        // 4 blocks × 0.625 = 2.5 -> 3
        let spec = MaskSpec {
            image_side: 32,
            patch_side: 8,
            block_side: 16,
            mask_ratio: 0.625,
            seed: 1,
        };
        assert_eq!(spec.masked_blocks(), 3);
        let spec = MaskSpec {
            mask_ratio: 0.6,
            ..spec
        };
        assert_eq!(spec.masked_blocks(), 2);
    }

    #[test]
    fn all_blocks_masked_is_degenerate() {
        let spec = MaskSpec {
            mask_ratio: 0.99,
            ..standard_geometry(3)
        };
        assert!(matches!(generate_mask(&spec), Err(Error::DegenerateMask(_))));
    }

    #[test]
    fn divisibility_violations_are_rejected() {
        let bad_block = MaskSpec {
            block_side: 24,
            ..standard_geometry(0)
        };
        assert!(matches!(generate_mask(&bad_block), Err(Error::Config { .. })));
        let bad_image = MaskSpec {
            image_side: 200,
            ..standard_geometry(0)
        };
        assert!(matches!(generate_mask(&bad_image), Err(Error::Config { .. })));
        let bad_ratio = MaskSpec {
            mask_ratio: 1.0,
            ..standard_geometry(0)
        };
        assert!(bad_ratio.validate().is_err());
    }

    #[test]
    fn same_seed_same_mask() {
        let a = generate_mask(&standard_geometry(42)).unwrap();
        let b = generate_mask(&standard_geometry(42)).unwrap();
        assert_eq!(a, b);
        let c = generate_mask(&standard_geometry(43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn ratio_of_empty_and_full_masks() {
        assert_eq!(mask_ratio_actual(&PatchMask::all_visible(3)), 0.0);
        let full = PatchMask::from_grid(2, vec![true; 4]).unwrap();
        assert_eq!(mask_ratio_actual(&full), 1.0);
        assert!(full.visible().is_empty());
    }

    #[test]
    fn block_marginals_are_binomial() {
        let trials = 10_000;
        let spec = standard_geometry(0);
        let mut hits = vec![0u32; spec.total_blocks()];
        let per = spec.block_patches();
        let side = spec.grid_side();
        for seed in 0..trials {
            let mask = generate_mask(&spec.with_seed(seed)).unwrap();
            for (b, h) in hits.iter_mut().enumerate() {
                let (by, bx) = (b / spec.blocks_per_side(), b % spec.blocks_per_side());
                if mask.is_masked(by * per * side + bx * per) {
                    *h += 1;
                }
            }
        }
        let p = 29.0 / 49.0;
        let mean = trials as f64 * p;
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        for h in hits {
            assert!((h as f64 - mean).abs() < 3.0 * sd, "{h} vs {mean} ± {sd}");
        }
    }

    fn legal_spec() -> impl Strategy<Value = MaskSpec> {
        (1usize..5, 1usize..4, 1usize..5, 0.01f64..0.99, any::<u64>()).prop_map(
            |(patch, per_block, blocks, ratio, seed)| MaskSpec {
                patch_side: patch,
                block_side: patch * per_block,
                image_side: patch * per_block * blocks,
                mask_ratio: ratio,
                seed,
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn mask_invariants(spec in legal_spec()) {
            match generate_mask(&spec) {
                Err(Error::DegenerateMask(_)) => prop_assert_eq!(spec.masked_blocks(), spec.total_blocks()),
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
                Ok(mask) => {
                    let n = spec.num_patches();
                    let mut all: Vec<usize> = mask.masked().iter().chain(mask.visible()).copied().collect();
                    all.sort_unstable();
                    prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                    let per = spec.block_patches();
                    prop_assert_eq!(mask.masked().len(), spec.masked_blocks() * per * per);
                    let one_block = (per * per) as f64 / n as f64;
                    prop_assert!((mask.ratio() - spec.mask_ratio).abs() <= one_block + 1e-12);
                    let side = spec.grid_side();
                    for &m in mask.masked() {
                        let (by, bx) = ((m / side) / per, (m % side) / per);
                        for dy in 0..per {
                            for dx in 0..per {
                                prop_assert!(mask.is_masked((by * per + dy) * side + bx * per + dx));
                            }
                        }
                    }
                }
            }
        }
    }
}
