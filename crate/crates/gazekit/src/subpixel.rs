//! Sub-pixel keypoint math: grid quantization, offset targets, masked
//! regression loss and exact coordinate recovery.
//!
//! A keypoint at real crop coordinates is split into a quantized grid index
//! (what a heatmap can express) and the residual offset lost to rounding.
//! `recover` composes the two back; the round trip is exact, which is the
//! whole point of pairing a mask heatmap with an offset field.
//!
//! Conventions fixed here: rounding is half-down (ties go to the lower
//! index, so a point sitting exactly on a decoded cell center quantizes
//! back to that cell and gets a zero offset), quantized indices are
//! clamped into the grid with the offset computed against the clamped
//! index (so recovery stays exact at crop edges), and `alpha = 0.5` for
//! the zero-based indexing used throughout this crate (`alpha = -0.5`
//! reproduces the same targets under one-based indices).
//!
//! With `round` quantization and `alpha = 0.5` decode, offsets are not
//! symmetric around zero: interior points produce `t` in `(-1, 0]` grid
//! units, and a mask-only decode (offsets forced to zero) carries a mean
//! quantization error of half a grid cell per axis. The offset branch
//! exists to win that half cell back.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Landmark identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeypointKind {
    LateralCanthus,
    MedialCanthus,
    Pupil,
}

impl KeypointKind {
    pub const ALL: [KeypointKind; 3] =
        [KeypointKind::LateralCanthus, KeypointKind::MedialCanthus, KeypointKind::Pupil];
}

/// A recovered landmark in crop pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubpixelKeypoint {
    pub x: f64,
    pub y: f64,
    pub kind: KeypointKind,
}

/// One keypoint's decoded head output: per-cell scores plus the shared
/// two-channel offset field, at grid resolution, for a crop of the given
/// pixel size.
#[derive(Debug, Clone)]
pub struct HeatmapPair {
    /// Row-major `grid_h x grid_w` per-cell keypoint scores.
    pub mask: Vec<f64>,
    /// Row-major `grid_h x grid_w` offsets in normalized crop units.
    pub offsets: Vec<[f64; 2]>,
    pub grid_w: u32,
    pub grid_h: u32,
    pub crop_w: f64,
    pub crop_h: f64,
    pub alpha: f64,
}

impl HeatmapPair {
    /// Highest-scoring cell; ties resolve to the lowest row-major index.
    pub fn argmax(&self) -> (u32, u32) {
        let mut best = 0usize;
        for (i, &v) in self.mask.iter().enumerate() {
            if v > self.mask[best] {
                best = i;
            }
        }
        let w = self.grid_w as usize;
        ((best % w) as u32, (best / w) as u32)
    }

    /// Decoded keypoint: argmax cell joined with its offset (or the bare
    /// cell center when `use_offsets` is false).
    pub fn decode(&self, use_offsets: bool) -> (f64, f64) {
        let (ix, iy) = self.argmax();
        let t = if use_offsets {
            let o = self.offsets[iy as usize * self.grid_w as usize + ix as usize];
            (o[0], o[1])
        } else {
            (0.0, 0.0)
        };
        recover(
            (ix, iy),
            t,
            (self.crop_w, self.crop_h),
            (self.grid_w, self.grid_h),
            self.alpha,
        )
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SubpixelError {
    #[error("point ({x}, {y}) outside crop {crop_w}x{crop_h}")]
    OutOfCrop { x: f64, y: f64, crop_w: f64, crop_h: f64 },
    #[error("field lengths differ: pred {pred}, target {target}, mask {mask}")]
    ShapeMismatch { pred: usize, target: usize, mask: usize },
}

/// Elementwise cost for the offset regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKernel {
    #[default]
    L1,
    L2,
}

fn check_in_crop(c: (f64, f64), crop: (f64, f64)) -> Result<(), SubpixelError> {
    let (x, y) = c;
    let (w, h) = crop;
    if x < 0.0 || x >= w || y < 0.0 || y >= h {
        return Err(SubpixelError::OutOfCrop { x, y, crop_w: w, crop_h: h });
    }
    Ok(())
}

/// Rounds a real crop coordinate to grid indices (ties to the lower
/// index), clamped into the grid extent.
pub fn quantize(
    c: (f64, f64),
    crop: (f64, f64),
    grid: (u32, u32),
) -> Result<(u32, u32), SubpixelError> {
    check_in_crop(c, crop)?;
    let gx = round_half_down(c.0 * grid.0 as f64 / crop.0);
    let gy = round_half_down(c.1 * grid.1 as f64 / crop.1);
    let ix = (gx.max(0.0) as u32).min(grid.0 - 1);
    let iy = (gy.max(0.0) as u32).min(grid.1 - 1);
    Ok((ix, iy))
}

fn round_half_down(v: f64) -> f64 {
    (v - 0.5).ceil()
}

/// Residual between the real coordinate and its (clamped) quantized cell
/// center, in normalized crop units.
pub fn offset_target(
    c: (f64, f64),
    crop: (f64, f64),
    grid: (u32, u32),
    alpha: f64,
) -> Result<(f64, f64), SubpixelError> {
    let (ix, iy) = quantize(c, crop, grid)?;
    let tx = c.0 / crop.0 - (ix as f64 + alpha) / grid.0 as f64;
    let ty = c.1 / crop.1 - (iy as f64 + alpha) / grid.1 as f64;
    Ok((tx, ty))
}

/// Joins a grid index with its offset back into crop pixel coordinates.
/// Exact inverse of `(quantize, offset_target)` for any point in the crop.
pub fn recover(
    ix: (u32, u32),
    t: (f64, f64),
    crop: (f64, f64),
    grid: (u32, u32),
    alpha: f64,
) -> (f64, f64) {
    let x = ((ix.0 as f64 + alpha) / grid.0 as f64 + t.0) * crop.0;
    let y = ((ix.1 as f64 + alpha) / grid.1 as f64 + t.1) * crop.1;
    (x, y)
}

/// Offset regression loss summed over the cells the indicator mask selects.
/// Cells with `mask = 0` contribute nothing regardless of the prediction.
pub fn masked_offset_loss(
    pred: &[[f64; 2]],
    target: &[[f64; 2]],
    mask: &[f64],
    kernel: LossKernel,
) -> Result<f64, SubpixelError> {
    Ok(masked_offset_loss_grad(pred, target, mask, kernel)?.0)
}

/// Same as [`masked_offset_loss`] but also returns d(loss)/d(pred).
pub fn masked_offset_loss_grad(
    pred: &[[f64; 2]],
    target: &[[f64; 2]],
    mask: &[f64],
    kernel: LossKernel,
) -> Result<(f64, Vec<[f64; 2]>), SubpixelError> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(SubpixelError::ShapeMismatch {
            pred: pred.len(),
            target: target.len(),
            mask: mask.len(),
        });
    }
    let mut loss = 0.0;
    let mut grad = vec![[0.0; 2]; pred.len()];
    for i in 0..pred.len() {
        let m = mask[i];
        if m == 0.0 {
            continue;
        }
        for a in 0..2 {
            let d = pred[i][a] - target[i][a];
            match kernel {
                LossKernel::L1 => {
                    loss += m * d.abs();
                    grad[i][a] = m * d.signum();
                }
                LossKernel::L2 => {
                    loss += m * d * d;
                    grad[i][a] = m * 2.0 * d;
                }
            }
        }
    }
    Ok((loss, grad))
}

/// Cross-entropy of a softmax over the flattened grid against a one-hot
/// target cell; the mask-branch training loss. Returns the loss and
/// d(loss)/d(logits).
pub fn mask_softmax_loss(logits: &[f64], target_index: usize) -> (f64, Vec<f64>) {
    debug_assert!(target_index < logits.len());
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() + max - logits[target_index];
    let mut grad: Vec<f64> = exps.iter().map(|&e| e / z).collect();
    grad[target_index] -= 1.0;
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn quantize_hand_case() {
        // 33.7 * 16/64 = 8.425 -> 8; 10.2 * 16/64 = 2.55 -> 3.
        assert_eq!(quantize((33.7, 10.2), (64.0, 64.0), (16, 16)).unwrap(), (8, 3));
        assert_eq!(quantize((0.0, 0.0), (64.0, 64.0), (16, 16)).unwrap(), (0, 0));
        // 63.999 * 16/64 = 15.99975 -> 16, clamped to 15.
        assert_eq!(quantize((63.999, 63.999), (64.0, 64.0), (16, 16)).unwrap(), (15, 15));
        // Exact tie rounds to the lower index.
        assert_eq!(quantize((22.0, 22.0), (64.0, 64.0), (16, 16)).unwrap(), (5, 5));
    }

    #[test]
    fn quantize_out_of_crop() {
        let err = quantize((64.0, 1.0), (64.0, 64.0), (16, 16)).unwrap_err();
        assert!(matches!(err, SubpixelError::OutOfCrop { .. }));
        assert!(quantize((-0.001, 1.0), (64.0, 64.0), (16, 16)).is_err());
    }

    #[test]
    fn offset_target_hand_case() {
        let (tx, ty) = offset_target((33.7, 10.2), (64.0, 64.0), (16, 16), 0.5).unwrap();
        assert_abs_diff_eq!(tx, 33.7 / 64.0 - 8.5 / 16.0, epsilon = 1e-15);
        assert_abs_diff_eq!(tx, -0.0046875, epsilon = 1e-12);
        assert_abs_diff_eq!(ty, -0.059375, epsilon = 1e-12);
    }

    #[test]
    fn offset_zero_at_cell_center() {
        // Cell (5, 2) center in a 64x64 crop with a 16x16 grid: (5.5, 2.5) * 4.
        let (tx, ty) = offset_target((22.0, 10.0), (64.0, 64.0), (16, 16), 0.5).unwrap();
        assert_abs_diff_eq!(tx, 0.0);
        assert_abs_diff_eq!(ty, 0.0);
    }

    #[test]
    fn one_based_alpha_matches_zero_based() {
        let c = (33.7, 10.2);
        let crop = (64.0, 64.0);
        let grid = (16, 16);
        let (ix, iy) = quantize(c, crop, grid).unwrap();
        let zero_based = offset_target(c, crop, grid, 0.5).unwrap();
        // One-based indices are shifted by +1, compensated by alpha = -0.5.
        let tx = c.0 / crop.0 - ((ix + 1) as f64 - 0.5) / grid.0 as f64;
        let ty = c.1 / crop.1 - ((iy + 1) as f64 - 0.5) / grid.1 as f64;
        assert_abs_diff_eq!(tx, zero_based.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ty, zero_based.1, epsilon = 1e-15);
    }

    #[test]
    fn recover_hand_case() {
        let (x, y) = recover((8, 3), (-0.0046875, -0.059375), (64.0, 64.0), (16, 16), 0.5);
        assert_abs_diff_eq!(x, 33.7, epsilon = 1e-12);
        assert_abs_diff_eq!(y, 10.2, epsilon = 1e-12);
        // Zero offset lands on the cell center.
        let (x, y) = recover((8, 3), (0.0, 0.0), (64.0, 64.0), (16, 16), 0.5);
        assert_abs_diff_eq!(x, 34.0);
        assert_abs_diff_eq!(y, 14.0);
    }

    #[test]
    fn masked_loss_hand_cases() {
        let target = vec![[0.0, 0.0]; 4];
        let pred = vec![[0.5, -0.25]; 4];
        // All-zero mask kills every contribution.
        let zero_mask = vec![0.0; 4];
        assert_abs_diff_eq!(
            masked_offset_loss(&pred, &target, &zero_mask, LossKernel::L1).unwrap(),
            0.0
        );
        // Exact prediction on the one active cell.
        let mask = vec![0.0, 1.0, 0.0, 0.0];
        let exact = vec![[0.0, 0.0]; 4];
        assert_abs_diff_eq!(
            masked_offset_loss(&exact, &target, &mask, LossKernel::L1).unwrap(),
            0.0
        );
        // One active cell, L1, residual (0.01, -0.02).
        let mut p = vec![[0.0, 0.0]; 4];
        p[1] = [0.01, -0.02];
        assert_abs_diff_eq!(
            masked_offset_loss(&p, &target, &mask, LossKernel::L1).unwrap(),
            0.03,
            epsilon = 1e-15
        );
    }

    #[test]
    fn masked_loss_shape_mismatch() {
        let err = masked_offset_loss(&[[0.0; 2]; 3], &[[0.0; 2]; 4], &[1.0; 3], LossKernel::L1)
            .unwrap_err();
        assert!(matches!(err, SubpixelError::ShapeMismatch { .. }));
    }

    #[test]
    fn masked_loss_grad_zero_outside_mask() {
        let target = vec![[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]];
        let pred = vec![[0.9, -0.9]; 3];
        let mask = vec![0.0, 1.0, 0.0];
        for kernel in [LossKernel::L1, LossKernel::L2] {
            let (_, grad) = masked_offset_loss_grad(&pred, &target, &mask, kernel).unwrap();
            assert_eq!(grad[0], [0.0, 0.0]);
            assert_eq!(grad[2], [0.0, 0.0]);
            assert!(grad[1][0] != 0.0 && grad[1][1] != 0.0);
        }
    }

    #[test]
    fn softmax_loss_gradient_sums_to_zero() {
        let logits = vec![0.3, -1.2, 2.0, 0.0];
        let (loss, grad) = mask_softmax_loss(&logits, 2);
        assert!(loss > 0.0);
        let sum: f64 = grad.iter().sum();
        assert_abs_diff_eq!(sum, 0.0, epsilon = 1e-12);
        assert!(grad[2] < 0.0);
    }

    #[test]
    fn heatmap_pair_decode() {
        let mut mask = vec![0.0; 8 * 16];
        mask[3 * 16 + 8] = 5.0;
        let mut offsets = vec![[0.0, 0.0]; 8 * 16];
        offsets[3 * 16 + 8] = [-0.01, 0.02];
        let pair = HeatmapPair {
            mask,
            offsets,
            grid_w: 16,
            grid_h: 8,
            crop_w: 48.0,
            crop_h: 24.0,
            alpha: 0.5,
        };
        assert_eq!(pair.argmax(), (8, 3));
        let (x, y) = pair.decode(false);
        assert_abs_diff_eq!(x, 8.5 / 16.0 * 48.0);
        assert_abs_diff_eq!(y, 3.5 / 8.0 * 24.0);
        let (x, y) = pair.decode(true);
        assert_abs_diff_eq!(x, (8.5 / 16.0 - 0.01) * 48.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y, (3.5 / 8.0 + 0.02) * 24.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(
            x in 0.0f64..63.999,
            y in 0.0f64..31.999,
        ) {
            let crop = (64.0, 32.0);
            let grid = (16, 8);
            let ix = quantize((x, y), crop, grid).unwrap();
            let t = offset_target((x, y), crop, grid, 0.5).unwrap();
            let (rx, ry) = recover(ix, t, crop, grid, 0.5);
            prop_assert!((rx - x).abs() < 1e-9);
            prop_assert!((ry - y).abs() < 1e-9);
        }

        #[test]
        fn offset_magnitude_bounded(
            x in 0.5f64..63.5,
            y in 0.5f64..31.5,
        ) {
            // Interior points: |t| * grid extent stays within half a cell
            // plus rounding slack.
            let t = offset_target((x, y), (64.0, 32.0), (16, 8), 0.5).unwrap();
            prop_assert!(t.0.abs() * 16.0 <= 0.5 + 1e-9);
            prop_assert!(t.1.abs() * 8.0 <= 0.5 + 1e-9);
        }
    }
}
