//! RoI-Align: bilinear pooling of a box region from a feature map onto a
//! fixed output grid. Forward returns a tape so the gradient can be
//! scattered back to the four neighbors of every sample point.

use crate::geometry::BBox;

use super::tensor::Tensor;
use super::NeuralError;

/// Pooling geometry: output grid size, the feature map's pixel stride
/// relative to image coordinates, and sample points per output-cell axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiAlignSpec {
    pub out_h: usize,
    pub out_w: usize,
    pub scale: f64,
    pub samples: usize,
}

impl RoiAlignSpec {
    pub fn new(out_h: usize, out_w: usize, scale: f64) -> Self {
        Self { out_h, out_w, scale, samples: 2 }
    }
}

/// Bilinear taps recorded during forward; shared by every channel.
pub struct RoiTape {
    feature_shape: Vec<usize>,
    out_h: usize,
    out_w: usize,
    /// Per output cell, per sample: four (flat spatial index, weight) taps.
    taps: Vec<[(usize, f64); 4]>,
    samples_per_cell: usize,
}

/// Pools `feature` (`[C, H, W]`) over the box region onto an
/// `[C, out_h, out_w]` grid, averaging `samples x samples` bilinear taps
/// per cell. The box is given in image coordinates and divided by
/// `spec.scale` to reach feature coordinates.
pub fn roi_align(
    feature: &Tensor,
    bbox: &BBox,
    spec: &RoiAlignSpec,
) -> Result<(Tensor, RoiTape), NeuralError> {
    let [c, h, w] = feature.shape[..] else {
        return Err(NeuralError::ShapeMismatch {
            expected: "[C, H, W]".into(),
            got: format!("{:?}", feature.shape),
        });
    };
    let fx1 = (bbox.cx - bbox.w / 2.0) / spec.scale;
    let fy1 = (bbox.cy - bbox.h / 2.0) / spec.scale;
    let fw = bbox.w / spec.scale;
    let fh = bbox.h / spec.scale;
    if fw <= 0.0 || fh <= 0.0 || fx1 + fw <= 0.0 || fy1 + fh <= 0.0 || fx1 >= w as f64 || fy1 >= h as f64 {
        return Err(NeuralError::EmptyRoi);
    }

    let cell_w = fw / spec.out_w as f64;
    let cell_h = fh / spec.out_h as f64;
    let s = spec.samples;
    let mut taps = Vec::with_capacity(spec.out_h * spec.out_w * s * s);
    for oy in 0..spec.out_h {
        for ox in 0..spec.out_w {
            for sy in 0..s {
                for sx in 0..s {
                    let x = fx1 + (ox as f64 + (sx as f64 + 0.5) / s as f64) * cell_w;
                    let y = fy1 + (oy as f64 + (sy as f64 + 0.5) / s as f64) * cell_h;
                    taps.push(bilinear_taps(x, y, w, h));
                }
            }
        }
    }

    let plane = h * w;
    let out_plane = spec.out_h * spec.out_w;
    let samples_per_cell = s * s;
    let inv = 1.0 / samples_per_cell as f64;
    let mut out = Tensor::zeros(&[c, spec.out_h, spec.out_w]);
    for ch in 0..c {
        let fplane = &feature.data[ch * plane..(ch + 1) * plane];
        let oplane = &mut out.data[ch * out_plane..(ch + 1) * out_plane];
        for (cell, o) in oplane.iter_mut().enumerate() {
            let mut acc = 0.0;
            for samp in &taps[cell * samples_per_cell..(cell + 1) * samples_per_cell] {
                for &(idx, wgt) in samp {
                    acc += wgt * fplane[idx];
                }
            }
            *o = acc * inv;
        }
    }
    let tape = RoiTape {
        feature_shape: feature.shape.clone(),
        out_h: spec.out_h,
        out_w: spec.out_w,
        taps,
        samples_per_cell,
    };
    Ok((out, tape))
}

/// Scatters the output gradient back to the feature map.
pub fn roi_align_backward(tape: &RoiTape, grad_out: &Tensor) -> Result<Tensor, NeuralError> {
    let [c, h, w] = tape.feature_shape[..] else { unreachable!() };
    let out_plane = tape.out_h * tape.out_w;
    if grad_out.shape != [c, tape.out_h, tape.out_w] {
        return Err(NeuralError::ShapeMismatch {
            expected: format!("[{c}, {}, {}]", tape.out_h, tape.out_w),
            got: format!("{:?}", grad_out.shape),
        });
    }
    let plane = h * w;
    let inv = 1.0 / tape.samples_per_cell as f64;
    let mut grad_in = Tensor::zeros(&tape.feature_shape);
    for ch in 0..c {
        let gplane = &grad_out.data[ch * out_plane..(ch + 1) * out_plane];
        let giplane = &mut grad_in.data[ch * plane..(ch + 1) * plane];
        for (cell, &g) in gplane.iter().enumerate() {
            let gs = g * inv;
            for samp in &tape.taps[cell * tape.samples_per_cell..(cell + 1) * tape.samples_per_cell]
            {
                for &(idx, wgt) in samp {
                    giplane[idx] += wgt * gs;
                }
            }
        }
    }
    Ok(grad_in)
}

/// Four (flat index, weight) taps for a bilinear read at a continuous
/// feature coordinate, pixel-center convention, clamped at borders.
fn bilinear_taps(x: f64, y: f64, w: usize, h: usize) -> [(usize, f64); 4] {
    let xs = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let ys = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let x0 = xs.floor() as usize;
    let y0 = ys.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let wx = xs - x0 as f64;
    let wy = ys - y0 as f64;
    [
        (y0 * w + x0, (1.0 - wx) * (1.0 - wy)),
        (y0 * w + x1, wx * (1.0 - wy)),
        (y1 * w + x0, (1.0 - wx) * wy),
        (y1 * w + x1, wx * wy),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::EyeState;
    use approx::assert_abs_diff_eq;

    fn full_box(side: f64) -> BBox {
        BBox::new(side / 2.0, side / 2.0, side, side, 1.0, EyeState::Open)
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let feature = Tensor::full(&[3, 4, 4], 7.0);
        let spec = RoiAlignSpec::new(2, 2, 8.0);
        let (out, _) = roi_align(&feature, &full_box(32.0), &spec).unwrap();
        for v in &out.data {
            assert_abs_diff_eq!(*v, 7.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn center_sample_of_2x2() {
        let feature = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        for samples in [1, 2] {
            let spec = RoiAlignSpec { out_h: 1, out_w: 1, scale: 8.0, samples };
            let (out, _) = roi_align(&feature, &full_box(16.0), &spec).unwrap();
            assert_abs_diff_eq!(out.data[0], 2.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn empty_roi_rejected() {
        let feature = Tensor::zeros(&[1, 4, 4]);
        let spec = RoiAlignSpec::new(2, 2, 8.0);
        let far = BBox::new(1000.0, 1000.0, 8.0, 8.0, 1.0, EyeState::Open);
        assert!(matches!(roi_align(&feature, &far, &spec), Err(NeuralError::EmptyRoi)));
    }

    #[test]
    fn backward_matches_finite_difference() {
        let mut feature = Tensor::from_vec(
            &[2, 3, 3],
            (0..18).map(|i| (i as f64) * 0.37 - 2.0).collect(),
        );
        let bbox = BBox::new(11.0, 13.0, 14.0, 12.0, 1.0, EyeState::Open);
        let spec = RoiAlignSpec::new(2, 2, 8.0);
        let weights: Vec<f64> = (0..8).map(|i| 0.3 + 0.1 * i as f64).collect();
        let loss = |f: &Tensor| {
            let (out, _) = roi_align(f, &bbox, &spec).unwrap();
            out.data.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let (out, tape) = roi_align(&feature, &bbox, &spec).unwrap();
        let g_out = Tensor::from_vec(&out.shape, weights.clone());
        let analytic = roi_align_backward(&tape, &g_out).unwrap();
        let h = 1e-5;
        for i in 0..feature.numel() {
            let orig = feature.data[i];
            feature.data[i] = orig + h;
            let lp = loss(&feature);
            feature.data[i] = orig - h;
            let lm = loss(&feature);
            feature.data[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let denom = analytic.data[i].abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic.data[i] - numeric).abs() / denom < 1e-4,
                "tap {i}: analytic {} vs numeric {numeric}",
                analytic.data[i]
            );
        }
    }
}
