//! 2D slices of `[C, D, H, W]` volumes along each axis.
//!
//! A slice along `axis` keeps the two remaining axes in volume order as its
//! rows and columns. For peak-encoded inputs (channel count a multiple of 3)
//! every peak's three components are reordered to (slicing axis, row axis,
//! column axis), so the component orthogonal to the slice always leads.

use crate::diffkernel::Tensor;
use crate::error::{Error, Result};

/// Row and column axes of a slice along `axis`.
pub fn plane_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// Source channel for each output channel of a slice along `axis`.
pub fn channel_order(channels: usize, axis: usize) -> Vec<usize> {
    if channels % 3 != 0 {
        return (0..channels).collect();
    }
    let (r, c) = plane_axes(axis);
    (0..channels / 3)
        .flat_map(|peak| [3 * peak + axis, 3 * peak + r, 3 * peak + c])
        .collect()
}

fn check_volume(op: &'static str, v: &Tensor, axis: usize, index: usize) -> Result<[usize; 3]> {
    if v.ndim() != 4 || axis > 2 {
        return Err(Error::dim(op, format!("volume {:?}, axis {axis}", v.shape())));
    }
    let e = [v.shape()[1], v.shape()[2], v.shape()[3]];
    if index >= e[axis] {
        return Err(Error::dim(op, format!("slice {index} outside extent {}", e[axis])));
    }
    Ok(e)
}

/// Slice `[C, rows, cols]` of `v`, channels optionally reordered.
pub fn extract_slice(v: &Tensor, axis: usize, index: usize, permute_peaks: bool) -> Result<Tensor> {
    let e = check_volume("extract_slice", v, axis, index)?;
    let channels = v.shape()[0];
    let order = if permute_peaks {
        channel_order(channels, axis)
    } else {
        (0..channels).collect()
    };
    let (ra, ca) = plane_axes(axis);
    let (rows, cols) = (e[ra], e[ca]);
    let nvox = e[0] * e[1] * e[2];
    let strides = [e[1] * e[2], e[2], 1];
    let base = index * strides[axis];
    let mut out = Vec::with_capacity(channels * rows * cols);
    for &src in &order {
        let plane = &v.data()[src * nvox..(src + 1) * nvox];
        for r in 0..rows {
            for c in 0..cols {
                out.push(plane[base + r * strides[ra] + c * strides[ca]]);
            }
        }
    }
    Tensor::new(vec![channels, rows, cols], out)
}

/// Writes `s: [C, rows, cols]` back into `v` at slice `index` along `axis`.
pub fn insert_slice(v: &mut [f64], extent: [usize; 3], s: &Tensor, axis: usize, index: usize) {
    let (ra, ca) = plane_axes(axis);
    let (rows, cols) = (extent[ra], extent[ca]);
    let nvox = extent[0] * extent[1] * extent[2];
    let strides = [extent[1] * extent[2], extent[2], 1];
    let base = index * strides[axis];
    for ch in 0..s.shape()[0] {
        let src = &s.data()[ch * rows * cols..(ch + 1) * rows * cols];
        let plane = &mut v[ch * nvox..(ch + 1) * nvox];
        for r in 0..rows {
            for c in 0..cols {
                plane[base + r * strides[ra] + c * strides[ca]] = src[r * cols + c];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_components_follow_the_slicing_axis() {
        assert_eq!(channel_order(9, 0), vec![0, 1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(channel_order(9, 1), vec![1, 0, 2, 4, 3, 5, 7, 6, 8]);
        assert_eq!(channel_order(9, 2), vec![2, 0, 1, 5, 3, 4, 8, 6, 7]);
        assert_eq!(channel_order(4, 2), vec![0, 1, 2, 3]);
    }

    #[test]
    fn extract_then_insert_restores_the_volume() {
        let v = Tensor::from_fn(&[2, 3, 4, 5], |i| i as f64);
        for axis in 0..3 {
            let e = [3, 4, 5];
            let mut back = vec![0.0; v.len()];
            for i in 0..e[axis] {
                let s = extract_slice(&v, axis, i, false).unwrap();
                insert_slice(&mut back, e, &s, axis, i);
            }
            assert_eq!(back, v.data());
        }
    }

    #[test]
    fn slice_entries_address_the_right_voxels() {
        let v = Tensor::from_fn(&[1, 3, 4, 5], |i| i as f64);
        let s = extract_slice(&v, 1, 2, false).unwrap();
        assert_eq!(s.shape(), &[1, 3, 5]);
        // (z, y=2, x) lives at z*20 + 2*5 + x
        assert_eq!(s.data()[5 + 3], (20 + 10 + 3) as f64);
        assert!(extract_slice(&v, 1, 4, false).is_err());
    }
}
