use crate::tensor::{Scalar, Tensor};

/// Fixed 2-D sine-cosine position table, `[grid_side² × dim]`.
///
/// The first half of the channels encodes the column, the second half the
/// row; each half is `[sin(p·ω_i) | cos(p·ω_i)]` with
/// `ω_i = 10000^(−i / (dim/4))`. `dim` must be a multiple of 4.
pub fn sincos_2d<T: Scalar>(grid_side: usize, dim: usize) -> Tensor<T> {
    assert!(dim.is_multiple_of(4), "sincos_2d needs dim divisible by 4, got {dim}");
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(grid_side * grid_side * dim);
    for row in 0..grid_side {
        for col in 0..grid_side {
            for pos in [col as f64, row as f64] {
                data.extend(omega.iter().map(|w| T::of((pos * w).sin())));
                data.extend(omega.iter().map(|w| T::of((pos * w).cos())));
            }
        }
    }
    Tensor::new(vec![grid_side * grid_side, dim], data).expect("table size")
}
