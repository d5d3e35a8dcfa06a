use crate::error::{FlapError, Result};
use crate::numerics::Tensor;

/// Fixed `[gt·gf, width]` position table for a time × frequency patch grid.
/// The first half of each row encodes the time index, the second half the
/// frequency index; each half is `sin` over its first quarter of the width
/// and `cos` over the second, with frequencies `1 / 10000^(2i/(width/2))`.
pub fn sinusoid_2d(gt: usize, gf: usize, width: usize) -> Result<Tensor> {
    if width == 0 || !width.is_multiple_of(4) {
        return Err(FlapError::Config(format!(
            "sinusoidal width {width} must be a positive multiple of 4"
        )));
    }
    let half = width / 2;
    let quarter = width / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(gt * gf * width);
    for t in 0..gt {
        for f in 0..gf {
            for pos in [t as f64, f as f64] {
                data.extend(omega.iter().map(|w| (pos * w).sin()));
                data.extend(omega.iter().map(|w| (pos * w).cos()));
            }
        }
    }
    debug_assert_eq!(data.len(), gt * gf * 2 * half);
    Tensor::new(&[gt * gf, width], data)
}
