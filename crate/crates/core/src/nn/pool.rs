use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Non-overlapping 2x2 max pooling.
///
/// Returns the pooled tensor and, per output element, the flat input index
/// that produced it. Ties go to the first element in row-major scan order.
pub fn max_pool2d<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::pre(
            "max_pool2d",
            format!("spatial dims of {s} must be even (pad the input upstream)"),
        ));
    }
    let os = Shape {
        h: s.h / 2,
        w: s.w / 2,
        ..s
    };
    let mut y = Tensor::zeros(os);
    let mut arg = vec![0u32; os.numel()];
    let xd = x.data();
    let mut o = 0;
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oy in 0..os.h {
            for ox in 0..os.w {
                let i0 = base + 2 * oy * s.w + 2 * ox;
                let cand = [i0, i0 + 1, i0 + s.w, i0 + s.w + 1];
                let mut best = cand[0];
                for &c in &cand[1..] {
                    if xd[c] > xd[best] {
                        best = c;
                    }
                }
                y.data_mut()[o] = xd[best];
                arg[o] = best as u32;
                o += 1;
            }
        }
    }
    Ok((y, arg))
}

pub fn max_pool2d_backward<T: Scalar>(dy: &Tensor<T>, argmax: &[u32], input: Shape) -> Tensor<T> {
    let mut dx = Tensor::zeros(input);
    for (&g, &i) in dy.data().iter().zip(argmax) {
        dx.data_mut()[i as usize] += g;
    }
    dx
}
