use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Interpolation taps along one axis: `(lo, hi, weight of hi)`.
fn taps(out: usize, src: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / out as f64;
    (0..out)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Bilinear resize of a `[C, H, W]` map using half-pixel centres and edge clamping.
///
/// A rank-2 `[H, W]` map is accepted and keeps its rank.
pub fn bilinear_resize<T: Scalar>(map: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Input(format!("cannot resize to {out_h}x{out_w}")));
    }
    let (c, h, w) = match *map.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::Dimension(format!(
                "bilinear resize expects [C,H,W] or [H,W], got {:?}",
                map.shape()
            )))
        }
    };
    if h == 0 || w == 0 {
        return Err(Error::Dimension("cannot resize an empty map".into()));
    }
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let src = map.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, wy) in &ys {
            for &(x0, x1, wx) in &xs {
                let top = plane[y0 * w + x0].as_f64() * (1.0 - wx) + plane[y0 * w + x1].as_f64() * wx;
                let bot = plane[y1 * w + x0].as_f64() * (1.0 - wx) + plane[y1 * w + x1].as_f64() * wx;
                out.push(T::from_f64(top * (1.0 - wy) + bot * wy));
            }
        }
    }
    let shape = if map.ndim() == 2 {
        vec![out_h, out_w]
    } else {
        vec![c, out_h, out_w]
    };
    Tensor::new(shape, out)
}
