//! Real-domain layer forward/backward primitives used by the training
//! path. These operate on plain tensors; fake quantization wraps them one
//! level up.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding.0 - self.kernel.0) / self.stride.0 + 1,
            (w + 2 * self.padding.1 - self.kernel.1) / self.stride.1 + 1,
        )
    }
}

pub fn conv_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: &ConvGeometry) -> Result<Tensor> {
    let (c, h, w) = x.dims3();
    if c != g.in_channels {
        return Err(Error::ShapeMismatch {
            expected: format!("{} channels", g.in_channels),
            got: format!("{c}"),
        });
    }
    let (oh, ow) = g.output_hw(h, w);
    let mut out = Tensor::zeros(vec![g.out_channels, oh, ow]);
    for oc in 0..g.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for ic in 0..g.in_channels {
                    for ky in 0..g.kernel.0 {
                        for kx in 0..g.kernel.1 {
                            let iy = (oy * g.stride.0 + ky) as isize - g.padding.0 as isize;
                            let ix = (ox * g.stride.1 + kx) as isize - g.padding.1 as isize;
                            if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                continue;
                            }
                            let wv = weight.data
                                [((oc * g.in_channels + ic) * g.kernel.0 + ky) * g.kernel.1 + kx];
                            acc += wv * x.at3(ic, iy as usize, ix as usize);
                        }
                    }
                }
                out.set3(oc, oy, ox, acc + bias.map_or(0.0, |b| b.data[oc]));
            }
        }
    }
    Ok(out)
}

/// Gradients of a conv layer: returns (d_input, d_weight, d_bias).
pub fn conv_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    g: &ConvGeometry,
    want_bias: bool,
) -> (Tensor, Tensor, Option<Tensor>) {
    let (_, h, w) = x.dims3();
    let (_, oh, ow) = dy.dims3();
    let mut dx = Tensor::zeros(x.shape.clone());
    let mut dw = Tensor::zeros(weight.shape.clone());
    let mut db = want_bias.then(|| Tensor::zeros(vec![g.out_channels]));
    for oc in 0..g.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let grad = dy.at3(oc, oy, ox);
                if let Some(db) = db.as_mut() {
                    db.data[oc] += grad;
                }
                for ic in 0..g.in_channels {
                    for ky in 0..g.kernel.0 {
                        for kx in 0..g.kernel.1 {
                            let iy = (oy * g.stride.0 + ky) as isize - g.padding.0 as isize;
                            let ix = (ox * g.stride.1 + kx) as isize - g.padding.1 as isize;
                            if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                continue;
                            }
                            let widx = ((oc * g.in_channels + ic) * g.kernel.0 + ky) * g.kernel.1 + kx;
                            dw.data[widx] += grad * x.at3(ic, iy as usize, ix as usize);
                            let xidx = (ic * h + iy as usize) * w + ix as usize;
                            dx.data[xidx] += grad * weight.data[widx];
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub fn fc_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, n_in: usize, n_out: usize) -> Result<Tensor> {
    if x.numel() != n_in {
        return Err(Error::ShapeMismatch {
            expected: format!("{n_in} features"),
            got: format!("{}", x.numel()),
        });
    }
    let mut out = vec![0.0f64; n_out];
    for (o, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for i in 0..n_in {
            acc += weight.data[o * n_in + i] * x.data[i];
        }
        *slot = acc + bias.map_or(0.0, |b| b.data[o]);
    }
    Ok(Tensor { shape: vec![n_out], data: out })
}

pub fn fc_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    n_in: usize,
    n_out: usize,
    want_bias: bool,
) -> (Tensor, Tensor, Option<Tensor>) {
    let mut dx = Tensor::zeros(x.shape.clone());
    let mut dw = Tensor::zeros(weight.shape.clone());
    let db = want_bias.then(|| Tensor { shape: vec![n_out], data: dy.data.clone() });
    for o in 0..n_out {
        let grad = dy.data[o];
        for i in 0..n_in {
            dw.data[o * n_in + i] += grad * x.data[i];
            dx.data[i] += grad * weight.data[o * n_in + i];
        }
    }
    (dx, dw, db)
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor { shape: x.shape.clone(), data }
}

/// Routes each window's gradient to its first maximal element (same scan
/// order as the forward pass).
pub fn max_pool_backward(x: &Tensor, dy: &Tensor, kernel: (usize, usize), stride: (usize, usize)) -> Tensor {
    let (c, _, _) = x.dims3();
    let (_, oh, ow) = dy.dims3();
    let mut dx = Tensor::zeros(x.shape.clone());
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_pos = (0, 0);
                for ky in 0..kernel.0 {
                    for kx in 0..kernel.1 {
                        let (iy, ix) = (oy * stride.0 + ky, ox * stride.1 + kx);
                        let v = x.at3(ch, iy, ix);
                        if v > best {
                            best = v;
                            best_pos = (iy, ix);
                        }
                    }
                }
                let (iy, ix) = best_pos;
                let cur = dx.at3(ch, iy, ix);
                dx.set3(ch, iy, ix, cur + dy.at3(ch, oy, ox));
            }
        }
    }
    dx
}

pub fn adaptive_avg_pool_backward(x_shape: &[usize], dy: &Tensor, output: (usize, usize)) -> Tensor {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (oh, ow) = output;
    let mut dx = Tensor::zeros(x_shape.to_vec());
    for ch in 0..c {
        for oy in 0..oh {
            let y0 = oy * h / oh;
            let y1 = ((oy + 1) * h).div_ceil(oh);
            for ox in 0..ow {
                let x0 = ox * w / ow;
                let x1 = ((ox + 1) * w).div_ceil(ow);
                let share = dy.at3(ch, oy, ox) / ((y1 - y0) * (x1 - x0)) as f64;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let cur = dx.at3(ch, iy, ix);
                        dx.set3(ch, iy, ix, cur + share);
                    }
                }
            }
        }
    }
    dx
}

/// Split a concat gradient back into per-source gradients given each
/// source's channel count (spatial sizes all match).
pub fn concat_backward(dy: &Tensor, channels: &[usize]) -> Vec<Tensor> {
    let (_, h, w) = dy.dims3();
    let mut out = Vec::with_capacity(channels.len());
    let mut offset = 0;
    for &c in channels {
        let len = c * h * w;
        out.push(Tensor { shape: vec![c, h, w], data: dy.data[offset..offset + len].to_vec() });
        offset += len;
    }
    out
}

/// Backward of a softmax layer: `dx_i = p_i * (dy_i - sum_j p_j dy_j)`.
pub fn softmax_backward(probs: &Tensor, dy: &Tensor) -> Tensor {
    let dot: f64 = probs.data.iter().zip(&dy.data).map(|(&p, &g)| p * g).sum();
    let data = probs.data.iter().zip(&dy.data).map(|(&p, &g)| p * (g - dot)).collect();
    Tensor { shape: probs.shape.clone(), data }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fc_backward_matches_hand_derivation() {
        // y = W x, W = [[1, 2], [3, 4]], x = [5, 6], dy = [1, 1].
        let x = Tensor::new(vec![2], vec![5.0, 6.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let dy = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let (dx, dw, db) = fc_backward(&x, &w, &dy, 2, 2, true);
        assert_eq!(dx.data, vec![4.0, 6.0]); // W^T dy
        assert_eq!(dw.data, vec![5.0, 6.0, 5.0, 6.0]);
        assert_eq!(db.unwrap().data, vec![1.0, 1.0]);
    }

    #[test]
    fn max_pool_backward_routes_to_first_max() {
        let x = Tensor::new(vec![1, 2, 2], vec![3.0, 3.0, 1.0, 0.0]).unwrap();
        let dy = Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap();
        let dx = max_pool_backward(&x, &dy, (2, 2), (2, 2));
        assert_eq!(dx.data, vec![2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn avg_pool_backward_spreads_evenly() {
        let dy = Tensor::new(vec![1, 1, 1], vec![4.0]).unwrap();
        let dx = adaptive_avg_pool_backward(&[1, 2, 2], &dy, (1, 1));
        assert_eq!(dx.data, vec![1.0, 1.0, 1.0, 1.0]);
    }
}
