use super::{AvgPool, Conv, FeatureMap, LayerSpec, Linear, NetworkSpec, Normalize, Shape3};
use crate::error::{Error, Result};
use crate::numkit::{matmul, Matrix, Vector};

pub fn conv_output_size(n: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if n + 2 * padding < kernel || stride == 0 {
        return Err(Error::Shape {
            expected: format!("spatial size >= kernel {kernel} after padding {padding}"),
            actual: n.to_string(),
        });
    }
    Ok((n + 2 * padding - kernel) / stride + 1)
}

/// Unrolls every `k × k` window into a row of length `k²·N`. Out-of-image
/// positions are zero.
pub fn im2col(
    map: &FeatureMap,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Matrix, usize, usize)> {
    let oh = conv_output_size(map.height, kernel, stride, padding)?;
    let ow = conv_output_size(map.width, kernel, stride, padding)?;
    let n = map.channels();
    let row_len = kernel * kernel * n;
    let mut cols = Matrix::zeros(oh * ow, row_len);
    let src = map.pixels.data();
    for oy in 0..oh {
        for ox in 0..ow {
            let row = cols.row_mut(oy * ow + ox);
            for ky in 0..kernel {
                let Some(iy) = (oy * stride + ky).checked_sub(padding).filter(|&y| y < map.height) else {
                    continue;
                };
                // Contiguous run of in-bounds taps along this kernel row.
                let x0 = (ox * stride).saturating_sub(padding);
                let kx0 = x0 + padding - ox * stride;
                let x1 = (ox * stride + kernel).saturating_sub(padding).min(map.width);
                if x1 <= x0 {
                    continue;
                }
                let at = (ky * kernel + kx0) * n;
                let from = (iy * map.width + x0) * n;
                let len = (x1 - x0) * n;
                row[at..at + len].copy_from_slice(&src[from..from + len]);
            }
        }
    }
    Ok((cols, oh, ow))
}

pub fn conv_map(map: &FeatureMap, conv: &Conv) -> Result<FeatureMap> {
    if map.channels() != conv.in_channels {
        return Err(Error::Shape {
            expected: format!("{} channels", conv.in_channels),
            actual: map.shape().to_string(),
        });
    }
    let (cols, oh, ow) = im2col(map, conv.kernel, conv.stride, conv.padding)?;
    let mut out = matmul(&cols, &conv.weights)?;
    for r in 0..out.rows() {
        for (o, b) in out.row_mut(r).iter_mut().zip(&conv.bias) {
            *o += b;
        }
    }
    Ok(FeatureMap {
        height: oh,
        width: ow,
        pixels: out,
    })
}

pub fn avg_pool_map(map: &FeatureMap, pool: AvgPool) -> Result<FeatureMap> {
    let shape = LayerSpec::AvgPool(pool).output_shape(map.shape())?;
    let k = pool.kernel;
    let n = map.channels();
    let inv = 1.0 / (k * k) as f64;
    let mut out = FeatureMap::zeros(shape);
    for oy in 0..shape.height {
        for ox in 0..shape.width {
            let dst = out.pixels.row_mut(oy * shape.width + ox);
            for ky in 0..k {
                for kx in 0..k {
                    let src = map.pixel(oy * k + ky, ox * k + kx);
                    for c in 0..n {
                        dst[c] += src[c];
                    }
                }
            }
            dst.iter_mut().for_each(|v| *v *= inv);
        }
    }
    Ok(out)
}

fn linear_map(map: &FeatureMap, lin: &Linear) -> Result<FeatureMap> {
    let x = map.data();
    if x.len() != lin.in_dim {
        return Err(Error::Shape {
            expected: format!("{} inputs", lin.in_dim),
            actual: map.shape().to_string(),
        });
    }
    let mut h = lin.bias.clone();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, &w) in h.iter_mut().zip(lin.weights.row(i)) {
            *o += xi * w;
        }
    }
    FeatureMap::from_vec(Shape3::new(1, 1, lin.out_dim), h)
}

fn normalize_map(map: &FeatureMap, norm: &Normalize) -> FeatureMap {
    if !norm.enabled {
        return map.clone();
    }
    let mut out = map.clone();
    for r in 0..out.pixels.rows() {
        for (c, v) in out.pixels.row_mut(r).iter_mut().enumerate() {
            *v = (*v - norm.shift(c)) / norm.scale(c);
        }
    }
    out
}

/// Where per-layer outputs go during a recorded forward pass.
type Sink<'a> = Option<&'a mut Vec<FeatureMap>>;

fn run(layers: &[LayerSpec], mut x: FeatureMap, sink: &mut Sink<'_>) -> Result<FeatureMap> {
    for layer in layers {
        x = match layer {
            LayerSpec::Conv(c) => conv_map(&x, c)?,
            LayerSpec::Linear(l) => linear_map(&x, l)?,
            LayerSpec::AvgPool(p) => avg_pool_map(&x, *p)?,
            LayerSpec::Relu => {
                let mut y = x;
                y.pixels.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                y
            }
            LayerSpec::Flatten => {
                if let Some(s) = sink.as_deref_mut() {
                    // Recorded on the grid so per-pixel statistics stay comparable.
                    s.push(x.clone());
                }
                x = x.flattened();
                continue;
            }
            LayerSpec::ResidualAdd(r) => {
                let branch = run(&r.branch, x.clone(), sink)?;
                if branch.shape() != x.shape() {
                    return Err(Error::Shape {
                        expected: x.shape().to_string(),
                        actual: branch.shape().to_string(),
                    });
                }
                let mut y = x;
                for (a, b) in y.pixels.data_mut().iter_mut().zip(branch.data()) {
                    *a += b;
                }
                y
            }
            LayerSpec::Normalize(n) => normalize_map(&x, n),
        };
        if let Some(s) = sink.as_deref_mut() {
            s.push(x.clone());
        }
    }
    Ok(x)
}

fn check_input(net: &NetworkSpec, image: &FeatureMap) -> Result<()> {
    if image.shape() != net.input_shape {
        return Err(Error::Shape {
            expected: net.input_shape.to_string(),
            actual: image.shape().to_string(),
        });
    }
    Ok(())
}

/// Logits `u_θ(x)`.
pub fn forward(net: &NetworkSpec, image: &FeatureMap) -> Result<Vector> {
    check_input(net, image)?;
    Ok(run(&net.layers, image.clone(), &mut None)?.pixels.into_vec())
}

/// Logits plus the output of every layer in execution order (branch layers
/// precede their residual merge). Flatten outputs are recorded unflattened.
pub fn forward_recorded(net: &NetworkSpec, image: &FeatureMap) -> Result<(Vector, Vec<FeatureMap>)> {
    check_input(net, image)?;
    let mut rec = Vec::with_capacity(net.layer_count());
    let out = run(&net.layers, image.clone(), &mut Some(&mut rec))?;
    Ok((out.pixels.into_vec(), rec))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `f_θ(x)`: the predicted class.
pub fn predict(net: &NetworkSpec, image: &FeatureMap) -> Result<usize> {
    Ok(argmax(&forward(net, image)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_residual_small, NetworkBuilder, Residual};

    fn lin(w: Matrix, b: Vec<f64>) -> LayerSpec {
        LayerSpec::Linear(Linear {
            in_dim: w.rows(),
            out_dim: w.cols(),
            weights: w,
            bias: b,
        })
    }

    #[test]
    fn identity_network() {
        let net = NetworkSpec::new(
            Shape3::new(1, 1, 3),
            vec![lin(Matrix::identity(3), vec![0.0; 3])],
            3,
        )
        .unwrap();
        let x = FeatureMap::from_vec(Shape3::new(1, 1, 3), vec![0.5, -1.0, 2.0]).unwrap();
        assert_eq!(forward(&net, &x).unwrap(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn constant_network() {
        let net = NetworkSpec::new(
            Shape3::new(1, 1, 2),
            vec![lin(Matrix::zeros(2, 3), vec![1.0, -2.0, 0.5])],
            3,
        )
        .unwrap();
        let x = FeatureMap::from_vec(Shape3::new(1, 1, 2), vec![3.0, 4.0]).unwrap();
        assert_eq!(forward(&net, &x).unwrap(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn two_layer_hand_unrolled() {
        // h = relu(W1ᵀx + b1), y = W2ᵀh + b2 with 3 hidden neurons.
        let w1 = Matrix::from_rows(&[vec![1.0, -1.0, 0.5], vec![2.0, 0.0, -1.0]]);
        let b1 = vec![0.0, 0.5, 0.25];
        let w2 = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 1.0], vec![0.5, 2.0]]);
        let b2 = vec![0.1, -0.1];
        let net = NetworkSpec::new(
            Shape3::new(1, 1, 2),
            vec![lin(w1, b1), LayerSpec::Relu, lin(w2, b2)],
            2,
        )
        .unwrap();
        let x = FeatureMap::from_vec(Shape3::new(1, 1, 2), vec![1.0, 0.5]).unwrap();
        // pre = [1+1, -1+0.5, 0.5-0.5+0.25] = [2, -0.5, 0.25] -> relu [2, 0, 0.25]
        // y = [2 + 0.125 + 0.1, 0 + 0.5 - 0.1] = [2.225, 0.4]
        let y = forward(&net, &x).unwrap();
        assert!((y[0] - 2.225).abs() < 1e-15 && (y[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_reports_both() {
        let net = build_residual_small(Shape3::new(4, 4, 1), 2, 1, 0).unwrap();
        let x = FeatureMap::zeros(Shape3::new(4, 5, 1));
        let msg = forward(&net, &x).unwrap_err().to_string();
        assert!(msg.contains("4x4x1") && msg.contains("4x5x1"), "{msg}");
    }

    #[test]
    fn conv_matches_direct_loop() {
        let net = NetworkBuilder::new(Shape3::new(5, 4, 2), 11)
            .conv(3, 3, 1, 1)
            .flatten()
            .linear(2)
            .build()
            .unwrap();
        let LayerSpec::Conv(c) = &net.layers[0] else { unreachable!() };
        let x = FeatureMap::from_vec(
            Shape3::new(5, 4, 2),
            (0..40).map(|i| ((i * 13 % 7) as f64) - 3.0).collect(),
        )
        .unwrap();
        let y = conv_map(&x, c).unwrap();
        for oy in 0..5 {
            for ox in 0..4 {
                for co in 0..3 {
                    let mut s = c.bias[co];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = oy as isize + ky as isize - 1;
                            let ix = ox as isize + kx as isize - 1;
                            if iy < 0 || ix < 0 || iy >= 5 || ix >= 4 {
                                continue;
                            }
                            for ci in 0..2 {
                                s += x.pixel(iy as usize, ix as usize)[ci]
                                    * c.weights[((ky * 3 + kx) * 2 + ci, co)];
                            }
                        }
                    }
                    assert!((y.pixel(oy, ox)[co] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn residual_matches_unrolled() {
        let net = build_residual_small(Shape3::new(4, 4, 1), 3, 1, 5).unwrap();
        let x = FeatureMap::from_vec(
            Shape3::new(4, 4, 1),
            (0..16).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let (logits, rec) = forward_recorded(&net, &x).unwrap();
        assert_eq!(rec.len(), net.layer_count());

        // Manual composition of the same layers.
        let mut h = x.clone();
        for layer in &net.layers {
            h = match layer {
                LayerSpec::Conv(c) => conv_map(&h, c).unwrap(),
                LayerSpec::Relu => {
                    let mut y = h.clone();
                    y.pixels.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                    y
                }
                LayerSpec::ResidualAdd(Residual { branch }) => {
                    let mut b = h.clone();
                    for bl in branch {
                        b = match bl {
                            LayerSpec::Conv(c) => conv_map(&b, c).unwrap(),
                            LayerSpec::Relu => {
                                let mut y = b.clone();
                                y.pixels.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                                y
                            }
                            _ => unreachable!(),
                        };
                    }
                    let mut y = h.clone();
                    for (a, v) in y.pixels.data_mut().iter_mut().zip(b.data()) {
                        *a += v;
                    }
                    y
                }
                LayerSpec::AvgPool(p) => avg_pool_map(&h, *p).unwrap(),
                LayerSpec::Flatten => h.flattened(),
                LayerSpec::Linear(l) => linear_map(&h, l).unwrap(),
                LayerSpec::Normalize(_) => unreachable!(),
            };
        }
        assert_eq!(logits, h.pixels.into_vec());
    }
}
