//! Fixed linear reference encoder.
//!
//! Eight filter responses are computed on the Cartesian image with zero
//! padding, then average-pooled 2x2 twice (stride 4):
//!
//! | ch | response                                        |
//! |----|-------------------------------------------------|
//! | 0  | 3x3 binomial smoothing                          |
//! | 1  | horizontal central difference (+x / columns)    |
//! | 2  | vertical central difference (+y / rows)         |
//! | 3  | diagonal difference (down-right minus up-left)  |
//! | 4  | anti-diagonal difference (down-left minus up-right) |
//! | 5  | 4-neighbour Laplacian                           |
//! | 6  | horizontal derivative of Gaussian, sigma 2 px   |
//! | 7  | vertical derivative of Gaussian, sigma 4 px     |
//!
//! Every stage is linear and shift-equivariant.

use crate::radar::CartesianImage;

use super::{FeatureError, FeatureExtractor, FeatureMap};

pub const REFERENCE_CHANNELS: usize = 8;
pub const REFERENCE_STRIDE: usize = 4;
const FINE_SIGMA: f64 = 2.0;
const COARSE_SIGMA: f64 = 4.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReferenceEncoder;

impl FeatureExtractor for ReferenceEncoder {
    fn extract(&self, image: &CartesianImage) -> Result<FeatureMap, FeatureError> {
        reference_features(image)
    }
}

/// A small dense kernel, `rows x cols`, centered.
struct Kernel {
    rows: usize,
    cols: usize,
    taps: Vec<f64>,
}

impl Kernel {
    fn new3(taps: [f64; 9]) -> Self {
        Self {
            rows: 3,
            cols: 3,
            taps: taps.to_vec(),
        }
    }
}

fn correlate(src: &[f64], w: usize, h: usize, k: &Kernel) -> Vec<f64> {
    let (hr, hc) = ((k.rows / 2) as isize, (k.cols / 2) as isize);
    let mut out = vec![0.0; w * h];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut acc = 0.0;
            for kr in 0..k.rows as isize {
                let rr = r + kr - hr;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                for kc in 0..k.cols as isize {
                    let cc = c + kc - hc;
                    if cc < 0 || cc >= w as isize {
                        continue;
                    }
                    acc += k.taps[(kr as usize) * k.cols + kc as usize] * src[rr as usize * w + cc as usize];
                }
            }
            out[r as usize * w + c as usize] = acc;
        }
    }
    out
}

/// Correlates rows with `along_x` then columns with `along_y`.
fn separable(src: &[f64], w: usize, h: usize, along_x: &[f64], along_y: &[f64]) -> Vec<f64> {
    let hx = (along_x.len() / 2) as isize;
    let hy = (along_y.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w as isize {
            let mut acc = 0.0;
            for (k, tap) in along_x.iter().enumerate() {
                let cc = c + k as isize - hx;
                if cc >= 0 && cc < w as isize {
                    acc += tap * src[r * w + cc as usize];
                }
            }
            tmp[r * w + c as usize] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for r in 0..h as isize {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, tap) in along_y.iter().enumerate() {
                let rr = r + k as isize - hy;
                if rr >= 0 && rr < h as isize {
                    acc += tap * tmp[rr as usize * w + c];
                }
            }
            out[r as usize * w + c] = acc;
        }
    }
    out
}

fn gaussian_taps(sigma: f64) -> (Vec<f64>, Vec<f64>) {
    let radius = (3.0 * sigma).ceil() as isize;
    let g: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = g.iter().sum();
    let g: Vec<f64> = g.into_iter().map(|v| v / sum).collect();
    // Derivative taps for correlation: out(x) = sum_k dg[k] * in(x + k).
    let dg: Vec<f64> = (-radius..=radius)
        .zip(&g)
        .map(|(k, v)| k as f64 / (sigma * sigma) * v)
        .collect();
    (g, dg)
}

fn pool2(src: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let (ow, oh) = (w / 2, h / 2);
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for c in 0..ow {
            let (r2, c2) = (2 * r, 2 * c);
            out[r * ow + c] = 0.25
                * (src[r2 * w + c2] + src[r2 * w + c2 + 1] + src[(r2 + 1) * w + c2] + src[(r2 + 1) * w + c2 + 1]);
        }
    }
    (out, ow, oh)
}

pub fn reference_features(image: &CartesianImage) -> Result<FeatureMap, FeatureError> {
    let (w, h) = (image.width, image.height);
    if w < REFERENCE_STRIDE || h < REFERENCE_STRIDE {
        return Err(FeatureError::ImageTooSmall {
            width: w,
            height: h,
            stride: REFERENCE_STRIDE,
        });
    }
    if image.pixels.len() != w * h || image.pixels.iter().any(|p| !p.is_finite()) {
        return Err(FeatureError::InvalidImage);
    }
    let src: Vec<f64> = image.pixels.iter().map(|&p| p as f64).collect();

    let smooth = Kernel::new3([1.0, 2.0, 1.0, 2.0, 4.0, 2.0, 1.0, 2.0, 1.0].map(|v| v / 16.0));
    let grad_x = Kernel::new3([0.0, 0.0, 0.0, -0.5, 0.0, 0.5, 0.0, 0.0, 0.0]);
    let grad_y = Kernel::new3([0.0, -0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0]);
    let diag = Kernel::new3([-0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5]);
    let anti = Kernel::new3([0.0, 0.0, -0.5, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0]);
    let laplace = Kernel::new3([0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0]);
    let (g_fine, dg_fine) = gaussian_taps(FINE_SIGMA);
    let (g_coarse, dg_coarse) = gaussian_taps(COARSE_SIGMA);

    let responses = [
        correlate(&src, w, h, &smooth),
        correlate(&src, w, h, &grad_x),
        correlate(&src, w, h, &grad_y),
        correlate(&src, w, h, &diag),
        correlate(&src, w, h, &anti),
        correlate(&src, w, h, &laplace),
        separable(&src, w, h, &dg_fine, &g_fine),
        separable(&src, w, h, &g_coarse, &dg_coarse),
    ];

    let mut data = Vec::new();
    let (mut hf, mut wf) = (0, 0);
    for resp in responses {
        let (p1, w1, h1) = pool2(&resp, w, h);
        let (p2, w2, h2) = pool2(&p1, w1, h1);
        wf = w2;
        hf = h2;
        data.extend(p2.into_iter().map(|v| v as f32));
    }
    Ok(FeatureMap {
        channels: REFERENCE_CHANNELS,
        height: hf,
        width: wf,
        stride: REFERENCE_STRIDE,
        data,
    })
}
