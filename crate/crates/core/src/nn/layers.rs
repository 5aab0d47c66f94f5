//! Layer primitives with hand-written backward passes.
//!
//! Activations are single-image `C×H×W` maps in `f32`. A [`Network`] is a
//! sequence of [`Layer`]s whose parameters live outside the graph in a flat
//! tensor list, so one parameter set can drive any number of forward passes
//! (that is what keeps the Siamese towers tied).

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        FeatureMap { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), c * h * w, "feature map size");
        FeatureMap { c, h, w, data }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        FeatureMap { c: data.len(), h: 1, w: 1, data }
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { name: name.into(), shape, data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv {
    pub weight: usize,
    pub bias: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Depthwise {
    pub weight: usize,
    pub bias: usize,
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dense {
    pub weight: usize,
    pub bias: usize,
    pub nin: usize,
    pub nout: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `kernel×kernel` convolution with `kernel/2` zero padding.
    Conv(Conv),
    /// 3×3 per-channel convolution, padding 1.
    Depthwise(Depthwise),
    Relu,
    Relu6,
    /// 2×2 max pooling, stride 2.
    MaxPool2,
    GlobalAvgPool,
    Dense(Dense),
    /// `x + body(x)`; shapes must agree.
    Residual(Vec<Layer>),
}

/// Saved forward state needed by the backward pass.
#[derive(Debug)]
pub enum Cache {
    Conv { col: Vec<f32>, in_shape: (usize, usize, usize) },
    Input(FeatureMap),
    Output(FeatureMap),
    Argmax { index: Vec<u32>, in_shape: (usize, usize, usize) },
    Shape((usize, usize, usize)),
    Residual(Vec<Cache>),
}

fn out_dim(size: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (size + 2 * pad - kernel) / stride + 1
}

/// `c = alpha * op(a) * op(b) + beta * c` over row-major buffers with
/// explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Conv {
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    fn im2col(&self, x: &FeatureMap, ho: usize, wo: usize) -> Vec<f32> {
        let k = self.kernel;
        let pad = k / 2;
        let p = ho * wo;
        let mut col = vec![0.0f32; self.cin * k * k * p];
        for ci in 0..self.cin {
            let plane = &x.data[ci * x.plane()..(ci + 1) * x.plane()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let out = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - pad as isize;
                            if ix >= 0 && (ix as usize) < x.w {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, dcol: &[f32], (c, h, w): (usize, usize, usize), ho: usize, wo: usize) -> FeatureMap {
        let k = self.kernel;
        let pad = k / 2;
        let p = ho * wo;
        let mut dx = FeatureMap::zeros(c, h, w);
        for ci in 0..c {
            let plane = &mut dx.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &dcol[row * p..(row + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                plane[iy as usize * w + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn forward(&self, params: &[Tensor], x: FeatureMap, cache: Option<&mut Vec<Cache>>) -> FeatureMap {
        debug_assert_eq!(x.c, self.cin);
        let (ho, wo) = (out_dim(x.h, self.kernel, self.stride), out_dim(x.w, self.kernel, self.stride));
        let p = ho * wo;
        let kk = self.cin * self.kernel * self.kernel;
        let in_shape = (x.c, x.h, x.w);
        let col = if self.is_pointwise() { x.data } else { self.im2col(&x, ho, wo) };
        let mut out = vec![0.0f32; self.cout * p];
        gemm(self.cout, kk, p, &params[self.weight].data, (kk, 1), &col, (p, 1), 0.0, &mut out);
        let bias = &params[self.bias].data;
        for (co, row) in out.chunks_mut(p).enumerate() {
            let b = bias[co];
            row.iter_mut().for_each(|v| *v += b);
        }
        if let Some(caches) = cache {
            caches.push(Cache::Conv { col, in_shape });
        }
        FeatureMap::from_vec(self.cout, ho, wo, out)
    }

    fn backward(&self, params: &[Tensor], grads: &mut [Vec<f32>], cache: Cache, dy: FeatureMap, need_dx: bool) -> Option<FeatureMap> {
        let Cache::Conv { col, in_shape } = cache else { unreachable!("conv cache") };
        let (ho, wo) = (dy.h, dy.w);
        let p = ho * wo;
        let kk = self.cin * self.kernel * self.kernel;
        // dW += dY · colᵀ
        gemm(self.cout, p, kk, &dy.data, (p, 1), &col, (1, p), 1.0, &mut grads[self.weight]);
        let db = &mut grads[self.bias];
        for (co, row) in dy.data.chunks(p).enumerate() {
            db[co] += row.iter().sum::<f32>();
        }
        if !need_dx {
            return None;
        }
        // dcol = Wᵀ · dY
        let mut dcol = vec![0.0f32; kk * p];
        gemm(kk, self.cout, p, &params[self.weight].data, (1, kk), &dy.data, (p, 1), 0.0, &mut dcol);
        if self.is_pointwise() {
            let (c, h, w) = in_shape;
            Some(FeatureMap::from_vec(c, h, w, dcol))
        } else {
            Some(self.col2im(&dcol, in_shape, ho, wo))
        }
    }
}

impl Depthwise {
    fn forward(&self, params: &[Tensor], x: FeatureMap, cache: Option<&mut Vec<Cache>>) -> FeatureMap {
        let (ho, wo) = (out_dim(x.h, 3, self.stride), out_dim(x.w, 3, self.stride));
        let wgt = &params[self.weight].data;
        let bias = &params[self.bias].data;
        let mut out = FeatureMap::zeros(x.c, ho, wo);
        for c in 0..x.c {
            let plane = &x.data[c * x.plane()..(c + 1) * x.plane()];
            let k = &wgt[c * 9..c * 9 + 9];
            let dst = &mut out.data[c * ho * wo..(c + 1) * ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[c];
                    for ky in 0..3 {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix >= 0 && (ix as usize) < x.w {
                                acc += k[ky * 3 + kx] * plane[iy as usize * x.w + ix as usize];
                            }
                        }
                    }
                    dst[oy * wo + ox] = acc;
                }
            }
        }
        if let Some(caches) = cache {
            caches.push(Cache::Input(x));
        }
        out
    }

    fn backward(&self, params: &[Tensor], grads: &mut [Vec<f32>], cache: Cache, dy: FeatureMap, need_dx: bool) -> Option<FeatureMap> {
        let Cache::Input(x) = cache else { unreachable!("depthwise cache") };
        let (ho, wo) = (dy.h, dy.w);
        let wgt = &params[self.weight].data;
        let mut dx = FeatureMap::zeros(x.c, x.h, x.w);
        for c in 0..x.c {
            let plane = &x.data[c * x.plane()..(c + 1) * x.plane()];
            let g = &dy.data[c * ho * wo..(c + 1) * ho * wo];
            grads[self.bias][c] += g.iter().sum::<f32>();
            let mut dk = [0.0f32; 9];
            let dplane = &mut dx.data[c * x.h * x.w..(c + 1) * x.h * x.w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let go = g[oy * wo + ox];
                    for ky in 0..3 {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix >= 0 && (ix as usize) < x.w {
                                let at = iy as usize * x.w + ix as usize;
                                dk[ky * 3 + kx] += go * plane[at];
                                dplane[at] += go * wgt[c * 9 + ky * 3 + kx];
                            }
                        }
                    }
                }
            }
            for (d, v) in grads[self.weight][c * 9..c * 9 + 9].iter_mut().zip(dk) {
                *d += v;
            }
        }
        need_dx.then_some(dx)
    }
}

impl Dense {
    fn forward(&self, params: &[Tensor], x: FeatureMap, cache: Option<&mut Vec<Cache>>) -> FeatureMap {
        debug_assert_eq!(x.data.len(), self.nin);
        let mut out = params[self.bias].data.clone();
        gemm(self.nout, self.nin, 1, &params[self.weight].data, (self.nin, 1), &x.data, (1, 1), 1.0, &mut out);
        if let Some(caches) = cache {
            caches.push(Cache::Input(x));
        }
        FeatureMap::vector(out)
    }

    fn backward(&self, params: &[Tensor], grads: &mut [Vec<f32>], cache: Cache, dy: FeatureMap, need_dx: bool) -> Option<FeatureMap> {
        let Cache::Input(x) = cache else { unreachable!("dense cache") };
        gemm(self.nout, 1, self.nin, &dy.data, (1, 1), &x.data, (1, 1), 1.0, &mut grads[self.weight]);
        for (d, g) in grads[self.bias].iter_mut().zip(&dy.data) {
            *d += g;
        }
        if !need_dx {
            return None;
        }
        let mut dx = vec![0.0f32; self.nin];
        gemm(self.nin, self.nout, 1, &params[self.weight].data, (1, self.nin), &dy.data, (1, 1), 0.0, &mut dx);
        Some(FeatureMap { data: dx, ..x })
    }
}

impl Layer {
    pub fn forward(&self, params: &[Tensor], x: FeatureMap, cache: Option<&mut Vec<Cache>>) -> FeatureMap {
        match self {
            Layer::Conv(conv) => conv.forward(params, x, cache),
            Layer::Depthwise(dw) => dw.forward(params, x, cache),
            Layer::Dense(d) => d.forward(params, x, cache),
            Layer::Relu | Layer::Relu6 => {
                let cap = if matches!(self, Layer::Relu6) { 6.0 } else { f32::INFINITY };
                let mut y = x;
                y.data.iter_mut().for_each(|v| *v = v.clamp(0.0, cap));
                if let Some(caches) = cache {
                    caches.push(Cache::Output(y.clone()));
                }
                y
            }
            Layer::MaxPool2 => {
                let (ho, wo) = (x.h / 2, x.w / 2);
                let mut out = FeatureMap::zeros(x.c, ho, wo);
                let mut index = vec![0u32; x.c * ho * wo];
                for c in 0..x.c {
                    let base = c * x.plane();
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut best = base + 2 * oy * x.w + 2 * ox;
                            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                let at = base + (2 * oy + dy) * x.w + 2 * ox + dx;
                                if x.data[at] > x.data[best] {
                                    best = at;
                                }
                            }
                            let o = (c * ho + oy) * wo + ox;
                            out.data[o] = x.data[best];
                            index[o] = best as u32;
                        }
                    }
                }
                if let Some(caches) = cache {
                    caches.push(Cache::Argmax { index, in_shape: (x.c, x.h, x.w) });
                }
                out
            }
            Layer::GlobalAvgPool => {
                let plane = x.plane() as f32;
                let data = x.data.chunks(x.plane()).map(|p| p.iter().sum::<f32>() / plane).collect();
                if let Some(caches) = cache {
                    caches.push(Cache::Shape((x.c, x.h, x.w)));
                }
                FeatureMap::vector(data)
            }
            Layer::Residual(body) => {
                let skip = x.data.clone();
                let mut inner = cache.is_some().then(Vec::new);
                let mut y = x;
                for layer in body {
                    y = layer.forward(params, y, inner.as_mut());
                }
                assert_eq!(y.data.len(), skip.len(), "residual shape mismatch");
                y.data.iter_mut().zip(&skip).for_each(|(v, s)| *v += s);
                if let (Some(caches), Some(inner)) = (cache, inner) {
                    caches.push(Cache::Residual(inner));
                }
                y
            }
        }
    }

    pub fn backward(
        &self,
        params: &[Tensor],
        grads: &mut [Vec<f32>],
        cache: Cache,
        dy: FeatureMap,
        need_dx: bool,
    ) -> Option<FeatureMap> {
        match self {
            Layer::Conv(conv) => conv.backward(params, grads, cache, dy, need_dx),
            Layer::Depthwise(dw) => dw.backward(params, grads, cache, dy, need_dx),
            Layer::Dense(d) => d.backward(params, grads, cache, dy, need_dx),
            Layer::Relu | Layer::Relu6 => {
                let Cache::Output(y) = cache else { unreachable!("activation cache") };
                let cap = if matches!(self, Layer::Relu6) { 6.0 } else { f32::INFINITY };
                let mut dx = dy;
                for (g, &v) in dx.data.iter_mut().zip(&y.data) {
                    if !(v > 0.0 && v < cap) {
                        *g = 0.0;
                    }
                }
                Some(dx)
            }
            Layer::MaxPool2 => {
                let Cache::Argmax { index, in_shape: (c, h, w) } = cache else { unreachable!("pool cache") };
                let mut dx = FeatureMap::zeros(c, h, w);
                for (g, &i) in dy.data.iter().zip(&index) {
                    dx.data[i as usize] += g;
                }
                Some(dx)
            }
            Layer::GlobalAvgPool => {
                let Cache::Shape((c, h, w)) = cache else { unreachable!("pool cache") };
                let scale = 1.0 / (h * w) as f32;
                let mut dx = FeatureMap::zeros(c, h, w);
                for (plane, g) in dx.data.chunks_mut(h * w).zip(&dy.data) {
                    plane.iter_mut().for_each(|v| *v = g * scale);
                }
                Some(dx)
            }
            Layer::Residual(body) => {
                let Cache::Residual(mut inner) = cache else { unreachable!("residual cache") };
                let skip = dy.data.clone();
                let mut g = dy;
                for layer in body.iter().rev() {
                    let c = inner.pop().expect("residual cache depth");
                    g = layer.backward(params, grads, c, g, true).expect("inner layers return dx");
                }
                g.data.iter_mut().zip(&skip).for_each(|(v, s)| *v += s);
                Some(g)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn forward(&self, params: &[Tensor], x: FeatureMap) -> FeatureMap {
        self.layers.iter().fold(x, |y, layer| layer.forward(params, y, None))
    }

    pub fn forward_cached(&self, params: &[Tensor], x: FeatureMap) -> (FeatureMap, Vec<Cache>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut y = x;
        for layer in &self.layers {
            y = layer.forward(params, y, Some(&mut caches));
        }
        (y, caches)
    }

    /// Accumulates parameter gradients into `grads` for output gradient `dy`.
    pub fn backward(&self, params: &[Tensor], grads: &mut [Vec<f32>], mut caches: Vec<Cache>, dy: FeatureMap) {
        let mut g = dy;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let cache = caches.pop().expect("one cache per layer");
            match layer.backward(params, grads, cache, g, i > 0) {
                Some(next) => g = next,
                None => break,
            }
        }
    }
}
