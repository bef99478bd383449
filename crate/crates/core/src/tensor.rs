//! Dense feature maps plus the min-max normalization and 1x1 channel adapter
//! applied to them before a distillation loss is computed.

use rand::Rng;

use crate::error::{dim_err, Error, Result};

/// A dense `(batch, channel, height, width)` tensor stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let [batch, channels, height, width] = dims;
        if dims.contains(&0) {
            return Err(dim_err!("all dimensions must be at least 1, got {dims:?}"));
        }
        let expected = batch * channels * height * width;
        if data.len() != expected {
            return Err(dim_err!(
                "data length {} does not match {dims:?} ({expected} elements)",
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite value {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Self {
            batch,
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: [usize; 4], value: f64) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "zero-sized dimension in {dims:?}");
        let n = dims.iter().product();
        Self {
            batch: dims[0],
            channels: dims[1],
            height: dims[2],
            width: dims[3],
            data: vec![value; n],
        }
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut out = Self::zeros(dims);
        let [b_n, c_n, h_n, w_n] = dims;
        let mut i = 0;
        for b in 0..b_n {
            for c in 0..c_n {
                for h in 0..h_n {
                    for w in 0..w_n {
                        out.data[i] = f(b, c, h, w);
                        i += 1;
                    }
                }
            }
        }
        out
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn random_uniform<R: Rng + ?Sized>(dims: [usize; 4], lo: f64, hi: f64, rng: &mut R) -> Self {
        let mut out = Self::zeros(dims);
        for v in &mut out.data {
            *v = rng.gen_range(lo..hi);
        }
        out
    }

    /// Internal constructor for buffers whose length is already known to match.
    pub(crate) fn from_parts(dims: [usize; 4], data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), dims.iter().product::<usize>());
        Self {
            batch: dims[0],
            channels: dims[1],
            height: dims[2],
            width: dims[3],
            data,
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }
    pub fn batch(&self) -> usize {
        self.batch
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }
    pub fn num_planes(&self) -> usize {
        self.batch * self.channels
    }

    /// The `height x width` plane for `(batch, channel)`.
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let n = self.plane_len();
        let start = (b * self.channels + c) * n;
        &self.data[start..start + n]
    }

    pub fn index(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.channels + c) * self.height + h) * self.width + w
    }

    pub fn get(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(b, c, h, w)]
    }

    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, value: f64) {
        let i = self.index(b, c, h, w);
        self.data[i] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.dims(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_dims(other)?;
        Ok(Self::from_parts(
            self.dims(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn check_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(dim_err!(
                "shape {:?} does not match {:?}",
                self.dims(),
                other.dims()
            ));
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::InvalidInput(format!(
                "non-finite value {} at flat index {i}",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }

    /// Mean over batch and channels, giving one `height x width` plane.
    pub fn channel_mean(&self) -> Vec<f64> {
        let n = self.plane_len();
        let mut out = vec![0.0; n];
        for p in self.data.chunks(n) {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        let k = self.num_planes() as f64;
        out.iter_mut().for_each(|v| *v /= k);
        out
    }
}

/// One feature map per neck output scale.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleFeatures {
    scales: Vec<FeatureMap>,
}

impl MultiScaleFeatures {
    pub fn new(scales: Vec<FeatureMap>) -> Result<Self> {
        let first = scales
            .first()
            .ok_or_else(|| Error::InvalidInput("at least one scale is required".into()))?;
        if let Some(bad) = scales.iter().find(|s| s.batch() != first.batch()) {
            return Err(dim_err!(
                "batch size {} differs from first scale's {}",
                bad.batch(),
                first.batch()
            ));
        }
        Ok(Self { scales })
    }

    pub fn single(map: FeatureMap) -> Self {
        Self { scales: vec![map] }
    }

    pub fn scales(&self) -> &[FeatureMap] {
        &self.scales
    }
    pub fn scales_mut(&mut self) -> &mut [FeatureMap] {
        &mut self.scales
    }
    pub fn len(&self) -> usize {
        self.scales.len()
    }
    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    /// Per-scale element counts `H_r * W_r * C_r`.
    pub fn element_counts(&self) -> Vec<usize> {
        self.scales
            .iter()
            .map(|s| s.channels() * s.height() * s.width())
            .collect()
    }
}

/// Grouping over which the min and max are taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NormalizeScope {
    /// One range per batch sample over all channels and positions.
    #[default]
    PerSampleScale,
    /// One range per `(batch, channel)` plane.
    PerChannel,
}

impl NormalizeScope {
    fn group_len(self, x: &FeatureMap) -> usize {
        match self {
            NormalizeScope::PerSampleScale => x.channels() * x.plane_len(),
            NormalizeScope::PerChannel => x.plane_len(),
        }
    }
}

/// Result of a min-max rescale, with the slope applied to each group so that
/// gradients can be pulled back through it with the range held fixed.
#[derive(Clone, Debug)]
pub struct Normalized {
    pub map: FeatureMap,
    pub group_len: usize,
    /// `1 / (max - min)` per group, or 0 for a degenerate group.
    pub slopes: Vec<f64>,
}

impl Normalized {
    /// Chain rule through the frozen affine rescale.
    pub fn pull_back(&self, grad: &FeatureMap) -> FeatureMap {
        let mut out = grad.clone();
        for (g, &k) in out
            .as_mut_slice()
            .chunks_mut(self.group_len)
            .zip(&self.slopes)
        {
            g.iter_mut().for_each(|v| *v *= k);
        }
        out
    }
}

pub fn min_max_normalize_affine(x: &FeatureMap, scope: NormalizeScope) -> Result<Normalized> {
    x.check_finite()?;
    let group_len = scope.group_len(x);
    let mut out = x.clone();
    let mut slopes = Vec::with_capacity(x.len() / group_len);
    for g in out.as_mut_slice().chunks_mut(group_len) {
        let (lo, hi) = g
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let range = hi - lo;
        if range > 0.0 && range.is_finite() {
            // Clamp guards the last ulp so the output stays inside [0, 1].
            g.iter_mut()
                .for_each(|v| *v = ((*v - lo) / range).clamp(0.0, 1.0));
            slopes.push(1.0 / range);
        } else {
            g.iter_mut().for_each(|v| *v = 0.0);
            slopes.push(0.0);
        }
    }
    Ok(Normalized {
        map: out,
        group_len,
        slopes,
    })
}

/// Min-max rescale to `[0, 1]`; constant groups map to 0.
pub fn min_max_normalize(x: &FeatureMap, scope: NormalizeScope) -> Result<FeatureMap> {
    Ok(min_max_normalize_affine(x, scope)?.map)
}

/// Weights of a 1x1 convolution mapping `c_in` channels to `c_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    c_out: usize,
    c_in: usize,
    /// Row-major `(c_out, c_in)`.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl AdapterParams {
    pub fn new(c_out: usize, c_in: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if c_out == 0 || c_in == 0 {
            return Err(dim_err!("adapter channels must be at least 1"));
        }
        if weight.len() != c_out * c_in || bias.len() != c_out {
            return Err(dim_err!(
                "adapter {c_out}x{c_in} needs {} weights and {c_out} biases, got {} and {}",
                c_out * c_in,
                weight.len(),
                bias.len()
            ));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite adapter parameter".into()));
        }
        Ok(Self {
            c_out,
            c_in,
            weight,
            bias,
        })
    }

    pub fn identity(channels: usize) -> Self {
        let mut weight = vec![0.0; channels * channels];
        for i in 0..channels {
            weight[i * channels + i] = 1.0;
        }
        Self {
            c_out: channels,
            c_in: channels,
            weight,
            bias: vec![0.0; channels],
        }
    }

    /// Weights uniform in `[-1/sqrt(c_in), 1/sqrt(c_in)]`, zero bias.
    pub fn init_uniform<R: Rng + ?Sized>(c_out: usize, c_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (c_in as f64).sqrt();
        let weight = (0..c_out * c_in)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Self {
            c_out,
            c_in,
            weight,
            bias: vec![0.0; c_out],
        }
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }
    pub fn c_in(&self) -> usize {
        self.c_in
    }
    pub fn weight(&self) -> &[f64] {
        &self.weight
    }
    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }
    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }
    pub fn w(&self, co: usize, ci: usize) -> f64 {
        self.weight[co * self.c_in + ci]
    }
}

/// Per-pixel channel mixing: `out[b,co,h,w] = bias[co] + sum_ci weight[co,ci] * x[b,ci,h,w]`.
pub fn apply_adapter(phi: &AdapterParams, x: &FeatureMap) -> Result<FeatureMap> {
    if phi.c_in != x.channels() {
        return Err(dim_err!(
            "adapter expects {} input channels, map has {}",
            phi.c_in,
            x.channels()
        ));
    }
    let [b_n, _, h, w] = x.dims();
    let n = h * w;
    let mut out = FeatureMap::zeros([b_n, phi.c_out, h, w]);
    for b in 0..b_n {
        for co in 0..phi.c_out {
            let start = (b * phi.c_out + co) * n;
            let dst = &mut out.as_mut_slice()[start..start + n];
            dst.iter_mut().for_each(|v| *v = phi.bias[co]);
            for ci in 0..phi.c_in {
                let k = phi.w(co, ci);
                for (d, s) in dst.iter_mut().zip(x.plane(b, ci)) {
                    *d += k * s;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a scalar objective through [`apply_adapter`].
pub(crate) fn adapter_backward(
    phi: &AdapterParams,
    x: &FeatureMap,
    grad_out: &FeatureMap,
) -> (FeatureMap, Vec<f64>, Vec<f64>) {
    let [b_n, _, h, w] = x.dims();
    let n = h * w;
    let mut d_x = FeatureMap::zeros(x.dims());
    let mut d_w = vec![0.0; phi.c_out * phi.c_in];
    let mut d_b = vec![0.0; phi.c_out];
    for b in 0..b_n {
        for co in 0..phi.c_out {
            let g = grad_out.plane(b, co);
            d_b[co] += g.iter().sum::<f64>();
            for ci in 0..phi.c_in {
                let xs = x.plane(b, ci);
                d_w[co * phi.c_in + ci] += g.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                let k = phi.w(co, ci);
                let start = (b * phi.c_in + ci) * n;
                for (d, gv) in d_x.as_mut_slice()[start..start + n].iter_mut().zip(g) {
                    *d += k * gv;
                }
            }
        }
    }
    (d_x, d_w, d_b)
}
