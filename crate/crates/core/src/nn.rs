//! Parameter storage and the handful of layers the network is built from.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{im2col, FeatureMap, Graph, Mat, Var, Window};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable matrices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Same names and shapes in the same order.
    pub fn layout_matches(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| (a.rows, a.cols) == (b.rows, b.cols))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// Sets every parameter whose name starts with `prefix` and ends with
    /// `suffix` to zero. Used by tests that need exact zero maps.
    pub fn zero_matching(&mut self, prefix: &str, suffix: &str) {
        for (n, v) in self.names.iter().zip(self.values.iter_mut()) {
            if n.starts_with(prefix) && n.ends_with(suffix) {
                v.data.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
}

fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize, rows: usize, cols: usize) -> Mat {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-a..a))
}

/// `y = x W + b`, `W` stored `in x out`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = ps.add(format!("{name}.weight"), xavier(rng, fan_in, fan_out, fan_in, fan_out));
        let bias = ps.add(format!("{name}.bias"), Mat::zeros(1, fan_out));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        let y = g.matmul(x, w);
        g.add(y, b)
    }
}

/// Row-wise layer normalization with learned scale and shift.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), Mat::filled(1, width, 1.0));
        let beta = ps.add(format!("{name}.beta"), Mat::zeros(1, width));
        Self { gamma, beta, eps: LN_EPS }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm(x, self.eps);
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        let y = g.mul(n, gamma);
        g.add(y, beta)
    }
}

/// Dense 2D convolution over a channels-last map, weight `(k*k*in) x out`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = kernel * kernel * c_in;
        let weight = ps.add(
            format!("{name}.weight"),
            xavier(rng, fan_in, kernel * kernel * c_out, fan_in, c_out),
        );
        let bias = ps.add(format!("{name}.bias"), Mat::zeros(1, c_out));
        Self {
            weight,
            bias,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: FeatureMap) -> FeatureMap {
        let win = Window::square(x.height, x.width, self.kernel, self.stride, self.pad);
        let cols = if self.kernel == 1 && self.stride == 1 && self.pad == 0 {
            x.var
        } else {
            im2col(g, x, win)
        };
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        let y = g.matmul(cols, w);
        let y = g.add(y, b);
        FeatureMap::new(y, win.out_h, win.out_w)
    }
}

/// Depthwise `k x k` convolution (stride 1, same padding), weight `(k*k) x c`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DepthwiseConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl DepthwiseConv {
    pub fn new(ps: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize, kernel: usize) -> Self {
        let kk = kernel * kernel;
        let weight = ps.add(format!("{name}.weight"), xavier(rng, kk, kk, kk, channels));
        let bias = ps.add(format!("{name}.bias"), Mat::zeros(1, channels));
        Self { weight, bias, kernel }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: FeatureMap) -> FeatureMap {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        let y = g.depthwise_conv(x.var, w, x.height, x.width, self.kernel);
        FeatureMap::new(g.add(y, b), x.height, x.width)
    }
}
