//! Dense `f64` matrices and a small reverse-mode autodiff tape.

mod graph;
mod mat;

pub use graph::{Graph, Var, NONE};
pub use mat::{gemm, Mat};

/// A channels-last feature map living in a [`Graph`]: the node holds an
/// `(height*width) x channels` matrix, row index `y * width + x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    pub var: Var,
    pub height: usize,
    pub width: usize,
}

impl FeatureMap {
    pub fn new(var: Var, height: usize, width: usize) -> Self {
        Self { var, height, width }
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

/// Window geometry for [`im2col`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    /// Square kernel with symmetric padding; output size by the usual floor rule.
    pub fn square(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            kh: k,
            kw: k,
            stride,
            pad_top: pad,
            pad_left: pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w + 2 * pad - k) / stride + 1,
        }
    }

    /// Stride-1 window whose output has the input's size ("same" padding,
    /// extra padding at the bottom/right for even kernels).
    pub fn same(h: usize, w: usize, kh: usize, kw: usize) -> Self {
        Self {
            kh,
            kw,
            stride: 1,
            pad_top: (kh - 1) / 2,
            pad_left: (kw - 1) / 2,
            out_h: h,
            out_w: w,
        }
    }
}

/// Patch extraction: `(h*w) x c -> (out_h*out_w) x (kh*kw*c)`, columns in
/// `[ki][kj][channel]` order, zeros outside the map.
pub fn im2col(g: &mut Graph, x: FeatureMap, win: Window) -> Var {
    let c = g.shape(x.var).1;
    let cols = win.kh * win.kw * c;
    let mut index = Vec::with_capacity(win.out_h * win.out_w * cols);
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            for ki in 0..win.kh {
                let sy = (oy * win.stride + ki) as isize - win.pad_top as isize;
                for kj in 0..win.kw {
                    let sx = (ox * win.stride + kj) as isize - win.pad_left as isize;
                    if sy < 0 || sx < 0 || sy >= x.height as isize || sx >= x.width as isize {
                        index.extend(std::iter::repeat_n(NONE, c));
                    } else {
                        let base = (sy as usize * x.width + sx as usize) * c;
                        index.extend((base..base + c).map(|i| i as u32));
                    }
                }
            }
        }
    }
    g.gather(x.var, win.out_h * win.out_w, cols, index)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(g: &mut Graph, x: FeatureMap, factor: usize) -> FeatureMap {
    if factor == 1 {
        return x;
    }
    let c = g.shape(x.var).1;
    let (oh, ow) = (x.height * factor, x.width * factor);
    let mut index = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for xx in 0..ow {
            let base = ((y / factor) * x.width + xx / factor) * c;
            index.extend((base..base + c).map(|i| i as u32));
        }
    }
    FeatureMap::new(g.gather(x.var, oh * ow, c, index), oh, ow)
}
