//! Scaled dot-product attention, multi-head attention, the two-layer
//! feed-forward network and the residual block built from them. The
//! backbone, the encoder and the decoder all go through this one kernel.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{LayerNorm, Linear, ParamStore};
use crate::tensor::{Graph, Mat, Var};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AttentionError {
    #[error("model width {width} is not divisible by {heads} heads")]
    WidthNotDivisible { width: usize, heads: usize },
    #[error("attention shape mismatch: {0}")]
    Shape(String),
}

/// `softmax(Q K^T / sqrt(d)) V`; returns the output and the weight matrix.
pub fn attention_with_weights(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var), AttentionError> {
    let (qs, ks, vs) = (g.shape(q), g.shape(k), g.shape(v));
    if qs.1 != ks.1 {
        return Err(AttentionError::Shape(format!("query width {} vs key width {}", qs.1, ks.1)));
    }
    if ks.0 != vs.0 {
        return Err(AttentionError::Shape(format!("{} keys vs {} values", ks.0, vs.0)));
    }
    let scores = g.matmul_t(q, false, k, true);
    let scores = g.scale(scores, 1.0 / (qs.1 as f64).sqrt());
    let weights = g.softmax_rows(scores);
    Ok((g.matmul(weights, v), weights))
}

pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var, AttentionError> {
    attention_with_weights(g, q, k, v).map(|(out, _)| out)
}

/// `Concat(H_1..H_h) W_o` with `H_j = Attention(Q W_q^j, K W_k^j, V W_v^j)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    /// Query side of width `q_in`, key/value side of width `kv_in`, inner and
    /// output width `width`.
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        q_in: usize,
        kv_in: usize,
        width: usize,
        heads: usize,
    ) -> Result<Self, AttentionError> {
        if heads == 0 || width % heads != 0 {
            return Err(AttentionError::WidthNotDivisible { width, heads });
        }
        Ok(Self {
            q_proj: Linear::new(ps, rng, &format!("{name}.q"), q_in, width),
            k_proj: Linear::new(ps, rng, &format!("{name}.k"), kv_in, width),
            v_proj: Linear::new(ps, rng, &format!("{name}.v"), kv_in, width),
            out_proj: Linear::new(ps, rng, &format!("{name}.o"), width, width),
            heads,
            width,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, q_in: Var, k_in: Var, v_in: Var) -> Result<Var, AttentionError> {
        let q = self.q_proj.forward(g, ps, q_in);
        let k = self.k_proj.forward(g, ps, k_in);
        let v = self.v_proj.forward(g, ps, v_in);
        let d = self.width / self.heads;
        let heads = if self.heads == 1 {
            vec![attention(g, q, k, v)?]
        } else {
            let mut out = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = g.slice_cols(q, h * d, d);
                let kh = g.slice_cols(k, h * d, d);
                let vh = g.slice_cols(v, h * d, d);
                out.push(attention(g, qh, kh, vh)?);
            }
            out
        };
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        Ok(self.out_proj.forward(g, ps, cat))
    }
}

/// `max(0, X W_1 + b_1) W_2 + b_2`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(ps: &mut ParamStore, rng: &mut impl Rng, name: &str, width: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(ps, rng, &format!("{name}.fc1"), width, hidden),
            fc2: Linear::new(ps, rng, &format!("{name}.fc2"), hidden, width),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(g, ps, x);
        let h = g.relu(h);
        self.fc2.forward(g, ps, h)
    }
}

/// Post-norm transformer block:
/// `X = LN(Q + MHA(Q + pos_q, M + pos_m, M))`, `out = LN(X + FFN(X))`.
/// With `M = Q` it is a self-attention block.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub mha: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl AttentionBlock {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        width: usize,
        heads: usize,
        ffn_hidden: usize,
    ) -> Result<Self, AttentionError> {
        Ok(Self {
            mha: MultiHeadAttention::new(ps, rng, &format!("{name}.attn"), width, width, width, heads)?,
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), width),
            ffn: FeedForward::new(ps, rng, &format!("{name}.ffn"), width, ffn_hidden),
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), width),
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        query: Var,
        query_pos: Option<Var>,
        memory: Var,
        memory_pos: Option<Var>,
    ) -> Result<Var, AttentionError> {
        let q_in = match query_pos {
            Some(p) => g.add(query, p),
            None => query,
        };
        let k_in = match memory_pos {
            Some(p) => g.add(memory, p),
            None => memory,
        };
        let a = self.mha.forward(g, ps, q_in, k_in, memory)?;
        let x = g.add(query, a);
        let x = self.norm1.forward(g, ps, x);
        let f = self.ffn.forward(g, ps, x);
        let y = g.add(x, f);
        Ok(self.norm2.forward(g, ps, y))
    }
}

/// Angular frequencies for `bands` sinusoid pairs, wavelengths spaced
/// geometrically from `longest` down to `shortest` meters.
pub fn sine_frequencies(bands: usize, longest: f64, shortest: f64) -> Vec<f64> {
    (0..bands)
        .map(|j| {
            let t = if bands > 1 { j as f64 / (bands - 1) as f64 } else { 0.0 };
            let wavelength = longest * (shortest / longest).powf(t);
            2.0 * std::f64::consts::PI / wavelength
        })
        .collect()
}

/// `[sin(v w_0), cos(v w_0), sin(v w_1), ...]` for each value in turn.
pub fn sine_embed(values: &[f64], freqs: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len() * freqs.len() * 2);
    for &v in values {
        for &w in freqs {
            let (s, c) = (v * w).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
    out
}

/// Metric placement of a BEV grid: cell `(row, col)` is centered at
/// `origin + (col + 0.5, row + 0.5) * cell`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFrame {
    pub origin: [f64; 2],
    pub cell: [f64; 2],
}

impl GridFrame {
    pub fn coarsened(&self, stride: usize) -> Self {
        Self {
            origin: self.origin,
            cell: [self.cell[0] * stride as f64, self.cell[1] * stride as f64],
        }
    }

    pub fn center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.origin[0] + (col as f64 + 0.5) * self.cell[0],
            self.origin[1] + (row as f64 + 0.5) * self.cell[1],
        ]
    }
}

/// Fixed 2D sinusoidal encoding of cell centers in meters: the first half
/// of the channels encodes x, the second half y. `width` must be a multiple of 4.
pub fn positional_encoding(height: usize, width_cells: usize, frame: &GridFrame, width: usize) -> Mat {
    assert!(width % 4 == 0, "positional encoding width must be a multiple of 4");
    let freqs = sine_frequencies(width / 4, 12.8, 0.4);
    let mut out = Mat::zeros(height * width_cells, width);
    for r in 0..height {
        for c in 0..width_cells {
            let [x, y] = frame.center(r, c);
            out.row_mut(r * width_cells + c).copy_from_slice(&sine_embed(&[x, y], &freqs));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let q = g.constant(rand_mat(&mut rng, 5, 3));
        let k = g.constant(rand_mat(&mut rng, 1, 3));
        let v = g.constant(Mat::row_vector(&[1.0, -2.0]));
        let out = attention(&mut g, q, k, v).unwrap();
        for r in 0..5 {
            assert_eq!(g.value(out).row(r), &[1.0, -2.0]);
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let q = g.constant(rand_mat(&mut rng, 2, 3));
        let k = g.constant(Mat::filled(4, 3, 0.3));
        let vm = rand_mat(&mut rng, 4, 2);
        let mean: Vec<f64> = (0..2).map(|c| (0..4).map(|r| vm.get(r, c)).sum::<f64>() / 4.0).collect();
        let v = g.constant(vm);
        let out = attention(&mut g, q, k, v).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert!((g.value(out).get(r, c) - mean[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let q = g.constant(Mat::zeros(2, 3));
        let k = g.constant(Mat::zeros(4, 2));
        let v = g.constant(Mat::zeros(4, 2));
        assert!(attention(&mut g, q, k, v).is_err());
        let k = g.constant(Mat::zeros(4, 3));
        let v = g.constant(Mat::zeros(5, 2));
        assert!(attention(&mut g, q, k, v).is_err());
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            MultiHeadAttention::new(&mut ps, &mut rng, "m", 6, 6, 6, 4).unwrap_err(),
            AttentionError::WidthNotDivisible { width: 6, heads: 4 }
        );
    }

    #[test]
    fn origin_embeds_to_zero_phase() {
        let e = sine_embed(&[0.0, 0.0, 0.0], &sine_frequencies(8, 12.8, 0.4));
        assert_eq!(e.len(), 48);
        for pair in e.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
    }

    #[test]
    fn positional_encoding_distinguishes_cells() {
        let frame = GridFrame {
            origin: [-3.2, -3.2],
            cell: [0.4, 0.4],
        };
        let pe = positional_encoding(16, 16, &frame, 64);
        for a in 0..256 {
            for b in a + 1..256 {
                let d: f64 = pe.row(a).iter().zip(pe.row(b)).map(|(x, y)| (x - y).abs()).sum();
                assert!(d > 1e-3);
            }
        }
    }
}
