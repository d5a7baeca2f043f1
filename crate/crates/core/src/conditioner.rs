//! Fully-connected conditioning networks and the flat parameter vector.
//!
//! Every network maps `(x_prefix, t)` to the `3K - 1` raw spline parameters of
//! one coordinate. Hidden layers use `tanh`; the output layer is affine and
//! starts at zero so a fresh flow is the identity map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VcnfError};
use crate::spline::RawTheta;

/// Maximum number of layer sizes (input, hidden..., output) per network.
pub const MAX_SIZES: usize = 8;

/// Shape and parameter offset of one conditioner network.
///
/// Parameters live in a shared flat vector: for each affine layer the weight
/// matrix (row-major, `out x in`) followed by the bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConditionerNet {
    offset: usize,
    sizes: [usize; MAX_SIZES],
    depth: usize,
}

impl ConditionerNet {
    pub fn new(offset: usize, input_dim: usize, hidden: &[usize], output_dim: usize) -> Result<Self> {
        if hidden.len() + 2 > MAX_SIZES {
            return Err(VcnfError::Config(format!(
                "at most {} hidden layers are supported",
                MAX_SIZES - 2
            )));
        }
        if input_dim == 0 || output_dim == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(VcnfError::Config("layer widths must be positive".into()));
        }
        let mut sizes = [0; MAX_SIZES];
        sizes[0] = input_dim;
        sizes[1..=hidden.len()].copy_from_slice(hidden);
        sizes[hidden.len() + 1] = output_dim;
        Ok(Self {
            offset,
            sizes,
            depth: hidden.len() + 2,
        })
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes[..self.depth]
    }

    /// Input width, including the trailing time input.
    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.sizes[self.depth - 1]
    }

    pub fn n_params(&self) -> usize {
        self.sizes()
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Plain evaluation; `input` includes the time entry.
    pub fn forward(&self, params: &[f64], input: &[f64]) -> Vec<f64> {
        let mut arena = input.to_vec();
        let mut out = Vec::with_capacity(self.output_dim());
        self.forward_cached(params, &mut arena, 0, &mut out);
        out
    }

    /// Evaluates the network whose input occupies `arena[start..]`, appending
    /// every hidden activation to `arena` and writing the outputs to `out`.
    pub(crate) fn forward_cached(&self, params: &[f64], arena: &mut Vec<f64>, start: usize, out: &mut Vec<f64>) {
        debug_assert_eq!(arena.len() - start, self.input_dim());
        let mut p = self.offset;
        let mut a_start = start;
        let n_layers = self.depth - 1;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &params[p..p + n_out * n_in];
            let b = &params[p + n_out * n_in..p + n_out * n_in + n_out];
            p += n_out * n_in + n_out;
            let last = l + 1 == n_layers;
            if last {
                out.clear();
            }
            for (row, &bias) in w.chunks_exact(n_in).zip(b) {
                let a = &arena[a_start..a_start + n_in];
                let s = bias + row.iter().zip(a).map(|(w, x)| w * x).sum::<f64>();
                if last {
                    out.push(s);
                } else {
                    arena.push(fast_tanh(s));
                }
            }
            a_start += n_in;
        }
    }

    /// Reverse sweep through the network. `cache` is the slice written by
    /// [`ConditionerNet::forward_cached`]; parameter adjoints are added into
    /// `grad` and input adjoints written into `in_adj`.
    pub(crate) fn backward(
        &self,
        params: &[f64],
        cache: &[f64],
        out_adj: &[f64],
        grad: &mut [f64],
        in_adj: &mut [f64],
    ) {
        let n_layers = self.depth - 1;
        // activation offsets inside the cache and parameter offsets per layer
        let mut a_off = [0usize; MAX_SIZES];
        let mut p_off = [0usize; MAX_SIZES];
        let mut p = self.offset;
        for l in 0..n_layers {
            if l > 0 {
                a_off[l] = a_off[l - 1] + self.sizes[l - 1];
            }
            p_off[l] = p;
            p += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        let mut g: Vec<f64> = out_adj.to_vec();
        let mut g_prev = Vec::new();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let a = &cache[a_off[l]..a_off[l] + n_in];
            let w_off = p_off[l];
            let b_off = w_off + n_out * n_in;
            g_prev.clear();
            g_prev.resize(n_in, 0.0);
            for i in 0..n_out {
                let gi = g[i];
                if gi == 0.0 {
                    continue;
                }
                grad[b_off + i] += gi;
                let row = w_off + i * n_in;
                for j in 0..n_in {
                    grad[row + j] += gi * a[j];
                    g_prev[j] += params[row + j] * gi;
                }
            }
            if l > 0 {
                for j in 0..n_in {
                    g_prev[j] *= 1.0 - a[j] * a[j];
                }
            }
            std::mem::swap(&mut g, &mut g_prev);
        }
        in_adj.copy_from_slice(&g[..in_adj.len()]);
    }
}

/// `tanh` through a single `exp`; absolute error stays at rounding level.
#[inline]
fn fast_tanh(x: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

/// Evaluates one conditioner on `(x_prefix, t)`.
pub fn conditioner_forward(net: &ConditionerNet, params: &[f64], x_prefix: &[f64], t: f64) -> Result<RawTheta> {
    if x_prefix.len() + 1 != net.input_dim() {
        return Err(VcnfError::Contract(format!(
            "conditioner expects {} prefix coordinates, got {}",
            net.input_dim() - 1,
            x_prefix.len()
        )));
    }
    let mut input = x_prefix.to_vec();
    input.push(t);
    Ok(RawTheta {
        values: net.forward(params, &input),
    })
}

/// Location of one network's parameters inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub layer: usize,
    pub position: usize,
    pub coordinate: usize,
    pub offset: usize,
    pub len: usize,
    pub sizes: Vec<usize>,
}

/// All trainable parameters of a flow, with the index map back to networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub index: Vec<ParamBlock>,
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn values_from_le_bytes(bytes: &[u8]) -> Result<Vec<f64>> {
        if bytes.len() % 8 != 0 {
            return Err(VcnfError::Serde(format!(
                "parameter file length {} is not a multiple of 8",
                bytes.len()
            )));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}

/// Fan-in scaled uniform init for hidden layers, zeros for every output layer.
pub fn init_params(nets: &[ConditionerNet], n_params: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; n_params];
    for net in nets {
        let mut p = net.offset();
        let sizes = net.sizes();
        let n_layers = sizes.len() - 1;
        for l in 0..n_layers {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let len = n_in * n_out + n_out;
            if l + 1 < n_layers {
                let bound = 1.0 / (n_in as f64).sqrt();
                for v in &mut values[p..p + len] {
                    *v = rng.gen_range(-bound..bound);
                }
            }
            p += len;
        }
    }
    values
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_output_layer_gives_zero_theta() {
        let net = ConditionerNet::new(0, 3, &[16, 16], 14).unwrap();
        let params = init_params(&[net], net.n_params(), 7);
        let theta = conditioner_forward(&net, &params, &[0.3, -2.0], 0.5).unwrap();
        assert_eq!(theta.values, vec![0.0; 14]);
    }

    #[test]
    fn tiny_network_matches_hand_evaluation() {
        // 1 -> 1 -> 1 with all weights 1, biases (0.5, 0.25), input t = 0.
        let net = ConditionerNet::new(0, 1, &[1], 1).unwrap();
        let params = [1.0, 0.5, 1.0, 0.25];
        let out = net.forward(&params, &[0.0]);
        assert!((out[0] - (0.5f64.tanh() + 0.25)).abs() < 1e-15);
        assert!((fast_tanh(-30.0) + 1.0).abs() < 1e-15 && (fast_tanh(400.0) - 1.0).abs() < 1e-15);
        let out = net.forward(&params, &[0.2]);
        assert!((out[0] - (0.7f64.tanh() + 0.25)).abs() < 1e-15);
    }

    #[test]
    fn prefix_length_mismatch_is_a_contract_error() {
        let net = ConditionerNet::new(0, 2, &[4], 5).unwrap();
        let params = vec![0.0; net.n_params()];
        assert!(matches!(
            conditioner_forward(&net, &params, &[1.0, 2.0], 0.0),
            Err(VcnfError::Contract(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = ConditionerNet::new(0, 3, &[5, 4], 3).unwrap();
        let mut params: Vec<f64> = (0..net.n_params()).map(|i| ((i * 37 % 23) as f64 - 11.0) / 13.0).collect();
        let input = [0.4, -1.1, 0.3];
        let out_adj = [0.7, -0.2, 1.3];
        let objective = |p: &[f64]| -> f64 {
            net.forward(p, &input)
                .iter()
                .zip(&out_adj)
                .map(|(o, g)| o * g)
                .sum()
        };
        let mut arena = input.to_vec();
        let mut out = Vec::new();
        net.forward_cached(&params, &mut arena, 0, &mut out);
        let mut grad = vec![0.0; params.len()];
        let mut in_adj = vec![0.0; 3];
        net.backward(&params, &arena, &out_adj, &mut grad, &mut in_adj);
        let h = 1e-6;
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + h;
            let up = objective(&params);
            params[i] = orig - h;
            let down = objective(&params);
            params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-8, "param {i}: {fd} vs {}", grad[i]);
        }
        for j in 0..3 {
            let mut x = input;
            x[j] += h;
            let up: f64 = net.forward(&params, &x).iter().zip(&out_adj).map(|(o, g)| o * g).sum();
            x[j] -= 2.0 * h;
            let down: f64 = net.forward(&params, &x).iter().zip(&out_adj).map(|(o, g)| o * g).sum();
            assert!(((up - down) / (2.0 * h) - in_adj[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn init_is_reproducible() {
        let nets = [
            ConditionerNet::new(0, 1, &[16, 16], 14).unwrap(),
            ConditionerNet::new(542, 2, &[16, 16], 14).unwrap(),
        ];
        let n = nets.iter().map(|n| n.n_params()).sum();
        assert_eq!(init_params(&nets, n, 3), init_params(&nets, n, 3));
        assert_ne!(init_params(&nets, n, 3), init_params(&nets, n, 4));
    }
}
