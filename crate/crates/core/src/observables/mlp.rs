use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Observable;
use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-a).exp()),
        }
    }

    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = a.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-a).exp());
                s * (1.0 - s)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub input_dim: usize,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub seed: u64,
    /// Multiplies the `1/sqrt(fan_in)` weight range and the hidden bias range.
    pub init_scale: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden: vec![64],
            output_dim: 32,
            activation: Activation::Tanh,
            seed: 0,
            init_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Fully connected network with smooth hidden activations and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub activation: Activation,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct LayerJson {
    rows: usize,
    cols: usize,
    /// Row-major.
    w: Vec<f64>,
    b: Vec<f64>,
}

/// On-disk form of an [`Mlp`].
#[derive(Serialize, Deserialize)]
pub struct MlpCheckpoint {
    layers: Vec<LayerJson>,
    activation: Activation,
    seed: u64,
}

impl Mlp {
    pub fn new(cfg: &MlpConfig) -> Result<Self> {
        if cfg.hidden.is_empty() {
            return Err(Error::InvalidParameter("MLP needs at least one hidden layer".into()));
        }
        if cfg.input_dim == 0 || cfg.output_dim == 0 || cfg.hidden.contains(&0) {
            return Err(Error::InvalidParameter("MLP layer sizes must be positive".into()));
        }
        if !(cfg.init_scale.is_finite() && cfg.init_scale > 0.0) {
            return Err(Error::InvalidParameter("init_scale must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut sizes = vec![cfg.input_dim];
        sizes.extend(&cfg.hidden);
        sizes.push(cfg.output_dim);
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, pair)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let r = cfg.init_scale / (fan_in as f64).sqrt();
                let w = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-r..r));
                let b = if i == last {
                    DVector::zeros(fan_out)
                } else {
                    DVector::from_fn(fan_out, |_, _| rng.random_range(-cfg.init_scale..cfg.init_scale))
                };
                Layer { w, b }
            })
            .collect();
        Ok(Self {
            layers,
            activation: cfg.activation,
            seed: cfg.seed,
        })
    }

    /// Pre-activations and activations of every hidden layer, plus the output.
    fn trace(&self, x: &DVector<f64>) -> (Vec<DVector<f64>>, Vec<DVector<f64>>, DVector<f64>) {
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let mut act = Vec::with_capacity(self.layers.len());
        act.push(x.clone());
        let (hidden, out) = self.layers.split_at(self.layers.len() - 1);
        for layer in hidden {
            let a = &layer.w * act.last().unwrap() + &layer.b;
            act.push(a.map(|v| self.activation.apply(v)));
            pre.push(a);
        }
        let y = &out[0].w * act.last().unwrap() + &out[0].b;
        (pre, act, y)
    }

    pub fn to_checkpoint(&self) -> MlpCheckpoint {
        MlpCheckpoint {
            layers: self
                .layers
                .iter()
                .map(|l| LayerJson {
                    rows: l.w.nrows(),
                    cols: l.w.ncols(),
                    w: l.w.transpose().iter().cloned().collect(),
                    b: l.b.iter().cloned().collect(),
                })
                .collect(),
            activation: self.activation,
            seed: self.seed,
        }
    }

    pub fn from_checkpoint(ck: MlpCheckpoint) -> Result<Self> {
        if ck.layers.len() < 2 {
            return Err(Error::InvalidParameter("checkpoint needs at least two layers".into()));
        }
        let mut layers = Vec::with_capacity(ck.layers.len());
        for l in ck.layers {
            check_len("checkpoint weights", l.rows * l.cols, l.w.len())?;
            check_len("checkpoint bias", l.rows, l.b.len())?;
            if let Some(prev) = layers.last() {
                let prev: &Layer = prev;
                check_len("checkpoint layer chaining", prev.w.nrows(), l.cols)?;
            }
            layers.push(Layer {
                w: DMatrix::from_row_slice(l.rows, l.cols, &l.w),
                b: DVector::from_vec(l.b),
            });
        }
        Ok(Self {
            layers,
            activation: ck.activation,
            seed: ck.seed,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_checkpoint())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_checkpoint(serde_json::from_str(text)?)
    }
}

impl Observable for Mlp {
    fn state_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.nrows()
    }

    fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        self.trace(x).2
    }

    fn state_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (pre, _, _) = self.trace(x);
        let mut jac = self.layers[0].w.clone();
        for (k, a) in pre.iter().enumerate() {
            let d = a.map(|v| self.activation.derivative(v));
            for (i, mut row) in jac.row_iter_mut().enumerate() {
                row *= d[i];
            }
            jac = &self.layers[k + 1].w * jac;
        }
        jac
    }

    fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Layer by layer: weights row-major, then bias.
    fn params(&self) -> DVector<f64> {
        let mut theta = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            for row in l.w.row_iter() {
                theta.extend(row.iter());
            }
            theta.extend(l.b.iter());
        }
        DVector::from_vec(theta)
    }

    fn set_params(&mut self, theta: &DVector<f64>) -> Result<()> {
        check_len("MLP parameters", self.param_count(), theta.len())?;
        let mut k = 0;
        for l in &mut self.layers {
            let (r, c) = l.w.shape();
            for i in 0..r {
                for j in 0..c {
                    l.w[(i, j)] = theta[k];
                    k += 1;
                }
            }
            for i in 0..r {
                l.b[i] = theta[k];
                k += 1;
            }
        }
        Ok(())
    }

    fn param_gradient(&self, x: &DVector<f64>, sensitivity: &DVector<f64>) -> DVector<f64> {
        let (pre, act, _) = self.trace(x);
        let depth = self.layers.len();
        let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(depth);
        let mut delta = sensitivity.clone();
        for k in (0..depth).rev() {
            let layer = &self.layers[k];
            grads.push((&delta * act[k].transpose(), delta.clone()));
            if k > 0 {
                let back = layer.w.tr_mul(&delta);
                delta = back.zip_map(&pre[k - 1], |g, a| g * self.activation.derivative(a));
            }
        }
        grads.reverse();
        let mut out = Vec::with_capacity(self.param_count());
        for (gw, gb) in grads {
            for row in gw.row_iter() {
                out.extend(row.iter());
            }
            out.extend(gb.iter());
        }
        DVector::from_vec(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(seed: u64) -> MlpConfig {
        MlpConfig {
            input_dim: 2,
            hidden: vec![16, 8],
            output_dim: 5,
            activation: Activation::Tanh,
            seed,
            init_scale: 1.0,
        }
    }

    fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn same_seed_same_network() {
        let a = Mlp::new(&cfg(11)).unwrap();
        let b = Mlp::new(&cfg(11)).unwrap();
        assert_eq!(a.params(), b.params());
        let x = DVector::from_vec(vec![0.4, -1.1]);
        assert_eq!(a.forward(&x), b.forward(&x));
        assert_ne!(a.params(), Mlp::new(&cfg(12)).unwrap().params());
    }

    #[test]
    fn zero_final_weights_output_bias() {
        let mut net = Mlp::new(&cfg(1)).unwrap();
        let out = net.layers.last_mut().unwrap();
        out.w.fill(0.0);
        out.b = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4, 0.5]);
        for x in [[0.0, 0.0], [3.0, -7.0]] {
            assert_eq!(net.forward(&DVector::from_row_slice(&x)).as_slice(), &[0.1, 0.2, 0.3, 0.4, 0.5]);
        }
        // Fresh networks start with a zero output bias.
        let fresh = Mlp::new(&cfg(1)).unwrap();
        assert!(fresh.layers.last().unwrap().b.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn rejects_invalid_config() {
        let mut c = cfg(0);
        c.hidden.clear();
        assert!(Mlp::new(&c).is_err());
        let mut c = cfg(0);
        c.output_dim = 0;
        assert!(Mlp::new(&c).is_err());
    }

    #[test]
    fn jacobian_matches_fd_both_activations() {
        let h = 1e-6;
        for act in [Activation::Tanh, Activation::Sigmoid] {
            let net = Mlp::new(&MlpConfig { activation: act, ..cfg(5) }).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            for _ in 0..50 {
                let x = DVector::from_vec(vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]);
                let mut fd = DMatrix::zeros(5, 2);
                for j in 0..2 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    fd.set_column(j, &((net.forward(&xp) - net.forward(&xm)) / (2.0 * h)));
                }
                assert!(rel(&net.state_jacobian(&x), &fd) < 1e-5);
            }
        }
    }

    #[test]
    fn param_gradient_matches_fd() {
        let mut net = Mlp::new(&cfg(8)).unwrap();
        let theta = net.params();
        let x = DVector::from_vec(vec![0.7, -0.2]);
        let s = DVector::from_vec(vec![1.0, -0.5, 0.25, 2.0, -1.5]);
        let g = net.param_gradient(&x, &s);
        let h = 1e-6;
        let mut fd = DVector::zeros(theta.len());
        for k in 0..theta.len() {
            let mut tp = theta.clone();
            tp[k] += h;
            net.set_params(&tp).unwrap();
            let fp = s.dot(&net.forward(&x));
            tp[k] -= 2.0 * h;
            net.set_params(&tp).unwrap();
            let fm = s.dot(&net.forward(&x));
            fd[k] = (fp - fm) / (2.0 * h);
        }
        net.set_params(&theta).unwrap();
        assert!((g - &fd).norm() / fd.norm() < 1e-4);
    }

    #[test]
    fn params_round_trip() {
        let mut net = Mlp::new(&cfg(2)).unwrap();
        let theta = net.params();
        assert_eq!(theta.len(), net.param_count());
        assert_eq!(net.param_count(), 2 * 16 + 16 + 16 * 8 + 8 + 8 * 5 + 5);
        net.set_params(&(theta.clone() * 2.0)).unwrap();
        assert_eq!(net.params(), theta * 2.0);
        assert!(net.set_params(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = Mlp::new(&cfg(4)).unwrap();
        let text = net.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["activation"], "tanh");
        assert_eq!(v["seed"], 4);
        assert_eq!(v["layers"][0]["rows"], 16);
        assert_eq!(v["layers"][0]["cols"], 2);
        assert_eq!(Mlp::from_json(&text).unwrap(), net);
    }
}
