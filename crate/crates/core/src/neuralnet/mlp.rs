use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Softplus { beta: f64 },
    Relu,
    Sine { w0: f64 },
    None,
}

impl Activation {
    pub const SOFTPLUS: Activation = Activation::Softplus { beta: 100.0 };

    #[inline]
    pub fn apply(&self, z: f64) -> f64 {
        match *self {
            Activation::Softplus { beta } => {
                let bz = beta * z;
                if bz > 30.0 {
                    z
                } else {
                    bz.exp().ln_1p() / beta
                }
            }
            Activation::Relu => z.max(0.0),
            Activation::Sine { w0 } => (w0 * z).sin(),
            Activation::None => z,
        }
    }

    #[inline]
    pub fn derivative(&self, z: f64) -> f64 {
        match *self {
            Activation::Softplus { beta } => sigmoid(beta * z),
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sine { w0 } => w0 * (w0 * z).cos(),
            Activation::None => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    /// Activation after the last layer.
    pub output_activation: Activation,
    /// Layer index whose input is `[h, input]`.
    pub skip: Option<usize>,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize) -> Self {
        MlpConfig {
            input_dim,
            hidden: hidden.to_vec(),
            output_dim,
            activation: Activation::SOFTPLUS,
            output_activation: Activation::None,
            skip: None,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn layer_in(&self, l: usize) -> usize {
        let base = if l == 0 { self.input_dim } else { self.hidden[l - 1] };
        if self.skip == Some(l) && l > 0 {
            base + self.input_dim
        } else {
            base
        }
    }

    pub fn layer_out(&self, l: usize) -> usize {
        if l < self.hidden.len() {
            self.hidden[l]
        } else {
            self.output_dim
        }
    }

    pub fn parameter_count(&self) -> usize {
        (0..self.num_layers()).map(|l| (self.layer_in(l) + 1) * self.layer_out(l)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layout {
    w: usize,
    b: usize,
    n_in: usize,
    n_out: usize,
}

/// Fully connected network over a flat parameter vector.
#[derive(Debug, Serialize, Deserialize)]
pub struct Mlp {
    config: MlpConfig,
    params: Vec<f64>,
    #[serde(skip, default = "fresh_id")]
    id: u64,
    #[serde(skip)]
    version: u64,
    #[serde(skip)]
    layout: Vec<Layout>,
}

impl Clone for Mlp {
    fn clone(&self) -> Self {
        Mlp {
            config: self.config.clone(),
            params: self.params.clone(),
            id: fresh_id(),
            version: 0,
            layout: self.layout.clone(),
        }
    }
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// Forward intermediates of one evaluation.
#[derive(Clone, Debug)]
pub struct Tape {
    net_id: u64,
    version: u64,
    /// Input of each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
    penult: usize,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Activation of the last hidden layer.
    pub fn penultimate(&self) -> &[f64] {
        &self.inputs[self.inputs.len() - 1][..self.penult]
    }

    pub fn input(&self) -> &[f64] {
        &self.inputs[0]
    }
}

fn build_layout(cfg: &MlpConfig) -> Vec<Layout> {
    let mut off = 0;
    (0..cfg.num_layers())
        .map(|l| {
            let (n_in, n_out) = (cfg.layer_in(l), cfg.layer_out(l));
            let lay = Layout {
                w: off,
                b: off + n_in * n_out,
                n_in,
                n_out,
            };
            off += (n_in + 1) * n_out;
            lay
        })
        .collect()
}

#[inline]
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    let n_in = x.len();
    out.clear();
    out.extend(b.iter().enumerate().map(|(o, &bo)| {
        let row = &w[o * n_in..(o + 1) * n_in];
        bo + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
    }));
}

impl Mlp {
    pub fn zeros(config: MlpConfig) -> Result<Self> {
        if config.input_dim == 0 || config.output_dim == 0 || config.hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid("network widths must be positive"));
        }
        if let Some(s) = config.skip {
            if s == 0 || s >= config.num_layers() {
                return Err(Error::invalid(format!("skip layer {s} out of range")));
            }
        }
        let layout = build_layout(&config);
        Ok(Mlp {
            params: vec![0.0; config.parameter_count()],
            config,
            id: fresh_id(),
            version: 0,
            layout,
        })
    }

    /// Scaled-Gaussian fan-in initialization (He for softplus/relu, SIREN for sine).
    pub fn new<R: Rng>(config: MlpConfig, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        for l in 0..net.layout.len() {
            let lay = net.layout[l];
            let act = if l + 1 == net.layout.len() {
                net.config.output_activation
            } else {
                net.config.activation
            };
            let fan_in = lay.n_in as f64;
            let w = net.layer_weights_mut(l);
            match act {
                Activation::Sine { w0 } if l > 0 => {
                    let bound = (6.0 / fan_in).sqrt() / w0;
                    w.iter_mut().for_each(|x| *x = rng.gen_range(-bound..bound));
                }
                Activation::Sine { .. } => {
                    let bound = 1.0 / fan_in;
                    w.iter_mut().for_each(|x| *x = rng.gen_range(-bound..bound));
                }
                _ => {
                    let n = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
                    w.iter_mut().for_each(|x| *x = n.sample(rng));
                }
            }
        }
        net.touch();
        Ok(net)
    }

    /// Restores derived state after deserialization.
    pub fn rebuild(&mut self) -> Result<()> {
        self.layout = build_layout(&self.config);
        if self.params.len() != self.config.parameter_count() {
            return Err(Error::invalid(format!(
                "parameter vector has {} entries, config needs {}",
                self.params.len(),
                self.config.parameter_count()
            )));
        }
        self.touch();
        Ok(())
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameters; invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.touch();
        &mut self.params
    }

    fn touch(&mut self) {
        self.version += 1;
    }

    pub fn num_layers(&self) -> usize {
        self.layout.len()
    }

    pub fn layer_weights_mut(&mut self, l: usize) -> &mut [f64] {
        let lay = self.layout[l];
        self.touch();
        &mut self.params[lay.w..lay.b]
    }

    pub fn layer_bias_mut(&mut self, l: usize) -> &mut [f64] {
        let lay = self.layout[l];
        self.touch();
        &mut self.params[lay.b..lay.b + lay.n_out]
    }

    pub fn layer_weights(&self, l: usize) -> &[f64] {
        let lay = self.layout[l];
        &self.params[lay.w..lay.b]
    }

    pub fn layer_bias(&self, l: usize) -> &[f64] {
        let lay = self.layout[l];
        &self.params[lay.b..lay.b + lay.n_out]
    }

    /// Parameter offsets `(weights, bias)` of layer `l`.
    pub fn layer_offsets(&self, l: usize) -> (usize, usize) {
        (self.layout[l].w, self.layout[l].b)
    }

    fn check_input(&self, n: usize) -> Result<()> {
        if n != self.config.input_dim {
            return Err(Error::invalid(format!(
                "network expects {} inputs, got {n}",
                self.config.input_dim
            )));
        }
        Ok(())
    }

    fn activation(&self, l: usize) -> Activation {
        if l + 1 == self.layout.len() {
            self.config.output_activation
        } else {
            self.config.activation
        }
    }

    fn layer_input(&self, l: usize, h: &[f64], input: &[f64], buf: &mut Vec<f64>) {
        buf.clear();
        buf.extend_from_slice(h);
        if self.config.skip == Some(l) {
            buf.extend_from_slice(input);
        }
    }

    /// Tape-free evaluation of `[x, cond]`.
    pub fn forward(&self, x: &[f64], cond: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len() + cond.len())?;
        let mut input = Vec::with_capacity(x.len() + cond.len());
        input.extend_from_slice(x);
        input.extend_from_slice(cond);
        Ok(self.eval(&input))
    }

    /// Tape-free evaluation; panics on a dimension mismatch.
    pub fn eval(&self, input: &[f64]) -> Vec<f64> {
        self.eval_layers(input, self.layout.len())
    }

    /// Activation of the last hidden layer.
    pub fn eval_hidden(&self, input: &[f64]) -> Vec<f64> {
        self.eval_layers(input, self.layout.len() - 1)
    }

    fn eval_layers(&self, input: &[f64], n_layers: usize) -> Vec<f64> {
        assert_eq!(input.len(), self.config.input_dim, "network input width");
        let mut h = input.to_vec();
        let mut z = Vec::new();
        let mut buf = Vec::new();
        for (l, lay) in self.layout.iter().enumerate().take(n_layers) {
            let x = if l > 0 && self.config.skip == Some(l) {
                self.layer_input(l, &h, input, &mut buf);
                &buf
            } else {
                &h
            };
            affine(&self.params[lay.w..lay.b], &self.params[lay.b..lay.b + lay.n_out], x, &mut z);
            let act = self.activation(l);
            if act != Activation::None {
                z.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            std::mem::swap(&mut h, &mut z);
        }
        h
    }

    pub fn forward_tape(&self, x: &[f64], cond: &[f64]) -> Result<Tape> {
        self.check_input(x.len() + cond.len())?;
        let mut input = Vec::with_capacity(x.len() + cond.len());
        input.extend_from_slice(x);
        input.extend_from_slice(cond);
        Ok(self.record(&input))
    }

    /// Evaluation recording intermediates; panics on a dimension mismatch.
    pub fn record(&self, input: &[f64]) -> Tape {
        assert_eq!(input.len(), self.config.input_dim, "network input width");
        let n = self.layout.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut h = input.to_vec();
        for (l, lay) in self.layout.iter().enumerate() {
            let mut x = Vec::new();
            self.layer_input(l, &h, input, &mut x);
            let mut z = Vec::new();
            affine(&self.params[lay.w..lay.b], &self.params[lay.b..lay.b + lay.n_out], &x, &mut z);
            let act = self.activation(l);
            h = z.iter().map(|&v| act.apply(v)).collect();
            inputs.push(x);
            pre.push(z);
        }
        Tape {
            net_id: self.id,
            version: self.version,
            inputs,
            pre,
            output: h,
            penult: self.config.hidden.last().copied().unwrap_or(self.config.input_dim),
        }
    }

    /// Reverse pass. Accumulates parameter gradients into `grad` (when given) and
    /// returns the gradient with respect to the network input.
    ///
    /// `d_hidden` optionally injects an extra gradient on the last hidden activation.
    pub fn backward(
        &self,
        tape: &Tape,
        d_out: &[f64],
        d_hidden: Option<&[f64]>,
        mut grad: Option<&mut [f64]>,
    ) -> Result<Vec<f64>> {
        if tape.net_id != self.id || tape.version != self.version {
            return Err(Error::contract("tape was recorded by a different network state"));
        }
        if d_out.len() != self.config.output_dim {
            return Err(Error::invalid("output gradient width mismatch"));
        }
        if let Some(g) = grad.as_deref() {
            if g.len() != self.params.len() {
                return Err(Error::invalid("gradient buffer width mismatch"));
            }
        }
        let n = self.layout.len();
        let mut g: Vec<f64> = d_out.to_vec();
        let mut d_input = vec![0.0; self.config.input_dim];
        for l in (0..n).rev() {
            let lay = self.layout[l];
            let act = self.activation(l);
            if l + 1 < n || act != Activation::None {
                for (gv, &z) in g.iter_mut().zip(&tape.pre[l]) {
                    *gv *= act.derivative(z);
                }
            }
            let x = &tape.inputs[l];
            if let Some(buf) = grad.as_deref_mut() {
                let (gw, gb) = buf[lay.w..lay.b + lay.n_out].split_at_mut(lay.n_in * lay.n_out);
                for o in 0..lay.n_out {
                    let go = g[o];
                    if go == 0.0 {
                        continue;
                    }
                    gb[o] += go;
                    let row = &mut gw[o * lay.n_in..(o + 1) * lay.n_in];
                    for (r, &xi) in row.iter_mut().zip(x) {
                        *r += go * xi;
                    }
                }
            }
            let w = &self.params[lay.w..lay.b];
            let mut dx = vec![0.0; lay.n_in];
            for o in 0..lay.n_out {
                let go = g[o];
                if go == 0.0 {
                    continue;
                }
                let row = &w[o * lay.n_in..(o + 1) * lay.n_in];
                for (d, &wi) in dx.iter_mut().zip(row) {
                    *d += go * wi;
                }
            }
            if l == 0 {
                for (a, b) in d_input.iter_mut().zip(&dx) {
                    *a += b;
                }
                break;
            }
            let hidden_w = self.config.hidden[l - 1];
            if self.config.skip == Some(l) {
                for (a, b) in d_input.iter_mut().zip(&dx[hidden_w..]) {
                    *a += b;
                }
            }
            dx.truncate(hidden_w);
            if l + 1 == n {
                if let Some(dh) = d_hidden {
                    if dh.len() != hidden_w {
                        return Err(Error::invalid("hidden gradient width mismatch"));
                    }
                    for (a, b) in dx.iter_mut().zip(dh) {
                        *a += b;
                    }
                }
            }
            g = dx;
        }
        Ok(d_input)
    }

    /// Forward-mode derivatives along several input tangents at once.
    /// Returns the output and one output tangent per input tangent.
    pub fn jvp(&self, input: &[f64], tangents: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
        self.jvp_layers(input, tangents, self.layout.len())
    }

    /// [`Mlp::jvp`] stopping at the last hidden activation.
    pub fn jvp_hidden(&self, input: &[f64], tangents: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
        self.jvp_layers(input, tangents, self.layout.len() - 1)
    }

    fn jvp_layers(&self, input: &[f64], tangents: &[Vec<f64>], n_layers: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        assert_eq!(input.len(), self.config.input_dim, "network input width");
        let mut h = input.to_vec();
        let mut dh: Vec<Vec<f64>> = tangents.to_vec();
        let mut x = Vec::new();
        let mut z = Vec::new();
        for (l, lay) in self.layout.iter().enumerate().take(n_layers) {
            let w = &self.params[lay.w..lay.b];
            self.layer_input(l, &h, input, &mut x);
            affine(w, &self.params[lay.b..lay.b + lay.n_out], &x, &mut z);
            let act = self.activation(l);
            let deriv: Vec<f64> = z.iter().map(|&v| act.derivative(v)).collect();
            for (t, d) in dh.iter_mut().enumerate() {
                let mut dx = std::mem::take(d);
                if self.config.skip == Some(l) {
                    dx.extend_from_slice(&tangents[t]);
                }
                *d = (0..lay.n_out)
                    .map(|o| {
                        let row = &w[o * lay.n_in..(o + 1) * lay.n_in];
                        deriv[o] * row.iter().zip(&dx).map(|(a, b)| a * b).sum::<f64>()
                    })
                    .collect();
            }
            h = z.iter().map(|&v| act.apply(v)).collect();
        }
        (h, dh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_net(cfg: MlpConfig, seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::new(cfg, &mut rng).unwrap();
        for p in net.params_mut() {
            *p += rng.gen_range(-0.1..0.1);
        }
        net
    }

    #[test]
    fn parameter_count_formula() {
        let mut cfg = MlpConfig::new(5, &[7, 4], 2);
        assert_eq!(cfg.parameter_count(), 6 * 7 + 8 * 4 + 5 * 2);
        cfg.skip = Some(1);
        assert_eq!(cfg.parameter_count(), 6 * 7 + 13 * 4 + 5 * 2);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut cfg = MlpConfig::new(3, &[4], 2);
        cfg.activation = Activation::None;
        let net = Mlp::zeros(cfg).unwrap();
        assert_eq!(net.forward(&[1.0, 2.0], &[3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer() {
        let mut net = Mlp::zeros(MlpConfig::new(3, &[], 3)).unwrap();
        let w = net.layer_weights_mut(0);
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        assert_eq!(net.forward(&[0.5, -2.0, 3.0], &[]).unwrap(), vec![0.5, -2.0, 3.0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let net = Mlp::zeros(MlpConfig::new(3, &[4], 1)).unwrap();
        assert!(matches!(net.forward(&[1.0], &[1.0]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn linear_backward_is_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(MlpConfig::new(4, &[], 3), &mut rng).unwrap();
        let tape = net.forward_tape(&[0.1, 0.2, 0.3, 0.4], &[]).unwrap();
        let g = [1.0, -2.0, 0.5];
        let d = net.backward(&tape, &g, None, None).unwrap();
        let w = net.layer_weights(0);
        for i in 0..4 {
            let want: f64 = (0..3).map(|o| w[o * 4 + i] * g[o]).sum();
            assert!((d[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_head_has_zero_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Mlp::new(MlpConfig::new(3, &[8], 1), &mut rng).unwrap();
        net.layer_weights_mut(1).iter_mut().for_each(|w| *w = 0.0);
        let tape = net.forward_tape(&[0.3, 0.1, -0.2], &[]).unwrap();
        let d = net.backward(&tape, &[1.0], None, None).unwrap();
        assert!(d.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Mlp::new(MlpConfig::new(2, &[3], 1), &mut rng).unwrap();
        let tape = net.forward_tape(&[0.1, 0.2], &[]).unwrap();
        net.params_mut()[0] += 1.0;
        assert!(matches!(net.backward(&tape, &[1.0], None, None), Err(Error::ContractViolation(_))));
        let other = net.clone();
        let tape = other.forward_tape(&[0.1, 0.2], &[]).unwrap();
        assert!(net.backward(&tape, &[1.0], None, None).is_err());
    }

    fn check_gradients(net: &Mlp, input: &[f64], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_out: Vec<f64> = (0..net.output_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let hidden = *net.config().hidden.last().unwrap();
        let d_hidden: Vec<f64> = (0..hidden).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |n: &Mlp, x: &[f64]| -> f64 {
            let tape = n.record(x);
            let o: f64 = tape.output().iter().zip(&d_out).map(|(a, b)| a * b).sum();
            o + tape.penultimate().iter().zip(&d_hidden).map(|(a, b)| a * b).sum::<f64>()
        };
        let tape = net.record(input);
        let mut grad = vec![0.0; net.parameter_count()];
        let d_in = net.backward(&tape, &d_out, Some(&d_hidden), Some(&mut grad)).unwrap();
        let h = 1e-4;
        for i in 0..input.len() {
            let mut a = input.to_vec();
            let mut b = input.to_vec();
            a[i] += h;
            b[i] -= h;
            let fd = (objective(net, &a) - objective(net, &b)) / (2.0 * h);
            assert!((fd - d_in[i]).abs() <= 1e-4 * fd.abs().max(1e-2), "input {i}: {fd} vs {}", d_in[i]);
        }
        for k in (0..net.parameter_count()).step_by(7) {
            let mut a = net.clone();
            a.params_mut()[k] += h;
            let mut b = net.clone();
            b.params_mut()[k] -= h;
            let fd = (objective(&a, input) - objective(&b, input)) / (2.0 * h);
            assert!((fd - grad[k]).abs() <= 1e-4 * fd.abs().max(1e-2), "param {k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut cfg = MlpConfig::new(6, &[16, 16, 8], 3);
        cfg.activation = Activation::Softplus { beta: 10.0 };
        check_gradients(&random_net(cfg.clone(), 1), &[0.1, -0.3, 0.2, 0.5, -0.1, 0.7], 1);
        cfg.skip = Some(2);
        check_gradients(&random_net(cfg.clone(), 2), &[0.1, -0.3, 0.2, 0.5, -0.1, 0.7], 2);
        cfg.activation = Activation::Sine { w0: 3.0 };
        check_gradients(&random_net(cfg, 3), &[0.1, -0.3, 0.2, 0.5, -0.1, 0.7], 3);
    }

    #[test]
    fn jvp_matches_backward() {
        let mut cfg = MlpConfig::new(5, &[12, 12], 4);
        cfg.skip = Some(1);
        let net = random_net(cfg, 9);
        let input = [0.2, 0.1, -0.4, 0.3, 0.9];
        let tangents: Vec<Vec<f64>> = (0..3)
            .map(|i| {
                let mut t = vec![0.0; 5];
                t[i] = 1.0;
                t
            })
            .collect();
        let (out, dout) = net.jvp(&input, &tangents);
        assert_eq!(out, net.eval(&input));
        let tape = net.record(&input);
        for o in 0..4 {
            let mut e = vec![0.0; 4];
            e[o] = 1.0;
            let row = net.backward(&tape, &e, None, None).unwrap();
            for (i, d) in dout.iter().enumerate() {
                assert!((d[o] - row[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eval_matches_record_and_is_deterministic() {
        let mut cfg = MlpConfig::new(4, &[9, 9], 2);
        cfg.skip = Some(1);
        let net = random_net(cfg, 11);
        let x = [0.3, -0.2, 0.8, 0.0];
        assert_eq!(net.eval(&x), net.record(&x).output());
        assert_eq!(net.eval(&x), net.eval(&x));
        assert_eq!(net.eval_hidden(&x), net.record(&x).penultimate());
        let t = vec![vec![1.0, 0.0, 0.0, 0.0]];
        let (h, dh) = net.jvp_hidden(&x, &t);
        assert_eq!(h, net.eval_hidden(&x));
        assert_eq!(dh[0].len(), 9);
    }

    #[test]
    fn serde_roundtrip_keeps_parameters() {
        let net = random_net(MlpConfig::new(3, &[5], 2), 12);
        let s = serde_json::to_string(&net).unwrap();
        let mut back: Mlp = serde_json::from_str(&s).unwrap();
        back.rebuild().unwrap();
        assert_eq!(back, net);
        assert_eq!(back.eval(&[0.1, 0.2, 0.3]), net.eval(&[0.1, 0.2, 0.3]));
    }
}
