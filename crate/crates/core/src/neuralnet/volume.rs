use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;

use super::mlp::{Activation, Mlp, MlpConfig, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVolumeConfig {
    pub latent_dim: usize,
    pub resolution: usize,
    pub channels: usize,
    /// Grid spans `[-extent, extent]^3`.
    pub extent: f64,
    pub hidden: usize,
}

impl Default for FeatureVolumeConfig {
    fn default() -> Self {
        FeatureVolumeConfig {
            latent_dim: 64,
            resolution: 8,
            channels: 32,
            extent: 0.7,
            hidden: 64,
        }
    }
}

/// Node-aligned feature grid with trilinear interpolation.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub resolution: usize,
    pub channels: usize,
    pub extent: f64,
    /// `((k * res + j) * res + i) * channels + c`
    pub values: Vec<f64>,
}

/// Trilinear stencil of one query point.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    pub nodes: [usize; 8],
    pub weights: [f64; 8],
    /// `d weight / d x` per corner.
    pub dweights: [[f64; 3]; 8],
}

impl FeatureGrid {
    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let s = 2.0 * self.extent / (self.resolution - 1) as f64;
        Vec3::new(i as f64 * s - self.extent, j as f64 * s - self.extent, k as f64 * s - self.extent)
    }

    pub fn stencil(&self, x: &Vec3) -> Stencil {
        let r = self.resolution;
        let scale = (r - 1) as f64 / (2.0 * self.extent);
        let mut idx = [0usize; 3];
        let mut t = [0.0; 3];
        let mut dt = [0.0; 3];
        for a in 0..3 {
            let u = (x[a] + self.extent) * scale;
            let (uc, d) = if u <= 0.0 {
                (0.0, 0.0)
            } else if u >= (r - 1) as f64 {
                ((r - 1) as f64, 0.0)
            } else {
                (u, scale)
            };
            let i = (uc.floor() as usize).min(r - 2);
            idx[a] = i;
            t[a] = uc - i as f64;
            dt[a] = d;
        }
        let mut st = Stencil {
            nodes: [0; 8],
            weights: [0.0; 8],
            dweights: [[0.0; 3]; 8],
        };
        for c in 0..8 {
            let o = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
            let f: [f64; 3] = std::array::from_fn(|a| if o[a] == 1 { t[a] } else { 1.0 - t[a] });
            let df: [f64; 3] = std::array::from_fn(|a| if o[a] == 1 { dt[a] } else { -dt[a] });
            st.nodes[c] = ((idx[2] + o[2]) * r + idx[1] + o[1]) * r + idx[0] + o[0];
            st.weights[c] = f[0] * f[1] * f[2];
            st.dweights[c] = [df[0] * f[1] * f[2], f[0] * df[1] * f[2], f[0] * f[1] * df[2]];
        }
        st
    }

    pub fn sample(&self, x: &Vec3) -> Vec<f64> {
        self.sample_stencil(&self.stencil(x))
    }

    pub fn sample_stencil(&self, st: &Stencil) -> Vec<f64> {
        let ch = self.channels;
        let mut out = vec![0.0; ch];
        for c in 0..8 {
            let w = st.weights[c];
            if w == 0.0 {
                continue;
            }
            let v = &self.values[st.nodes[c] * ch..(st.nodes[c] + 1) * ch];
            for (o, a) in out.iter_mut().zip(v) {
                *o += w * a;
            }
        }
        out
    }

    /// Gradient of `d_feat · sample(x)` with respect to `x`.
    pub fn grad_x(&self, st: &Stencil, d_feat: &[f64]) -> Vec3 {
        let ch = self.channels;
        let mut g = Vec3::zeros();
        for c in 0..8 {
            let v = &self.values[st.nodes[c] * ch..(st.nodes[c] + 1) * ch];
            let dot: f64 = v.iter().zip(d_feat).map(|(a, b)| a * b).sum();
            for a in 0..3 {
                g[a] += st.dweights[c][a] * dot;
            }
        }
        g
    }

    /// Columns `d sample / d x_a` for the three axes.
    pub fn jacobian(&self, st: &Stencil) -> [Vec<f64>; 3] {
        let ch = self.channels;
        let mut out = [vec![0.0; ch], vec![0.0; ch], vec![0.0; ch]];
        for c in 0..8 {
            let v = &self.values[st.nodes[c] * ch..(st.nodes[c] + 1) * ch];
            for a in 0..3 {
                let w = st.dweights[c][a];
                if w != 0.0 {
                    for (o, x) in out[a].iter_mut().zip(v) {
                        *o += w * x;
                    }
                }
            }
        }
        out
    }

    /// Accumulates `d_feat` into per-node value gradients.
    pub fn accumulate(&self, st: &Stencil, d_feat: &[f64], grad_values: &mut [f64]) {
        let ch = self.channels;
        for c in 0..8 {
            let w = st.weights[c];
            if w == 0.0 {
                continue;
            }
            let g = &mut grad_values[st.nodes[c] * ch..(st.nodes[c] + 1) * ch];
            for (o, d) in g.iter_mut().zip(d_feat) {
                *o += w * d;
            }
        }
    }
}

/// Latent-conditioned generator of a [`FeatureGrid`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVolume {
    pub config: FeatureVolumeConfig,
    pub generator: Mlp,
}

impl FeatureVolume {
    pub fn new<R: Rng>(config: FeatureVolumeConfig, rng: &mut R) -> Result<Self> {
        if config.resolution < 2 || config.extent <= 0.0 {
            return Err(Error::invalid("feature volume needs resolution ≥ 2 and positive extent"));
        }
        let out = config.resolution.pow(3) * config.channels;
        let mut cfg = MlpConfig::new(config.latent_dim, &[config.hidden], out);
        cfg.activation = Activation::Softplus { beta: 1.0 };
        let mut generator = Mlp::new(cfg, rng)?;
        // small initial features
        for w in generator.layer_weights_mut(1) {
            *w *= 0.1;
        }
        Ok(FeatureVolume { config, generator })
    }

    pub fn generate(&self, z: &[f64]) -> Result<FeatureGrid> {
        Ok(self.grid_from(self.generator.forward(z, &[])?))
    }

    pub fn generate_tape(&self, z: &[f64]) -> Result<(FeatureGrid, Tape)> {
        let tape = self.generator.forward_tape(z, &[])?;
        Ok((self.grid_from(tape.output().to_vec()), tape))
    }

    fn grid_from(&self, values: Vec<f64>) -> FeatureGrid {
        FeatureGrid {
            resolution: self.config.resolution,
            channels: self.config.channels,
            extent: self.config.extent,
            values,
        }
    }

    /// Backpropagates node-value gradients; returns the latent gradient.
    pub fn backward(&self, tape: &Tape, grad_values: &[f64], grad: Option<&mut [f64]>) -> Result<Vec<f64>> {
        self.generator.backward(tape, grad_values, None, grad)
    }
}
