//! Latent-to-input generator used for data recovery.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, BnMode, Layer, Network, Tensor, Trace};
use crate::zo_grad::JacobianProducts;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorMode {
    /// Upsampling conv decoder for `[nc, s, s]` images.
    Conv,
    /// Three-layer perceptron for vector-valued inputs.
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub out_shape: Vec<usize>,
    pub nf: usize,
    pub mode: GeneratorMode,
}

impl GeneratorConfig {
    pub fn network(&self) -> Result<Network> {
        if self.latent_dim == 0 || self.nf == 0 || self.out_shape.is_empty() || self.out_shape.contains(&0) {
            return Err(Error::Config(format!("degenerate generator config {self:?}")));
        }
        let lrelu = Layer::LeakyRelu { slope: 0.2 };
        let layers = match self.mode {
            GeneratorMode::Conv => {
                let [nc, h, w] = self.out_shape[..] else {
                    return Err(Error::Config(format!("conv generator needs [nc, s, s], got {:?}", self.out_shape)));
                };
                if h != w || h % 4 != 0 {
                    return Err(Error::Config(format!("image size {h}x{w} must be square and divisible by 4")));
                }
                let (s0, nf) = (h / 4, self.nf);
                let conv = |i, o| Layer::Conv2d { in_channels: i, out_channels: o, kernel: 3, stride: 1, padding: 1 };
                vec![
                    Layer::Linear { inputs: self.latent_dim, outputs: 2 * nf * s0 * s0 },
                    Layer::Reshape { shape: vec![2 * nf, s0, s0] },
                    Layer::BatchNorm { channels: 2 * nf },
                    Layer::Upsample2,
                    conv(2 * nf, 2 * nf),
                    Layer::BatchNorm { channels: 2 * nf },
                    lrelu.clone(),
                    Layer::Upsample2,
                    conv(2 * nf, nf),
                    Layer::BatchNorm { channels: nf },
                    lrelu,
                    conv(nf, nc),
                    Layer::Sigmoid,
                ]
            }
            GeneratorMode::Dense => {
                let d: usize = self.out_shape.iter().product();
                let mut l = vec![
                    Layer::Linear { inputs: self.latent_dim, outputs: self.nf },
                    Layer::BatchNorm { channels: self.nf },
                    lrelu.clone(),
                    Layer::Linear { inputs: self.nf, outputs: self.nf },
                    Layer::BatchNorm { channels: self.nf },
                    lrelu,
                    Layer::Linear { inputs: self.nf, outputs: d },
                    Layer::Sigmoid,
                ];
                if self.out_shape.len() > 1 {
                    l.push(Layer::Reshape { shape: self.out_shape.clone() });
                }
                l
            }
        };
        Network::new(layers, vec![self.latent_dim])
    }
}

/// Latent codes and the target label position of each row.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    pub z: Tensor,
    pub labels: Vec<usize>,
}

impl LatentBatch {
    /// Standard-normal codes for the given labels.
    pub fn sample(latent_dim: usize, labels: Vec<usize>, rng: &mut impl Rng) -> Self {
        let data = (0..labels.len() * latent_dim).map(|_| rng.sample(StandardNormal)).collect();
        Self { z: Tensor { shape: vec![labels.len(), latent_dim], data }, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `batch` labels cycling through `0..ways`.
pub fn balanced_labels(batch: usize, ways: usize) -> Vec<usize> {
    (0..batch).map(|i| i % ways.max(1)).collect()
}

#[derive(Clone, Debug)]
pub struct GeneratorState {
    pub cfg: GeneratorConfig,
    net: Network,
    pub theta: Vec<f64>,
    opt_theta: Adam,
    opt_z: Option<Adam>,
}

/// One forward pass, kept for Jacobian products.
pub struct GeneratorPass<'a> {
    state: &'a GeneratorState,
    trace: Trace<f64>,
}

impl GeneratorPass<'_> {
    pub fn inputs(&self) -> &Tensor {
        self.trace.output()
    }
}

impl JacobianProducts for GeneratorPass<'_> {
    fn output_shape(&self) -> &[usize] {
        &self.trace.output().shape
    }

    fn vjp(&self, v: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        if v.shape != self.trace.output().shape {
            return Err(Error::Input(format!("cotangent {:?} vs output {:?}", v.shape, self.trace.output().shape)));
        }
        let g = self.state.net.backward(&self.state.theta, &self.trace, v.clone(), true);
        Ok((g.params, g.input.expect("latent gradient requested")))
    }
}

pub fn init_generator(cfg: &GeneratorConfig, seed: u64) -> Result<GeneratorState> {
    let net = cfg.network()?;
    let theta = net.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
    let opt_theta = Adam::new(theta.len());
    Ok(GeneratorState { cfg: cfg.clone(), net, theta, opt_theta, opt_z: None })
}

impl GeneratorState {
    pub fn network(&self) -> &Network {
        &self.net
    }

    /// Generates a batch with per-batch normalization statistics.
    pub fn forward(&self, z: &LatentBatch) -> Result<GeneratorPass<'_>> {
        if z.z.shape != [z.labels.len(), self.cfg.latent_dim] {
            return Err(Error::Input(format!(
                "latent batch {:?} with {} labels does not match latent dim {}",
                z.z.shape,
                z.labels.len(),
                self.cfg.latent_dim
            )));
        }
        let trace = self.net.forward(&self.theta, &[], &z.z, BnMode::Batch)?;
        Ok(GeneratorPass { state: self, trace })
    }

    /// One adaptive-moment step on both the generator weights and the latent codes.
    pub fn apply_estimated_grads(&mut self, z: &mut LatentBatch, grads: (&[f64], &Tensor), lr: f64) -> Result<()> {
        let (g_theta, g_z) = grads;
        if g_theta.len() != self.theta.len() || g_z.shape != z.z.shape {
            return Err(Error::Input("generator gradients do not match state".into()));
        }
        if let Some(i) = g_theta.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("generator gradient entry {i} is {}", g_theta[i])));
        }
        if !g_z.is_finite() {
            return Err(Error::NonFinite("latent gradient is not finite".into()));
        }
        let opt_z = self.opt_z.get_or_insert_with(|| Adam::new(z.z.data.len()));
        self.opt_theta.step(&mut self.theta, g_theta, lr)?;
        opt_z.step(&mut z.z.data, &g_z.data, lr)?;
        Ok(())
    }
}
