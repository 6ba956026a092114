//! Fully connected tanh network with hand-written backprop, and the
//! preconditioned denoiser built on it.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Denoise, PairedDistribution, Preconditioner};
use crate::error::{Error, Result};
use crate::rng::NoiseStream;
use crate::schedule::{Schedule, DEFAULT_T_MAX, DEFAULT_T_MIN};

const MAGIC: &[u8; 8] = b"SDBMLP01";

/// Multilayer perceptron: tanh on hidden layers, identity on the output.
///
/// Parameters live in one flat vector, layer by layer, each layer stored as
/// its row-major weight matrix (`out x in`) followed by its bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

impl Mlp {
    /// Weights drawn `N(0, 1/fan_in)`, biases zero.
    pub fn new(sizes: Vec<usize>, seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid("mlp needs at least two non-empty layers"));
        }
        let mut rng = NoiseStream::new(seed, 0);
        let mut params = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = (1.0 / fan_in as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| scale * rng.normal()));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self { sizes, params })
    }

    pub fn from_params(sizes: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        let expected: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if sizes.len() < 2 || params.len() != expected {
            return Err(Error::Format(format!(
                "expected {expected} parameters for sizes {sizes:?}, got {}",
                params.len()
            )));
        }
        Ok(Self { sizes, params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two layers")
    }

    /// Activations of every layer, input first.
    fn activations(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let n_layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(input.to_vec());
        let mut off = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + fan_in * fan_out];
            let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_in * fan_out + fan_out;
            let prev = &acts[l];
            let out: Vec<f64> = (0..fan_out)
                .map(|j| {
                    let row = &w[j * fan_in..(j + 1) * fan_in];
                    let z = b[j] + row.iter().zip(prev).map(|(a, x)| a * x).sum::<f64>();
                    if l + 1 < n_layers {
                        z.tanh()
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(out);
        }
        acts
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.activations(input).pop().expect("output layer")
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d output`.
    fn backward(&self, acts: &[Vec<f64>], grad_out: &[f64], grad: &mut [f64]) {
        let n_layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        // delta = d loss / d pre-activation of the current layer.
        let mut delta = grad_out.to_vec();
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let prev = &acts[l];
            for j in 0..fan_out {
                let row = &mut grad[off + j * fan_in..off + (j + 1) * fan_in];
                for (g, x) in row.iter_mut().zip(prev) {
                    *g += delta[j] * x;
                }
                grad[off + fan_in * fan_out + j] += delta[j];
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + fan_in * fan_out];
            let mut next = vec![0.0; fan_in];
            for j in 0..fan_out {
                let row = &w[j * fan_in..(j + 1) * fan_in];
                for (n, a) in next.iter_mut().zip(row) {
                    *n += a * delta[j];
                }
            }
            // prev holds tanh outputs of layer l - 1: d tanh = 1 - tanh^2.
            for (n, h) in next.iter_mut().zip(prev) {
                *n *= 1.0 - h * h;
            }
            delta = next;
        }
    }

    /// Mean squared loss `(1/B) sum_b ||F(input_b) - target_b||^2` and its gradient.
    pub fn loss_and_gradient(&self, batch: &[(Vec<f64>, Vec<f64>)]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for (input, target) in batch {
            let acts = self.activations(input);
            let out = acts.last().expect("output layer");
            let resid: Vec<f64> = out.iter().zip(target).map(|(o, y)| o - y).collect();
            loss += scale * resid.iter().map(|r| r * r).sum::<f64>();
            let grad_out: Vec<f64> = resid.iter().map(|r| 2.0 * scale * r).collect();
            self.backward(&acts, &grad_out, &mut grad);
        }
        (loss, grad)
    }

    pub fn loss(&self, batch: &[(Vec<f64>, Vec<f64>)]) -> f64 {
        let scale = 1.0 / batch.len() as f64;
        batch
            .iter()
            .map(|(input, target)| {
                let out = self.forward(input);
                scale
                    * out
                        .iter()
                        .zip(target)
                        .map(|(o, y)| (o - y).powi(2))
                        .sum::<f64>()
            })
            .sum()
    }
}

/// `D(x_t, x_cond, t) = c_skip x_t + c_out F(c_in x_t, x_cond, c_noise)`.
#[derive(Clone, Debug)]
pub struct MlpDenoiser {
    pub net: Mlp,
    pub preconditioner: Preconditioner,
    pub schedule: Schedule,
    pub t_min: f64,
    pub t_max: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpHeader {
    sizes: Vec<usize>,
    preconditioner: Preconditioner,
    schedule: Schedule,
    t_min: f64,
    t_max: f64,
}

impl MlpDenoiser {
    pub fn dim(&self) -> usize {
        self.net.output_dim()
    }

    /// Network input `[c_in x_t, x_cond, c_noise]`.
    pub fn network_input(&self, x_t: &[f64], x_cond: &[f64], c_in: f64, c_noise: f64) -> Vec<f64> {
        let mut input = Vec::with_capacity(2 * x_t.len() + 1);
        input.extend(x_t.iter().map(|x| c_in * x));
        input.extend_from_slice(x_cond);
        input.push(c_noise);
        input
    }

    /// Writes the magic, a length-prefixed JSON header and the parameters as
    /// little-endian doubles.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let header = MlpHeader {
            sizes: self.net.sizes.clone(),
            preconditioner: self.preconditioner,
            schedule: self.schedule.clone(),
            t_min: self.t_min,
            t_max: self.t_max,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for p in &self.net.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a serialized mlp denoiser".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: MlpHeader =
            serde_json::from_slice(&json).map_err(|e| Error::Format(e.to_string()))?;
        let n: usize = header.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let mut params = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            params.push(f64::from_le_bytes(buf));
        }
        if r.read(&mut buf)? != 0 {
            return Err(Error::Format("trailing bytes after mlp parameters".into()));
        }
        Ok(Self {
            net: Mlp::from_params(header.sizes, params)?,
            preconditioner: header.preconditioner,
            schedule: header.schedule,
            t_min: header.t_min,
            t_max: header.t_max,
        })
    }
}

impl Denoise for MlpDenoiser {
    fn dim(&self) -> usize {
        MlpDenoiser::dim(self)
    }

    fn denoise(&self, x_t: &[f64], x_cond: &[f64], t: f64) -> Result<Vec<f64>> {
        let d = self.dim();
        for v in [x_t, x_cond] {
            if v.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: v.len(),
                });
            }
        }
        let s = self.preconditioner.scalings(&self.schedule, t)?;
        let raw = self
            .net
            .forward(&self.network_input(x_t, x_cond, s.c_in, s.c_noise));
        Ok(s.output(x_t, &raw))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden_layers: usize,
    pub width: usize,
    pub lr: f64,
    pub batch: usize,
    pub iters: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_t_min")]
    pub t_min: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
}

fn default_t_min() -> f64 {
    DEFAULT_T_MIN
}

fn default_t_max() -> f64 {
    DEFAULT_T_MAX
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.width == 0 || self.batch == 0 {
            return Err(Error::invalid(
                "hidden_layers, width and batch must be positive",
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0 < self.t_min && self.t_min < self.t_max && self.t_max <= 1.0) {
            return Err(Error::invalid("need 0 < t_min < t_max <= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub denoiser: MlpDenoiser,
    /// Exponential moving average (factor 0.99) of the minibatch loss.
    pub final_loss: f64,
}

/// One minibatch of `(network input, regression target)` pairs.
fn draw_batch(
    den: &MlpDenoiser,
    data: &PairedDistribution,
    cfg: &TrainConfig,
    rng: &mut NoiseStream,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    (0..cfg.batch)
        .map(|_| {
            let (x0, xc) = data.sample(rng);
            let t = rng.uniform(cfg.t_min, cfg.t_max);
            let e = den.schedule.eval(t)?;
            let x_t: Vec<f64> = x0
                .iter()
                .zip(&xc)
                .map(|(a, b)| e.alpha * a + e.beta * b + e.gamma * rng.normal())
                .collect();
            let s = den.preconditioner.scalings(&den.schedule, t)?;
            Ok((
                den.network_input(&x_t, &xc, s.c_in, s.c_noise),
                s.target(&x_t, &x0),
            ))
        })
        .collect()
}

/// Plain SGD on the preconditioned loss `||F - (x0 - c_skip x_t) / c_out||^2`,
/// which equals the lambda-weighted denoising loss with `lambda = 1 / c_out^2`.
pub fn train_mlp_denoiser(
    data: &PairedDistribution,
    sched: &Schedule,
    prec: Preconditioner,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate()?;
    prec.validate()?;
    let d = data.dim();
    let mut sizes = vec![2 * d + 1];
    sizes.extend(std::iter::repeat_n(cfg.width, cfg.hidden_layers));
    sizes.push(d);
    let mut den = MlpDenoiser {
        net: Mlp::new(sizes, cfg.seed)?,
        preconditioner: prec,
        schedule: sched.clone(),
        t_min: cfg.t_min,
        t_max: cfg.t_max,
    };
    let mut rng = NoiseStream::new(cfg.seed, 1);
    let mut running = f64::NAN;
    for iter in 0..cfg.iters {
        let batch = draw_batch(&den, data, cfg, &mut rng)?;
        let (loss, grad) = den.net.loss_and_gradient(&batch);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { iter, loss });
        }
        for (p, g) in den.net.params.iter_mut().zip(&grad) {
            *p -= cfg.lr * g;
        }
        running = if running.is_nan() {
            loss
        } else {
            0.99 * running + 0.01 * loss
        };
        if iter % 1000 == 0 {
            log::debug!("iter {iter}: loss {loss:.6e}, running {running:.6e}");
        }
    }
    Ok(TrainOutcome {
        denoiser: den,
        final_loss: running,
    })
}
