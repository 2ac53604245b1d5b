//! Local perturbation of per-domain feature distributions.
//!
//! For a feature map `e: [B, C, H, W]` drawn from a single domain, the
//! per-instance channel moments `(mu, sigma)` are shifted by Gaussian noise
//! scaled with the batch-level spread of those moments, and the map is
//! re-assembled around the shifted moments:
//!
//! ```text
//! mu_hat    = mu    + eps_mu    * h(mu)
//! sigma_hat = sigma + eps_sigma * h(sigma)      (clamped at eps_num)
//! e_hat     = sigma_hat * (e - mu) / sigma + mu_hat
//! ```
//!
//! `h` is the per-channel population standard deviation over the batch and is
//! a constant for differentiation. Moments are kept as `[B, C, 1, 1]` so they
//! broadcast against the map.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::{Graph, Tensor, Var};

/// Numerical floor used inside the moment square root and for `sigma_hat`.
pub const EPS_NUM: f64 = 1e-5;

/// Instance moments of a feature map, each `[B, C, 1, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct MomentPair {
    pub mu: Var,
    /// `sqrt(variance + eps_num)`, hence `>= sqrt(eps_num)`.
    pub sigma: Var,
}

/// Perturbed moments together with the draws and scales that produced them.
#[derive(Clone, Debug)]
pub struct PerturbedMoments {
    pub mu_hat: Var,
    pub sigma_hat: Var,
    pub eps_mu: Tensor,
    pub eps_sigma: Tensor,
    /// `[1, C, 1, 1]`.
    pub h_mu: Tensor,
    pub h_sigma: Tensor,
}

/// Channel-wise mean and `sqrt(population variance + eps_num)` over `H x W`.
pub fn instance_moments(g: &mut Graph, e: Var, eps_num: f64) -> Result<MomentPair> {
    let s = g.shape(e);
    if s.len() != 4 {
        return Err(Error::Shape(format!("instance_moments expects a rank-4 map, got {s:?}")));
    }
    if s[2] * s[3] == 0 {
        return Err(Error::Shape("instance_moments over an empty spatial extent".into()));
    }
    let mu = g.mean_axes(e, &[2, 3])?;
    let var = g.variance_axes(e, &[2, 3])?;
    let floor = g.constant(Tensor::full(&[1], eps_num));
    let var = g.add(var, floor)?;
    let sigma = g.sqrt(var)?;
    Ok(MomentPair { mu, sigma })
}

/// Per-column population standard deviation across the leading (batch) axis.
///
/// The output keeps the batch axis with extent 1, so `[B, C, 1, 1]` maps to
/// `[1, C, 1, 1]` and `[B, C]` to `[1, C]`.
pub fn dispersion(moments: &Tensor) -> Result<Tensor> {
    let Some((&b, rest)) = moments.shape().split_first() else {
        return Err(Error::Shape("dispersion of a scalar".into()));
    };
    if b == 0 {
        return Err(Error::Shape("dispersion of an empty batch".into()));
    }
    let cols: usize = rest.iter().product();
    let xs = moments.data();
    let mut out = Vec::with_capacity(cols);
    for c in 0..cols {
        let mean = (0..b).map(|i| xs[i * cols + c]).sum::<f64>() / b as f64;
        let var = (0..b).map(|i| (xs[i * cols + c] - mean).powi(2)).sum::<f64>() / b as f64;
        out.push(var.sqrt());
    }
    let mut shape = moments.shape().to_vec();
    shape[0] = 1;
    Tensor::new(shape, out)
}

/// Standard-normal draws of the given shape.
pub fn draw_noise(stream: &mut rng::Stream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| stream.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Shifts `(mu, sigma)` by `eps * h`; `sigma_hat` is clamped at `eps_num`.
pub fn perturb_moments(
    g: &mut Graph,
    mp: &MomentPair,
    h_mu: Tensor,
    h_sigma: Tensor,
    eps_mu: Tensor,
    eps_sigma: Tensor,
    eps_num: f64,
) -> Result<PerturbedMoments> {
    let shape = g.shape(mp.mu).to_vec();
    if eps_mu.shape() != shape.as_slice() || eps_sigma.shape() != shape.as_slice() {
        return Err(Error::Shape(format!(
            "noise shapes {:?}/{:?} do not match moments {shape:?}",
            eps_mu.shape(),
            eps_sigma.shape()
        )));
    }
    let shift = |g: &mut Graph, base: Var, eps: &Tensor, h: &Tensor| -> Result<Var> {
        let e = g.constant(eps.clone());
        let h = g.constant(h.clone());
        let d = g.mul(e, h)?;
        g.add(base, d)
    };
    let mu_hat = shift(g, mp.mu, &eps_mu, &h_mu)?;
    let raw_sigma = shift(g, mp.sigma, &eps_sigma, &h_sigma)?;
    let sigma_hat = g.clamp_min(raw_sigma, eps_num)?;
    Ok(PerturbedMoments {
        mu_hat,
        sigma_hat,
        eps_mu,
        eps_sigma,
        h_mu,
        h_sigma,
    })
}

/// `sigma_hat * (e - mu) / sigma + mu_hat`.
pub fn reassemble(g: &mut Graph, e: Var, mp: &MomentPair, pm: &PerturbedMoments) -> Result<Var> {
    let centered = g.sub(e, mp.mu)?;
    let normalized = g.div(centered, mp.sigma)?;
    let scaled = g.mul(normalized, pm.sigma_hat)?;
    g.add(scaled, pm.mu_hat)
}

/// How noise draws are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    /// Keyed standard-normal draws.
    Gaussian,
    /// All draws are zero; the module reduces to an identity.
    Zero,
}

/// Whether `(eps, h)` are recomputed or pinned between calls.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Freeze {
    Off,
    /// Compute as usual and remember the constants per `(domain, stage)`.
    Record,
    /// Reuse remembered constants; `h` is not recomputed from the new input.
    Replay,
}

/// One perturbation event, for the placement study.
#[derive(Clone, Debug, PartialEq)]
pub struct LpmRecord {
    pub iteration: u64,
    pub domain: usize,
    pub stage: usize,
    /// Mean of `|mu_hat - mu|` over instances and channels.
    pub mean_shift_mu: f64,
    pub mean_shift_sigma: f64,
}

#[derive(Clone, Debug)]
struct Frozen {
    eps_mu: Tensor,
    eps_sigma: Tensor,
    h_mu: Tensor,
    h_sigma: Tensor,
}

/// Stateful entry point used by the backbone during training.
#[derive(Clone, Debug)]
pub struct Perturber {
    seed: u64,
    eps_num: f64,
    noise: NoiseMode,
    freeze: Freeze,
    frozen: HashMap<(usize, usize), Frozen>,
    records: Vec<LpmRecord>,
}

impl Perturber {
    pub fn new(seed: u64, eps_num: f64) -> Self {
        Perturber {
            seed,
            eps_num,
            noise: NoiseMode::Gaussian,
            freeze: Freeze::Off,
            frozen: HashMap::new(),
            records: Vec::new(),
        }
    }

    pub fn with_noise(mut self, noise: NoiseMode) -> Self {
        self.noise = noise;
        self
    }

    pub fn set_freeze(&mut self, freeze: Freeze) {
        self.freeze = freeze;
    }

    pub fn records(&self) -> &[LpmRecord] {
        &self.records
    }

    pub fn clear_records(&mut self) {
        self.records.clear();
    }

    /// Perturbs `e` if `enabled`, otherwise returns it untouched.
    ///
    /// `domains` tags each instance of the batch; all tags must agree.
    /// Noise for `(seed, iteration, domain, stage)` is always the same.
    pub fn apply(
        &mut self,
        g: &mut Graph,
        e: Var,
        domains: &[usize],
        stage: usize,
        iteration: u64,
        enabled: bool,
    ) -> Result<Var> {
        if !enabled {
            return Ok(e);
        }
        let b = g.shape(e).first().copied().unwrap_or(0);
        if domains.len() != b {
            return Err(Error::Contract(format!(
                "{} domain tags for a batch of {b}",
                domains.len()
            )));
        }
        let domain = domains[0];
        if domains.iter().any(|&d| d != domain) {
            return Err(Error::Contract(
                "perturbation requires a single-domain batch".into(),
            ));
        }
        let mp = instance_moments(g, e, self.eps_num)?;
        let key = (domain, stage);
        let consts = match (self.freeze, self.frozen.get(&key)) {
            (Freeze::Replay, Some(f)) => f.clone(),
            (Freeze::Replay, None) => {
                return Err(Error::Contract(format!(
                    "no recorded perturbation for domain {domain} stage {stage}"
                )))
            }
            _ => {
                let shape = g.shape(mp.mu).to_vec();
                let (eps_mu, eps_sigma) = match self.noise {
                    NoiseMode::Zero => (Tensor::zeros(&shape), Tensor::zeros(&shape)),
                    NoiseMode::Gaussian => {
                        let mut s = rng::stream(
                            self.seed,
                            Purpose::Perturbation,
                            iteration,
                            domain as u64,
                            stage as u64,
                        );
                        (draw_noise(&mut s, &shape), draw_noise(&mut s, &shape))
                    }
                };
                let f = Frozen {
                    eps_mu,
                    eps_sigma,
                    h_mu: dispersion(g.value(mp.mu))?,
                    h_sigma: dispersion(g.value(mp.sigma))?,
                };
                if self.freeze == Freeze::Record {
                    self.frozen.insert(key, f.clone());
                }
                f
            }
        };
        let pm = perturb_moments(
            g,
            &mp,
            consts.h_mu,
            consts.h_sigma,
            consts.eps_mu,
            consts.eps_sigma,
            self.eps_num,
        )?;
        self.records.push(LpmRecord {
            iteration,
            domain,
            stage,
            mean_shift_mu: mean_abs_diff(g.value(pm.mu_hat), g.value(mp.mu)),
            mean_shift_sigma: mean_abs_diff(g.value(pm.sigma_hat), g.value(mp.sigma)),
        });
        reassemble(g, e, &mp, &pm)
    }
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.len().max(1) as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n
}

/// CSV rendering of perturbation records.
pub fn records_csv(records: &[LpmRecord]) -> String {
    let mut out = String::from("iteration,domain,stage,mean_abs_dmu,mean_abs_dsigma\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{:.9},{:.9}",
            r.iteration, r.domain, r.stage, r.mean_shift_mu, r.mean_shift_sigma
        );
    }
    out
}
