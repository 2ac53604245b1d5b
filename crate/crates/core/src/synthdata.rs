//! Synthetic multi-domain identity benchmark.
//!
//! Each identity is a latent vector expanded into a small multi-channel image
//! through a fixed bank of smooth spatial fields. Views shift the layout
//! geometrically. A domain applies its own channel-wise gain and bias (its
//! "style"), per-image illumination jitter around that style, a background
//! texture and pixel noise. Target domains get styles pushed outside the
//! bounding box of the source styles by a tunable gap.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose, Stream};
use crate::tensor::{io, Tensor};

/// Channel-wise affine style plus nuisance levels for one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Style {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    /// Amplitude of the per-image background texture.
    pub texture_scale: f64,
    /// Std of per-pixel Gaussian noise.
    pub noise_std: f64,
    /// Std of per-image log-gain and bias offsets around `gain`/`bias`.
    pub jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub n_identities: usize,
    pub style: Style,
    pub views_per_identity: usize,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities < 2 {
            return Err(Error::Contract("a domain needs at least 2 identities".into()));
        }
        if self.views_per_identity < 2 {
            return Err(Error::Contract("a domain needs at least 2 views per identity".into()));
        }
        if self.style.gain.iter().any(|&g| !(g > 0.0)) {
            return Err(Error::Contract("style gains must be positive".into()));
        }
        if self.style.noise_std < 0.0 || self.style.texture_scale < 0.0 || self.style.jitter < 0.0 {
            return Err(Error::Contract("noise, texture and jitter levels must be >= 0".into()));
        }
        Ok(())
    }
}

/// Knobs shared by every generated domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataTemplate {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Each latent coordinate weights one smooth spatial field.
    pub latent_dim: usize,
    pub n_identities: usize,
    /// Held-out identities rendered in each source style, for source-side scores.
    pub source_test_identities: usize,
    pub target_identities: usize,
    pub views_per_identity: usize,
    /// Std of source log-gains around 1.
    pub source_gain_spread: f64,
    /// Half-range of source biases around 0.
    pub source_bias_spread: f64,
    pub texture_scale: f64,
    pub noise_std: f64,
    pub source_jitter: f64,
    /// Distance, in log-gain and bias units, by which target styles leave
    /// the bounding box of the source styles.
    pub target_gap: f64,
    /// Per-image jitter of the target domains.
    pub target_jitter: f64,
    /// Explicit target styles, bypassing `target_gap`.
    pub target_styles: Option<Vec<Style>>,
    /// Seed of the pattern bank; identical banks make domains comparable.
    pub pattern_seed: u64,
}

impl Default for DataTemplate {
    fn default() -> Self {
        DataTemplate {
            channels: 3,
            height: 16,
            width: 8,
            latent_dim: 12,
            n_identities: 20,
            source_test_identities: 40,
            target_identities: 60,
            views_per_identity: 4,
            source_gain_spread: 1.0,
            source_bias_spread: 2.0,
            texture_scale: 0.2,
            noise_std: 0.05,
            source_jitter: 0.2,
            target_gap: 1.0,
            target_jitter: 0.35,
            target_styles: None,
            pattern_seed: 0,
        }
    }
}

impl DataTemplate {
    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// Fixed expansion of latents into spatial layouts.
#[derive(Clone, Debug)]
pub struct PatternBank {
    shape: [usize; 3],
    /// `[latent_dim][C * H * W]` smooth fields.
    fields: Vec<Vec<f64>>,
}

impl PatternBank {
    pub fn new(template: &DataTemplate) -> Self {
        let [c, h, w] = template.image_shape();
        let mut s = rng::stream(template.pattern_seed, Purpose::Pattern, 0, 0, 0);
        let fields = (0..template.latent_dim)
            .map(|_| {
                let mut f = smooth_field(&mut s, c, h, w);
                // identity lives in the layout; channel means are left to the style
                for plane in f.chunks_mut(h * w) {
                    let m = plane.iter().sum::<f64>() / plane.len() as f64;
                    plane.iter_mut().for_each(|v| *v -= m);
                }
                f
            })
            .collect();
        PatternBank {
            shape: [c, h, w],
            fields,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.fields.len()
    }

    /// Latent-weighted sum of fields at unit per-channel spread, rolled by the
    /// view's geometric shift.
    pub fn pattern(&self, latent: &[f64], view: usize) -> Result<Vec<f64>> {
        if latent.len() != self.fields.len() {
            return Err(Error::Shape(format!(
                "latent has {} coordinates, pattern bank expects {}",
                latent.len(),
                self.fields.len()
            )));
        }
        let [c, h, w] = self.shape;
        let mut base = vec![0.0; c * h * w];
        for (z, field) in latent.iter().zip(&self.fields) {
            for (b, f) in base.iter_mut().zip(field) {
                *b += z * f;
            }
        }
        // unit spread per channel, so instance statistics carry no identity
        for plane in base.chunks_mut(h * w) {
            let var = plane.iter().map(|v| v * v).sum::<f64>() / plane.len() as f64;
            if var > 0.0 {
                let inv = var.sqrt().recip();
                plane.iter_mut().for_each(|v| *v *= inv);
            }
        }
        let (dy, dx) = view_shift(view, h, w);
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = (y + h - dy) % h;
                    let sx = (x + w - dx) % w;
                    out[(ch * h + y) * w + x] = base[(ch * h + sy) * w + sx];
                }
            }
        }
        Ok(out)
    }
}

/// Vertical/horizontal roll applied for a view id.
pub fn view_shift(view: usize, h: usize, w: usize) -> (usize, usize) {
    ((view * 2) % h, (view % 2) % w)
}

/// Sum of a few low-frequency cosines per channel, unit variance overall.
fn smooth_field(s: &mut Stream, c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for _ in 0..3 {
            let fy = s.gen_range(0.0..2.0) * std::f64::consts::PI / h as f64;
            let fx = s.gen_range(0.0..2.0) * std::f64::consts::PI / w as f64;
            let phase = s.gen_range(0.0..std::f64::consts::TAU);
            let amp: f64 = s.sample(StandardNormal);
            for y in 0..h {
                for x in 0..w {
                    out[(ch * h + y) * w + x] += amp * (fy * y as f64 + fx * x as f64 + phase).cos();
                }
            }
        }
    }
    let var = out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64;
    let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

/// `gain ⊙ (pattern + texture) + bias + noise`, with per-image jitter on
/// the gain and bias drawn from `stream`.
pub fn render_instance(
    bank: &PatternBank,
    latent: &[f64],
    view: usize,
    style: &Style,
    stream: &mut Stream,
) -> Result<Tensor> {
    let [c, h, w] = bank.shape;
    if style.gain.len() != c || style.bias.len() != c {
        return Err(Error::Shape(format!(
            "style has {} gains / {} biases for {c} channels",
            style.gain.len(),
            style.bias.len()
        )));
    }
    let pattern = bank.pattern(latent, view)?;
    let plane = h * w;
    // fixed draw order: jitter, texture, noise
    let gains: Vec<f64> = style
        .gain
        .iter()
        .map(|g| g * (style.jitter * stream.sample::<f64, _>(StandardNormal)).exp())
        .collect();
    let biases: Vec<f64> = style
        .bias
        .iter()
        .map(|b| b + style.jitter * stream.sample::<f64, _>(StandardNormal))
        .collect();
    let texture = smooth_field(stream, c, h, w);
    let mut out = Vec::with_capacity(c * plane);
    for ch in 0..c {
        for i in 0..plane {
            let p = pattern[ch * plane + i] + style.texture_scale * texture[ch * plane + i];
            let noise = style.noise_std * stream.sample::<f64, _>(StandardNormal);
            out.push(gains[ch] * p + biases[ch] + noise);
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Rendered images of one domain, laid out identity-major then view.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainData {
    pub spec: DomainSpec,
    pub latents: Vec<Vec<f64>>,
    /// `[N * V, C, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub views: Vec<usize>,
}

impl DomainData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn index(&self, identity: usize, view: usize) -> usize {
        identity * self.spec.views_per_identity + view
    }

    /// Query indices (view 0 of every identity) and gallery indices (the rest).
    pub fn query_gallery_split(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.len()).partition(|&i| self.views[i] == 0)
    }
}

/// A labeled single-domain block of images.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatch {
    /// `[B, C, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub domain: usize,
    pub views: Vec<usize>,
}

/// Draws `p` distinct identities with `kins` instances each.
///
/// Views are drawn without replacement when the identity has at least
/// `kins` of them and with replacement otherwise.
pub fn sample_batch(data: &DomainData, p: usize, kins: usize, stream: &mut Stream) -> Result<DomainBatch> {
    let n = data.spec.n_identities;
    if p > n {
        return Err(Error::Contract(format!("cannot draw {p} identities from a domain with {n}")));
    }
    if p == 0 || kins == 0 {
        return Err(Error::Contract("batch needs at least one identity and instance".into()));
    }
    let views = data.spec.views_per_identity;
    let ids: Vec<usize> = rand::seq::index::sample(stream, n, p).into_vec();
    let mut rows = Vec::with_capacity(p * kins);
    let mut labels = Vec::with_capacity(p * kins);
    let mut view_ids = Vec::with_capacity(p * kins);
    for id in ids {
        let chosen: Vec<usize> = if views >= kins {
            let mut all: Vec<usize> = (0..views).collect();
            all.shuffle(stream);
            all.truncate(kins);
            all
        } else {
            (0..kins).map(|_| stream.gen_range(0..views)).collect()
        };
        for v in chosen {
            rows.push(data.index(id, v));
            labels.push(id);
            view_ids.push(v);
        }
    }
    Ok(DomainBatch {
        images: data.images.select_rows(&rows)?,
        labels,
        domain: data.spec.domain_id,
        views: view_ids,
    })
}

/// Generated source and target domains.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub template: DataTemplate,
    pub seed: u64,
    pub sources: Vec<DomainData>,
    /// Unseen identities in the style of `sources[k]`.
    pub source_tests: Vec<DomainData>,
    pub targets: Vec<DomainData>,
}

/// Sidecar describing a dump.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub template: DataTemplate,
    pub seed: u64,
    pub sources: Vec<DomainSpec>,
    pub source_tests: Vec<DomainSpec>,
    pub targets: Vec<DomainSpec>,
}

fn source_styles(template: &DataTemplate, k: usize, seed: u64) -> Vec<Style> {
    let mut s = rng::stream(seed, Purpose::Style, 0, 0, 0);
    (0..k)
        .map(|_| Style {
            gain: (0..template.channels)
                .map(|_| (template.source_gain_spread * s.sample::<f64, _>(StandardNormal)).exp())
                .collect(),
            bias: (0..template.channels)
                .map(|_| s.gen_range(-1.0..=1.0) * template.source_bias_spread)
                .collect(),
            texture_scale: template.texture_scale,
            noise_std: template.noise_std,
            jitter: template.source_jitter,
        })
        .collect()
}

/// Styles that leave the per-channel bounding box of `sources` by `gap` in
/// log-gain and in bias, on a random side per channel.
pub fn target_styles(template: &DataTemplate, sources: &[Style], k: usize, seed: u64) -> Vec<Style> {
    let mut s = rng::stream(seed, Purpose::Style, 1, 0, 0);
    let c = template.channels;
    let side = |s: &mut Stream, vals: Vec<f64>| {
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if s.gen_bool(0.5) {
            hi + template.target_gap
        } else {
            lo - template.target_gap
        }
    };
    (0..k)
        .map(|_| Style {
            gain: (0..c)
                .map(|ch| side(&mut s, sources.iter().map(|st| st.gain[ch].ln()).collect()).exp())
                .collect(),
            bias: (0..c)
                .map(|ch| side(&mut s, sources.iter().map(|st| st.bias[ch]).collect()))
                .collect(),
            texture_scale: template.texture_scale,
            noise_std: template.noise_std,
            jitter: template.target_jitter,
        })
        .collect()
}

/// Mean over sources of the Euclidean distance between `(log gain, bias)`
/// style vectors.
pub fn style_distance(target: &Style, sources: &[Style]) -> f64 {
    let vec_of = |s: &Style| -> Vec<f64> { s.gain.iter().map(|g| g.ln()).chain(s.bias.iter().copied()).collect() };
    let t = vec_of(target);
    sources
        .iter()
        .map(|s| {
            vec_of(s)
                .iter()
                .zip(&t)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / sources.len() as f64
}

fn render_domain(bank: &PatternBank, spec: DomainSpec, latents: Vec<Vec<f64>>, seed: u64, role: u64) -> Result<DomainData> {
    spec.validate()?;
    let views = spec.views_per_identity;
    let mut images = Vec::with_capacity(spec.n_identities * views);
    let mut labels = Vec::new();
    let mut view_ids = Vec::new();
    for (id, latent) in latents.iter().enumerate() {
        for v in 0..views {
            let mut s = rng::stream(seed, Purpose::Render, role * 1_000 + spec.domain_id as u64, id as u64, v as u64);
            images.push(render_instance(bank, latent, v, &spec.style, &mut s)?);
            labels.push(id);
            view_ids.push(v);
        }
    }
    let shape = [vec![images.len()], images[0].shape().to_vec()].concat();
    let data = images.into_iter().flat_map(Tensor::into_data).collect();
    Ok(DomainData {
        spec,
        latents,
        images: Tensor::new(shape, data)?,
        labels,
        views: view_ids,
    })
}

fn draw_latents(seed: u64, role: u64, domain: usize, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut s = rng::stream(seed, Purpose::Latent, role, domain as u64, 0);
    (0..n)
        .map(|_| (0..dim).map(|_| s.sample(StandardNormal)).collect())
        .collect()
}

/// Generates `k_source` source domains and `k_target` target domains.
pub fn make_domains(k_source: usize, k_target: usize, template: &DataTemplate, seed: u64) -> Result<Benchmark> {
    if k_source < 2 {
        return Err(Error::Contract(format!("need at least 2 source domains, got {k_source}")));
    }
    let bank = PatternBank::new(template);
    let src_styles = source_styles(template, k_source, seed);
    let tgt_styles = match &template.target_styles {
        Some(styles) => {
            if styles.len() != k_target {
                return Err(Error::Contract(format!(
                    "{} explicit target styles for {k_target} target domains",
                    styles.len()
                )));
            }
            styles.clone()
        }
        None => target_styles(template, &src_styles, k_target, seed),
    };
    let build = |role: u64, k: usize, style: &Style, n: usize| -> Result<DomainData> {
        let spec = DomainSpec {
            domain_id: k,
            n_identities: n,
            style: style.clone(),
            views_per_identity: template.views_per_identity,
        };
        let latents = draw_latents(seed, role, k, n, template.latent_dim);
        render_domain(&bank, spec, latents, seed, role)
    };
    let sources = src_styles
        .iter()
        .enumerate()
        .map(|(k, st)| build(0, k, st, template.n_identities))
        .collect::<Result<Vec<_>>>()?;
    let source_tests = src_styles
        .iter()
        .enumerate()
        .map(|(k, st)| build(2, k, st, template.source_test_identities))
        .collect::<Result<Vec<_>>>()?;
    let targets = tgt_styles
        .iter()
        .enumerate()
        .map(|(k, st)| build(1, k, st, template.target_identities))
        .collect::<Result<Vec<_>>>()?;
    Ok(Benchmark {
        template: template.clone(),
        seed,
        sources,
        source_tests,
        targets,
    })
}

impl Benchmark {
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            template: self.template.clone(),
            seed: self.seed,
            sources: self.sources.iter().map(|d| d.spec.clone()).collect(),
            source_tests: self.source_tests.iter().map(|d| d.spec.clone()).collect(),
            targets: self.targets.iter().map(|d| d.spec.clone()).collect(),
        }
    }

    /// Writes `dataset.bin` (tensor format) and `dataset.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut records = Vec::new();
        for (role, domains) in [
            ("source", &self.sources),
            ("sourcetest", &self.source_tests),
            ("target", &self.targets),
        ] {
            for (k, d) in domains.iter().enumerate() {
                let p = format!("{role}{k}");
                records.push((format!("{p}.images"), d.images.clone()));
                records.push((format!("{p}.labels"), index_tensor(&d.labels)?));
                records.push((format!("{p}.views"), index_tensor(&d.views)?));
                let flat: Vec<f64> = d.latents.iter().flatten().copied().collect();
                records.push((
                    format!("{p}.latents"),
                    Tensor::new(vec![d.latents.len(), self.template.latent_dim], flat)?,
                ));
            }
        }
        io::save(&dir.join("dataset.bin"), &records)?;
        std::fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&self.manifest())?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("dataset.json"))?)?;
        let records = io::load(&dir.join("dataset.bin"))?;
        let load_role = |role: &str, specs: &[DomainSpec]| -> Result<Vec<DomainData>> {
            specs
                .iter()
                .enumerate()
                .map(|(k, spec)| {
                    let p = format!("{role}{k}");
                    let lat = io::find(&records, &format!("{p}.latents"))?;
                    let dim = lat.shape().get(1).copied().unwrap_or(0);
                    Ok(DomainData {
                        spec: spec.clone(),
                        latents: lat.data().chunks(dim.max(1)).map(<[f64]>::to_vec).collect(),
                        images: io::find(&records, &format!("{p}.images"))?.clone(),
                        labels: tensor_indices(io::find(&records, &format!("{p}.labels"))?)?,
                        views: tensor_indices(io::find(&records, &format!("{p}.views"))?)?,
                    })
                })
                .collect()
        };
        Ok(Benchmark {
            sources: load_role("source", &manifest.sources)?,
            source_tests: load_role("sourcetest", &manifest.source_tests)?,
            targets: load_role("target", &manifest.targets)?,
            template: manifest.template,
            seed: manifest.seed,
        })
    }

    pub fn source_styles(&self) -> Vec<Style> {
        self.sources.iter().map(|d| d.spec.style.clone()).collect()
    }
}

fn index_tensor(v: &[usize]) -> Result<Tensor> {
    Tensor::vector(v.iter().map(|&i| i as f64).collect())
}

fn tensor_indices(t: &Tensor) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Format(format!("index value {v} is not a non-negative integer")))
            }
        })
        .collect()
}
