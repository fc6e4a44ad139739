//! The conditional noise predictor.
//!
//! A two-stage U-Net over `[B, 3, 32, 32]` inputs:
//!
//! ```text
//! x ─ enc1 (c, 32²) ─ pool ─ enc2 (2c, 16²) ─ pool ─ mid.conv1 (4c, 8²) ─ FiLM(text, time) ─ mid.conv2
//!        │                      │                                                              │
//!        │                      └─────────────── concat ── dec2 (2c, 16²) ◄── up ◄── mid.proj ─┘
//!        └──────────── concat ── dec1 (c, 32²) ◄── up ◄── dec2.proj
//!                                   └── out (3, 32²)
//! ```
//!
//! Every level adds a per-channel projection of the time embedding. Text
//! enters only through the bottleneck FiLM. Parameter names encode the
//! pathway: `text.*` is the text encoder, `mid.film.*` the FiLM projections,
//! [`ADAPTER_PREFIXES`] lists both.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::text::{Conditioning, TEXT_INPUT_DIM};
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, ParamStore, Tensor};
use crate::rng::derive_rng;
use crate::scenegen::{CHANNELS, IMAGE_SIZE};

/// Parameter-name prefixes of the conditioning pathway.
pub const ADAPTER_PREFIXES: [&str; 2] = ["text.", "mid.film."];

pub fn in_adapter_scope(name: &str) -> bool {
    ADAPTER_PREFIXES.iter().any(|p| name.starts_with(p))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Channels at full resolution; doubled per downsampling stage.
    pub base_channels: usize,
    /// Width of the sinusoidal timestep features.
    pub time_features: usize,
    /// Width of the time and text embeddings.
    pub embed_dim: usize,
    pub groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            base_channels: 8,
            time_features: 32,
            embed_dim: 64,
            groups: 4,
        }
    }
}

impl DenoiserConfig {
    fn validate(&self) -> Result<()> {
        let c = self.base_channels;
        if c == 0 || c % self.groups != 0 || self.groups == 0 {
            return Err(Error::invalid("base_channels must be a positive multiple of groups"));
        }
        if self.time_features == 0 || self.time_features % 2 != 0 || self.embed_dim == 0 {
            return Err(Error::invalid("time_features must be even and embed_dim positive"));
        }
        Ok(())
    }

    /// Parameter names and shapes, with the fan-in used for initialization.
    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.base_channels;
        let e = self.embed_dim;
        let mut v: Vec<(String, Vec<usize>)> = Vec::new();
        let mut linear = |name: &str, i: usize, o: usize| {
            v.push((format!("{name}.w"), vec![i, o]));
            v.push((format!("{name}.b"), vec![o]));
        };
        linear("time.fc1", self.time_features, e);
        linear("time.fc2", e, e);
        linear("text.fc1", TEXT_INPUT_DIM, e);
        linear("text.fc2", e, e);
        linear("enc1.time", e, c);
        linear("enc2.time", e, 2 * c);
        linear("mid.time", e, 4 * c);
        linear("dec2.time", e, 2 * c);
        linear("dec1.time", e, c);
        for film in ["mid.film.in", "mid.film.out"] {
            linear(&format!("{film}.scale"), 2 * e, 4 * c);
            linear(&format!("{film}.shift"), 2 * e, 4 * c);
        }
        let mut conv = |name: &str, i: usize, o: usize, k: usize| {
            v.push((format!("{name}.w"), vec![o, i, k, k]));
            v.push((format!("{name}.b"), vec![o]));
        };
        conv("enc1", CHANNELS, c, 3);
        conv("enc2", c, 2 * c, 3);
        conv("mid.conv1", 2 * c, 4 * c, 3);
        conv("mid.conv2", 4 * c, 4 * c, 3);
        conv("mid.proj", 4 * c, 2 * c, 1);
        conv("dec2", 4 * c, 2 * c, 3);
        conv("dec2.proj", 2 * c, c, 1);
        conv("dec1", 2 * c, c, 3);
        conv("out", c, CHANNELS, 3);
        v
    }
}

/// Fresh parameters: biases zero, weights `N(0, 1/fan_in)`; the output conv
/// and the FiLM projections start ten times smaller so the untrained model
/// predicts roughly zero noise and ignores text.
pub fn init_params(config: &DenoiserConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut params = ParamStore::new();
    for (i, (name, shape)) in config.param_shapes().into_iter().enumerate() {
        let t = if name.ends_with(".b") {
            Tensor::zeros(&shape)
        } else {
            let fan_in: usize = if shape.len() == 2 { shape[0] } else { shape[1..].iter().product() };
            let damp = if name.starts_with("out.") || name.starts_with("mid.film.") { 0.1 } else { 1.0 };
            let mut rng = derive_rng(seed, &name, i as u64);
            Tensor::randn(&shape, damp / (fan_in as f64).sqrt(), &mut rng)
        };
        params.insert(name, t);
    }
    Ok(params)
}

fn time_features(t: usize, dim: usize) -> impl Iterator<Item = f64> {
    let half = dim / 2;
    (0..half).flat_map(move |i| {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        [a.sin(), a.cos()]
    })
}

fn level(g: &mut Graph, x: NodeId, name: &str, temb: NodeId, groups: usize) -> NodeId {
    let h = g.conv(x, name);
    let tb = g.linear(temb, &format!("{name}.time"));
    let h = g.channel_add(h, tb);
    let h = g.group_norm(h, groups);
    g.silu(h)
}

/// `h * (1 + scale(cond)) + shift(cond)`, per channel.
fn film(g: &mut Graph, h: NodeId, cond: NodeId, name: &str) -> NodeId {
    let scale = g.linear(cond, &format!("{name}.scale"));
    let scale = g.add_scalar(scale, 1.0);
    let shift = g.linear(cond, &format!("{name}.shift"));
    let h = g.channel_mul(h, scale);
    g.channel_add(h, shift)
}

/// Graph with inputs `x` `[B,3,32,32]`, `time` `[B, time_features]`, `text`
/// `[B, TEXT_INPUT_DIM]` and `target` `[B,3,32,32]`; outputs `eps` (the
/// prediction), `err` (`[B]` mean squared error per example) and `loss`
/// (mean of `err`).
pub fn build_graph(config: &DenoiserConfig) -> Graph {
    let groups = config.groups;
    let mut g = Graph::new();
    let x = g.input("x");
    let tf = g.input("time");
    let tx = g.input("text");
    let target = g.input("target");

    let temb = g.linear(tf, "time.fc1");
    let temb = g.silu(temb);
    let temb = g.linear(temb, "time.fc2");
    let temb = g.silu(temb);

    let txt = g.linear(tx, "text.fc1");
    let txt = g.silu(txt);
    let txt = g.linear(txt, "text.fc2");
    let txt = g.silu(txt);

    let e1 = level(&mut g, x, "enc1", temb, groups);
    let p1 = g.avg_pool2(e1);
    let e2 = level(&mut g, p1, "enc2", temb, groups);
    let p2 = g.avg_pool2(e2);

    let m = g.conv(p2, "mid.conv1");
    let mt = g.linear(temb, "mid.time");
    let m = g.channel_add(m, mt);
    let m = g.group_norm(m, groups);
    let cond = g.concat(&[txt, temb]);
    let m = film(&mut g, m, cond, "mid.film.in");
    let m = g.silu(m);
    let m2 = g.conv(m, "mid.conv2");
    let m2 = g.group_norm(m2, groups);
    let m2 = film(&mut g, m2, cond, "mid.film.out");
    let m2 = g.silu(m2);
    let m = g.add(m, m2);

    let u = g.conv(m, "mid.proj");
    let u = g.upsample2(u);
    let u = g.concat(&[u, e2]);
    let d2 = level(&mut g, u, "dec2", temb, groups);
    let u = g.conv(d2, "dec2.proj");
    let u = g.upsample2(u);
    let u = g.concat(&[u, e1]);
    let d1 = level(&mut g, u, "dec1", temb, groups);
    let eps = g.conv(d1, "out");

    let diff = g.sub(eps, target);
    let err = g.row_mean_squares(diff);
    let loss = g.mean(err);
    g.output("eps", eps);
    g.output("err", err);
    g.output("loss", loss);
    g
}

/// Convert one `H x W x C` image buffer to `C x H x W`.
pub fn hwc_to_chw(src: &[f64], dst: &mut [f64]) {
    let hw = IMAGE_SIZE * IMAGE_SIZE;
    for p in 0..hw {
        for ch in 0..CHANNELS {
            dst[ch * hw + p] = src[p * CHANNELS + ch];
        }
    }
}

pub fn chw_to_hwc(src: &[f64], dst: &mut [f64]) {
    let hw = IMAGE_SIZE * IMAGE_SIZE;
    for p in 0..hw {
        for ch in 0..CHANNELS {
            dst[p * CHANNELS + ch] = src[ch * hw + p];
        }
    }
}

/// One example fed to the network: noised image and target noise in
/// `H x W x C` layout, timestep and condition.
pub struct Example<'a> {
    pub x_t: &'a [f64],
    pub target: &'a [f64],
    pub t: usize,
    pub cond: &'a Conditioning,
}

/// Batched graph inputs, in the order `x`, `time`, `text`, `target`.
pub struct Feeds {
    pub x: Tensor,
    pub time: Tensor,
    pub text: Tensor,
    pub target: Tensor,
}

impl Feeds {
    pub fn as_inputs(&self) -> [(&str, &Tensor); 4] {
        [
            ("x", &self.x),
            ("time", &self.time),
            ("text", &self.text),
            ("target", &self.target),
        ]
    }
}

/// The noise predictor: configuration, parameters and the compiled graph.
///
/// Forward passes only read the parameters, so one `Denoiser` may be shared
/// across threads for scoring; training mutates `params` between passes and
/// therefore needs `&mut`.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
    graph: Graph,
}

impl Denoiser {
    /// Wrap existing parameters after checking names and shapes.
    pub fn new(config: DenoiserConfig, params: ParamStore) -> Result<Denoiser> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} tensors, model expects {}",
                params.len(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::invalid(format!(
                        "parameter {name}: shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::invalid(format!("missing parameter {name}"))),
            }
        }
        let graph = build_graph(&config);
        Ok(Denoiser {
            config,
            params,
            graph,
        })
    }

    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Denoiser> {
        let params = init_params(&config, seed)?;
        Denoiser::new(config, params)
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn feeds(&self, batch: &[Example<'_>]) -> Feeds {
        let n = batch.len();
        let img = IMAGE_SIZE * IMAGE_SIZE * CHANNELS;
        let tf = self.config.time_features;
        let mut x = vec![0.0; n * img];
        let mut target = vec![0.0; n * img];
        let mut time = Vec::with_capacity(n * tf);
        let mut text = vec![0.0; n * TEXT_INPUT_DIM];
        for (i, ex) in batch.iter().enumerate() {
            hwc_to_chw(ex.x_t, &mut x[i * img..(i + 1) * img]);
            hwc_to_chw(ex.target, &mut target[i * img..(i + 1) * img]);
            time.extend(time_features(ex.t, tf));
            ex.cond
                .encode_into(&mut text[i * TEXT_INPUT_DIM..(i + 1) * TEXT_INPUT_DIM]);
        }
        let image_shape = vec![n, CHANNELS, IMAGE_SIZE, IMAGE_SIZE];
        Feeds {
            x: Tensor::new(image_shape.clone(), x).expect("shape"),
            time: Tensor::new(vec![n, tf], time).expect("shape"),
            text: Tensor::new(vec![n, TEXT_INPUT_DIM], text).expect("shape"),
            target: Tensor::new(image_shape, target).expect("shape"),
        }
    }

    /// Per-example mean squared error between prediction and target.
    pub fn errors(&self, batch: &[Example<'_>]) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let feeds = self.feeds(batch);
        let fwd = self.graph.forward(&self.params, &feeds.as_inputs())?;
        Ok(fwd.output("err").expect("err output").data().to_vec())
    }

    /// Predicted noise for one noised image (`H x W x C` in and out).
    pub fn denoise(&self, x_t: &[f64], t: usize, cond: &Conditioning) -> Result<Vec<f64>> {
        let zeros = vec![0.0; x_t.len()];
        let feeds = self.feeds(&[Example {
            x_t,
            target: &zeros,
            t,
            cond,
        }]);
        let fwd = self.graph.forward(&self.params, &feeds.as_inputs())?;
        let mut out = vec![0.0; x_t.len()];
        chw_to_hwc(fwd.output("eps").expect("eps output").data(), &mut out);
        Ok(out)
    }

    /// Sample a noise level and draw, for callers building random batches.
    pub fn random_draw<R: Rng>(rng: &mut R, steps: usize) -> (usize, Tensor) {
        let t = rng.random_range(0..steps);
        let eps = Tensor::randn(&[IMAGE_SIZE, IMAGE_SIZE, CHANNELS], 1.0, rng);
        (t, eps)
    }
}
