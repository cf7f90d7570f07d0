//! Shared frame encoder `p` and per-domain decoders `q^S`, `q^T`.

use diffil_autodiff::{Conv2d, ConvTranspose2d, Graph, Linear, Module, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DomainTag, Frame, FrameSequence};
use crate::error::{Error, Result};

/// Geometry shared by the encoder and both decoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvArch {
    pub height: usize,
    pub width: usize,
    /// Encoder filter counts; layer `i` has stride 2 when `i` is odd, else 1.
    /// The decoders mirror them in reverse.
    pub filters: Vec<usize>,
    pub kernel: usize,
    pub feature_dim: usize,
    pub leaky_slope: f64,
}

impl ConvArch {
    fn stride(i: usize) -> usize {
        if i % 2 == 1 {
            2
        } else {
            1
        }
    }

    /// Total spatial downsampling factor of the encoder.
    pub fn downsample(&self) -> usize {
        (0..self.filters.len()).map(Self::stride).product()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.downsample();
        if self.filters.is_empty() || self.filters.contains(&0) {
            return Err(Error::Config("encoder needs at least one non-empty conv layer".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel)));
        }
        if !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be a positive multiple of the encoder downsampling {f}",
                self.height, self.width
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        Ok(())
    }

    fn bottleneck(&self) -> (usize, usize, usize) {
        let f = self.downsample();
        (self.height / f, self.width / f, *self.filters.last().expect("validated"))
    }
}

/// Convolutional encoder: LeakyReLU conv stack, flatten, linear head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub arch: ConvArch,
    pub convs: Vec<Conv2d>,
    pub head: Linear,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, arch: &ConvArch) -> Result<Self> {
        arch.validate()?;
        let mut c_in = 3;
        let mut convs = Vec::new();
        for (i, &c) in arch.filters.iter().enumerate() {
            convs.push(Conv2d::new(rng, c_in, c, arch.kernel, ConvArch::stride(i)));
            c_in = c;
        }
        let (h, w, c) = arch.bottleneck();
        let head = Linear::new(rng, h * w * c, arch.feature_dim);
        Ok(Self { arch: arch.clone(), convs, head })
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim
    }

    /// `[B, H, W, 3]` pixels in `[0, 1]` to `[B, F]` features.
    pub fn forward<'g>(&self, p: &[Var<'g>], x: Var<'g>) -> Var<'g> {
        let batch = x.shape()[0];
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&p[2 * i..2 * i + 2], h).leaky_relu(self.arch.leaky_slope);
        }
        let n = 2 * self.convs.len();
        let flat = h.reshape(&[batch, h.shape()[1..].iter().product()]);
        Linear::forward(&p[n..n + 2], flat)
    }

    /// Encode `[B * L, H, W, 3]` frames of `B` sequences into `[B, L * F]`.
    pub fn forward_sequence<'g>(&self, p: &[Var<'g>], x: Var<'g>, seq_len: usize) -> Var<'g> {
        let z = self.forward(p, x);
        let batch = z.shape()[0] / seq_len;
        z.reshape(&[batch, seq_len * self.arch.feature_dim])
    }

    fn check_frames(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.arch.height || s[2] != self.arch.width || s[3] != 3 {
            return Err(Error::Shape { expected: vec![0, self.arch.height, self.arch.width, 3], got: s.to_vec() });
        }
        Ok(())
    }

    /// Inference-only encoding of `[B, H, W, 3]` pixels.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_frames(x)?;
        let g = Graph::new();
        let p = self.bind(&g, false);
        Ok((*self.forward(&p, g.constant(x.clone())).value()).clone())
    }

    /// Inference-only encoding of `[B, L, H, W, 3]` sequences into `[B, L * F]`.
    pub fn encode_sequence(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 5 {
            return Err(Error::Shape { expected: vec![0, 0, self.arch.height, self.arch.width, 3], got: s.to_vec() });
        }
        let (b, l) = (s[0], s[1]);
        let frames = x.clone().reshape(&[b * l, s[2], s[3], s[4]]);
        Ok(self.encode(&frames)?.reshape(&[b, l * self.arch.feature_dim]))
    }

    /// Encode frames in chunks of `chunk` to bound memory; returns `[N, F]`.
    pub fn encode_frames(&self, frames: &[&Frame], chunk: usize) -> Result<Tensor> {
        let mut out = Vec::with_capacity(frames.len() * self.arch.feature_dim);
        for part in frames.chunks(chunk.max(1)) {
            out.extend(self.encode(&frames_tensor(part)?)?.into_data());
        }
        Ok(Tensor::new(&[frames.len(), self.arch.feature_dim], out))
    }
}

impl Module for Encoder {
    fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.convs.iter().flat_map(|c| c.params()).collect();
        out.extend(self.head.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.convs.iter_mut().flat_map(|c| c.params_mut()).collect();
        out.extend(self.head.params_mut());
        out
    }
}

/// Linear projection to the encoder's bottleneck grid, then a mirrored stack of
/// transposed convolutions ending in a linear 3-channel layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub arch: ConvArch,
    pub head: Linear,
    pub deconvs: Vec<ConvTranspose2d>,
    pub out: ConvTranspose2d,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, arch: &ConvArch) -> Result<Self> {
        arch.validate()?;
        let (h, w, c0) = arch.bottleneck();
        let head = Linear::new(rng, arch.feature_dim, h * w * c0);
        let mut c_in = c0;
        let mut deconvs = Vec::new();
        for (i, &c) in arch.filters.iter().rev().enumerate() {
            deconvs.push(ConvTranspose2d::new(rng, c_in, c, arch.kernel, ConvArch::stride(i)));
            c_in = c;
        }
        let out = ConvTranspose2d::new(rng, c_in, 3, arch.kernel, 1);
        Ok(Self { arch: arch.clone(), head, deconvs, out })
    }

    /// `[B, F]` features to `[B, H, W, 3]` unclamped images.
    pub fn forward<'g>(&self, p: &[Var<'g>], z: Var<'g>) -> Var<'g> {
        let (h, w, c) = self.arch.bottleneck();
        let batch = z.shape()[0];
        let slope = self.arch.leaky_slope;
        let mut x = Linear::forward(&p[0..2], z).leaky_relu(slope).reshape(&[batch, h, w, c]);
        for (i, d) in self.deconvs.iter().enumerate() {
            x = d.forward(&p[2 + 2 * i..4 + 2 * i], x).leaky_relu(slope);
        }
        let n = 2 + 2 * self.deconvs.len();
        self.out.forward(&p[n..n + 2], x)
    }

    /// Inference-only decoding of `[B, F]` features.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        if z.ndim() != 2 || z.shape()[1] != self.arch.feature_dim {
            return Err(Error::Shape { expected: vec![0, self.arch.feature_dim], got: z.shape().to_vec() });
        }
        let g = Graph::new();
        let p = self.bind(&g, false);
        Ok((*self.forward(&p, g.constant(z.clone())).value()).clone())
    }
}

impl Module for Decoder {
    fn params(&self) -> Vec<&Tensor> {
        let mut out = self.head.params();
        out.extend(self.deconvs.iter().flat_map(|d| d.params()));
        out.extend(self.out.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.head.params_mut();
        out.extend(self.deconvs.iter_mut().flat_map(|d| d.params_mut()));
        out.extend(self.out.params_mut());
        out
    }
}

/// The encoder and both domain decoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perception {
    pub encoder: Encoder,
    pub decoder_source: Decoder,
    pub decoder_target: Decoder,
}

impl Perception {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, arch: &ConvArch) -> Result<Self> {
        Ok(Self {
            encoder: Encoder::new(rng, arch)?,
            decoder_source: Decoder::new(rng, arch)?,
            decoder_target: Decoder::new(rng, arch)?,
        })
    }

    pub fn decoder(&self, domain: DomainTag) -> &Decoder {
        match domain {
            DomainTag::Source => &self.decoder_source,
            DomainTag::Target => &self.decoder_target,
        }
    }

    pub fn decode(&self, z: &Tensor, domain: DomainTag) -> Result<Tensor> {
        self.decoder(domain).decode(z)
    }
}

/// Stack frames into a `[B, H, W, 3]` tensor in `[0, 1]`.
pub fn frames_tensor(frames: &[&Frame]) -> Result<Tensor> {
    let first = frames.first().ok_or_else(|| Error::Invalid("empty frame batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(frames.len() * h * w * 3);
    for f in frames {
        if (f.height(), f.width()) != (h, w) {
            return Err(Error::Shape { expected: vec![h, w, 3], got: vec![f.height(), f.width(), 3] });
        }
        f.extend_unit(&mut data);
    }
    Ok(Tensor::new(&[frames.len(), h, w, 3], data))
}

/// Stack `B` sequences of length `L` into a `[B * L, H, W, 3]` tensor, sequence-major.
pub fn sequences_tensor(seqs: &[&FrameSequence]) -> Result<Tensor> {
    let frames: Vec<&Frame> = seqs.iter().flat_map(|s| s.frames().iter().map(|f| f.as_ref())).collect();
    if let Some(l) = seqs.first().map(|s| s.len()) {
        if seqs.iter().any(|s| s.len() != l) {
            return Err(Error::Invalid("sequences in a batch must share their length".into()));
        }
    }
    frames_tensor(&frames)
}

/// Reconstruction and feature-consistency losses, unweighted and combined.
#[derive(Clone, Copy, Debug)]
pub struct EncDecLossTerms<'g> {
    pub recon: Var<'g>,
    pub fcon: Var<'g>,
    pub total: Var<'g>,
}

/// Batch mean of the per-sample Euclidean norm of `a - b`.
pub fn mean_l2_distance<'g>(a: Var<'g>, b: Var<'g>) -> Var<'g> {
    let batch = a.shape()[0];
    let d = a.sub(b);
    let width = d.shape()[1..].iter().product();
    d.reshape(&[batch, width]).square().sum_to(&[batch, 1]).sqrt().mean()
}

/// Parameters of the encoder and both decoders bound into one graph.
pub struct BoundPerception<'g> {
    pub encoder: Vec<Var<'g>>,
    pub decoder_source: Vec<Var<'g>>,
    pub decoder_target: Vec<Var<'g>>,
}

impl<'g> BoundPerception<'g> {
    pub fn bind(p: &Perception, g: &'g Graph, trainable: bool) -> Self {
        Self {
            encoder: p.encoder.bind(g, trainable),
            decoder_source: p.decoder_source.bind(g, trainable),
            decoder_target: p.decoder_target.bind(g, trainable),
        }
    }

    fn decoder(&self, domain: DomainTag) -> &[Var<'g>] {
        match domain {
            DomainTag::Source => &self.decoder_source,
            DomainTag::Target => &self.decoder_target,
        }
    }

    pub fn all(&self) -> Vec<Var<'g>> {
        [&self.encoder, &self.decoder_source, &self.decoder_target].into_iter().flatten().copied().collect()
    }
}

/// Reconstruction plus cross-domain feature consistency, given the batches'
/// latents `z_s = p(o_s)` and `z_t = p(o_t)`:
///
/// `recon = Σ_d E‖o^d − q^d(z^d)‖` and `fcon = Σ_d E‖sg(z^d) − p(q^{d'}(z^d))‖`.
#[allow(clippy::too_many_arguments)]
pub fn enc_dec_loss_from_latents<'g>(
    model: &Perception,
    bound: &BoundPerception<'g>,
    obs_s: Var<'g>,
    z_s: Var<'g>,
    obs_t: Var<'g>,
    z_t: Var<'g>,
    lambda_recon: f64,
    lambda_fcon: f64,
) -> EncDecLossTerms<'g> {
    let mut recon = None;
    let mut fcon = None;
    for (domain, obs, z) in [(DomainTag::Source, obs_s, z_s), (DomainTag::Target, obs_t, z_t)] {
        let rec = model.decoder(domain).forward(bound.decoder(domain), z);
        let r = mean_l2_distance(obs, rec);
        let other = domain.opposite();
        let crossed = model.decoder(other).forward(bound.decoder(other), z);
        let z_hat = model.encoder.forward(&bound.encoder, crossed);
        let c = mean_l2_distance(z.detach(), z_hat);
        recon = Some(recon.map_or(r, |acc: Var<'g>| acc.add(r)));
        fcon = Some(fcon.map_or(c, |acc: Var<'g>| acc.add(c)));
    }
    let (recon, fcon) = (recon.expect("two domains"), fcon.expect("two domains"));
    let total = recon.scale(lambda_recon).add(fcon.scale(lambda_fcon));
    EncDecLossTerms { recon, fcon, total }
}

/// [`enc_dec_loss_from_latents`] encoding the two pixel batches itself.
pub fn enc_dec_loss<'g>(
    model: &Perception,
    bound: &BoundPerception<'g>,
    obs_s: Var<'g>,
    obs_t: Var<'g>,
    lambda_recon: f64,
    lambda_fcon: f64,
) -> EncDecLossTerms<'g> {
    let z_s = model.encoder.forward(&bound.encoder, obs_s);
    let z_t = model.encoder.forward(&bound.encoder, obs_t);
    enc_dec_loss_from_latents(model, bound, obs_s, z_s, obs_t, z_t, lambda_recon, lambda_fcon)
}
