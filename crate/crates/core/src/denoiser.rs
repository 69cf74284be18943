//! Noise predictor: a two-level convolutional encoder/decoder with sinusoidal
//! timestep conditioning and one cross-attention block over the text tokens
//! at the bottleneck. The pooled caption is also projected into the timestep
//! embedding, so every residual block sees it.
//!
//! Layout at the default widths (latent 12x16x16):
//!
//! ```text
//! conv_in 12->32 | res 32 | down 32->64 (8x8) | res 64 | xattn | res 64
//!   | proj 64->32, upsample | concat skip | res 64->32 | norm, conv_out 32->12
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{init_text_params, ConditioningBatch, TextConfig, TokenBatch};
use crate::diffusion::{LatentBatch, NoisePredictor};
use crate::error::{shape_err, Error, Result};
use crate::graph::{attention_forward, Graph, Var};
use crate::real::Real;
use crate::tensor::{ParamStore, Tensor};

/// Frequencies of the timestep embedding span `1 ..= 1 / TIMESTEP_BASE`.
pub const TIMESTEP_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    pub width: usize,
    pub mid_width: usize,
    pub groups: usize,
    pub time_dim: usize,
    pub time_hidden: usize,
    pub key_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 12,
            latent_size: 16,
            width: 32,
            mid_width: 64,
            groups: 8,
            time_dim: 64,
            time_hidden: 128,
            key_dim: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub text: TextConfig,
    pub unet: UNetConfig,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self { text: TextConfig::new(vocab_size), unet: UNetConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let u = &self.unet;
        let positive = [
            u.latent_channels,
            u.latent_size,
            u.width,
            u.mid_width,
            u.groups,
            u.time_dim,
            u.time_hidden,
            u.key_dim,
            self.text.width,
            self.text.max_tokens,
        ];
        if positive.contains(&0) {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        if u.latent_size % 2 != 0 {
            return Err(Error::InvalidArgument("latent size must be even".into()));
        }
        if u.time_dim % 2 != 0 {
            return Err(Error::InvalidArgument("time embedding width must be even".into()));
        }
        if u.width % u.groups != 0 || u.mid_width % u.groups != 0 || (2 * u.width) % u.groups != 0 {
            return Err(Error::InvalidArgument("channel widths must divide into norm groups".into()));
        }
        if self.text.vocab_size < 2 {
            return Err(Error::InvalidArgument("vocabulary needs NULL and UNK".into()));
        }
        Ok(())
    }
}

/// Interleaved `[sin(t f_0), cos(t f_0), sin(t f_1), ...]` with
/// `f_i = TIMESTEP_BASE^(-i / (dim/2 - 1))`, so `f_0 = 1`.
pub fn timestep_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("embedding width must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let f = if half == 1 { 1.0 } else { TIMESTEP_BASE.powf(-(i as f64) / (half - 1) as f64) };
        out.push((t * f).sin());
        out.push((t * f).cos());
    }
    Ok(out)
}

/// `softmax(q k^T / sqrt(d_k)) v` for row-major `q: [n, d_k]`, `k: [m, d_k]`,
/// `v: [m, d_v]`. Returns `[n, d_v]`.
pub fn cross_attention<T: Real>(q: &[T], k: &[T], v: &[T], n: usize, m: usize, d_k: usize, d_v: usize) -> Result<Vec<T>> {
    Ok(cross_attention_weights(q, k, v, n, m, d_k, d_v)?.0)
}

/// As [`cross_attention`], also returning the `[n, m]` attention weights.
pub fn cross_attention_weights<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    n: usize,
    m: usize,
    d_k: usize,
    d_v: usize,
) -> Result<(Vec<T>, Vec<T>)> {
    if d_k == 0 {
        return Err(Error::InvalidArgument("key width must be positive".into()));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("attention needs at least one token".into()));
    }
    if q.len() != n * d_k || k.len() != m * d_k || v.len() != m * d_v {
        return Err(shape_err("attention operand dimensions disagree"));
    }
    let scale = T::one() / T::lit(d_k as f64).sqrt();
    Ok(attention_forward(q, k, v, 1, n, m, d_k, d_v, scale))
}

fn conv_init<T: Real, R: Rng + ?Sized>(co: usize, ci: usize, k: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(&[co, ci, k, k], 1.0 / ((ci * k * k) as f64).sqrt(), rng)
}

fn dense_init<T: Real, R: Rng + ?Sized>(din: usize, dout: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(&[din, dout], 1.0 / (din as f64).sqrt(), rng)
}

fn add_conv<T: Real, R: Rng + ?Sized>(
    s: &mut ParamStore<T>,
    name: &str,
    co: usize,
    ci: usize,
    k: usize,
    rng: &mut R,
) -> Result<()> {
    s.insert(&format!("{name}.w"), conv_init(co, ci, k, rng))?;
    s.insert(&format!("{name}.b"), Tensor::zeros(&[co]))?;
    Ok(())
}

fn add_norm<T: Real>(s: &mut ParamStore<T>, name: &str, c: usize) -> Result<()> {
    s.insert(&format!("{name}.g"), Tensor::full(&[c], T::one()))?;
    s.insert(&format!("{name}.b"), Tensor::zeros(&[c]))?;
    Ok(())
}

fn add_resblock<T: Real, R: Rng + ?Sized>(
    s: &mut ParamStore<T>,
    name: &str,
    ci: usize,
    co: usize,
    temb: usize,
    rng: &mut R,
) -> Result<()> {
    add_norm(s, &format!("{name}.norm1"), ci)?;
    add_conv(s, &format!("{name}.conv1"), co, ci, 3, rng)?;
    s.insert(&format!("{name}.temb.w"), dense_init(temb, co, rng))?;
    s.insert(&format!("{name}.temb.b"), Tensor::zeros(&[co]))?;
    add_norm(s, &format!("{name}.norm2"), co)?;
    add_conv(s, &format!("{name}.conv2"), co, co, 3, rng)?;
    if ci != co {
        add_conv(s, &format!("{name}.skip"), co, ci, 1, rng)?;
    }
    Ok(())
}

/// Fresh parameters for the text encoder (`text.*`) and the U-Net (`unet.*`),
/// drawn from a ChaCha8 stream seeded by `seed`.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    init_text_params(&mut s, &cfg.text, &mut rng)?;
    let u = &cfg.unet;
    let (c1, c2, th) = (u.width, u.mid_width, u.time_hidden);
    s.insert("unet.time.w1", dense_init(u.time_dim, th, &mut rng))?;
    s.insert("unet.time.b1", Tensor::zeros(&[th]))?;
    s.insert("unet.time.w2", dense_init(th, th, &mut rng))?;
    s.insert("unet.time.b2", Tensor::zeros(&[th]))?;
    s.insert("unet.time.wp", dense_init(cfg.text.width, th, &mut rng))?;
    add_conv(&mut s, "unet.conv_in", c1, u.latent_channels, 3, &mut rng)?;
    add_resblock(&mut s, "unet.down.res", c1, c1, th, &mut rng)?;
    add_conv(&mut s, "unet.down.conv", c2, c1, 3, &mut rng)?;
    add_resblock(&mut s, "unet.mid.res1", c2, c2, th, &mut rng)?;
    add_norm(&mut s, "unet.attn.norm", c2)?;
    s.insert("unet.attn.wq", dense_init(c2, u.key_dim, &mut rng))?;
    s.insert("unet.attn.wk", dense_init(cfg.text.width, u.key_dim, &mut rng))?;
    s.insert("unet.attn.wv", dense_init(cfg.text.width, c2, &mut rng))?;
    s.insert("unet.attn.wo", dense_init(c2, c2, &mut rng))?;
    s.insert("unet.attn.bo", Tensor::zeros(&[c2]))?;
    add_resblock(&mut s, "unet.mid.res2", c2, c2, th, &mut rng)?;
    add_conv(&mut s, "unet.up.proj", c1, c2, 1, &mut rng)?;
    add_resblock(&mut s, "unet.up.res", 2 * c1, c1, th, &mut rng)?;
    add_norm(&mut s, "unet.out.norm", c1)?;
    add_conv(&mut s, "unet.out.conv", u.latent_channels, c1, 3, &mut rng)?;
    Ok(s)
}

fn p<T: Real>(g: &mut Graph<'_, T>, name: &str) -> Result<Var> {
    g.param_named(name)
}

fn conv<T: Real>(g: &mut Graph<'_, T>, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
    let w = p(g, &format!("{name}.w"))?;
    let b = p(g, &format!("{name}.b"))?;
    Ok(g.conv2d(x, w, Some(b), stride, pad))
}

fn norm<T: Real>(g: &mut Graph<'_, T>, x: Var, name: &str, groups: usize) -> Result<Var> {
    let gamma = p(g, &format!("{name}.g"))?;
    let beta = p(g, &format!("{name}.b"))?;
    Ok(g.group_norm(x, gamma, beta, groups))
}

fn resblock<T: Real>(g: &mut Graph<'_, T>, x: Var, temb: Var, name: &str, groups: usize) -> Result<Var> {
    let h = norm(g, x, &format!("{name}.norm1"), groups)?;
    let h = g.silu(h);
    let h = conv(g, h, &format!("{name}.conv1"), 1, 1)?;
    let tw = p(g, &format!("{name}.temb.w"))?;
    let tb = p(g, &format!("{name}.temb.b"))?;
    let tv = g.linear(temb, tw, Some(tb));
    let h = g.add_channel(h, tv);
    let h = norm(g, h, &format!("{name}.norm2"), groups)?;
    let h = g.silu(h);
    let h = conv(g, h, &format!("{name}.conv2"), 1, 1)?;
    let skip = if g.params().id(&format!("{name}.skip.w")).is_ok() {
        conv(g, x, &format!("{name}.skip"), 1, 0)?
    } else {
        x
    };
    Ok(g.add(h, skip))
}

fn cross_attention_block<T: Real>(g: &mut Graph<'_, T>, x: Var, seq: Var, groups: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let h = norm(g, x, "unet.attn.norm", groups)?;
    let h = g.reshape(h, &[b, c, hw]);
    let tokens = g.transpose_last2(h);
    let wq = p(g, "unet.attn.wq")?;
    let wk = p(g, "unet.attn.wk")?;
    let wv = p(g, "unet.attn.wv")?;
    let wo = p(g, "unet.attn.wo")?;
    let bo = p(g, "unet.attn.bo")?;
    let q = g.linear(tokens, wq, None);
    let k = g.linear(seq, wk, None);
    let v = g.linear(seq, wv, None);
    let a = g.attention(q, k, v);
    let o = g.linear(a, wo, Some(bo));
    let o = g.transpose_last2(o);
    let o = g.reshape(o, &s);
    Ok(g.add(x, o))
}

/// Timestep embedding rows `[B, time_dim]` as a constant input.
pub fn timestep_input<T: Real>(t: &[usize], dim: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        data.extend(timestep_embedding(ti as f64, dim)?.into_iter().map(T::lit));
    }
    Tensor::new(vec![t.len(), dim], data)
}

/// U-Net forward inside `g`: `z: [B, C, H, W]`, `seq: [B, L, d_t]`,
/// `pooled: [B, d_t]`.
pub fn unet_forward<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    z: Var,
    t: &[usize],
    seq: Var,
    pooled: Var,
) -> Result<Var> {
    let u = &cfg.unet;
    let zs = g.shape(z).to_vec();
    let b = zs[0];
    if zs[1..] != [u.latent_channels, u.latent_size, u.latent_size] {
        return Err(shape_err(format!("latent shape {:?} does not match the model", &zs[1..])));
    }
    if t.len() != b {
        return Err(shape_err(format!("{} timesteps for a batch of {b}", t.len())));
    }
    let ss = g.shape(seq).to_vec();
    if ss != [b, cfg.text.max_tokens, cfg.text.width] {
        return Err(shape_err(format!("conditioning sequence shape {ss:?} does not match the model")));
    }
    if g.shape(pooled) != [b, cfg.text.width] {
        return Err(shape_err(format!("pooled conditioning shape {:?} does not match the model", g.shape(pooled))));
    }
    let te = g.input(timestep_input(t, u.time_dim)?);
    let w1 = p(g, "unet.time.w1")?;
    let b1 = p(g, "unet.time.b1")?;
    let w2 = p(g, "unet.time.w2")?;
    let b2 = p(g, "unet.time.b2")?;
    let e = g.linear(te, w1, Some(b1));
    let e = g.silu(e);
    let e = g.linear(e, w2, Some(b2));
    let wp = p(g, "unet.time.wp")?;
    let pe = g.linear(pooled, wp, None);
    let e = g.add(e, pe);
    let temb = g.silu(e);

    let gr = u.groups;
    let h = conv(g, z, "unet.conv_in", 1, 1)?;
    let skip = resblock(g, h, temb, "unet.down.res", gr)?;
    let h = conv(g, skip, "unet.down.conv", 2, 1)?;
    let h = resblock(g, h, temb, "unet.mid.res1", gr)?;
    let h = cross_attention_block(g, h, seq, gr)?;
    let h = resblock(g, h, temb, "unet.mid.res2", gr)?;
    let h = conv(g, h, "unet.up.proj", 1, 0)?;
    let h = g.upsample2x(h);
    let h = g.concat_channels(h, skip);
    let h = resblock(g, h, temb, "unet.up.res", gr)?;
    let h = norm(g, h, "unet.out.norm", gr)?;
    let h = g.silu(h);
    conv(g, h, "unet.out.conv", 1, 1)
}

/// Noise prediction for a batch, outside of any training graph.
pub fn denoise<T: Real>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    z_t: &LatentBatch<T>,
    t: &[usize],
    cond: &ConditioningBatch<T>,
) -> Result<LatentBatch<T>> {
    if cond.len() != z_t.len() {
        return Err(shape_err(format!("{} conditioning rows for {} latents", cond.len(), z_t.len())));
    }
    let mut g = Graph::new(params);
    let z = g.input(z_t.to_tensor());
    let seq = g.input(cond.sequence().clone());
    let pooled = g.input(cond.pooled().clone());
    let out = unet_forward(&mut g, cfg, z, t, seq, pooled)?;
    let out = LatentBatch::from_tensor(g.value(out))?;
    check_finite(&out)?;
    Ok(out)
}

fn check_finite<T: Real>(b: &LatentBatch<T>) -> Result<()> {
    if b.items().iter().any(|g| g.values().iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite { step: 0, detail: "denoiser produced a non-finite value".into() });
    }
    Ok(())
}

/// Parameters plus architecture: the unit saved in checkpoints and used for
/// sampling.
#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self { config, params: init_params(&config, seed)? })
    }

    pub fn encode(&self, tokens: &TokenBatch) -> Result<ConditioningBatch<T>> {
        crate::conditioning::encode_text(&self.params, &self.config.text, tokens)
    }
}

impl NoisePredictor for Model<f32> {
    fn latent_shape(&self) -> (usize, usize, usize) {
        let u = &self.config.unet;
        (u.latent_channels, u.latent_size, u.latent_size)
    }

    fn predict_noise(
        &self,
        z_t: &LatentBatch<f32>,
        t: &[usize],
        cond: &ConditioningBatch<f32>,
    ) -> Result<LatentBatch<f32>> {
        denoise(&self.params, &self.config, z_t, t, cond)
    }

    fn unconditional(&self, batch: usize) -> Result<ConditioningBatch<f32>> {
        self.encode(&TokenBatch::nulls(batch, self.config.text.max_tokens)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{encode_text, text_forward, Vocabulary};
    use crate::diffusion::{denoising_loss, LatentGrid};

    fn small_config() -> ModelConfig {
        ModelConfig {
            text: TextConfig { vocab_size: 14, width: 8, max_tokens: 5 },
            unet: UNetConfig {
                latent_channels: 3,
                latent_size: 4,
                width: 4,
                mid_width: 8,
                groups: 2,
                time_dim: 4,
                time_hidden: 6,
                key_dim: 4,
            },
        }
    }

    fn random_params(cfg: &ModelConfig, seed: u64) -> ParamStore<f64> {
        // perturb gains and biases so no gradient path is trivially zero
        let mut s = init_params::<f64>(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        for id in 0..s.len() {
            for v in s.get_mut(id).data_mut() {
                *v += 0.1 * rng.gen_range(-1.0..1.0);
            }
        }
        s
    }

    fn batch(cfg: &ModelConfig, b: usize, seed: u64) -> (LatentBatch<f64>, TokenBatch) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = &cfg.unet;
        let z = LatentBatch::new(
            (0..b).map(|_| LatentGrid::random(u.latent_channels, u.latent_size, u.latent_size, &mut rng)).collect(),
        )
        .unwrap();
        let rows = (0..b)
            .map(|_| (0..cfg.text.max_tokens).map(|_| rng.gen_range(0..cfg.text.vocab_size)).collect())
            .collect();
        (z, TokenBatch::new(rows).unwrap())
    }

    #[test]
    fn timestep_embedding_examples() {
        let e = timestep_embedding(0.0, 8).unwrap();
        for i in 0..4 {
            assert_eq!(e[2 * i], 0.0);
            assert_eq!(e[2 * i + 1], 1.0);
        }
        assert_eq!(timestep_embedding(37.0, 16).unwrap(), timestep_embedding(37.0, 16).unwrap());
        let e = timestep_embedding(1.0, 2).unwrap();
        assert!((e[0] - 0.84147).abs() < 1e-5 && (e[1] - 0.54030).abs() < 1e-5);
        let e = timestep_embedding(1.0, 4).unwrap();
        assert!((e[2] - 1e-4f64.sin()).abs() < 1e-15);
        assert!(timestep_embedding(1.0, 3).is_err());
        assert!(timestep_embedding(1.0, 0).is_err());
    }

    #[test]
    fn cross_attention_examples() {
        let out = cross_attention(&[0.0], &[1.0, -1.0], &[1.0, 0.0], 1, 2, 1, 1).unwrap();
        assert_eq!(out, vec![0.5]);
        let out = cross_attention(&[3.0, -1.0, 0.5, 2.0], &[0.2, 0.7], &[4.0, 5.0, 6.0], 2, 1, 2, 3).unwrap();
        assert_eq!(out, vec![4.0, 5.0, 6.0, 4.0, 5.0, 6.0]);
        let out = cross_attention(&[1.0f64, 2.0], &[0.3, 0.3, 0.3], &[1.0, 2.0, 6.0], 2, 3, 1, 1).unwrap();
        assert!(out.iter().all(|&v| (v - 3.0).abs() < 1e-12));
        assert!(cross_attention::<f64>(&[1.0], &[], &[], 1, 0, 1, 1).is_err());
        assert!(cross_attention::<f64>(&[1.0], &[1.0], &[1.0], 1, 1, 2, 1).is_err());
    }

    #[test]
    fn attention_weights_are_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let (n, m, d, dv) = (rng.gen_range(1..6), rng.gen_range(1..9), rng.gen_range(1..5), rng.gen_range(1..4));
            let r = |len: usize, rng: &mut ChaCha8Rng| (0..len).map(|_| rng.gen_range(-4.0..4.0)).collect::<Vec<f64>>();
            let (q, k, v) = (r(n * d, &mut rng), r(m * d, &mut rng), r(m * dv, &mut rng));
            let (out, w) = cross_attention_weights(&q, &k, &v, n, m, d, dv).unwrap();
            for (i, row) in w.chunks(m).enumerate() {
                assert!(row.iter().all(|&x| x >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                for j in 0..dv {
                    let col = (0..m).map(|r| v[r * dv + j]);
                    let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
                    let o = out[i * dv + j];
                    assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn denoise_shape_purity_and_permutation() {
        let cfg = small_config();
        let params = random_params(&cfg, 1);
        let (z, tokens) = batch(&cfg, 4, 2);
        let cond = encode_text(&params, &cfg.text, &tokens).unwrap();
        let t = [3, 500, 17, 1000];
        let a = denoise(&params, &cfg, &z, &t, &cond).unwrap();
        let b = denoise(&params, &cfg, &z, &t, &cond).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert_eq!(a.grid_shape(), z.grid_shape());

        let perm = [2usize, 0, 3, 1];
        let zp = LatentBatch::new(perm.iter().map(|&i| z.items()[i].clone()).collect()).unwrap();
        let tp: Vec<usize> = perm.iter().map(|&i| t[i]).collect();
        let tokp = TokenBatch::new(perm.iter().map(|&i| tokens.row(i).to_vec()).collect()).unwrap();
        let condp = encode_text(&params, &cfg.text, &tokp).unwrap();
        let out = denoise(&params, &cfg, &zp, &tp, &condp).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for (x, y) in out.items()[k].values().iter().zip(a.items()[i].values()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn identical_samples_give_identical_outputs() {
        let cfg = small_config();
        let params = random_params(&cfg, 3);
        let (z, tokens) = batch(&cfg, 1, 4);
        let zb = LatentBatch::new(vec![z.items()[0].clone(); 3]).unwrap();
        let tb = TokenBatch::new(vec![tokens.row(0).to_vec(); 3]).unwrap();
        let cond = encode_text(&params, &cfg.text, &tb).unwrap();
        let out = denoise(&params, &cfg, &zb, &[250; 3], &cond).unwrap();
        assert_eq!(out.items()[0], out.items()[1]);
        assert_eq!(out.items()[0], out.items()[2]);
    }

    #[test]
    fn shape_mismatches_are_errors() {
        let cfg = small_config();
        let params = random_params(&cfg, 5);
        let (z, tokens) = batch(&cfg, 2, 6);
        let cond = encode_text(&params, &cfg.text, &tokens).unwrap();
        assert!(denoise(&params, &cfg, &z, &[1], &cond).is_err());
        let (z3, _) = batch(&cfg, 3, 7);
        assert!(denoise(&params, &cfg, &z3, &[1, 2, 3], &cond).is_err());
        let wrong = LatentBatch::new(vec![LatentGrid::<f64>::zeros(3, 2, 2); 2]).unwrap();
        assert!(denoise(&params, &cfg, &wrong, &[1, 2], &cond).is_err());
    }

    #[test]
    fn default_model_matches_codec_shape() {
        let vocab = Vocabulary::for_categories(&["carcinoma", "sarcoma"]).unwrap();
        let m = Model::<f32>::new(ModelConfig::new(vocab.len()), 0).unwrap();
        assert_eq!(m.latent_shape(), (12, 16, 16));
        assert!(m.params.names().iter().all(|n| n.starts_with("text.") || n.starts_with("unet.")));
        assert!(m.params.tensors().iter().all(|t| t.all_finite()));
    }

    #[test]
    fn denoising_loss_gradients_match_finite_differences() {
        let cfg = small_config();
        let params = random_params(&cfg, 8);
        let (z, tokens) = batch(&cfg, 3, 9);
        let t = [2usize, 40, 900];
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let target = Tensor::<f64>::randn(&[3, 3, 4, 4], 1.0, &mut rng);
        let zt = z.to_tensor();
        let loss = |p: &ParamStore<f64>, grad: bool| -> (f64, Option<ParamStore<f64>>) {
            let mut g = Graph::new(p);
            let text = text_forward(&mut g, &cfg.text, &tokens).unwrap();
            let zv = g.input(zt.clone());
            let out = unet_forward(&mut g, &cfg, zv, &t, text.sequence, text.pooled).unwrap();
            let l = g.mse(out, &target);
            let v = g.value(l).item();
            (v, grad.then(|| g.backward(l).params))
        };
        let (l0, grads) = loss(&params, true);
        let grads = grads.unwrap();
        let pred = {
            let mut g = Graph::new(&params);
            let text = text_forward(&mut g, &cfg.text, &tokens).unwrap();
            let zv = g.input(zt.clone());
            let out = unet_forward(&mut g, &cfg, zv, &t, text.sequence, text.pooled).unwrap();
            LatentBatch::from_tensor(g.value(out)).unwrap()
        };
        let l_ref = denoising_loss(&pred, &LatentBatch::from_tensor(&target).unwrap()).unwrap();
        assert!((l0 - l_ref).abs() < 1e-12);
        for (id, name) in params.names().iter().enumerate() {
            let n = params.get(id).len();
            for _ in 0..5 {
                let i = if name == "text.token" {
                    tokens.ids()[rng.gen_range(0..tokens.ids().len())] * cfg.text.width + rng.gen_range(0..cfg.text.width)
                } else {
                    rng.gen_range(0..n)
                };
                let h = 1e-5;
                let mut q = params.clone();
                q.get_mut(id).data_mut()[i] += h;
                let up = loss(&q, false).0;
                q.get_mut(id).data_mut()[i] -= 2.0 * h;
                let down = loss(&q, false).0;
                let fd = (up - down) / (2.0 * h);
                let an = grads.get(id).data()[i];
                let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-7);
                assert!(rel <= 1e-4, "{name}[{i}]: analytic {an}, numeric {fd}");
            }
        }
    }
}
