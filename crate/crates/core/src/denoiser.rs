//! Conditional noise-prediction network.
//!
//! A stack of gated residual blocks built around bidirectional (non-causal,
//! zero-padded) dilated convolutions. The noisy sample and the
//! identity-removed observation enter as input channels; the diffusion step
//! and the target-user embedding enter as per-channel biases.

use serde::{Deserialize, Serialize};

use crate::diffusion::{self, Conditioning, NoisePredictor, TIMESTEP_DIM};
use crate::error::{Error, Result};
use crate::nn::{self, ParamSet, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub n_layers: usize,
    pub residual_channels: usize,
    pub kernel_size: usize,
    pub dilation_cycle: usize,
    pub sequence_length: usize,
    pub embedding_dim: usize,
    pub t_hidden: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            n_layers: 6,
            residual_channels: 16,
            kernel_size: 3,
            dilation_cycle: 10,
            sequence_length: 1000,
            embedding_dim: 32,
            t_hidden: 128,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("denoiser config: {what}")));
        if self.n_layers == 0 {
            return bad("n_layers must be >= 1");
        }
        if self.residual_channels == 0 || self.dilation_cycle == 0 || self.t_hidden == 0 {
            return bad("channel, hidden and cycle sizes must be >= 1");
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad("kernel_size must be odd");
        }
        if self.sequence_length == 0 || self.embedding_dim == 0 {
            return bad("sequence_length and embedding_dim must be >= 1");
        }
        Ok(())
    }

    pub fn dilation(&self, layer: usize) -> usize {
        1 << (layer % self.dilation_cycle)
    }

    /// Span of input samples that can influence one output sample.
    pub fn receptive_field(&self) -> usize {
        1 + (0..self.n_layers)
            .map(|i| self.dilation(i) * (self.kernel_size - 1))
            .sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualLayer<F> {
    pub dil_w: Tensor<F>,
    pub dil_b: Tensor<F>,
    pub t_w: Tensor<F>,
    pub t_b: Tensor<F>,
    pub user_w: Tensor<F>,
    pub user_b: Tensor<F>,
    pub res_w: Tensor<F>,
    pub res_b: Tensor<F>,
    pub skip_w: Tensor<F>,
    pub skip_b: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<F> {
    pub config: DenoiserConfig,
    pub in_w: Tensor<F>,
    pub in_b: Tensor<F>,
    pub t1_w: Tensor<F>,
    pub t1_b: Tensor<F>,
    pub t2_w: Tensor<F>,
    pub t2_b: Tensor<F>,
    /// Position-shared dense map applied to the broadcast user embedding.
    pub user_w: Tensor<F>,
    pub layers: Vec<ResidualLayer<F>>,
    pub head1_w: Tensor<F>,
    pub head1_b: Tensor<F>,
    pub head2_w: Tensor<F>,
    pub head2_b: Tensor<F>,
}

/// Gradients share the parameter layout.
pub type Gradients<F> = DenoiserParams<F>;

impl<F: Real> ParamSet<F> for DenoiserParams<F> {
    fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut v = vec![
            ("input.weight".to_string(), &self.in_w),
            ("input.bias".to_string(), &self.in_b),
            ("time.0.weight".to_string(), &self.t1_w),
            ("time.0.bias".to_string(), &self.t1_b),
            ("time.1.weight".to_string(), &self.t2_w),
            ("time.1.bias".to_string(), &self.t2_b),
            ("user.weight".to_string(), &self.user_w),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            v.extend([
                (format!("layers.{i}.dilated.weight"), &l.dil_w),
                (format!("layers.{i}.dilated.bias"), &l.dil_b),
                (format!("layers.{i}.time.weight"), &l.t_w),
                (format!("layers.{i}.time.bias"), &l.t_b),
                (format!("layers.{i}.user.weight"), &l.user_w),
                (format!("layers.{i}.user.bias"), &l.user_b),
                (format!("layers.{i}.residual.weight"), &l.res_w),
                (format!("layers.{i}.residual.bias"), &l.res_b),
                (format!("layers.{i}.skip.weight"), &l.skip_w),
                (format!("layers.{i}.skip.bias"), &l.skip_b),
            ]);
        }
        v.extend([
            ("head.0.weight".to_string(), &self.head1_w),
            ("head.0.bias".to_string(), &self.head1_b),
            ("head.1.weight".to_string(), &self.head2_w),
            ("head.1.bias".to_string(), &self.head2_b),
        ]);
        v
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut v = vec![
            ("input.weight".to_string(), &mut self.in_w),
            ("input.bias".to_string(), &mut self.in_b),
            ("time.0.weight".to_string(), &mut self.t1_w),
            ("time.0.bias".to_string(), &mut self.t1_b),
            ("time.1.weight".to_string(), &mut self.t2_w),
            ("time.1.bias".to_string(), &mut self.t2_b),
            ("user.weight".to_string(), &mut self.user_w),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            v.extend([
                (format!("layers.{i}.dilated.weight"), &mut l.dil_w),
                (format!("layers.{i}.dilated.bias"), &mut l.dil_b),
                (format!("layers.{i}.time.weight"), &mut l.t_w),
                (format!("layers.{i}.time.bias"), &mut l.t_b),
                (format!("layers.{i}.user.weight"), &mut l.user_w),
                (format!("layers.{i}.user.bias"), &mut l.user_b),
                (format!("layers.{i}.residual.weight"), &mut l.res_w),
                (format!("layers.{i}.residual.bias"), &mut l.res_b),
                (format!("layers.{i}.skip.weight"), &mut l.skip_w),
                (format!("layers.{i}.skip.bias"), &mut l.skip_b),
            ]);
        }
        v.extend([
            ("head.0.weight".to_string(), &mut self.head1_w),
            ("head.0.bias".to_string(), &mut self.head1_b),
            ("head.1.weight".to_string(), &mut self.head2_w),
            ("head.1.bias".to_string(), &mut self.head2_b),
        ]);
        v
    }
}

impl<F: Real> DenoiserParams<F> {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let DenoiserConfig {
            residual_channels: c,
            kernel_size: k,
            embedding_dim: d,
            t_hidden: h,
            ..
        } = config;
        let z = |s: &[usize]| Tensor::zeros(s);
        Ok(DenoiserParams {
            config,
            in_w: z(&[c, 4, 1]),
            in_b: z(&[c]),
            t1_w: z(&[h, TIMESTEP_DIM]),
            t1_b: z(&[h]),
            t2_w: z(&[h, h]),
            t2_b: z(&[h]),
            user_w: z(&[d, d]),
            layers: (0..config.n_layers)
                .map(|_| ResidualLayer {
                    dil_w: z(&[2 * c, c, k]),
                    dil_b: z(&[2 * c]),
                    t_w: z(&[c, h]),
                    t_b: z(&[c]),
                    user_w: z(&[2 * c, d]),
                    user_b: z(&[2 * c]),
                    res_w: z(&[c, c, 1]),
                    res_b: z(&[c]),
                    skip_w: z(&[c, c, 1]),
                    skip_b: z(&[c]),
                })
                .collect(),
            head1_w: z(&[c, c, 1]),
            head1_b: z(&[c]),
            head2_w: z(&[2, c, 1]),
            head2_b: z(&[2]),
        })
    }

    /// Uniform fan-in initialization; the final projection starts at zero so
    /// an untrained network predicts no noise.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = crate::rng::stream(seed, &[crate::rng::tag::DENOISER_INIT]);
        for (name, t) in p.named_mut() {
            if name.starts_with("head.1.") {
                continue;
            }
            let fan_in = match t.shape.len() {
                3 => t.shape[1] * t.shape[2],
                2 => t.shape[1],
                _ => 0,
            };
            let fan_in = if fan_in == 0 {
                // Biases share the fan-in of their weight.
                fan_in_of_bias(&name, &config)
            } else {
                fan_in
            };
            *t = Tensor::uniform_fan_in(&t.shape, fan_in, &mut rng);
        }
        Ok(p)
    }

    /// Randomizes the zero-initialized output head, for sensitivity probes.
    pub fn randomize_head(&mut self, seed: u64) {
        let mut rng = crate::rng::stream(seed, &[crate::rng::tag::DENOISER_INIT, 1]);
        let c = self.config.residual_channels;
        self.head2_w = Tensor::uniform_fan_in(&[2, c, 1], c, &mut rng);
        self.head2_b = Tensor::uniform_fan_in(&[2], c, &mut rng);
    }
}

fn fan_in_of_bias(name: &str, config: &DenoiserConfig) -> usize {
    let c = config.residual_channels;
    if name.starts_with("input.") {
        4
    } else if name.starts_with("time.0") {
        TIMESTEP_DIM
    } else if name.starts_with("time.1") || name.ends_with("time.bias") {
        config.t_hidden
    } else if name.ends_with("dilated.bias") {
        c * config.kernel_size
    } else if name.ends_with("user.bias") {
        config.embedding_dim
    } else {
        c
    }
}

/// Forward intermediates needed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    input: Vec<F>,
    h0: Vec<F>,
    t_enc: Vec<F>,
    t1_pre: Vec<F>,
    t1: Vec<F>,
    t2_pre: Vec<F>,
    temb: Vec<F>,
    user: Vec<F>,
    layers: Vec<LayerCache<F>>,
    head_in: Vec<F>,
    head_mid: Vec<F>,
}

#[derive(Debug, Clone)]
struct LayerCache<F> {
    y: Vec<F>,
    tanh: Vec<F>,
    sig: Vec<F>,
    gate: Vec<F>,
}

impl<F> ForwardCache<F> {
    /// Positive/negative pattern of every ReLU input, for kink detection in
    /// finite-difference checks.
    pub fn relu_pattern(&self) -> Vec<bool>
    where
        F: Real,
    {
        self.h0
            .iter()
            .chain(&self.head_in)
            .chain(&self.head_mid)
            .map(|v| *v > F::zero())
            .collect()
    }
}

fn check_len(got: usize, want: usize, what: &str) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!(
            "{what}: expected {want} values, got {got}"
        )));
    }
    Ok(())
}

/// Predicts the noise `ε̂` (channel-major `2 × L`) and the cache for backprop.
pub fn forward<F: Real>(
    params: &DenoiserParams<F>,
    x_t: &[F],
    t: usize,
    cond: &Conditioning<F>,
) -> Result<(Vec<F>, ForwardCache<F>)> {
    let cfg = &params.config;
    let len = cfg.sequence_length;
    let c = cfg.residual_channels;
    check_len(x_t.len(), 2 * len, "noisy sample")?;
    check_len(cond.observation.len(), 2 * len, "observation")?;
    check_len(cond.embedding.len(), cfg.embedding_dim, "user embedding")?;

    let mut input = Vec::with_capacity(4 * len);
    input.extend_from_slice(x_t);
    input.extend_from_slice(&cond.observation);

    let mut h = vec![F::zero(); c * len];
    nn::conv1d(&input, len, &params.in_w, &params.in_b.data, 1, &mut h);
    nn::relu_in_place(&mut h);
    let h0 = h.clone();

    let t_enc: Vec<F> = diffusion::timestep_encoding(t as f64);
    let t1_pre = nn::dense(&params.t1_w, Some(&params.t1_b), &t_enc);
    let t1: Vec<F> = t1_pre.iter().map(|&v| nn::silu(v)).collect();
    let t2_pre = nn::dense(&params.t2_w, Some(&params.t2_b), &t1);
    let temb: Vec<F> = t2_pre.iter().map(|&v| nn::silu(v)).collect();

    let user = nn::dense(&params.user_w, None, &cond.embedding);

    let inv_sqrt2 = F::of(std::f64::consts::FRAC_1_SQRT_2);
    let mut skip_sum = vec![F::zero(); c * len];
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut a = vec![F::zero(); 2 * c * len];
    let mut r = vec![F::zero(); c * len];
    for (i, layer) in params.layers.iter().enumerate() {
        let tb = nn::dense(&layer.t_w, Some(&layer.t_b), &temb);
        let mut y = h.clone();
        for ch in 0..c {
            y[ch * len..(ch + 1) * len]
                .iter_mut()
                .for_each(|v| *v += tb[ch]);
        }
        let ub = nn::dense(&layer.user_w, Some(&layer.user_b), &user);
        let bias: Vec<F> = layer
            .dil_b
            .data
            .iter()
            .zip(&ub)
            .map(|(&p, &q)| p + q)
            .collect();
        nn::conv1d(&y, len, &layer.dil_w, &bias, cfg.dilation(i), &mut a);

        let (filter, gate_in) = a.split_at(c * len);
        let tanh: Vec<F> = filter.iter().map(|v| v.tanh()).collect();
        let sig: Vec<F> = gate_in.iter().map(|&v| nn::sigmoid(v)).collect();
        let gate: Vec<F> = tanh.iter().zip(&sig).map(|(&p, &q)| p * q).collect();

        nn::conv1d(&gate, len, &layer.res_w, &layer.res_b.data, 1, &mut r);
        h.iter_mut()
            .zip(&r)
            .for_each(|(hv, &rv)| *hv = (*hv + rv) * inv_sqrt2);
        nn::conv1d(&gate, len, &layer.skip_w, &layer.skip_b.data, 1, &mut r);
        skip_sum.iter_mut().zip(&r).for_each(|(s, &v)| *s += v);

        layers.push(LayerCache { y, tanh, sig, gate });
    }

    let skip_scale = F::of(1.0 / (cfg.n_layers as f64).sqrt());
    let mut head_in: Vec<F> = skip_sum.iter().map(|&v| v * skip_scale).collect();
    nn::relu_in_place(&mut head_in);
    let mut head_mid = vec![F::zero(); c * len];
    nn::conv1d(
        &head_in,
        len,
        &params.head1_w,
        &params.head1_b.data,
        1,
        &mut head_mid,
    );
    nn::relu_in_place(&mut head_mid);
    let mut out = vec![F::zero(); 2 * len];
    nn::conv1d(
        &head_mid,
        len,
        &params.head2_w,
        &params.head2_b.data,
        1,
        &mut out,
    );

    Ok((
        out,
        ForwardCache {
            input,
            h0,
            t_enc,
            t1_pre,
            t1,
            t2_pre,
            temb,
            user,
            layers,
            head_in,
            head_mid,
        },
    ))
}

/// Parameter gradients of `Σ grad_out ⊙ ε̂` for one forward pass.
pub fn backward<F: Real>(
    params: &DenoiserParams<F>,
    cache: &ForwardCache<F>,
    embedding: &[F],
    grad_out: &[F],
) -> Result<Gradients<F>> {
    let cfg = &params.config;
    let len = cfg.sequence_length;
    let c = cfg.residual_channels;
    check_len(grad_out.len(), 2 * len, "output gradient")?;
    let mut g = params.zeros_like();

    let mut g_mid = vec![F::zero(); c * len];
    nn::conv1d_backward(
        &cache.head_mid,
        len,
        &params.head2_w,
        1,
        grad_out,
        &mut g.head2_w,
        &mut g.head2_b.data,
        Some(&mut g_mid),
    );
    nn::relu_backward_in_place(&cache.head_mid, &mut g_mid);
    let mut g_head_in = vec![F::zero(); c * len];
    nn::conv1d_backward(
        &cache.head_in,
        len,
        &params.head1_w,
        1,
        &g_mid,
        &mut g.head1_w,
        &mut g.head1_b.data,
        Some(&mut g_head_in),
    );
    nn::relu_backward_in_place(&cache.head_in, &mut g_head_in);
    let skip_scale = F::of(1.0 / (cfg.n_layers as f64).sqrt());
    let g_skip: Vec<F> = g_head_in.iter().map(|&v| v * skip_scale).collect();

    let inv_sqrt2 = F::of(std::f64::consts::FRAC_1_SQRT_2);
    let mut g_h = vec![F::zero(); c * len];
    let mut g_temb = vec![F::zero(); cfg.t_hidden];
    let mut g_user = vec![F::zero(); cfg.embedding_dim];
    let mut g_gate = vec![F::zero(); c * len];
    let mut g_a = vec![F::zero(); 2 * c * len];
    let mut g_y = vec![F::zero(); c * len];

    for (i, (layer, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let gl = &mut g.layers[i];
        let g_r: Vec<F> = g_h.iter().map(|&v| v * inv_sqrt2).collect();

        g_gate.iter_mut().for_each(|v| *v = F::zero());
        nn::conv1d_backward(
            &lc.gate,
            len,
            &layer.res_w,
            1,
            &g_r,
            &mut gl.res_w,
            &mut gl.res_b.data,
            Some(&mut g_gate),
        );
        nn::conv1d_backward(
            &lc.gate,
            len,
            &layer.skip_w,
            1,
            &g_skip,
            &mut gl.skip_w,
            &mut gl.skip_b.data,
            Some(&mut g_gate),
        );

        let (g_filter, g_gate_in) = g_a.split_at_mut(c * len);
        for n in 0..c * len {
            let (th, sg, gg) = (lc.tanh[n], lc.sig[n], g_gate[n]);
            g_filter[n] = gg * sg * (F::one() - th * th);
            g_gate_in[n] = gg * th * sg * (F::one() - sg);
        }

        let g_bias: Vec<F> = (0..2 * c)
            .map(|o| nn::sum(&g_a[o * len..(o + 1) * len]))
            .collect();
        let g_u = nn::dense_backward(
            &layer.user_w,
            &cache.user,
            &g_bias,
            &mut gl.user_w,
            Some(&mut gl.user_b),
        );
        g_user.iter_mut().zip(&g_u).for_each(|(a, &b)| *a += b);

        g_y.iter_mut().for_each(|v| *v = F::zero());
        let mut g_dil_b = vec![F::zero(); 2 * c];
        nn::conv1d_backward(
            &lc.y,
            len,
            &layer.dil_w,
            cfg.dilation(i),
            &g_a,
            &mut gl.dil_w,
            &mut g_dil_b,
            Some(&mut g_y),
        );
        gl.dil_b
            .data
            .iter_mut()
            .zip(&g_dil_b)
            .for_each(|(a, &b)| *a += b);

        let g_tb: Vec<F> = (0..c)
            .map(|ch| nn::sum(&g_y[ch * len..(ch + 1) * len]))
            .collect();
        let g_te = nn::dense_backward(
            &layer.t_w,
            &cache.temb,
            &g_tb,
            &mut gl.t_w,
            Some(&mut gl.t_b),
        );
        g_temb.iter_mut().zip(&g_te).for_each(|(a, &b)| *a += b);

        for n in 0..c * len {
            g_h[n] = g_r[n] + g_y[n];
        }
    }

    nn::relu_backward_in_place(&cache.h0, &mut g_h);
    nn::conv1d_backward(
        &cache.input,
        len,
        &params.in_w,
        1,
        &g_h,
        &mut g.in_w,
        &mut g.in_b.data,
        None,
    );

    nn::dense_backward(&params.user_w, embedding, &g_user, &mut g.user_w, None);

    let g_t2: Vec<F> = g_temb
        .iter()
        .zip(&cache.t2_pre)
        .map(|(&gv, &x)| gv * nn::silu_grad(x))
        .collect();
    let g_t1 = nn::dense_backward(
        &params.t2_w,
        &cache.t1,
        &g_t2,
        &mut g.t2_w,
        Some(&mut g.t2_b),
    );
    let g_t1: Vec<F> = g_t1
        .iter()
        .zip(&cache.t1_pre)
        .map(|(&gv, &x)| gv * nn::silu_grad(x))
        .collect();
    nn::dense_backward(
        &params.t1_w,
        &cache.t_enc,
        &g_t1,
        &mut g.t1_w,
        Some(&mut g.t1_b),
    );

    g.check_finite("denoiser gradient")?;
    Ok(g)
}

impl<F: Real> NoisePredictor<F> for DenoiserParams<F> {
    fn sequence_length(&self) -> usize {
        self.config.sequence_length
    }

    fn predict(&self, x_t: &[F], t: usize, cond: &Conditioning<F>) -> Result<Vec<F>> {
        forward(self, x_t, t, cond).map(|(out, _)| out)
    }
}
