use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::EncoderConfig;

/// Tensor-name prefix shared by every frontend parameter.
pub const FRONTEND_PREFIX: &str = "frontend.";

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// in × out
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln_attn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ln_ffn: LayerNorm,
}

/// All trainable tensors. Gradients and optimizer moments reuse this type.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    /// Non-overlapping strided convolutions, flattened to `(k * C_in) × C_out`.
    pub frontend: Vec<Linear>,
    pub frontend_norm: LayerNorm,
    pub mask_embedding: Array1<f64>,
    /// heads × buckets, one table shared by every layer.
    pub rel_bias: Array2<f64>,
    pub blocks: Vec<Block>,
    pub head: Linear,
}

fn to_f32_grid(x: f64) -> f64 {
    x as f32 as f64
}

impl Linear {
    fn init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, std: f64) -> Self {
        Linear {
            weight: Array2::from_shape_fn((fan_in, fan_out), |_| {
                to_f32_grid(std * rng.sample::<f64, _>(StandardNormal))
            }),
            bias: Array1::zeros(fan_out),
        }
    }

    fn zeros_like(&self) -> Self {
        Linear {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }
}

impl LayerNorm {
    fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }

    fn zeros_like(&self) -> Self {
        LayerNorm {
            gain: Array1::zeros(self.gain.len()),
            bias: Array1::zeros(self.bias.len()),
        }
    }
}

impl Parameters {
    /// Random initialization; every value lies on the f32 grid so checkpoints
    /// round-trip exactly.
    pub fn init(config: &EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_dim;
        let mut frontend = Vec::new();
        let mut channels = config.input_dim;
        for stride in config.frontend_strides() {
            let fan_in = stride * channels;
            frontend.push(Linear::init(&mut rng, fan_in, h, (1.0 / fan_in as f64).sqrt()));
            channels = h;
        }
        let mask_embedding = Array1::from_shape_fn(h, |_| to_f32_grid(rng.gen::<f64>()));
        let rel_bias = Array2::zeros((config.num_heads, config.num_buckets));
        let std_h = (1.0 / h as f64).sqrt();
        let std_f = (1.0 / config.ffn_dim as f64).sqrt();
        let blocks = (0..config.num_layers)
            .map(|_| Block {
                query: Linear::init(&mut rng, h, h, std_h),
                key: Linear::init(&mut rng, h, h, std_h),
                value: Linear::init(&mut rng, h, h, std_h),
                out: Linear::init(&mut rng, h, h, std_h),
                ln_attn: LayerNorm::new(h),
                ffn_in: Linear::init(&mut rng, h, config.ffn_dim, std_h),
                ffn_out: Linear::init(&mut rng, config.ffn_dim, h, std_f),
                ln_ffn: LayerNorm::new(h),
            })
            .collect();
        let head = Linear::init(&mut rng, h, config.vocab_size, 0.02);
        Parameters {
            frontend,
            frontend_norm: LayerNorm::new(h),
            mask_embedding,
            rel_bias,
            blocks,
            head,
        }
    }

    pub(crate) fn reset_head(&mut self, config: &EncoderConfig, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4ead);
        self.head = Linear::init(&mut rng, config.hidden_dim, config.vocab_size, 0.02);
    }

    pub fn zeros_like(&self) -> Self {
        Parameters {
            frontend: self.frontend.iter().map(Linear::zeros_like).collect(),
            frontend_norm: self.frontend_norm.zeros_like(),
            mask_embedding: Array1::zeros(self.mask_embedding.len()),
            rel_bias: Array2::zeros(self.rel_bias.raw_dim()),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    query: b.query.zeros_like(),
                    key: b.key.zeros_like(),
                    value: b.value.zeros_like(),
                    out: b.out.zeros_like(),
                    ln_attn: b.ln_attn.zeros_like(),
                    ffn_in: b.ffn_in.zeros_like(),
                    ffn_out: b.ffn_out.zeros_like(),
                    ln_ffn: b.ln_ffn.zeros_like(),
                })
                .collect(),
            head: self.head.zeros_like(),
        }
    }

    /// Visits every tensor as `(name, dims, values)` in canonical order.
    pub fn for_each(&self, mut f: impl FnMut(&str, &[usize], &[f64])) {
        let lin = |name: &str, l: &Linear, f: &mut dyn FnMut(&str, &[usize], &[f64])| {
            f(
                &format!("{name}.weight"),
                l.weight.shape(),
                l.weight.as_slice().expect("standard layout"),
            );
            f(
                &format!("{name}.bias"),
                l.bias.shape(),
                l.bias.as_slice().expect("standard layout"),
            );
        };
        let ln = |name: &str, l: &LayerNorm, f: &mut dyn FnMut(&str, &[usize], &[f64])| {
            f(&format!("{name}.gain"), l.gain.shape(), l.gain.as_slice().unwrap());
            f(&format!("{name}.bias"), l.bias.shape(), l.bias.as_slice().unwrap());
        };
        for (i, conv) in self.frontend.iter().enumerate() {
            lin(&format!("frontend.conv{i}"), conv, &mut f);
        }
        ln("frontend.norm", &self.frontend_norm, &mut f);
        f(
            "mask_embedding",
            self.mask_embedding.shape(),
            self.mask_embedding.as_slice().unwrap(),
        );
        f(
            "rel_bias.table",
            self.rel_bias.shape(),
            self.rel_bias.as_slice().unwrap(),
        );
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("layers.{i}");
            lin(&format!("{p}.attn.query"), &b.query, &mut f);
            lin(&format!("{p}.attn.key"), &b.key, &mut f);
            lin(&format!("{p}.attn.value"), &b.value, &mut f);
            lin(&format!("{p}.attn.out"), &b.out, &mut f);
            ln(&format!("{p}.attn_norm"), &b.ln_attn, &mut f);
            lin(&format!("{p}.ffn.in"), &b.ffn_in, &mut f);
            lin(&format!("{p}.ffn.out"), &b.ffn_out, &mut f);
            ln(&format!("{p}.ffn_norm"), &b.ln_ffn, &mut f);
        }
        lin("head", &self.head, &mut f);
    }

    /// Mutable counterpart of [`Parameters::for_each`], same order and names.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        let lin = |name: &str, l: &mut Linear, f: &mut dyn FnMut(&str, &mut [f64])| {
            f(&format!("{name}.weight"), l.weight.as_slice_mut().unwrap());
            f(&format!("{name}.bias"), l.bias.as_slice_mut().unwrap());
        };
        let ln = |name: &str, l: &mut LayerNorm, f: &mut dyn FnMut(&str, &mut [f64])| {
            f(&format!("{name}.gain"), l.gain.as_slice_mut().unwrap());
            f(&format!("{name}.bias"), l.bias.as_slice_mut().unwrap());
        };
        for (i, conv) in self.frontend.iter_mut().enumerate() {
            lin(&format!("frontend.conv{i}"), conv, &mut f);
        }
        ln("frontend.norm", &mut self.frontend_norm, &mut f);
        f("mask_embedding", self.mask_embedding.as_slice_mut().unwrap());
        f("rel_bias.table", self.rel_bias.as_slice_mut().unwrap());
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("layers.{i}");
            lin(&format!("{p}.attn.query"), &mut b.query, &mut f);
            lin(&format!("{p}.attn.key"), &mut b.key, &mut f);
            lin(&format!("{p}.attn.value"), &mut b.value, &mut f);
            lin(&format!("{p}.attn.out"), &mut b.out, &mut f);
            ln(&format!("{p}.attn_norm"), &mut b.ln_attn, &mut f);
            lin(&format!("{p}.ffn.in"), &mut b.ffn_in, &mut f);
            lin(&format!("{p}.ffn.out"), &mut b.ffn_out, &mut f);
            ln(&format!("{p}.ffn_norm"), &mut b.ln_ffn, &mut f);
        }
        lin("head", &mut self.head, &mut f);
    }

    pub fn num_values(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, _, v| n += v.len());
        n
    }

    /// Flat copy in canonical order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        self.for_each(|_, _, v| out.extend_from_slice(v));
        out
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Parameters) {
        let flat = other.to_flat();
        let mut offset = 0;
        self.for_each_mut(|_, v| {
            for (a, b) in v.iter_mut().zip(&flat[offset..]) {
                *a += b;
            }
            offset += v.len();
        });
    }

    pub fn scale(&mut self, factor: f64) {
        self.for_each_mut(|_, v| v.iter_mut().for_each(|x| *x *= factor));
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, _, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }

    pub fn round_to_f32(&mut self) {
        self.for_each_mut(|_, v| v.iter_mut().for_each(|x| *x = to_f32_grid(*x)));
    }

    /// SHA-256 over names, shapes and f64 bit patterns.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        self.for_each(|name, dims, v| {
            h.update(name.as_bytes());
            for d in dims {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v {
                h.update(x.to_bits().to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }

    /// Hash restricted to tensors whose name starts with `prefix`.
    pub fn hash_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        self.for_each(|name, _, v| {
            if name.starts_with(prefix) {
                h.update(name.as_bytes());
                for x in v {
                    h.update(x.to_bits().to_le_bytes());
                }
            }
        });
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_and_order_agree() {
        let cfg = EncoderConfig::default();
        let mut p = Parameters::init(&cfg, 1);
        let mut a = Vec::new();
        p.for_each(|n, _, v| a.push((n.to_string(), v.len())));
        let mut b = Vec::new();
        p.for_each_mut(|n, v| b.push((n.to_string(), v.len())));
        assert_eq!(a, b);
        assert!(a.iter().any(|(n, _)| n == "rel_bias.table"));
        assert_eq!(a.iter().filter(|(n, _)| n.contains("rel_bias")).count(), 1);
    }

    #[test]
    fn init_is_on_f32_grid_and_deterministic() {
        let cfg = EncoderConfig::default();
        let p = Parameters::init(&cfg, 7);
        assert_eq!(p, Parameters::init(&cfg, 7));
        let mut q = p.clone();
        q.round_to_f32();
        assert_eq!(p, q);
    }
}
