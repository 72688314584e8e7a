//! Forward and backward passes of the encoder.
//!
//! Layout: strided non-overlapping convolutions (each followed by GELU), a
//! LayerNorm, mask-embedding substitution, post-LN transformer blocks whose
//! attention logits carry a bias looked up from the shared relative-position
//! table, and a linear output projection.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::bucket::bucket_table;
use super::mask::MaskSpec;
use super::params::{LayerNorm, Linear, Parameters};
use super::{EncoderModel, NnError};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions<'a> {
    pub mask: Option<&'a MaskSpec>,
    /// Enables dropout (at the configured rate) with masks drawn from this seed.
    pub dropout_seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `num_layers + 1` states of shape T'×H; entry 0 is the frontend output
    /// after mask substitution.
    pub hidden: Vec<Array2<f64>>,
    /// T'×V.
    pub logits: Array2<f64>,
}

impl EncoderOutput {
    pub fn num_frames(&self) -> usize {
        self.logits.nrows()
    }
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    input_rows: usize,
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    attn_drop: Option<Array2<f64>>,
    ln_attn: LnCache,
    h1: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
    ffn_drop: Option<Array2<f64>>,
    ln_ffn: LnCache,
}

/// Activations retained for [`EncoderModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    convs: Vec<ConvCache>,
    frontend_ln: LnCache,
    masked: Vec<bool>,
    buckets: Vec<usize>,
    blocks: Vec<BlockCache>,
    last_hidden: Array2<f64>,
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

fn affine(x: &ArrayView2<f64>, l: &Linear) -> Array2<f64> {
    let mut y = x.dot(&l.weight);
    y += &l.bias;
    y
}

/// Accumulates weight and bias gradients of `y = x W + b` and returns dx.
fn affine_backward(x: &Array2<f64>, dy: &Array2<f64>, l: &Linear, g: &mut Linear) -> Array2<f64> {
    g.weight += &x.t().dot(dy);
    g.bias += &dy.sum_axis(Axis(0));
    dy.dot(&l.weight.t())
}

fn layer_norm(x: &Array2<f64>, p: &LayerNorm) -> (Array2<f64>, LnCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        *is = 1.0 / (var + LN_EPS).sqrt();
        let s = *is;
        row.mapv_inplace(|v| v * s);
    }
    let mut y = &xhat * &p.gain;
    y += &p.bias;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(dy: &Array2<f64>, c: &LnCache, p: &LayerNorm, g: &mut LayerNorm) -> Array2<f64> {
    g.gain += &(dy * &c.xhat).sum_axis(Axis(0));
    g.bias += &dy.sum_axis(Axis(0));
    let n = dy.ncols() as f64;
    let dxhat = dy * &p.gain;
    let mut dx = Array2::zeros(dy.raw_dim());
    for r in 0..dy.nrows() {
        let dxh = dxhat.row(r);
        let xh = c.xhat.row(r);
        let mean_d = dxh.sum() / n;
        let mean_dx = dxh.dot(&xh) / n;
        let is = c.inv_std[r];
        for (j, out) in dx.row_mut(r).iter_mut().enumerate() {
            *out = is * (dxh[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

fn dropout_mask<R: Rng>(rng: &mut R, shape: (usize, usize), rate: f64) -> Array2<f64> {
    let keep = 1.0 - rate;
    Array2::from_shape_fn(shape, |_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl EncoderModel {
    /// Runs the encoder on T×D features.
    pub fn forward(
        &self,
        features: &Array2<f64>,
        opts: &ForwardOptions<'_>,
    ) -> Result<(EncoderOutput, ForwardCache), NnError> {
        let cfg = &self.config;
        let p = &self.params;
        if features.ncols() != cfg.input_dim {
            return Err(NnError::ShapeMismatch(format!(
                "features have dim {}, encoder expects {}",
                features.ncols(),
                cfg.input_dim
            )));
        }
        let t_out = cfg.output_frames(features.nrows());
        let mut masked = vec![false; t_out];
        if let Some(mask) = opts.mask {
            for &i in &mask.masked {
                if i >= t_out {
                    return Err(NnError::ShapeMismatch(format!(
                        "mask index {i} out of range for {t_out} encoder frames"
                    )));
                }
                masked[i] = true;
            }
        }

        // Frontend.
        let mut x = features.clone();
        let mut convs = Vec::with_capacity(p.frontend.len());
        for (conv, stride) in p.frontend.iter().zip(cfg.frontend_strides()) {
            let rows = x.nrows() / stride;
            let input_rows = x.nrows();
            let input = x
                .slice(s![..rows * stride, ..])
                .to_owned()
                .into_shape_with_order((rows, stride * x.ncols()))
                .expect("contiguous reshape");
            let pre = affine(&input.view(), conv);
            x = pre.mapv(gelu);
            convs.push(ConvCache {
                input,
                pre,
                input_rows,
            });
        }
        let (front, frontend_ln) = layer_norm(&x, &p.frontend_norm);
        debug_assert_eq!(front.nrows(), t_out);

        let mut h = front;
        for (i, &m) in masked.iter().enumerate() {
            if m {
                h.row_mut(i).assign(&p.mask_embedding);
            }
        }

        let buckets = bucket_table(t_out, cfg.num_buckets, cfg.max_distance);
        let mut rng = opts
            .dropout_seed
            .filter(|_| cfg.dropout > 0.0)
            .map(ChaCha8Rng::seed_from_u64);

        let mut hidden = Vec::with_capacity(cfg.num_layers + 1);
        hidden.push(h.clone());
        let mut blocks = Vec::with_capacity(cfg.num_layers);
        for block in &p.blocks {
            let (next, cache) = self.block_forward(block, h, &buckets, rng.as_mut());
            hidden.push(next.clone());
            blocks.push(cache);
            h = next;
        }

        let logits = affine(&h.view(), &p.head);
        Ok((
            EncoderOutput { hidden, logits },
            ForwardCache {
                convs,
                frontend_ln,
                masked,
                buckets,
                blocks,
                last_hidden: h,
            },
        ))
    }

    fn block_forward(
        &self,
        b: &super::params::Block,
        input: Array2<f64>,
        buckets: &[usize],
        rng: Option<&mut ChaCha8Rng>,
    ) -> (Array2<f64>, BlockCache) {
        let cfg = &self.config;
        let t = input.nrows();
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = affine(&input.view(), &b.query);
        let k = affine(&input.view(), &b.key);
        let v = affine(&input.view(), &b.value);

        let mut ctx = Array2::zeros((t, cfg.hidden_dim));
        let mut attn = Vec::with_capacity(cfg.num_heads);
        for head in 0..cfg.num_heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let mut scores = qh.dot(&kh.t());
            let bias = self.params.rel_bias.row(head);
            for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                for (j, sc) in row.iter_mut().enumerate() {
                    *sc = *sc * scale + bias[buckets[j + t - 1 - i]];
                }
                softmax_in_place(row.as_slice_mut().expect("row-major"));
            }
            ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            attn.push(scores);
        }

        let mut rng = rng;
        let mut a = affine(&ctx.view(), &b.out);
        let attn_drop = rng
            .as_deref_mut()
            .map(|r| dropout_mask(r, a.dim(), cfg.dropout));
        if let Some(m) = &attn_drop {
            a *= m;
        }
        a += &input;
        let (h1, ln_attn) = layer_norm(&a, &b.ln_attn);

        let ffn_pre = affine(&h1.view(), &b.ffn_in);
        let ffn_act = ffn_pre.mapv(gelu);
        let mut f = affine(&ffn_act.view(), &b.ffn_out);
        let ffn_drop = rng
            .as_deref_mut()
            .map(|r| dropout_mask(r, f.dim(), cfg.dropout));
        if let Some(m) = &ffn_drop {
            f *= m;
        }
        f += &h1;
        let (out, ln_ffn) = layer_norm(&f, &b.ln_ffn);

        (
            out,
            BlockCache {
                input,
                q,
                k,
                v,
                attn,
                ctx,
                attn_drop,
                ln_attn,
                h1,
                ffn_pre,
                ffn_act,
                ffn_drop,
                ln_ffn,
            },
        )
    }

    /// Parameter gradients given the loss gradient with respect to the logits.
    /// Frontend gradients are skipped (left at zero) unless `frontend` is set.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Array2<f64>, frontend: bool) -> Parameters {
        let p = &self.params;
        let cfg = &self.config;
        let mut g = p.zeros_like();

        let mut dh = affine_backward(&cache.last_hidden, dlogits, &p.head, &mut g.head);

        for (li, (b, c)) in p.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let gb = &mut g.blocks[li];
            let t = c.input.nrows();
            let dh_size = cfg.head_dim();
            let scale = 1.0 / (dh_size as f64).sqrt();

            let dr2 = layer_norm_backward(&dh, &c.ln_ffn, &b.ln_ffn, &mut gb.ln_ffn);
            let mut dh1 = dr2.clone();
            let mut df = dr2;
            if let Some(m) = &c.ffn_drop {
                df *= m;
            }
            let mut dact = affine_backward(&c.ffn_act, &df, &b.ffn_out, &mut gb.ffn_out);
            Zip::from(&mut dact)
                .and(&c.ffn_pre)
                .for_each(|d, &u| *d *= gelu_grad(u));
            dh1 += &affine_backward(&c.h1, &dact, &b.ffn_in, &mut gb.ffn_in);

            let dr1 = layer_norm_backward(&dh1, &c.ln_attn, &b.ln_attn, &mut gb.ln_attn);
            let mut dinput = dr1.clone();
            let mut da = dr1;
            if let Some(m) = &c.attn_drop {
                da *= m;
            }
            let dctx = affine_backward(&c.ctx, &da, &b.out, &mut gb.out);

            let mut dq = Array2::zeros(c.q.raw_dim());
            let mut dk = Array2::zeros(c.k.raw_dim());
            let mut dv = Array2::zeros(c.v.raw_dim());
            for head in 0..cfg.num_heads {
                let cols = s![.., head * dh_size..(head + 1) * dh_size];
                let attn = &c.attn[head];
                let dctx_h = dctx.slice(cols);
                let dattn = dctx_h.dot(&c.v.slice(cols).t());
                dv.slice_mut(cols).assign(&attn.t().dot(&dctx_h));
                let mut dscores = Array2::zeros((t, t));
                for i in 0..t {
                    let arow = attn.row(i);
                    let drow = dattn.row(i);
                    let dot = arow.dot(&drow);
                    for j in 0..t {
                        let ds = arow[j] * (drow[j] - dot);
                        dscores[[i, j]] = ds;
                        g.rel_bias[[head, cache.buckets[j + t - 1 - i]]] += ds;
                    }
                }
                dq.slice_mut(cols)
                    .assign(&(dscores.dot(&c.k.slice(cols)) * scale));
                dk.slice_mut(cols)
                    .assign(&(dscores.t().dot(&c.q.slice(cols)) * scale));
            }
            let gb = &mut g.blocks[li];
            dinput += &affine_backward(&c.input, &dq, &b.query, &mut gb.query);
            dinput += &affine_backward(&c.input, &dk, &b.key, &mut gb.key);
            dinput += &affine_backward(&c.input, &dv, &b.value, &mut gb.value);
            dh = dinput;
        }

        for (i, &m) in cache.masked.iter().enumerate() {
            if m {
                g.mask_embedding += &dh.row(i);
                dh.row_mut(i).fill(0.0);
            }
        }

        if frontend {
            let mut dx = layer_norm_backward(&dh, &cache.frontend_ln, &p.frontend_norm, &mut g.frontend_norm);
            for (ci, conv) in p.frontend.iter().enumerate().rev() {
                let c = &cache.convs[ci];
                Zip::from(&mut dx)
                    .and(&c.pre)
                    .for_each(|d, &u| *d *= gelu_grad(u));
                let dinput = affine_backward(&c.input, &dx, conv, &mut g.frontend[ci]);
                if ci == 0 {
                    break;
                }
                let prev_cols = p.frontend[ci - 1].weight.ncols();
                let used = dinput
                    .into_shape_with_order((c.input.nrows() * c.input.ncols() / prev_cols, prev_cols))
                    .expect("contiguous reshape");
                let mut full = Array2::zeros((c.input_rows, prev_cols));
                full.slice_mut(s![..used.nrows(), ..]).assign(&used);
                dx = full;
            }
        }
        g
    }

    /// Convenience inference pass on f32 corpus features without masking.
    pub fn infer(&self, features: &Array2<f32>) -> Result<EncoderOutput, NnError> {
        let x = features.mapv(f64::from);
        Ok(self.forward(&x, &ForwardOptions::default())?.0)
    }

    /// Output of the frontend (before any mask substitution).
    pub fn frontend_output(&self, features: &Array2<f64>) -> Result<Array2<f64>, NnError> {
        let (out, _) = self.forward(features, &ForwardOptions::default())?;
        Ok(out.hidden.into_iter().next().expect("hidden[0] always present"))
    }
}
