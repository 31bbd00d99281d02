//! Forward and backward passes for the decoder: token/position embeddings,
//! causal self-attention, cross-attention over image regions, GELU feed
//! forward, all with hand-written gradients.

use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::params::{AttnParams, LnParams, Params};
use super::{ModelConfig, Scalar};

const LN_EPS: f64 = 1e-5;
const NEG_INF: f64 = -1e9;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn sc<S: Scalar>(x: f64) -> S {
    S::from(x).unwrap()
}

/// Numerically stable row-wise softmax.
pub(crate) fn softmax_rows_inplace<S: Scalar>(m: &mut Array2<S>) {
    for mut row in m.rows_mut() {
        let max = row.iter().fold(S::neg_infinity(), |a, &b| if b > a { b } else { a });
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Jacobian-vector product of row-wise softmax: given the softmax output and
/// upstream gradient, returns the gradient w.r.t. the pre-softmax scores.
fn softmax_rows_backward<S: Scalar>(soft: &Array2<S>, dsoft: &Array2<S>) -> Array2<S> {
    let mut out = Array2::from_elem(soft.dim(), S::zero());
    for i in 0..soft.nrows() {
        let mut dot = S::zero();
        for j in 0..soft.ncols() {
            dot += dsoft[[i, j]] * soft[[i, j]];
        }
        for j in 0..soft.ncols() {
            out[[i, j]] = soft[[i, j]] * (dsoft[[i, j]] - dot);
        }
    }
    out
}

fn gelu<S: Scalar>(x: S) -> S {
    let c = sc::<S>(GELU_C);
    let a = sc::<S>(GELU_A);
    let half = sc::<S>(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_prime<S: Scalar>(x: S) -> S {
    let c = sc::<S>(GELU_C);
    let a = sc::<S>(GELU_A);
    let half = sc::<S>(0.5);
    let three = sc::<S>(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}

fn sum_rows<S: Scalar>(m: &Array2<S>) -> Array1<S> {
    let mut out = Array1::from_elem(m.ncols(), S::zero());
    for row in m.rows() {
        for (o, &v) in out.iter_mut().zip(row.iter()) {
            *o += v;
        }
    }
    out
}

struct LnCache<S> {
    xhat: Array2<S>,
    invstd: Array1<S>,
}

fn layer_norm<S: Scalar>(x: &Array2<S>, ln: &LnParams<S>) -> (Array2<S>, LnCache<S>) {
    let (t, d) = x.dim();
    let dn = sc::<S>(d as f64);
    let eps = sc::<S>(LN_EPS);
    let mut xhat = Array2::from_elem((t, d), S::zero());
    let mut invstd = Array1::from_elem(t, S::zero());
    let mut y = Array2::from_elem((t, d), S::zero());
    for i in 0..t {
        let row = x.row(i);
        let mu = row.iter().fold(S::zero(), |a, &b| a + b) / dn;
        let var = row.iter().fold(S::zero(), |a, &b| a + (b - mu) * (b - mu)) / dn;
        let is = S::one() / (var + eps).sqrt();
        invstd[i] = is;
        for j in 0..d {
            let xh = (x[[i, j]] - mu) * is;
            xhat[[i, j]] = xh;
            y[[i, j]] = ln.gamma[j] * xh + ln.beta[j];
        }
    }
    (y, LnCache { xhat, invstd })
}

fn layer_norm_backward<S: Scalar>(
    dy: &Array2<S>,
    cache: &LnCache<S>,
    ln: &LnParams<S>,
    grad: &mut LnParams<S>,
) -> Array2<S> {
    let (t, d) = dy.dim();
    let dn = sc::<S>(d as f64);
    let mut dx = Array2::from_elem((t, d), S::zero());
    for i in 0..t {
        let mut m1 = S::zero();
        let mut m2 = S::zero();
        for j in 0..d {
            let h = dy[[i, j]] * ln.gamma[j];
            m1 += h;
            m2 += h * cache.xhat[[i, j]];
            grad.gamma[j] += dy[[i, j]] * cache.xhat[[i, j]];
            grad.beta[j] += dy[[i, j]];
        }
        m1 = m1 / dn;
        m2 = m2 / dn;
        for j in 0..d {
            let h = dy[[i, j]] * ln.gamma[j];
            dx[[i, j]] = (h - m1 - cache.xhat[[i, j]] * m2) * cache.invstd[i];
        }
    }
    dx
}

struct AttnCache<S> {
    q_in: Array2<S>,
    kv_in: Array2<S>,
    q: Array2<S>,
    k: Array2<S>,
    v: Array2<S>,
    att: Vec<Array2<S>>,
    concat: Array2<S>,
}

/// Multi-head scaled dot-product attention. Queries come from `q_in`,
/// keys/values from `kv_in` (the same matrix for self-attention, the
/// projected image regions for cross-attention).
fn attention<S: Scalar>(
    q_in: &Array2<S>,
    kv_in: &Array2<S>,
    p: &AttnParams<S>,
    heads: usize,
    causal: bool,
) -> (Array2<S>, AttnCache<S>) {
    let d = q_in.ncols();
    let dh = d / heads;
    let scale = sc::<S>(1.0 / (dh as f64).sqrt());
    let q = q_in.dot(&p.wq) + &p.bq;
    let k = kv_in.dot(&p.wk) + &p.bk;
    let v = kv_in.dot(&p.wv) + &p.bv;
    let tq = q.nrows();
    let tk = k.nrows();
    let mut concat = Array2::from_elem((tq, d), S::zero());
    let mut att_all = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t());
        scores.mapv_inplace(|x| x * scale);
        if causal {
            let ninf = sc::<S>(NEG_INF);
            for i in 0..tq {
                for j in (i + 1)..tk {
                    scores[[i, j]] = ninf;
                }
            }
        }
        softmax_rows_inplace(&mut scores);
        let oh = scores.dot(&vh);
        concat.slice_mut(cols).assign(&oh);
        att_all.push(scores);
    }
    let out = concat.dot(&p.wo) + &p.bo;
    let cache = AttnCache {
        q_in: q_in.clone(),
        kv_in: kv_in.clone(),
        q,
        k,
        v,
        att: att_all,
        concat,
    };
    (out, cache)
}

/// Returns gradients w.r.t. the query input and the key/value input.
fn attention_backward<S: Scalar>(
    cache: &AttnCache<S>,
    p: &AttnParams<S>,
    grad: &mut AttnParams<S>,
    heads: usize,
    d_out: &Array2<S>,
) -> (Array2<S>, Array2<S>) {
    let d = cache.q.ncols();
    let dh = d / heads;
    let scale = sc::<S>(1.0 / (dh as f64).sqrt());

    let d_concat = d_out.dot(&p.wo.t());
    grad.wo.scaled_add(S::one(), &cache.concat.t().dot(d_out));
    grad.bo.scaled_add(S::one(), &sum_rows(d_out));

    let tq = cache.q.nrows();
    let tk = cache.k.nrows();
    let mut dq = Array2::from_elem((tq, d), S::zero());
    let mut dk = Array2::from_elem((tk, d), S::zero());
    let mut dv = Array2::from_elem((tk, d), S::zero());
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let att = &cache.att[h];
        let d_oh = d_concat.slice(cols).to_owned();
        let vh = cache.v.slice(cols);
        let qh = cache.q.slice(cols);
        let kh = cache.k.slice(cols);

        let datt = d_oh.dot(&vh.t());
        dv.slice_mut(cols).assign(&att.t().dot(&d_oh));
        let mut ds = softmax_rows_backward(att, &datt);
        ds.mapv_inplace(|x| x * scale);
        dq.slice_mut(cols).assign(&ds.dot(&kh));
        dk.slice_mut(cols).assign(&ds.t().dot(&qh));
    }

    grad.wq.scaled_add(S::one(), &cache.q_in.t().dot(&dq));
    grad.bq.scaled_add(S::one(), &sum_rows(&dq));
    grad.wk.scaled_add(S::one(), &cache.kv_in.t().dot(&dk));
    grad.bk.scaled_add(S::one(), &sum_rows(&dk));
    grad.wv.scaled_add(S::one(), &cache.kv_in.t().dot(&dv));
    grad.bv.scaled_add(S::one(), &sum_rows(&dv));

    let d_q_in = dq.dot(&p.wq.t());
    let d_kv_in = dk.dot(&p.wk.t()) + dv.dot(&p.wv.t());
    (d_q_in, d_kv_in)
}

struct LayerCache<S> {
    ln1: LnCache<S>,
    self_attn: AttnCache<S>,
    attn_mask: Option<Array2<S>>,
    ln2: LnCache<S>,
    cross: AttnCache<S>,
    cross_mask: Option<Array2<S>>,
    ln3: LnCache<S>,
    a3: Array2<S>,
    ffn_pre: Array2<S>,
    ffn_act: Array2<S>,
    ffn_mask: Option<Array2<S>>,
}

/// Activation cache for one teacher-forced pass, consumed by
/// [`backward`]. Holds everything the gradient computation needs.
pub struct Cache<S> {
    tokens: Vec<usize>,
    feat: Array2<S>,
    emb_mask: Option<Array2<S>>,
    layers: Vec<LayerCache<S>>,
    ln_f: LnCache<S>,
    af: Array2<S>,
}

/// Applies inverted dropout in place, returning the mask, or `None` when the
/// rate is zero or no RNG was supplied (evaluation mode).
fn dropout<S: Scalar>(
    x: &mut Array2<S>,
    rate: f64,
    rng: &mut Option<&mut ChaCha20Rng>,
) -> Option<Array2<S>> {
    let rng = rng.as_mut()?;
    if rate <= 0.0 {
        return None;
    }
    let keep = sc::<S>(1.0 / (1.0 - rate));
    let mask = Array2::from_shape_simple_fn(x.dim(), || {
        if rng.random::<f64>() < rate {
            S::zero()
        } else {
            keep
        }
    });
    *x *= &mask;
    Some(mask)
}

/// Teacher-forced forward pass. Row `t` of the returned logits scores the
/// token at position `t + 1` conditioned on tokens `0..=t` and the image.
pub(crate) fn forward<S: Scalar>(
    cfg: &ModelConfig,
    params: &Params<S>,
    feat: &Array2<S>,
    tokens: &[usize],
    mut dropout_rng: Option<&mut ChaCha20Rng>,
) -> (Array2<S>, Cache<S>) {
    let t_len = tokens.len();
    let d = cfg.d_model;

    let mut x = Array2::from_elem((t_len, d), S::zero());
    for (i, &tok) in tokens.iter().enumerate() {
        for j in 0..d {
            x[[i, j]] = params.tok_emb[[tok, j]] + params.pos_emb[[i, j]];
        }
    }
    let emb_mask = dropout(&mut x, cfg.dropout, &mut dropout_rng);

    let g = feat.dot(&params.img_w) + &params.img_b;

    let mut layer_caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (a1, ln1) = layer_norm(&x, &layer.ln1);
        let (mut attn_out, self_attn) = attention(&a1, &a1, &layer.attn, cfg.num_heads, true);
        let attn_mask = dropout(&mut attn_out, cfg.dropout, &mut dropout_rng);
        x += &attn_out;

        let (a2, ln2) = layer_norm(&x, &layer.ln2);
        let (mut cross_out, cross) = attention(&a2, &g, &layer.cross, cfg.num_heads, false);
        let cross_mask = dropout(&mut cross_out, cfg.dropout, &mut dropout_rng);
        x += &cross_out;

        let (a3, ln3) = layer_norm(&x, &layer.ln3);
        let ffn_pre = a3.dot(&layer.ffn.w1) + &layer.ffn.b1;
        let ffn_act = ffn_pre.mapv(gelu);
        let mut ffn_out = ffn_act.dot(&layer.ffn.w2) + &layer.ffn.b2;
        let ffn_mask = dropout(&mut ffn_out, cfg.dropout, &mut dropout_rng);
        x += &ffn_out;

        layer_caches.push(LayerCache {
            ln1,
            self_attn,
            attn_mask,
            ln2,
            cross,
            cross_mask,
            ln3,
            a3,
            ffn_pre,
            ffn_act,
            ffn_mask,
        });
    }

    let (af, ln_f) = layer_norm(&x, &params.ln_f);
    let logits = af.dot(&params.out_w) + &params.out_b;

    let cache = Cache {
        tokens: tokens.to_vec(),
        feat: feat.clone(),
        emb_mask,
        layers: layer_caches,
        ln_f,
        af,
    };
    (logits, cache)
}

/// Accumulates parameter gradients for one sample into `grads`, given the
/// upstream gradient w.r.t. the logits.
pub(crate) fn backward<S: Scalar>(
    cfg: &ModelConfig,
    params: &Params<S>,
    cache: &Cache<S>,
    dlogits: &Array2<S>,
    grads: &mut Params<S>,
) {
    let heads = cfg.num_heads;

    grads.out_w.scaled_add(S::one(), &cache.af.t().dot(dlogits));
    grads.out_b.scaled_add(S::one(), &sum_rows(dlogits));
    let d_af = dlogits.dot(&params.out_w.t());
    let mut dx = layer_norm_backward(&d_af, &cache.ln_f, &params.ln_f, &mut grads.ln_f);

    // Keys/values of every cross-attention block read the projected image, so
    // its gradient accumulates across layers.
    let mut dg = Array2::from_elem((cache.feat.nrows(), cfg.d_model), S::zero());

    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let lc = &cache.layers[li];
        let gl = &mut grads.layers[li];
        // ffn branch
        let mut d_ffn_out = dx.clone();
        if let Some(m) = &lc.ffn_mask {
            d_ffn_out *= m;
        }
        gl.ffn.w2.scaled_add(S::one(), &lc.ffn_act.t().dot(&d_ffn_out));
        gl.ffn.b2.scaled_add(S::one(), &sum_rows(&d_ffn_out));
        let mut d_pre = d_ffn_out.dot(&layer.ffn.w2.t());
        d_pre.zip_mut_with(&lc.ffn_pre, |dp, &pre| *dp = *dp * gelu_prime(pre));
        gl.ffn.w1.scaled_add(S::one(), &lc.a3.t().dot(&d_pre));
        gl.ffn.b1.scaled_add(S::one(), &sum_rows(&d_pre));
        let d_a3 = d_pre.dot(&layer.ffn.w1.t());
        dx += &layer_norm_backward(&d_a3, &lc.ln3, &layer.ln3, &mut gl.ln3);

        // cross-attention branch
        let mut d_cross_out = dx.clone();
        if let Some(m) = &lc.cross_mask {
            d_cross_out *= m;
        }
        let (d_a2, d_g_layer) =
            attention_backward(&lc.cross, &layer.cross, &mut gl.cross, heads, &d_cross_out);
        dg += &d_g_layer;
        dx += &layer_norm_backward(&d_a2, &lc.ln2, &layer.ln2, &mut gl.ln2);

        // self-attention branch
        let mut d_attn_out = dx.clone();
        if let Some(m) = &lc.attn_mask {
            d_attn_out *= m;
        }
        let (d_q_in, d_kv_in) =
            attention_backward(&lc.self_attn, &layer.attn, &mut gl.attn, heads, &d_attn_out);
        let d_a1 = d_q_in + d_kv_in;
        dx += &layer_norm_backward(&d_a1, &lc.ln1, &layer.ln1, &mut gl.ln1);
    }

    if let Some(m) = &cache.emb_mask {
        dx *= m;
    }
    for (i, &tok) in cache.tokens.iter().enumerate() {
        for j in 0..cfg.d_model {
            grads.tok_emb[[tok, j]] += dx[[i, j]];
            grads.pos_emb[[i, j]] += dx[[i, j]];
        }
    }

    grads.img_w.scaled_add(S::one(), &cache.feat.t().dot(&dg));
    grads.img_b.scaled_add(S::one(), &sum_rows(&dg));
}
