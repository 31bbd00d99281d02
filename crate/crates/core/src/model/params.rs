//! Parameter containers for the decoder, with uniform flat-slice access used
//! by the optimizer, checkpointing, checksums and finite-difference probes.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use super::Scalar;
use crate::model::ModelConfig;
use crate::util::sha256_hex;

/// Layer-norm gain and bias.
#[derive(Debug, Clone)]
pub struct LnParams<S> {
    pub gamma: Array1<S>,
    pub beta: Array1<S>,
}

/// Projections for one (self- or cross-) attention block.
#[derive(Debug, Clone)]
pub struct AttnParams<S> {
    pub wq: Array2<S>,
    pub bq: Array1<S>,
    pub wk: Array2<S>,
    pub bk: Array1<S>,
    pub wv: Array2<S>,
    pub bv: Array1<S>,
    pub wo: Array2<S>,
    pub bo: Array1<S>,
}

/// Two-layer feed-forward block.
#[derive(Debug, Clone)]
pub struct FfnParams<S> {
    pub w1: Array2<S>,
    pub b1: Array1<S>,
    pub w2: Array2<S>,
    pub b2: Array1<S>,
}

#[derive(Debug, Clone)]
pub struct LayerParams<S> {
    pub ln1: LnParams<S>,
    pub attn: AttnParams<S>,
    pub ln2: LnParams<S>,
    pub cross: AttnParams<S>,
    pub ln3: LnParams<S>,
    pub ffn: FfnParams<S>,
}

/// Full parameter set of the decoder. The tensor layout is a pure function of
/// the model config.
#[derive(Debug, Clone)]
pub struct Params<S> {
    pub tok_emb: Array2<S>,
    pub pos_emb: Array2<S>,
    pub img_w: Array2<S>,
    pub img_b: Array1<S>,
    pub layers: Vec<LayerParams<S>>,
    pub ln_f: LnParams<S>,
    pub out_w: Array2<S>,
    pub out_b: Array1<S>,
}

/// Weight-init bound: truncated normal, std 0.02, clipped at two standard
/// deviations.
pub const INIT_STD: f64 = 0.02;
pub const INIT_BOUND: f64 = 2.0 * INIT_STD;

fn trunc_normal<S: Scalar>(rng: &mut ChaCha20Rng) -> S {
    loop {
        let x: f64 = rng.sample::<f64, _>(StandardNormal) * INIT_STD;
        if x.abs() <= INIT_BOUND {
            return S::from(x).unwrap();
        }
    }
}

fn init_matrix<S: Scalar>(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Array2<S> {
    Array2::from_shape_simple_fn((rows, cols), || trunc_normal(rng))
}

fn zeros1<S: Scalar>(n: usize) -> Array1<S> {
    Array1::from_elem(n, S::zero())
}

fn ln_init<S: Scalar>(d: usize) -> LnParams<S> {
    LnParams { gamma: Array1::from_elem(d, S::one()), beta: zeros1(d) }
}

fn attn_init<S: Scalar>(rng: &mut ChaCha20Rng, d: usize) -> AttnParams<S> {
    AttnParams {
        wq: init_matrix(rng, d, d),
        bq: zeros1(d),
        wk: init_matrix(rng, d, d),
        bk: zeros1(d),
        wv: init_matrix(rng, d, d),
        bv: zeros1(d),
        wo: init_matrix(rng, d, d),
        bo: zeros1(d),
    }
}

impl<S: Scalar> Params<S> {
    /// Seeded initialization. The draw order is fixed by the field order, so
    /// two calls with the same config produce identical parameters.
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha20Rng) -> Self {
        let d = cfg.d_model;
        let hidden = 4 * d;
        let layers = (0..cfg.num_layers)
            .map(|_| LayerParams {
                ln1: ln_init(d),
                attn: attn_init(rng, d),
                ln2: ln_init(d),
                cross: attn_init(rng, d),
                ln3: ln_init(d),
                ffn: FfnParams {
                    w1: init_matrix(rng, d, hidden),
                    b1: zeros1(hidden),
                    w2: init_matrix(rng, hidden, d),
                    b2: zeros1(d),
                },
            })
            .collect();
        Params {
            tok_emb: init_matrix(rng, cfg.vocab_size, d),
            pos_emb: init_matrix(rng, cfg.max_len, d),
            img_w: init_matrix(rng, cfg.feature_dim, d),
            img_b: zeros1(d),
            layers,
            ln_f: ln_init(d),
            out_w: init_matrix(rng, d, cfg.vocab_size),
            out_b: zeros1(cfg.vocab_size),
        }
    }

    /// Zero-valued parameters with the same layout (gradient accumulators).
    pub fn zeros_like(&self) -> Self {
        fn z1<S: Scalar>(a: &Array1<S>) -> Array1<S> {
            Array1::from_elem(a.len(), S::zero())
        }
        fn z2<S: Scalar>(a: &Array2<S>) -> Array2<S> {
            Array2::from_elem(a.dim(), S::zero())
        }
        fn zln<S: Scalar>(l: &LnParams<S>) -> LnParams<S> {
            LnParams { gamma: z1(&l.gamma), beta: z1(&l.beta) }
        }
        fn zattn<S: Scalar>(a: &AttnParams<S>) -> AttnParams<S> {
            AttnParams {
                wq: z2(&a.wq),
                bq: z1(&a.bq),
                wk: z2(&a.wk),
                bk: z1(&a.bk),
                wv: z2(&a.wv),
                bv: z1(&a.bv),
                wo: z2(&a.wo),
                bo: z1(&a.bo),
            }
        }
        Params {
            tok_emb: z2(&self.tok_emb),
            pos_emb: z2(&self.pos_emb),
            img_w: z2(&self.img_w),
            img_b: z1(&self.img_b),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1: zln(&l.ln1),
                    attn: zattn(&l.attn),
                    ln2: zln(&l.ln2),
                    cross: zattn(&l.cross),
                    ln3: zln(&l.ln3),
                    ffn: FfnParams {
                        w1: z2(&l.ffn.w1),
                        b1: z1(&l.ffn.b1),
                        w2: z2(&l.ffn.w2),
                        b2: z1(&l.ffn.b2),
                    },
                })
                .collect(),
            ln_f: zln(&self.ln_f),
            out_w: z2(&self.out_w),
            out_b: z1(&self.out_b),
        }
    }

    /// Immutable flat views over every tensor plus (name, shape) metadata, in
    /// the same fixed order as [`named_slices_mut`](Self::named_slices_mut).
    #[allow(clippy::type_complexity)]
    pub fn named_slices(&self) -> (Vec<&[S]>, Vec<(String, Vec<usize>)>) {
        let mut slices: Vec<&[S]> = Vec::new();
        let mut meta: Vec<(String, Vec<usize>)> = Vec::new();

        macro_rules! push1 {
            ($name:expr, $arr:expr) => {{
                meta.push(($name, vec![$arr.len()]));
                slices.push($arr.as_slice().expect("standard layout"));
            }};
        }
        macro_rules! push2 {
            ($name:expr, $arr:expr) => {{
                meta.push(($name, vec![$arr.nrows(), $arr.ncols()]));
                slices.push($arr.as_slice().expect("standard layout"));
            }};
        }

        macro_rules! push_attn {
            ($i:expr, $tag:expr, $blk:expr) => {{
                let AttnParams { wq, bq, wk, bk, wv, bv, wo, bo } = $blk;
                push2!(format!("layers.{}.{}.wq", $i, $tag), wq);
                push1!(format!("layers.{}.{}.bq", $i, $tag), bq);
                push2!(format!("layers.{}.{}.wk", $i, $tag), wk);
                push1!(format!("layers.{}.{}.bk", $i, $tag), bk);
                push2!(format!("layers.{}.{}.wv", $i, $tag), wv);
                push1!(format!("layers.{}.{}.bv", $i, $tag), bv);
                push2!(format!("layers.{}.{}.wo", $i, $tag), wo);
                push1!(format!("layers.{}.{}.bo", $i, $tag), bo);
            }};
        }

        let Params { tok_emb, pos_emb, img_w, img_b, layers, ln_f, out_w, out_b } = self;
        push2!("tok_emb".to_string(), tok_emb);
        push2!("pos_emb".to_string(), pos_emb);
        push2!("img_w".to_string(), img_w);
        push1!("img_b".to_string(), img_b);
        for (i, layer) in layers.iter().enumerate() {
            let LayerParams { ln1, attn, ln2, cross, ln3, ffn } = layer;
            push1!(format!("layers.{i}.ln1.gamma"), ln1.gamma);
            push1!(format!("layers.{i}.ln1.beta"), ln1.beta);
            push_attn!(i, "attn", attn);
            push1!(format!("layers.{i}.ln2.gamma"), ln2.gamma);
            push1!(format!("layers.{i}.ln2.beta"), ln2.beta);
            push_attn!(i, "cross", cross);
            push1!(format!("layers.{i}.ln3.gamma"), ln3.gamma);
            push1!(format!("layers.{i}.ln3.beta"), ln3.beta);
            push2!(format!("layers.{i}.ffn.w1"), ffn.w1);
            push1!(format!("layers.{i}.ffn.b1"), ffn.b1);
            push2!(format!("layers.{i}.ffn.w2"), ffn.w2);
            push1!(format!("layers.{i}.ffn.b2"), ffn.b2);
        }
        push1!("ln_f.gamma".to_string(), ln_f.gamma);
        push1!("ln_f.beta".to_string(), ln_f.beta);
        push2!("out_w".to_string(), out_w);
        push1!("out_b".to_string(), out_b);

        (slices, meta)
    }

    /// Stable names and shapes of every tensor, in a fixed order.
    pub fn named_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.named_slices().1
    }

    /// Mutable flat views over every tensor plus (name, len, shape) metadata,
    /// in the same fixed order as all other accessors.
    #[allow(clippy::type_complexity)]
    pub fn named_slices_mut(&mut self) -> (Vec<&mut [S]>, Vec<(String, usize, Vec<usize>)>) {
        let mut slices: Vec<&mut [S]> = Vec::new();
        let mut meta: Vec<(String, usize, Vec<usize>)> = Vec::new();

        macro_rules! push1 {
            ($name:expr, $arr:expr) => {{
                let shape = vec![$arr.len()];
                let s = $arr.as_slice_mut().expect("standard layout");
                meta.push(($name, s.len(), shape));
                slices.push(s);
            }};
        }
        macro_rules! push2 {
            ($name:expr, $arr:expr) => {{
                let shape = vec![$arr.nrows(), $arr.ncols()];
                let s = $arr.as_slice_mut().expect("standard layout");
                meta.push(($name, s.len(), shape));
                slices.push(s);
            }};
        }

        macro_rules! push_attn {
            ($i:expr, $tag:expr, $blk:expr) => {{
                let AttnParams { wq, bq, wk, bk, wv, bv, wo, bo } = $blk;
                push2!(format!("layers.{}.{}.wq", $i, $tag), wq);
                push1!(format!("layers.{}.{}.bq", $i, $tag), bq);
                push2!(format!("layers.{}.{}.wk", $i, $tag), wk);
                push1!(format!("layers.{}.{}.bk", $i, $tag), bk);
                push2!(format!("layers.{}.{}.wv", $i, $tag), wv);
                push1!(format!("layers.{}.{}.bv", $i, $tag), bv);
                push2!(format!("layers.{}.{}.wo", $i, $tag), wo);
                push1!(format!("layers.{}.{}.bo", $i, $tag), bo);
            }};
        }

        let Params { tok_emb, pos_emb, img_w, img_b, layers, ln_f, out_w, out_b } = self;
        push2!("tok_emb".to_string(), tok_emb);
        push2!("pos_emb".to_string(), pos_emb);
        push2!("img_w".to_string(), img_w);
        push1!("img_b".to_string(), img_b);
        for (i, layer) in layers.iter_mut().enumerate() {
            let LayerParams { ln1, attn, ln2, cross, ln3, ffn } = layer;
            push1!(format!("layers.{i}.ln1.gamma"), ln1.gamma);
            push1!(format!("layers.{i}.ln1.beta"), ln1.beta);
            push_attn!(i, "attn", attn);
            push1!(format!("layers.{i}.ln2.gamma"), ln2.gamma);
            push1!(format!("layers.{i}.ln2.beta"), ln2.beta);
            push_attn!(i, "cross", cross);
            push1!(format!("layers.{i}.ln3.gamma"), ln3.gamma);
            push1!(format!("layers.{i}.ln3.beta"), ln3.beta);
            push2!(format!("layers.{i}.ffn.w1"), ffn.w1);
            push1!(format!("layers.{i}.ffn.b1"), ffn.b1);
            push2!(format!("layers.{i}.ffn.w2"), ffn.w2);
            push1!(format!("layers.{i}.ffn.b2"), ffn.b2);
        }
        push1!("ln_f.gamma".to_string(), ln_f.gamma);
        push1!("ln_f.beta".to_string(), ln_f.beta);
        push2!("out_w".to_string(), out_w);
        push1!("out_b".to_string(), out_b);

        (slices, meta)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.named_slices().0.iter().map(|s| s.len()).sum()
    }

    /// `self += alpha * other`, elementwise over all tensors.
    pub fn axpy(&mut self, alpha: S, other: &Self) {
        let (mut dst, _) = self.named_slices_mut();
        let (src, _) = other.named_slices();
        for (d, s) in dst.iter_mut().zip(src.iter()) {
            for (dv, sv) in d.iter_mut().zip(s.iter()) {
                *dv = *dv + alpha * *sv;
            }
        }
    }

    /// Copies all values out as a flat vector (checkpointing, probes).
    pub fn to_flat(&self) -> Vec<S> {
        let (slices, _) = self.named_slices();
        let mut out = Vec::new();
        for s in slices {
            out.extend_from_slice(s);
        }
        out
    }

    /// Loads values from a flat vector produced by [`to_flat`](Self::to_flat).
    pub fn from_flat(&mut self, flat: &[S]) {
        let (slices, _) = self.named_slices_mut();
        let mut offset = 0;
        for s in slices {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        assert_eq!(offset, flat.len(), "flat length mismatch");
    }

    /// Adds `delta` to the parameter at flat index `idx` and returns the old
    /// value. Used by finite-difference gradient probes.
    pub fn nudge(&mut self, idx: usize, delta: S) -> S {
        let (slices, _) = self.named_slices_mut();
        let mut offset = 0;
        for s in slices {
            if idx < offset + s.len() {
                let old = s[idx - offset];
                s[idx - offset] = old + delta;
                return old;
            }
            offset += s.len();
        }
        panic!("parameter index {idx} out of range");
    }

    pub fn all_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    /// Content checksum over the exact bit patterns of all parameters.
    pub fn checksum(&self) -> String {
        let flat = self.to_flat();
        let mut bytes = Vec::with_capacity(flat.len() * 8);
        for v in flat {
            bytes.extend_from_slice(&v.to_f64().unwrap().to_bits().to_le_bytes());
        }
        sha256_hex(&bytes)
    }
}
