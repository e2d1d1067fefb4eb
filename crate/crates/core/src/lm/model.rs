use rand::Rng;
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64Mcg;

use super::layout::{LayerIdx, Layout};
use super::scalar::Scalar;
use super::ModelConfig;
use crate::corpusgen::rng::stream_with;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const INIT_SALT: u64 = 0x1417_0000;

/// Parameters of a pre-norm GPT-style decoder with tied embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Vec<T>,
}

/// A padded batch of next-token prediction rows. `ids[r * len + t]` predicts
/// `targets[r * len + t]`; positions with `mask == false` are padding.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
    pub rows: usize,
    pub len: usize,
}

impl Batch {
    /// Each sequence is a whole sentence including BOS and EOS; it yields
    /// `seq.len() - 1` prediction positions.
    pub fn from_sequences(seqs: &[&[u32]], pad: u32) -> Self {
        let rows = seqs.len();
        let len = seqs
            .iter()
            .map(|s| s.len().saturating_sub(1))
            .max()
            .unwrap_or(0);
        let mut ids = vec![pad; rows * len];
        let mut targets = vec![pad; rows * len];
        let mut mask = vec![false; rows * len];
        for (r, s) in seqs.iter().enumerate() {
            for t in 0..s.len().saturating_sub(1) {
                ids[r * len + t] = s[t];
                targets[r * len + t] = s[t + 1];
                mask[r * len + t] = true;
            }
        }
        Batch {
            ids,
            targets,
            mask,
            rows,
            len,
        }
    }

    pub fn n_targets(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Default)]
pub struct LayerCache<T> {
    pub(crate) x_in: Vec<T>,
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    h1: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    drop_a: Option<Vec<T>>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    h2: Vec<T>,
    fc_pre: Vec<T>,
    fc_tanh: Vec<T>,
    fc_act: Vec<T>,
    drop_m: Option<Vec<T>>,
}

/// Activations retained from a forward pass.
#[derive(Debug)]
pub struct Cache<T> {
    pub(crate) rows: usize,
    pub(crate) len: usize,
    pub(crate) ids: Vec<u32>,
    pub(crate) layers: Vec<LayerCache<T>>,
    drop_e: Option<Vec<T>>,
    pub(crate) x_final: Vec<T>,
    xhatf: Vec<T>,
    rstdf: Vec<T>,
    hf: Vec<T>,
    /// Log-softmax over the vocabulary, `rows * len` × `vocab`.
    pub(crate) logp: Vec<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![T::zero(); layout.total];
        let mut rng = stream_with(seed, INIT_SALT);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let resid_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        for spec in &layout.tensors {
            let name = spec.name.as_str();
            let fill: Option<f64> = if name.ends_with(".g") {
                Some(1.0)
            } else if spec.shape.len() == 1 {
                Some(0.0)
            } else {
                None
            };
            let scale = if name.ends_with("w_o") || name.ends_with("w_proj") {
                resid_scale
            } else {
                1.0
            };
            for p in &mut params[spec.range()] {
                *p = T::from_f64(fill.unwrap_or_else(|| normal.sample(&mut rng) * scale));
            }
        }
        Ok(Model {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Model {
            config,
            layout,
            params,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|p| U::from_f64(p.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn tensor(&self, idx: usize) -> &[T] {
        &self.params[self.layout.range(idx)]
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn check_ids(&self, ids: &[u32], len: usize) -> Result<()> {
        if len > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len,
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = ids
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(Error::TokenOutOfRange {
                id: id as usize,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Runs the network over `rows` sequences of `len` tokens. Dropout is
    /// applied only when an RNG is supplied.
    pub(crate) fn run(
        &self,
        ids: &[u32],
        rows: usize,
        len: usize,
        mut dropout_rng: Option<&mut Pcg64Mcg>,
    ) -> Result<Cache<T>> {
        assert_eq!(ids.len(), rows * len);
        self.check_ids(ids, len)?;
        let cfg = &self.config;
        let d = cfg.d_model;
        let n = rows * len;
        let p = &self.params;
        let lay = &self.layout;
        let drop_p = if dropout_rng.is_some() {
            cfg.dropout
        } else {
            0.0
        };

        let wte = &p[lay.range(lay.wte)];
        let wpe = &p[lay.range(lay.wpe)];
        let mut x = vec![T::zero(); n * d];
        for (i, &id) in ids.iter().enumerate() {
            let t = i % len;
            let e = &wte[id as usize * d..(id as usize + 1) * d];
            let pe = &wpe[t * d..(t + 1) * d];
            for ((o, &a), &b) in x[i * d..(i + 1) * d].iter_mut().zip(e).zip(pe) {
                *o = a + b;
            }
        }
        let drop_e = dropout(&mut x, drop_p, dropout_rng.as_deref_mut());

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for li in &lay.layers {
            let (c, x_out) =
                self.block_forward(li, x, rows, len, drop_p, dropout_rng.as_deref_mut());
            layers.push(c);
            x = x_out;
        }

        let (xhatf, rstdf, hf) =
            layernorm(&x, &p[lay.range(lay.lnf_g)], &p[lay.range(lay.lnf_b)], d);
        let v = cfg.vocab_size;
        let mut logp = vec![T::zero(); n * v];
        T::gemm(n, d, v, &hf, false, wte, true, &mut logp, T::zero());
        for row in logp.chunks_mut(v) {
            log_softmax_in_place(row);
        }
        Ok(Cache {
            rows,
            len,
            ids: ids.to_vec(),
            layers,
            drop_e,
            x_final: x,
            xhatf,
            rstdf,
            hf,
            logp,
        })
    }

    fn block_forward(
        &self,
        li: &LayerIdx,
        x_in: Vec<T>,
        rows: usize,
        len: usize,
        drop_p: f64,
        mut rng: Option<&mut Pcg64Mcg>,
    ) -> (LayerCache<T>, Vec<T>) {
        let d = self.config.d_model;
        let n = rows * len;
        let p = &self.params;
        let lay = &self.layout;

        let (xhat1, rstd1, h1) =
            layernorm(&x_in, &p[lay.range(li.ln1_g)], &p[lay.range(li.ln1_b)], d);
        let mut qkv = vec![T::zero(); n * 3 * d];
        linear(
            &h1,
            &p[lay.range(li.w_qkv)],
            &p[lay.range(li.b_qkv)],
            n,
            d,
            3 * d,
            &mut qkv,
        );
        let (att, probs) = self.attention_forward(&qkv, rows, len);
        let mut a = vec![T::zero(); n * d];
        linear(
            &att,
            &p[lay.range(li.w_o)],
            &p[lay.range(li.b_o)],
            n,
            d,
            d,
            &mut a,
        );
        let drop_a = dropout(&mut a, drop_p, rng.as_deref_mut());
        let x_mid: Vec<T> = x_in.iter().zip(&a).map(|(&u, &v)| u + v).collect();

        let (xhat2, rstd2, h2) =
            layernorm(&x_mid, &p[lay.range(li.ln2_g)], &p[lay.range(li.ln2_b)], d);
        let mut fc_pre = vec![T::zero(); n * 4 * d];
        linear(
            &h2,
            &p[lay.range(li.w_fc)],
            &p[lay.range(li.b_fc)],
            n,
            d,
            4 * d,
            &mut fc_pre,
        );
        let fc_tanh: Vec<T> = fc_pre.iter().map(|&u| gelu_inner_tanh(u)).collect();
        let half = T::from_f64(0.5);
        let fc_act: Vec<T> = fc_pre
            .iter()
            .zip(&fc_tanh)
            .map(|(&u, &t)| half * u * (T::one() + t))
            .collect();
        let mut m = vec![T::zero(); n * d];
        linear(
            &fc_act,
            &p[lay.range(li.w_proj)],
            &p[lay.range(li.b_proj)],
            n,
            4 * d,
            d,
            &mut m,
        );
        let drop_m = dropout(&mut m, drop_p, rng.as_deref_mut());
        let x_out: Vec<T> = x_mid.iter().zip(&m).map(|(&u, &v)| u + v).collect();

        let cache = LayerCache {
            x_in,
            xhat1,
            rstd1,
            h1,
            qkv,
            probs,
            att,
            drop_a,
            xhat2,
            rstd2,
            h2,
            fc_pre,
            fc_tanh,
            fc_act,
            drop_m,
        };
        (cache, x_out)
    }

    /// Causal multi-head attention. Returns the concatenated head outputs
    /// and the attention probabilities laid out as `[row][head][t][u]`.
    fn attention_forward(&self, qkv: &[T], rows: usize, len: usize) -> (Vec<T>, Vec<T>) {
        let d = self.config.d_model;
        let nh = self.config.n_heads;
        let hd = d / nh;
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let mut out = vec![T::zero(); rows * len * d];
        let mut probs = vec![T::zero(); rows * nh * len * len];
        for r in 0..rows {
            for h in 0..nh {
                let pbase = (r * nh + h) * len * len;
                for t in 0..len {
                    let qrow = (r * len + t) * 3 * d + h * hd;
                    let q = &qkv[qrow..qrow + hd];
                    let prow = &mut probs[pbase + t * len..pbase + (t + 1) * len];
                    let mut max = T::neg_infinity();
                    for u in 0..=t {
                        let krow = (r * len + u) * 3 * d + d + h * hd;
                        let s = dot(q, &qkv[krow..krow + hd]) * scale;
                        prow[u] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut sum = T::zero();
                    for pu in prow.iter_mut().take(t + 1) {
                        *pu = (*pu - max).exp();
                        sum += *pu;
                    }
                    let o = (r * len + t) * d + h * hd;
                    for u in 0..=t {
                        prow[u] /= sum;
                        let w = prow[u];
                        let vrow = (r * len + u) * 3 * d + 2 * d + h * hd;
                        for (oi, &vi) in out[o..o + hd].iter_mut().zip(&qkv[vrow..vrow + hd]) {
                            *oi += w * vi;
                        }
                    }
                }
            }
        }
        (out, probs)
    }

    /// Mean cross-entropy over unmasked positions.
    pub(crate) fn loss(cache: &Cache<T>, batch: &Batch, vocab: usize) -> T {
        let mut total = T::zero();
        let mut count = 0usize;
        for i in 0..batch.rows * batch.len {
            if batch.mask[i] {
                total -= cache.logp[i * vocab + batch.targets[i] as usize];
                count += 1;
            }
        }
        if count == 0 {
            T::zero()
        } else {
            total / T::from_f64(count as f64)
        }
    }

    /// Forward pass and loss for a training batch.
    pub fn forward_loss(
        &self,
        batch: &Batch,
        dropout_rng: Option<&mut Pcg64Mcg>,
    ) -> Result<(T, Cache<T>)> {
        let cache = self.run(&batch.ids, batch.rows, batch.len, dropout_rng)?;
        let loss = Self::loss(&cache, batch, self.config.vocab_size);
        Ok((loss, cache))
    }

    /// Accumulates the gradient of the mean masked cross-entropy into `grad`.
    pub fn backward(&self, cache: &Cache<T>, batch: &Batch, grad: &mut [T]) {
        assert_eq!(grad.len(), self.params.len());
        let cfg = &self.config;
        let d = cfg.d_model;
        let v = cfg.vocab_size;
        let n = cache.rows * cache.len;
        let lay = &self.layout;
        let p = &self.params;
        let count = batch.n_targets().max(1);
        let inv = T::from_f64(1.0 / count as f64);

        // d loss / d logits = (softmax - onehot) / count on real positions.
        let mut dlogits = vec![T::zero(); n * v];
        for i in 0..n {
            if !batch.mask[i] {
                continue;
            }
            let src = &cache.logp[i * v..(i + 1) * v];
            let dst = &mut dlogits[i * v..(i + 1) * v];
            for (o, &lp) in dst.iter_mut().zip(src) {
                *o = lp.exp() * inv;
            }
            dst[batch.targets[i] as usize] -= inv;
        }

        let wte_r = lay.range(lay.wte);
        T::gemm(
            v,
            n,
            d,
            &dlogits,
            true,
            &cache.hf,
            false,
            &mut grad[wte_r.clone()],
            T::one(),
        );
        let mut dhf = vec![T::zero(); n * d];
        T::gemm(
            n,
            v,
            d,
            &dlogits,
            false,
            &p[wte_r.clone()],
            false,
            &mut dhf,
            T::zero(),
        );
        drop(dlogits);

        let mut dx = vec![T::zero(); n * d];
        {
            let (gg, gb) = two_ranges(grad, lay.range(lay.lnf_g), lay.range(lay.lnf_b));
            layernorm_backward(
                &dhf,
                &cache.xhatf,
                &cache.rstdf,
                &p[lay.range(lay.lnf_g)],
                gg,
                gb,
                &mut dx,
                d,
            );
        }

        for (li, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            dx = self.block_backward(li, lc, dx, cache.rows, cache.len, grad);
        }

        if let Some(mask) = &cache.drop_e {
            for (g, &m) in dx.iter_mut().zip(mask) {
                *g *= m;
            }
        }
        embedding_backward(&cache.ids, &dx, d, &mut grad[wte_r]);
        let wpe = &mut grad[lay.range(lay.wpe)];
        for i in 0..n {
            let t = i % cache.len;
            for (g, &u) in wpe[t * d..(t + 1) * d]
                .iter_mut()
                .zip(&dx[i * d..(i + 1) * d])
            {
                *g += u;
            }
        }
    }

    fn block_backward(
        &self,
        li: &LayerIdx,
        lc: &LayerCache<T>,
        dx_out: Vec<T>,
        rows: usize,
        len: usize,
        grad: &mut [T],
    ) -> Vec<T> {
        let d = self.config.d_model;
        let n = rows * len;
        let p = &self.params;
        let lay = &self.layout;

        // MLP branch.
        let mut dm = dx_out.clone();
        if let Some(mask) = &lc.drop_m {
            for (g, &m) in dm.iter_mut().zip(mask) {
                *g *= m;
            }
        }
        let mut dact = vec![T::zero(); n * 4 * d];
        linear_backward(
            &lc.fc_act,
            &dm,
            &p[lay.range(li.w_proj)],
            n,
            4 * d,
            d,
            grad,
            lay.range(li.w_proj),
            lay.range(li.b_proj),
            &mut dact,
        );
        for ((g, &u), &t) in dact.iter_mut().zip(&lc.fc_pre).zip(&lc.fc_tanh) {
            *g *= gelu_grad_from(u, t);
        }
        let mut dh2 = vec![T::zero(); n * d];
        linear_backward(
            &lc.h2,
            &dact,
            &p[lay.range(li.w_fc)],
            n,
            d,
            4 * d,
            grad,
            lay.range(li.w_fc),
            lay.range(li.b_fc),
            &mut dh2,
        );
        drop(dact);
        let mut dx_mid = dx_out;
        {
            let (gg, gb) = two_ranges(grad, lay.range(li.ln2_g), lay.range(li.ln2_b));
            layernorm_backward(
                &dh2,
                &lc.xhat2,
                &lc.rstd2,
                &p[lay.range(li.ln2_g)],
                gg,
                gb,
                &mut dx_mid,
                d,
            );
        }

        // Attention branch.
        let mut da = dx_mid.clone();
        if let Some(mask) = &lc.drop_a {
            for (g, &m) in da.iter_mut().zip(mask) {
                *g *= m;
            }
        }
        let mut datt = vec![T::zero(); n * d];
        linear_backward(
            &lc.att,
            &da,
            &p[lay.range(li.w_o)],
            n,
            d,
            d,
            grad,
            lay.range(li.w_o),
            lay.range(li.b_o),
            &mut datt,
        );
        let dqkv = self.attention_backward(&lc.qkv, &lc.probs, &datt, rows, len);
        let mut dh1 = vec![T::zero(); n * d];
        linear_backward(
            &lc.h1,
            &dqkv,
            &p[lay.range(li.w_qkv)],
            n,
            d,
            3 * d,
            grad,
            lay.range(li.w_qkv),
            lay.range(li.b_qkv),
            &mut dh1,
        );
        let mut dx_in = dx_mid;
        {
            let (gg, gb) = two_ranges(grad, lay.range(li.ln1_g), lay.range(li.ln1_b));
            layernorm_backward(
                &dh1,
                &lc.xhat1,
                &lc.rstd1,
                &p[lay.range(li.ln1_g)],
                gg,
                gb,
                &mut dx_in,
                d,
            );
        }
        dx_in
    }

    fn attention_backward(
        &self,
        qkv: &[T],
        probs: &[T],
        dout: &[T],
        rows: usize,
        len: usize,
    ) -> Vec<T> {
        let d = self.config.d_model;
        let nh = self.config.n_heads;
        let hd = d / nh;
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let mut dqkv = vec![T::zero(); rows * len * 3 * d];
        let mut dp = vec![T::zero(); len];
        for r in 0..rows {
            for h in 0..nh {
                let pbase = (r * nh + h) * len * len;
                for t in 0..len {
                    let prow = &probs[pbase + t * len..pbase + (t + 1) * len];
                    let o = (r * len + t) * d + h * hd;
                    let dot_t = &dout[o..o + hd];
                    let mut weighted = T::zero();
                    for u in 0..=t {
                        let vrow = (r * len + u) * 3 * d + 2 * d + h * hd;
                        dp[u] = dot(dot_t, &qkv[vrow..vrow + hd]);
                        weighted += prow[u] * dp[u];
                        let w = prow[u];
                        for (g, &x) in dqkv[vrow..vrow + hd].iter_mut().zip(dot_t) {
                            *g += w * x;
                        }
                    }
                    let qrow = (r * len + t) * 3 * d + h * hd;
                    for u in 0..=t {
                        let ds = prow[u] * (dp[u] - weighted) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let krow = (r * len + u) * 3 * d + d + h * hd;
                        for i in 0..hd {
                            let kq = qkv[krow + i];
                            let qv = qkv[qrow + i];
                            dqkv[qrow + i] += ds * kq;
                            dqkv[krow + i] += ds * qv;
                        }
                    }
                }
            }
        }
        dqkv
    }
}

fn two_ranges<T>(
    grad: &mut [T],
    a: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
) -> (&mut [T], &mut [T]) {
    assert!(a.end <= b.start, "ranges must be ordered and disjoint");
    let (lo, hi) = grad.split_at_mut(b.start);
    (&mut lo[a], &mut hi[..b.end - b.start])
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn dropout<T: Scalar>(x: &mut [T], p: f64, rng: Option<&mut Pcg64Mcg>) -> Option<Vec<T>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = T::from_f64(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.len())
        .map(|_| {
            if rng.random::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    for (v, &m) in x.iter_mut().zip(&mask) {
        *v *= m;
    }
    Some(mask)
}

/// `y = x W + b` for `x` rows×din and `W` din×dout.
fn linear<T: Scalar>(x: &[T], w: &[T], b: &[T], rows: usize, din: usize, dout: usize, y: &mut [T]) {
    for row in y.chunks_mut(dout) {
        row.copy_from_slice(b);
    }
    T::gemm(rows, din, dout, x, false, w, false, y, T::one());
}

#[allow(clippy::too_many_arguments)]
fn linear_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    w: &[T],
    rows: usize,
    din: usize,
    dout: usize,
    grad: &mut [T],
    w_range: std::ops::Range<usize>,
    b_range: std::ops::Range<usize>,
    dx: &mut [T],
) {
    T::gemm(
        din,
        rows,
        dout,
        x,
        true,
        dy,
        false,
        &mut grad[w_range],
        T::one(),
    );
    let gb = &mut grad[b_range];
    for row in dy.chunks(dout) {
        for (g, &u) in gb.iter_mut().zip(row) {
            *g += u;
        }
    }
    T::gemm(rows, dout, din, dy, false, w, true, dx, T::zero());
}

fn layernorm<T: Scalar>(x: &[T], g: &[T], b: &[T], d: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let mut y = vec![T::zero(); x.len()];
    let dn = T::from_f64(d as f64);
    let eps = T::from_f64(LN_EPS);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() / dn;
        let var = xr.iter().map(|&u| (u - mean) * (u - mean)).sum::<T>() / dn;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let h = (xr[i] - mean) * rs;
            xhat[r * d + i] = h;
            y[r * d + i] = h * g[i] + b[i];
        }
    }
    (xhat, rstd, y)
}

/// Adds the input gradient to `dx` and accumulates gain/bias gradients.
#[allow(clippy::too_many_arguments)]
fn layernorm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    g: &[T],
    dg: &mut [T],
    db: &mut [T],
    dx: &mut [T],
    d: usize,
) {
    let dn = T::from_f64(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for (r, &rs) in rstd.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_x = T::zero();
        for i in 0..d {
            dg[i] += dyr[i] * xr[i];
            db[i] += dyr[i];
            dxhat[i] = dyr[i] * g[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_x += dxhat[i] * xr[i];
        }
        mean_dxhat /= dn;
        mean_dxhat_x /= dn;
        for i in 0..d {
            dx[r * d + i] += rs * (dxhat[i] - mean_dxhat - xr[i] * mean_dxhat_x);
        }
    }
}

/// tanh(sqrt(2/pi) (x + 0.044715 x^3)), via exp, which is several times
/// faster than the libm tanh.
fn gelu_inner_tanh<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(0.044715);
    let two = T::from_f64(2.0);
    let z = c * (x + k * x * x * x);
    T::one() - two / ((two * z).exp() + T::one())
}

#[cfg(test)]
fn gelu<T: Scalar>(x: T) -> T {
    T::from_f64(0.5) * x * (T::one() + gelu_inner_tanh(x))
}

#[cfg(test)]
fn gelu_grad<T: Scalar>(x: T) -> T {
    gelu_grad_from(x, gelu_inner_tanh(x))
}

fn gelu_grad_from<T: Scalar>(x: T, t: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::from_f64(3.0) * k * x * x)
}

/// The normalizer is accumulated in f64 so f32 rows still sum to 1 within 1e-6.
pub(crate) fn log_softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row
        .iter()
        .copied()
        .fold(T::neg_infinity(), T::max)
        .to_f64()
        .unwrap_or(f64::NAN);
    let sum: f64 = row
        .iter()
        .map(|&u| (u.to_f64().unwrap_or(f64::NAN) - max).exp())
        .sum();
    let lse = max + sum.ln();
    for u in row.iter_mut() {
        *u = T::from_f64(u.to_f64().unwrap_or(f64::NAN) - lse);
    }
}

/// Scatters per-position upstream gradients into embedding rows.
pub(crate) fn embedding_backward<T: Scalar>(ids: &[u32], upstream: &[T], d: usize, grad: &mut [T]) {
    for (i, &id) in ids.iter().enumerate() {
        let row = &mut grad[id as usize * d..(id as usize + 1) * d];
        for (g, &u) in row.iter_mut().zip(&upstream[i * d..(i + 1) * d]) {
            *g += u;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_row_without_upstream_gradient_stays_zero() {
        let d = 3;
        let ids = [0u32, 2, 0];
        let upstream = [1.0f64, 2.0, 3.0, 0.0, 0.0, 0.0, 4.0, 5.0, 6.0];
        let mut grad = vec![0.0f64; 4 * d];
        embedding_backward(&ids, &upstream, d, &mut grad);
        assert_eq!(&grad[0..3], &[5.0, 7.0, 9.0]);
        assert!(grad[3..].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn batch_pads_and_masks() {
        let a = [1u32, 5, 6, 2];
        let b = [1u32, 7, 2];
        let batch = Batch::from_sequences(&[&a, &b], 0);
        assert_eq!(batch.len, 3);
        assert_eq!(batch.ids, vec![1, 5, 6, 1, 7, 0]);
        assert_eq!(batch.targets, vec![5, 6, 2, 7, 2, 0]);
        assert_eq!(batch.n_targets(), 5);
    }
}
