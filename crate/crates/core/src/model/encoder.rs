use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::heads::{mlm_loss_grad, qa_loss_grad};
use super::{LayerOffsets, ModelState};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, PAD};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn view1(p: &[f64], off: usize, n: usize) -> ArrayView1<'_, f64> {
    ArrayView1::from(&p[off..off + n])
}

pub(crate) fn view2(p: &[f64], off: usize, r: usize, c: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((r, c), &p[off..off + r * c]).expect("layout shape")
}

pub(crate) fn grad1(g: &mut [f64], off: usize, n: usize) -> ArrayViewMut1<'_, f64> {
    ArrayViewMut1::from(&mut g[off..off + n])
}

pub(crate) fn grad2(g: &mut [f64], off: usize, r: usize, c: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((r, c), &mut g[off..off + r * c]).expect("layout shape")
}

/// `g[off..] += a^T b` viewed as an `(a.cols, b.cols)` matrix.
fn acc_at_b(g: &mut [f64], off: usize, a: &Array2<f64>, b: &Array2<f64>) {
    let mut gv = grad2(g, off, a.ncols(), b.ncols());
    general_mat_mul(1.0, &a.t(), b, 1.0, &mut gv);
}

fn acc_col_sums(g: &mut [f64], off: usize, a: &Array2<f64>) {
    let mut gv = grad1(g, off, a.ncols());
    gv += &a.sum_axis(Axis(0));
}

fn linear(x: &Array2<f64>, p: &[f64], w: usize, b: usize, out: usize) -> Array2<f64> {
    let mut y = x.dot(&view2(p, w, x.ncols(), out));
    y += &view1(p, b, out);
    y
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> (Array2<f64>, LnCache) {
    let h = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / h;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / h;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    let mut y = &xhat * &g;
    y += &b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    c: &LnCache,
    p: &[f64],
    g_off: usize,
    b_off: usize,
    grads: &mut [f64],
) -> Array2<f64> {
    let h = dy.ncols();
    {
        let mut dg = grad1(grads, g_off, h);
        dg += &(dy * &c.xhat).sum_axis(Axis(0));
    }
    {
        let mut db = grad1(grads, b_off, h);
        db += &dy.sum_axis(Axis(0));
    }
    let g = view1(p, g_off, h);
    let mut dx = dy * &g;
    let hf = h as f64;
    for ((mut row, xhat), &r) in dx.rows_mut().into_iter().zip(c.xhat.rows()).zip(c.rstd.iter()) {
        let mean_d = row.sum() / hf;
        let mean_dx = row.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f64>() / hf;
        for (d, &xh) in row.iter_mut().zip(xhat.iter()) {
            *d = r * (*d - mean_d - xh * mean_dx);
        }
    }
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_fn((rows, cols), |_| if rng.random::<f64>() < p { 0.0 } else { keep })
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LnCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    attn_drop: Option<Array2<f64>>,
    ln2: LnCache,
    h2: Array2<f64>,
    u: Array2<f64>,
    act: Array2<f64>,
    ffn_drop: Option<Array2<f64>>,
    /// Attention sublayer output (after Wo, before dropout and residual).
    attn_out: Array2<f64>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    ids: Vec<TokenId>,
    emb_drop: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    pub hidden: Array2<f64>,
}

impl ForwardCache {
    /// Output of layer `l`'s attention sublayer, before the residual add.
    pub fn attention_output(&self, l: usize) -> &Array2<f64> {
        &self.layers[l].attn_out
    }

    /// Attention probabilities of layer `l`, head `h` (queries x keys).
    pub fn attention_probs(&self, l: usize, h: usize) -> &Array2<f64> {
        &self.layers[l].probs[h]
    }
}

/// Training target for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    /// Original ids at masked positions.
    Mlm { targets: Vec<Option<TokenId>> },
    /// Gold start/end and the candidate positions (passage plus CLS).
    Qa {
        start: usize,
        end: usize,
        candidates: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainItem {
    pub ids: Vec<TokenId>,
    pub objective: Objective,
}

impl TrainItem {
    /// Drops trailing PADs. Padding is only ever at the end and is masked
    /// out of attention, so outputs at real positions are unchanged.
    pub fn trimmed(mut self) -> Self {
        let keep = self.ids.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1);
        self.ids.truncate(keep);
        if let Objective::Mlm { targets } = &mut self.objective {
            targets.truncate(keep);
        }
        self
    }
}

impl ModelState {
    fn check_input(&self, ids: &[TokenId], attention_mask: &[bool]) -> Result<()> {
        let c = &self.config;
        if ids.len() > c.max_positions {
            return Err(Error::InputTooLong {
                len: ids.len(),
                max: c.max_positions,
            });
        }
        if attention_mask.len() != ids.len() {
            return Err(Error::InvalidConfig("attention mask length mismatch".into()));
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= c.vocab_size) {
            return Err(Error::UnknownTokenId { id, size: c.vocab_size });
        }
        Ok(())
    }

    /// Eval-mode forward pass: hidden states `[len x hidden]`.
    pub fn forward(&self, ids: &[TokenId], attention_mask: &[bool]) -> Result<Array2<f64>> {
        Ok(self.forward_cached(ids, attention_mask, None)?.hidden)
    }

    /// Forward pass keeping activations for backprop. Dropout is active iff
    /// `rng` is given and the configured rate is positive.
    pub fn forward_cached(
        &self,
        ids: &[TokenId],
        attention_mask: &[bool],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardCache> {
        self.check_input(ids, attention_mask)?;
        let c = &self.config;
        let p = &self.params;
        let l = &self.layout;
        let (n, h, f) = (ids.len(), c.hidden, c.ffn);
        let drop_p = c.dropout;
        let mut drop = |rows: usize, cols: usize| match rng.as_deref_mut() {
            Some(r) if drop_p > 0.0 => Some(dropout_mask(rows, cols, drop_p, r)),
            _ => None,
        };

        let tok = view2(p, l.tok_emb, c.vocab_size, h);
        let pos = view2(p, l.pos_emb, c.max_positions, h);
        let mut x = Array2::zeros((n, h));
        for (i, &id) in ids.iter().enumerate() {
            let mut row = x.row_mut(i);
            row += &tok.row(id as usize);
            row += &pos.row(i);
        }
        let emb_drop = drop(n, h);
        if let Some(m) = &emb_drop {
            x *= m;
        }

        let key_bias: Array1<f64> = attention_mask
            .iter()
            .map(|&keep| if keep { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        let d = c.head_dim();
        let scale = 1.0 / (d as f64).sqrt();

        let mut layers = Vec::with_capacity(c.layers);
        for lo in &l.layers {
            let (h1, ln1) = layer_norm(&x, view1(p, lo.ln1_g, h), view1(p, lo.ln1_b, h));
            let q = linear(&h1, p, lo.wq, lo.bq, h);
            let k = linear(&h1, p, lo.wk, lo.bk, h);
            let v = linear(&h1, p, lo.wv, lo.bv, h);
            let mut ctx = Array2::zeros((n, h));
            let mut probs = Vec::with_capacity(c.heads);
            for hd in 0..c.heads {
                let cols = s![.., hd * d..(hd + 1) * d];
                let mut sc = q.slice(cols).dot(&k.slice(cols).t());
                sc *= scale;
                sc += &key_bias;
                for mut row in sc.rows_mut() {
                    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    row.mapv_inplace(|v| (v - max).exp());
                    let sum = row.sum();
                    row /= sum;
                }
                ctx.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
                probs.push(sc);
            }
            let attn_out = linear(&ctx, p, lo.wo, lo.bo, h);
            let attn_drop = drop(n, h);
            let mut a = attn_out.clone();
            if let Some(m) = &attn_drop {
                a *= m;
            }
            let x_mid = &x + &a;
            let (h2, ln2) = layer_norm(&x_mid, view1(p, lo.ln2_g, h), view1(p, lo.ln2_b, h));
            let u = linear(&h2, p, lo.w1, lo.b1, f);
            let act = u.mapv(gelu);
            let mut ff = linear(&act, p, lo.w2, lo.b2, h);
            let ffn_drop = drop(n, h);
            if let Some(m) = &ffn_drop {
                ff *= m;
            }
            x = &x_mid + &ff;
            layers.push(LayerCache {
                ln1,
                h1,
                q,
                k,
                v,
                probs,
                ctx,
                attn_drop,
                ln2,
                h2,
                u,
                act,
                ffn_drop,
                attn_out,
            });
        }
        let (hidden, lnf) = layer_norm(&x, view1(p, l.lnf_g, h), view1(p, l.lnf_b, h));
        Ok(ForwardCache {
            ids: ids.to_vec(),
            emb_drop,
            layers,
            lnf,
            hidden,
        })
    }

    /// Backpropagates `d_hidden` through the encoder, accumulating into
    /// `grads` (same layout as the parameters).
    pub fn backward_hidden(&self, cache: &ForwardCache, d_hidden: &Array2<f64>, grads: &mut [f64]) {
        let c = &self.config;
        let p = &self.params;
        let l = &self.layout;
        let (h, f) = (c.hidden, c.ffn);
        let d = c.head_dim();
        let scale = 1.0 / (d as f64).sqrt();

        let mut dx = layer_norm_backward(d_hidden, &cache.lnf, p, l.lnf_g, l.lnf_b, grads);
        for (lo, lc) in l.layers.iter().zip(&cache.layers).rev() {
            dx = self.layer_backward(lo, lc, dx, grads, h, f, d, scale);
        }
        if let Some(m) = &cache.emb_drop {
            dx *= m;
        }
        for (i, &id) in cache.ids.iter().enumerate() {
            let row = dx.row(i);
            let mut te = grad1(grads, l.tok_emb + id as usize * h, h);
            te += &row;
            let mut pe = grad1(grads, l.pos_emb + i * h, h);
            pe += &row;
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_backward(
        &self,
        lo: &LayerOffsets,
        lc: &LayerCache,
        dx_out: Array2<f64>,
        grads: &mut [f64],
        h: usize,
        f: usize,
        d: usize,
        scale: f64,
    ) -> Array2<f64> {
        let p = &self.params;
        // x_out = x_mid + drop(ffn(LN2(x_mid)))
        let mut dff = dx_out.clone();
        if let Some(m) = &lc.ffn_drop {
            dff *= m;
        }
        acc_at_b(grads, lo.w2, &lc.act, &dff);
        acc_col_sums(grads, lo.b2, &dff);
        let dact = dff.dot(&view2(p, lo.w2, f, h).t());
        let mut du = dact;
        du.zip_mut_with(&lc.u, |g, &u| *g *= gelu_grad(u));
        acc_at_b(grads, lo.w1, &lc.h2, &du);
        acc_col_sums(grads, lo.b1, &du);
        let dh2 = du.dot(&view2(p, lo.w1, h, f).t());
        let dx_mid = dx_out + layer_norm_backward(&dh2, &lc.ln2, p, lo.ln2_g, lo.ln2_b, grads);

        // x_mid = x_in + drop(attn(LN1(x_in)))
        let mut da = dx_mid.clone();
        if let Some(m) = &lc.attn_drop {
            da *= m;
        }
        acc_at_b(grads, lo.wo, &lc.ctx, &da);
        acc_col_sums(grads, lo.bo, &da);
        let dctx = da.dot(&view2(p, lo.wo, h, h).t());
        let n = dctx.nrows();
        let mut dq = Array2::zeros((n, h));
        let mut dk = Array2::zeros((n, h));
        let mut dv = Array2::zeros((n, h));
        for (hd, probs) in lc.probs.iter().enumerate() {
            let cols = s![.., hd * d..(hd + 1) * d];
            let dctx_h = dctx.slice(cols);
            dv.slice_mut(cols).assign(&probs.t().dot(&dctx_h));
            let dp = dctx_h.dot(&lc.v.slice(cols).t());
            let mut ds = &dp * probs;
            let row_dot = ds.sum_axis(Axis(1));
            for ((mut row, prow), rd) in ds.rows_mut().into_iter().zip(probs.rows()).zip(row_dot.iter()) {
                row.scaled_add(-rd, &prow);
            }
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
        }
        let mut dh1 = Array2::zeros((n, h));
        for (dm, w, b) in [(&dq, lo.wq, lo.bq), (&dk, lo.wk, lo.bk), (&dv, lo.wv, lo.bv)] {
            acc_at_b(grads, w, &lc.h1, dm);
            acc_col_sums(grads, b, dm);
            general_mat_mul(1.0, dm, &view2(p, w, h, h).t(), 1.0, &mut dh1);
        }
        dx_mid + layer_norm_backward(&dh1, &lc.ln1, p, lo.ln1_g, lo.ln1_b, grads)
    }

    /// Loss of one item times `loss_scale`, and its gradient accumulated
    /// into `grads`. Returns the unscaled loss.
    pub fn accumulate_item(
        &self,
        item: &TrainItem,
        loss_scale: f64,
        rng: Option<&mut ChaCha8Rng>,
        grads: &mut [f64],
    ) -> Result<f64> {
        let mask: Vec<bool> = item.ids.iter().map(|&t| t != PAD).collect();
        let cache = self.forward_cached(&item.ids, &mask, rng)?;
        let (loss, d_hidden) = match &item.objective {
            Objective::Mlm { targets } => mlm_loss_grad(self, &cache.hidden, targets, loss_scale, grads),
            Objective::Qa { start, end, candidates } => {
                qa_loss_grad(self, &cache.hidden, *start, *end, candidates, loss_scale, grads)?
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        self.backward_hidden(&cache, &d_hidden, grads);
        Ok(loss)
    }

    /// Mean loss over `batch` (times `loss_scale`) and exact gradients of
    /// it with respect to every parameter. Per-item dropout streams come
    /// from `rngs` when given.
    pub fn backward(
        &self,
        batch: &[TrainItem],
        loss_scale: f64,
        rngs: Option<&mut [ChaCha8Rng]>,
    ) -> Result<(f64, Vec<f64>)> {
        let mut grads = vec![0.0; self.params.len()];
        if batch.is_empty() {
            return Ok((0.0, grads));
        }
        let w = loss_scale / batch.len() as f64;
        let mut total = 0.0;
        match rngs {
            Some(rngs) => {
                for (item, rng) in batch.iter().zip(rngs.iter_mut()) {
                    total += self.accumulate_item(item, w, Some(rng), &mut grads)?;
                }
            }
            None => {
                for item in batch {
                    total += self.accumulate_item(item, w, None, &mut grads)?;
                }
            }
        }
        Ok((total / batch.len() as f64, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::super::EncoderConfig;
    use super::*;
    use crate::tokenizer::CLS;

    fn cfg(layers: usize, heads: usize, hidden: usize) -> EncoderConfig {
        EncoderConfig {
            layers,
            heads,
            hidden,
            ffn: 2 * hidden,
            max_positions: 16,
            vocab_size: 30,
            dropout: 0.0,
        }
    }

    #[test]
    fn output_shape() {
        let m = ModelState::new(cfg(2, 2, 8), 0).unwrap();
        let ids = [CLS, 7, 8, 9, 2];
        let h = m.forward(&ids, &[true; 5]).unwrap();
        assert_eq!(h.dim(), (5, 8));
    }

    #[test]
    fn oversize_input_rejected() {
        let m = ModelState::new(cfg(1, 1, 4), 0).unwrap();
        let ids = vec![7; 17];
        assert!(matches!(
            m.forward(&ids, &vec![true; 17]),
            Err(Error::InputTooLong { len: 17, max: 16 })
        ));
    }

    #[test]
    fn padded_tail_does_not_affect_real_positions() {
        let m = ModelState::new(cfg(2, 2, 8), 1).unwrap();
        let a = [CLS, 7, 8, 2, 0, 0, 0];
        let b = [CLS, 7, 8, 2, 11, 12, 13];
        let mask = [true, true, true, true, false, false, false];
        let ha = m.forward(&a, &mask).unwrap();
        let hb = m.forward(&b, &mask).unwrap();
        let short = m.forward(&a[..4], &mask[..4]).unwrap();
        for i in 0..4 {
            for j in 0..8 {
                assert!((ha[[i, j]] - hb[[i, j]]).abs() < 1e-12);
                assert!((ha[[i, j]] - short[[i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_attention_averages_value_projections() {
        // One layer, one head, hidden 2. Wq = Wk = 0 makes attention
        // uniform; Wv = Wo = I makes the sublayer output the mean of the
        // normalized embeddings. Hand-computed over three tokens.
        let mut m = ModelState::new(cfg(1, 1, 2), 0).unwrap();
        m.tensor_mut("pos_emb").unwrap().fill(0.0);
        let tok = m.tensor_mut("tok_emb").unwrap();
        // token 5 -> (1, 3), token 6 -> (2, -2), token 7 -> (0, 5)
        tok[10..16].copy_from_slice(&[1.0, 3.0, 2.0, -2.0, 0.0, 5.0]);
        for name in ["layer0.wq", "layer0.wk"] {
            m.tensor_mut(name).unwrap().fill(0.0);
        }
        for name in ["layer0.wv", "layer0.wo"] {
            m.tensor_mut(name).unwrap().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        }
        let cache = m.forward_cached(&[5, 6, 7], &[true; 3], None).unwrap();
        // LayerNorm over two features maps (a, b) to sign(a - b) * (1, -1)
        // scaled by 1/sqrt(1 + eps/((a-b)/2)^2):
        //   (1, 3) -> (-1, 1)*s1, (2, -2) -> (1, -1)*s2, (0, 5) -> (-1, 1)*s3
        let s = |half: f64| 1.0 / (1.0 + LN_EPS / (half * half)).sqrt();
        let (s1, s2, s3) = (s(1.0), s(2.0), s(2.5));
        let mean0 = (-s1 + s2 - s3) / 3.0;
        let out = cache.attention_output(0);
        for i in 0..3 {
            assert!((out[[i, 0]] - mean0).abs() < 1e-12);
            assert!((out[[i, 1]] + mean0).abs() < 1e-12);
        }
        let probs = cache.attention_probs(0, 0);
        assert!(probs.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn permutation_equivariant_without_positions() {
        let mut m = ModelState::new(cfg(2, 2, 8), 5).unwrap();
        m.tensor_mut("pos_emb").unwrap().fill(0.0);
        let ids = [CLS, 9, 10, 11, 12];
        let perm = [0usize, 3, 1, 4, 2];
        let permuted: Vec<TokenId> = perm.iter().map(|&i| ids[i]).collect();
        let h = m.forward(&ids, &[true; 5]).unwrap();
        let hp = m.forward(&permuted, &[true; 5]).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((hp[[new, j]] - h[[old, j]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn trimming_drops_trailing_pads_only() {
        let item = TrainItem {
            ids: vec![CLS, 7, 2, 0, 0],
            objective: Objective::Mlm {
                targets: vec![None, Some(9), None, None, None],
            },
        }
        .trimmed();
        assert_eq!(item.ids, vec![CLS, 7, 2]);
        assert!(matches!(&item.objective, Objective::Mlm { targets } if targets.len() == 3));
    }
}
