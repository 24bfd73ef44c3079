//! Attention blocks: axial multi-head self-attention with relative
//! positional bias over a local window, and the multi-head cross-attention
//! gate applied to each skip connection.
//!
//! Self-attention factorizes the T x F grid into independent 1-D sequences:
//! along time every frequency row is a length-T sequence, along frequency
//! every frame is a length-F sequence. Heads share the positional tables of
//! their axis. The cross-attention gate forms queries from the decoder
//! feature and keys/values from the encoder feature via 1x1 convolutions,
//! normalizes affinities per frequency column, merges heads with a 1x1
//! convolution, and multiplies the sigmoid of the result into the decoder
//! feature before concatenation.

use crate::tensor::{el, window_attention, Elem, Tensor};

/// Which grid axis the axial attention runs along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnAxis {
    Time,
    Frequency,
}

/// Scaling of the query-key affinity inside the positional window heads.
/// `One` applies no scaling; `SqrtDk` divides by sqrt of the key width;
/// `SqrtLen` divides by sqrt of the sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QkScale {
    #[default]
    One,
    SqrtDk,
    SqrtLen,
}

/// Projections and positional tables for one axial direction.
pub struct AxialProjections<E: Elem = f32> {
    /// `[C, heads*d_k]`
    pub wq: Tensor<E>,
    /// `[C, heads*d_k]`
    pub wk: Tensor<E>,
    /// `[C, heads*d_v]`
    pub wv: Tensor<E>,
    /// `[heads*d_v, C]`
    pub wo: Tensor<E>,
    /// `[2*span-1, d_k]`
    pub rq: Tensor<E>,
    /// `[2*span-1, d_k]`
    pub rk: Tensor<E>,
    /// `[2*span-1, d_v]`
    pub rv: Tensor<E>,
}

impl<E: Elem> AxialProjections<E> {
    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.wq"), self.wq.clone()));
        out.push((format!("{prefix}.wk"), self.wk.clone()));
        out.push((format!("{prefix}.wv"), self.wv.clone()));
        out.push((format!("{prefix}.wo"), self.wo.clone()));
        out.push((format!("{prefix}.rq"), self.rq.clone()));
        out.push((format!("{prefix}.rk"), self.rk.clone()));
        out.push((format!("{prefix}.rv"), self.rv.clone()));
    }
}

/// Bottleneck self-attention parameters (both axial directions plus the
/// residual fusion convolution).
pub struct MhsaParams<E: Elem = f32> {
    pub heads: usize,
    pub span: usize,
    /// Sign applied to the value positional table: `V + sign * rv`.
    pub value_pos_sign: E,
    pub qk_scale: QkScale,
    pub time: AxialProjections<E>,
    pub freq: AxialProjections<E>,
    /// `[C, C, 1, 1]` fusion convolution over `M_t + M_f + input`.
    pub fuse_weight: Tensor<E>,
    /// `[C]`
    pub fuse_bias: Tensor<E>,
}

impl<E: Elem> MhsaParams<E> {
    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        self.time.named_params(&format!("{prefix}.time"), &mut out);
        self.freq.named_params(&format!("{prefix}.freq"), &mut out);
        out.push((format!("{prefix}.fuse.weight"), self.fuse_weight.clone()));
        out.push((format!("{prefix}.fuse.bias"), self.fuse_bias.clone()));
        out
    }

    fn dims(&self, channels: usize) -> (usize, usize) {
        let dk = self.time.wq.shape()[1] / self.heads;
        let dv = self.time.wv.shape()[1] / self.heads;
        assert_eq!(
            self.time.wq.shape()[0],
            channels,
            "mhsa: projections expect {} channels, input has {channels}",
            self.time.wq.shape()[0]
        );
        (dk, dv)
    }
}

/// Skip-gate cross-attention parameters. All four maps are 1x1 convolutions
/// over the skip's channel count.
pub struct MhcaParams<E: Elem = f32> {
    pub heads: usize,
    pub wq: Tensor<E>,
    pub bq: Tensor<E>,
    pub wk: Tensor<E>,
    pub bk: Tensor<E>,
    pub wv: Tensor<E>,
    pub bv: Tensor<E>,
    pub merge_w: Tensor<E>,
    pub merge_b: Tensor<E>,
}

impl<E: Elem> MhcaParams<E> {
    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        vec![
            (format!("{prefix}.q.weight"), self.wq.clone()),
            (format!("{prefix}.q.bias"), self.bq.clone()),
            (format!("{prefix}.k.weight"), self.wk.clone()),
            (format!("{prefix}.k.bias"), self.bk.clone()),
            (format!("{prefix}.v.weight"), self.wv.clone()),
            (format!("{prefix}.v.bias"), self.bv.clone()),
            (format!("{prefix}.merge.weight"), self.merge_w.clone()),
            (format!("{prefix}.merge.bias"), self.merge_b.clone()),
        ]
    }
}

/// `Softmax(Q K^T / sqrt(scale_len)) V` with the softmax over the key axis.
pub fn scaled_dot_attention<E: Elem>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    scale_len: usize,
) -> Tensor<E> {
    assert_eq!(q.rank(), 2, "scaled_dot_attention: q must be [L,d_k], got {:?}", q.shape());
    assert_eq!(
        q.shape()[1],
        k.shape()[1],
        "scaled_dot_attention: d_k mismatch {:?} vs {:?}",
        q.shape(),
        k.shape()
    );
    assert_eq!(
        q.shape()[0],
        k.shape()[0],
        "scaled_dot_attention: row count mismatch {:?} vs {:?}",
        q.shape(),
        k.shape()
    );
    let inv = el::<E>(1.0 / (scale_len as f64).sqrt());
    q.matmul(&k.transpose2d())
        .scale(inv)
        .softmax(1)
        .matmul(v)
}

/// One positional attention head over a single sequence: for each position
/// the affinity `Q_p K_c + Q_p rq[c-p] + K_c rk[c-p]` is softmax-normalized
/// over the window `|c-p| < span` and pools `V_c + value_sign * rv[c-p]`.
pub fn positional_head<E: Elem>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    rq: &Tensor<E>,
    rk: &Tensor<E>,
    rv: &Tensor<E>,
    span: usize,
    value_pos_sign: E,
    inv_scale: E,
) -> Tensor<E> {
    assert_eq!(q.rank(), 2, "positional_head: q must be [L,d], got {:?}", q.shape());
    let l = q.shape()[0];
    let dk = q.shape()[1];
    let dv = v.shape()[1];
    let qb = q.reshape(&[1, l, dk]);
    let kb = k.reshape(&[1, l, dk]);
    let vb = v.reshape(&[1, l, dv]);
    window_attention(&qb, &kb, &vb, rq, rk, rv, span, value_pos_sign, inv_scale)
        .reshape(&[l, dv])
}

fn axis_to_sequences<E: Elem>(x: &Tensor<E>, axis: AttnAxis) -> Tensor<E> {
    // [N,C,T,F] -> [batch, length, C]
    let (n, c, t, f) = dims4(x);
    match axis {
        AttnAxis::Time => x.permute(&[0, 3, 2, 1]).reshape(&[n * f, t, c]),
        AttnAxis::Frequency => x.permute(&[0, 2, 3, 1]).reshape(&[n * t, f, c]),
    }
}

fn sequences_to_axis<E: Elem>(seq: &Tensor<E>, axis: AttnAxis, n: usize, t: usize, f: usize) -> Tensor<E> {
    let c = seq.shape()[2];
    match axis {
        AttnAxis::Time => seq.reshape(&[n, f, t, c]).permute(&[0, 3, 2, 1]),
        AttnAxis::Frequency => seq.reshape(&[n, t, f, c]).permute(&[0, 3, 1, 2]),
    }
}

fn dims4<E: Elem>(x: &Tensor<E>) -> (usize, usize, usize, usize) {
    assert_eq!(x.rank(), 4, "attention: expected [N,C,T,F], got {:?}", x.shape());
    (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3])
}

fn split_heads<E: Elem>(x: &Tensor<E>, heads: usize) -> Tensor<E> {
    // [B, L, heads*d] -> [B*heads, L, d]
    let (b, l, hd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = hd / heads;
    x.reshape(&[b, l, heads, d])
        .permute(&[0, 2, 1, 3])
        .reshape(&[b * heads, l, d])
}

fn merge_heads<E: Elem>(x: &Tensor<E>, heads: usize) -> Tensor<E> {
    // [B*heads, L, d] -> [B, L, heads*d]
    let (bh, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let b = bh / heads;
    x.reshape(&[b, heads, l, d])
        .permute(&[0, 2, 1, 3])
        .reshape(&[b, l, heads * d])
}

/// Axial self-attention along one axis of `[N,C,T,F]`: every line of the
/// other axis is treated as an independent sequence, attended per head
/// through the positional window, head-concatenated, and mapped back to `C`
/// channels by the output projection.
pub fn axial_attention<E: Elem>(x: &Tensor<E>, params: &MhsaParams<E>, axis: AttnAxis) -> Tensor<E> {
    let (n, c, t, f) = dims4(x);
    let (dk, _dv) = params.dims(c);
    let proj = match axis {
        AttnAxis::Time => &params.time,
        AttnAxis::Frequency => &params.freq,
    };
    let len = match axis {
        AttnAxis::Time => t,
        AttnAxis::Frequency => f,
    };
    if params.span > len {
        #[cfg(debug_assertions)]
        eprintln!(
            "axial_attention: span {} exceeds sequence length {len}; window clamped",
            params.span
        );
    }
    let inv_scale = match params.qk_scale {
        QkScale::One => E::one(),
        QkScale::SqrtDk => el::<E>(1.0 / (dk as f64).sqrt()),
        QkScale::SqrtLen => el::<E>(1.0 / (len as f64).sqrt()),
    };
    let seq = axis_to_sequences(x, axis);
    let q = split_heads(&seq.matmul(&proj.wq), params.heads);
    let k = split_heads(&seq.matmul(&proj.wk), params.heads);
    let v = split_heads(&seq.matmul(&proj.wv), params.heads);
    let h = window_attention(
        &q,
        &k,
        &v,
        &proj.rq,
        &proj.rk,
        &proj.rv,
        params.span,
        params.value_pos_sign,
        inv_scale,
    );
    let merged = merge_heads(&h, params.heads).matmul(&proj.wo);
    sequences_to_axis(&merged, axis, n, t, f)
}

/// Bottleneck block: time-axial and frequency-axial attention on the same
/// input, summed with the residual and fused by a 1x1 convolution.
pub fn mhsa_forward<E: Elem>(x: &Tensor<E>, params: &MhsaParams<E>) -> Tensor<E> {
    let m_t = axial_attention(x, params, AttnAxis::Time);
    let m_f = axial_attention(x, params, AttnAxis::Frequency);
    let summed = m_t.add(&m_f).add(x);
    summed.conv2d(&params.fuse_weight, &params.fuse_bias, (1, 1), (0, 0))
}

/// Per-head affinity mask of the skip gate: `[N*heads*T, F, F]`, each column
/// softmax-normalized over its first index.
pub fn mhca_attention_mask<E: Elem>(
    x_dec: &Tensor<E>,
    y_enc: &Tensor<E>,
    params: &MhcaParams<E>,
) -> Tensor<E> {
    mhca_mask_and_values(x_dec, y_enc, params).0
}

fn mhca_mask_and_values<E: Elem>(
    x_dec: &Tensor<E>,
    y_enc: &Tensor<E>,
    params: &MhcaParams<E>,
) -> (Tensor<E>, Tensor<E>) {
    let (n, c, t, f) = dims4(x_dec);
    assert_eq!(
        x_dec.shape(),
        y_enc.shape(),
        "mhca: decoder {:?} and encoder {:?} features must be spatially aligned",
        x_dec.shape(),
        y_enc.shape()
    );
    assert_eq!(c % params.heads, 0, "mhca: {c} channels not divisible into {} heads", params.heads);
    let ch = c / params.heads;
    let q = x_dec.conv2d(&params.wq, &params.bq, (1, 1), (0, 0));
    let k = y_enc.conv2d(&params.wk, &params.bk, (1, 1), (0, 0));
    let v = y_enc.conv2d(&params.wv, &params.bv, (1, 1), (0, 0));
    // [N,C,T,F] -> [N*heads*T, F, ch]: attention runs per frame over frequency.
    let to_rows = |z: &Tensor<E>| {
        z.reshape(&[n, params.heads, ch, t, f])
            .permute(&[0, 1, 3, 4, 2])
            .reshape(&[n * params.heads * t, f, ch])
    };
    let qr = to_rows(&q);
    let kr = to_rows(&k);
    let vr = to_rows(&v);
    let inv = el::<E>(1.0 / (f as f64).sqrt());
    let affinity = qr.matmul(&kr.permute(&[0, 2, 1])).scale(inv);
    // Normalize over the first (row) index so every column sums to one.
    let mask = affinity.softmax(1);
    (mask, vr)
}

/// The sigmoid gate `Z` of the skip connection, shaped like the inputs.
pub fn mhca_gate<E: Elem>(
    x_dec: &Tensor<E>,
    y_enc: &Tensor<E>,
    params: &MhcaParams<E>,
) -> Tensor<E> {
    let (n, c, t, f) = dims4(x_dec);
    let ch = c / params.heads;
    let (mask, vr) = mhca_mask_and_values(x_dec, y_enc, params);
    let attended = mask.matmul(&vr); // [N*heads*T, F, ch]
    let stacked = attended
        .reshape(&[n, params.heads, t, f, ch])
        .permute(&[0, 1, 4, 2, 3])
        .reshape(&[n, c, t, f]);
    let merged = stacked.conv2d(&params.merge_w, &params.merge_b, (1, 1), (0, 0));
    merged.sigmoid()
}

/// Skip-gate forward: gates the decoder feature and concatenates the encoder
/// feature, `[N,C,T,F] x [N,C,T,F] -> [N,2C,T,F]`.
pub fn mhca_forward<E: Elem>(
    x_dec: &Tensor<E>,
    y_enc: &Tensor<E>,
    params: &MhcaParams<E>,
) -> Tensor<E> {
    let z = mhca_gate(x_dec, y_enc, params);
    let x_clean = x_dec.mul(&z);
    Tensor::concat(&[&x_clean, y_enc], 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_t(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new((0..n).map(|_| r.gen_range(-1.0..1.0)).collect(), shape)
    }

    fn make_mhsa(
        r: &mut ChaCha8Rng,
        c: usize,
        heads: usize,
        span: usize,
        zero_tables: bool,
        qk_scale: QkScale,
    ) -> MhsaParams<f64> {
        let dk = c / heads;
        let table = 2 * span - 1;
        let proj = |r: &mut ChaCha8Rng| AxialProjections {
            wq: rand_t(r, &[c, heads * dk]),
            wk: rand_t(r, &[c, heads * dk]),
            wv: rand_t(r, &[c, heads * dk]),
            wo: rand_t(r, &[heads * dk, c]),
            rq: if zero_tables { Tensor::zeros(&[table, dk]) } else { rand_t(r, &[table, dk]) },
            rk: if zero_tables { Tensor::zeros(&[table, dk]) } else { rand_t(r, &[table, dk]) },
            rv: if zero_tables { Tensor::zeros(&[table, dk]) } else { rand_t(r, &[table, dk]) },
        };
        let time = proj(r);
        let freq = proj(r);
        MhsaParams {
            heads,
            span,
            value_pos_sign: -1.0,
            qk_scale,
            time,
            freq,
            fuse_weight: rand_t(r, &[c, c, 1, 1]),
            fuse_bias: rand_t(r, &[c]),
        }
    }

    fn make_mhca(r: &mut ChaCha8Rng, c: usize, heads: usize) -> MhcaParams<f64> {
        MhcaParams {
            heads,
            wq: rand_t(r, &[c, c, 1, 1]),
            bq: rand_t(r, &[c]),
            wk: rand_t(r, &[c, c, 1, 1]),
            bk: rand_t(r, &[c]),
            wv: rand_t(r, &[c, c, 1, 1]),
            bv: rand_t(r, &[c]),
            merge_w: rand_t(r, &[c, c, 1, 1]),
            merge_b: rand_t(r, &[c]),
        }
    }

    /// Straight-loop evaluation of the windowed positional attention,
    /// independent of the tensor op (no max subtraction, explicit sums).
    #[allow(clippy::too_many_arguments)]
    fn oracle_positional_head(
        q: &[f64],
        k: &[f64],
        v: &[f64],
        rq: &[f64],
        rk: &[f64],
        rv: &[f64],
        l: usize,
        d: usize,
        span: usize,
        sign: f64,
        inv_scale: f64,
    ) -> Vec<f64> {
        let mut out = vec![0.0; l * d];
        for p in 0..l {
            let lo = p.saturating_sub(span - 1);
            let hi = (p + span).min(l);
            let mut weights = Vec::new();
            let mut denom = 0.0;
            for c in lo..hi {
                let off = c + span - 1 - p;
                let mut s = 0.0;
                for i in 0..d {
                    s += q[p * d + i] * k[c * d + i]
                        + q[p * d + i] * rq[off * d + i]
                        + k[c * d + i] * rk[off * d + i];
                }
                let e = (s * inv_scale).exp();
                weights.push(e);
                denom += e;
            }
            for c in lo..hi {
                let off = c + span - 1 - p;
                let a = weights[c - lo] / denom;
                for i in 0..d {
                    out[p * d + i] += a * (v[c * d + i] + sign * rv[off * d + i]);
                }
            }
        }
        out
    }

    #[test]
    fn scaled_dot_single_row_returns_value() {
        let q = Tensor::new(vec![0.3, -0.7], &[1, 2]);
        let k = Tensor::new(vec![5.0, 5.0], &[1, 2]);
        let v = Tensor::new(vec![1.25, -2.0, 0.5], &[1, 3]);
        let out = scaled_dot_attention(&q, &k, &v, 1);
        assert_eq!(out.to_vec(), v.to_vec());
    }

    #[test]
    fn scaled_dot_identical_keys_average_values() {
        let q = Tensor::<f64>::new(vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6], &[3, 2]);
        let k = Tensor::new(vec![1.0, -1.0], &[1, 2]);
        let k = Tensor::concat(&[&k, &k, &k], 0);
        let v = Tensor::new(vec![3.0, 0.0, 0.0, 3.0, 3.0, 3.0], &[3, 2]);
        let out = scaled_dot_attention(&q, &k, &v, 3);
        for row in 0..3 {
            assert!((out.to_vec()[row * 2] - 2.0).abs() < 1e-6);
            assert!((out.to_vec()[row * 2 + 1] - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn scaled_dot_matches_bruteforce() {
        let qv = [0.2, -0.4, 0.9, 0.1, -0.5, 0.3];
        let kv = [0.7, 0.2, -0.1, 0.4, 0.5, -0.9];
        let vv = [1.0, 2.0, -1.0, 0.5, 0.25, -0.75];
        let l = 3;
        let d = 2;
        let q = Tensor::new(qv.to_vec(), &[l, d]);
        let k = Tensor::new(kv.to_vec(), &[l, d]);
        let v = Tensor::new(vv.to_vec(), &[l, d]);
        let out = scaled_dot_attention(&q, &k, &v, l).to_vec();

        let scale = 1.0 / (l as f64).sqrt();
        let mut expected = vec![0.0; l * d];
        for p in 0..l {
            let mut es = Vec::new();
            let mut denom = 0.0;
            for c in 0..l {
                let mut s = 0.0;
                for i in 0..d {
                    s += qv[p * d + i] * kv[c * d + i];
                }
                let e = (s * scale).exp();
                es.push(e);
                denom += e;
            }
            for c in 0..l {
                for i in 0..d {
                    expected[p * d + i] += es[c] / denom * vv[c * d + i];
                }
            }
        }
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn positional_head_matches_scalar_oracle() {
        for seed in 0..5 {
            let mut r = rng(50 + seed);
            let (l, d, span) = (5, 3, 3);
            let q = rand_t(&mut r, &[l, d]);
            let k = rand_t(&mut r, &[l, d]);
            let v = rand_t(&mut r, &[l, d]);
            let rq = rand_t(&mut r, &[2 * span - 1, d]);
            let rk = rand_t(&mut r, &[2 * span - 1, d]);
            let rv = rand_t(&mut r, &[2 * span - 1, d]);
            let out = positional_head(&q, &k, &v, &rq, &rk, &rv, span, -1.0, 1.0).to_vec();
            let expected = oracle_positional_head(
                &q.to_vec(), &k.to_vec(), &v.to_vec(),
                &rq.to_vec(), &rk.to_vec(), &rv.to_vec(),
                l, d, span, -1.0, 1.0,
            );
            for (a, b) in out.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-10, "seed {seed}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn positional_head_span_one_is_value_minus_table() {
        let mut r = rng(60);
        let (l, d) = (4, 2);
        let q = rand_t(&mut r, &[l, d]);
        let k = rand_t(&mut r, &[l, d]);
        let v = rand_t(&mut r, &[l, d]);
        let rq = rand_t(&mut r, &[1, d]);
        let rk = rand_t(&mut r, &[1, d]);
        let rv = rand_t(&mut r, &[1, d]);
        let out = positional_head(&q, &k, &v, &rq, &rk, &rv, 1, -1.0, 1.0).to_vec();
        let vv = v.to_vec();
        let rvv = rv.to_vec();
        for p in 0..l {
            for i in 0..d {
                assert!((out[p * d + i] - (vv[p * d + i] - rvv[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn positional_head_zero_tables_is_unscaled_window_attention() {
        let mut r = rng(61);
        let (l, d, span) = (6, 2, 3);
        let q = rand_t(&mut r, &[l, d]);
        let k = rand_t(&mut r, &[l, d]);
        let v = rand_t(&mut r, &[l, d]);
        let zk = Tensor::zeros(&[2 * span - 1, d]);
        let zv = Tensor::zeros(&[2 * span - 1, d]);
        let out = positional_head(&q, &k, &v, &zk, &zk, &zv, span, -1.0, 1.0).to_vec();
        let expected = oracle_positional_head(
            &q.to_vec(), &k.to_vec(), &v.to_vec(),
            &vec![0.0; (2 * span - 1) * d], &vec![0.0; (2 * span - 1) * d],
            &vec![0.0; (2 * span - 1) * d],
            l, d, span, -1.0, 1.0,
        );
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn axial_time_with_single_frame_reduces_to_value_path() {
        // T=1: each time sequence has one element, so the head output is
        // V - rv[0] and the block collapses to (x Wv - rv) Wo per row.
        let mut r = rng(70);
        let (c, heads, span) = (4usize, 2usize, 2usize);
        let mut p = make_mhsa(&mut r, c, heads, span, false, QkScale::One);
        p.value_pos_sign = -1.0;
        let x = rand_t(&mut r, &[1, c, 1, 3]);
        let out = axial_attention(&x, &p, AttnAxis::Time);
        assert_eq!(out.shape(), x.shape());

        let seq = x.permute(&[0, 3, 2, 1]).reshape(&[3, 1, c]);
        let dk = c / heads;
        let v = seq.matmul(&p.time.wv);
        // Offset 0 row of the table sits at index span-1.
        let rv0 = p.time.rv.slice(0, span - 1, 1).reshape(&[1, dk]);
        let vv = v.to_vec();
        let rv = rv0.to_vec();
        let mut pooled = vec![0.0; 3 * heads * dk];
        for row in 0..3 {
            for h in 0..heads {
                for i in 0..dk {
                    pooled[row * heads * dk + h * dk + i] = vv[row * heads * dk + h * dk + i] - rv[i];
                }
            }
        }
        let expected = Tensor::new(pooled, &[3, 1, heads * dk])
            .matmul(&p.time.wo)
            .reshape(&[1, 3, 1, c])
            .permute(&[0, 3, 2, 1]);
        for (a, b) in out.to_vec().iter().zip(&expected.to_vec()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn axial_full_span_zero_tables_matches_scaled_dot_rows() {
        // 4x3 grid, span covering the whole axis, sqrt(L) scaling: every
        // frequency row must reproduce per-head scaled dot attention.
        let mut r = rng(71);
        let (c, heads, t, f) = (4usize, 2usize, 4usize, 3usize);
        let p = make_mhsa(&mut r, c, heads, t, true, QkScale::SqrtLen);
        let x = rand_t(&mut r, &[1, c, t, f]);
        let out = axial_attention(&x, &p, AttnAxis::Time);

        let dk = c / heads;
        let seq = x.permute(&[0, 3, 2, 1]).reshape(&[f, t, c]);
        let mut expected = Vec::new();
        for row in 0..f {
            let xr = seq.slice(0, row, 1).reshape(&[t, c]);
            let mut heads_out = Vec::new();
            for h in 0..heads {
                let wq = p.time.wq.slice(1, h * dk, dk);
                let wk = p.time.wk.slice(1, h * dk, dk);
                let wv = p.time.wv.slice(1, h * dk, dk);
                heads_out.push(scaled_dot_attention(
                    &xr.matmul(&wq),
                    &xr.matmul(&wk),
                    &xr.matmul(&wv),
                    t,
                ));
            }
            let refs: Vec<&Tensor<f64>> = heads_out.iter().collect();
            expected.push(Tensor::concat(&refs, 1).matmul(&p.time.wo));
        }
        let refs: Vec<&Tensor<f64>> = expected.iter().collect();
        let expected = Tensor::concat(&refs, 0)
            .reshape(&[1, f, t, c])
            .permute(&[0, 3, 2, 1]);
        for (a, b) in out.to_vec().iter().zip(&expected.to_vec()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn time_axial_commutes_with_frequency_permutation() {
        let mut r = rng(72);
        let (c, t, f) = (4usize, 3usize, 5usize);
        let p = make_mhsa(&mut r, c, 2, 2, false, QkScale::One);
        let x = rand_t(&mut r, &[1, c, t, f]);
        let perm = [3usize, 0, 4, 1, 2];

        let permute_freq = |src: &Tensor<f64>| {
            let d = src.to_vec();
            let mut out = vec![0.0; d.len()];
            for ci in 0..c {
                for ti in 0..t {
                    for fi in 0..f {
                        out[(ci * t + ti) * f + fi] = d[(ci * t + ti) * f + perm[fi]];
                    }
                }
            }
            Tensor::new(out, &[1, c, t, f])
        };

        let a = permute_freq(&axial_attention(&x, &p, AttnAxis::Time));
        let b = axial_attention(&permute_freq(&x), &p, AttnAxis::Time);
        for (x1, x2) in a.to_vec().iter().zip(&b.to_vec()) {
            assert!((x1 - x2).abs() < 1e-6);
        }
    }

    #[test]
    fn mhsa_shape_and_zero_input() {
        let mut r = rng(73);
        let (c, t, f) = (4usize, 5usize, 3usize);
        let mut p = make_mhsa(&mut r, c, 2, 3, false, QkScale::One);
        let x = rand_t(&mut r, &[2, c, t, f]);
        assert_eq!(mhsa_forward(&x, &p).shape(), x.shape());

        // Zero input + zero rv tables + zero fusion bias -> zero output.
        p.time.rv = Tensor::zeros(p.time.rv.shape());
        p.freq.rv = Tensor::zeros(p.freq.rv.shape());
        p.fuse_bias = Tensor::zeros(&[c]);
        let zero = Tensor::zeros(&[1, c, t, f]);
        let out = mhsa_forward(&zero, &p);
        assert!(out.to_vec().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn mhsa_block_gradcheck() {
        let mut r = rng(74);
        let (c, heads, span, t, f) = (4usize, 2usize, 2usize, 3usize, 2usize);
        let x = rand_t(&mut r, &[1, c, t, f]).with_grad();
        let p = make_mhsa(&mut r, c, heads, span, false, QkScale::One);
        let inputs = vec![
            x,
            p.time.wq.clone().with_grad(),
            p.time.wv.clone().with_grad(),
            p.time.rq.clone().with_grad(),
            p.time.rv.clone().with_grad(),
            p.freq.wo.clone().with_grad(),
            p.fuse_weight.clone().with_grad(),
        ];
        let report = grad_check(
            |t_in| {
                let params = MhsaParams {
                    heads,
                    span,
                    value_pos_sign: -1.0,
                    qk_scale: QkScale::One,
                    time: AxialProjections {
                        wq: t_in[1].clone(),
                        wk: p.time.wk.clone(),
                        wv: t_in[2].clone(),
                        wo: p.time.wo.clone(),
                        rq: t_in[3].clone(),
                        rk: p.time.rk.clone(),
                        rv: t_in[4].clone(),
                    },
                    freq: AxialProjections {
                        wq: p.freq.wq.clone(),
                        wk: p.freq.wk.clone(),
                        wv: p.freq.wv.clone(),
                        wo: t_in[5].clone(),
                        rq: p.freq.rq.clone(),
                        rk: p.freq.rk.clone(),
                        rv: p.freq.rv.clone(),
                    },
                    fuse_weight: t_in[6].clone(),
                    fuse_bias: p.fuse_bias.clone(),
                };
                let y = mhsa_forward(&t_in[0], &params);
                y.mul(&y).mean_all()
            },
            &inputs,
            1e-4,
        );
        assert!(report.passes(1e-3), "rel err {}", report.max_rel_err);
    }

    #[test]
    fn mhca_gate_range_and_mask_normalization() {
        let mut r = rng(75);
        let (c, heads, t, f) = (4usize, 2usize, 3usize, 5usize);
        let p = make_mhca(&mut r, c, heads);
        let x = rand_t(&mut r, &[1, c, t, f]);
        let y = rand_t(&mut r, &[1, c, t, f]);

        let z = mhca_gate(&x, &y, &p);
        assert_eq!(z.shape(), x.shape());
        assert!(z.to_vec().iter().all(|&v| v > 0.0 && v < 1.0));

        let mask = mhca_attention_mask(&x, &y, &p);
        assert_eq!(mask.shape(), &[heads * t, f, f]);
        let md = mask.to_vec();
        for b in 0..heads * t {
            for j in 0..f {
                let mut col = 0.0;
                for i in 0..f {
                    col += md[(b * f + i) * f + j];
                }
                assert!((col - 1.0).abs() < 1e-6, "column {j} of block {b} sums to {col}");
            }
        }

        let out = mhca_forward(&x, &y, &p);
        assert_eq!(out.shape(), &[1, 2 * c, t, f]);
    }

    #[test]
    fn mhca_zero_merge_halves_decoder_feature() {
        let mut r = rng(76);
        let (c, heads, t, f) = (4usize, 2usize, 2usize, 3usize);
        let mut p = make_mhca(&mut r, c, heads);
        p.merge_w = Tensor::zeros(&[c, c, 1, 1]);
        p.merge_b = Tensor::zeros(&[c]);
        let x = rand_t(&mut r, &[1, c, t, f]);
        let y = rand_t(&mut r, &[1, c, t, f]);
        let out = mhca_forward(&x, &y, &p).to_vec();
        let xd = x.to_vec();
        let yd = y.to_vec();
        for i in 0..xd.len() {
            assert!((out[i] - 0.5 * xd[i]).abs() < 1e-12);
        }
        for i in 0..yd.len() {
            assert!((out[xd.len() + i] - yd[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn mhca_gate_monotone_in_pre_sigmoid() {
        // Raising any pre-sigmoid activation strictly raises the gate.
        let probes = [-3.0, -0.5, 0.0, 0.7, 4.0];
        for &a in &probes {
            let base = Tensor::new(vec![a], &[1]).sigmoid().item();
            let up = Tensor::new(vec![a + 0.01], &[1]).sigmoid().item();
            assert!(up > base);
        }
    }

    #[test]
    fn mhca_block_gradcheck() {
        let mut r = rng(77);
        let (c, heads, t, f) = (4usize, 2usize, 2usize, 3usize);
        let p = make_mhca(&mut r, c, heads);
        let x = rand_t(&mut r, &[1, c, t, f]).with_grad();
        let y = rand_t(&mut r, &[1, c, t, f]).with_grad();
        let inputs = vec![
            x,
            y,
            p.wq.clone().with_grad(),
            p.wv.clone().with_grad(),
            p.merge_w.clone().with_grad(),
        ];
        let report = grad_check(
            |t_in| {
                let params = MhcaParams {
                    heads,
                    wq: t_in[2].clone(),
                    bq: p.bq.clone(),
                    wk: p.wk.clone(),
                    bk: p.bk.clone(),
                    wv: t_in[3].clone(),
                    bv: p.bv.clone(),
                    merge_w: t_in[4].clone(),
                    merge_b: p.merge_b.clone(),
                };
                let out = mhca_forward(&t_in[0], &t_in[1], &params);
                out.mul(&out).mean_all()
            },
            &inputs,
            1e-4,
        );
        assert!(report.passes(1e-3), "rel err {}", report.max_rel_err);
    }
}
