//! Windowed attention with learned relative positional tables.
//!
//! For every position `p` of each batched sequence the op attends over the
//! local window `|c - p| < span`, scoring
//! `(Q_p·K_c + Q_p·rq[c-p] + K_c·rk[c-p]) * inv_scale`, normalizing with a
//! softmax over the window, and pooling `V_c + value_sign * rv[c-p]`. The
//! positional tables carry one row per offset in `-(span-1)..=(span-1)`.

use super::{Elem, Node, OpKind, Tensor};

/// `q,k: [B,L,dk]`, `v: [B,L,dv]`, tables `[2*span-1, dk|dv]` -> `[B,L,dv]`.
pub fn window_attention<E: Elem>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    rq: &Tensor<E>,
    rk: &Tensor<E>,
    rv: &Tensor<E>,
    span: usize,
    value_sign: E,
    inv_scale: E,
) -> Tensor<E> {
    let (b, l, dk, dv) = check_shapes(q, k, v, rq, rk, rv, span);
    let table = 2 * span - 1;
    let qd = q.data();
    let kd = k.data();
    let vd = v.data();
    let rqd = rq.data();
    let rkd = rk.data();
    let rvd = rv.data();

    let mut out = vec![E::zero(); b * l * dv];
    let mut weights = vec![E::zero(); b * l * table];
    let mut scores = vec![E::zero(); table];
    for bi in 0..b {
        for p in 0..l {
            let (lo, hi) = window_bounds(p, l, span);
            let qrow = &qd[(bi * l + p) * dk..(bi * l + p + 1) * dk];
            let mut max = E::neg_infinity();
            for c in lo..hi {
                let off = c + span - 1 - p;
                let krow = &kd[(bi * l + c) * dk..(bi * l + c + 1) * dk];
                let rqrow = &rqd[off * dk..(off + 1) * dk];
                let rkrow = &rkd[off * dk..(off + 1) * dk];
                let mut s = E::zero();
                for i in 0..dk {
                    s = s + qrow[i] * (krow[i] + rqrow[i]) + krow[i] * rkrow[i];
                }
                let s = s * inv_scale;
                scores[c - lo] = s;
                max = max.max(s);
            }
            let mut denom = E::zero();
            for c in lo..hi {
                let e = (scores[c - lo] - max).exp();
                scores[c - lo] = e;
                denom = denom + e;
            }
            let wrow = &mut weights[(bi * l + p) * table..(bi * l + p + 1) * table];
            let orow = &mut out[(bi * l + p) * dv..(bi * l + p + 1) * dv];
            for c in lo..hi {
                let off = c + span - 1 - p;
                let a = scores[c - lo] / denom;
                wrow[off] = a;
                let vrow = &vd[(bi * l + c) * dv..(bi * l + c + 1) * dv];
                let rvrow = &rvd[off * dv..(off + 1) * dv];
                for i in 0..dv {
                    orow[i] = orow[i] + a * (vrow[i] + value_sign * rvrow[i]);
                }
            }
        }
    }
    drop(qd);
    drop(kd);
    drop(vd);
    drop(rqd);
    drop(rkd);
    drop(rvd);
    Tensor::from_op(
        out,
        vec![b, l, dv],
        OpKind::WindowAttention {
            span,
            value_sign,
            inv_scale,
            weights,
        },
        vec![q.clone(), k.clone(), v.clone(), rq.clone(), rk.clone(), rv.clone()],
    )
}

fn window_bounds(p: usize, l: usize, span: usize) -> (usize, usize) {
    let lo = p.saturating_sub(span - 1);
    let hi = (p + span).min(l);
    (lo, hi)
}

fn check_shapes<E: Elem>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    rq: &Tensor<E>,
    rk: &Tensor<E>,
    rv: &Tensor<E>,
    span: usize,
) -> (usize, usize, usize, usize) {
    assert!(span >= 1, "window_attention: span must be >= 1");
    assert_eq!(q.rank(), 3, "window_attention: q must be [B,L,dk], got {:?}", q.shape());
    assert_eq!(
        q.shape(),
        k.shape(),
        "window_attention: q/k shape mismatch {:?} vs {:?}",
        q.shape(),
        k.shape()
    );
    let (b, l, dk) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    assert!(
        v.rank() == 3 && v.shape()[0] == b && v.shape()[1] == l,
        "window_attention: v shape {:?} does not match q {:?}",
        v.shape(),
        q.shape()
    );
    let dv = v.shape()[2];
    let table = 2 * span - 1;
    for (name, t, d) in [("rq", rq, dk), ("rk", rk, dk), ("rv", rv, dv)] {
        assert_eq!(
            t.shape(),
            &[table, d],
            "window_attention: {name} must have shape [{table},{d}], got {:?}",
            t.shape()
        );
    }
    (b, l, dk, dv)
}

pub(super) fn backward_window_attention<E: Elem>(
    node: &Node<E>,
    grad: &[E],
    span: usize,
    value_sign: E,
    inv_scale: E,
    weights: &[E],
) {
    let q = &node.inputs[0];
    let k = &node.inputs[1];
    let v = &node.inputs[2];
    let rq = &node.inputs[3];
    let rk = &node.inputs[4];
    let rv = &node.inputs[5];
    let (b, l, dk) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let dv = v.shape()[2];
    let table = 2 * span - 1;

    let qd = q.data();
    let kd = k.data();
    let vd = v.data();
    let rqd = rq.data();
    let rkd = rk.data();
    let rvd = rv.data();

    let mut dq = vec![E::zero(); q.numel()];
    let mut dkk = vec![E::zero(); k.numel()];
    let mut dvv = vec![E::zero(); v.numel()];
    let mut drq = vec![E::zero(); rq.numel()];
    let mut drk = vec![E::zero(); rk.numel()];
    let mut drv = vec![E::zero(); rv.numel()];
    let mut da = vec![E::zero(); table];

    for bi in 0..b {
        for p in 0..l {
            let (lo, hi) = window_bounds(p, l, span);
            let wrow = &weights[(bi * l + p) * table..(bi * l + p + 1) * table];
            let gh = &grad[(bi * l + p) * dv..(bi * l + p + 1) * dv];
            let qrow = &qd[(bi * l + p) * dk..(bi * l + p + 1) * dk];

            // d(weight_c) = gh · (V_c + sign rv), plus the value-side grads.
            let mut dot = E::zero();
            for c in lo..hi {
                let off = c + span - 1 - p;
                let a = wrow[off];
                let vrow = &vd[(bi * l + c) * dv..(bi * l + c + 1) * dv];
                let rvrow = &rvd[off * dv..(off + 1) * dv];
                let mut s = E::zero();
                for i in 0..dv {
                    s = s + gh[i] * (vrow[i] + value_sign * rvrow[i]);
                }
                da[off] = s;
                dot = dot + a * s;
                let dvrow = &mut dvv[(bi * l + c) * dv..(bi * l + c + 1) * dv];
                let drvrow = &mut drv[off * dv..(off + 1) * dv];
                for i in 0..dv {
                    dvrow[i] = dvrow[i] + a * gh[i];
                    drvrow[i] = drvrow[i] + value_sign * a * gh[i];
                }
            }
            // Softmax backward, then through the affinity terms.
            for c in lo..hi {
                let off = c + span - 1 - p;
                let ds = wrow[off] * (da[off] - dot) * inv_scale;
                let krow = &kd[(bi * l + c) * dk..(bi * l + c + 1) * dk];
                let rqrow = &rqd[off * dk..(off + 1) * dk];
                let rkrow = &rkd[off * dk..(off + 1) * dk];
                let dqrow = &mut dq[(bi * l + p) * dk..(bi * l + p + 1) * dk];
                let dkrow = &mut dkk[(bi * l + c) * dk..(bi * l + c + 1) * dk];
                let drqrow = &mut drq[off * dk..(off + 1) * dk];
                let drkrow = &mut drk[off * dk..(off + 1) * dk];
                for i in 0..dk {
                    dqrow[i] = dqrow[i] + ds * (krow[i] + rqrow[i]);
                    dkrow[i] = dkrow[i] + ds * (qrow[i] + rkrow[i]);
                    drqrow[i] = drqrow[i] + ds * qrow[i];
                    drkrow[i] = drkrow[i] + ds * krow[i];
                }
            }
        }
    }
    drop(qd);
    drop(kd);
    drop(vd);
    drop(rqd);
    drop(rkd);
    drop(rvd);
    q.accumulate_grad(&dq);
    k.accumulate_grad(&dkk);
    v.accumulate_grad(&dvv);
    rq.accumulate_grad(&drq);
    rk.accumulate_grad(&drk);
    rv.accumulate_grad(&drv);
}
