//! Batched GRU cell: forward with cached activations and the matching backward pass.
//!
//! Activations are feature-major `width x batch` buffers, so every inner loop runs
//! along the batch.

use super::params::{GruLayerParams, Tensor};

/// `out[o, b] += Σ_k w[o, k] * x[k, b]` for `w` of shape `out_dim x in_dim`.
pub(crate) fn add_matmul_t(out: &mut [f64], x: &[f64], w: &Tensor, batch: usize) {
    let (out_dim, in_dim) = (w.shape[0], w.shape[1]);
    debug_assert_eq!(x.len(), batch * in_dim);
    debug_assert_eq!(out.len(), batch * out_dim);
    for (o, row) in out.chunks_exact_mut(batch).enumerate() {
        for (&wv, xk) in w.data[o * in_dim..(o + 1) * in_dim]
            .iter()
            .zip(x.chunks_exact(batch))
        {
            axpy(row, wv, xk);
        }
    }
}

/// `dw[o, k] += Σ_b da[o, b] * x[k, b]`
pub(crate) fn add_outer(dw: &mut Tensor, da: &[f64], x: &[f64], batch: usize) {
    let in_dim = dw.shape[1];
    for (o, dao) in da.chunks_exact(batch).enumerate() {
        for (d, xk) in dw.data[o * in_dim..(o + 1) * in_dim]
            .iter_mut()
            .zip(x.chunks_exact(batch))
        {
            *d += dot(dao, xk);
        }
    }
}

/// `dx[k, b] += Σ_o w[o, k] * da[o, b]`
pub(crate) fn add_matmul(dx: &mut [f64], da: &[f64], w: &Tensor, batch: usize) {
    let in_dim = w.shape[1];
    for (o, dao) in da.chunks_exact(batch).enumerate() {
        for (&wv, dxk) in w.data[o * in_dim..(o + 1) * in_dim]
            .iter()
            .zip(dx.chunks_exact_mut(batch))
        {
            axpy(dxk, wv, dao);
        }
    }
}

/// `db[o] += Σ_b da[o, b]`
pub(crate) fn add_bias_grad(db: &mut Tensor, da: &[f64], batch: usize) {
    for (d, dao) in db.data.iter_mut().zip(da.chunks_exact(batch)) {
        *d += dao.iter().sum::<f64>();
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    if a == 0.0 {
        return;
    }
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with four independent accumulators so the loop can be pipelined.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Each bias entry repeated across the batch.
pub(crate) fn broadcast(bias: &Tensor, batch: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch * bias.data.len());
    for &v in &bias.data {
        out.extend(std::iter::repeat_n(v, batch));
    }
    out
}

pub(crate) fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

/// Everything the backward pass needs from one cell evaluation.
#[derive(Debug, Clone)]
pub(crate) struct CellCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub h_cand: Vec<f64>,
    pub h: Vec<f64>,
}

pub(crate) fn cell_forward(
    p: &GruLayerParams,
    x: Vec<f64>,
    h_prev: Vec<f64>,
    batch: usize,
) -> CellCache {
    let mut z = broadcast(&p.b_z, batch);
    add_matmul_t(&mut z, &x, &p.w_z, batch);
    add_matmul_t(&mut z, &h_prev, &p.u_z, batch);
    z.iter_mut().for_each(|v| *v = sigmoid(*v));

    let mut r = broadcast(&p.b_r, batch);
    add_matmul_t(&mut r, &x, &p.w_r, batch);
    add_matmul_t(&mut r, &h_prev, &p.u_r, batch);
    r.iter_mut().for_each(|v| *v = sigmoid(*v));

    let gated: Vec<f64> = r.iter().zip(&h_prev).map(|(r, h)| r * h).collect();
    let mut h_cand = broadcast(&p.b_h, batch);
    add_matmul_t(&mut h_cand, &x, &p.w_h, batch);
    add_matmul_t(&mut h_cand, &gated, &p.u_h, batch);
    h_cand.iter_mut().for_each(|v| *v = v.tanh());

    let h = z
        .iter()
        .zip(&h_prev)
        .zip(&h_cand)
        .map(|((z, hp), hc)| (1.0 - z) * hp + z * hc)
        .collect();
    CellCache {
        x,
        h_prev,
        z,
        r,
        h_cand,
        h,
    }
}

/// Backpropagates `dh` (gradient w.r.t. the cell output) through one cell.
/// Accumulates parameter gradients into `g` and input gradients into `dx`;
/// returns the gradient w.r.t. `h_prev`.
pub(crate) fn cell_backward(
    p: &GruLayerParams,
    c: &CellCache,
    dh: &[f64],
    g: &mut GruLayerParams,
    dx: &mut [f64],
    batch: usize,
) -> Vec<f64> {
    let n = dh.len();
    let mut dh_prev = vec![0.0; n];
    let mut da_h = vec![0.0; n];
    let mut da_z = vec![0.0; n];
    for i in 0..n {
        let z = c.z[i];
        let hc = c.h_cand[i];
        dh_prev[i] = dh[i] * (1.0 - z);
        da_h[i] = dh[i] * z * (1.0 - hc * hc);
        da_z[i] = dh[i] * (hc - c.h_prev[i]) * z * (1.0 - z);
    }

    let gated: Vec<f64> = c.r.iter().zip(&c.h_prev).map(|(r, h)| r * h).collect();
    add_outer(&mut g.w_h, &da_h, &c.x, batch);
    add_outer(&mut g.u_h, &da_h, &gated, batch);
    add_bias_grad(&mut g.b_h, &da_h, batch);
    add_matmul(dx, &da_h, &p.w_h, batch);
    let mut d_gated = vec![0.0; n];
    add_matmul(&mut d_gated, &da_h, &p.u_h, batch);

    let mut da_r = vec![0.0; n];
    for i in 0..n {
        let r = c.r[i];
        dh_prev[i] += d_gated[i] * r;
        da_r[i] = d_gated[i] * c.h_prev[i] * r * (1.0 - r);
    }

    add_outer(&mut g.w_z, &da_z, &c.x, batch);
    add_outer(&mut g.u_z, &da_z, &c.h_prev, batch);
    add_bias_grad(&mut g.b_z, &da_z, batch);
    add_matmul(dx, &da_z, &p.w_z, batch);
    add_matmul(&mut dh_prev, &da_z, &p.u_z, batch);

    add_outer(&mut g.w_r, &da_r, &c.x, batch);
    add_outer(&mut g.u_r, &da_r, &c.h_prev, batch);
    add_bias_grad(&mut g.b_r, &da_r, batch);
    add_matmul(dx, &da_r, &p.w_r, batch);
    add_matmul(&mut dh_prev, &da_r, &p.u_r, batch);

    dh_prev
}

/// Single unbatched GRU step.
pub fn gru_cell(x: &[f64], h_prev: &[f64], p: &GruLayerParams) -> Vec<f64> {
    cell_forward(p, x.to_vec(), h_prev.to_vec(), 1).h
}
