//! Encoder-decoder forward pass, masked MSE, and reverse-mode gradients.
//!
//! Sequences are batch-major: an input batch is `batch x horizon_in x input_dim`,
//! predictions and targets are `batch x horizon_out x input_dim`.

use super::gru::{
    add_bias_grad, add_matmul, add_matmul_t, add_outer, broadcast, cell_backward, cell_forward,
    CellCache,
};
use super::params::{Grads, GruSeq2Seq};
use crate::error::{Error, Result};

/// Activations recorded by [`GruSeq2Seq::forward_batch`].
#[derive(Debug, Clone)]
pub struct Tape {
    batch: usize,
    arch: super::params::GruArch,
    encoder: Vec<Vec<CellCache>>,
    decoder: Vec<Vec<CellCache>>,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

impl GruSeq2Seq {
    /// Runs the encoder from a zero state, then decodes autoregressively starting from the
    /// last input frame; each prediction is fed back as the next decoder input.
    pub fn forward_batch(&self, inputs: &[f64], batch: usize) -> Result<(Vec<f64>, Tape)> {
        let arch = self.arch;
        let (d, h, m, t_out) = (
            arch.input_dim,
            arch.hidden_dim,
            arch.horizon_in,
            arch.horizon_out,
        );
        if batch == 0 || inputs.len() != batch * m * d {
            return Err(Error::Shape(format!(
                "expected {batch} sequences of {m} steps x {d} features, got {} values",
                inputs.len()
            )));
        }

        let frame = |t: usize| -> Vec<f64> {
            let mut x = vec![0.0; batch * d];
            for b in 0..batch {
                for j in 0..d {
                    x[j * batch + b] = inputs[(b * m + t) * d + j];
                }
            }
            x
        };

        let mut state: Vec<Vec<f64>> = vec![vec![0.0; batch * h]; arch.num_layers];
        let mut encoder = Vec::with_capacity(m);
        for t in 0..m {
            let mut x = frame(t);
            let mut step = Vec::with_capacity(arch.num_layers);
            for (l, layer) in self.encoder.iter().enumerate() {
                let cache = cell_forward(layer, x, std::mem::take(&mut state[l]), batch);
                state[l] = cache.h.clone();
                x = cache.h.clone();
                step.push(cache);
            }
            encoder.push(step);
        }

        let mut outputs = vec![0.0; batch * t_out * d];
        let mut decoder = Vec::with_capacity(t_out);
        let mut feed = frame(m - 1);
        for k in 0..t_out {
            let mut x = feed;
            let mut step = Vec::with_capacity(arch.num_layers);
            for (l, layer) in self.decoder.iter().enumerate() {
                let cache = cell_forward(layer, x, std::mem::take(&mut state[l]), batch);
                state[l] = cache.h.clone();
                x = cache.h.clone();
                step.push(cache);
            }
            let mut y = broadcast(&self.proj_b, batch);
            add_matmul_t(&mut y, &x, &self.proj_w, batch);
            for b in 0..batch {
                for j in 0..d {
                    outputs[(b * t_out + k) * d + j] = y[j * batch + b];
                }
            }
            decoder.push(step);
            feed = y;
        }

        Ok((
            outputs,
            Tape {
                batch,
                arch,
                encoder,
                decoder,
            },
        ))
    }

    /// Single-sequence forward: `x` is `horizon_in x input_dim`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        self.forward_batch(x, 1)
    }

    pub fn predict_batch(&self, inputs: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.forward_batch(inputs, batch).map(|(y, _)| y)
    }

    /// Gradients of a scalar loss given `d_outputs = ∂loss/∂ŷ`, including the path through
    /// the fed-back predictions.
    pub fn backward(&self, tape: &Tape, d_outputs: &[f64]) -> Result<Grads> {
        let arch = self.arch;
        if tape.arch != arch {
            return Err(Error::Internal(
                "tape was recorded with a different architecture".into(),
            ));
        }
        let batch = tape.batch;
        let (d, h, t_out, layers) = (
            arch.input_dim,
            arch.hidden_dim,
            arch.horizon_out,
            arch.num_layers,
        );
        if d_outputs.len() != batch * t_out * d {
            return Err(Error::Shape(format!(
                "output gradient has {} values, expected {}",
                d_outputs.len(),
                batch * t_out * d
            )));
        }

        let mut grads = GruSeq2Seq::zeros(arch);
        let mut carry: Vec<Vec<f64>> = vec![vec![0.0; batch * h]; layers];
        let mut d_feedback = vec![0.0; batch * d];

        for k in (0..t_out).rev() {
            let step = &tape.decoder[k];
            let mut dy = d_feedback;
            for b in 0..batch {
                for j in 0..d {
                    dy[j * batch + b] += d_outputs[(b * t_out + k) * d + j];
                }
            }
            let top = &step[layers - 1].h;
            add_outer(&mut grads.proj_w, &dy, top, batch);
            add_bias_grad(&mut grads.proj_b, &dy, batch);
            add_matmul(&mut carry[layers - 1], &dy, &self.proj_w, batch);

            let dx0 = backprop_stack(&self.decoder, &mut grads.decoder, step, &mut carry, batch);
            // step 0 consumed the last input frame, later steps the previous prediction
            d_feedback = if k > 0 { dx0 } else { vec![0.0; batch * d] };
        }

        for step in tape.encoder.iter().rev() {
            backprop_stack(&self.encoder, &mut grads.encoder, step, &mut carry, batch);
        }
        Ok(grads)
    }
}

/// Backpropagates one time step through a layer stack, top to bottom. `carry[l]` holds
/// the gradient w.r.t. layer `l`'s output and is replaced by the gradient w.r.t. its
/// previous state. Returns the gradient w.r.t. the bottom layer's input.
fn backprop_stack(
    params: &[super::params::GruLayerParams],
    grads: &mut [super::params::GruLayerParams],
    step: &[CellCache],
    carry: &mut [Vec<f64>],
    batch: usize,
) -> Vec<f64> {
    let mut from_above: Option<Vec<f64>> = None;
    for l in (0..params.len()).rev() {
        let mut dh = std::mem::take(&mut carry[l]);
        if let Some(extra) = from_above.take() {
            dh.iter_mut().zip(&extra).for_each(|(a, b)| *a += b);
        }
        let mut dx = vec![0.0; batch * params[l].input_dim()];
        carry[l] = cell_backward(&params[l], &step[l], &dh, &mut grads[l], &mut dx, batch);
        from_above = Some(dx);
    }
    from_above.unwrap_or_default()
}

/// Masked mean squared error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedLoss {
    pub value: f64,
    pub count: usize,
}

impl MaskedLoss {
    /// False when the mask selected nothing; `value` is then 0.
    pub fn is_defined(&self) -> bool {
        self.count > 0
    }
}

pub fn mse_loss(y_hat: &[f64], y: &[f64], mask: &[bool]) -> Result<MaskedLoss> {
    if y_hat.len() != y.len() || y.len() != mask.len() {
        return Err(Error::Shape(format!(
            "loss inputs differ in length: {} / {} / {}",
            y_hat.len(),
            y.len(),
            mask.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0;
    for ((p, t), &keep) in y_hat.iter().zip(y).zip(mask) {
        if keep {
            let e = p - t;
            sum += e * e;
            count += 1;
        }
    }
    let value = if count > 0 { sum / count as f64 } else { 0.0 };
    Ok(MaskedLoss { value, count })
}

/// `∂ mse / ∂ y_hat`; zero where the mask is false or when nothing is observed.
pub fn mse_grad(y_hat: &[f64], y: &[f64], mask: &[bool]) -> Vec<f64> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return vec![0.0; y_hat.len()];
    }
    let scale = 2.0 / count as f64;
    y_hat
        .iter()
        .zip(y)
        .zip(mask)
        .map(|((p, t), &keep)| if keep { scale * (p - t) } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::params::GruArch;
    use super::*;
    use crate::rng::seeded_rng;
    use rand::Rng;

    fn small_arch() -> GruArch {
        GruArch {
            input_dim: 2,
            hidden_dim: 5,
            num_layers: 2,
            horizon_in: 4,
            horizon_out: 3,
        }
    }

    fn random_model(arch: GruArch, seed: u64) -> GruSeq2Seq {
        let mut m = GruSeq2Seq::init(arch, seed);
        let mut rng = seeded_rng(seed ^ 0xbeef);
        for v in m.values_mut() {
            if *v == 0.0 {
                *v = rng.random_range(-0.3..0.3);
            }
        }
        m
    }

    #[test]
    fn zero_model_predicts_zero() {
        let arch = small_arch();
        let x: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let (y, _) = GruSeq2Seq::zeros(arch).forward(&x).unwrap();
        assert_eq!(y, vec![0.0; 6]);
    }

    #[test]
    fn wrong_length_is_shape_error() {
        let model = GruSeq2Seq::zeros(small_arch());
        assert!(matches!(model.forward(&[0.0; 7]), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_is_pure() {
        let model = random_model(small_arch(), 4);
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = model.predict_batch(&x, 2).unwrap();
        let b = model.predict_batch(&x, 2).unwrap();
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert_eq!(a.len(), 2 * 3 * 2);
    }

    #[test]
    fn loss_examples() {
        assert_eq!(
            mse_loss(&[1.0, 2.0], &[1.0, 2.0], &[true, true])
                .unwrap()
                .value,
            0.0
        );
        assert_eq!(mse_loss(&[1.0], &[3.0], &[true]).unwrap().value, 4.0);
        let empty = mse_loss(&[1.0], &[3.0], &[false]).unwrap();
        assert!(!empty.is_defined());
        assert_eq!(empty.value, 0.0);
    }

    #[test]
    fn loss_matches_naive_loop() {
        let mut rng = seeded_rng(5);
        let n = 64;
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mask: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let mut sum = 0.0;
        let mut cnt = 0.0;
        for i in 0..n {
            if mask[i] {
                sum += (a[i] - b[i]).powi(2);
                cnt += 1.0;
            }
        }
        let got = mse_loss(&a, &b, &mask).unwrap().value;
        assert!((got - sum / cnt).abs() < 1e-12);
    }

    #[test]
    fn zero_mask_gives_zero_gradients() {
        let arch = small_arch();
        let model = random_model(arch, 2);
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let (y, tape) = model.forward(&x).unwrap();
        let dy = mse_grad(&y, &vec![1.0; y.len()], &vec![false; y.len()]);
        let g = model.backward(&tape, &dy).unwrap();
        assert!(g.values().all(|&v| v == 0.0));
    }

    /// Scalar re-derivation of the encoder-decoder for one sequence.
    fn reference_forward(model: &GruSeq2Seq, x: &[f64]) -> Vec<f64> {
        let a = model.arch;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let cell = |p: &super::super::params::GruLayerParams, inp: &[f64], h: &[f64]| -> Vec<f64> {
            let (hd, id) = (p.hidden_dim(), p.input_dim());
            let gate = |w: &[f64], u: &[f64], b: &[f64], hv: &[f64], o: usize| {
                b[o] + (0..id).map(|k| w[o * id + k] * inp[k]).sum::<f64>()
                    + (0..hd).map(|k| u[o * hd + k] * hv[k]).sum::<f64>()
            };
            let z: Vec<f64> = (0..hd)
                .map(|o| sig(gate(&p.w_z.data, &p.u_z.data, &p.b_z.data, h, o)))
                .collect();
            let r: Vec<f64> = (0..hd)
                .map(|o| sig(gate(&p.w_r.data, &p.u_r.data, &p.b_r.data, h, o)))
                .collect();
            let rh: Vec<f64> = (0..hd).map(|k| r[k] * h[k]).collect();
            (0..hd)
                .map(|o| {
                    let c = gate(&p.w_h.data, &p.u_h.data, &p.b_h.data, &rh, o).tanh();
                    (1.0 - z[o]) * h[o] + z[o] * c
                })
                .collect()
        };
        let mut hs = vec![vec![0.0; a.hidden_dim]; a.num_layers];
        for t in 0..a.horizon_in {
            let mut inp = x[t * a.input_dim..(t + 1) * a.input_dim].to_vec();
            for l in 0..a.num_layers {
                hs[l] = cell(&model.encoder[l], &inp, &hs[l]);
                inp = hs[l].clone();
            }
        }
        let mut feed = x[(a.horizon_in - 1) * a.input_dim..].to_vec();
        let mut out = Vec::new();
        for _ in 0..a.horizon_out {
            let mut inp = feed;
            for l in 0..a.num_layers {
                hs[l] = cell(&model.decoder[l], &inp, &hs[l]);
                inp = hs[l].clone();
            }
            let y: Vec<f64> = (0..a.input_dim)
                .map(|d| {
                    model.proj_b.data[d]
                        + (0..a.hidden_dim)
                            .map(|k| model.proj_w.data[d * a.hidden_dim + k] * inp[k])
                            .sum::<f64>()
                })
                .collect();
            out.extend_from_slice(&y);
            feed = y;
        }
        out
    }

    #[test]
    fn forward_matches_reference() {
        let arch = GruArch {
            input_dim: 2,
            hidden_dim: 6,
            num_layers: 2,
            horizon_in: 5,
            horizon_out: 4,
        };
        let model = random_model(arch, 11);
        let mut rng = seeded_rng(12);
        let x: Vec<f64> = (0..3 * 5 * 2)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let got = model.predict_batch(&x, 3).unwrap();
        for b in 0..3 {
            let want = reference_forward(&model, &x[b * 10..(b + 1) * 10]);
            for (g, w) in got[b * 8..(b + 1) * 8].iter().zip(&want) {
                assert!((g - w).abs() < 1e-10, "{g} vs {w}");
            }
        }
    }

    fn gradient(model: &GruSeq2Seq, x: &[f64], y: &[f64], mask: &[bool], batch: usize) -> Vec<f64> {
        let (y_hat, tape) = model.forward_batch(x, batch).unwrap();
        model
            .backward(&tape, &mse_grad(&y_hat, y, mask))
            .unwrap()
            .values()
            .copied()
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let arch = GruArch {
            input_dim: 1,
            hidden_dim: 8,
            num_layers: 2,
            horizon_in: 4,
            horizon_out: 4,
        };
        let model = random_model(arch, 11);
        let mut rng = seeded_rng(12);
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.5..1.5)).collect();
        let y: Vec<f64> = (0..8).map(|_| rng.random_range(-1.5..1.5)).collect();
        let mut mask = vec![true; 8];
        mask[2] = false;
        let loss = |m: &GruSeq2Seq| {
            mse_loss(&m.predict_batch(&x, 2).unwrap(), &y, &mask)
                .unwrap()
                .value
        };
        let analytic = gradient(&model, &x, &y, &mask, 2);
        let eps = 1e-5;
        let mut probe = model.clone();
        for (i, a) in analytic.iter().enumerate() {
            let orig = *probe.values().nth(i).unwrap();
            *probe.values_mut().nth(i).unwrap() = orig + eps;
            let up = loss(&probe);
            *probe.values_mut().nth(i).unwrap() = orig - eps;
            let down = loss(&probe);
            *probe.values_mut().nth(i).unwrap() = orig;
            let numeric = (up - down) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {i}: analytic {a} numeric {numeric}");
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_example_gradients() {
        let arch = GruArch {
            input_dim: 1,
            hidden_dim: 8,
            num_layers: 2,
            horizon_in: 4,
            horizon_out: 4,
        };
        let model = random_model(arch, 3);
        let mut rng = seeded_rng(4);
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.5..1.5)).collect();
        let y: Vec<f64> = (0..8).map(|_| rng.random_range(-1.5..1.5)).collect();
        let mask = vec![true; 8];
        let both = gradient(&model, &x, &y, &mask, 2);
        let first = gradient(&model, &x[..4], &y[..4], &mask[..4], 1);
        let second = gradient(&model, &x[4..], &y[4..], &mask[4..], 1);
        for ((b, f), s) in both.iter().zip(&first).zip(&second) {
            assert!((b - 0.5 * (f + s)).abs() < 1e-10);
        }
    }

    #[test]
    fn tape_mismatch_is_internal_error() {
        let model = random_model(small_arch(), 2);
        let (y, tape) = model.forward(&[0.1; 8]).unwrap();
        let other = GruSeq2Seq::zeros(GruArch {
            hidden_dim: 4,
            ..small_arch()
        });
        assert!(matches!(other.backward(&tape, &y), Err(Error::Internal(_))));
    }
}
