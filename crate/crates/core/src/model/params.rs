use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded_rng;

/// Architecture of a client forecaster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GruArch {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub horizon_in: usize,
    pub horizon_out: usize,
}

impl Default for GruArch {
    fn default() -> Self {
        Self {
            input_dim: 1,
            hidden_dim: 100,
            num_layers: 2,
            horizon_in: 12,
            horizon_out: 12,
        }
    }
}

impl GruArch {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("horizon_in", self.horizon_in),
            ("horizon_out", self.horizon_out),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("arch.{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Input width of GRU layer `layer` (both encoder and decoder stacks).
    pub fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.hidden_dim
        }
    }
}

/// Dense row-major tensor of rank 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// One GRU layer: `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = (1 - z) ⊙ h + z ⊙ h̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruLayerParams {
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_h: Tensor,
    pub u_z: Tensor,
    pub u_r: Tensor,
    pub u_h: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
    pub b_h: Tensor,
}

pub(crate) const LAYER_TENSOR_NAMES: [&str; 9] = [
    "w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h",
];

impl GruLayerParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            w_z: Tensor::zeros(&[hidden, input_dim]),
            w_r: Tensor::zeros(&[hidden, input_dim]),
            w_h: Tensor::zeros(&[hidden, input_dim]),
            u_z: Tensor::zeros(&[hidden, hidden]),
            u_r: Tensor::zeros(&[hidden, hidden]),
            u_h: Tensor::zeros(&[hidden, hidden]),
            b_z: Tensor::zeros(&[hidden]),
            b_r: Tensor::zeros(&[hidden]),
            b_h: Tensor::zeros(&[hidden]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.shape[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_z.shape[0]
    }

    /// Tensors in canonical order: input weights, hidden weights, biases (each z, r, h).
    pub fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.w_z, &self.w_r, &self.w_h, &self.u_z, &self.u_r, &self.u_h, &self.b_z, &self.b_r,
            &self.b_h,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_h,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_h,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_h,
        ]
    }
}

/// GRU encoder-decoder forecaster. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct GruSeq2Seq {
    pub arch: GruArch,
    pub encoder: Vec<GruLayerParams>,
    pub decoder: Vec<GruLayerParams>,
    /// `input_dim x hidden_dim`
    pub proj_w: Tensor,
    /// `input_dim`
    pub proj_b: Tensor,
}

/// Gradients share the parameter container's shape.
pub type Grads = GruSeq2Seq;

impl GruSeq2Seq {
    pub fn zeros(arch: GruArch) -> Self {
        let stack = || {
            (0..arch.num_layers)
                .map(|l| GruLayerParams::zeros(arch.layer_input_dim(l), arch.hidden_dim))
                .collect()
        };
        Self {
            arch,
            encoder: stack(),
            decoder: stack(),
            proj_w: Tensor::zeros(&[arch.input_dim, arch.hidden_dim]),
            proj_b: Tensor::zeros(&[arch.input_dim]),
        }
    }

    /// Weights uniform in `±1/√hidden_dim`, biases zero. Same `(arch, seed)` gives
    /// bit-identical parameters.
    pub fn init(arch: GruArch, seed: u64) -> Self {
        let mut model = Self::zeros(arch);
        let bound = 1.0 / (arch.hidden_dim as f64).sqrt();
        let mut rng = seeded_rng(seed);
        for (name, t) in model.named_tensors_mut() {
            if name
                .rsplit('.')
                .next()
                .is_some_and(|leaf| leaf.starts_with('b'))
            {
                continue;
            }
            for v in &mut t.data {
                *v = rng.random_range(-bound..=bound);
            }
        }
        model
    }

    /// Tensor names in canonical order, e.g. `encoder.0.w_z`, `proj.w`.
    pub fn tensor_names(arch: &GruArch) -> Vec<String> {
        let mut names = Vec::new();
        for stack in ["encoder", "decoder"] {
            for l in 0..arch.num_layers {
                names.extend(
                    LAYER_TENSOR_NAMES
                        .iter()
                        .map(|t| format!("{stack}.{l}.{t}")),
                );
            }
        }
        names.push("proj.w".into());
        names.push("proj.b".into());
        names
    }

    /// Tensors in canonical order: encoder layers, decoder layers, output projection.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for layer in self.encoder.iter().chain(&self.decoder) {
            out.extend(layer.tensors());
        }
        out.push(&self.proj_w);
        out.push(&self.proj_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for layer in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.proj_w);
        out.push(&mut self.proj_b);
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        Self::tensor_names(&self.arch)
            .into_iter()
            .zip(self.tensors())
            .collect()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let names = Self::tensor_names(&self.arch);
        names.into_iter().zip(self.tensors_mut()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All parameters in canonical order.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.tensors().into_iter().flat_map(|t| t.data.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.tensors_mut()
            .into_iter()
            .flat_map(|t| t.data.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// Adds `other * scale` elementwise. Shapes must match.
    pub fn add_scaled(&mut self, other: &GruSeq2Seq, scale: f64) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.values_mut() {
            *v *= factor;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let arch = GruArch::default();
        let a = GruSeq2Seq::init(arch, 0);
        let b = GruSeq2Seq::init(arch, 0);
        assert!(a
            .values()
            .zip(b.values())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        for (name, t) in a.named_tensors() {
            if name.ends_with(".b_z")
                || name.ends_with(".b_r")
                || name.ends_with(".b_h")
                || name == "proj.b"
            {
                assert!(t.data.iter().all(|&v| v == 0.0), "{name}");
            }
        }
        assert_ne!(a, GruSeq2Seq::init(arch, 1));
    }

    #[test]
    fn init_respects_bound() {
        let model = GruSeq2Seq::init(GruArch::default(), 3);
        assert!(model.values().all(|v| v.abs() <= 0.1));
        // weights actually populated
        assert!(model.values().filter(|v| v.abs() > 0.05).count() > 1000);
    }

    #[test]
    fn parameter_count_matches_shapes() {
        let arch = GruArch {
            input_dim: 2,
            hidden_dim: 5,
            num_layers: 2,
            horizon_in: 3,
            horizon_out: 3,
        };
        let m = GruSeq2Seq::zeros(arch);
        let layer0 = 3 * 5 * 2 + 3 * 5 * 5 + 3 * 5;
        let layer1 = 3 * 5 * 5 + 3 * 5 * 5 + 3 * 5;
        assert_eq!(m.num_params(), 2 * (layer0 + layer1) + 2 * 5 + 2);
        assert_eq!(GruSeq2Seq::tensor_names(&arch).len(), m.tensors().len());
    }

    #[test]
    fn arch_validation() {
        assert!(GruArch::default().validate().is_ok());
        let bad = GruArch {
            hidden_dim: 0,
            ..GruArch::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
