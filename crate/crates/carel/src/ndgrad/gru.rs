//! A gated recurrent unit assembled from tape primitives, used by both the
//! instruction encoder and the episode/policy memory.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::scalar::Scalar;
use super::tape::{Node, Tape};
use super::tensor::Tensor;

/// Parameter tensors of one GRU cell (update gate `z`, reset gate `r`,
/// candidate `h`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruParams<F: Scalar> {
    pub wz: Tensor<F>,
    pub uz: Tensor<F>,
    pub bz: Tensor<F>,
    pub wr: Tensor<F>,
    pub ur: Tensor<F>,
    pub br: Tensor<F>,
    pub wh: Tensor<F>,
    pub uh: Tensor<F>,
    pub bh: Tensor<F>,
}

impl<F: Scalar> GruParams<F> {
    /// Uniform `±1/√hidden` initialization for the weight matrices, zero
    /// biases.
    pub fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = F::from_f64_exact(1.0 / (hidden as f64).sqrt());
        let mut mat = |rows: usize, cols: usize| {
            let data = (0..rows * cols)
                .map(|_| {
                    let u: f64 = rng.gen_range(-1.0..1.0);
                    F::from_f64_exact(u) * bound
                })
                .collect();
            Tensor::new(vec![rows, cols], data).expect("gru init shape")
        };
        GruParams {
            wz: mat(hidden, input),
            uz: mat(hidden, hidden),
            bz: Tensor::zeros(vec![hidden]),
            wr: mat(hidden, input),
            ur: mat(hidden, hidden),
            br: Tensor::zeros(vec![hidden]),
            wh: mat(hidden, input),
            uh: mat(hidden, hidden),
            bh: Tensor::zeros(vec![hidden]),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.bz.numel()
    }

    pub fn input_size(&self) -> usize {
        self.wz.cols()
    }

    /// Name/tensor pairs, with `prefix` prepended, in a fixed order suitable
    /// for a parameter registry.
    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<F>)> {
        [
            ("wz", &self.wz),
            ("uz", &self.uz),
            ("bz", &self.bz),
            ("wr", &self.wr),
            ("ur", &self.ur),
            ("br", &self.br),
            ("wh", &self.wh),
            ("uh", &self.uh),
            ("bh", &self.bh),
        ]
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<F>)> {
        [
            ("wz", &mut self.wz),
            ("uz", &mut self.uz),
            ("bz", &mut self.bz),
            ("wr", &mut self.wr),
            ("ur", &mut self.ur),
            ("br", &mut self.br),
            ("wh", &mut self.wh),
            ("uh", &mut self.uh),
            ("bh", &mut self.bh),
        ]
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
    }
}

/// The same nine parameters registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GruNodes {
    pub wz: Node,
    pub uz: Node,
    pub bz: Node,
    pub wr: Node,
    pub ur: Node,
    pub br: Node,
    pub wh: Node,
    pub uh: Node,
    pub bh: Node,
}

impl GruNodes {
    pub fn insert<F: Scalar>(tape: &mut Tape<F>, params: &GruParams<F>) -> Result<Self> {
        Ok(GruNodes {
            wz: tape.param(params.wz.clone())?,
            uz: tape.param(params.uz.clone())?,
            bz: tape.param(params.bz.clone())?,
            wr: tape.param(params.wr.clone())?,
            ur: tape.param(params.ur.clone())?,
            br: tape.param(params.br.clone())?,
            wh: tape.param(params.wh.clone())?,
            uh: tape.param(params.uh.clone())?,
            bh: tape.param(params.bh.clone())?,
        })
    }
}

/// One recurrence step:
///
/// ```text
/// z  = σ(Wz x + Uz h + bz)
/// r  = σ(Wr x + Ur h + br)
/// ĥ  = tanh(Wh x + Uh (r ⊙ h) + bh)
/// h' = h + z ⊙ (ĥ − h)
/// ```
pub fn gru_cell<F: Scalar>(
    tape: &mut Tape<F>,
    p: &GruNodes,
    x: Node,
    h: Node,
) -> Result<Node> {
    let gate = |tape: &mut Tape<F>, w: Node, u: Node, b: Node, hin: Node| -> Result<Node> {
        let wx = tape.matvec(w, x)?;
        let uh = tape.matvec(u, hin)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, b)
    };
    let z_pre = gate(tape, p.wz, p.uz, p.bz, h)?;
    let z = tape.sigmoid(z_pre)?;
    let r_pre = gate(tape, p.wr, p.ur, p.br, h)?;
    let r = tape.sigmoid(r_pre)?;
    let rh = tape.mul(r, h)?;
    let hcand_pre = gate(tape, p.wh, p.uh, p.bh, rh)?;
    let hcand = tape.tanh(hcand_pre)?;
    let delta = tape.sub(hcand, h)?;
    let update = tape.mul(z, delta)?;
    tape.add(h, update)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::fd::central_difference_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run_chain(params: &GruParams<f64>, xs: &[Tensor<f64>]) -> f64 {
        let mut tape = Tape::new();
        let p = GruNodes::insert(&mut tape, params).unwrap();
        let mut h = tape
            .constant(Tensor::zeros(vec![params.hidden_size()]))
            .unwrap();
        for x in xs {
            let xn = tape.constant(x.clone()).unwrap();
            h = gru_cell(&mut tape, &p, xn, h).unwrap();
        }
        let loss = tape.sum_all(h).unwrap();
        tape.value(loss).scalar_value().unwrap()
    }

    #[test]
    fn hidden_state_stays_bounded() {
        // h is a convex combination of its previous value and a tanh output,
        // so from h₀ = 0 it can never leave (−1, 1).
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = GruParams::<f64>::init(4, 6, &mut rng);
        let mut tape = Tape::new();
        let p = GruNodes::insert(&mut tape, &params).unwrap();
        let mut h = tape.constant(Tensor::zeros(vec![6])).unwrap();
        for step in 0..50 {
            let x = Tensor::vector((0..4).map(|i| ((step * 4 + i) as f64).sin() * 3.0).collect());
            let xn = tape.constant(x).unwrap();
            h = gru_cell(&mut tape, &p, xn, h).unwrap();
        }
        for v in tape.value(h).data() {
            assert!(v.abs() < 1.0, "hidden state escaped its bound: {v}");
        }
    }

    #[test]
    fn gradients_through_two_steps_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let params = GruParams::<f64>::init(3, 2, &mut rng);
        let xs: Vec<Tensor<f64>> = (0..2)
            .map(|s| Tensor::vector((0..3).map(|i| ((s * 3 + i) as f64 * 0.7).cos()).collect()))
            .collect();

        let mut tape = Tape::new();
        let p = GruNodes::insert(&mut tape, &params).unwrap();
        let param_nodes = [
            p.wz, p.uz, p.bz, p.wr, p.ur, p.br, p.wh, p.uh, p.bh,
        ];
        let mut h = tape.constant(Tensor::zeros(vec![2])).unwrap();
        for x in &xs {
            let xn = tape.constant(x.clone()).unwrap();
            h = gru_cell(&mut tape, &p, xn, h).unwrap();
        }
        let loss = tape.sum_all(h).unwrap();
        let grads = tape.backward(loss).unwrap();

        let tensors = params.named("gru");
        for (k, node) in param_nodes.iter().enumerate() {
            let (name, tensor) = &tensors[k];
            let analytic = grads.grad_or_zero(*node, tensor.shape());
            let fd = central_difference_grad(
                &mut |probe: &Tensor<f64>| {
                    let mut perturbed = params.clone();
                    *perturbed.named_mut("gru")[k].1 = probe.clone();
                    Ok(run_chain(&perturbed, &xs))
                },
                tensor,
                1e-5,
            )
            .unwrap();
            let diff = analytic.max_abs_diff(&fd).unwrap();
            assert!(diff < 1e-6, "{name}: analytic vs fd diff {diff:.3e}");
        }
    }
}
