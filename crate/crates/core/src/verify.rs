//! Self-checks: every tape op against central finite differences, and the
//! input-gradient factorization through the domain features on random nets.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{finite_difference_gradient, relative_error, NodeId, OpKind, Tape};
use crate::error::Result;
use crate::nets::{init_params, FeatureActivation, NetConfig, Role};
use crate::rng::keyed;
use crate::tensor::Tensor;
use crate::trainers::chain_rule_identity_check;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-5;
pub const IDENTITY_TOLERANCE: f64 = 1e-9;
/// Relative errors are taken against at least this gradient magnitude.
pub const REL_FLOOR: f64 = 1e-6;

/// Ops with a backward rule, in check order.
pub const CHECKED_OPS: [OpKind; 12] = [
    OpKind::Affine,
    OpKind::Relu,
    OpKind::Conv2d,
    OpKind::MaxPool2,
    OpKind::Concat,
    OpKind::SoftmaxCrossEntropy,
    OpKind::Sum,
    OpKind::Dot,
    OpKind::Scale,
    OpKind::Add,
    OpKind::GradientReversal,
    OpKind::Reshape,
];

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: OpKind,
    pub configs: usize,
    pub max_rel_err: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= FD_TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, so ReLU kinks stay out of FD reach.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values spaced far apart relative to the FD step, in random order.
fn tie_free(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 1.0).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// Random inputs for one op and a builder from input nodes to the op output.
struct Case {
    inputs: Vec<Tensor>,
    build: Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>,
    /// Backward is expected to equal this factor times the FD gradient.
    expected_factor: f64,
}

fn random_case(op: OpKind, rng: &mut ChaCha8Rng) -> Case {
    let b = rng.gen_range(1..4);
    let plain = |build: Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>, inputs| Case {
        inputs,
        build,
        expected_factor: 1.0,
    };
    match op {
        OpKind::Affine => {
            let (m, k) = (rng.gen_range(1..5), rng.gen_range(1..5));
            let inputs = vec![
                uniform(rng, &[b, m], -1.0, 1.0),
                uniform(rng, &[m, k], -1.0, 1.0),
                uniform(rng, &[k], -1.0, 1.0),
            ];
            plain(Box::new(|t, ids| t.affine(ids[0], ids[1], ids[2])), inputs)
        }
        OpKind::Relu => {
            let n = rng.gen_range(1..6);
            let x = off_kink(rng, &[b, n]);
            plain(Box::new(|t, ids| Ok(t.relu(ids[0]))), vec![x])
        }
        OpKind::Conv2d => {
            let (c, f) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let (h, w) = (rng.gen_range(3..6), rng.gen_range(3..6));
            let (kh, kw) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let stride = rng.gen_range(1..3);
            let inputs = vec![
                uniform(rng, &[b.min(2), c, h, w], -1.0, 1.0),
                uniform(rng, &[f, c, kh, kw], -1.0, 1.0),
                uniform(rng, &[f], -1.0, 1.0),
            ];
            plain(
                Box::new(move |t, ids| t.conv2d(ids[0], ids[1], ids[2], stride)),
                inputs,
            )
        }
        OpKind::MaxPool2 => {
            let c = rng.gen_range(1..3);
            let (h, w) = (2 * rng.gen_range(1..4), 2 * rng.gen_range(1..4));
            let x = tie_free(rng, &[b.min(2), c, h, w]);
            plain(Box::new(|t, ids| t.max_pool2(ids[0])), vec![x])
        }
        OpKind::Concat => {
            let (m, k) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let inputs = vec![uniform(rng, &[b, m], -1.0, 1.0), uniform(rng, &[b, k], -1.0, 1.0)];
            plain(Box::new(|t, ids| t.concat(ids[0], ids[1])), inputs)
        }
        OpKind::SoftmaxCrossEntropy => {
            let k = rng.gen_range(2..6);
            let targets: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
            let logits = uniform(rng, &[b, k], -3.0, 3.0);
            plain(
                Box::new(move |t, ids| t.softmax_cross_entropy(ids[0], &targets)),
                vec![logits],
            )
        }
        OpKind::Sum => {
            let shape: Vec<usize> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(1..4)).collect();
            let x = uniform(rng, &shape, -1.0, 1.0);
            plain(Box::new(|t, ids| Ok(t.sum(ids[0]))), vec![x])
        }
        OpKind::Dot => {
            let n = rng.gen_range(1..6);
            let w = uniform(rng, &[b, n], -1.0, 1.0);
            let x = uniform(rng, &[b, n], -1.0, 1.0);
            plain(Box::new(move |t, ids| t.dot(ids[0], w.clone())), vec![x])
        }
        OpKind::Scale => {
            let factor = rng.gen_range(-2.0..2.0);
            let n = rng.gen_range(1..5);
            let x = uniform(rng, &[b, n], -1.0, 1.0);
            plain(Box::new(move |t, ids| Ok(t.scale(ids[0], factor))), vec![x])
        }
        OpKind::Add => {
            let n = rng.gen_range(1..5);
            let inputs = vec![uniform(rng, &[b, n], -1.0, 1.0), uniform(rng, &[b, n], -1.0, 1.0)];
            plain(Box::new(|t, ids| t.add(ids[0], ids[1])), inputs)
        }
        OpKind::GradientReversal => {
            let lambda = rng.gen_range(0.1..2.0);
            let n = rng.gen_range(1..5);
            let x = uniform(rng, &[b, n], -1.0, 1.0);
            Case {
                inputs: vec![x],
                build: Box::new(move |t, ids| Ok(t.gradient_reversal(ids[0], lambda))),
                expected_factor: -lambda,
            }
        }
        OpKind::Reshape => {
            let n = rng.gen_range(1..5);
            let x = uniform(rng, &[b, n], -1.0, 1.0);
            plain(Box::new(move |t, ids| t.reshape(ids[0], vec![n, b])), vec![x])
        }
        OpKind::Leaf => unreachable!("leaves have no backward rule"),
    }
}

/// Runs one case: loss = Σ out ⊙ r for fixed random r, compared per input.
fn check_case(case: &Case, rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let forward = |inputs: &[Tensor]| -> Result<(Tape, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = (case.build)(&mut tape, &ids)?;
        Ok((tape, ids, out))
    };
    let (mut tape, ids, out) = forward(&case.inputs)?;
    let weights = uniform(rng, tape.value(out).shape(), -1.0, 1.0);
    let loss = tape.dot(out, weights.clone())?;
    if let Some(kind) = fault {
        tape.inject_fault(kind);
    }
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    for (i, &id) in ids.iter().enumerate() {
        let fd = finite_difference_gradient(
            |probe| {
                let mut inputs = case.inputs.clone();
                inputs[i] = probe.clone();
                let (tape, _, out) = forward(&inputs)?;
                let v = tape.value(out);
                Ok(v.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
            },
            &case.inputs[i],
            FD_STEP,
        )?;
        let expected = fd.map(|v| v * case.expected_factor);
        worst = worst.max(relative_error(&grads.get(id), &expected, REL_FLOOR));
    }
    Ok(worst)
}

/// Checks every op over `configs` random configurations each.
pub fn check_ops(seed: u64, configs: usize, fault: Option<OpKind>) -> Result<Vec<OpCheck>> {
    CHECKED_OPS
        .iter()
        .enumerate()
        .map(|(k, &op)| {
            let mut rng = keyed(seed, 0x6000 + k as u64);
            let mut max_rel_err = 0.0f64;
            for _ in 0..configs {
                let case = random_case(op, &mut rng);
                max_rel_err = max_rel_err.max(check_case(&case, &mut rng, fault)?);
            }
            Ok(OpCheck {
                op,
                configs,
                max_rel_err,
            })
        })
        .collect()
}

/// Largest |𝕁ᵀ∇_ĝ J_d − ∇_x J_d| over `nets` random domain networks and inputs.
pub fn identity_sweep(seed: u64, nets: usize) -> Result<f64> {
    let mut rng = keyed(seed, 0x7000);
    let mut worst = 0.0f64;
    for i in 0..nets {
        let dim = rng.gen_range(1..6);
        let num_domains = rng.gen_range(2..5);
        let mut net = NetConfig::vector(dim, 2, num_domains);
        net.domain_hidden = (0..rng.gen_range(0..3)).map(|_| rng.gen_range(1..8)).collect();
        net.g_dim = rng.gen_range(1..6);
        net.g_activation = if rng.gen_bool(0.5) {
            FeatureActivation::Relu
        } else {
            FeatureActivation::Identity
        };
        let mut theta_d = init_params(&net, Role::Domain, seed.wrapping_add(i as u64))?;
        // Nonzero biases so ReLUs sit on both sides of the kink.
        for (name, t) in theta_d.tensors().to_vec() {
            if name.ends_with(".b") {
                *theta_d.get_mut(&name).unwrap() = uniform(&mut rng, t.shape(), -0.5, 0.5);
            }
        }
        let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let d = rng.gen_range(0..num_domains);
        worst = worst.max(chain_rule_identity_check(&net, &theta_d, &x, d)?.max_abs_diff);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_a_few_configs() {
        for check in check_ops(1, 3, None).unwrap() {
            assert!(check.passed(), "{:?}", check);
        }
    }

    #[test]
    fn injected_fault_is_caught_for_that_op_only() {
        let checks = check_ops(2, 2, Some(OpKind::Affine)).unwrap();
        for c in checks {
            assert_eq!(c.passed(), c.op != OpKind::Affine, "{c:?}");
        }
    }

    #[test]
    fn identity_holds_on_random_nets() {
        assert!(identity_sweep(3, 20).unwrap() <= IDENTITY_TOLERANCE);
    }
}
