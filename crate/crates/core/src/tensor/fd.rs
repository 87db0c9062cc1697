//! Finite-difference gradient checking. Test-support code: the checks here
//! re-evaluate the recorded forward computation at perturbed inputs, so they
//! are independent of every backward rule they verify.

use super::{Tape, Tensor};

/// Relative disagreement with a floor so near-zero gradients compare by
/// absolute difference.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Run `check_gradients` over every differentiable operation with random
/// inputs in [-2, 2] drawn from `seed`. Each op is scalarized through a
/// random-weighted sum so output gradients are non-uniform. Panics on the
/// first violation.
pub fn check_all_ops(seed: u64, step: f64, tol: f64) {
    use super::SeededRng;
    let mut rng = SeededRng::new(seed);
    let mut draw = |shape: &[usize]| -> Tensor {
        let values = (0..super::numel(shape)).map(|_| rng.uniform(-2.0, 2.0)).collect();
        Tensor::new(shape.to_vec(), values).unwrap()
    };

    // Weighted-sum scalarizer: out is multiplied elementwise by one extra
    // constant input (appended last, not checked) and summed.
    macro_rules! check {
        ($inputs:expr, |$tape:ident, $ids:ident| $body:expr) => {{
            let mut inputs = $inputs;
            let out_shape: Vec<usize> = {
                let mut $tape = Tape::new();
                let $ids: Vec<_> = inputs.iter().map(|t| $tape.leaf(t)).collect();
                let out = $body;
                $tape.shape(out).to_vec()
            };
            inputs.push(draw(&out_shape));
            // The weight leaf gets checked too; its gradient is just the op
            // output, which costs little and adds a sanity check on `mul`.
            check_gradients(
                |$tape: &mut Tape, $ids: &[super::NodeId]| {
                    let w = *$ids.last().unwrap();
                    let $ids = &$ids[..$ids.len() - 1];
                    let out = $body;
                    let weighted = $tape.mul(out, w).unwrap();
                    $tape.sum_all(weighted)
                },
                &inputs,
                step,
                tol,
            );
        }};
    }

    check!(vec![draw(&[3, 4]), draw(&[4, 2])], |t, ids| t
        .matmul(ids[0], ids[1])
        .unwrap());
    check!(vec![draw(&[2, 3, 4]), draw(&[4, 2])], |t, ids| t
        .matmul(ids[0], ids[1])
        .unwrap());
    check!(vec![draw(&[2, 3, 4]), draw(&[2, 4, 2])], |t, ids| t
        .matmul(ids[0], ids[1])
        .unwrap());
    check!(vec![draw(&[3, 4]), draw(&[2, 4])], |t, ids| t
        .matmul_t(ids[0], ids[1], true)
        .unwrap());
    check!(vec![draw(&[2, 3, 4]), draw(&[2, 5, 4])], |t, ids| t
        .matmul_t(ids[0], ids[1], true)
        .unwrap());
    check!(vec![draw(&[2, 3]), draw(&[3, 4]), draw(&[4])], |t, ids| t
        .affine(ids[0], ids[1], ids[2])
        .unwrap());
    check!(vec![draw(&[2, 3]), draw(&[2, 3])], |t, ids| t.add(ids[0], ids[1]).unwrap());
    check!(vec![draw(&[2, 3, 4]), draw(&[4])], |t, ids| t.add(ids[0], ids[1]).unwrap());
    check!(vec![draw(&[2, 3]), draw(&[3])], |t, ids| t.sub(ids[0], ids[1]).unwrap());
    check!(vec![draw(&[2, 3, 2]), draw(&[3, 2])], |t, ids| t
        .mul(ids[0], ids[1])
        .unwrap());
    check!(vec![draw(&[5])], |t, ids| t.neg(ids[0]));
    check!(vec![draw(&[5])], |t, ids| t.add_scalar(ids[0], 1.5));
    check!(vec![draw(&[5])], |t, ids| t.mul_scalar(ids[0], -0.7));
    check!(vec![draw(&[2, 3]), draw(&[2, 5])], |t, ids| t
        .concat(&[ids[0], ids[1]], 1)
        .unwrap());
    check!(vec![draw(&[2, 2, 3]), draw(&[2, 1, 3])], |t, ids| t
        .concat(&[ids[0], ids[1]], 1)
        .unwrap());
    check!(vec![draw(&[2, 6])], |t, ids| t.reshape(ids[0], &[3, 4]).unwrap());
    check!(vec![draw(&[2, 3])], |t, ids| t.repeat_positions(ids[0], 4).unwrap());
    check!(vec![draw(&[4, 3])], |t, ids| t.lookup(ids[0], &[1, 3, 1]).unwrap());
    check!(vec![draw(&[2, 5])], |t, ids| t.sigmoid(ids[0]));
    check!(vec![draw(&[2, 5])], |t, ids| t.gelu(ids[0]));
    check!(vec![draw(&[2, 5])], |t, ids| t.exp(ids[0]));
    check!(vec![draw(&[2, 5])], |t, ids| t.softmax(ids[0], 1).unwrap());
    check!(vec![draw(&[2, 3, 4])], |t, ids| t.softmax(ids[0], 1).unwrap());
    check!(vec![draw(&[3, 4]), draw(&[4]), draw(&[4])], |t, ids| t
        .layer_norm(ids[0], ids[1], ids[2], 1e-5)
        .unwrap());
    check!(vec![draw(&[2, 4, 3])], |t, ids| t.mean_axis(ids[0], 1).unwrap());

    // Scalar-output ops, checked directly without the weighted wrapper.
    check_gradients(
        |t, ids| t.sum_all(ids[0]),
        &[draw(&[3, 3])],
        step,
        tol,
    );
    check_gradients(
        |t, ids| t.mean_all(ids[0]).unwrap(),
        &[draw(&[3, 3])],
        step,
        tol,
    );
    check_gradients(
        |t, ids| t.mse_loss(ids[0], ids[1]).unwrap(),
        &[draw(&[3, 4]), draw(&[3, 4])],
        step,
        tol,
    );
}

/// Check d(scalar)/d(inputs) for `build` against central differences.
///
/// `build` must construct the computation from leaves appended in the order
/// of `inputs` and return the scalar output node. Every input is checked at
/// every coordinate; panics with coordinates on the first violation.
pub fn check_gradients<F>(build: F, inputs: &[Tensor], step: f64, tol: f64)
where
    F: Fn(&mut Tape, &[super::NodeId]) -> super::NodeId,
{
    let run = |tensors: &[Tensor]| -> (Tape, super::NodeId, Vec<super::NodeId>) {
        let mut tape = Tape::new();
        let ids: Vec<_> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let out = build(&mut tape, &ids);
        (tape, out, ids)
    };

    let owned: Vec<Tensor> = inputs
        .iter()
        .map(|t| t.clone().with_grad())
        .collect();
    let (mut tape, out, ids) = run(&owned);
    assert_eq!(tape.values(out).len(), 1, "build must return a scalar");
    tape.backward(out).expect("backward failed");

    for (ti, id) in ids.iter().enumerate() {
        let analytic = tape
            .grad(*id)
            .unwrap_or_else(|| panic!("no gradient reached input {ti}"))
            .to_vec();
        for ci in 0..owned[ti].numel() {
            let mut plus = owned.clone();
            plus[ti].values[ci] += step;
            let (ptape, pout, _) = run(&plus);
            let mut minus = owned.clone();
            minus[ti].values[ci] -= step;
            let (mtape, mout, _) = run(&minus);
            let fd = (ptape.values(pout)[0] - mtape.values(mout)[0]) / (2.0 * step);
            let err = rel_err(analytic[ci], fd);
            assert!(
                err < tol,
                "input {ti} coord {ci}: analytic {} vs finite diff {} (rel err {:.3e})",
                analytic[ci],
                fd,
                err
            );
        }
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_ops_pass_finite_difference_checks() {
        super::check_all_ops(20447, 1e-4, 1e-3);
    }

    #[test]
    fn matmul_gradient_is_tight() {
        // Quadratic in each operand, so central differences are exact up to
        // rounding; hold this one to 1e-6.
        use crate::tensor::{SeededRng, Tape, Tensor};
        let mut rng = SeededRng::new(8);
        let a = Tensor::randn(&[3, 4], &mut rng);
        let b = Tensor::randn(&[4, 2], &mut rng);
        super::check_gradients(
            |t: &mut Tape, ids| {
                let c = t.matmul(ids[0], ids[1]).unwrap();
                t.sum_all(c)
            },
            &[a, b],
            1e-4,
            1e-6,
        );
    }
}
