mod common;

use common::ops::{catalog, random_inputs};
use proptest::prelude::*;
use vpcnet::tensor::check_gradients;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_op_matches_central_differences(seed in any::<u64>()) {
        for (name, shapes, f) in catalog() {
            let inputs = random_inputs(&shapes, seed);
            let check = check_gradients(&inputs, 1e-5, |x| f(x)).unwrap();
            prop_assert!(check.max_rel_err < 1e-4, "{name}: {check:?}");
        }
    }
}

#[test]
fn checker_catches_a_wrong_backward_rule() {
    use vpcnet::tensor::Tensor;
    // forward squares each entry, backward claims the derivative is x
    let square_with_bad_grad = |x: &[Tensor]| {
        let t = &x[0];
        let data: Vec<f64> = t.data().iter().map(|v| v * v).collect();
        let saved = t.data().to_vec();
        let y = Tensor::custom(
            "bad_square",
            t.shape().to_vec(),
            data,
            vec![t.clone()],
            Box::new(move |g| vec![g.iter().zip(&saved).map(|(g, x)| g * x).collect()]),
        )?;
        y.sum()
    };
    let x = random_inputs(&[vec![2, 2]], 1);
    let check = check_gradients(&x, 1e-5, square_with_bad_grad).unwrap();
    assert!(check.max_rel_err > 0.4, "{check:?}");
}
