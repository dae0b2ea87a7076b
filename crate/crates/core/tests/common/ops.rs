//! Every differentiable op with input shapes, for finite-difference checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpcnet::error::Result;
use vpcnet::metrics::{chamfer_loss, emd_loss, matched_distance_loss, EmdSolver};
use vpcnet::tensor::{shared_mlp_layer, Activation, Norm, Tensor};

pub type OpFn = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

/// Collapses any output to a scalar with fixed, uneven weights so that
/// every output element contributes a distinct gradient.
pub fn weighted_sum(t: &Tensor) -> Result<Tensor> {
    let w: Vec<f64> = (0..t.numel()).map(|k| (k as f64 * 0.73 + 0.31).sin()).collect();
    t.mul(&Tensor::constant(t.shape(), w)?)?.sum()
}

pub fn random_inputs(shapes: &[Vec<usize>], seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            Tensor::constant(s, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        })
        .collect()
}

pub fn catalog() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    let v = |s: &[usize]| s.to_vec();
    vec![
        ("matmul", vec![v(&[3, 4]), v(&[4, 2])], Box::new(|x: &[Tensor]| weighted_sum(&x[0].matmul(&x[1])?))),
        ("add", vec![v(&[3, 4]), v(&[3, 4])], Box::new(|x: &[Tensor]| weighted_sum(&x[0].add(&x[1])?))),
        ("sub", vec![v(&[3, 4]), v(&[3, 4])], Box::new(|x: &[Tensor]| weighted_sum(&x[0].sub(&x[1])?))),
        ("mul", vec![v(&[3, 4]), v(&[3, 4])], Box::new(|x: &[Tensor]| weighted_sum(&x[0].mul(&x[1])?))),
        ("scale", vec![v(&[3, 4])], Box::new(|x: &[Tensor]| weighted_sum(&x[0].scale(-1.7)?))),
        ("add_row", vec![v(&[3, 4]), v(&[4])], Box::new(|x: &[Tensor]| weighted_sum(&x[0].add_row(&x[1])?))),
        ("relu", vec![v(&[4, 5])], Box::new(|x: &[Tensor]| weighted_sum(&x[0].relu()?))),
        ("tanh", vec![v(&[4, 5])], Box::new(|x: &[Tensor]| weighted_sum(&x[0].tanh()?))),
        ("max_pool_points", vec![v(&[6, 3])], Box::new(|x: &[Tensor]| weighted_sum(&x[0].max_pool_points()?))),
        (
            "concat_cols",
            vec![v(&[3, 2]), v(&[3, 4])],
            Box::new(|x: &[Tensor]| weighted_sum(&Tensor::concat_cols(&[x[0].clone(), x[1].clone()])?)),
        ),
        (
            "concat_rows",
            vec![v(&[2, 3]), v(&[4, 3])],
            Box::new(|x: &[Tensor]| weighted_sum(&Tensor::concat_rows(&[x[0].clone(), x[1].clone()])?)),
        ),
        ("tile_rows", vec![v(&[1, 4])], Box::new(|x: &[Tensor]| weighted_sum(&x[0].tile_rows(5)?))),
        ("repeat_rows", vec![v(&[3, 2])], Box::new(|x: &[Tensor]| weighted_sum(&x[0].repeat_rows(4)?))),
        ("reshape", vec![v(&[2, 6])], Box::new(|x: &[Tensor]| weighted_sum(&x[0].reshape(&[4, 3])?))),
        ("slice_rows", vec![v(&[5, 3])], Box::new(|x: &[Tensor]| weighted_sum(&x[0].slice_rows(1, 4)?))),
        (
            "gather_rows",
            vec![v(&[5, 3])],
            Box::new(|x: &[Tensor]| weighted_sum(&x[0].gather_rows(&[4, 0, 4, 2, 2, 2])?)),
        ),
        ("sum", vec![v(&[3, 3])], Box::new(|x: &[Tensor]| x[0].scale(0.5)?.sum())),
        (
            "batch_norm_train",
            vec![v(&[6, 3]), v(&[3]), v(&[3])],
            Box::new(|x: &[Tensor]| weighted_sum(&x[0].batch_norm_train(&x[1], &x[2], 1e-5)?.0)),
        ),
        (
            "batch_norm_eval",
            vec![v(&[6, 3]), v(&[3]), v(&[3])],
            Box::new(|x: &[Tensor]| {
                weighted_sum(&x[0].batch_norm_eval(&x[1], &x[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 0.8], 1e-5)?)
            }),
        ),
        (
            "shared_mlp_layer",
            vec![v(&[5, 3]), v(&[3, 4]), v(&[4]), v(&[4]), v(&[4])],
            Box::new(|x: &[Tensor]| {
                let norm = Norm::BatchTrain {
                    gamma: &x[3],
                    beta: &x[4],
                };
                weighted_sum(&shared_mlp_layer(&x[0], &x[1], &x[2], Activation::Tanh, norm)?.0)
            }),
        ),
        ("chamfer_loss", vec![v(&[6, 3]), v(&[7, 3])], Box::new(|x: &[Tensor]| chamfer_loss(&x[0], &x[1]))),
        (
            "matched_distance_loss",
            vec![v(&[5, 3]), v(&[5, 3])],
            Box::new(|x: &[Tensor]| matched_distance_loss(&x[0], &x[1], &[3, 0, 4, 1, 2])),
        ),
        (
            "emd_loss",
            vec![v(&[6, 3]), v(&[6, 3])],
            Box::new(|x: &[Tensor]| Ok(emd_loss(&x[0], &x[1], EmdSolver::Exact)?.0)),
        ),
    ]
}
