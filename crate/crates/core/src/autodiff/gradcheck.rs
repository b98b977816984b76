//! Central finite-difference verification of reverse-mode gradients.
//!
//! The checker only ever evaluates forward values, so it is independent of
//! every backward rule it checks.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::{Graph, Tensor, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Outcome of checking one family of graphs over several random instances.
#[derive(Clone, Debug, Serialize)]
pub struct FdReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < FD_TOLERANCE
    }
}

/// Relative error `‖analytic − numeric‖ / (‖analytic‖ + 1e-8)` over all
/// leaf entries.
///
/// `build` receives one leaf per input tensor and must return a scalar node.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaves = inputs
        .iter()
        .map(|t| g.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let root = build(&mut g, &leaves)?;
    let grads = g.backward(root)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut h = Graph::new();
        let vars = perturbed
            .iter()
            .map(|t| h.leaf(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let r = build(&mut h, &vars)?;
        Ok(h.scalar(r))
    };

    let mut diff_sq = 0.0;
    let mut norm_sq = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(*leaf);
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[i];
            diff_sq += (a - numeric) * (a - numeric);
            norm_sq += a * a;
        }
    }
    Ok(diff_sq.sqrt() / (norm_sq.sqrt() + 1e-8))
}

pub fn random_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Reduces an arbitrary node to a scalar through a fixed random weighting,
/// so every output entry contributes to the checked gradient.
pub fn weighted_sum(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone().reshape(g.shape(out).to_vec())?)?;
    let p = g.mul(out, w)?;
    g.sum(p)
}

type Builder = Box<dyn Fn(&mut Graph, &[Var], &Tensor) -> Result<Var>>;

struct OpCase {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    positive: bool,
    build: Builder,
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    build: impl Fn(&mut Graph, &[Var], &Tensor) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        positive: false,
        build: Box::new(build),
    }
}

fn op_cases() -> Vec<OpCase> {
    let mut cases = vec![
        case("matmul", &[&[3, 4], &[4, 2]], |g, v, _| g.matmul(v[0], v[1])),
        case("transpose", &[&[3, 2]], |g, v, _| g.transpose(v[0])),
        case("add", &[&[2, 3], &[2, 3]], |g, v, _| g.add(v[0], v[1])),
        case("sub", &[&[2, 3], &[2, 3]], |g, v, _| g.sub(v[0], v[1])),
        case("mul", &[&[2, 3], &[2, 3]], |g, v, _| g.mul(v[0], v[1])),
        case("scale", &[&[4]], |g, v, _| g.scale(v[0], -1.7)),
        case("add_const", &[&[4]], |g, v, _| g.add_const(v[0], 0.3)),
        case("scale_by", &[&[1], &[2, 3]], |g, v, _| g.scale_by(v[0], v[1])),
        case("add_rows", &[&[3, 4], &[4]], |g, v, _| g.add_rows(v[0], v[1])),
        case("mul_rows", &[&[3, 4], &[4]], |g, v, _| g.mul_rows(v[0], v[1])),
        case("neg", &[&[5]], |g, v, _| g.neg(v[0])),
        case("exp", &[&[5]], |g, v, _| g.exp(v[0])),
        case("tanh", &[&[5]], |g, v, _| g.tanh(v[0])),
        case("gelu", &[&[6]], |g, v, _| g.gelu(v[0])),
        case("sum", &[&[2, 3]], |g, v, _| g.sum(v[0])),
        case("mean", &[&[2, 3]], |g, v, _| g.mean(v[0])),
        case("sum_cols", &[&[3, 4]], |g, v, _| g.sum_cols(v[0])),
        case("mean_rows", &[&[3, 4]], |g, v, _| g.mean_rows(v[0])),
        case("softmax_rows", &[&[3, 5]], |g, v, _| g.softmax_rows(v[0])),
        case("log_softmax_rows", &[&[3, 5]], |g, v, _| g.log_softmax_rows(v[0])),
        case("log_sum_exp_rows", &[&[3, 5]], |g, v, _| g.log_sum_exp_rows(v[0])),
        case("causal_softmax_rows", &[&[4, 4]], |g, v, _| g.causal_softmax_rows(v[0])),
        case("layer_norm_rows", &[&[3, 6]], |g, v, _| g.layer_norm_rows(v[0])),
        case("sq_dist", &[&[3, 4], &[5, 4]], |g, v, _| g.sq_dist(v[0], v[1])),
        case("row_dot", &[&[3, 4], &[3, 4]], |g, v, _| g.row_dot(v[0], v[1])),
        case("concat_rows", &[&[2, 3], &[1, 3]], |g, v, _| g.concat_rows(&[v[0], v[1]])),
        case("concat_cols", &[&[2, 3], &[2, 2]], |g, v, _| g.concat_cols(&[v[0], v[1]])),
        case("slice_rows", &[&[4, 3]], |g, v, _| g.slice_rows(v[0], 1, 3)),
        case("slice_cols", &[&[3, 5]], |g, v, _| g.slice_cols(v[0], 1, 4)),
        case("gather", &[&[3, 4]], |g, v, _| g.gather(v[0], &[0, 5, 5, 11])),
        case("embed_rows", &[&[5, 3]], |g, v, _| g.embed_rows(v[0], &[4, 0, 4])),
        case("reshape", &[&[2, 6]], |g, v, _| g.reshape(v[0], &[3, 4])),
        case("composite_3_layer", &[&[2, 4], &[4, 5], &[5, 3], &[3]], |g, v, _| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.tanh(h)?;
            let h = g.matmul(h, v[2])?;
            let h = g.add_rows(h, v[3])?;
            let h = g.layer_norm_rows(h)?;
            g.log_softmax_rows(h)
        }),
        // The straight-through node forwards a frozen one-hot sample; its
        // backward rule is the derivative of `hard + soft(x) - soft(x0)`,
        // which equals `hard` at the base point and is smooth around it.
        case("straight_through_surrogate", &[&[1, 5]], |g, v, base| {
            let soft = g.softmax_rows(v[0])?;
            let soft0 = crate::autodiff::tensor::softmax(base.data());
            let hard = one_hot(&soft0);
            let shifted: Vec<f64> = hard.iter().zip(&soft0).map(|(h, s)| h - s).collect();
            let offset = g.constant(Tensor::new(vec![1, 5], shifted)?)?;
            g.add(soft, offset)
        }),
        case("straight_through", &[&[1, 5]], |g, v, _| {
            let soft = g.softmax_rows(v[0])?;
            let hard = one_hot(g.value(soft).data());
            g.straight_through(soft, Tensor::new(vec![1, 5], hard)?)
        }),
    ];
    let mut log = case("log", &[&[5]], |g, v, _| g.log(v[0]));
    log.positive = true;
    cases.push(log);
    cases
}

fn one_hot(p: &[f64]) -> Vec<f64> {
    let k = crate::geometry::argmax(p);
    (0..p.len()).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
}

/// Runs every registered operation over `instances` random inputs.
///
/// The plain `straight_through` entry is expected to disagree with finite
/// differences (its forward is piecewise constant); it is reported with the
/// surrogate comparison instead, see `straight_through_surrogate`.
pub fn op_suite<R: Rng + ?Sized>(rng: &mut R, instances: usize) -> Result<Vec<FdReport>> {
    let mut reports = Vec::new();
    for c in op_cases() {
        if c.name == "straight_through" {
            continue;
        }
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let mut inputs: Vec<Tensor> = c.shapes.iter().map(|s| random_tensor(rng, s, 1.0)).collect();
            if c.positive {
                for t in &mut inputs {
                    t.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
                }
            }
            let base = inputs[0].clone();
            let mut g = Graph::new();
            let probe: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect::<Result<_>>()?;
            let out = (c.build)(&mut g, &probe, &base)?;
            let weights = random_tensor(rng, g.shape(out), 1.0);
            let build = &c.build;
            let err = check_gradients(&inputs, FD_STEP, |g, v| {
                let out = build(g, v, &base)?;
                weighted_sum(g, out, &weights)
            })?;
            worst = worst.max(err);
        }
        reports.push(FdReport {
            name: c.name.to_string(),
            instances,
            max_rel_error: worst,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for r in op_suite(&mut rng, 4).unwrap() {
            assert!(r.passed(), "{} rel err {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn checker_detects_a_wrong_gradient() {
        // straight_through forwards a constant, so finite differences see a
        // zero derivative while the backward rule reports the soft one.
        let x = Tensor::new(vec![1, 3], vec![0.2, -0.4, 1.0]).unwrap();
        let w = Tensor::new(vec![1, 3], vec![1.0, 2.0, -3.0]).unwrap();
        let err = check_gradients(&[x], FD_STEP, |g, v| {
            let soft = g.softmax_rows(v[0])?;
            let st = g.straight_through(soft, Tensor::new(vec![1, 3], vec![0.0, 0.0, 1.0])?)?;
            weighted_sum(g, st, &w)
        })
        .unwrap();
        assert!(err > 0.5);
    }
}
