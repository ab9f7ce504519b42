//! Finite-difference checks for every differentiable op, on small random
//! shapes. Shared by the unit tests, the `gradcheck` command and the
//! acceptance run.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, Array, GradCheckOptions, GradCheckReport, GradError, Graph, Var};

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Array::from_vec(shape, data).expect("sized from shape")
}

/// `sum(w * y)` for a fixed pseudo-random `w`, so that gradients of ops whose
/// plain sum is constant (softmax, normalization) are still exercised.
pub(crate) fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, GradError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_array(&mut rng, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

type Case = (&'static str, Vec<Vec<usize>>, bool, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, GradError>>);

fn cases() -> Vec<Case> {
    let mut c: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($s:expr),*], $f:expr) => {
            c.push(($name, vec![$($s.to_vec()),*], false, Box::new($f)))
        };
        (train $name:expr, [$($s:expr),*], $f:expr) => {
            c.push(($name, vec![$($s.to_vec()),*], true, Box::new($f)))
        };
    }
    case!("add", [[2, 3], [2, 3]], |g, v| {
        let y = g.add(v[0], v[1])?;
        probe(g, y, 1)
    });
    case!("sub", [[2, 3], [2, 3]], |g, v| {
        let y = g.sub(v[0], v[1])?;
        probe(g, y, 2)
    });
    case!("mul", [[2, 3], [2, 3]], |g, v| {
        let y = g.mul(v[0], v[1])?;
        probe(g, y, 3)
    });
    case!("scale", [[4]], |g, v| {
        let y = g.scale(v[0], -1.7)?;
        probe(g, y, 4)
    });
    case!("add_bias", [[2, 3, 4], [3]], |g, v| {
        let y = g.add_bias(v[0], v[1], 1)?;
        probe(g, y, 5)
    });
    case!("matmul", [[3, 4], [4, 2]], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        probe(g, y, 6)
    });
    case!("matmul_chain", [[2, 3], [3, 4], [4, 2]], |g, v| {
        let a = g.matmul(v[0], v[1])?;
        let b = g.matmul(a, v[2])?;
        let sq = g.mul(b, b)?;
        g.mean(sq)
    });
    case!("batch_matmul", [[2, 3, 4], [2, 4, 2]], |g, v| {
        let y = g.batch_matmul(v[0], v[1])?;
        probe(g, y, 7)
    });
    case!("permute", [[2, 3, 4]], |g, v| {
        let y = g.permute(v[0], &[1, 2, 0])?;
        probe(g, y, 8)
    });
    case!("reshape", [[2, 3, 4]], |g, v| {
        let y = g.reshape(v[0], &[6, 4])?;
        probe(g, y, 9)
    });
    case!("conv3d_k3_s1", [[2, 2, 4, 3, 4], [3, 2, 3, 3, 3], [3]], |g, v| {
        let y = g.conv3d(v[0], v[1], Some(v[2]), 1)?;
        probe(g, y, 10)
    });
    case!("conv3d_k3_s2", [[1, 2, 4, 4, 4], [3, 2, 3, 3, 3], [3]], |g, v| {
        let y = g.conv3d(v[0], v[1], Some(v[2]), 2)?;
        probe(g, y, 11)
    });
    case!("conv3d_k1", [[2, 3, 2, 2, 2], [2, 3, 1, 1, 1], [2]], |g, v| {
        let y = g.conv3d(v[0], v[1], Some(v[2]), 1)?;
        probe(g, y, 12)
    });
    case!("conv_transpose3d_k4_s2", [[1, 2, 2, 2, 2], [2, 3, 4, 4, 4], [3]], |g, v| {
        let y = g.conv_transpose3d(v[0], v[1], Some(v[2]), 2)?;
        probe(g, y, 13)
    });
    case!("group_norm", [[2, 4, 2, 2, 2], [4], [4]], |g, v| {
        let y = g.group_norm(v[0], v[1], v[2], 2, 1e-5)?;
        probe(g, y, 14)
    });
    case!("layer_norm", [[3, 5], [5], [5]], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        probe(g, y, 15)
    });
    case!("conv_group_norm_swish", [[1, 2, 4, 4, 4], [4, 2, 3, 3, 3], [4], [4], [4]], |g, v| {
        let y = g.conv3d(v[0], v[1], Some(v[2]), 1)?;
        let y = g.group_norm(y, v[3], v[4], 2, 1e-5)?;
        let y = g.swish(y)?;
        probe(g, y, 16)
    });
    case!("swish", [[7]], |g, v| {
        let y = g.swish(v[0])?;
        probe(g, y, 17)
    });
    case!("gelu", [[7]], |g, v| {
        let y = g.gelu(v[0])?;
        probe(g, y, 18)
    });
    case!("softmax", [[3, 4]], |g, v| {
        let y = g.softmax(v[0])?;
        probe(g, y, 19)
    });
    case!("masked_softmax", [[2, 3, 3]], |g, v| {
        let mask = Arc::new(vec![false, true, true, false, false, true, false, false, false]);
        let y = g.masked_fill(v[0], mask, -1e9)?;
        let y = g.softmax(y)?;
        probe(g, y, 20)
    });
    case!("embedding", [[5, 3]], |g, v| {
        let y = g.embedding(v[0], &[4, 0, 4, 2])?;
        probe(g, y, 21)
    });
    case!(train "dropout", [[10]], |g, v| {
        let y = g.dropout(v[0], 0.3, 99)?;
        probe(g, y, 22)
    });
    case!("cross_entropy", [[3, 5]], |g, v| g.cross_entropy(v[0], &[1, 4, 0]));
    case!("concat", [[2, 3], [2, 2]], |g, v| {
        let y = g.concat(&[v[0], v[1]], 1)?;
        probe(g, y, 23)
    });
    case!("sum", [[2, 2]], |g, v| {
        let sq = g.mul(v[0], v[0])?;
        g.sum(sq)
    });
    case!("mean", [[2, 2]], |g, v| {
        let sq = g.mul(v[0], v[0])?;
        g.mean(sq)
    });
    case!("mse", [[6], [6]], |g, v| g.mse(v[0], v[1]));
    c
}

/// Runs every case and returns `(name, report)` pairs.
pub fn op_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>, GradError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, shapes, training, f) in cases() {
        let inputs: Vec<Array<f64>> = shapes.iter().map(|s| rand_array(&mut rng, s)).collect();
        let opts = GradCheckOptions {
            training,
            ..GradCheckOptions::default()
        };
        let report = grad_check(|g, v| f(g, v), &inputs, &opts)?;
        out.push((name.to_string(), report));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        for seed in [0, 1] {
            for (name, r) in op_suite(seed).unwrap() {
                assert!(r.passes(1e-4), "{name}: {r:?}");
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.constant(rand_array(&mut rng, &[6, 9]).map(|v| v * 20.0));
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(9) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
