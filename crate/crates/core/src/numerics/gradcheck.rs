//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{NumericsError, Tape, Tensor, Var};

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckResult {
    pub name: String,
    pub relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Coordinates left out because a perturbation crossed a ReLU kink.
    pub excluded: usize,
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-300 {
        0.0
    } else {
        diff / denom
    }
}

/// Compares autodiff against central differences for the scalar
/// `Σ f(inputs) ⊙ r`, with `r` a seeded random projection.
pub fn check_function<F>(
    name: &str,
    inputs: &[Tensor],
    eps: f64,
    tolerance: f64,
    seed: u64,
    f: F,
) -> Result<GradCheckResult, NumericsError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    let projection = |tape: &mut Tape, vars: &[Var]| -> Result<Var, NumericsError> {
        let y = f(tape, vars)?;
        let shape = tape.value(y).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let r: Vec<f64> = (0..tape.value(y).len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let rv = tape.constant(Tensor::new(shape, r)?);
        let prod = tape.mul(y, rv)?;
        Ok(tape.sum(prod))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = projection(&mut tape, &vars)?;
    tape.backward(loss)?;
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match tape.grad(*v) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }

    let eval = |perturbed: &[Tensor]| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let l = projection(&mut tape, &vars)?;
        Ok(tape.value(l).item())
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * eps));
        }
    }
    let relative_error = relative_error(&analytic, &numeric);
    Ok(GradCheckResult {
        name: name.to_string(),
        relative_error,
        tolerance,
        passed: relative_error < tolerance,
        excluded: 0,
    })
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite random tensor")
}

/// Values bounded away from zero so the ReLU kink is never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite random tensor")
}

/// Finite-difference check of every differentiable tape operation on seeded
/// small inputs.
pub fn check_all_ops(seed: u64, eps: f64, tolerance: f64) -> Result<Vec<GradCheckResult>, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor>, f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>| {
        check_function(name, &inputs, eps, tolerance, seed, f).map(|r| out.push(r))
    };

    let a = random_tensor(&mut rng, &[3, 4]);
    let b = random_tensor(&mut rng, &[4, 2]);
    run("matmul", vec![a.clone(), b], &|t, v| t.matmul(v[0], v[1]))?;
    let bt = random_tensor(&mut rng, &[5, 4]);
    run("matmul_nt", vec![a.clone(), bt], &|t, v| t.matmul_nt(v[0], v[1]))?;
    run("transpose", vec![a.clone()], &|t, v| t.transpose(v[0]))?;
    let a2 = random_tensor(&mut rng, &[3, 4]);
    run("add", vec![a.clone(), a2.clone()], &|t, v| t.add(v[0], v[1]))?;
    run("mul", vec![a.clone(), a2.clone()], &|t, v| t.mul(v[0], v[1]))?;
    let row = random_tensor(&mut rng, &[1, 4]);
    run("add_row", vec![a.clone(), row], &|t, v| t.add_row(v[0], v[1]))?;
    run("scale", vec![a.clone()], &|t, v| Ok(t.scale(v[0], -1.7)))?;
    let r = away_from_zero(&mut rng, &[3, 4]);
    run("relu", vec![r], &|t, v| Ok(t.relu(v[0])))?;
    let c = random_tensor(&mut rng, &[3, 2]);
    run("concat_cols", vec![a.clone(), c], &|t, v| t.concat_cols(&[v[0], v[1]]))?;
    let d = random_tensor(&mut rng, &[2, 4]);
    run("concat_rows", vec![a.clone(), d], &|t, v| t.concat_rows(&[v[0], v[1]]))?;
    run("slice_cols", vec![a.clone()], &|t, v| t.slice_cols(v[0], 1, 2))?;
    run("slice_rows", vec![a.clone()], &|t, v| t.slice_rows(v[0], 1, 2))?;
    let table = random_tensor(&mut rng, &[5, 3]);
    run("gather_rows", vec![table], &|t, v| t.gather_rows(v[0], &[4, 0, 4, 2]))?;
    let mask = Tensor::matrix(
        3,
        4,
        vec![
            0.0, 0.0, super::MASK_NEG, 0.0, //
            0.0, super::MASK_NEG, super::MASK_NEG, 0.0, //
            0.0, 0.0, 0.0, 0.0,
        ],
    )?;
    run("masked_softmax", vec![a.clone()], &|t, v| t.masked_softmax(v[0], Some(&mask)))?;
    let gain = random_tensor(&mut rng, &[1, 4]);
    let bias = random_tensor(&mut rng, &[1, 4]);
    run("layer_norm", vec![a.clone(), gain, bias], &|t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5)
    })?;
    run("cross_entropy", vec![a.clone()], &|t, v| t.cross_entropy(v[0], &[3, 0, 1]))?;
    run("dropout", vec![a.clone()], &|t, v| {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        t.dropout(v[0], 0.5, &mut r, true)
    })?;
    run("dropout_shared_cols", vec![a.clone()], &|t, v| {
        let mut r = ChaCha8Rng::seed_from_u64(12);
        t.dropout_shared_cols(v[0], 0.4, &mut r, true)
    })?;
    run("sum", vec![a.clone()], &|t, v| Ok(t.sum(v[0])))?;
    run("shared_subexpression", vec![a], &|t, v| {
        let sq = t.mul(v[0], v[0])?;
        t.add(sq, v[0])
    })?;
    Ok(out)
}
