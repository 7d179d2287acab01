#![allow(dead_code)]

use mixhar_core::tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= ABS_FLOOR || diff <= REL_TOL * analytic.abs().max(numeric.abs())
}

/// Compares tape gradients of a scalar function of `inputs` with central
/// finite differences. `coords` selects which coordinates are probed per input
/// (`None` = all). Returns the worst offending description on failure.
pub fn check_gradients<F>(inputs: &[Tensor], coords: Option<&[Vec<usize>]>, build: F) -> Result<(), String>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).map_err(|e| e.to_string())?;
    for (k, x) in inputs.iter().enumerate() {
        let zero = vec![0.0; x.numel()];
        let analytic = grads.get(vars[k]).unwrap_or(&zero);
        let all: Vec<usize> = (0..x.numel()).collect();
        let probe = coords.map(|c| c[k].as_slice()).unwrap_or(&all);
        for &i in probe {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            if !close(analytic[i], numeric) {
                return Err(format!(
                    "input {k} coord {i}: analytic {} vs numeric {}",
                    analytic[i], numeric
                ));
            }
        }
    }
    Ok(())
}
