//! Finite-difference checks of each layer against its tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{complex_linear, cross_attention, vn_invariant, vn_linear, vn_relu, ComplexWeights};
use crate::autodiff::{grad_check, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Layers accepted by [`layer_gradient_check`].
pub const GRADIENT_LAYERS: [&str; 6] = [
    "vn_linear",
    "vn_relu",
    "vn_invariant",
    "complex_linear",
    "cross_attention",
    "head",
];

/// Step used by [`layer_gradient_check`].
pub const GRADIENT_STEP: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Random linear functional of `y`, so every output entry reaches the loss.
fn probe_loss(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = t.constant(rand_tensor(&mut rng, t.shape(y)));
    let p = t.mul(y, r)?;
    t.sum_all(p)
}

fn check_inputs(
    inputs: &[Tensor],
    seed: u64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Copy,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for which in 0..inputs.len() {
        let err = grad_check(
            |t: &mut Tape, p: Var| {
                let vars: Vec<Var> = (0..inputs.len())
                    .map(|i| if i == which { p } else { t.constant(inputs[i].clone()) })
                    .collect();
                let y = f(t, &vars)?;
                probe_loss(t, y, seed ^ which as u64)
            },
            &inputs[which],
            GRADIENT_STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Largest relative gradient error of `layer` over all of its inputs, on
/// random inputs with `N = 6` points and `C = 3` channels.
pub fn layer_gradient_check(layer: &str, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c) = (6, 3);
    let x = rand_tensor(&mut rng, &[n, c, 3]);
    match layer {
        "vn_linear" => {
            let w = rand_tensor(&mut rng, &[4, c]);
            check_inputs(&[x, w], seed, |t, v| vn_linear(t, v[0], v[1]))
        }
        "vn_relu" => {
            // Keep <q, k> away from zero, where the layer has a kink.
            let inputs = loop {
                let ins = [x.clone(), rand_tensor(&mut rng, &[4, c]), rand_tensor(&mut rng, &[4, c])];
                let mut t = Tape::new();
                let v: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
                let q = vn_linear(&mut t, v[0], v[1])?;
                let k = vn_linear(&mut t, v[0], v[2])?;
                let d = t.dot(q, k)?;
                if t.value(d).data().iter().all(|x| x.abs() > 1e-2) {
                    break ins;
                }
            };
            check_inputs(&inputs, seed, |t, v| vn_relu(t, v[0], v[1], v[2]))
        }
        "vn_invariant" => {
            let tw = rand_tensor(&mut rng, &[3, 2 * c]);
            check_inputs(&[x, tw], seed, |t, v| vn_invariant(t, v[0], v[1]))
        }
        "complex_linear" => {
            let inputs = [
                x,
                rand_tensor(&mut rng, &[n, c, 3]),
                rand_tensor(&mut rng, &[2, c]),
                rand_tensor(&mut rng, &[2, c]),
                rand_tensor(&mut rng, &[2, c]),
            ];
            check_inputs(&inputs, seed, |t, v| {
                let w = ComplexWeights {
                    a: v[2],
                    b: v[3],
                    c: v[4],
                };
                complex_linear(t, v[0], v[1], &w)
            })
        }
        "cross_attention" => {
            let inputs = [x, rand_tensor(&mut rng, &[n, c, 3]), rand_tensor(&mut rng, &[n, c, 3])];
            check_inputs(&inputs, seed, |t, v| Ok(cross_attention(t, v[0], v[1], v[2])?.0))
        }
        "head" => {
            let inputs = [
                rand_tensor(&mut rng, &[n, 9, 1]),
                rand_tensor(&mut rng, &[2, 9]),
                rand_tensor(&mut rng, &[2]),
            ];
            check_inputs(&inputs, seed, |t, v| {
                let z = t.channel_contract(v[1], v[0])?;
                let z = t.reshape(z, &[n, 2])?;
                t.add(z, v[2])
            })
        }
        other => Err(Error::Config(format!(
            "unknown layer {other:?}; expected one of {}",
            GRADIENT_LAYERS.join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_passes() {
        for layer in GRADIENT_LAYERS {
            let e = layer_gradient_check(layer, 3).unwrap();
            assert!(e < 1e-4, "{layer}: {e}");
        }
    }

    #[test]
    fn unknown_layer_is_a_config_error() {
        assert!(matches!(layer_gradient_check("nope", 0), Err(Error::Config(_))));
    }
}
