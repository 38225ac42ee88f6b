//! Finite-difference oracles for gradient checks.
//!
//! These evaluate the function on plain values only and never read
//! gradients from the tape, so they stay independent of the code they check.

use crate::tensor::{Result, Tape, Tensor, Var};

/// Central finite-difference gradient of a scalar function of several tensors.
pub fn numeric_gradient<F>(f: &F, inputs: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };
    let mut grads = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *gj = (up - down) / (2.0 * step);
        }
        grads.push(Tensor::new(inputs[i].shape().to_vec(), g)?);
    }
    Ok(grads)
}

/// Reverse-mode gradient of the same function, for comparison.
pub fn analytic_gradient<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(&loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| v.grad().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect())
}

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖, floor)` over all inputs.
pub fn relative_error(analytic: &[Tensor], numeric: &[Tensor], floor: f64) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (x, y) in a.data().iter().zip(n.data()) {
            diff += (x - y) * (x - y);
            na += x * x;
            nn += y * y;
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(floor)
}

/// Relative error between reverse-mode and central-difference gradients.
pub fn gradient_error<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let a = analytic_gradient(&f, inputs)?;
    let n = numeric_gradient(&f, inputs, step)?;
    Ok(relative_error(&a, &n, 1e-8))
}

/// Input domain for a randomly drawn gradient-check operand.
#[derive(Clone, Copy, Debug)]
pub enum Domain {
    Normal,
    /// Magnitudes bounded away from zero (kinks and poles).
    AwayFromZero,
    Positive,
}

/// One differentiable primitive exercised by the gradient suite.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<(Vec<usize>, Domain)>,
    pub build: Box<dyn Fn(&Tape, &[Var]) -> Result<Var>>,
}

impl GradCase {
    fn new(
        name: &'static str,
        inputs: Vec<(Vec<usize>, Domain)>,
        build: impl Fn(&Tape, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name,
            inputs,
            build: Box::new(build),
        }
    }

    /// Draws inputs for this case from `rng`.
    pub fn sample_inputs(&self, rng: &mut impl rand::Rng) -> Vec<Tensor> {
        use rand_distr::{Distribution, StandardNormal};
        self.inputs
            .iter()
            .map(|(shape, domain)| {
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        match domain {
                            Domain::Normal => z,
                            Domain::AwayFromZero => z.signum() * (z.abs() + 0.25),
                            Domain::Positive => z.abs() + 0.5,
                        }
                    })
                    .collect();
                Tensor::new(shape.clone(), data).expect("shape matches")
            })
            .collect()
    }
}

/// Contracts a tensor-valued output to a scalar with fixed pseudo-random
/// weights so that every output element influences the gradient differently.
pub fn weighted_sum(tape: &Tape, x: &Var) -> Result<Var> {
    let shape = x.shape();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.7548776662).fract() - 0.5).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    Ok(x.mul(&w)?.sum())
}

/// The primitive set of the tensor engine, each wrapped as a scalar function.
pub fn primitive_cases() -> Vec<GradCase> {
    use Domain::*;
    let s = |d: &[usize]| d.to_vec();
    vec![
        GradCase::new("add", vec![(s(&[3, 4]), Normal), (s(&[4]), Normal)], |t, v| {
            weighted_sum(t, &v[0].add(&v[1])?)
        }),
        GradCase::new("sub", vec![(s(&[2, 1, 3]), Normal), (s(&[4, 1]), Normal)], |t, v| {
            weighted_sum(t, &v[0].sub(&v[1])?)
        }),
        GradCase::new("mul", vec![(s(&[2, 3, 4]), Normal), (s(&[2, 1, 4]), Normal)], |t, v| {
            weighted_sum(t, &v[0].mul(&v[1])?)
        }),
        GradCase::new("div", vec![(s(&[3, 4]), Normal), (s(&[3, 4]), AwayFromZero)], |t, v| {
            weighted_sum(t, &v[0].div(&v[1])?)
        }),
        GradCase::new("matmul", vec![(s(&[3, 5]), Normal), (s(&[5, 2]), Normal)], |t, v| {
            weighted_sum(t, &v[0].matmul(&v[1])?)
        }),
        GradCase::new("abs", vec![(s(&[10]), AwayFromZero)], |t, v| weighted_sum(t, &v[0].abs())),
        GradCase::new("sqrt", vec![(s(&[10]), Positive)], |t, v| weighted_sum(t, &v[0].sqrt())),
        GradCase::new("rsqrt", vec![(s(&[10]), Positive)], |t, v| weighted_sum(t, &v[0].rsqrt())),
        GradCase::new("exp", vec![(s(&[10]), Normal)], |t, v| weighted_sum(t, &v[0].exp())),
        GradCase::new("sum_axes", vec![(s(&[2, 3, 4]), Normal)], |t, v| {
            weighted_sum(t, &v[0].sum_axes(&[0, 2], false)?)
        }),
        GradCase::new("mean_axes", vec![(s(&[2, 3, 4]), Normal)], |t, v| {
            weighted_sum(t, &v[0].mean_axes(&[1], true)?)
        }),
        GradCase::new("broadcast_to", vec![(s(&[3, 1]), Normal)], |t, v| {
            weighted_sum(t, &v[0].broadcast_to(&[2, 3, 4])?)
        }),
        GradCase::new("concat", vec![(s(&[2, 3]), Normal), (s(&[2, 2]), Normal)], |t, v| {
            weighted_sum(t, &Var::concat(&[&v[0], &v[1]], 1)?)
        }),
        GradCase::new("slice", vec![(s(&[4, 5]), Normal)], |t, v| {
            weighted_sum(t, &v[0].slice(1, 1, 3)?)
        }),
        GradCase::new("roll", vec![(s(&[2, 5, 3]), Normal)], |t, v| {
            weighted_sum(t, &v[0].roll(1, -2)?)
        }),
        GradCase::new("permute", vec![(s(&[2, 3, 4]), Normal)], |t, v| {
            weighted_sum(t, &v[0].permute(&[2, 0, 1])?)
        }),
        GradCase::new("silu", vec![(s(&[10]), Normal)], |t, v| weighted_sum(t, &v[0].silu())),
        GradCase::new("gelu", vec![(s(&[10]), Normal)], |t, v| weighted_sum(t, &v[0].gelu())),
        GradCase::new(
            "layer_norm",
            vec![(s(&[3, 6]), Normal), (s(&[6]), Normal), (s(&[6]), Normal)],
            |t, v| weighted_sum(t, &v[0].layer_norm(&v[1], &v[2], 1e-5)?),
        ),
        GradCase::new(
            "linear",
            vec![(s(&[2, 3, 4]), Normal), (s(&[4, 5]), Normal), (s(&[5]), Normal)],
            |t, v| weighted_sum(t, &v[0].linear(&v[1], Some(&v[2]))?),
        ),
        GradCase::new("scale_square", vec![(s(&[6]), Normal)], |t, v| {
            weighted_sum(t, &v[0].square().scale(-1.5).add_scalar(2.0).neg().reshape(&[2, 3])?)
        }),
        GradCase::new("softmax", vec![(s(&[3, 5]), Normal)], |t, v| {
            weighted_sum(t, &v[0].softmax()?)
        }),
    ]
}
