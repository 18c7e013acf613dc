//! Central finite-difference checks of analytic gradients in 64-bit.
//!
//! Each check builds a small graph from random inputs, reduces its output to
//! a scalar through a fixed random projection (a plain sum would give
//! vanishing gradients for normalizing ops such as softmax) and compares the
//! analytic gradient of every input against `(f(x + h) - f(x - h)) / 2h`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::TransposeSpec;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const ROUTING_TOLERANCE: f64 = 1e-3;

/// Denominator floor of the relative error, so entries whose true gradient
/// is ~0 are judged on absolute error instead.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks `build` against finite differences for every entry of every input.
pub fn check<B>(name: &str, inputs: &[Tensor<f64>], tolerance: f64, seed: u64, build: B) -> Result<CheckReport>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>], proj: Option<&Tensor<f64>>| -> Result<(Graph<f64>, Vec<Var>, Var, Tensor<f64>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let shape = g.shape(out).to_vec();
        let proj = match proj {
            Some(p) => p.clone(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
                Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0))
            }
        };
        let pv = g.constant(proj.clone());
        let weighted = g.mul(out, pv)?;
        let loss = g.sum_all(weighted);
        Ok((g, vars, loss, proj))
    };

    let (g, vars, loss, proj) = eval(inputs, None)?;
    let grads = g.gradients(loss)?;
    let mut max_err: f64 = 0.0;
    let mut checked = 0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads[vars[k].0].clone().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let (gp, _, lp, _) = eval(&plus, Some(&proj))?;
            let (gm, _, lm, _) = eval(&minus, Some(&proj))?;
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * FD_STEP);
            let e = rel_err(analytic.data()[i], numeric);
            if !e.is_finite() {
                return Err(Error::Numeric(format!("{name}: non-finite gradient at input {k}[{i}]")));
            }
            max_err = max_err.max(e);
            checked += 1;
        }
    }
    Ok(CheckReport { name: name.to_string(), max_rel_err: max_err, tolerance, checked })
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Inputs bounded away from zero so kinks (relu) and poles (ln, div) are not straddled.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) { m } else { -m }
    })
}

fn rand_positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(0.2..2.0))
}

type CheckFn = fn(u64) -> Result<CheckReport>;

/// Every registered check, by name.
pub fn catalogue() -> Vec<(&'static str, CheckFn)> {
    vec![
        ("add", |s| pointwise2("add", s, |g, a, b| g.add(a, b))),
        ("sub", |s| pointwise2("sub", s, |g, a, b| g.sub(a, b))),
        ("mul", |s| pointwise2("mul", s, |g, a, b| g.mul(a, b))),
        ("div", check_div),
        ("safe_div", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let a = rand_tensor(&mut rng, &[3, 4]);
            let b = rand_away_from_zero(&mut rng, &[3, 4]);
            check("safe_div", &[a, b], OP_TOLERANCE, s, |g, v| g.safe_div(v[0], v[1], 1e-8))
        }),
        ("select_const", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let a = rand_tensor(&mut rng, &[3, 4]);
            let mask: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
            check("select_const", &[a], OP_TOLERANCE, s, move |g, v| g.select_const(v[0], &mask, 1.0))
        }),
        ("scalar", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = rand_tensor(&mut rng, &[3, 4]);
            check("scalar", &[x], OP_TOLERANCE, s, |g, v| {
                let a = g.mul_scalar(v[0], 2.5);
                Ok(g.add_scalar(a, -0.75))
            })
        }),
        ("square", |s| pointwise1("square", s, false, |g, a| Ok(g.square(a)))),
        ("exp", |s| pointwise1("exp", s, false, |g, a| Ok(g.exp(a)))),
        ("ln", |s| pointwise1("ln", s, true, |g, a| Ok(g.ln(a)))),
        ("sigmoid", |s| pointwise1("sigmoid", s, false, |g, a| Ok(g.sigmoid(a)))),
        ("log_sigmoid", |s| pointwise1("log_sigmoid", s, false, |g, a| Ok(g.log_sigmoid(a)))),
        ("relu", check_relu),
        ("sum", |s| reduce("sum", s, |g, a| g.sum_axis(a, 1))),
        ("mean", |s| reduce("mean", s, |g, a| g.mean_axis(a, 0))),
        ("max", |s| reduce("max", s, |g, a| g.max_axis(a, 2))),
        ("softmax", |s| reduce("softmax", s, |g, a| g.softmax(a, 1))),
        ("expand", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = rand_tensor(&mut rng, &[2, 1, 3]);
            check("expand", &[x], OP_TOLERANCE, s, |g, v| g.expand(v[0], 1, 4))
        }),
        ("permute", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = rand_tensor(&mut rng, &[2, 3, 4]);
            check("permute", &[x], OP_TOLERANCE, s, |g, v| g.permute(v[0], &[2, 0, 1]))
        }),
        ("concat_slice", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let a = rand_tensor(&mut rng, &[2, 3]);
            let b = rand_tensor(&mut rng, &[2, 2]);
            check("concat_slice", &[a, b], OP_TOLERANCE, s, |g, v| {
                let c = g.concat(&[v[0], v[1]], 1)?;
                g.slice(c, 1, 1, 3)
            })
        }),
        ("gather_rows", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let table = rand_tensor(&mut rng, &[5, 3]);
            check("gather_rows", &[table], OP_TOLERANCE, s, |g, v| g.gather_rows(v[0], &[4, 0, 4, 2]))
        }),
        ("matmul", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let a = rand_tensor(&mut rng, &[3, 4, 4]);
            let b = rand_tensor(&mut rng, &[3, 4, 4]);
            check("matmul", &[a, b], OP_TOLERANCE, s, |g, v| g.matmul(v[0], v[1]))
        }),
        ("linear", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = rand_tensor(&mut rng, &[3, 5]);
            let w = rand_tensor(&mut rng, &[4, 5]);
            let b = rand_tensor(&mut rng, &[4]);
            check("linear", &[x, w, b], OP_TOLERANCE, s, |g, v| g.linear(v[0], v[1], Some(v[2])))
        }),
        ("conv3d", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = rand_tensor(&mut rng, &[2, 2, 4, 4]);
            let w = rand_tensor(&mut rng, &[3, 2, 1, 3, 3]);
            let b = rand_tensor(&mut rng, &[3]);
            check("conv3d", &[x, w, b], OP_TOLERANCE, s, |g, v| {
                g.conv3d(v[0], v[1], Some(v[2]), [1, 2, 1], [0, 1, 1])
            })
        }),
        ("conv_transpose3d", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = rand_tensor(&mut rng, &[2, 2, 3, 3]);
            let w = rand_tensor(&mut rng, &[2, 2, 3, 3, 3]);
            let b = rand_tensor(&mut rng, &[2]);
            let spec = TransposeSpec { stride: [1, 2, 2], padding: [1, 1, 1], output_padding: [0, 1, 1] };
            check("conv_transpose3d", &[x, w, b], OP_TOLERANCE, s, move |g, v| {
                g.conv_transpose3d(v[0], v[1], Some(v[2]), spec)
            })
        }),
        ("conv1d", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = rand_tensor(&mut rng, &[3, 7]);
            let w = rand_tensor(&mut rng, &[2, 3, 3]);
            let b = rand_tensor(&mut rng, &[2]);
            check("conv1d", &[x, w, b], OP_TOLERANCE, s, |g, v| g.conv1d(v[0], v[1], Some(v[2])))
        }),
        ("maxpool3d", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = rand_tensor(&mut rng, &[2, 2, 4, 4]);
            check("maxpool3d", &[x], OP_TOLERANCE, s, |g, v| g.maxpool3d(v[0], [1, 2, 2], [1, 2, 2]))
        }),
        ("maxpool1d", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = rand_tensor(&mut rng, &[2, 8]);
            check("maxpool1d", &[x], OP_TOLERANCE, s, |g, v| g.maxpool1d(v[0], 3, 2))
        }),
        ("bce_with_logits", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = rand_tensor(&mut rng, &[2, 3, 3]).map(|v| v * 4.0);
            let t = Tensor::from_fn(&[2, 3, 3], |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
            check("bce_with_logits", &[x], OP_TOLERANCE, s, move |g, v| g.bce_with_logits(v[0], &t))
        }),
        ("em_routing", crate::capsule::check_em_routing_gradients),
    ]
}

/// Runs the check registered under `name`, or all of them for `"all"`.
pub fn run(scope: &str, seed: u64) -> Result<Vec<CheckReport>> {
    let cat = catalogue();
    let selected: Vec<_> = if scope == "all" {
        cat
    } else {
        let found: Vec<_> = cat.into_iter().filter(|(n, _)| *n == scope).collect();
        if found.is_empty() {
            return Err(Error::Contract(format!("unknown gradient check {scope}")));
        }
        found
    };
    selected.into_iter().map(|(_, f)| f(seed)).collect()
}

fn pointwise1(
    name: &str,
    seed: u64,
    positive: bool,
    f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = if positive { rand_positive(&mut rng, &[3, 4]) } else { rand_tensor(&mut rng, &[3, 4]).map(|v| v * 3.0) };
    check(name, &[x], OP_TOLERANCE, seed, |g, v| f(g, v[0]))
}

fn pointwise2(
    name: &str,
    seed: u64,
    f: impl Fn(&mut Graph<f64>, Var, Var) -> Result<Var>,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[3, 4]);
    check(name, &[a, b], OP_TOLERANCE, seed, |g, v| f(g, v[0], v[1]))
}

fn reduce(name: &str, seed: u64, f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, &[3, 4, 5]);
    check(name, &[x], OP_TOLERANCE, seed, |g, v| f(g, v[0]))
}

fn check_div(seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_away_from_zero(&mut rng, &[3, 4]);
    check("div", &[a, b], OP_TOLERANCE, seed, |g, v| g.div(v[0], v[1]))
}

fn check_relu(seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_away_from_zero(&mut rng, &[4, 5]);
    check("relu", &[x], OP_TOLERANCE, seed, |g, v| Ok(g.relu(v[0])))
}
