use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NdArray, NumericsError, Var};

/// Denominator floor in `|analytic - numeric| / (|analytic| + eps)`.
pub const GRAD_CHECK_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences with step `h`, over every coordinate of every input.
pub fn grad_check<F, E>(f: F, point: &[NdArray<f64>], h: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let eval = |inputs: &[NdArray<f64>]| -> Result<f64, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        name: String::new(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coordinates: 0,
    };
    let mut probe = point.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for i in 0..point[which].len() {
            let x0 = point[which].data()[i];
            probe[which].data_mut()[i] = x0 + h;
            let fp = eval(&probe)?;
            probe[which].data_mut()[i] = x0 - h;
            let fm = eval(&probe)?;
            probe[which].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.map_or(0.0, |g| g.data()[i]);
            let abs = (a - numeric).abs();
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(abs / (a.abs() + GRAD_CHECK_EPS));
            report.coordinates += 1;
        }
    }
    Ok(report)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> NdArray<f64> {
    NdArray::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Reduces a non-scalar output to a scalar with fixed pseudo-random weights so
/// that no gradient is trivially zero (e.g. the sum of a softmax).
fn weighted_sum(g: &mut Graph<f64>, y: Var) -> Result<Var, NumericsError> {
    let shape = g.shape(y).to_vec();
    let n = g.value(y).len();
    let w = NdArray::from_fn(&shape, |i| {
        let k = (i as u64).wrapping_mul(2_654_435_761) % 1009;
        k as f64 / 504.5 - 1.0 + 0.03
    });
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    let m = g.mean(p)?;
    Ok(g.scale(m, n as f64))
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericsError>>;

/// Checks every primitive op on small randomized shapes in 64-bit.
pub fn primitive_suite(seed: u64, h: f64) -> Result<Vec<GradCheckReport>, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(&str, Vec<NdArray<f64>>, Builder)> = Vec::new();

    let mut add_case = |name: &'static str, shapes: &[&[usize]], b: Builder, rng: &mut ChaCha8Rng| {
        let pts = shapes.iter().map(|s| random(rng, s)).collect();
        cases.push((name, pts, b));
    };

    add_case("add", &[&[3, 4], &[3, 4]], Box::new(|g, v| { let y = g.add(v[0], v[1])?; weighted_sum(g, y) }), &mut rng);
    add_case("add_broadcast", &[&[2, 3, 4], &[4]], Box::new(|g, v| { let y = g.add(v[0], v[1])?; weighted_sum(g, y) }), &mut rng);
    add_case("sub", &[&[2, 5], &[2, 5]], Box::new(|g, v| { let y = g.sub(v[0], v[1])?; weighted_sum(g, y) }), &mut rng);
    add_case("mul", &[&[3, 4], &[3, 4]], Box::new(|g, v| { let y = g.mul(v[0], v[1])?; weighted_sum(g, y) }), &mut rng);
    add_case("mul_broadcast", &[&[2, 3, 4], &[2, 1, 4]], Box::new(|g, v| { let y = g.mul(v[0], v[1])?; weighted_sum(g, y) }), &mut rng);
    add_case("mul_self", &[&[5]], Box::new(|g, v| { let y = g.mul(v[0], v[0])?; weighted_sum(g, y) }), &mut rng);
    add_case("scale", &[&[4]], Box::new(|g, v| { let y = g.scale(v[0], -2.5); weighted_sum(g, y) }), &mut rng);
    add_case("add_scalar", &[&[4]], Box::new(|g, v| { let y = g.add_scalar(v[0], 0.75); let y = g.mul(y, y)?; weighted_sum(g, y) }), &mut rng);
    add_case("matmul", &[&[3, 4], &[4, 5]], Box::new(|g, v| { let y = g.matmul(v[0], v[1])?; weighted_sum(g, y) }), &mut rng);
    add_case("matmul_shared_batched", &[&[2, 3, 4], &[4, 2]], Box::new(|g, v| { let y = g.matmul(v[0], v[1])?; weighted_sum(g, y) }), &mut rng);
    add_case("matmul_batched_tb", &[&[2, 3, 4], &[2, 5, 4]], Box::new(|g, v| { let y = g.matmul_t(v[0], v[1], false, true)?; weighted_sum(g, y) }), &mut rng);
    add_case("matmul_ta", &[&[2, 4, 3], &[4, 2]], Box::new(|g, v| { let y = g.matmul_t(v[0], v[1], true, false)?; weighted_sum(g, y) }), &mut rng);
    add_case("matmul_chain", &[&[3, 3], &[3, 4], &[4, 2]], Box::new(|g, v| { let y = g.matmul(v[0], v[1])?; let y = g.matmul(y, v[2])?; weighted_sum(g, y) }), &mut rng);
    add_case("reshape", &[&[2, 6]], Box::new(|g, v| { let y = g.reshape(v[0], &[3, 4])?; let y = g.mul(y, y)?; weighted_sum(g, y) }), &mut rng);
    add_case("permute", &[&[2, 3, 4]], Box::new(|g, v| { let y = g.permute(v[0], &[2, 0, 1])?; let y = g.mul(y, y)?; weighted_sum(g, y) }), &mut rng);
    add_case("slice", &[&[3, 5]], Box::new(|g, v| { let y = g.slice(v[0], 1, 1, 3)?; let y = g.mul(y, y)?; weighted_sum(g, y) }), &mut rng);
    add_case("concat", &[&[2, 3], &[2, 2]], Box::new(|g, v| { let y = g.concat(&[v[0], v[1]], 1)?; let y = g.mul(y, y)?; weighted_sum(g, y) }), &mut rng);
    add_case("mean", &[&[3, 4]], Box::new(|g, v| { let y = g.mul(v[0], v[0])?; let m = g.mean(y)?; let m = g.mul(m, m)?; Ok(m) }), &mut rng);
    add_case("mean_axis", &[&[2, 3, 4]], Box::new(|g, v| { let y = g.mean_axis(v[0], 1)?; let y = g.mul(y, y)?; weighted_sum(g, y) }), &mut rng);
    add_case("layer_norm", &[&[3, 6]], Box::new(|g, v| { let y = g.layer_norm(v[0], 1e-5)?; weighted_sum(g, y) }), &mut rng);
    add_case("softmax", &[&[3, 5]], Box::new(|g, v| { let y = g.softmax(v[0])?; weighted_sum(g, y) }), &mut rng);
    add_case("gelu", &[&[7]], Box::new(|g, v| { let y = g.gelu(v[0]); weighted_sum(g, y) }), &mut rng);
    add_case("sinusoidal_embed", &[&[3]], Box::new(|g, v| { let y = g.sinusoidal_embed(v[0], 8, 2.0)?; weighted_sum(g, y) }), &mut rng);
    add_case("gather", &[&[4, 3]], Box::new(|g, v| { let y = g.gather(v[0], &[2, 0, 2, 3])?; let y = g.mul(y, y)?; weighted_sum(g, y) }), &mut rng);
    add_case("layer_norm_softmax_mean", &[&[4, 5]], Box::new(|g, v| { let y = g.layer_norm(v[0], 1e-5)?; let y = g.softmax(y)?; let y = g.mul(y, y)?; g.mean(y) }), &mut rng);

    cases
        .into_iter()
        .map(|(name, point, f)| {
            let mut r = grad_check(f, &point, h)?;
            r.name = name.to_string();
            Ok(r)
        })
        .collect()
}
