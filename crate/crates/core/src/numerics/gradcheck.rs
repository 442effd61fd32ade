//! Central finite-difference gradient checking (64-bit only).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, NumericsError, Tensor};

/// Relative-error floor used in the denominator `max(|a|, |b|, floor)`.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, coordinate) of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Compares the analytic gradient of a scalar graph function against
/// central differences `(f(x+h) - f(x-h)) / 2h` for every coordinate of
/// every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, NumericsError>,
{
    grad_check_sampled(f, inputs, h, None)
}

/// Like [`grad_check`] but checks at most `max_coords` evenly strided
/// coordinates per input.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, NumericsError>,
{
    if !(h > 0.0) {
        return Err(NumericsError::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    let eval = |xs: &[Tensor<f64>]| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&mut g, &ids)?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(NumericsError::NotScalar(v.shape().to_vec()));
        }
        Ok(v.data()[0])
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &ids)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, coords_checked: 0 };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, id) in ids.iter().enumerate() {
        let analytic = grads.get_or_zeros(*id, &inputs[which]);
        let len = inputs[which].len();
        let stride = match max_coords {
            Some(m) if m > 0 && m < len => len.div_ceil(m),
            _ => 1,
        };
        for coord in (0..len).step_by(stride) {
            let orig = inputs[which].data()[coord];
            work[which].data_mut()[coord] = orig + h;
            let plus = eval(&work)?;
            work[which].data_mut()[coord] = orig - h;
            let minus = eval(&work)?;
            work[which].data_mut()[coord] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[coord];
            let rel = relative_error(a, numeric);
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (which, coord);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

type Check = (&'static str, Vec<Vec<usize>>, fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, NumericsError>);

/// Weighted sum so that every output coordinate receives a distinct cotangent.
fn weighted_sum(g: &mut Graph<f64>, x: NodeId) -> Result<NodeId, NumericsError> {
    let v = g.value(x);
    let w: Vec<f64> = (0..v.len()).map(|i| 0.3 + 0.7 * ((i * 7919) % 13) as f64 / 13.0).collect();
    let w = g.constant(Tensor::new(v.shape().to_vec(), w)?);
    let p = g.mul(x, w)?;
    g.sum(p)
}

fn checks() -> Vec<Check> {
    vec![
        ("matmul", vec![vec![4, 3], vec![3, 5]], |g, x| {
            let y = g.matmul(x[0], x[1])?;
            weighted_sum(g, y)
        }),
        ("add", vec![vec![3, 4], vec![3, 4]], |g, x| {
            let y = g.add(x[0], x[1])?;
            weighted_sum(g, y)
        }),
        ("sub", vec![vec![3, 4], vec![3, 4]], |g, x| {
            let y = g.sub(x[0], x[1])?;
            weighted_sum(g, y)
        }),
        ("mul", vec![vec![3, 4], vec![3, 4]], |g, x| {
            let y = g.mul(x[0], x[1])?;
            weighted_sum(g, y)
        }),
        ("scale", vec![vec![2, 5]], |g, x| {
            let y = g.scale(x[0], -1.7)?;
            weighted_sum(g, y)
        }),
        ("add_bias", vec![vec![4, 3], vec![3]], |g, x| {
            let y = g.add_bias(x[0], x[1])?;
            weighted_sum(g, y)
        }),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |g, x| {
            let y = g.layer_norm(x[0], x[1], x[2], 1e-5)?;
            weighted_sum(g, y)
        }),
        ("gelu", vec![vec![3, 5]], |g, x| {
            let y = g.gelu(x[0])?;
            weighted_sum(g, y)
        }),
        ("softmax", vec![vec![3, 5]], |g, x| {
            let y = g.softmax(x[0])?;
            weighted_sum(g, y)
        }),
        ("attention", vec![vec![4, 8], vec![5, 8], vec![5, 8]], |g, x| {
            let y = g.attention(x[0], x[1], x[2], 2)?;
            weighted_sum(g, y)
        }),
        ("gather_rows", vec![vec![5, 3]], |g, x| {
            let y = g.gather_rows(x[0], &[4, 0, 4, 2])?;
            weighted_sum(g, y)
        }),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], |g, x| {
            let y = g.concat_rows(x[0], x[1])?;
            weighted_sum(g, y)
        }),
        ("mean_rows", vec![vec![4, 3]], |g, x| {
            let y = g.mean_rows(x[0])?;
            weighted_sum(g, y)
        }),
        ("mean", vec![vec![4, 3]], |g, x| {
            let y = g.square(x[0])?;
            g.mean(y)
        }),
        ("cross_entropy", vec![vec![4, 5]], |g, x| g.cross_entropy(x[0], &[0, 3, 4, 1])),
    ]
}

/// Runs the finite-difference check for every differentiable primitive at
/// one seed. Returns `(primitive, max relative error)` pairs.
pub fn primitive_checks(seed: u64, h: f64) -> Result<Vec<(&'static str, f64)>, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    checks()
        .into_iter()
        .map(|(name, shapes, f)| {
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(&mut rng, s)).collect();
            grad_check(f, &inputs, h).map(|r| (name, r.max_rel_error))
        })
        .collect()
}
