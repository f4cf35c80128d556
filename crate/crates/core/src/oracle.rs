//! Independent checks on certified bounds and gradients: empirical attacks
//! inside the perturbation set, brute-force grids on tiny inputs, and
//! central finite differences.

use crate::bounds::{CertResult, NormKind, PerturbationSpec};
use crate::error::{BtnError, Result};
use crate::model::Network;
use crate::numerics::{IntervalTensor, Tensor};
use crate::rng::{CounterRng, Stream};
use crate::scalar::Scalar;

/// Steps per gradient-ascent restart.
pub const ASCENT_STEPS: usize = 20;

/// Denominator floor for [`relative_error`], so components that are zero up
/// to round-off compare on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult<T> {
    pub n_samples: usize,
    pub empirical_pixel_min: Tensor<T>,
    pub empirical_pixel_max: Tensor<T>,
    pub empirical_count_min: T,
    pub empirical_count_max: T,
    /// Largest `|count(f(x')) - count(f(x))|` seen.
    pub worst_count_deviation: T,
    pub worst_input: Tensor<T>,
    /// Samples whose output left the certified box (any pixel or the count)
    /// by more than the tolerance.
    pub violations: usize,
}

struct Tracker<'a, T> {
    cert: &'a CertResult<T>,
    tol: T,
    clean_count: T,
    n: usize,
    min: Tensor<T>,
    max: Tensor<T>,
    cmin: T,
    cmax: T,
    worst: T,
    worst_input: Tensor<T>,
    violations: usize,
}

impl<'a, T: Scalar> Tracker<'a, T> {
    fn record(&mut self, x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
        let lo = self.cert.output_interval.lower();
        let hi = self.cert.output_interval.upper();
        lo.ensure_same_shape(y, "attack")?;
        let mut bad = false;
        for i in 0..y.len() {
            let v = y.data()[i];
            if !v.is_finite() {
                return Err(BtnError::NonFinite {
                    context: "attack output",
                    index: i,
                });
            }
            if v < lo.data()[i] - self.tol || v > hi.data()[i] + self.tol {
                bad = true;
            }
            let mn = &mut self.min.data_mut()[i];
            if v < *mn {
                *mn = v;
            }
            let mx = &mut self.max.data_mut()[i];
            if v > *mx {
                *mx = v;
            }
        }
        let c = y.sum();
        if c < self.cert.count_lower - self.tol || c > self.cert.count_upper + self.tol {
            bad = true;
        }
        self.cmin = self.cmin.min(c);
        self.cmax = self.cmax.max(c);
        let dev = (c - self.clean_count).abs();
        if dev > self.worst {
            self.worst = dev;
            self.worst_input = x.clone();
        }
        self.violations += usize::from(bad);
        self.n += 1;
        Ok(())
    }
}

fn project<T: Scalar>(x0: &Tensor<T>, x: &mut Tensor<T>, spec: &PerturbationSpec<T>) {
    let eps = spec.epsilon;
    match spec.norm {
        NormKind::Linf => {
            let (lo, hi) = if spec.clamp_to_unit {
                (T::zero(), T::one())
            } else {
                (T::neg_infinity(), T::infinity())
            };
            for (v, &c) in x.data_mut().iter_mut().zip(x0.data()) {
                *v = v.max(c - eps).min(c + eps).max(lo).min(hi);
            }
        }
        NormKind::L2 => {
            let norm = x
                .data()
                .iter()
                .zip(x0.data())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<T>()
                .sqrt();
            if norm > eps {
                let s = eps / norm;
                for (v, &c) in x.data_mut().iter_mut().zip(x0.data()) {
                    *v = c + (*v - c) * s;
                }
            }
        }
    }
}

/// Steepest-ascent direction of a linear functional with gradient `g` under
/// the attack norm, scaled to length `step`.
fn ascent_step<T: Scalar>(g: &Tensor<T>, norm: NormKind, step: T) -> Tensor<T> {
    match norm {
        NormKind::Linf => g.map(|v| crate::scalar::abs_subgradient(v) * step),
        NormKind::L2 => {
            let n = g.sum_squares().sqrt();
            if n > T::zero() {
                g.scale(step / n)
            } else {
                Tensor::zeros(g.shape())
            }
        }
    }
}

fn random_direction<T: Scalar>(rng: &mut CounterRng, shape: &[usize], norm: NormKind) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = match norm {
        NormKind::Linf => (0..n)
            .map(|_| if rng.next_u64() >> 63 == 0 { -T::one() } else { T::one() })
            .collect(),
        NormKind::L2 => {
            let v: Vec<T> = (0..n).map(|_| rng.normal()).collect();
            let s = v.iter().map(|&a| a * a).sum::<T>().sqrt();
            v.into_iter().map(|a| if s > T::zero() { a / s } else { T::zero() }).collect()
        }
    };
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

fn uniform_sample<T: Scalar>(rng: &mut CounterRng, x: &Tensor<T>, spec: &PerturbationSpec<T>) -> Tensor<T> {
    let eps = spec.epsilon;
    let mut out = match spec.norm {
        NormKind::Linf => {
            let data = x.data().iter().map(|&c| c + rng.uniform(-eps, eps)).collect();
            Tensor::new(x.shape().to_vec(), data).expect("shape and data agree")
        }
        NormKind::L2 => {
            let d = random_direction::<T>(rng, x.shape(), NormKind::L2);
            let r = eps * T::of(rng.next_f64().powf(1.0 / x.len().max(1) as f64));
            let mut out = x.clone();
            out.axpy(r, &d).expect("same shape");
            out
        }
    };
    project(x, &mut out, spec);
    out
}

/// Searches the perturbation set for outputs that escape `cert`.
///
/// Half the budget is uniform samples, a quarter is corner (or sphere)
/// samples starting with `x ± eps` along the count gradient, and the rest is
/// projected gradient ascent in restarts of [`ASCENT_STEPS`] steps of size
/// `eps / 10`, alternating between pushing the count up and down.
pub fn sample_attack<T: Scalar, M: Network<T> + ?Sized>(
    m: &M,
    x: &Tensor<T>,
    spec: &PerturbationSpec<T>,
    n: usize,
    seed: u64,
    cert: &CertResult<T>,
    tol: T,
) -> Result<AttackResult<T>> {
    spec.validate()?;
    if n == 0 {
        return Err(BtnError::Empty("attack sample budget"));
    }
    let eps = spec.epsilon;
    let mut rng = CounterRng::new(seed, Stream::Attack);
    let y0 = m.forward(x)?;
    let ones = Tensor::full(y0.shape(), T::one());
    let mut tr = Tracker {
        cert,
        tol,
        clean_count: y0.sum(),
        n: 0,
        min: Tensor::full(y0.shape(), T::infinity()),
        max: Tensor::full(y0.shape(), T::neg_infinity()),
        cmin: T::infinity(),
        cmax: T::neg_infinity(),
        worst: T::zero(),
        worst_input: x.clone(),
        violations: 0,
    };

    let n_uniform = n.div_ceil(2);
    let n_corner = (n - n_uniform).div_ceil(2);
    let n_ascent = n - n_uniform - n_corner;

    for _ in 0..n_uniform {
        let xs = uniform_sample(&mut rng, x, spec);
        let y = m.forward(&xs)?;
        tr.record(&xs, &y)?;
    }

    let g0 = m.input_gradient(x, &ones)?;
    for k in 0..n_corner {
        let dir = match k {
            0 => ascent_step(&g0, spec.norm, T::one()),
            1 => ascent_step(&g0, spec.norm, -T::one()),
            _ => random_direction(&mut rng, x.shape(), spec.norm),
        };
        let mut xs = x.clone();
        xs.axpy(eps, &dir)?;
        project(x, &mut xs, spec);
        let y = m.forward(&xs)?;
        tr.record(&xs, &y)?;
    }

    let step = eps / T::of(10.0);
    let mut done = 0;
    let mut restart = 0usize;
    while done < n_ascent {
        let sign = if restart.is_multiple_of(2) { T::one() } else { -T::one() };
        let mut xs = if restart < 2 { x.clone() } else { uniform_sample(&mut rng, x, spec) };
        for _ in 0..ASCENT_STEPS {
            if done == n_ascent {
                break;
            }
            let g = m.input_gradient(&xs, &ones)?;
            xs.axpy(sign, &ascent_step(&g, spec.norm, step))?;
            project(x, &mut xs, spec);
            let y = m.forward(&xs)?;
            tr.record(&xs, &y)?;
            done += 1;
        }
        restart += 1;
    }

    Ok(AttackResult {
        n_samples: tr.n,
        empirical_pixel_min: tr.min,
        empirical_pixel_max: tr.max,
        empirical_count_min: tr.cmin,
        empirical_count_max: tr.cmax,
        worst_count_deviation: tr.worst,
        worst_input: tr.worst_input,
        violations: tr.violations,
    })
}

pub const GRID_MAX_DIMS: usize = 4;
pub const GRID_MAX_RESOLUTION: usize = 41;

/// Evaluates `m` on every point of a `resolution^d` grid spanning `bx`
/// (endpoints included) and returns the elementwise output envelope.
pub fn grid_oracle<T: Scalar, M: Network<T> + ?Sized>(
    m: &M,
    bx: &IntervalTensor<T>,
    resolution: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = bx.lower().len();
    if d > GRID_MAX_DIMS {
        return Err(BtnError::GridTooLarge(format!(
            "{d} input dimensions; the grid oracle handles at most {GRID_MAX_DIMS}, use sampling instead"
        )));
    }
    if !(2..=GRID_MAX_RESOLUTION).contains(&resolution) {
        return Err(BtnError::GridTooLarge(format!(
            "resolution {resolution} outside 2..={GRID_MAX_RESOLUTION}"
        )));
    }
    let lo = bx.lower();
    let hi = bx.upper();
    let denom = T::of_usize(resolution - 1);
    let mut idx = vec![0usize; d];
    let mut env: Option<(Tensor<T>, Tensor<T>)> = None;
    loop {
        let pt: Vec<T> = (0..d)
            .map(|k| {
                let (a, b) = (lo.data()[k], hi.data()[k]);
                if idx[k] == resolution - 1 {
                    b
                } else {
                    a + (b - a) * T::of_usize(idx[k]) / denom
                }
            })
            .collect();
        let y = m.forward(&Tensor::new(lo.shape().to_vec(), pt)?)?;
        env = Some(match env {
            None => (y.clone(), y),
            Some((mn, mx)) => (mn.zip_with(&y, "grid", |a, b| a.min(b))?, mx.maximum(&y)?),
        });
        let mut k = 0;
        loop {
            if k == d {
                return Ok(env.expect("at least one grid point"));
            }
            idx[k] += 1;
            if idx[k] < resolution {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Central differences `(f(θ + h e_i) - f(θ - h e_i)) / 2h` for every `i`.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(f: F, params: &[f64], h: f64) -> Result<Vec<f64>> {
    let all: Vec<usize> = (0..params.len()).collect();
    finite_diff_grad_at(f, params, &all, h)
}

/// [`finite_diff_grad`] restricted to the listed coordinates.
pub fn finite_diff_grad_at<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    params: &[f64],
    indices: &[usize],
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(BtnError::config("h", "step must be positive and finite"));
    }
    let mut theta = params.to_vec();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = theta[i];
        theta[i] = orig + h;
        let fp = f(&theta);
        theta[i] = orig - h;
        let fm = f(&theta);
        theta[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(BtnError::NonFinite {
                context: "finite-difference loss",
                index: i,
            });
        }
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}
