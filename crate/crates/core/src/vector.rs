//! Small dense-vector helpers over `&[f64]`; dimensions are runtime values.

use rand::Rng;
use rand_distr::StandardNormal;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: &mut [f64]) {
    let n = norm(a);
    a.iter_mut().for_each(|x| *x /= n);
}

pub fn normalized(a: &[f64]) -> Vec<f64> {
    let mut v = a.to_vec();
    normalize(&mut v);
    v
}

/// Uniform point on the unit sphere `S^{d-1}`.
pub fn random_unit<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    let mut v = vec![0.0; d];
    fill_random_unit(&mut v, rng);
    v
}

pub fn fill_random_unit<R: Rng + ?Sized>(out: &mut [f64], rng: &mut R) {
    loop {
        out.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
        let n = norm(out);
        if n > 1e-12 {
            out.iter_mut().for_each(|x| *x /= n);
            return;
        }
    }
}

/// Uniform unit vector orthogonal to the unit vector `v`.
pub fn random_orthogonal_unit<R: Rng + ?Sized>(v: &[f64], rng: &mut R) -> Vec<f64> {
    let mut u = vec![0.0; v.len()];
    fill_random_orthogonal_unit(v, &mut u, rng);
    u
}

pub fn fill_random_orthogonal_unit<R: Rng + ?Sized>(v: &[f64], out: &mut [f64], rng: &mut R) {
    loop {
        out.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
        let p = dot(out, v);
        out.iter_mut().zip(v).for_each(|(x, y)| *x -= p * y);
        let n = norm(out);
        if n > 1e-9 {
            out.iter_mut().for_each(|x| *x /= n);
            return;
        }
    }
}

/// Angle between two unit vectors, robust near 0 and pi.
pub fn angle_between(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x + y) * (x + y)).sum::<f64>().sqrt();
    2.0 * diff.atan2(sum)
}
