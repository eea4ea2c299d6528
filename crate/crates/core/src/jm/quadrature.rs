//! Gauss-Hermite and Gauss-Legendre rules, and the moments
//! `psi_n(z) = ∫_0^1 x^n e^{z x} dx` used for cumulative hazards.

use std::f64::consts::PI;

/// Nodes and weights for `∫ f(x) e^{-x^2} dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Newton iteration on the orthonormal Hermite recurrence.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "quadrature order must be positive");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let pim4 = PI.powf(-0.25);
        let m = n.div_ceil(2);
        let nf = n as f64;
        let mut z = 0.0;
        for i in 0..m {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-0.166_67),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * nodes[0],
                3 => 1.91 * z - 0.91 * nodes[1],
                _ => 2.0 * z - nodes[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            nodes[i] = z;
            nodes[n - 1 - i] = -z;
            weights[i] = 2.0 / (pp * pp);
            weights[n - 1 - i] = weights[i];
        }
        // ascending order
        nodes.reverse();
        weights.reverse();
        Self { nodes, weights }
    }
}

/// Tensor-product rule over two dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite2d {
    pub order: usize,
    /// `(z1, z2, ln w1 + ln w2 + z1^2 + z2^2)` per node; the last term undoes
    /// the Gaussian weight for adaptive use.
    pub points: Vec<(f64, f64, f64)>,
}

impl GaussHermite2d {
    pub fn new(order: usize) -> Self {
        let gh = GaussHermite::new(order);
        let mut points = Vec::with_capacity(order * order);
        for (z1, w1) in gh.nodes.iter().zip(&gh.weights) {
            for (z2, w2) in gh.nodes.iter().zip(&gh.weights) {
                points.push((*z1, *z2, w1.ln() + w2.ln() + z1 * z1 + z2 * z2));
            }
        }
        Self { order, points }
    }
}

/// Nodes and weights for `∫_{-1}^{1} f(x) dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "quadrature order must be positive");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        for i in 0..n.div_ceil(2) {
            let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = 1.0;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = ((2.0 * jf + 1.0) * z * p2 - jf * p3) / (jf + 1.0);
                }
                pp = nf * (z * p1 - p2) / (z * z - 1.0);
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 {
                    break;
                }
            }
            nodes[i] = -z;
            nodes[n - 1 - i] = z;
            weights[i] = 2.0 / ((1.0 - z * z) * pp * pp);
            weights[n - 1 - i] = weights[i];
        }
        Self { nodes, weights }
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, lo: f64, hi: f64, f: F) -> f64 {
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        half * self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(mid + half * x))
            .sum::<f64>()
    }
}

/// `[psi_0, psi_1, psi_2](z)` given `ez = e^z`.
#[inline]
pub fn exp_moments_with(z: f64, ez: f64) -> [f64; 3] {
    if z.abs() < 1.0 {
        // psi_n(z) = Σ_k z^k / (k! (n + k + 1))
        let mut term = 1.0;
        let mut out = [0.0; 3];
        for k in 0..24 {
            let kf = k as f64;
            out[0] += term / (kf + 1.0);
            out[1] += term / (kf + 2.0);
            out[2] += term / (kf + 3.0);
            term *= z / (kf + 1.0);
        }
        out
    } else {
        let z2 = z * z;
        [
            (ez - 1.0) / z,
            (ez * (z - 1.0) + 1.0) / z2,
            (ez * (z2 - 2.0 * z + 2.0) - 2.0) / (z2 * z),
        ]
    }
}

#[inline]
pub fn exp_moments(z: f64) -> [f64; 3] {
    exp_moments_with(z, z.exp())
}
