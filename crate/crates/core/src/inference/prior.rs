//! Joint log-prior over the parameter vector.
//!
//! Mean spline coefficients and the global intercepts carry wide normal
//! priors (sd 5). Region deviations carry hierarchical normals with an
//! estimated scale plus an independent first-difference penalty between
//! consecutive basis coefficients (starting at the second coefficient).
//! Every scale is half-normal(0, 1) on the positive axis, evaluated with the
//! log-Jacobian of the log transform so the sampler can work unconstrained.
//! Overdispersion parameters carry N(0, 2) priors directly on the log scale,
//! and the treatment-seeking intercepts are normal around their
//! graph-derived prior means.

use crate::params::ParameterVector;
use crate::scalar::{normal_lpdf, normal_lpdf_fixed, Scalar};

/// Log-density of the half-normal(0, 1) prior on `sigma = exp(log_sigma)`,
/// including the Jacobian of the log transform.
fn half_normal_on_log<S: Scalar>(log_sigma: S) -> S {
    // ln sqrt(2/pi) = 0.5 * ln(2/pi)
    const LN_NORM: f64 = -0.225_791_352_644_727_43;
    let sigma = log_sigma.exp();
    S::from_f64(LN_NORM) - S::from_f64(0.5) * sigma * sigma + log_sigma
}

fn spline_block<S: Scalar>(mean: &[S], devs: &[Vec<S>], log_sigma: S) -> S {
    let mut lp = S::zero();
    for &b in mean {
        lp += normal_lpdf_fixed(b, 0.0, 5.0);
    }
    let sigma = log_sigma.exp();
    for row in devs {
        for &b in row {
            lp += normal_lpdf(b, S::zero(), sigma);
        }
        for w in row.windows(2) {
            lp += normal_lpdf_fixed(w[1] - w[0], 0.0, 1.0);
        }
    }
    lp + half_normal_on_log(log_sigma)
}

fn effects_block<S: Scalar>(mean: S, devs: &[S], log_sigma: S) -> S {
    let mut lp = normal_lpdf_fixed(mean, 0.0, 5.0);
    let sigma = log_sigma.exp();
    for &d in devs {
        lp += normal_lpdf(d, S::zero(), sigma);
    }
    lp + half_normal_on_log(log_sigma)
}

pub fn log_prior<S: Scalar>(p: &ParameterVector<S>, prior_mean_log_m: &[f64]) -> S {
    let mut lp = S::zero();

    lp += spline_block(&p.beta_kappa_0, &p.beta_kappa, p.log_sigma_kappa);
    lp += spline_block(&p.beta_alpha_0, &p.beta_alpha, p.log_sigma_alpha_star);
    lp += effects_block(p.rho0, &p.rho_dev, p.log_sigma_rho);
    lp += effects_block(p.alpha0, &p.alpha_dev, p.log_sigma_alpha);

    let sigma_delta = p.log_sigma_delta.exp();
    for &d in &p.delta_s {
        lp += normal_lpdf(d, S::zero(), sigma_delta);
    }
    lp += half_normal_on_log(p.log_sigma_delta);

    let sigma_m = p.log_sigma_m.exp();
    for (j, &lm) in p.log_m.iter().enumerate() {
        lp += normal_lpdf(lm, S::from_f64(prior_mean_log_m[j]), sigma_m);
    }
    lp += half_normal_on_log(p.log_sigma_m);

    lp += normal_lpdf_fixed(p.log_omega_lin, 0.0, 2.0);
    lp += normal_lpdf_fixed(p.log_theta_quad, 0.0, 2.0);
    lp
}
