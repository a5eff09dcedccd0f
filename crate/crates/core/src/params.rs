//! The full vector of inferred quantities, all on unconstrained scales.
//!
//! Scale parameters are carried as logs and exponentiated where used;
//! the prior accounts for the change of variables. `pack`/`unpack` are exact
//! inverses and the flat layout is fixed, so sampler output, saved modes and
//! covariance matrices all index identically.

use serde::{Deserialize, Serialize};

use crate::engine::EpidemicParams;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Sizes that determine the parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamDims {
    pub regions: usize,
    pub sites: usize,
    pub kappa_basis: usize,
    pub alpha_basis: usize,
}

impl ParamDims {
    pub fn total(&self) -> usize {
        let r = self.regions;
        self.kappa_basis * (1 + r) + 1
            + self.alpha_basis * (1 + r) + 1
            + (1 + r + 1)
            + (1 + r + 1)
            + (self.sites + 1)
            + (r + 1)
            + 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector<S = f64> {
    /// Mean transmission spline coefficients.
    pub beta_kappa_0: Vec<S>,
    /// Region deviations of the transmission spline, by [region][basis].
    pub beta_kappa: Vec<Vec<S>>,
    pub log_sigma_kappa: S,
    /// Mean ART-initiation spline coefficients.
    pub beta_alpha_0: Vec<S>,
    pub beta_alpha: Vec<Vec<S>>,
    pub log_sigma_alpha_star: S,
    /// Cross-region logit prevalence at time zero.
    pub rho0: S,
    pub rho_dev: Vec<S>,
    pub log_sigma_rho: S,
    /// Cross-region logit ART coverage at time zero.
    pub alpha0: S,
    pub alpha_dev: Vec<S>,
    pub log_sigma_alpha: S,
    /// Clinic-specific ANC intercepts.
    pub delta_s: Vec<S>,
    pub log_sigma_delta: S,
    /// Treatment-seeking destination intercepts, log scale.
    pub log_m: Vec<S>,
    pub log_sigma_m: S,
    /// Count-likelihood linear overdispersion, log scale.
    pub log_omega_lin: S,
    /// Count-likelihood quadratic overdispersion, log scale.
    pub log_theta_quad: S,
}

impl<S: Scalar> ParameterVector<S> {
    pub fn zeros(dims: &ParamDims) -> Self {
        let z = S::zero;
        ParameterVector {
            beta_kappa_0: vec![z(); dims.kappa_basis],
            beta_kappa: vec![vec![z(); dims.kappa_basis]; dims.regions],
            log_sigma_kappa: z(),
            beta_alpha_0: vec![z(); dims.alpha_basis],
            beta_alpha: vec![vec![z(); dims.alpha_basis]; dims.regions],
            log_sigma_alpha_star: z(),
            rho0: z(),
            rho_dev: vec![z(); dims.regions],
            log_sigma_rho: z(),
            alpha0: z(),
            alpha_dev: vec![z(); dims.regions],
            log_sigma_alpha: z(),
            delta_s: vec![z(); dims.sites],
            log_sigma_delta: z(),
            log_m: vec![z(); dims.regions],
            log_sigma_m: z(),
            log_omega_lin: z(),
            log_theta_quad: z(),
        }
    }

    pub fn dims(&self) -> ParamDims {
        ParamDims {
            regions: self.rho_dev.len(),
            sites: self.delta_s.len(),
            kappa_basis: self.beta_kappa_0.len(),
            alpha_basis: self.beta_alpha_0.len(),
        }
    }

    pub fn pack(&self) -> Vec<S> {
        let dims = self.dims();
        let mut flat = Vec::with_capacity(dims.total());
        flat.extend_from_slice(&self.beta_kappa_0);
        for row in &self.beta_kappa {
            flat.extend_from_slice(row);
        }
        flat.push(self.log_sigma_kappa);
        flat.extend_from_slice(&self.beta_alpha_0);
        for row in &self.beta_alpha {
            flat.extend_from_slice(row);
        }
        flat.push(self.log_sigma_alpha_star);
        flat.push(self.rho0);
        flat.extend_from_slice(&self.rho_dev);
        flat.push(self.log_sigma_rho);
        flat.push(self.alpha0);
        flat.extend_from_slice(&self.alpha_dev);
        flat.push(self.log_sigma_alpha);
        flat.extend_from_slice(&self.delta_s);
        flat.push(self.log_sigma_delta);
        flat.extend_from_slice(&self.log_m);
        flat.push(self.log_sigma_m);
        flat.push(self.log_omega_lin);
        flat.push(self.log_theta_quad);
        debug_assert_eq!(flat.len(), dims.total());
        flat
    }

    pub fn unpack(flat: &[S], dims: &ParamDims) -> Result<Self> {
        if flat.len() != dims.total() {
            return Err(Error::DimensionMismatch {
                what: "packed parameter vector",
                expected: dims.total(),
                got: flat.len(),
            });
        }
        let mut pos = 0;
        let mut take = |n: usize| {
            let s = flat[pos..pos + n].to_vec();
            pos += n;
            s
        };
        let beta_kappa_0 = take(dims.kappa_basis);
        let beta_kappa: Vec<Vec<S>> =
            (0..dims.regions).map(|_| take(dims.kappa_basis)).collect();
        let log_sigma_kappa = take(1)[0];
        let beta_alpha_0 = take(dims.alpha_basis);
        let beta_alpha: Vec<Vec<S>> =
            (0..dims.regions).map(|_| take(dims.alpha_basis)).collect();
        let log_sigma_alpha_star = take(1)[0];
        let rho0 = take(1)[0];
        let rho_dev = take(dims.regions);
        let log_sigma_rho = take(1)[0];
        let alpha0 = take(1)[0];
        let alpha_dev = take(dims.regions);
        let log_sigma_alpha = take(1)[0];
        let delta_s = take(dims.sites);
        let log_sigma_delta = take(1)[0];
        let log_m = take(dims.regions);
        let log_sigma_m = take(1)[0];
        let log_omega_lin = take(1)[0];
        let log_theta_quad = take(1)[0];
        Ok(ParameterVector {
            beta_kappa_0,
            beta_kappa,
            log_sigma_kappa,
            beta_alpha_0,
            beta_alpha,
            log_sigma_alpha_star,
            rho0,
            rho_dev,
            log_sigma_rho,
            alpha0,
            alpha_dev,
            log_sigma_alpha,
            delta_s,
            log_sigma_delta,
            log_m,
            log_sigma_m,
            log_omega_lin,
            log_theta_quad,
        })
    }

    /// Views of the epidemic-driving fields.
    pub fn epidemic(&self) -> EpidemicParams<'_, S> {
        EpidemicParams {
            beta_kappa_0: &self.beta_kappa_0,
            beta_kappa: &self.beta_kappa,
            beta_alpha_0: &self.beta_alpha_0,
            beta_alpha: &self.beta_alpha,
            rho0: self.rho0,
            rho_dev: &self.rho_dev,
            alpha0: self.alpha0,
            alpha_dev: &self.alpha_dev,
        }
    }
}

/// Stable display names for the packed layout, aligned with `pack`.
pub fn param_names(dims: &ParamDims, region_ids: &[String], site_ids: &[String]) -> Vec<String> {
    assert_eq!(region_ids.len(), dims.regions);
    assert_eq!(site_ids.len(), dims.sites);
    let mut names = Vec::with_capacity(dims.total());
    for i in 0..dims.kappa_basis {
        names.push(format!("beta_kappa0[{i}]"));
    }
    for rid in region_ids {
        for i in 0..dims.kappa_basis {
            names.push(format!("beta_kappa[{rid}][{i}]"));
        }
    }
    names.push("log_sigma_kappa".into());
    for i in 0..dims.alpha_basis {
        names.push(format!("beta_alpha0[{i}]"));
    }
    for rid in region_ids {
        for i in 0..dims.alpha_basis {
            names.push(format!("beta_alpha[{rid}][{i}]"));
        }
    }
    names.push("log_sigma_alpha_star".into());
    names.push("rho0".into());
    for rid in region_ids {
        names.push(format!("rho_dev[{rid}]"));
    }
    names.push("log_sigma_rho".into());
    names.push("alpha0".into());
    for rid in region_ids {
        names.push(format!("alpha_dev[{rid}]"));
    }
    names.push("log_sigma_alpha".into());
    for sid in site_ids {
        names.push(format!("delta[{sid}]"));
    }
    names.push("log_sigma_delta".into());
    for rid in region_ids {
        names.push(format!("log_m[{rid}]"));
    }
    names.push("log_sigma_m".into());
    names.push("log_omega".into());
    names.push("log_theta".into());
    debug_assert_eq!(names.len(), dims.total());
    names
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pack_unpack_round_trips_bit_exactly() {
        let dims = ParamDims {
            regions: 3,
            sites: 5,
            kappa_basis: 4,
            alpha_basis: 7,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let flat: Vec<f64> = (0..dims.total())
                .map(|_| rng.random::<f64>() * 20.0 - 10.0)
                .collect();
            let p = ParameterVector::unpack(&flat, &dims).unwrap();
            let packed = p.pack();
            assert_eq!(flat, packed);
            assert_eq!(p.dims(), dims);
        }
    }

    #[test]
    fn unpack_rejects_wrong_length() {
        let dims = ParamDims {
            regions: 2,
            sites: 1,
            kappa_basis: 3,
            alpha_basis: 3,
        };
        let flat = vec![0.0; dims.total() - 1];
        assert!(ParameterVector::<f64>::unpack(&flat, &dims).is_err());
    }

    #[test]
    fn names_align_with_layout() {
        let dims = ParamDims {
            regions: 2,
            sites: 2,
            kappa_basis: 2,
            alpha_basis: 3,
        };
        let regions = vec!["a".to_string(), "b".to_string()];
        let sites = vec!["a-anc1".to_string(), "b-anc1".to_string()];
        let names = param_names(&dims, &regions, &sites);
        assert_eq!(names.len(), dims.total());
        assert_eq!(names[0], "beta_kappa0[0]");
        assert_eq!(names[names.len() - 1], "log_theta");
        // Spot-check one interior position against pack order.
        let mut p = ParameterVector::<f64>::zeros(&dims);
        p.rho0 = 42.0;
        let flat = p.pack();
        let idx = flat.iter().position(|v| *v == 42.0).unwrap();
        assert_eq!(names[idx], "rho0");
    }
}
