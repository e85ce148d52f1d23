//! Hand-coded forward model and unnormalized log-posterior for the halo model.
//!
//! Each halo at `h` with mass `m` adds a tangential shear of strength
//! `m / |g - h|` to a galaxy at `g`. With `phi` the angle of the vector from
//! the halo to the galaxy, the contribution to the mean ellipticity is
//! `(-f cos 2phi, -f sin 2phi)`. Observed ellipticity components are the
//! summed contributions plus independent Gaussian noise.
//!
//! This module is the reference the compiled model graph is checked against,
//! so it is written directly from the model equations and shares no code with
//! [`crate::dsl`] beyond the scalar log-densities.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density;

/// Default side length of the square sky, in pixels.
pub const FIELD_SIZE: f64 = 4200.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LensError {
    #[error("galaxy at ({x}, {y}) is {distance} px from a halo center, below the {min_dist} px guard")]
    Singularity {
        x: f64,
        y: f64,
        distance: f64,
        min_dist: f64,
    },
    #[error("invalid model parameters: {0}")]
    InvalidParams(&'static str),
    #[error("sky must contain at least one galaxy")]
    EmptySky,
    #[error("galaxy {id} lies outside the field [0, {field_size}]^2")]
    OutsideField { id: i64, field_size: f64 },
    #[error("galaxy id {0} appears more than once")]
    DuplicateGalaxy(i64),
    #[error("non-finite value in galaxy {0}")]
    NonFinite(i64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Two-component galaxy shape: `e1` along the x axis, `e2` along the diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Ellipticity {
    pub e1: f64,
    pub e2: f64,
}

impl Ellipticity {
    pub const ZERO: Ellipticity = Ellipticity { e1: 0.0, e2: 0.0 };

    pub const fn new(e1: f64, e2: f64) -> Self {
        Self { e1, e2 }
    }

    pub fn magnitude(self) -> f64 {
        self.e1.hypot(self.e2)
    }
}

impl std::ops::Add for Ellipticity {
    type Output = Ellipticity;

    fn add(self, rhs: Ellipticity) -> Ellipticity {
        Ellipticity::new(self.e1 + rhs.e1, self.e2 + rhs.e2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Galaxy {
    pub id: i64,
    pub loc: Point2,
    pub ell: Ellipticity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Halo {
    pub loc: Point2,
    pub mass: f64,
}

impl Halo {
    pub const fn new(x: f64, y: f64, mass: f64) -> Self {
        Self {
            loc: Point2::new(x, y),
            mass,
        }
    }
}

/// One observed field of galaxies.
#[derive(Debug, Clone, PartialEq)]
pub struct Sky {
    pub id: i64,
    galaxies: Vec<Galaxy>,
    pub field_size: f64,
}

impl Sky {
    /// Validates galaxy count, id uniqueness, finiteness and field bounds.
    pub fn new(id: i64, galaxies: Vec<Galaxy>, field_size: f64) -> Result<Self, LensError> {
        if galaxies.is_empty() {
            return Err(LensError::EmptySky);
        }
        let mut seen = std::collections::HashSet::with_capacity(galaxies.len());
        for g in &galaxies {
            if !g.loc.is_finite() || !g.ell.e1.is_finite() || !g.ell.e2.is_finite() {
                return Err(LensError::NonFinite(g.id));
            }
            let inside = |v: f64| (0.0..=field_size).contains(&v);
            if !inside(g.loc.x) || !inside(g.loc.y) {
                return Err(LensError::OutsideField {
                    id: g.id,
                    field_size,
                });
            }
            if !seen.insert(g.id) {
                return Err(LensError::DuplicateGalaxy(g.id));
            }
        }
        Ok(Self {
            id,
            galaxies,
            field_size,
        })
    }

    pub fn galaxies(&self) -> &[Galaxy] {
        &self.galaxies
    }

    pub fn len(&self) -> usize {
        self.galaxies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.galaxies.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LensModelParams {
    /// Ellipticity noise variance per component.
    pub sigma2: f64,
    pub field_lo: f64,
    pub field_hi: f64,
    pub gamma_shape: f64,
    pub gamma_rate: f64,
    /// Galaxy-halo distances below this are treated as singular.
    pub min_dist: f64,
}

impl Default for LensModelParams {
    fn default() -> Self {
        Self {
            sigma2: 0.05,
            field_lo: 0.0,
            field_hi: FIELD_SIZE,
            gamma_shape: 0.001,
            gamma_rate: 0.001,
            min_dist: 1e-6,
        }
    }
}

impl LensModelParams {
    pub fn validate(&self) -> Result<(), LensError> {
        if !(self.sigma2 > 0.0) {
            return Err(LensError::InvalidParams("sigma2 must be positive"));
        }
        if !(self.field_lo < self.field_hi) {
            return Err(LensError::InvalidParams("field_lo must be below field_hi"));
        }
        if !(self.gamma_shape > 0.0 && self.gamma_rate > 0.0) {
            return Err(LensError::InvalidParams("gamma shape and rate must be positive"));
        }
        if !(self.min_dist > 0.0) {
            return Err(LensError::InvalidParams("min_dist must be positive"));
        }
        Ok(())
    }
}

/// Mean-ellipticity contribution of a single halo at a galaxy location.
pub fn tangential_shear(
    galaxy_loc: Point2,
    halo: &Halo,
    params: &LensModelParams,
) -> Result<Ellipticity, LensError> {
    let dx = galaxy_loc.x - halo.loc.x;
    let dy = galaxy_loc.y - halo.loc.y;
    let d = dx.hypot(dy);
    if !(d >= params.min_dist) {
        return Err(LensError::Singularity {
            x: galaxy_loc.x,
            y: galaxy_loc.y,
            distance: d,
            min_dist: params.min_dist,
        });
    }
    let strength = halo.mass / d;
    let two_phi = 2.0 * dy.atan2(dx);
    Ok(Ellipticity::new(
        -strength * two_phi.cos(),
        -strength * two_phi.sin(),
    ))
}

/// Sum of [`tangential_shear`] over all halos; `(0, 0)` for no halos.
pub fn predicted_ellipticity_mean(
    galaxy_loc: Point2,
    halos: &[Halo],
    params: &LensModelParams,
) -> Result<Ellipticity, LensError> {
    halos.iter().try_fold(Ellipticity::ZERO, |acc, h| {
        Ok(acc + tangential_shear(galaxy_loc, h, params)?)
    })
}

// Floating-point sums depend on order; summing halos in a fixed order makes
// the densities exactly invariant under relabeling.
fn canonical_order(halos: &[Halo]) -> Vec<Halo> {
    let mut sorted = halos.to_vec();
    sorted.sort_by(|a, b| {
        a.loc
            .x
            .total_cmp(&b.loc.x)
            .then(a.loc.y.total_cmp(&b.loc.y))
            .then(a.mass.total_cmp(&b.mass))
    });
    sorted
}

/// Gaussian log-likelihood of all observed ellipticities.
///
/// Returns `-inf` when any galaxy sits within `min_dist` of a halo.
pub fn log_likelihood(sky: &Sky, halos: &[Halo], params: &LensModelParams) -> f64 {
    let halos = canonical_order(halos);
    let mut total = 0.0;
    for g in sky.galaxies() {
        let mean = match predicted_ellipticity_mean(g.loc, &halos, params) {
            Ok(m) => m,
            Err(_) => return f64::NEG_INFINITY,
        };
        total += density::normal_var(g.ell.e1, mean.e1, params.sigma2);
        total += density::normal_var(g.ell.e2, mean.e2, params.sigma2);
    }
    total
}

/// Uniform location prior and shape-rate gamma mass prior, summed over halos.
pub fn log_prior(halos: &[Halo], params: &LensModelParams) -> f64 {
    canonical_order(halos)
        .iter()
        .map(|h| {
            density::uniform(h.loc.x, params.field_lo, params.field_hi)
                + density::uniform(h.loc.y, params.field_lo, params.field_hi)
                + density::gamma(h.mass, params.gamma_shape, params.gamma_rate)
        })
        .sum()
}

/// Unnormalized log-posterior; the prior is checked first so out-of-support
/// halos short-circuit before the likelihood.
pub fn log_posterior(sky: &Sky, halos: &[Halo], params: &LensModelParams) -> f64 {
    let prior = log_prior(halos, params);
    if prior == f64::NEG_INFINITY {
        return prior;
    }
    log_likelihood(sky, halos, params) + prior
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::distribution::{Continuous, Gamma};
    use std::f64::consts::PI;

    fn p() -> LensModelParams {
        LensModelParams::default()
    }

    fn one_galaxy(x: f64, y: f64, e1: f64, e2: f64) -> Sky {
        Sky::new(
            0,
            vec![Galaxy {
                id: 1,
                loc: Point2::new(x, y),
                ell: Ellipticity::new(e1, e2),
            }],
            FIELD_SIZE,
        )
        .unwrap()
    }

    // Gaussian density evaluated from its textbook form, then logged.
    fn gauss_logpdf_oracle(x: f64, mean: f64, var: f64) -> f64 {
        let pdf = (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt();
        pdf.ln()
    }

    #[test]
    fn shear_examples() {
        let halo = Halo::new(0.0, 0.0, 100.0);
        let e = tangential_shear(Point2::new(100.0, 0.0), &halo, &p()).unwrap();
        assert!((e.e1 + 1.0).abs() < 1e-12 && e.e2.abs() < 1e-12);
        let e = tangential_shear(Point2::new(0.0, 100.0), &halo, &p()).unwrap();
        assert!((e.e1 - 1.0).abs() < 1e-12 && e.e2.abs() < 1e-12);
        let e = tangential_shear(Point2::new(100.0, 100.0), &halo, &p()).unwrap();
        assert!(e.e1.abs() < 1e-12 && (e.e2 + 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn singular_distance_is_an_error() {
        let halo = Halo::new(10.0, 10.0, 1.0);
        let err = tangential_shear(Point2::new(10.0, 10.0), &halo, &p()).unwrap_err();
        assert!(matches!(err, LensError::Singularity { .. }));
        let sky = one_galaxy(10.0, 10.0, 0.0, 0.0);
        assert_eq!(log_likelihood(&sky, &[halo], &p()), f64::NEG_INFINITY);
    }

    #[test]
    fn mean_sums_halos() {
        let g = Point2::new(100.0, 0.0);
        assert_eq!(
            predicted_ellipticity_mean(g, &[], &p()).unwrap(),
            Ellipticity::ZERO
        );
        let h = Halo::new(0.0, 0.0, 37.0);
        assert_eq!(
            predicted_ellipticity_mean(g, &[h], &p()).unwrap(),
            tangential_shear(g, &h, &p()).unwrap()
        );
        let m = 37.0;
        let two = [Halo::new(0.0, 0.0, m), Halo::new(200.0, 0.0, m)];
        let e = predicted_ellipticity_mean(g, &two, &p()).unwrap();
        assert!((e.e1 + 2.0 * m / 100.0).abs() < 1e-12);
        assert!(e.e2.abs() < 1e-12);
    }

    #[test]
    fn likelihood_at_mean() {
        let expected = 2.0 * gauss_logpdf_oracle(0.0, 0.0, 0.05);
        assert!((expected - 1.157855).abs() < 1e-6);

        let halo = Halo::new(2100.0, 2100.0, 1.0);
        let g = Point2::new(2300.0, 2150.0);
        let mean = predicted_ellipticity_mean(g, &[halo], &p()).unwrap();
        let sky = one_galaxy(g.x, g.y, mean.e1, mean.e2);
        assert!((log_likelihood(&sky, &[halo], &p()) - expected).abs() < 1e-9);

        let sky = one_galaxy(500.0, 500.0, 0.0, 0.0);
        assert!((log_likelihood(&sky, &[], &p()) - expected).abs() < 1e-9);
    }

    #[test]
    fn one_sd_perturbation_costs_half_a_nat() {
        let base = one_galaxy(500.0, 500.0, 0.0, 0.0);
        let moved = one_galaxy(500.0, 500.0, 0.05f64.sqrt(), 0.0);
        let diff = log_likelihood(&base, &[], &p()) - log_likelihood(&moved, &[], &p());
        assert!((diff - 0.5).abs() < 1e-12);
    }

    #[test]
    fn prior_values() {
        assert_eq!(log_prior(&[Halo::new(4300.0, 10.0, 1.0)], &p()), f64::NEG_INFINITY);
        assert_eq!(log_prior(&[Halo::new(10.0, 10.0, 0.0)], &p()), f64::NEG_INFINITY);
        assert_eq!(log_prior(&[Halo::new(10.0, 10.0, -3.0)], &p()), f64::NEG_INFINITY);

        let oracle = 2.0 * (1.0f64 / 4200.0).ln() + Gamma::new(0.001, 0.001).unwrap().ln_pdf(1.0);
        assert!((oracle - (-23.6007)).abs() < 1e-4);
        let got = log_prior(&[Halo::new(2100.0, 2100.0, 1.0)], &p());
        assert!((got - oracle).abs() < 1e-9);
    }

    #[test]
    fn posterior_is_sum() {
        let sky = one_galaxy(500.0, 500.0, 0.0, 0.0);
        let halos = [Halo::new(2100.0, 2100.0, 1.0)];
        // e = (0,0) is not the mean for a halo of mass 1, so rebuild the sky at the mean.
        let mean = predicted_ellipticity_mean(Point2::new(500.0, 500.0), &halos, &p()).unwrap();
        let sky_at_mean = one_galaxy(500.0, 500.0, mean.e1, mean.e2);
        let lp = log_posterior(&sky_at_mean, &halos, &p());
        let oracle = 2.0 * gauss_logpdf_oracle(0.0, 0.0, 0.05)
            + 2.0 * (1.0f64 / 4200.0).ln()
            + Gamma::new(0.001, 0.001).unwrap().ln_pdf(1.0);
        assert!((lp - oracle).abs() < 1e-9);
        // -22.4428 is the sum of the two rounded component values.
        assert!((lp - (-22.4428)).abs() < 5e-4);
        assert_eq!(
            log_posterior(&sky, &[Halo::new(-1.0, 100.0, 5.0)], &p()),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn sky_validation() {
        assert_eq!(Sky::new(1, vec![], FIELD_SIZE), Err(LensError::EmptySky));
        let g = Galaxy {
            id: 3,
            loc: Point2::new(1.0, 1.0),
            ell: Ellipticity::ZERO,
        };
        assert_eq!(
            Sky::new(1, vec![g, g], FIELD_SIZE),
            Err(LensError::DuplicateGalaxy(3))
        );
        let outside = Galaxy {
            loc: Point2::new(5000.0, 1.0),
            ..g
        };
        assert!(matches!(
            Sky::new(1, vec![outside], FIELD_SIZE),
            Err(LensError::OutsideField { .. })
        ));
    }

    #[test]
    fn params_validation() {
        assert!(p().validate().is_ok());
        let bad = LensModelParams { sigma2: 0.0, ..p() };
        assert!(bad.validate().is_err());
        let bad = LensModelParams { min_dist: 0.0, ..p() };
        assert!(bad.validate().is_err());
    }

    fn coord() -> impl Strategy<Value = f64> {
        0.0..FIELD_SIZE
    }

    proptest! {
        #[test]
        fn rotation_by_quarter_turn_flips_ellipticity(
            gx in coord(), gy in coord(),
            halos in prop::collection::vec((coord(), coord(), 1.0..2000.0f64), 1..4),
        ) {
            let c = FIELD_SIZE / 2.0;
            let rot = |x: f64, y: f64| (c - (y - c), c + (x - c));
            let hs: Vec<Halo> = halos.iter().map(|&(x, y, m)| Halo::new(x, y, m)).collect();
            prop_assume!(hs.iter().all(|h| h.loc.distance(Point2::new(gx, gy)) > 1.0));
            let rhs: Vec<Halo> = hs.iter().map(|h| {
                let (x, y) = rot(h.loc.x, h.loc.y);
                Halo::new(x, y, h.mass)
            }).collect();
            let (rx, ry) = rot(gx, gy);
            let a = predicted_ellipticity_mean(Point2::new(gx, gy), &hs, &p()).unwrap();
            let b = predicted_ellipticity_mean(Point2::new(rx, ry), &rhs, &p()).unwrap();
            prop_assert!((a.e1 + b.e1).abs() < 1e-10);
            prop_assert!((a.e2 + b.e2).abs() < 1e-10);
        }

        #[test]
        fn shear_scales_with_mass(
            gx in coord(), gy in coord(), hx in coord(), hy in coord(),
            m in 0.0..2000.0f64, c in 0.0..10.0f64,
        ) {
            prop_assume!(Point2::new(gx, gy).distance(Point2::new(hx, hy)) > 1.0);
            let g = Point2::new(gx, gy);
            let a = predicted_ellipticity_mean(g, &[Halo::new(hx, hy, m)], &p()).unwrap();
            let b = predicted_ellipticity_mean(g, &[Halo::new(hx, hy, c * m)], &p()).unwrap();
            prop_assert!((b.e1 - c * a.e1).abs() <= 1e-12 * (1.0 + b.e1.abs()));
            prop_assert!((b.e2 - c * a.e2).abs() <= 1e-12 * (1.0 + b.e2.abs()));
        }

        #[test]
        fn doubling_distance_halves_shear(
            hx in coord(), hy in coord(), angle in -PI..PI, d in 1.0..1000.0f64, m in 1.0..2000.0f64,
        ) {
            let h = Halo::new(hx, hy, m);
            let at = |r: f64| Point2::new(hx + r * angle.cos(), hy + r * angle.sin());
            let near = tangential_shear(at(d), &h, &p()).unwrap().magnitude();
            let far = tangential_shear(at(2.0 * d), &h, &p()).unwrap().magnitude();
            prop_assert!((near - 2.0 * far).abs() < 1e-12 * near.max(1.0));
        }

        #[test]
        fn shear_is_tangential(
            gx in coord(), gy in coord(), hx in coord(), hy in coord(), m in 1.0..2000.0f64,
        ) {
            prop_assume!(Point2::new(gx, gy).distance(Point2::new(hx, hy)) > 1.0);
            let e = tangential_shear(Point2::new(gx, gy), &Halo::new(hx, hy, m), &p()).unwrap();
            let two_phi = 2.0 * (gy - hy).atan2(gx - hx);
            let cross = e.e1 * two_phi.sin() - e.e2 * two_phi.cos();
            prop_assert!(cross.abs() < 1e-12 * e.magnitude().max(1.0));
        }

        #[test]
        fn posterior_ignores_halo_order(
            gals in prop::collection::vec((coord(), coord(), -0.5..0.5f64, -0.5..0.5f64), 1..20),
            halos in prop::collection::vec((coord(), coord(), 1.0..2000.0f64), 2..4),
        ) {
            let galaxies = gals.iter().enumerate().map(|(i, &(x, y, e1, e2))| Galaxy {
                id: i as i64, loc: Point2::new(x, y), ell: Ellipticity::new(e1, e2),
            }).collect();
            let sky = Sky::new(0, galaxies, FIELD_SIZE).unwrap();
            let hs: Vec<Halo> = halos.iter().map(|&(x, y, m)| Halo::new(x, y, m)).collect();
            let mut rev = hs.clone();
            rev.reverse();
            let a = log_posterior(&sky, &hs, &p());
            let b = log_posterior(&sky, &rev, &p());
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
