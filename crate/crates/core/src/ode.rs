//! Adaptive Dormand–Prince 5(4) integrator for small first-order systems.

use crate::error::{LabError, Result};
use crate::scalar::{c, Real};

#[derive(Clone, Copy, Debug)]
pub struct OdeOptions<T: Real = f64> {
    pub rtol: T,
    pub atol: T,
    pub h_init: T,
    pub h_max: T,
    /// Relative step floor; falling below it is reported as stiffness.
    pub h_min_rel: T,
    pub max_steps: usize,
}

impl<T: Real> Default for OdeOptions<T> {
    fn default() -> Self {
        Self {
            rtol: c(1e-12),
            atol: c(1e-14),
            h_init: c(1e-4),
            h_max: c(0.25),
            h_min_rel: c(1e-14),
            max_steps: 2_000_000,
        }
    }
}

/// State of an integration that can be advanced between output points.
pub struct Dopri<T: Real, F> {
    rhs: F,
    pub t: T,
    pub y: Vec<T>,
    h: T,
    opts: OdeOptions<T>,
    k: [Vec<T>; 7],
    ytmp: Vec<T>,
    ynew: Vec<T>,
    steps: usize,
}

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

impl<T: Real, F: FnMut(T, &[T], &mut [T])> Dopri<T, F> {
    pub fn new(rhs: F, t0: T, y0: &[T], opts: OdeOptions<T>) -> Self {
        let n = y0.len();
        let mk = || vec![T::zero(); n];
        let mut s = Self {
            rhs,
            t: t0,
            y: y0.to_vec(),
            h: opts.h_init,
            opts,
            k: [mk(), mk(), mk(), mk(), mk(), mk(), mk()],
            ytmp: mk(),
            ynew: mk(),
            steps: 0,
        };
        (s.rhs)(t0, &s.y, &mut s.k[0]);
        s
    }

    /// Rescale the state (used to keep exponentially growing solutions finite).
    pub fn rescale(&mut self, factor: T) {
        self.y.iter_mut().for_each(|v| *v *= factor);
        self.k[0].iter_mut().for_each(|v| *v *= factor);
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Advance exactly to `t_end`, which may lie on either side of `t`.
    pub fn advance_to(&mut self, t_end: T) -> Result<()> {
        let span = t_end - self.t;
        if span == T::zero() {
            return Ok(());
        }
        let dir = span.signum();
        let n = self.y.len();
        let h_min = self.opts.h_min_rel * (self.t.abs() + t_end.abs()).max(T::one());
        let mut h = self.h.abs().min(self.opts.h_max);
        loop {
            let rem = (t_end - self.t) * dir;
            if rem <= T::zero() {
                break;
            }
            let last = h >= rem;
            let hs = if last { rem } else { h };
            let hd = hs * dir;
            let t = self.t;
            let y = &self.y;
            let stage = |k: &[Vec<T>; 7], coef: &[(usize, f64)], ytmp: &mut Vec<T>| {
                for i in 0..n {
                    let mut acc = y[i];
                    for &(j, a) in coef {
                        acc += hd * c::<T>(a) * k[j][i];
                    }
                    ytmp[i] = acc;
                }
            };
            stage(&self.k, &[(0, A21)], &mut self.ytmp);
            (self.rhs)(t + hd * c(0.2), &self.ytmp, &mut self.k[1]);
            stage(&self.k, &[(0, A31), (1, A32)], &mut self.ytmp);
            (self.rhs)(t + hd * c(0.3), &self.ytmp, &mut self.k[2]);
            stage(&self.k, &[(0, A41), (1, A42), (2, A43)], &mut self.ytmp);
            (self.rhs)(t + hd * c(0.8), &self.ytmp, &mut self.k[3]);
            stage(&self.k, &[(0, A51), (1, A52), (2, A53), (3, A54)], &mut self.ytmp);
            (self.rhs)(t + hd * c(8.0 / 9.0), &self.ytmp, &mut self.k[4]);
            stage(&self.k, &[(0, A61), (1, A62), (2, A63), (3, A64), (4, A65)], &mut self.ytmp);
            (self.rhs)(t + hd, &self.ytmp, &mut self.k[5]);
            for i in 0..n {
                self.ynew[i] = self.y[i]
                    + hd * (c::<T>(B1) * self.k[0][i]
                        + c::<T>(B3) * self.k[2][i]
                        + c::<T>(B4) * self.k[3][i]
                        + c::<T>(B5) * self.k[4][i]
                        + c::<T>(B6) * self.k[5][i]);
            }
            let t_new = if last { t_end } else { t + hd };
            (self.rhs)(t_new, &self.ynew, &mut self.k[6]);
            let mut err = T::zero();
            for i in 0..n {
                let e = hd
                    * (c::<T>(E1) * self.k[0][i]
                        + c::<T>(E3) * self.k[2][i]
                        + c::<T>(E4) * self.k[3][i]
                        + c::<T>(E5) * self.k[4][i]
                        + c::<T>(E6) * self.k[5][i]
                        + c::<T>(E7) * self.k[6][i]);
                let sc = self.opts.atol + self.opts.rtol * self.y[i].abs().max(self.ynew[i].abs());
                err = err.max((e / sc).abs());
            }
            if !err.is_finite() {
                h = hs * c(0.1);
            } else if err <= T::one() {
                self.t = t_new;
                std::mem::swap(&mut self.y, &mut self.ynew);
                self.k.swap(0, 6);
                self.steps += 1;
                let fac = if err == T::zero() { c(5.0) } else { (c::<T>(0.9) * err.powf(c(-0.2))).min(c(5.0)) };
                if !last {
                    h = (hs * fac).min(self.opts.h_max);
                    self.h = h;
                } else {
                    self.h = self.h.max(hs);
                }
            } else {
                h = hs * (c::<T>(0.9) * err.powf(c(-0.2))).max(c(0.1));
            }
            if h < h_min {
                return Err(LabError::Stiffness(format!("step size collapsed near t={}", self.t)));
            }
            if self.steps > self.opts.max_steps {
                return Err(LabError::Stiffness("step budget exhausted".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn harmonic_oscillator_period() {
        let mut ode = Dopri::new(
            |_t: f64, y: &[f64], dy: &mut [f64]| {
                dy[0] = y[1];
                dy[1] = -y[0];
            },
            0.0,
            &[1.0, 0.0],
            OdeOptions::default(),
        );
        ode.advance_to(2.0 * std::f64::consts::PI).unwrap();
        assert_relative_eq!(ode.y[0], 1.0, epsilon = 1e-10);
        assert!(ode.y[1].abs() < 1e-10);
        ode.advance_to(std::f64::consts::PI).unwrap();
        assert_relative_eq!(ode.y[0], -1.0, epsilon = 1e-10);
    }

    #[test]
    fn single_precision_decay() {
        let opts = OdeOptions::<f32> { rtol: 1e-6, atol: 1e-7, ..Default::default() };
        let mut ode = Dopri::new(|_t: f32, y: &[f32], dy: &mut [f32]| dy[0] = -y[0], 0.0f32, &[1.0], opts);
        ode.advance_to(1.0).unwrap();
        assert!((ode.y[0] - (-1.0f32).exp()).abs() < 1e-5);
    }
}
