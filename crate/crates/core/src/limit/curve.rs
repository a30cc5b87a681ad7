//! Piecewise-linear density sections on a sorted, possibly repeating node
//! grid. A repeated abscissa encodes a jump; evaluation at a jump returns the
//! right limit, integration is unaffected (zero-width segment).

#[derive(Debug, Clone, Default)]
pub struct Curve {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl Curve {
    pub fn new(u: Vec<f64>, v: Vec<f64>) -> Self {
        debug_assert_eq!(u.len(), v.len());
        debug_assert!(u.windows(2).all(|w| w[0] <= w[1]), "nodes must be sorted");
        Curve { u, v }
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn first_u(&self) -> f64 {
        *self.u.first().unwrap()
    }

    pub fn last_u(&self) -> f64 {
        *self.u.last().unwrap()
    }

    /// Value at `x`; zero outside the node span. At a repeated node the
    /// later (right) value wins.
    pub fn eval(&self, x: f64) -> f64 {
        if self.is_empty() || x < self.first_u() || x > self.last_u() {
            return 0.0;
        }
        // last index with u[i] <= x
        let i = self.u.partition_point(|&t| t <= x);
        if i == 0 {
            return self.v[0];
        }
        if i == self.u.len() {
            return self.v[i - 1];
        }
        let (u0, u1) = (self.u[i - 1], self.u[i]);
        if u1 == u0 {
            return self.v[i];
        }
        let w = (x - u0) / (u1 - u0);
        self.v[i - 1] * (1.0 - w) + self.v[i] * w
    }

    /// Trapezoid integral over the node span.
    pub fn integrate(&self) -> f64 {
        self.moment(|_| 1.0)
    }

    /// Trapezoid integral of `f(u) * value(u)` over the node span.
    pub fn moment<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        let mut s = 0.0;
        for i in 1..self.u.len() {
            let du = self.u[i] - self.u[i - 1];
            if du > 0.0 {
                s += 0.5 * du * (f(self.u[i - 1]) * self.v[i - 1] + f(self.u[i]) * self.v[i]);
            }
        }
        s
    }

    /// Exact integral of the piecewise-linear curve over `[a, b]`.
    pub fn mass_between(&self, a: f64, b: f64) -> f64 {
        if self.is_empty() || b <= a {
            return 0.0;
        }
        let mut s = 0.0;
        for i in 1..self.u.len() {
            let (u0, u1) = (self.u[i - 1], self.u[i]);
            let lo = u0.max(a);
            let hi = u1.min(b);
            if hi > lo && u1 > u0 {
                let vl = self.v[i - 1] + (self.v[i] - self.v[i - 1]) * (lo - u0) / (u1 - u0);
                let vh = self.v[i - 1] + (self.v[i] - self.v[i - 1]) * (hi - u0) / (u1 - u0);
                s += 0.5 * (vl + vh) * (hi - lo);
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn eval_interpolates_and_handles_jumps() {
        let c = Curve::new(vec![0.0, 1.0, 1.0, 2.0], vec![0.0, 2.0, 4.0, 4.0]);
        assert_relative_eq!(c.eval(0.5), 1.0);
        assert_relative_eq!(c.eval(1.0), 4.0); // right limit at the jump
        assert_relative_eq!(c.eval(1.5), 4.0);
        assert_eq!(c.eval(-0.1), 0.0);
        assert_eq!(c.eval(2.1), 0.0);
    }

    #[test]
    fn integrals_ignore_zero_width_segments() {
        let c = Curve::new(vec![0.0, 1.0, 1.0, 2.0], vec![0.0, 2.0, 4.0, 4.0]);
        // triangle of area 1 plus a 1x4 block
        assert_relative_eq!(c.integrate(), 5.0);
        assert_relative_eq!(c.moment(|u| u), 7.0, epsilon = 1e-12);
    }
}
