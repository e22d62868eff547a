//! Bounded two-variable linear Diophantine solutions via extended Euclid.

/// Returns `(g, x, y)` with `a*x + b*y = g = gcd(a, b)`.
pub fn extended_gcd(a: i128, b: i128) -> (i128, i128, i128) {
    let (mut old_r, mut r) = (a, b);
    let (mut old_s, mut s) = (1i128, 0i128);
    let (mut old_t, mut t) = (0i128, 1i128);
    while r != 0 {
        let q = old_r.div_euclid(r);
        (old_r, r) = (r, old_r - q * r);
        (old_s, s) = (s, old_s - q * s);
        (old_t, t) = (t, old_t - q * t);
    }
    if old_r < 0 {
        (-old_r, -old_s, -old_t)
    } else {
        (old_r, old_s, old_t)
    }
}

pub fn gcd(a: u64, b: u64) -> u64 {
    extended_gcd(a as i128, b as i128).0 as u64
}

fn div_floor(a: i128, b: i128) -> i128 {
    debug_assert!(b > 0);
    a.div_euclid(b)
}

fn div_ceil(a: i128, b: i128) -> i128 {
    debug_assert!(b > 0);
    -(-a).div_euclid(b)
}

/// Every solution of `w1*k1 + w2*k2 = target` with `0 <= k1 <= cap1` and
/// `0 <= k2 <= cap2`, as the lattice `first + t * step` for `t` in `0..count`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TwoVarSolutions {
    first: (i128, i128),
    step: (i128, i128),
    count: u64,
}

impl TwoVarSolutions {
    pub const EMPTY: Self = Self {
        first: (0, 0),
        step: (0, 0),
        count: 0,
    };

    pub fn len(&self) -> u64 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Base solution and lattice step, when non-empty.
    pub fn parameterization(&self) -> Option<((u64, u64), (i64, i64))> {
        (self.count > 0).then_some({
            (
                (self.first.0 as u64, self.first.1 as u64),
                (self.step.0 as i64, self.step.1 as i64),
            )
        })
    }

    pub fn get(&self, t: u64) -> Option<(u64, u64)> {
        (t < self.count).then(|| {
            let t = t as i128;
            (
                (self.first.0 + t * self.step.0) as u64,
                (self.first.1 + t * self.step.1) as u64,
            )
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        (0..self.count).map(|t| self.get(t).unwrap())
    }
}

/// Solves `w1*k1 + w2*k2 = target` within caps. Weights must be positive.
pub fn solve_two_var_diophantine(
    w1: u64,
    w2: u64,
    target: u64,
    cap1: u64,
    cap2: u64,
) -> TwoVarSolutions {
    assert!(w1 > 0 && w2 > 0, "weights must be positive");
    let (w1, w2, target) = (w1 as i128, w2 as i128, target as i128);
    let (g, x, y) = extended_gcd(w1, w2);
    if target % g != 0 {
        return TwoVarSolutions::EMPTY;
    }
    let scale = target / g;
    let (k1_0, k2_0) = (x * scale, y * scale);
    // k1 = k1_0 + d1 t,  k2 = k2_0 - d2 t
    let (d1, d2) = (w2 / g, w1 / g);
    let t_lo = div_ceil(-k1_0, d1).max(div_ceil(k2_0 - cap2 as i128, d2));
    let t_hi = div_floor(cap1 as i128 - k1_0, d1).min(div_floor(k2_0, d2));
    if t_hi < t_lo {
        return TwoVarSolutions::EMPTY;
    }
    TwoVarSolutions {
        first: (k1_0 + d1 * t_lo, k2_0 - d2 * t_lo),
        step: (d1, -d2),
        count: (t_hi - t_lo + 1) as u64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(w1: u64, w2: u64, t: u64, c1: u64, c2: u64) -> Vec<(u64, u64)> {
        let mut out = Vec::new();
        for k1 in 0..=c1 {
            for k2 in 0..=c2 {
                if w1 * k1 + w2 * k2 == t {
                    out.push((k1, k2));
                }
            }
        }
        out
    }

    #[test]
    fn extended_gcd_identity() {
        for a in 1..60i128 {
            for b in 1..60i128 {
                let (g, x, y) = extended_gcd(a, b);
                assert_eq!(a * x + b * y, g);
                assert_eq!(a % g, 0);
                assert_eq!(b % g, 0);
            }
        }
    }

    #[test]
    fn examples() {
        let s = solve_two_var_diophantine(2, 3, 7, 2, 2);
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![(2, 1)]);
        let s = solve_two_var_diophantine(5, 9, 0, 10, 10);
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![(0, 0)]);
        assert!(solve_two_var_diophantine(4, 6, 7, 100, 100).is_empty());
        let s = solve_two_var_diophantine(3, 5, 30, 10, 10);
        assert_eq!(s.parameterization(), Some(((0, 6), (5, -3))));
    }

    #[test]
    fn matches_brute_force_on_small_grid() {
        for w1 in 1..=12 {
            for w2 in 1..=12 {
                for t in 0..=60 {
                    for (c1, c2) in [(3, 7), (10, 10), (0, 5)] {
                        let got: Vec<_> = solve_two_var_diophantine(w1, w2, t, c1, c2)
                            .iter()
                            .collect();
                        assert_eq!(got, brute(w1, w2, t, c1, c2), "{w1} {w2} {t} {c1} {c2}");
                    }
                }
            }
        }
    }
}
