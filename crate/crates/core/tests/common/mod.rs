//! Shared test oracles.

use dtm_core::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Exact fraction over i128 for the brute-force oracle.
#[derive(Clone, Copy, Debug)]
struct Frac(i128, i128);

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

impl Frac {
    fn new(n: i128, d: i128) -> Frac {
        let g = gcd(n, d).max(1);
        Frac(n / g, d / g)
    }
    fn add(self, o: Frac) -> Frac {
        Frac::new(self.0 * o.1 + o.0 * self.1, self.1 * o.1)
    }
    fn mul(self, o: Frac) -> Frac {
        Frac::new(self.0 * o.0, self.1 * o.1)
    }
    fn div(self, o: Frac) -> Frac {
        Frac::new(self.0 * o.1, self.1 * o.0)
    }
    /// Nearest f64 (ties to even) by binary long division.
    fn f(self) -> f64 {
        let (n, d) = (self.0, self.1);
        assert!(n >= 0 && d > 0);
        if n == 0 {
            return 0.0;
        }
        let mut m = (n / d) as u64;
        let mut r = n % d;
        let mut exp = 0i32;
        while m < 1 << 53 {
            r *= 2;
            m = 2 * m + u64::from(r >= d);
            if r >= d {
                r -= d;
            }
            exp -= 1;
        }
        let (half, sticky) = (m & 1 == 1, r != 0);
        let mut mant = m >> 1;
        exp += 1;
        if half && (sticky || mant & 1 == 1) {
            mant += 1;
        }
        mant as f64 * 2f64.powi(exp)
    }
}

pub fn random_instance(rng: &mut ChaCha8Rng, n: usize, j: usize) -> (Tensor, Tensor) {
    // per-column densities so some attributes are rare or one-sided
    let dens: Vec<f64> = (0..j)
        .map(|_| *[0.0, 0.05, 0.3, 0.5, 0.9, 1.0].choose(rng).unwrap())
        .collect();
    let y = (0..n * j).map(|k| f64::from(rng.gen_bool(dens[k % j]) as u8)).collect();
    let p = (0..n * j).map(|_| f64::from(rng.gen_bool(0.4) as u8)).collect();
    (Tensor::new(&[n, j], p).unwrap(), Tensor::new(&[n, j], y).unwrap())
}

pub fn oracle_ma(p: &Tensor, y: &Tensor) -> (f64, Vec<f64>) {
    let (n, j) = (y.shape()[0], y.shape()[1]);
    let mut total = Frac(0, 1);
    let mut per = Vec::new();
    for a in 0..j {
        let (mut tp, mut pos, mut tn, mut neg) = (0, 0, 0, 0);
        for i in 0..n {
            if y.at(&[i, a]) == 1.0 {
                pos += 1;
                if p.at(&[i, a]) == 1.0 {
                    tp += 1;
                }
            } else {
                neg += 1;
                if p.at(&[i, a]) == 0.0 {
                    tn += 1;
                }
            }
        }
        let m = if pos == 0 {
            Frac::new(tn, neg)
        } else if neg == 0 {
            Frac::new(tp, pos)
        } else {
            Frac::new(tp, pos).add(Frac::new(tn, neg)).div(Frac(2, 1))
        };
        per.push(m.f());
        total = total.add(m);
    }
    (total.div(Frac(j as i128, 1)).f(), per)
}

pub fn oracle_instance(p: &Tensor, y: &Tensor) -> [f64; 4] {
    let (n, j) = (y.shape()[0], y.shape()[1]);
    let (mut acc, mut prec, mut rec) = (Frac(0, 1), Frac(0, 1), Frac(0, 1));
    for i in 0..n {
        let truth: Vec<usize> = (0..j).filter(|&a| y.at(&[i, a]) == 1.0).collect();
        let pred: Vec<usize> = (0..j).filter(|&a| p.at(&[i, a]) == 1.0).collect();
        let inter = truth.iter().filter(|a| pred.contains(a)).count() as i128;
        let union = (truth.len() + pred.len()) as i128 - inter;
        if union == 0 {
            acc = acc.add(Frac(1, 1));
            prec = prec.add(Frac(1, 1));
            rec = rec.add(Frac(1, 1));
            continue;
        }
        acc = acc.add(Frac::new(inter, union));
        if !pred.is_empty() {
            prec = prec.add(Frac::new(inter, pred.len() as i128));
        }
        if !truth.is_empty() {
            rec = rec.add(Frac::new(inter, truth.len() as i128));
        }
    }
    let nn = Frac(n as i128, 1);
    let (acc, prec, rec) = (acc.div(nn), prec.div(nn), rec.div(nn));
    let s = prec.add(rec);
    let f1 = if s.0 == 0 {
        Frac(0, 1)
    } else {
        Frac(2, 1).mul(prec).mul(rec).div(s)
    };
    [acc.f(), prec.f(), rec.f(), f1.f()]
}
