//! Exact squared Euclidean distance transform (separable lower-envelope method).

/// Squared distance from every cell to the nearest cell where `site` is true,
/// on a row-major grid of `shape`. Cells with no site anywhere get `+inf`.
pub fn squared_edt(site: &[bool], shape: &[usize]) -> Vec<f64> {
    let n: usize = shape.iter().product();
    assert_eq!(site.len(), n, "site mask does not match shape");
    let mut f: Vec<f64> = site.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let mut line = Vec::new();
    let mut out = Vec::new();
    let mut hull = Vec::new();
    let mut bounds = Vec::new();
    for axis in 0..shape.len() {
        let len = shape[axis];
        let stride: usize = shape[axis + 1..].iter().product();
        let outer = n / (len * stride);
        for o in 0..outer {
            for i in 0..stride {
                let base = o * len * stride + i;
                line.clear();
                line.extend((0..len).map(|k| f[base + k * stride]));
                envelope_1d(&line, &mut out, &mut hull, &mut bounds);
                for (k, &v) in out.iter().enumerate() {
                    f[base + k * stride] = v;
                }
            }
        }
    }
    f
}

/// One-dimensional pass: `out[q] = min_p (q - p)^2 + f[p]` over finite `f[p]`.
fn envelope_1d(f: &[f64], out: &mut Vec<f64>, hull: &mut Vec<usize>, bounds: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    hull.clear();
    bounds.clear();
    let meet = |p: usize, q: usize| {
        let (pf, qf) = (p as f64, q as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf))
    };
    for q in (0..n).filter(|&q| f[q].is_finite()) {
        while let Some(&last) = hull.last() {
            let s = meet(last, q);
            if bounds.last().is_some_and(|&b| s <= b) {
                hull.pop();
                bounds.pop();
            } else {
                bounds.push(s);
                break;
            }
        }
        hull.push(q);
    }
    if hull.is_empty() {
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k < bounds.len() && bounds[k] < q as f64 {
            k += 1;
        }
        let p = hull[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(site: &[bool], shape: &[usize]) -> Vec<f64> {
        let n = site.len();
        let coord = |mut i: usize| {
            let mut c = vec![0i64; shape.len()];
            for a in (0..shape.len()).rev() {
                c[a] = (i % shape[a]) as i64;
                i /= shape[a];
            }
            c
        };
        (0..n)
            .map(|i| {
                let ci = coord(i);
                (0..n)
                    .filter(|&j| site[j])
                    .map(|j| {
                        let cj = coord(j);
                        ci.iter().zip(&cj).map(|(a, b)| ((a - b) * (a - b)) as f64).sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn no_sites_gives_infinity() {
        assert!(squared_edt(&[false; 6], &[2, 3]).iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn single_site_line() {
        let mut s = vec![false; 5];
        s[1] = true;
        assert_eq!(squared_edt(&s, &[5]), vec![1.0, 0.0, 1.0, 4.0, 9.0]);
    }

    proptest! {
        #[test]
        fn matches_brute_force_2d(bits in proptest::collection::vec(proptest::bool::weighted(0.2), 7 * 9)) {
            prop_assert_eq!(squared_edt(&bits, &[7, 9]), brute(&bits, &[7, 9]));
        }

        #[test]
        fn matches_brute_force_3d(bits in proptest::collection::vec(proptest::bool::weighted(0.1), 4 * 5 * 6)) {
            prop_assert_eq!(squared_edt(&bits, &[4, 5, 6]), brute(&bits, &[4, 5, 6]));
        }
    }
}
