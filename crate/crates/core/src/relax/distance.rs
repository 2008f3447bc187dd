use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-6;

/// `(b - u.v) / 2`; the number of differing bits when `u` and `v` are `+-1` codes.
pub fn hamming_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("code lengths differ: {} vs {}", u.len(), v.len())));
    }
    Ok(0.5 * (u.len() as f64 - dot(u, v)))
}

/// `sqrt(2 - 2 u.v)` for unit vectors.
pub fn euclidean_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("vector lengths differ: {} vs {}", u.len(), v.len())));
    }
    for (name, w) in [("u", u), ("v", v)] {
        let norm = dot(w, w).sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::Precondition(format!("{name} is not unit length (norm {norm})")));
        }
    }
    Ok(unit_distance(dot(u, v)))
}

#[inline]
pub(crate) fn unit_distance(inner: f64) -> f64 {
    (2.0 - 2.0 * inner).max(0.0).sqrt().min(2.0)
}

#[inline]
pub(crate) fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hamming_examples() {
        let ones = [1.0; 4];
        assert_eq!(hamming_distance(&ones, &ones).unwrap(), 0.0);
        assert_eq!(hamming_distance(&ones, &[-1.0; 4]).unwrap(), 4.0);
        assert_eq!(
            hamming_distance(&[1.0, 1.0, -1.0, 1.0], &[1.0, -1.0, -1.0, 1.0]).unwrap(),
            1.0
        );
        assert!(matches!(hamming_distance(&[1.0], &[1.0, 1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn euclidean_examples() {
        let u = [0.6, 0.8];
        assert_eq!(euclidean_distance(&u, &u).unwrap(), 0.0);
        assert!((euclidean_distance(&u, &[-0.6, -0.8]).unwrap() - 2.0).abs() < 1e-12);
        let v = [-0.8, 0.6];
        assert!((euclidean_distance(&u, &v).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert!(matches!(euclidean_distance(&[1.0, 1.0], &u), Err(Error::Precondition(_))));
    }
}
