use crate::error::{Error, Result};

/// `g = h − e`, stored with its rounding residual so that `e + g`
/// reproduces `h` bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalBias {
    /// Rounded difference `fl(h − e)`; this is what the loss consumes.
    pub value: Vec<f64>,
    /// Exact error `(h − e) − fl(h − e)` of each element.
    pub residual: Vec<f64>,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}

pub fn global_bias(h: &[f64], e: &[f64]) -> Result<GlobalBias> {
    if h.len() != e.len() {
        return Err(Error::Dimension {
            op: "global_bias",
            lhs: vec![h.len()],
            rhs: vec![e.len()],
        });
    }
    let (value, residual) = h.iter().zip(e).map(|(&h, &e)| two_sum(h, -e)).unzip();
    Ok(GlobalBias { value, residual })
}

impl GlobalBias {
    /// `e + g`, rounded once from the exact sum.
    pub fn reconstruct(&self, e: &[f64]) -> Vec<f64> {
        self.value
            .iter()
            .zip(&self.residual)
            .zip(e)
            .map(|((&hi, &lo), &e)| {
                let (s, t) = two_sum(e, hi);
                s + (t + lo)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let g = global_bias(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(g.value, vec![0.0, 0.0]);
        let g = global_bias(&[1.0, 2.0], &[0.5, 0.5]).unwrap();
        assert_eq!(g.value, vec![0.5, 1.5]);
        assert!(global_bias(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn reconstruction_where_plain_subtraction_fails() {
        let (h, e) = (1.0, 1e17);
        assert_ne!((h - e) + e, h);
        let g = global_bias(&[h], &[e]).unwrap();
        assert_eq!(g.value[0], h - e);
        assert_eq!(g.reconstruct(&[e])[0].to_bits(), h.to_bits());
    }

    proptest! {
        #[test]
        fn reconstruction_is_bitwise(
            pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..64),
            scale in prop::sample::select(vec![1e-12, 1e-3, 1.0, 1e6]),
        ) {
            let h: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let e: Vec<f64> = pairs.iter().map(|p| p.1 * scale).collect();
            let g = global_bias(&h, &e).unwrap();
            let back = g.reconstruct(&e);
            for (a, b) in back.iter().zip(&h) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
