use crate::scalar::Scalar;

/// Fixed cosine time encoding `cos(Δt · w_i)` with frequencies
/// `w_i = 10^(−9 i / (d_t − 1))` and zero phase. Not trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeEncoding {
    freqs: Vec<f64>,
}

impl TimeEncoding {
    pub fn new(dim: usize) -> Self {
        let freqs = (0..dim)
            .map(|i| {
                if dim == 1 {
                    1.0
                } else {
                    10f64.powf(-(i as f64) * 9.0 / (dim - 1) as f64)
                }
            })
            .collect();
        Self { freqs }
    }

    pub fn dim(&self) -> usize {
        self.freqs.len()
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    /// Appends the encoding of `dt` to `out`.
    pub fn encode_into<S: Scalar>(&self, dt: f64, out: &mut Vec<S>) {
        out.extend(self.freqs.iter().map(|w| S::of((dt * w).cos())));
    }

    pub fn encode<S: Scalar>(&self, dt: f64) -> Vec<S> {
        let mut v = Vec::with_capacity(self.dim());
        self.encode_into(dt, &mut v);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_delta_is_all_ones() {
        let te = TimeEncoding::new(32);
        assert_eq!(te.encode::<f64>(0.0), vec![1.0; 32]);
    }

    #[test]
    fn frequency_ladder() {
        let te = TimeEncoding::new(10);
        assert_eq!(te.freqs()[0], 1.0);
        assert!((te.freqs()[9] - 1e-9).abs() < 1e-20);
        assert!(te.freqs().windows(2).all(|w| w[1] < w[0]));
    }
}
