//! Trainable functional time encoding.
//!
//! A time difference `dt` maps to
//! `sqrt(2/d) * [cos(w_1 dt), sin(w_1 dt), ..., cos(w_{d/2} dt), sin(w_{d/2} dt)]`,
//! a unit-norm `d`-vector for every `dt`.

use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeEncoder {
    dim: usize,
}

impl TimeEncoder {
    pub fn new(dim: usize) -> Result<Self, TensorError> {
        if dim == 0 || dim % 2 != 0 {
            return Err(TensorError::Config(format!(
                "time encoding dimension must be even and positive, got {dim}"
            )));
        }
        Ok(Self { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_freqs(&self) -> usize {
        self.dim / 2
    }

    /// Geometric frequencies `w_k = 10^{-(k-1) * 9 / (d/2)}`, from 1 downwards,
    /// so the initial encoder resolves both short and very long gaps.
    pub fn initial_frequencies(&self) -> Vec<f64> {
        let h = self.n_freqs();
        (0..h).map(|k| 10f64.powf(-(k as f64) * 9.0 / h as f64)).collect()
    }

    /// Encodes one time difference without recording gradients.
    pub fn encode(&self, freqs: &[f64], dt: f64) -> Vec<f64> {
        let scale = (2.0 / self.dim as f64).sqrt();
        freqs
            .iter()
            .flat_map(|w| {
                let a = w * dt;
                [scale * a.cos(), scale * a.sin()]
            })
            .collect()
    }

    /// Records `[dts.len(), d]` encodings on the tape; differentiable in `freqs`
    /// (a `[d/2]` or `[1, d/2]` leaf).
    pub fn encode_on_tape(&self, tape: &mut Tape, freqs: Var, dts: &[f64]) -> Result<Var, TensorError> {
        let h = self.n_freqs();
        let freq_shape = tape.value(freqs).shape().to_vec();
        if freq_shape.iter().product::<usize>() != h {
            return Err(TensorError::Shape {
                op: "time_encode",
                lhs: freq_shape,
                rhs: vec![h],
            });
        }
        let row = tape.reshape(freqs, &[1, h])?;
        let column = tape.constant(Tensor::matrix(dts.len(), 1, dts.to_vec())?);
        let angles = tape.matmul(column, row)?;
        let cos = tape.cos(angles);
        let sin = tape.sin(angles);
        let blocks = tape.concat(&[cos, sin], 1)?;
        let interleave: Vec<usize> = (0..h).flat_map(|k| [k, h + k]).collect();
        let ordered = tape.index_select(blocks, 1, &interleave)?;
        Ok(tape.scale(ordered, (2.0 / self.dim as f64).sqrt()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn odd_dimension_rejected() {
        assert!(TimeEncoder::new(3).is_err());
        assert!(TimeEncoder::new(0).is_err());
    }

    #[test]
    fn zero_gap() {
        let enc = TimeEncoder::new(4).unwrap();
        let v = enc.encode(&[0.3, 7.0], 0.0);
        let s = (0.5f64).sqrt();
        assert_eq!(v, vec![s, 0.0, s, 0.0]);
    }

    #[test]
    fn quarter_turn() {
        let enc = TimeEncoder::new(2).unwrap();
        let v = enc.encode(&[std::f64::consts::PI], 0.5);
        assert!(v[0].abs() < 1e-12);
        assert!((v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn initial_frequencies_are_geometric() {
        let enc = TimeEncoder::new(8).unwrap();
        let w = enc.initial_frequencies();
        assert_eq!(w.len(), 4);
        assert_eq!(w[0], 1.0);
        for pair in w.windows(2) {
            assert!((pair[1] / pair[0] - 10f64.powf(-9.0 / 4.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_matches_plain_encoding() {
        let enc = TimeEncoder::new(6).unwrap();
        let freqs = vec![1.0, 0.1, 0.01];
        let mut tape = Tape::new();
        let fv = tape.leaf(Tensor::vector(freqs.clone()).unwrap());
        let out = enc.encode_on_tape(&mut tape, fv, &[0.0, 2.5]).unwrap();
        assert_eq!(tape.value(out).shape(), &[2, 6]);
        for (r, dt) in [0.0, 2.5].iter().enumerate() {
            let plain = enc.encode(&freqs, *dt);
            for (a, b) in tape.value(out).row(r).iter().zip(&plain) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    proptest! {
        #[test]
        fn unit_norm(dt in 0.0f64..1e7, seed in proptest::collection::vec(-5.0f64..5.0, 4)) {
            let enc = TimeEncoder::new(8).unwrap();
            let v = enc.encode(&seed, dt);
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-9);
        }

        #[test]
        fn continuous_in_dt(dt in 0.0f64..1e3) {
            let enc = TimeEncoder::new(8).unwrap();
            let w = enc.initial_frequencies();
            let a = enc.encode(&w, dt);
            let b = enc.encode(&w, dt + 1e-9);
            let gap: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            prop_assert!(gap < 1e-8);
        }
    }
}
