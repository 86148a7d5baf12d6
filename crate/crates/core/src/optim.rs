//! Adam with bias correction, stepping every parameter block in place.

use std::path::Path;

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::model::{read_blocks, Blocks, QNetGrads, QNetParams};

pub const OPTIMIZER_MAGIC: &[u8; 8] = b"AOSLO001";

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: QNetGrads,
    pub v: QNetGrads,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zero moments with the usual defaults (`lr = 1e-3`, `β = (0.9, 0.999)`, `ε = 1e-8`).
    pub fn new(params: &QNetParams) -> Self {
        AdamState {
            m: params.zero_grads(),
            v: params.zero_grads(),
            t: 0,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn step(&mut self, params: &mut QNetParams, grads: &QNetGrads) -> Result<()> {
        adam_step(params, grads, self)
    }

    /// Writes the moments in the weight-file block layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new(OPTIMIZER_MAGIC);
        enc.u64(self.t);
        enc.f64s(&[self.lr, self.beta1, self.beta2, self.eps]);
        for moments in [&self.m, &self.v] {
            enc.u32(moments.w_rec.cols() as u32);
            enc.u32(moments.w_in.cols() as u32);
            enc.u32(moments.w_head.rows() as u32);
            for b in moments.blocks() {
                enc.f64s(b.data());
            }
        }
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::open(bytes, OPTIMIZER_MAGIC, "optimizer state")?;
        let t = dec.u64()?;
        let hyper = dec.f64s(4)?;
        let to_grads = |p: QNetParams| QNetGrads {
            w_in: p.w_in,
            w_rec: p.w_rec,
            b_gates: p.b_gates,
            w_head: p.w_head,
            b_head: p.b_head,
        };
        let m = to_grads(read_blocks(&mut dec)?);
        let v = to_grads(read_blocks(&mut dec)?);
        dec.finish()?;
        if m.blocks().iter().zip(v.blocks()).any(|(a, b)| !a.same_shape(b)) {
            return Err(Error::Format("optimizer state: moment shapes differ".into()));
        }
        Ok(AdamState {
            m,
            v,
            t,
            lr: hyper[0],
            beta1: hyper[1],
            beta2: hyper[2],
            eps: hyper[3],
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// One bias-corrected Adam update:
/// `m̂ = m / (1 - β1ᵗ)`, `v̂ = v / (1 - β2ᵗ)`, `θ ← θ - lr · m̂ / (√v̂ + ε)`.
pub fn adam_step(params: &mut QNetParams, grads: &QNetGrads, state: &mut AdamState) -> Result<()> {
    for (i, ((p, g), (m, v))) in params
        .blocks()
        .iter()
        .zip(grads.blocks())
        .zip(state.m.blocks().iter().zip(state.v.blocks()))
        .enumerate()
    {
        if !p.same_shape(g) || !p.same_shape(m) || !p.same_shape(v) {
            return Err(Error::dim(
                "adam_step",
                format!("block {i} params {}x{}", p.rows(), p.cols()),
                format!("grads {}x{}", g.rows(), g.cols()),
            ));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (lr, eps) = (state.lr, state.eps);
    let AdamState { m, v, .. } = state;
    for (((p, g), m), v) in params
        .blocks_mut()
        .into_iter()
        .zip(grads.blocks())
        .zip(m.blocks_mut())
        .zip(v.blocks_mut())
    {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut QNetGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for b in grads.blocks_mut() {
            b.scale_in_place(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Matrix, Rng};

    /// Single-scalar parameter set: only `b_head` (1×1) is live.
    fn scalar_params(x: f64) -> QNetParams {
        let mut p = QNetParams::zeros(1, 1, 1);
        p.b_head = Matrix::row_vector(&[x]);
        p
    }

    fn scalar_grad(p: &QNetParams, g: f64) -> QNetGrads {
        let mut grads = p.zero_grads();
        grads.b_head = Matrix::row_vector(&[g]);
        grads
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = QNetParams::init(&mut Rng::new(1), 3, 4, 2, 0.1).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let g = p.zero_grads();
        for _ in 0..50 {
            adam_step(&mut p, &g, &mut st).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.t, 50);
    }

    #[test]
    fn first_step_hand_values() {
        let mut p = scalar_params(0.0);
        let mut st = AdamState::new(&p);
        let g = scalar_grad(&p, 1.0);
        adam_step(&mut p, &g, &mut st).unwrap();
        assert!((st.m.b_head.get(0, 0) - 0.1).abs() < 1e-15);
        assert!((st.v.b_head.get(0, 0) - 0.001).abs() < 1e-15);
        let delta = p.b_head.get(0, 0);
        assert!((delta - -0.000999999990).abs() < 1e-14, "{delta}");
    }

    #[test]
    fn first_step_invariant_to_loss_scale() {
        let run = |k: f64| {
            let mut p = scalar_params(0.3);
            let mut st = AdamState::new(&p);
            let g = scalar_grad(&p, 0.7 * k);
            adam_step(&mut p, &g, &mut st).unwrap();
            (p.b_head.get(0, 0), st)
        };
        let (x1, s1) = run(1.0);
        let (x10, s10) = run(10.0);
        assert!((x1 - x10).abs() < 1e-10);
        let m_hat = |s: &AdamState| s.m.b_head.get(0, 0) / (1.0 - s.beta1);
        let v_hat = |s: &AdamState| (s.v.b_head.get(0, 0) / (1.0 - s.beta2)).sqrt();
        assert!((m_hat(&s10) - 10.0 * m_hat(&s1)).abs() < 1e-12);
        assert!((v_hat(&s10) - 10.0 * v_hat(&s1)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_square() {
        let mut p = scalar_params(1.0);
        let mut st = AdamState::new(&p);
        let mut hit = None;
        for step in 0..5000 {
            let x = p.b_head.get(0, 0);
            let g = scalar_grad(&p, 2.0 * x);
            adam_step(&mut p, &g, &mut st).unwrap();
            let nx = p.b_head.get(0, 0);
            assert!((nx - x).abs() <= 2.5 * st.lr);
            // Early on the iterate only shrinks toward zero.
            if step < 900 {
                assert!(nx.abs() < x.abs(), "step {step}: {x} -> {nx}");
            }
            if hit.is_none() && nx.abs() < 0.01 {
                hit = Some(step);
            }
        }
        assert!(hit.is_some());
        assert!(p.b_head.get(0, 0).abs() < 0.01);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = QNetParams::zeros(2, 3, 2);
        let mut st = AdamState::new(&p);
        let wrong = QNetParams::zeros(2, 4, 2).zero_grads();
        assert!(matches!(adam_step(&mut p, &wrong, &mut st), Err(Error::Dimension { .. })));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn clipping_caps_norm() {
        let p = QNetParams::zeros(2, 2, 2);
        let mut g = p.zero_grads();
        g.w_in.fill(3.0);
        let before = clip_global_norm(&mut g, 1.0);
        assert!(before > 1.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn state_round_trip() {
        let mut p = QNetParams::init(&mut Rng::new(2), 3, 5, 2, 0.1).unwrap();
        let mut st = AdamState::new(&p);
        let mut g = p.zero_grads();
        g.w_rec.fill(0.3);
        adam_step(&mut p, &g, &mut st).unwrap();
        let bytes = st.to_bytes();
        assert_eq!(&bytes[..8], OPTIMIZER_MAGIC);
        let back = AdamState::from_bytes(&bytes).unwrap();
        assert_eq!(back, st);
        assert!(AdamState::from_bytes(&bytes[..bytes.len() - 9]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn step_size_is_bounded(grads in proptest::collection::vec(-1e3f64..1e3, 1..60)) {
                let mut p = scalar_params(0.0);
                let mut st = AdamState::new(&p);
                let mut v_nonneg = true;
                for g in grads {
                    let before = p.b_head.get(0, 0);
                    let grad = scalar_grad(&p, g);
                    adam_step(&mut p, &grad, &mut st).unwrap();
                    prop_assert!((p.b_head.get(0, 0) - before).abs() <= 2.5 * st.lr);
                    v_nonneg &= st.v.b_head.get(0, 0) >= 0.0;
                }
                prop_assert!(v_nonneg);
            }
        }
    }
}
