//! Adam and global-norm gradient clipping.

use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// One bias-corrected update, in place. `grads` is indexed like the store.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return shape_err("adam", &[params.len()], &[grads.len()]);
        }
        for (id, p) in params.iter() {
            if grads[id.index()].shape() != p.value.shape() {
                return shape_err("adam", p.value.shape(), grads[id.index()].shape());
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powf(self.t as f64);
        let bc2 = 1.0 - self.beta2.powf(self.t as f64);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let k = id.index();
            let g = &grads[k];
            let p = params.get_mut(id);
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if max_norm.is_nan() || max_norm <= 0.0 {
        return Err(Error::Config(format!(
            "clip norm must be positive, got {max_norm}"
        )));
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::vector(vec![1.0, -2.0, 0.5])).unwrap();
        s.insert("b", Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_moments() {
        let mut p = store();
        let before = p.clone();
        let mut adam = Adam::new(&p, 1e-3);
        let g1 = vec![
            Tensor::vector(vec![1.0, 1.0, 1.0]),
            Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap(),
        ];
        adam.step(&mut p, &g1).unwrap();
        let m1 = adam.first_moments()[0].data()[0];
        let snapshot = p.clone();
        let z = p.zeros_like();
        adam.step(&mut p, &z).unwrap();
        assert!((adam.first_moments()[0].data()[0] - 0.9 * m1).abs() < 1e-15);
        // the update is driven by the decaying moment, not the zero gradient
        assert_ne!(
            snapshot.get(snapshot.find("a").unwrap()),
            before.get(before.find("a").unwrap())
        );

        let mut fresh = store();
        let mut adam = Adam::new(&fresh, 1e-3);
        let z = fresh.zeros_like();
        adam.step(&mut fresh, &z).unwrap();
        for (id, param) in before.iter() {
            assert_eq!(fresh.get(id), &param.value);
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = store();
        let before = p.clone();
        let mut adam = Adam::new(&p, 1e-3);
        let g = vec![
            Tensor::vector(vec![0.3, -5.0, 2.0]),
            Tensor::from_rows(&[vec![-0.01, 100.0]]).unwrap(),
        ];
        adam.step(&mut p, &g).unwrap();
        for (id, param) in before.iter() {
            for ((new, old), gv) in p
                .get(id)
                .data()
                .iter()
                .zip(param.value.data())
                .zip(g[id.index()].data())
            {
                assert!((new - (old - 1e-3 * gv.signum())).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_learning_rate_is_bit_identical() {
        let mut p = store();
        let before = p.clone();
        let mut adam = Adam::new(&p, 0.0);
        let g = vec![
            Tensor::vector(vec![0.3, -5.0, 2.0]),
            Tensor::from_rows(&[vec![-0.01, 100.0]]).unwrap(),
        ];
        for _ in 0..5 {
            adam.step(&mut p, &g).unwrap();
        }
        for (id, param) in before.iter() {
            assert_eq!(p.get(id), &param.value);
        }
    }

    #[test]
    fn identical_runs_agree() {
        let run = || {
            let mut p = store();
            let mut adam = Adam::new(&p, 0.01);
            for k in 0..10 {
                let g = vec![
                    Tensor::vector(vec![k as f64, -1.0, 0.5]),
                    Tensor::from_rows(&[vec![0.1 * k as f64, 2.0]]).unwrap(),
                ];
                adam.step(&mut p, &g).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        for (id, param) in a.iter() {
            assert_eq!(b.get(id), &param.value);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = store();
        let mut adam = Adam::new(&p, 0.01);
        let g = vec![
            Tensor::vector(vec![1.0]),
            Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap(),
        ];
        assert!(adam.step(&mut p, &g).is_err());
        assert!(adam.step(&mut p, &g[..1]).is_err());
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::vector(vec![3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 10.0).unwrap(), 5.0);
        assert_eq!(g[0].data(), &[3.0, 4.0]);
        assert_eq!(clip_global_norm(&mut g, 1.0).unwrap(), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        assert!(clip_global_norm(&mut g, 0.0).is_err());
    }
}
