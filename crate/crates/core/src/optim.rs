//! AdamW with decoupled weight decay and the warmup + cosine schedule.

use crate::error::{config_err, Error, Result};
use crate::numcore::Matrix;
use crate::params::{decays, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First/second moment buffers matched by position to a parameter set.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
}

impl AdamState {
    pub fn new<P: ParamSet>(params: &P) -> Self {
        let zeros: Vec<Matrix> = params
            .tensors()
            .iter()
            .map(|(_, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// One AdamW update:
/// `p ← p − lr · m̂ / (√v̂ + eps) − lr · wd · p` (decay skipped on vector-like tensors).
pub fn opt_step<P: ParamSet>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    let gs = grads.tensors();
    for (name, g) in &gs {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    let mut ps = params.tensors_mut();
    if ps.len() != gs.len() || ps.len() != state.m.len() {
        return Err(config_err("optimizer state does not match parameter set"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, ((name, p), (_, g))) in ps.iter_mut().zip(&gs).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Dimension {
                op: "opt_step",
                left: format!("{name} {}", p.shape_str()),
                right: g.shape_str(),
            });
        }
        let decay = if decays(p) { cfg.weight_decay } else { 0.0 };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gv;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gv * gv;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + cfg.eps) + lr * decay * *pv;
        }
    }
    Ok(())
}

/// Rescales `grads` so its global L2 norm is at most `cap`. Returns the norm
/// before clipping.
pub fn clip_global_norm<P: ParamSet>(grads: &mut P, cap: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > cap && norm > 0.0 {
        grads.scale_all(cap / norm);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lr_peak: f64,
    pub warmup_frac: f64,
}

impl Schedule {
    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        (self.warmup_frac * total_steps as f64).round() as usize
    }

    /// Linear ramp to `lr_peak` over the warmup, then half-cosine to zero.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> Result<f64> {
        if total_steps == 0 {
            return Err(config_err("schedule needs at least one step"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(config_err(format!("warmup_frac {} not in [0, 1)", self.warmup_frac)));
        }
        if step > total_steps {
            return Err(config_err(format!("step {step} beyond total {total_steps}")));
        }
        let warm = self.warmup_steps(total_steps);
        if step < warm {
            return Ok(self.lr_peak * step as f64 / warm as f64);
        }
        let span = (total_steps - warm).max(1) as f64;
        let progress = (step - warm) as f64 / span;
        Ok(self.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone)]
    struct One(Matrix);

    impl ParamSet for One {
        fn tensors(&self) -> Vec<(String, &Matrix)> {
            vec![("w".into(), &self.0)]
        }
        fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
            vec![("w".into(), &mut self.0)]
        }
    }

    fn sched() -> Schedule {
        Schedule {
            lr_peak: 5e-3,
            warmup_frac: 0.1,
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = sched();
        assert_eq!(s.lr_at(10, 100).unwrap(), 5e-3);
        assert!(s.lr_at(100, 100).unwrap().abs() < 1e-18);
        assert_eq!(s.lr_at(0, 100).unwrap(), 0.0);
        // warmup end 10, cosine midpoint at 55
        assert!((s.lr_at(55, 100).unwrap() - 2.5e-3).abs() < 1e-12);
        assert!(s.lr_at(0, 0).is_err());
    }

    #[test]
    fn schedule_shape() {
        let s = sched();
        let total = 237;
        let lrs: Vec<f64> = (0..=total).map(|i| s.lr_at(i, total).unwrap()).collect();
        let warm = s.warmup_steps(total);
        for i in 0..warm {
            assert!(lrs[i + 1] >= lrs[i]);
        }
        for i in warm..total {
            assert!(lrs[i + 1] <= lrs[i]);
        }
        let max = lrs.iter().copied().fold(0.0, f64::max);
        assert_eq!(max, s.lr_peak);
        assert!(lrs.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_grads_no_decay_is_identity() {
        let mut p = One(Matrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap());
        let before = p.0.clone();
        let g = One(Matrix::zeros(2, 2));
        let mut st = AdamState::new(&p);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        for _ in 0..10 {
            opt_step(&mut p, &g, &mut st, &cfg, 1e-2).unwrap();
        }
        assert_eq!(p.0, before);
    }

    #[test]
    fn zero_grads_decay_is_geometric() {
        let mut p = One(Matrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap());
        let before = p.0.clone();
        let g = One(Matrix::zeros(2, 2));
        let mut st = AdamState::new(&p);
        let cfg = AdamWConfig::default();
        let lr = 5e-3;
        for _ in 0..100 {
            opt_step(&mut p, &g, &mut st, &cfg, lr).unwrap();
        }
        let factor = (1.0 - lr * cfg.weight_decay).powi(100);
        for (a, b) in p.0.data().iter().zip(before.data()) {
            assert!((a - b * factor).abs() < 1e-14, "{a} vs {}", b * factor);
        }
    }

    #[test]
    fn vectors_are_not_decayed() {
        let mut p = One(Matrix::row_vector(&[1.0, 2.0]));
        let g = One(Matrix::zeros(1, 2));
        let mut st = AdamState::new(&p);
        opt_step(&mut p, &g, &mut st, &AdamWConfig::default(), 1.0).unwrap();
        assert_eq!(p.0.data(), &[1.0, 2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = One(Matrix::row_vector(&[0.0]));
        let g = One(Matrix::row_vector(&[1.0]));
        let mut st = AdamState::new(&p);
        let lr = 1e-3;
        opt_step(&mut p, &g, &mut st, &AdamWConfig::default(), lr).unwrap();
        // m̂ = v̂ = 1 after bias correction.
        let want = -lr / (1.0 + 1e-8);
        assert!((p.0.data()[0] - want).abs() < 1e-18);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = One(Matrix::row_vector(&[0.0]));
        let g = One(Matrix::row_vector(&[f64::NAN]));
        let mut st = AdamState::new(&p);
        let err = opt_step(&mut p, &g, &mut st, &AdamWConfig::default(), 1e-3).unwrap_err();
        assert!(err.to_string().contains('w'));
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = One(Matrix::row_vector(&[3.0, 4.0]));
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-15);
        let mut small = One(Matrix::row_vector(&[0.3, 0.4]));
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small.0.data(), &[0.3, 0.4]);
    }
}
