use crate::autograd::{Gradients, Mat};
use crate::params::{ParamId, ParamStore};

/// Adam over a fixed subset of parameters, each with its own learning rate.
#[derive(Clone, Debug)]
pub struct Adam {
    lrs: Vec<Option<f32>>,
    beta1: f32,
    beta2: f32,
    eps: f32,
    clip_norm: Option<f32>,
    lr_scale: f32,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
    t: i32,
}

impl Adam {
    /// `lr_of` returns `None` for parameters this optimizer does not own.
    pub fn new(store: &ParamStore, lr_of: impl Fn(ParamId) -> Option<f32>) -> Self {
        let lrs = store.iter().map(|(id, _)| lr_of(id)).collect();
        Self {
            lrs,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            lr_scale: 1.0,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
            t: 0,
        }
    }

    /// Rescales this optimizer's gradients to at most `norm` before stepping.
    pub fn with_clip(mut self, norm: f32) -> Self {
        self.clip_norm = Some(norm);
        self
    }

    /// Multiplies every learning rate from the next step on.
    pub fn set_lr_scale(&mut self, scale: f32) {
        self.lr_scale = scale;
    }

    pub fn owns(&self, id: ParamId) -> bool {
        self.lrs[id.index()].is_some()
    }

    /// Updates owned parameters that have a gradient; everything else is
    /// left bit-identical.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let scale = match self.clip_norm {
            Some(max) => {
                let norm = grads.sq_norm_where(|id| self.owns(id)).sqrt() as f32;
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        for (id, g) in grads.iter() {
            let Some(lr) = self.lrs[id.index()] else { continue };
            let lr = lr * self.lr_scale;
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Mat::zeros(g.dim()));
            let v = self.v[i].get_or_insert_with(|| Mat::zeros(g.dim()));
            let p = store.value_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * scale;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
    }
}
