//! Adam optimizer and the exponential moving average of generator weights.

use crate::error::Result;
use crate::nets::Params;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 0.0025, beta1: 0.0, beta2: 0.99, epsilon: 1e-8 }
    }
}

/// First/second moment buffers, parallel to a `Params` entry order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        let m = params.iter().map(|(_, t)| vec![0.0; t.data.len()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.data.len()]).collect();
        AdamState { m, v, step: 0 }
    }

    /// One update. `grads[i]` pairs with the i-th parameter entry; `None`
    /// (missing gradient) or a true entry in `frozen` leaves that
    /// parameter and its moments untouched.
    pub fn apply(
        &mut self,
        cfg: &AdamConfig,
        params: &mut Params,
        grads: &[Option<Vec<f64>>],
        frozen: &[bool],
    ) -> Result<()> {
        if grads.len() != self.m.len() || frozen.len() != self.m.len() {
            return Err(err_dim!(
                "adam: {} gradients / {} masks for {} parameters",
                grads.len(),
                frozen.len(),
                self.m.len()
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            if frozen[i] {
                continue;
            }
            let g = match &grads[i] {
                Some(g) => g,
                None => continue,
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.data.len() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p.data[k] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }
}

/// decay = 0.5^(batch / halflife); ema <- decay * ema + (1 - decay) * live.
pub fn ema_decay(batch_size: usize, halflife_images: f64) -> f64 {
    if !halflife_images.is_finite() {
        return 1.0;
    }
    0.5f64.powf(batch_size as f64 / halflife_images)
}

pub fn ema_update(ema: &mut Params, live: &Params, decay: f64) -> Result<()> {
    if ema.len() != live.len() {
        return Err(err_dim!("ema: {} vs {} parameters", ema.len(), live.len()));
    }
    for ((en, e), (ln, l)) in ema.iter_mut().zip(live.iter()) {
        if en != ln || e.data.len() != l.data.len() {
            return Err(err_dim!("ema: parameter mismatch {en} vs {ln}"));
        }
        for (ev, lv) in e.data.iter_mut().zip(&l.data) {
            *ev = decay * *ev + (1.0 - decay) * lv;
        }
    }
    Ok(())
}
