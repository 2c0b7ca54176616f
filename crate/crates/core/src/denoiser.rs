//! One-hidden-layer noise predictor `eps(x_t, t, c)` with hand-written
//! backprop. Input layout is `[x_t (d) | t/T (1) | context embedding (d_c)]`,
//! hidden activation is `tanh`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CocaError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub data_dim: usize,
    pub context_dim: usize,
    pub hidden: usize,
    /// `hidden x input_dim`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `data_dim x hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    activation: Vec<f64>,
}

impl DenoiserParams {
    pub fn zeros(data_dim: usize, context_dim: usize, hidden: usize) -> Self {
        let input_dim = data_dim + 1 + context_dim;
        Self {
            data_dim,
            context_dim,
            hidden,
            w1: vec![0.0; hidden * input_dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; data_dim * hidden],
            b2: vec![0.0; data_dim],
        }
    }

    /// Gaussian fan-in initialization; biases start at zero.
    pub fn init<R: Rng + ?Sized>(data_dim: usize, context_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(data_dim, context_dim, hidden);
        let s1 = (1.0 / p.input_dim() as f64).sqrt();
        let s2 = (1.0 / hidden.max(1) as f64).sqrt();
        for w in &mut p.w1 {
            *w = s1 * rng.sample::<f64, _>(StandardNormal);
        }
        for w in &mut p.w2 {
            *w = s2 * rng.sample::<f64, _>(StandardNormal);
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.data_dim, self.context_dim, self.hidden)
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + 1 + self.context_dim
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.data_dim == other.data_dim && self.context_dim == other.context_dim && self.hidden == other.hidden
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1.iter_mut().chain(self.b1.iter_mut()).chain(self.w2.iter_mut()).chain(self.b2.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        self.iter_mut().for_each(|v| *v *= k);
    }

    /// `self += k * other`.
    pub fn add_scaled(&mut self, other: &Self, k: f64) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += k * b;
        }
    }

    fn check_input(&self, x: &[f64], context: &[f64]) -> Result<()> {
        if x.len() != self.data_dim {
            return Err(CocaError::DimensionMismatch { expected: self.data_dim, actual: x.len() });
        }
        if context.len() != self.context_dim {
            return Err(CocaError::DimensionMismatch { expected: self.context_dim, actual: context.len() });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64], t_frac: f64, context: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(x, context)?;
        let mut input = Vec::with_capacity(self.input_dim());
        input.extend_from_slice(x);
        input.push(t_frac);
        input.extend_from_slice(context);

        let n_in = input.len();
        let activation: Vec<f64> = (0..self.hidden)
            .map(|h| {
                let row = &self.w1[h * n_in..(h + 1) * n_in];
                let z = self.b1[h] + row.iter().zip(&input).map(|(w, v)| w * v).sum::<f64>();
                z.tanh()
            })
            .collect();
        let out = (0..self.data_dim)
            .map(|o| {
                let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
                self.b2[o] + row.iter().zip(&activation).map(|(w, a)| w * a).sum::<f64>()
            })
            .collect();
        Ok((out, ForwardCache { input, activation }))
    }

    pub fn predict(&self, x: &[f64], t_frac: f64, context: &[f64]) -> Result<Vec<f64>> {
        self.forward(x, t_frac, context).map(|(y, _)| y)
    }

    /// Accumulates `d(grad_out . eps)/d(params)` into `grads`.
    #[allow(clippy::needless_range_loop)]
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64], grads: &mut DenoiserParams) {
        debug_assert_eq!(grad_out.len(), self.data_dim);
        debug_assert!(self.same_shape(grads));
        let n_in = cache.input.len();
        let mut grad_act = vec![0.0; self.hidden];
        for (o, g) in grad_out.iter().enumerate() {
            grads.b2[o] += g;
            let row = o * self.hidden;
            for h in 0..self.hidden {
                grads.w2[row + h] += g * cache.activation[h];
                grad_act[h] += g * self.w2[row + h];
            }
        }
        for h in 0..self.hidden {
            let a = cache.activation[h];
            let gz = grad_act[h] * (1.0 - a * a);
            grads.b1[h] += gz;
            let row = h * n_in;
            for (i, v) in cache.input.iter().enumerate() {
                grads.w1[row + i] += gz * v;
            }
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(ParamsDoc::from(self)).expect("parameter document serializes")
    }

    pub fn from_json(value: &serde_json::Value) -> std::result::Result<Self, String> {
        let doc: ParamsDoc = serde_json::from_value(value.clone()).map_err(|e| e.to_string())?;
        doc.try_into()
    }
}

/// JSON layout of the parameters: nested row-major arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsDoc {
    pub data_dim: usize,
    pub context_dim: usize,
    pub hidden: usize,
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
}

impl From<&DenoiserParams> for ParamsDoc {
    fn from(p: &DenoiserParams) -> Self {
        let n_in = p.input_dim();
        Self {
            data_dim: p.data_dim,
            context_dim: p.context_dim,
            hidden: p.hidden,
            w1: p.w1.chunks(n_in.max(1)).map(<[f64]>::to_vec).collect(),
            b1: p.b1.clone(),
            w2: p.w2.chunks(p.hidden.max(1)).map(<[f64]>::to_vec).collect(),
            b2: p.b2.clone(),
        }
    }
}

impl TryFrom<ParamsDoc> for DenoiserParams {
    type Error = String;

    fn try_from(doc: ParamsDoc) -> std::result::Result<Self, String> {
        let mut p = DenoiserParams::zeros(doc.data_dim, doc.context_dim, doc.hidden);
        let n_in = p.input_dim();
        let rows_ok = |m: &[Vec<f64>], rows: usize, cols: usize| m.len() == rows && m.iter().all(|r| r.len() == cols);
        if !rows_ok(&doc.w1, doc.hidden, n_in)
            || !rows_ok(&doc.w2, doc.data_dim, doc.hidden)
            || doc.b1.len() != doc.hidden
            || doc.b2.len() != doc.data_dim
        {
            return Err("parameter shapes do not match the declared dimensions".into());
        }
        p.w1 = doc.w1.concat();
        p.b1 = doc.b1;
        p.w2 = doc.w2.concat();
        p.b2 = doc.b2;
        if !p.is_finite() {
            return Err("non-finite parameter".into());
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn fd_check(p: &DenoiserParams, x: &[f64], t: f64, c: &[f64], upstream: &[f64]) {
        let (_, cache) = p.forward(x, t, c).unwrap();
        let mut g = p.zeros_like();
        p.backward(&cache, upstream, &mut g);
        let objective = |q: &DenoiserParams| -> f64 {
            let y = q.predict(x, t, c).unwrap();
            y.iter().zip(upstream).map(|(a, b)| a * b).sum()
        };
        let analytic: Vec<f64> = g.iter().copied().collect();
        let h = 1e-6;
        for (i, a) in analytic.iter().enumerate() {
            let mut plus = p.clone();
            let mut minus = p.clone();
            *plus.iter_mut().nth(i).unwrap() += h;
            *minus.iter_mut().nth(i).unwrap() -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            assert!((fd - a).abs() <= 1e-6 * (1.0 + fd.abs()), "param {i}: fd {fd} vs {a}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = stream_rng(7, Stream::Init, &[]);
        let mut p = DenoiserParams::init(2, 3, 5, &mut rng);
        for b in p.b1.iter_mut().chain(p.b2.iter_mut()) {
            *b = rng.sample::<f64, _>(StandardNormal) * 0.3;
        }
        fd_check(&p, &[0.3, -1.2], 0.4, &[1.0, 0.0, 0.0], &[0.7, -1.1]);
    }

    #[test]
    fn rejects_wrong_dimensions() {
        let p = DenoiserParams::zeros(2, 1, 4);
        assert!(p.forward(&[1.0], 0.0, &[1.0]).is_err());
        assert!(p.forward(&[1.0, 2.0], 0.0, &[]).is_err());
    }

    #[test]
    fn json_layout_is_nested_row_major() {
        let mut rng = stream_rng(1, Stream::Init, &[]);
        let p = DenoiserParams::init(2, 1, 3, &mut rng);
        let v = p.to_json();
        assert_eq!(v["w1"].as_array().unwrap().len(), 3);
        assert_eq!(v["w1"][0].as_array().unwrap().len(), 4);
        assert_eq!(v["w1"][1][2].as_f64().unwrap(), p.w1[4 + 2]);
        assert_eq!(v["w2"].as_array().unwrap().len(), 2);
        let back = DenoiserParams::from_json(&v).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn json_rejects_bad_shapes() {
        let p = DenoiserParams::zeros(2, 1, 3);
        let mut v = p.to_json();
        v["b1"] = serde_json::json!([0.0, 0.0]);
        assert!(DenoiserParams::from_json(&v).is_err());
    }
}
