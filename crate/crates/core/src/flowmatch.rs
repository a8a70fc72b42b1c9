//! Flow-matching action head: timestep prior, interpolation, the conditioned
//! decoder and Euler sampling.
//!
//! Action chunks of a batch are stored flattened, one `H·d_a` row per sample.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Upper end of the timestep support.
pub const TIMESTEP_SCALE: f64 = 0.999;
const BETA_ALPHA: f64 = 1.5;
/// Frequencies of the sinusoidal timestep embedding.
const S_FREQS: [f64; 2] = [1.0, 10.0];
pub const S_EMBED_DIM: usize = 2 * S_FREQS.len();

/// Maps a Beta(1.5, 1) draw `x` to a timestep `a·(1 − x)`.
pub fn timestep_from_beta(x: f64) -> f64 {
    TIMESTEP_SCALE * (1.0 - x)
}

/// Draws `x ~ Beta(1.5, 1)` by inverse CDF (`x = u^{1/1.5}`) and returns the
/// timestep. Small values of `s` (close to noise) are the most likely.
pub fn sample_timestep<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen();
    timestep_from_beta(u.powf(1.0 / BETA_ALPHA))
}

/// CDF of the timestep distribution on `[0, a]`.
pub fn timestep_cdf(s: f64) -> f64 {
    let t = (s / TIMESTEP_SCALE).clamp(0.0, 1.0);
    1.0 - (1.0 - t).powf(BETA_ALPHA)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub s: f64,
    pub epsilon: Tensor,
    /// `s·A + (1 − s)·ε`
    pub a_s: Tensor,
    /// `ε − A`
    pub target: Tensor,
}

pub fn interpolate(a: &Tensor, epsilon: &Tensor, s: f64) -> Result<FlowSample> {
    if a.shape() != epsilon.shape() {
        return Err(Error::InvalidArgument(format!(
            "action chunk {:?} and noise {:?} differ in shape",
            a.shape(),
            epsilon.shape()
        )));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidArgument(format!("timestep {s} outside [0, 1]")));
    }
    let a_s = a.data().iter().zip(epsilon.data()).map(|(x, e)| s * x + (1.0 - s) * e).collect();
    let target = a.data().iter().zip(epsilon.data()).map(|(x, e)| e - x).collect();
    Ok(FlowSample {
        s,
        epsilon: epsilon.clone(),
        a_s: Tensor::new(a.shape().to_vec(), a_s)?,
        target: Tensor::new(a.shape().to_vec(), target)?,
    })
}

/// Row-wise interpolation with a separate timestep per sample.
pub fn interpolate_rows(a: &Tensor, epsilon: &Tensor, s: &[f64]) -> Result<(Tensor, Tensor)> {
    if s.len() != a.rows() {
        return Err(Error::InvalidArgument(format!("{} timesteps for {} rows", s.len(), a.rows())));
    }
    let mut a_s = Vec::with_capacity(a.numel());
    let mut target = Vec::with_capacity(a.numel());
    for (r, &sr) in s.iter().enumerate() {
        let row = interpolate(
            &Tensor::new(vec![a.cols()], a.row(r).to_vec())?,
            &Tensor::new(vec![epsilon.cols()], epsilon.row(r).to_vec())?,
            sr,
        )?;
        a_s.extend_from_slice(row.a_s.data());
        target.extend_from_slice(row.target.data());
    }
    Ok((
        Tensor::new(a.shape().to_vec(), a_s)?,
        Tensor::new(a.shape().to_vec(), target)?,
    ))
}

pub fn standard_normal<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// `[sin(f·s), cos(f·s)]` for each frequency, one row per timestep.
pub fn timestep_embedding(s: &[f64]) -> Tensor {
    let mut data = Vec::with_capacity(s.len() * S_EMBED_DIM);
    for &t in s {
        for f in S_FREQS {
            data.push((f * t).sin());
            data.push((f * t).cos());
        }
    }
    Tensor::new(vec![s.len(), S_EMBED_DIM], data).expect("shape matches")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderDims {
    pub d_model: usize,
    pub d_q: usize,
    pub horizon: usize,
    pub d_a: usize,
    pub hidden: usize,
}

impl Default for DecoderDims {
    fn default() -> Self {
        DecoderDims {
            d_model: 32,
            d_q: 3,
            horizon: 8,
            d_a: 3,
            hidden: 128,
        }
    }
}

impl DecoderDims {
    pub fn chunk_len(&self) -> usize {
        self.horizon * self.d_a
    }

    pub fn input_len(&self) -> usize {
        self.d_model + self.d_q + self.chunk_len() + S_EMBED_DIM
    }
}

pub fn init_decoder<R: Rng>(p: &mut ParamStore, dims: &DecoderDims, rng: &mut R) {
    let (i, h, o) = (dims.input_len(), dims.hidden, dims.chunk_len());
    p.init_weight("decoder.l1.W", i, h, rng);
    p.init_bias("decoder.l1.b", i, h, rng);
    p.init_weight("decoder.l2.W", h, h, rng);
    p.init_bias("decoder.l2.b", h, h, rng);
    p.init_weight("decoder.l3.W", h, o, rng);
    p.init_bias("decoder.l3.b", h, o, rng);
}

/// Predicts `ε − A` from the pooled conditioning `B × d_model`, proprio
/// `B × d_q`, noisy chunk `B × H·d_a` and per-sample timesteps.
pub fn decoder_forward(g: &mut Graph, p: &BoundParams, pooled: Var, q: Var, a_s: Var, s: &[f64]) -> Result<Var> {
    let emb = g.constant(timestep_embedding(s))?;
    let x = g.concat_cols(&[pooled, q, a_s, emb])?;
    let mut hid = x;
    for l in 1..=2 {
        hid = g.matmul(hid, p.var(&format!("decoder.l{l}.W"))?)?;
        hid = g.add_row(hid, p.var(&format!("decoder.l{l}.b"))?)?;
        hid = g.tanh(hid)?;
    }
    let out = g.matmul(hid, p.var("decoder.l3.W")?)?;
    Ok(g.add_row(out, p.var("decoder.l3.b")?)?)
}

/// Mean squared error between the prediction and `ε − A`.
pub fn fm_loss(g: &mut Graph, prediction: Var, target: Var) -> Result<Var> {
    Ok(g.mse(prediction, target)?)
}

/// Euler integration from noise (`s = 0`) towards data (`s = 1`) with `k`
/// steps. `predict(x, s)` returns the model's estimate of `ε − A`, so each
/// step subtracts it.
pub fn euler_sample<F>(x0: Tensor, k: usize, mut predict: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if k < 1 {
        return Err(Error::InvalidArgument("need at least one integration step".into()));
    }
    let dt = 1.0 / k as f64;
    let mut x = x0;
    for i in 0..k {
        let s = i as f64 * dt;
        let v = predict(&x, s)?;
        if v.shape() != x.shape() {
            return Err(Error::InvalidArgument(format!(
                "prediction {:?} does not match state {:?}",
                v.shape(),
                x.shape()
            )));
        }
        x.data_mut().iter_mut().zip(v.data()).for_each(|(a, b)| *a -= dt * b);
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("sampled actions".into()));
    }
    Ok(x)
}

/// Samples one chunk per row of `pooled` with the decoder in `params`.
pub fn sample_actions<R: Rng>(
    params: &ParamStore,
    pooled: &Tensor,
    q: &Tensor,
    dims: &DecoderDims,
    k: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let b = pooled.rows();
    let eps = standard_normal(&[b, dims.chunk_len()], rng);
    euler_sample(eps, k, |x, s| {
        let mut g = Graph::new();
        let bp = params.bind(&mut g, &crate::params::Group::ALL)?;
        let pv = g.constant(pooled.clone())?;
        let qv = g.constant(q.clone())?;
        let xv = g.constant(x.clone())?;
        let out = decoder_forward(&mut g, &bp, pv, qv, xv, &vec![s; b])?;
        Ok(g.value(out).clone())
    })
}
