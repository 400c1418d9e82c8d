//! Parameter initialisation and tape helpers shared by the networks.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

fn uniform<R: Rng + ?Sized>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("uniform shape")
}

/// `U(-1/√fan_in, 1/√fan_in)` weights and biases for a `k×k` convolution.
pub(crate) fn init_conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut R,
) -> Result<()> {
    let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
    store.insert(format!("{name}.w"), uniform(vec![c_out, c_in, k, k], bound, rng))?;
    store.insert(format!("{name}.b"), uniform(vec![c_out], bound, rng))?;
    Ok(())
}

pub(crate) fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    d_out: usize,
    d_in: usize,
    rng: &mut R,
) -> Result<()> {
    let bound = 1.0 / (d_in as f64).sqrt();
    store.insert(format!("{name}.w"), uniform(vec![d_out, d_in], bound, rng))?;
    store.insert(format!("{name}.b"), uniform(vec![d_out], bound, rng))?;
    Ok(())
}

pub(crate) fn init_zero_linear(
    store: &mut ParamStore,
    name: &str,
    d_out: usize,
    d_in: usize,
) -> Result<()> {
    store.insert(format!("{name}.w"), Tensor::zeros([d_out, d_in]))?;
    store.insert(format!("{name}.b"), Tensor::zeros([d_out]))?;
    Ok(())
}

pub(crate) fn init_norm(store: &mut ParamStore, name: &str, c: usize) -> Result<()> {
    store.insert(format!("{name}.g"), Tensor::full([c], 1.0))?;
    store.insert(format!("{name}.b"), Tensor::zeros([c]))?;
    Ok(())
}

pub(crate) fn conv(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    Ok(g.conv2d(x, w, b))
}

pub(crate) fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    Ok(g.linear(x, w, b))
}

pub(crate) fn norm(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let c = g.value(x).dims4().1;
    let gamma = g.param(store, &format!("{name}.g"))?;
    let beta = g.param(store, &format!("{name}.b"))?;
    Ok(g.group_norm(x, gamma, beta, norm_groups(c)))
}

/// Largest of 8, 4, 2, 1 groups that divides `c`.
pub(crate) fn norm_groups(c: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|&k| c.is_multiple_of(k)).unwrap_or(1)
}
