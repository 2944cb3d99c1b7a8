//! Layer helpers over a parameter store bound to a tape.
//!
//! Parameters are addressed by dotted names; every helper takes the prefix
//! of the layer it reads.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use wa_tensor::{Bound, ParamStore, Tensor, Var};

use crate::Result;

pub const LN_EPS: f64 = 1e-5;

pub type B<'s, 't> = Bound<'s, 't, f64>;
pub type V<'t> = Var<'t, f64>;

pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
}

/// Registers `{name}.w` (`d_in × d_out`) and `{name}.b`.
pub fn init_linear(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, zero: bool, rng: &mut impl Rng) {
    let w = if zero {
        Tensor::zeros(&[d_in, d_out])
    } else {
        randn(&[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng)
    };
    store.insert(format!("{name}.w"), w);
    store.insert(format!("{name}.b"), Tensor::zeros(&[d_out]));
}

pub fn init_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(format!("{name}.g"), Tensor::ones(&[dim]));
    store.insert(format!("{name}.b"), Tensor::zeros(&[dim]));
}

/// Registers a residual MLP `{name}.fc1`, `{name}.fc2` of hidden width
/// `ratio·dim`; `zero_out` zeroes the second layer.
pub fn init_mlp(store: &mut ParamStore, name: &str, dim: usize, ratio: usize, zero_out: bool, rng: &mut impl Rng) {
    init_linear(store, &format!("{name}.fc1"), dim, ratio * dim, false, rng);
    init_linear(store, &format!("{name}.fc2"), ratio * dim, dim, zero_out, rng);
}

/// Query/key/value and output projections for `{name}`.
pub fn init_attention(store: &mut ParamStore, name: &str, dim: usize, zero_out: bool, rng: &mut impl Rng) {
    for p in ["q", "k", "v"] {
        init_linear(store, &format!("{name}.{p}"), dim, dim, false, rng);
    }
    init_linear(store, &format!("{name}.o"), dim, dim, zero_out, rng);
}

pub fn linear<'t>(b: &B<'_, 't>, name: &str, x: V<'t>) -> Result<V<'t>> {
    let w = b.get(&format!("{name}.w"))?;
    let bias = b.get(&format!("{name}.b"))?;
    Ok(x.matmul(w)?.add_row(bias)?)
}

pub fn norm<'t>(b: &B<'_, 't>, name: &str, x: V<'t>) -> Result<V<'t>> {
    let g = b.get(&format!("{name}.g"))?;
    let beta = b.get(&format!("{name}.b"))?;
    Ok(x.layer_norm(g, beta, LN_EPS)?)
}

pub fn mlp<'t>(b: &B<'_, 't>, name: &str, x: V<'t>) -> Result<V<'t>> {
    let h = linear(b, &format!("{name}.fc1"), x)?.gelu();
    linear(b, &format!("{name}.fc2"), h)
}

/// Multi-head attention of `q_in` rows over `kv_in` rows in `groups`
/// independent blocks, followed by the output projection.
pub fn attend<'t>(b: &B<'_, 't>, name: &str, q_in: V<'t>, k_in: V<'t>, v_in: V<'t>, heads: usize, groups: usize) -> Result<V<'t>> {
    let q = linear(b, &format!("{name}.q"), q_in)?;
    let k = linear(b, &format!("{name}.k"), k_in)?;
    let v = linear(b, &format!("{name}.v"), v_in)?;
    let a = q.attention(k, v, heads, groups)?;
    linear(b, &format!("{name}.o"), a)
}

/// Pre-norm self-attention block with MLP, in `groups` blocks of rows.
pub fn self_block<'t>(b: &B<'_, 't>, name: &str, x: V<'t>, heads: usize, groups: usize) -> Result<V<'t>> {
    let h = norm(b, &format!("{name}.n1"), x)?;
    let x = x.add(attend(b, &format!("{name}.attn"), h, h, h, heads, groups)?)?;
    let h = norm(b, &format!("{name}.n2"), x)?;
    Ok(x.add(mlp(b, &format!("{name}.mlp"), h)?)?)
}

pub fn init_self_block(store: &mut ParamStore, name: &str, dim: usize, ratio: usize, zero_out: bool, rng: &mut impl Rng) {
    init_norm(store, &format!("{name}.n1"), dim);
    init_attention(store, &format!("{name}.attn"), dim, zero_out, rng);
    init_norm(store, &format!("{name}.n2"), dim);
    init_mlp(store, &format!("{name}.mlp"), dim, ratio, zero_out, rng);
}

/// Row indices repeating a `rows`-row table `groups` times.
pub fn tile_index(rows: usize, groups: usize) -> Vec<usize> {
    (0..groups).flat_map(|_| 0..rows).collect()
}
