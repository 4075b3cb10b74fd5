//! FLOP accounting conventions.
//!
//! One place defines the cost of each kernel so the analytic counter
//! (`analysis::count_flops`, driven by config arithmetic) and the tape
//! instrumentation (`Graph`, driven by actual buffer shapes) price work
//! identically. Conventions: a multiply-accumulate is 2 FLOPs; elementwise
//! transcendentals and normalization steps are priced per element as below.

/// FLOPs per multiply-accumulate.
pub const MAC: u64 = 2;

/// `[m x k] * [k x n]` matrix product.
pub fn matmul(m: usize, k: usize, n: usize) -> u64 {
    MAC * (m * k * n) as u64
}

/// Affine map over `rows` positions: product plus bias add.
pub fn linear(rows: usize, d_in: usize, d_out: usize, bias: bool) -> u64 {
    matmul(rows, d_in, d_out) + if bias { (rows * d_out) as u64 } else { 0 }
}

/// Depthwise convolution producing `c * oh * ow` outputs from `k x k` taps.
pub fn depthwise_conv(c: usize, oh: usize, ow: usize, k: usize) -> u64 {
    MAC * (c * oh * ow * k * k) as u64
}

/// Shifted exp, sum, divide: 4 ops per element.
pub fn softmax(elems: usize) -> u64 {
    4 * elems as u64
}

/// Mean, variance, normalize, affine: 8 ops per element.
pub fn layer_norm(elems: usize) -> u64 {
    8 * elems as u64
}

/// Same accounting as layer_norm.
pub fn batch_norm(elems: usize) -> u64 {
    8 * elems as u64
}

/// erf-based GELU: 6 ops per element.
pub fn gelu(elems: usize) -> u64 {
    6 * elems as u64
}

pub fn elementwise(elems: usize) -> u64 {
    elems as u64
}

/// Log-softmax and gather per logit.
pub fn cross_entropy(elems: usize) -> u64 {
    5 * elems as u64
}
