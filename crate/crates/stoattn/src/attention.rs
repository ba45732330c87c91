//! Multi-head self-attention in three interchangeable modes:
//! deterministic softmax, stochastic Gumbel-Softmax over values, and
//! hierarchical stochastic attention through a set of learnable centroids.
//!
//! All modes share the projection/head plumbing and differ only in how a
//! score matrix becomes a row-stochastic attention matrix. Padding is
//! handled by adding a large negative bias (-1e9) to masked key columns
//! before any softmax or sampling.
//!
//! Noise draw order is part of the contract (tests reproduce it by
//! cloning streams): heads in index order; within a head, the
//! hierarchical mode draws the centroid-stage noise (l x c) first, then
//! the value-stage noise (l x l).

use crate::error::{Error, Result};
use crate::sampling::{NoiseSource, RngStream};
use crate::scalar::Scalar;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Additive bias applied to masked score columns.
const MASK_BIAS: f64 = -1e9;

/// Projection weights and head geometry for one attention layer.
#[derive(Debug, Clone)]
pub struct AttentionParams<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub heads: usize,
    /// Scaling factor α; defaults to sqrt(d/h).
    pub scale: T,
}

impl<T: Scalar> AttentionParams<T> {
    /// Fresh parameters with normal(0, init_std) projections.
    pub fn init(
        emb_dim: usize,
        heads: usize,
        init_std: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if heads == 0 || emb_dim % heads != 0 {
            return Err(Error::param(
                "heads",
                format!("emb_dim {emb_dim} not divisible by heads {heads}"),
            ));
        }
        let scale = T::from_f64_c((emb_dim as f64 / heads as f64).sqrt());
        let mut init = |n: usize| -> Tensor<T> {
            let data = (0..n).map(|_| rng.normal(0.0, init_std)).collect();
            Tensor::new(vec![emb_dim, emb_dim], data).expect("finite init")
        };
        Ok(AttentionParams {
            w_q: init(emb_dim * emb_dim),
            w_k: init(emb_dim * emb_dim),
            w_v: init(emb_dim * emb_dim),
            heads,
            scale,
        })
    }

    pub fn emb_dim(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.emb_dim() / self.heads
    }

    /// Register the projection weights as gradient-tracked leaves.
    pub fn register(&self, tape: &mut Tape<T>) -> AttentionHandles<T> {
        AttentionHandles {
            w_q: tape.leaf(self.w_q.clone()),
            w_k: tape.leaf(self.w_k.clone()),
            w_v: tape.leaf(self.w_v.clone()),
            heads: self.heads,
            scale: self.scale,
        }
    }
}

/// Tape-registered attention parameters for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct AttentionHandles<T> {
    pub w_q: TensorId,
    pub w_k: TensorId,
    pub w_v: TensorId,
    pub heads: usize,
    pub scale: T,
}

/// Learnable centroid matrix `C` (head_dim x count), shared across the
/// heads of a layer and updated by back-propagation.
#[derive(Debug, Clone)]
pub struct CentroidSet<T> {
    pub c: Tensor<T>,
}

impl<T: Scalar> CentroidSet<T> {
    /// i.i.d. normal(0, 1/sqrt(head_dim)) initialization.
    pub fn init(head_dim: usize, count: usize, rng: &mut RngStream) -> Result<Self> {
        if count == 0 {
            return Err(Error::param("centroid_count", "must be >= 1"));
        }
        let std = 1.0 / (head_dim as f64).sqrt();
        let data = (0..head_dim * count).map(|_| rng.normal(0.0, std)).collect();
        Ok(CentroidSet {
            c: Tensor::new(vec![head_dim, count], data)?,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.c.shape()[0]
    }

    pub fn count(&self) -> usize {
        self.c.shape()[1]
    }

    pub fn register(&self, tape: &mut Tape<T>) -> TensorId {
        tape.leaf(self.c.clone())
    }
}

/// Attention mode selection with its temperature knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StochasticConfig {
    Deterministic,
    Stochastic { tau: f64 },
    Hierarchical { tau1: f64, tau2: f64 },
}

impl StochasticConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            StochasticConfig::Deterministic => true,
            StochasticConfig::Stochastic { tau } => tau > 0.0,
            StochasticConfig::Hierarchical { tau1, tau2 } => tau1 > 0.0 && tau2 > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::param("temperature", "all temperatures must be > 0"))
        }
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            StochasticConfig::Deterministic => "deterministic",
            StochasticConfig::Stochastic { .. } => "stochastic",
            StochasticConfig::Hierarchical { .. } => "hierarchical",
        }
    }

    /// Whether forward passes draw attention noise.
    pub fn is_stochastic(&self) -> bool {
        !matches!(self, StochasticConfig::Deterministic)
    }

    pub fn uses_centroids(&self) -> bool {
        matches!(self, StochasticConfig::Hierarchical { .. })
    }
}

/// Result of one attention forward: the l x d output plus the per-head
/// attention matrices for diagnostics (row-sum checks, KL probes).
#[derive(Debug)]
pub struct MhsaOutput {
    pub output: TensorId,
    /// Per-head value-attention matrices (l x l).
    pub attention: Vec<TensorId>,
    /// Per-head centroid-attention matrices (l x c); hierarchical only.
    pub centroid_attention: Vec<TensorId>,
}

fn validate_input<T: Scalar>(
    tape: &Tape<T>,
    x: TensorId,
    handles: &AttentionHandles<T>,
    mask: Option<&[bool]>,
) -> Result<usize> {
    let sx = tape.shape(x).to_vec();
    if sx.len() != 2 || sx[1] != tape.shape(handles.w_q)[0] {
        return Err(Error::shape("mhsa", &sx, tape.shape(handles.w_q)));
    }
    let l = sx[0];
    if let Some(m) = mask {
        if m.len() != l {
            return Err(Error::contract(
                "mhsa",
                format!("mask length {} != sequence length {l}", m.len()),
            ));
        }
        if m.iter().all(|&pad| pad) {
            return Err(Error::contract("mhsa", "all positions masked"));
        }
    }
    Ok(l)
}

/// Constant -1e9 bias over masked key columns, or None when no mask.
fn mask_bias<T: Scalar>(tape: &mut Tape<T>, mask: Option<&[bool]>) -> Option<TensorId> {
    mask.map(|m| {
        let data = m
            .iter()
            .map(|&pad| if pad { T::from_f64_c(MASK_BIAS) } else { T::zero() })
            .collect();
        let t = Tensor::new(vec![m.len()], data).expect("finite mask bias");
        tape.constant(t)
    })
}

struct HeadSlices {
    q: TensorId,
    k: TensorId,
    v: TensorId,
}

fn project_heads<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    handles: &AttentionHandles<T>,
) -> Result<Vec<HeadSlices>> {
    let q = tape.matmul(x, handles.w_q)?;
    let k = tape.matmul(x, handles.w_k)?;
    let v = tape.matmul(x, handles.w_v)?;
    let dh = tape.shape(q)[1] / handles.heads;
    (0..handles.heads)
        .map(|i| {
            Ok(HeadSlices {
                q: tape.slice_cols(q, i * dh, dh)?,
                k: tape.slice_cols(k, i * dh, dh)?,
                v: tape.slice_cols(v, i * dh, dh)?,
            })
        })
        .collect()
}

/// Score matrix -> row-stochastic attention: optional mask bias, optional
/// additive Gumbel noise, temperature softmax over key positions.
fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    scores: TensorId,
    bias: Option<TensorId>,
    noise: Option<Tensor<T>>,
    temperature: T,
) -> Result<TensorId> {
    let mut s = scores;
    if let Some(b) = bias {
        s = tape.add_row_vec(s, b)?;
    }
    if let Some(g) = noise {
        let gid = tape.constant(g);
        s = tape.add(s, gid)?;
    }
    tape.softmax(s, 1, temperature)
}

/// Vanilla multi-head self-attention: per head `softmax(q kᵀ / α) v`,
/// heads concatenated back to l x d.
pub fn deterministic_mhsa<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    handles: &AttentionHandles<T>,
    mask: Option<&[bool]>,
) -> Result<MhsaOutput> {
    validate_input(tape, x, handles, mask)?;
    let bias = mask_bias(tape, mask);
    let heads = project_heads(tape, x, handles)?;
    let mut outs = Vec::with_capacity(handles.heads);
    let mut attns = Vec::with_capacity(handles.heads);
    for h in &heads {
        let kt = tape.transpose(h.k)?;
        let scores = tape.matmul(h.q, kt)?;
        let a = attend(tape, scores, bias, None, handles.scale)?;
        attns.push(a);
        outs.push(tape.matmul(a, h.v)?);
    }
    Ok(MhsaOutput {
        output: tape.concat_cols(&outs)?,
        attention: attns,
        centroid_attention: Vec::new(),
    })
}

/// Stochastic self-attention: the value attention is sampled from a
/// Gumbel-Softmax at temperature `tau`, fresh noise per call.
pub fn stochastic_mhsa<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    handles: &AttentionHandles<T>,
    tau: T,
    noise: &mut NoiseSource,
    mask: Option<&[bool]>,
) -> Result<MhsaOutput> {
    if tau <= T::zero() {
        return Err(Error::param("tau", "must be > 0"));
    }
    let l = validate_input(tape, x, handles, mask)?;
    let bias = mask_bias(tape, mask);
    let heads = project_heads(tape, x, handles)?;
    let mut outs = Vec::with_capacity(handles.heads);
    let mut attns = Vec::with_capacity(handles.heads);
    for h in &heads {
        let kt = tape.transpose(h.k)?;
        let scores = tape.matmul(h.q, kt)?;
        let g = noise.gumbel(vec![l, l]);
        let a = attend(tape, scores, bias, Some(g), tau)?;
        attns.push(a);
        outs.push(tape.matmul(a, h.v)?);
    }
    Ok(MhsaOutput {
        output: tape.concat_cols(&outs)?,
        attention: attns,
        centroid_attention: Vec::new(),
    })
}

/// Hierarchical stochastic self-attention. Per head: keys attend
/// stochastically to the centroids (temperature `tau1`), new keys are
/// mixed from the sampled centroid weights, then queries attend to the
/// mixed keys stochastically (temperature `tau2`). Gradients flow to the
/// projections and to the centroid matrix.
pub fn hierarchical_mhsa<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    handles: &AttentionHandles<T>,
    centroids: TensorId,
    tau1: T,
    tau2: T,
    noise: &mut NoiseSource,
    mask: Option<&[bool]>,
) -> Result<MhsaOutput> {
    if tau1 <= T::zero() || tau2 <= T::zero() {
        return Err(Error::param("tau", "must be > 0"));
    }
    let l = validate_input(tape, x, handles, mask)?;
    let sc = tape.shape(centroids).to_vec();
    let dh = tape.shape(handles.w_q)[0] / handles.heads;
    if sc.len() != 2 || sc[0] != dh {
        return Err(Error::shape("hierarchical_mhsa", &sc, &[dh, sc.get(1).copied().unwrap_or(0)]));
    }
    let c_count = sc[1];
    let bias = mask_bias(tape, mask);
    let heads = project_heads(tape, x, handles)?;
    let ct = tape.transpose(centroids)?;
    let mut outs = Vec::with_capacity(handles.heads);
    let mut attns = Vec::with_capacity(handles.heads);
    let mut cattns = Vec::with_capacity(handles.heads);
    for h in &heads {
        // Stage 1: keys over centroids, l x c.
        let kc = tape.matmul(h.k, centroids)?;
        let g1 = noise.gumbel(vec![l, c_count]);
        let a_c = attend(tape, kc, None, Some(g1), tau1)?;
        cattns.push(a_c);
        // Mixed keys: l x head_dim.
        let k_hat = tape.matmul(a_c, ct)?;
        // Stage 2: queries over mixed keys, l x l.
        let kt = tape.transpose(k_hat)?;
        let scores = tape.matmul(h.q, kt)?;
        let g2 = noise.gumbel(vec![l, l]);
        let a_v = attend(tape, scores, bias, Some(g2), tau2)?;
        attns.push(a_v);
        outs.push(tape.matmul(a_v, h.v)?);
    }
    Ok(MhsaOutput {
        output: tape.concat_cols(&outs)?,
        attention: attns,
        centroid_attention: cattns,
    })
}

/// Spectral norm (largest singular value) by power iteration with a
/// fixed-seed start vector; deterministic across platforms.
pub fn spectral_norm<T: Scalar>(m: &Tensor<T>) -> T {
    debug_assert_eq!(m.ndim(), 2);
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mut rng = RngStream::named(0x5EED_0001, "spectral-norm-init");
    let mut v: Vec<T> = (0..cols).map(|_| rng.normal(0.0, 1.0)).collect();
    normalize(&mut v);
    let mut sigma = T::zero();
    for _ in 0..500 {
        // u = M v
        let mut u = vec![T::zero(); rows];
        for (r, ur) in u.iter_mut().enumerate() {
            for c in 0..cols {
                *ur += m.data()[r * cols + c] * v[c];
            }
        }
        let un = normalize(&mut u);
        if un == T::zero() {
            return T::zero();
        }
        // v = Mᵀ u
        let mut v2 = vec![T::zero(); cols];
        for r in 0..rows {
            for (c, vc) in v2.iter_mut().enumerate() {
                *vc += m.data()[r * cols + c] * u[r];
            }
        }
        let next = normalize(&mut v2);
        v = v2;
        let done = (next - sigma).abs() <= T::from_f64_c(1e-13) * next.max(T::one());
        sigma = next;
        if done {
            break;
        }
    }
    sigma
}

fn normalize<T: Scalar>(v: &mut [T]) -> T {
    let norm = v
        .iter()
        .map(|&x| x * x)
        .fold(T::zero(), |a, b| a + b)
        .sqrt();
    if norm > T::zero() {
        for x in v.iter_mut() {
            *x = *x / norm;
        }
    }
    norm
}

/// One evaluation of the centroid-attention Lipschitz bound under shared
/// noise: `lhs = ‖softmax(k_i C / τ + g) - softmax(k_j C / τ + g)‖₂` against
/// `rhs = ε ‖C‖₂ / τ` with `ε = ‖k_i - k_j‖₂`.
#[derive(Debug, Clone, Copy)]
pub struct Prop1Record {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Check the bound for one key pair. The SAME noise realization `g` is
/// applied to both sides; with independent noise the pathwise bound does
/// not hold.
pub fn proposition1_check<T: Scalar>(
    k_i: &Tensor<T>,
    k_j: &Tensor<T>,
    centroids: &CentroidSet<T>,
    tau: T,
    g: &Tensor<T>,
) -> Result<Prop1Record> {
    if tau <= T::zero() {
        return Err(Error::param("tau", "must be > 0"));
    }
    let dh = centroids.head_dim();
    let c = centroids.count();
    if k_i.numel() != dh || k_j.numel() != dh {
        return Err(Error::shape("proposition1_check", k_i.shape(), &[dh]));
    }
    if g.numel() != c {
        return Err(Error::shape("proposition1_check", g.shape(), &[c]));
    }
    let attn = |k: &Tensor<T>| -> Result<Tensor<T>> {
        let row = Tensor::new(vec![1, dh], k.data().to_vec())?;
        let scores = row.matmul2(&centroids.c)?;
        let perturbed = Tensor::new(
            vec![c],
            scores
                .data()
                .iter()
                .zip(g.data())
                .map(|(&s, &gv)| s / tau + gv)
                .collect(),
        )?;
        perturbed.softmax(0, T::one())
    };
    let a_i = attn(k_i)?;
    let a_j = attn(k_j)?;
    let lhs = a_i.sub(&a_j)?.l2_norm().to_f64_c();
    let eps = k_i.sub(k_j)?.l2_norm().to_f64_c();
    let rhs = eps * spectral_norm(&centroids.c).to_f64_c() / tau.to_f64_c();
    Ok(Prop1Record {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-9,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params_from(
        w_q: Tensor<f64>,
        w_k: Tensor<f64>,
        w_v: Tensor<f64>,
        heads: usize,
        scale: f64,
    ) -> AttentionParams<f64> {
        AttentionParams {
            w_q,
            w_k,
            w_v,
            heads,
            scale,
        }
    }

    fn random_params(d: usize, heads: usize, seed: u64) -> AttentionParams<f64> {
        let mut rng = RngStream::new(seed);
        AttentionParams::init(d, heads, 0.5, &mut rng).unwrap()
    }

    fn random_x(l: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = RngStream::new(seed);
        Tensor::new(vec![l, d], (0..l * d).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
    }

    fn run_det(
        x: &Tensor<f64>,
        p: &AttentionParams<f64>,
        mask: Option<&[bool]>,
    ) -> (Tensor<f64>, Vec<Tensor<f64>>) {
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let h = p.register(&mut tape);
        let out = deterministic_mhsa(&mut tape, xid, &h, mask).unwrap();
        (
            tape.value(out.output).clone(),
            out.attention
                .iter()
                .map(|&a| tape.value(a).clone())
                .collect(),
        )
    }

    #[test]
    fn init_rejects_indivisible_heads() {
        let mut rng = RngStream::new(0);
        assert!(AttentionParams::<f64>::init(6, 4, 0.02, &mut rng).is_err());
    }

    #[test]
    fn single_token_attention_is_identity() {
        let p = random_params(4, 2, 1);
        let x = random_x(1, 4, 2);
        let (out, attns) = run_det(&x, &p, None);
        for a in &attns {
            assert_eq!(a.shape(), &[1, 1]);
            assert!((a.data()[0] - 1.0).abs() < 1e-15);
        }
        // Output equals the value projection row.
        let v = x.matmul2(&p.w_v).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-12);
    }

    #[test]
    fn zero_query_weights_give_uniform_attention() {
        let mut p = random_params(4, 1, 3);
        p.w_q = Tensor::zeros(vec![4, 4]);
        let x = random_x(3, 4, 4);
        let (out, attns) = run_det(&x, &p, None);
        for a in &attns {
            for &w in a.data() {
                assert!((w - 1.0 / 3.0).abs() < 1e-12);
            }
        }
        // Every output row is the mean of the value rows.
        let v = x.matmul2(&p.w_v).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                let mean = (v.get2(0, c) + v.get2(1, c) + v.get2(2, c)) / 3.0;
                assert!((out.get2(r, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_matches_straight_line_oracle() {
        // l=2, d=2, h=1 with hand-chosen weights; independent scalar
        // computation of softmax(q kᵀ / α) v.
        let w_q = Tensor::from_rows(&[vec![0.3, -0.2], vec![0.5, 0.1]]).unwrap();
        let w_k = Tensor::from_rows(&[vec![-0.4, 0.7], vec![0.2, 0.6]]).unwrap();
        let w_v = Tensor::from_rows(&[vec![1.0, 0.5], vec![-0.5, 0.25]]).unwrap();
        let alpha = 1.3;
        let p = params_from(w_q.clone(), w_k.clone(), w_v.clone(), 1, alpha);
        let x = Tensor::from_rows(&[vec![0.2, -1.0], vec![1.5, 0.4]]).unwrap();
        let (out, _) = run_det(&x, &p, None);

        // Oracle: straight-line scalars.
        let q = x.matmul2(&w_q).unwrap();
        let k = x.matmul2(&w_k).unwrap();
        let v = x.matmul2(&w_v).unwrap();
        let mut expect = Tensor::zeros(vec![2, 2]);
        for i in 0..2 {
            let s0 = (q.get2(i, 0) * k.get2(0, 0) + q.get2(i, 1) * k.get2(0, 1)) / alpha;
            let s1 = (q.get2(i, 0) * k.get2(1, 0) + q.get2(i, 1) * k.get2(1, 1)) / alpha;
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            let (a0, a1) = (e0 / (e0 + e1), e1 / (e0 + e1));
            for c in 0..2 {
                expect.set2(i, c, a0 * v.get2(0, c) + a1 * v.get2(1, c));
            }
        }
        assert!(out.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn stochastic_zero_noise_collapses_to_deterministic() {
        let p = random_params(8, 2, 5);
        let x = random_x(4, 8, 6);
        let (det, _) = run_det(&x, &p, None);

        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let h = p.register(&mut tape);
        let out = stochastic_mhsa(
            &mut tape,
            xid,
            &h,
            p.scale,
            &mut NoiseSource::Zero,
            None,
        )
        .unwrap();
        assert!(tape.value(out.output).max_abs_diff(&det) <= 1e-12);
    }

    #[test]
    fn stochastic_single_token_is_value_row() {
        let p = random_params(4, 2, 7);
        let x = random_x(1, 4, 8);
        let mut rng = RngStream::new(9);
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let h = p.register(&mut tape);
        let out = stochastic_mhsa(
            &mut tape,
            xid,
            &h,
            1.0,
            &mut NoiseSource::Rng(&mut rng),
            None,
        )
        .unwrap();
        let v = x.matmul2(&p.w_v).unwrap();
        assert!(tape.value(out.output).max_abs_diff(&v) < 1e-12);
    }

    #[test]
    fn stochastic_same_seed_identical_different_seed_differs() {
        let p = random_params(8, 2, 10);
        let x = random_x(5, 8, 11);
        let run = |seed: u64| -> Tensor<f64> {
            let mut rng = RngStream::new(seed);
            let mut tape = Tape::new();
            let xid = tape.constant(x.clone());
            let h = p.register(&mut tape);
            let out = stochastic_mhsa(
                &mut tape,
                xid,
                &h,
                1.0,
                &mut NoiseSource::Rng(&mut rng),
                None,
            )
            .unwrap();
            tape.value(out.output).clone()
        };
        let a = run(42);
        let b = run(42);
        let c = run(43);
        assert_eq!(a.data(), b.data());
        assert!(a.max_abs_diff(&c) > 0.0);
    }

    #[test]
    fn hierarchical_single_centroid_gives_uniform_value_attention() {
        let p = random_params(4, 2, 12);
        let x = random_x(3, 4, 13);
        let mut rng = RngStream::new(14);
        let centroids = CentroidSet::init(2, 1, &mut rng).unwrap();
        let mut tape = Tape::new();
        let xid = tape.constant(x);
        let h = p.register(&mut tape);
        let cid = centroids.register(&mut tape);
        let out = hierarchical_mhsa(
            &mut tape,
            xid,
            &h,
            cid,
            1.0,
            1.0,
            &mut NoiseSource::Zero,
            None,
        )
        .unwrap();
        // One-column centroid softmax is exactly 1 everywhere.
        for &ca in &out.centroid_attention {
            for &w in tape.value(ca).data() {
                assert!((w - 1.0).abs() < 1e-15);
            }
        }
        // Mixed keys are identical rows, so value attention is uniform.
        for &a in &out.attention {
            for &w in tape.value(a).data() {
                assert!((w - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hierarchical_single_token_is_value_row() {
        let p = random_params(4, 2, 15);
        let x = random_x(1, 4, 16);
        let mut rng = RngStream::new(17);
        let centroids = CentroidSet::init(2, 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let h = p.register(&mut tape);
        let cid = centroids.register(&mut tape);
        let out = hierarchical_mhsa(
            &mut tape,
            xid,
            &h,
            cid,
            0.7,
            1.3,
            &mut NoiseSource::Rng(&mut rng),
            None,
        )
        .unwrap();
        let v = x.matmul2(&p.w_v).unwrap();
        assert!(tape.value(out.output).max_abs_diff(&v) < 1e-12);
    }

    #[test]
    fn hierarchical_matches_straight_line_oracle_with_fixed_noise() {
        // l=2, d=2, h=1 (head_dim 2), c=2. The noise the op will draw is
        // precomputed from a cloned stream in the documented order:
        // stage-1 (l x c) then stage-2 (l x l).
        let p = params_from(
            Tensor::from_rows(&[vec![0.4, -0.1], vec![0.3, 0.8]]).unwrap(),
            Tensor::from_rows(&[vec![-0.2, 0.5], vec![0.7, -0.6]]).unwrap(),
            Tensor::from_rows(&[vec![0.9, 0.2], vec![-0.3, 0.6]]).unwrap(),
            1,
            1.0,
        );
        let x = Tensor::from_rows(&[vec![0.5, -0.7], vec![1.1, 0.3]]).unwrap();
        let centroids = CentroidSet {
            c: Tensor::from_rows(&[vec![0.6, -0.4], vec![0.1, 0.9]]).unwrap(),
        };
        let (tau1, tau2) = (0.8, 1.7);

        let mut op_rng = RngStream::new(777);
        let mut oracle_rng = op_rng.clone();
        let g1 = crate::sampling::gumbel_noise::<f64>(vec![2, 2], &mut oracle_rng);
        let g2 = crate::sampling::gumbel_noise::<f64>(vec![2, 2], &mut oracle_rng);

        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let h = p.register(&mut tape);
        let cid = centroids.register(&mut tape);
        let out = hierarchical_mhsa(
            &mut tape,
            xid,
            &h,
            cid,
            tau1,
            tau2,
            &mut NoiseSource::Rng(&mut op_rng),
            None,
        )
        .unwrap();

        // Oracle: scalar evaluation of the four-stage composition with the
        // op's score/noise form softmax((s + g)/τ).
        let softmax_twos = |s: [f64; 2], g: [f64; 2], temp: f64| -> [f64; 2] {
            let y0 = (s[0] + g[0]) / temp;
            let y1 = (s[1] + g[1]) / temp;
            let m = y0.max(y1);
            let (e0, e1) = ((y0 - m).exp(), (y1 - m).exp());
            [e0 / (e0 + e1), e1 / (e0 + e1)]
        };
        let q = x.matmul2(&p.w_q).unwrap();
        let k = x.matmul2(&p.w_k).unwrap();
        let v = x.matmul2(&p.w_v).unwrap();
        let mut k_hat = Tensor::zeros(vec![2, 2]);
        for i in 0..2 {
            let s = [
                k.get2(i, 0) * centroids.c.get2(0, 0) + k.get2(i, 1) * centroids.c.get2(1, 0),
                k.get2(i, 0) * centroids.c.get2(0, 1) + k.get2(i, 1) * centroids.c.get2(1, 1),
            ];
            let a_c = softmax_twos(s, [g1.get2(i, 0), g1.get2(i, 1)], tau1);
            // k_hat row = a_c · Cᵀ.
            for d in 0..2 {
                k_hat.set2(
                    i,
                    d,
                    a_c[0] * centroids.c.get2(d, 0) + a_c[1] * centroids.c.get2(d, 1),
                );
            }
        }
        let mut expect = Tensor::zeros(vec![2, 2]);
        for i in 0..2 {
            let s = [
                q.get2(i, 0) * k_hat.get2(0, 0) + q.get2(i, 1) * k_hat.get2(0, 1),
                q.get2(i, 0) * k_hat.get2(1, 0) + q.get2(i, 1) * k_hat.get2(1, 1),
            ];
            let a_v = softmax_twos(s, [g2.get2(i, 0), g2.get2(i, 1)], tau2);
            for c in 0..2 {
                expect.set2(i, c, a_v[0] * v.get2(0, c) + a_v[1] * v.get2(1, c));
            }
        }
        assert!(tape.value(out.output).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn masked_positions_get_negligible_weight_in_all_modes() {
        let p = random_params(8, 2, 20);
        let x = random_x(5, 8, 21);
        let mask = [false, false, true, false, true];
        let check = |attns: &[Tensor<f64>]| {
            for a in attns {
                for r in 0..5 {
                    assert!(a.get2(r, 2) < 1e-12);
                    assert!(a.get2(r, 4) < 1e-12);
                    let sum: f64 = (0..5).map(|c| a.get2(r, c)).sum();
                    assert!((sum - 1.0).abs() < 1e-9);
                }
            }
        };
        let (_, det_attns) = run_det(&x, &p, Some(&mask));
        check(&det_attns);

        let mut rng = RngStream::new(22);
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let h = p.register(&mut tape);
        let out = stochastic_mhsa(
            &mut tape,
            xid,
            &h,
            0.5,
            &mut NoiseSource::Rng(&mut rng),
            Some(&mask),
        )
        .unwrap();
        check(&[tape.value(out.attention[0]).clone()]);

        let centroids = CentroidSet::init(4, 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let h = p.register(&mut tape);
        let cid = centroids.register(&mut tape);
        let out = hierarchical_mhsa(
            &mut tape,
            xid,
            &h,
            cid,
            1.0,
            1.0,
            &mut NoiseSource::Rng(&mut rng),
            Some(&mask),
        )
        .unwrap();
        check(&[tape.value(out.attention[0]).clone()]);
    }

    #[test]
    fn fully_masked_input_is_contract_error() {
        let p = random_params(4, 1, 23);
        let x = random_x(2, 4, 24);
        let mut tape = Tape::new();
        let xid = tape.constant(x);
        let h = p.register(&mut tape);
        let err = deterministic_mhsa(&mut tape, xid, &h, Some(&[true, true])).unwrap_err();
        assert!(err.to_string().contains("all positions masked"));
    }

    #[test]
    fn gradients_match_finite_differences_in_all_modes() {
        // d=4, h=2, l=3, c=3 with frozen noise; the acceptance suite runs
        // the larger spec instance.
        let d = 4;
        let l = 3;
        let x = random_x(l, d, 30);
        let mut rng = RngStream::new(31);
        let weights: Vec<f64> = (0..l * d).map(|_| rng.next_f64() + 0.25).collect();

        #[derive(Clone, Copy)]
        enum Mode {
            Det,
            Sto,
            Hier,
        }

        let mut base_rng = RngStream::new(32);
        let wq: Vec<f64> = (0..d * d).map(|_| base_rng.normal(0.0, 0.5)).collect();
        let wk: Vec<f64> = (0..d * d).map(|_| base_rng.normal(0.0, 0.5)).collect();
        let wv: Vec<f64> = (0..d * d).map(|_| base_rng.normal(0.0, 0.5)).collect();
        let cd: Vec<f64> = (0..6).map(|_| base_rng.normal(0.0, 0.7)).collect();

        for mode in [Mode::Det, Mode::Sto, Mode::Hier] {
            let run = |wq: &[f64], wk: &[f64], wv: &[f64], cd: &[f64], want_grads: bool| {
                let p = params_from(
                    Tensor::new(vec![d, d], wq.to_vec()).unwrap(),
                    Tensor::new(vec![d, d], wk.to_vec()).unwrap(),
                    Tensor::new(vec![d, d], wv.to_vec()).unwrap(),
                    2,
                    1.4,
                );
                let mut tape = Tape::new();
                let xid = tape.constant(x.clone());
                let h = p.register(&mut tape);
                let mut noise_rng = RngStream::with_stream(500, 1);
                let mut cid = None;
                let out = match mode {
                    Mode::Det => deterministic_mhsa(&mut tape, xid, &h, None).unwrap(),
                    Mode::Sto => stochastic_mhsa(
                        &mut tape,
                        xid,
                        &h,
                        0.9,
                        &mut NoiseSource::Rng(&mut noise_rng),
                        None,
                    )
                    .unwrap(),
                    Mode::Hier => {
                        let cs = CentroidSet {
                            c: Tensor::new(vec![2, 3], cd.to_vec()).unwrap(),
                        };
                        let id = cs.register(&mut tape);
                        cid = Some(id);
                        hierarchical_mhsa(
                            &mut tape,
                            xid,
                            &h,
                            id,
                            0.8,
                            1.2,
                            &mut NoiseSource::Rng(&mut noise_rng),
                            None,
                        )
                        .unwrap()
                    }
                };
                let wt = tape.constant(Tensor::new(vec![l, d], weights.clone()).unwrap());
                let y = tape.mul_elem(out.output, wt).unwrap();
                let loss = tape.sum(y).unwrap();
                let lv = tape.value(loss).data()[0];
                if !want_grads {
                    return (lv, Vec::new());
                }
                tape.backward(loss).unwrap();
                let mut g = vec![
                    tape.grad(h.w_q).unwrap().to_vec(),
                    tape.grad(h.w_k).unwrap().to_vec(),
                    tape.grad(h.w_v).unwrap().to_vec(),
                ];
                if let Some(id) = cid {
                    g.push(tape.grad(id).unwrap().to_vec());
                }
                (lv, g)
            };

            let (_, analytic) = run(&wq, &wk, &wv, &cd, true);
            let step = 1e-5;
            let check = |analytic: &[f64], numeric: &[f64], what: &str| {
                for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
                    let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                    assert!(rel < 1e-4, "{what}[{i}] a={a} n={n} rel={rel}");
                }
            };

            let fd = |which: usize| -> Vec<f64> {
                let base: &[f64] = match which {
                    0 => &wq,
                    1 => &wk,
                    2 => &wv,
                    _ => &cd,
                };
                let mut grads = Vec::with_capacity(base.len());
                for i in 0..base.len() {
                    let mut up = base.to_vec();
                    let mut down = base.to_vec();
                    up[i] += step;
                    down[i] -= step;
                    let f = |variant: &[f64]| match which {
                        0 => run(variant, &wk, &wv, &cd, false).0,
                        1 => run(&wq, variant, &wv, &cd, false).0,
                        2 => run(&wq, &wk, variant, &cd, false).0,
                        _ => run(&wq, &wk, &wv, variant, false).0,
                    };
                    grads.push((f(&up) - f(&down)) / (2.0 * step));
                }
                grads
            };

            check(&analytic[0], &fd(0), "w_q");
            check(&analytic[1], &fd(1), "w_k");
            check(&analytic[2], &fd(2), "w_v");
            if analytic.len() == 4 {
                check(&analytic[3], &fd(3), "centroids");
            }
        }
    }

    #[test]
    fn spectral_norm_of_diagonal_is_max_entry() {
        let m = Tensor::from_rows(&[vec![3.0f64, 0.0], vec![0.0, -7.0]]).unwrap();
        assert!((spectral_norm(&m) - 7.0).abs() < 1e-10);
    }

    #[test]
    fn spectral_norm_matches_svd_oracle() {
        let mut rng = RngStream::new(40);
        for trial in 0..20 {
            let (r, c) = (8, 5);
            let data: Vec<f64> = (0..r * c).map(|_| rng.normal(0.0, 1.0)).collect();
            let m = Tensor::new(vec![r, c], data.clone()).unwrap();
            let ours = spectral_norm(&m);
            let na = nalgebra::DMatrix::from_row_slice(r, c, &data);
            let svd = na.svd(false, false);
            let expect = svd.singular_values.max();
            assert!(
                (ours - expect).abs() < 1e-9,
                "trial {trial}: ours={ours} svd={expect}"
            );
        }
    }

    #[test]
    fn prop1_identical_keys_zero_lhs() {
        let mut rng = RngStream::new(50);
        let cs = CentroidSet::init(4, 6, &mut rng).unwrap();
        let k = Tensor::new(vec![4], (0..4).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
        let g = crate::sampling::gumbel_noise::<f64>(vec![6], &mut rng);
        let rec = proposition1_check(&k, &k, &cs, 1.0, &g).unwrap();
        assert_eq!(rec.lhs, 0.0);
        assert!(rec.holds);
    }

    #[test]
    fn prop1_large_tau_drives_lhs_to_zero() {
        let mut rng = RngStream::new(51);
        let cs = CentroidSet::init(4, 6, &mut rng).unwrap();
        let k_i = Tensor::new(vec![4], (0..4).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
        let k_j = Tensor::new(vec![4], (0..4).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
        let g = crate::sampling::gumbel_noise::<f64>(vec![6], &mut rng);
        let rec = proposition1_check(&k_i, &k_j, &cs, 1e6, &g).unwrap();
        assert!(rec.lhs < 1e-5, "lhs={}", rec.lhs);
        assert!(rec.holds);
    }

    #[test]
    fn prop1_holds_over_random_trials() {
        let mut rng = RngStream::new(52);
        for trial in 0..200 {
            let cs = CentroidSet::init(8, 8, &mut rng).unwrap();
            let k_i =
                Tensor::new(vec![8], (0..8).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
            let k_j =
                Tensor::new(vec![8], (0..8).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
            let g = crate::sampling::gumbel_noise::<f64>(vec![8], &mut rng);
            for &tau in &[0.5, 1.0, 2.0] {
                let rec = proposition1_check(&k_i, &k_j, &cs, tau, &g).unwrap();
                assert!(
                    rec.holds,
                    "trial {trial} tau {tau}: lhs={} rhs={}",
                    rec.lhs, rec.rhs
                );
            }
        }
    }

    #[test]
    fn close_keys_have_close_centroid_attention() {
        // Shrinking key distance shrinks the attention-row distance under
        // shared noise.
        let mut rng = RngStream::new(53);
        let cs = CentroidSet::init(4, 5, &mut rng).unwrap();
        let base = Tensor::new(vec![4], (0..4).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
        let dir: Vec<f64> = (0..4).map(|_| rng.normal(0.0, 1.0)).collect();
        let g = crate::sampling::gumbel_noise::<f64>(vec![5], &mut rng);
        let mut last = f64::INFINITY;
        for &eps in &[1.0, 0.1, 0.01, 0.001] {
            let shifted = Tensor::new(
                vec![4],
                base.data()
                    .iter()
                    .zip(&dir)
                    .map(|(&b, &d)| b + eps * d)
                    .collect(),
            )
            .unwrap();
            let rec = proposition1_check(&base, &shifted, &cs, 1.0, &g).unwrap();
            assert!(rec.lhs <= last + 1e-12, "lhs not shrinking: {} vs {last}", rec.lhs);
            last = rec.lhs;
        }
        assert!(last < 1e-3);
    }
}
