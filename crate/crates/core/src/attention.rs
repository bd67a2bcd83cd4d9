//! Multi-head attention, its masked single-stream form, and the
//! translation-equivariant variant that also moves input locations.
//!
//! Attention logits are `z_n^T W_Q,h W_K,h^T z_m` with no `1/sqrt(D_QK)`
//! factor unless [`AttentionParams::scaled`] is set.
//!
//! The translation-equivariant weights replace the logit by
//! `rho(dots_n,m, x_n - x_m)`, where `rho` is one MLP taking the `H` per-head
//! dot products concatenated with the location difference and producing `H`
//! logits. Locations are then updated by
//! `x_n + (1/M) sum_h sum_m (x_n - x_m) phi_h(alpha_h,n,m)`, with `M` the number
//! of keys. Tokens only ever see location differences, so token outputs are
//! invariant and location outputs equivariant under a joint shift.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, LayerNorm, Mlp, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

/// Widths shared by the attention layers of one model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionDims {
    pub token_dim: usize,
    pub heads: usize,
    pub qk_dim: usize,
    pub value_dim: usize,
    pub scaled: bool,
}

/// Query/key/value weights for all heads, stored head-major along columns,
/// plus the output projection.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub dims: AttentionDims,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: AttentionDims,
        rng: &mut R,
    ) -> Self {
        let AttentionDims {
            token_dim: dz,
            heads,
            qk_dim,
            value_dim,
            ..
        } = dims;
        let b_in = 1.0 / (dz as f64).sqrt();
        let b_out = 1.0 / ((heads * value_dim) as f64).sqrt();
        AttentionParams {
            w_q: store.add(
                format!("{name}.w_q"),
                Tensor::uniform([dz, heads * qk_dim], b_in, rng),
            ),
            w_k: store.add(
                format!("{name}.w_k"),
                Tensor::uniform([dz, heads * qk_dim], b_in, rng),
            ),
            w_v: store.add(
                format!("{name}.w_v"),
                Tensor::uniform([dz, heads * value_dim], b_in, rng),
            ),
            w_o: store.add(
                format!("{name}.w_o"),
                Tensor::uniform([heads * value_dim, dz], b_out, rng),
            ),
            dims,
        }
    }

    fn logit_scale(&self) -> f64 {
        if self.dims.scaled {
            1.0 / (self.dims.qk_dim as f64).sqrt()
        } else {
            1.0
        }
    }

    /// Per-head `[N, M]` dot-product logits between query and key tokens.
    fn head_logits<'t>(&self, p: &Bound<'t>, zq: Var<'t>, zkv: Var<'t>) -> Result<Vec<Var<'t>>> {
        let q = zq.matmul(&p.var(self.w_q))?;
        let k = zkv.matmul(&p.var(self.w_k))?;
        let d = self.dims.qk_dim;
        let scale = self.logit_scale();
        (0..self.dims.heads)
            .map(|h| {
                let qh = q.slice_cols(h * d, (h + 1) * d)?;
                let kh = k.slice_cols(h * d, (h + 1) * d)?;
                let l = qh.matmul(&kh.transpose()?)?;
                Ok(if scale == 1.0 { l } else { l.scale(scale) })
            })
            .collect()
    }

    /// `cat_h(W_h V_h) W_O` for per-head `[N, M]` weight matrices.
    fn combine<'t>(&self, p: &Bound<'t>, weights: &[Var<'t>], zkv: Var<'t>) -> Result<Var<'t>> {
        let v = zkv.matmul(&p.var(self.w_v))?;
        let d = self.dims.value_dim;
        let heads = weights
            .iter()
            .enumerate()
            .map(|(h, w)| w.matmul(&v.slice_cols(h * d, (h + 1) * d)?))
            .collect::<Result<Vec<_>>>()?;
        Var::concat_cols(&heads)?.matmul(&p.var(self.w_o))
    }
}

fn attend<'t>(
    p: &Bound<'t>,
    a: &AttentionParams,
    zq: Var<'t>,
    zkv: Var<'t>,
    mask: Option<&AttentionMask>,
) -> Result<Var<'t>> {
    if zkv.rows() == 0 {
        return Err(Error::Empty("attention keys/values"));
    }
    let bias = match mask {
        Some(m) => {
            if m.rows != zq.rows() || m.cols != zkv.rows() {
                return Err(Error::shape(
                    "attention mask",
                    &[m.rows, m.cols],
                    &[zq.rows(), zkv.rows()],
                ));
            }
            Some(p.constant(m.additive()?))
        }
        None => None,
    };
    let weights = a
        .head_logits(p, zq, zkv)?
        .into_iter()
        .map(|l| match &bias {
            Some(b) => l.add(b)?.softmax(1),
            None => l.softmax(1),
        })
        .collect::<Result<Vec<_>>>()?;
    a.combine(p, &weights, zkv)
}

/// Multi-head self-attention over the rows of `z`.
pub fn mhsa<'t>(p: &Bound<'t>, a: &AttentionParams, z: Var<'t>) -> Result<Var<'t>> {
    if z.rows() == 0 {
        return Err(Error::Empty("mhsa"));
    }
    attend(p, a, z, z, None)
}

/// Multi-head cross-attention: each query row attends all rows of `zkv`.
pub fn mhca<'t>(p: &Bound<'t>, a: &AttentionParams, zq: Var<'t>, zkv: Var<'t>) -> Result<Var<'t>> {
    attend(p, a, zq, zkv, None)
}

/// Self-attention with pre-softmax logits set to `-inf` where `mask` disallows.
pub fn masked_mhsa<'t>(
    p: &Bound<'t>,
    a: &AttentionParams,
    z: Var<'t>,
    mask: &AttentionMask,
) -> Result<Var<'t>> {
    attend(p, a, z, z, Some(mask))
}

/// Row-major `[rows, cols]` grid of allowed attention edges.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub rows: usize,
    pub cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::shape(
                "AttentionMask::new",
                &[rows, cols],
                &[allowed.len()],
            ));
        }
        Ok(AttentionMask {
            rows,
            cols,
            allowed,
        })
    }

    pub fn all(n: usize) -> Self {
        AttentionMask {
            rows: n,
            cols: n,
            allowed: vec![true; n * n],
        }
    }

    /// Stream `[context; targets]`: every row attends the context rows only.
    pub fn context_only(n_context: usize, n_target: usize) -> Self {
        let n = n_context + n_target;
        let allowed = (0..n * n).map(|i| i % n < n_context).collect();
        AttentionMask {
            rows: n,
            cols: n,
            allowed,
        }
    }

    pub fn allows(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    /// `0` where allowed and `-inf` elsewhere.
    pub fn additive(&self) -> Result<Tensor> {
        for r in 0..self.rows {
            if !(0..self.cols).any(|c| self.allows(r, c)) {
                return Err(Error::FullyMaskedRow(r));
            }
        }
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        Tensor::new(vec![self.rows, self.cols], data)
    }
}

/// Attention weights and location-update network for one TE attention layer.
#[derive(Clone, Debug)]
pub struct TeAttentionParams {
    pub attn: AttentionParams,
    /// `R^H x R^{D_x} -> R^H`
    pub rho: Mlp,
    /// `R^H -> R^H`
    pub phi: Mlp,
    pub input_dim: usize,
}

impl TeAttentionParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: AttentionDims,
        input_dim: usize,
        rng: &mut R,
    ) -> Self {
        let attn = AttentionParams::new(store, name, dims, rng);
        let (h, dz) = (dims.heads, dims.token_dim);
        let rho = Mlp::unbiased_output(
            store,
            &format!("{name}.rho"),
            &[h + input_dim, dz, dz, h],
            rng,
        );
        let phi = Mlp::with_hidden(store, &format!("{name}.phi"), h, dz, 2, h, rng);
        TeAttentionParams {
            attn,
            rho,
            phi,
            input_dim,
        }
    }
}

/// Attention weights of a TE layer.
#[derive(Clone, Debug)]
pub struct TeWeights<'t> {
    /// One `[N, M]` row-stochastic matrix per head.
    pub per_head: Vec<Var<'t>>,
    /// The same weights as `[N * M, H]`, pair `(n, m)` on row `n * M + m`.
    pub stacked: Var<'t>,
}

/// Softmax over keys of `rho(dots, x_n - x_m)`. `diffs` is `[N * M, D_x]`,
/// laid out as produced by [`Var::pairwise_diff`].
pub fn te_attention_weights<'t>(
    p: &Bound<'t>,
    te: &TeAttentionParams,
    zq: Var<'t>,
    zkv: Var<'t>,
    diffs: Var<'t>,
) -> Result<TeWeights<'t>> {
    let (n, m) = (zq.rows(), zkv.rows());
    if m == 0 {
        return Err(Error::Empty("te attention keys"));
    }
    if diffs.shape() != [n * m, te.input_dim] {
        return Err(Error::shape(
            "te_attention_weights",
            &diffs.shape(),
            &[n * m, te.input_dim],
        ));
    }
    let mut cols = te
        .attn
        .head_logits(p, zq, zkv)?
        .into_iter()
        .map(|l| l.reshape([n * m, 1]))
        .collect::<Result<Vec<_>>>()?;
    cols.push(diffs);
    let logits = te.rho.forward(p, Var::concat_cols(&cols)?)?;
    let per_head = (0..te.attn.dims.heads)
        .map(|h| logits.slice_cols(h, h + 1)?.reshape([n, m])?.softmax(1))
        .collect::<Result<Vec<_>>>()?;
    let stacked = Var::concat_cols(
        &per_head
            .iter()
            .map(|w| w.reshape([n * m, 1]))
            .collect::<Result<Vec<_>>>()?,
    )?;
    Ok(TeWeights { per_head, stacked })
}

/// Tokens paired with their input locations.
#[derive(Clone, Copy, Debug)]
pub struct Located<'t> {
    pub tokens: Var<'t>,
    pub locations: Var<'t>,
}

impl<'t> Located<'t> {
    pub fn new(tokens: Var<'t>, locations: Var<'t>) -> Result<Self> {
        if tokens.rows() != locations.rows() {
            return Err(Error::shape(
                "Located::new",
                &tokens.shape(),
                &locations.shape(),
            ));
        }
        Ok(Located { tokens, locations })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// TE cross-attention. Query locations move against the key locations only;
/// with `update_locations` off they are returned unchanged.
pub fn te_mhca<'t>(
    p: &Bound<'t>,
    te: &TeAttentionParams,
    queries: Located<'t>,
    keys: Located<'t>,
    update_locations: bool,
) -> Result<Located<'t>> {
    if keys.is_empty() {
        return Err(Error::Empty("te_mhca context"));
    }
    let diffs = queries.locations.pairwise_diff(&keys.locations)?;
    let w = te_attention_weights(p, te, queries.tokens, keys.tokens, diffs)?;
    let tokens = te.attn.combine(p, &w.per_head, keys.tokens)?;
    let locations = if update_locations {
        let (n, m) = (queries.len(), keys.len());
        let strength = te.phi.forward(p, w.stacked)?.sum_cols()?.reshape([n, m])?;
        let pull = queries
            .locations
            .mul_col(&strength.sum_cols()?)?
            .sub(&strength.matmul(&keys.locations)?)?;
        queries.locations.add(&pull.scale(1.0 / m as f64))?
    } else {
        queries.locations
    };
    Ok(Located { tokens, locations })
}

/// TE self-attention over a located token set.
pub fn te_mhsa<'t>(
    p: &Bound<'t>,
    te: &TeAttentionParams,
    set: Located<'t>,
    update_locations: bool,
) -> Result<Located<'t>> {
    if set.is_empty() {
        return Err(Error::Empty("te_mhsa"));
    }
    te_mhca(p, te, set, set, update_locations)
}

/// Pre-norm residual attention block followed by a pre-norm residual MLP.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub norm_attn: LayerNorm,
    pub attn: AttentionParams,
    pub norm_ff: LayerNorm,
    pub ff: Mlp,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: AttentionDims,
        rng: &mut R,
    ) -> Self {
        let dz = dims.token_dim;
        AttentionBlock {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), dz),
            attn: AttentionParams::new(store, &format!("{name}.attn"), dims, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), dz),
            ff: Mlp::with_hidden(store, &format!("{name}.ff"), dz, dz, 2, dz, rng),
        }
    }

    fn feed_forward<'t>(&self, p: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>> {
        z.add(&self.ff.forward(p, self.norm_ff.forward(p, z)?)?)
    }

    pub fn forward_self<'t>(&self, p: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>> {
        let zn = self.norm_attn.forward(p, z)?;
        self.feed_forward(p, z.add(&mhsa(p, &self.attn, zn)?)?)
    }

    pub fn forward_cross<'t>(&self, p: &Bound<'t>, zq: Var<'t>, zkv: Var<'t>) -> Result<Var<'t>> {
        let qn = self.norm_attn.forward(p, zq)?;
        let kvn = self.norm_attn.forward(p, zkv)?;
        self.feed_forward(p, zq.add(&mhca(p, &self.attn, qn, kvn)?)?)
    }

    pub fn forward_masked<'t>(
        &self,
        p: &Bound<'t>,
        z: Var<'t>,
        mask: &AttentionMask,
    ) -> Result<Var<'t>> {
        let zn = self.norm_attn.forward(p, z)?;
        self.feed_forward(p, z.add(&masked_mhsa(p, &self.attn, zn, mask)?)?)
    }
}

/// [`AttentionBlock`] with TE attention. Location updates happen inside the
/// attention sub-block; the MLP sub-block touches tokens only.
#[derive(Clone, Debug)]
pub struct TeAttentionBlock {
    pub norm_attn: LayerNorm,
    pub attn: TeAttentionParams,
    pub norm_ff: LayerNorm,
    pub ff: Mlp,
}

impl TeAttentionBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: AttentionDims,
        input_dim: usize,
        rng: &mut R,
    ) -> Self {
        let dz = dims.token_dim;
        TeAttentionBlock {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), dz),
            attn: TeAttentionParams::new(store, &format!("{name}.attn"), dims, input_dim, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), dz),
            ff: Mlp::with_hidden(store, &format!("{name}.ff"), dz, dz, 2, dz, rng),
        }
    }

    fn finish<'t>(
        &self,
        p: &Bound<'t>,
        residual: Var<'t>,
        attended: Located<'t>,
    ) -> Result<Located<'t>> {
        let z = residual.add(&attended.tokens)?;
        let z = z.add(&self.ff.forward(p, self.norm_ff.forward(p, z)?)?)?;
        Ok(Located {
            tokens: z,
            locations: attended.locations,
        })
    }

    pub fn forward_self<'t>(
        &self,
        p: &Bound<'t>,
        set: Located<'t>,
        update_locations: bool,
    ) -> Result<Located<'t>> {
        let normed = Located {
            tokens: self.norm_attn.forward(p, set.tokens)?,
            ..set
        };
        let out = te_mhsa(p, &self.attn, normed, update_locations)?;
        self.finish(p, set.tokens, out)
    }

    pub fn forward_cross<'t>(
        &self,
        p: &Bound<'t>,
        queries: Located<'t>,
        keys: Located<'t>,
        update_locations: bool,
    ) -> Result<Located<'t>> {
        let q = Located {
            tokens: self.norm_attn.forward(p, queries.tokens)?,
            ..queries
        };
        let k = Located {
            tokens: self.norm_attn.forward(p, keys.tokens)?,
            ..keys
        };
        let out = te_mhca(p, &self.attn, q, k, update_locations)?;
        self.finish(p, queries.tokens, out)
    }
}

/// `f = sum_i b_i (x_i + g(sum_j h(x_i - x_j)))`, the general translation
/// equivariant, permutation invariant set-to-point map. Weights must sum to 1.
pub fn general_te_pi_function(
    store: &ParamStore,
    xs: &Tensor,
    b: &[f64],
    g: &Mlp,
    h: &Mlp,
) -> Result<Vec<f64>> {
    let (n, dx) = (xs.rows(), xs.cols());
    if b.len() != n {
        return Err(Error::shape("general_te_pi_function", &[n], &[b.len()]));
    }
    let total: f64 = b.iter().sum();
    if (total - 1.0).abs() > 1e-10 {
        return Err(Error::Invalid(format!(
            "weights must sum to 1, got {total}"
        )));
    }
    if h.in_dim() != dx || g.out_dim() != dx || g.in_dim() != h.out_dim() {
        return Err(Error::Invalid(
            "g/h widths do not compose with the input dimension".into(),
        ));
    }
    let tape = crate::tensor::Tape::no_grad();
    let p = store.bind(&tape);
    let x = tape.constant(xs.clone());
    let hk = h.out_dim();
    let pair = h.forward(&p, x.pairwise_diff(&x)?)?.value();
    let mut sums = vec![0.0; n * hk];
    for i in 0..n {
        for j in 0..n {
            for k in 0..hk {
                sums[i * hk + k] += pair.get(i * n + j, k);
            }
        }
    }
    let gs = g
        .forward(&p, tape.constant(Tensor::new(vec![n, hk], sums)?))?
        .value();
    let mut f = vec![0.0; dx];
    for i in 0..n {
        for d in 0..dx {
            f[d] += b[i] * (xs.get(i, d) + gs.get(i, d));
        }
    }
    Ok(f)
}
