//! Neural-process encoders and the shared Gaussian decoder.
//!
//! Every variant maps a [`Task`] to independent Gaussian marginals over its
//! targets. Target `n`'s prediction depends only on the context set and
//! `x_t,n`.

mod config;
mod task;

pub use config::{ModelConfig, PseudoLocationInit, PseudoStyle, Variant, DEFAULT_PSEUDO_TOKENS};
pub use task::{Task, TaskMeta};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionBlock, Located, TeAttentionBlock};
use crate::error::{Error, Result};
use crate::nn::{
    gaussian_head, gaussian_log_likelihood, Bound, GaussianPrediction, Mlp, ParamId, ParamStore,
    Predictive,
};
use crate::tensor::{Tape, Tensor, Var};

/// Two-hidden-layer MLP to `2 D_y`, then mean and softplus variance.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub mlp: Mlp,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        in_dim: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        Decoder {
            mlp: Mlp::with_hidden(
                store,
                "decoder",
                in_dim,
                cfg.token_dim,
                2,
                2 * cfg.output_dim,
                rng,
            ),
        }
    }

    pub fn decode<'t>(&self, p: &Bound<'t>, tokens: Var<'t>) -> Result<GaussianPrediction<'t>> {
        gaussian_head(self.mlp.forward(p, tokens)?)
    }
}

struct Inputs<'t> {
    xc: Var<'t>,
    yc: Var<'t>,
    xt: Var<'t>,
}

impl<'t> Inputs<'t> {
    fn new(p: &Bound<'t>, task: &Task) -> Self {
        Inputs {
            xc: p.constant(task.xc.clone()),
            yc: p.constant(task.yc.clone()),
            xt: p.constant(task.xt.clone()),
        }
    }
}

/// Mean-aggregated encoder over `[x_c, y_c]`; decoder sees `[r, x_t]`.
#[derive(Clone, Debug)]
pub struct Cnp {
    pub encoder: Mlp,
    pub decoder: Decoder,
}

impl Cnp {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let dz = cfg.token_dim;
        Cnp {
            encoder: Mlp::with_hidden(
                store,
                "encoder",
                cfg.input_dim + cfg.output_dim,
                dz,
                5,
                dz,
                rng,
            ),
            decoder: Decoder::new(store, dz + cfg.input_dim, cfg, rng),
        }
    }

    /// `mean_n MLP([x_c,n, y_c,n])`, shape `[1, D_z]`.
    pub fn representation<'t>(&self, p: &Bound<'t>, xc: Var<'t>, yc: Var<'t>) -> Result<Var<'t>> {
        self.encoder
            .forward(p, Var::concat_cols(&[xc, yc])?)?
            .mean_rows()
    }

    fn forward<'t>(&self, p: &Bound<'t>, io: &Inputs<'t>) -> Result<GaussianPrediction<'t>> {
        let r = self
            .representation(p, io.xc, io.yc)?
            .repeat_rows(io.xt.rows())?;
        self.decoder.decode(p, Var::concat_cols(&[r, io.xt])?)
    }
}

/// Per-target `mean_m phi([x_t,n - x_c,m, y_c,m])`; decoder sees the
/// representation only.
#[derive(Clone, Debug)]
pub struct Rcnp {
    pub encoder: Mlp,
    pub decoder: Decoder,
}

impl Rcnp {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let dz = cfg.token_dim;
        Rcnp {
            encoder: Mlp::with_hidden(
                store,
                "encoder",
                cfg.input_dim + cfg.output_dim,
                dz,
                5,
                dz,
                rng,
            ),
            decoder: Decoder::new(store, dz, cfg, rng),
        }
    }

    fn forward<'t>(&self, p: &Bound<'t>, io: &Inputs<'t>) -> Result<GaussianPrediction<'t>> {
        let (nt, nc) = (io.xt.rows(), io.xc.rows());
        let diffs = io.xt.pairwise_diff(&io.xc)?;
        let ys = Var::concat_rows(&vec![io.yc; nt])?;
        let r = self
            .encoder
            .forward(p, Var::concat_cols(&[diffs, ys])?)?
            .mean_row_blocks(nc)?;
        self.decoder.decode(p, r)
    }
}

/// `MLP([x, y, 1])` for context points and `MLP([x, 0, 0])` for targets.
#[derive(Clone, Debug)]
pub struct DensityEmbedder {
    pub mlp: Mlp,
}

impl DensityEmbedder {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let width = cfg.input_dim + cfg.output_dim + 1;
        DensityEmbedder {
            mlp: Mlp::with_hidden(
                store,
                "embedder",
                width,
                cfg.token_dim,
                2,
                cfg.token_dim,
                rng,
            ),
        }
    }

    fn context<'t>(&self, p: &Bound<'t>, io: &Inputs<'t>) -> Result<Var<'t>> {
        let ones = p.constant(Tensor::full([io.xc.rows(), 1], 1.0));
        self.mlp
            .forward(p, Var::concat_cols(&[io.xc, io.yc, ones])?)
    }

    fn targets<'t>(&self, p: &Bound<'t>, io: &Inputs<'t>) -> Result<Var<'t>> {
        let zeros = p.constant(Tensor::zeros([io.xt.rows(), io.yc.cols() + 1]));
        self.mlp.forward(p, Var::concat_cols(&[io.xt, zeros])?)
    }
}

/// Each layer: self-attention over the context, then targets cross-attend
/// the updated context. Both use the layer's one set of weights.
#[derive(Clone, Debug)]
pub struct Tnp {
    pub embedder: DensityEmbedder,
    pub blocks: Vec<AttentionBlock>,
    pub decoder: Decoder,
}

impl Tnp {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let embedder = DensityEmbedder::new(store, cfg, rng);
        let blocks = (0..cfg.layers)
            .map(|l| AttentionBlock::new(store, &format!("layer{l}"), cfg.attention_dims(), rng))
            .collect();
        Tnp {
            embedder,
            blocks,
            decoder: Decoder::new(store, cfg.token_dim, cfg, rng),
        }
    }

    /// Final target tokens.
    pub fn encode<'t>(&self, p: &Bound<'t>, zc: Var<'t>, zt: Var<'t>) -> Result<Var<'t>> {
        let (mut zc, mut zt) = (zc, zt);
        for block in &self.blocks {
            zc = block.forward_self(p, zc)?;
            zt = block.forward_cross(p, zt, zc)?;
        }
        Ok(zt)
    }

    fn forward<'t>(&self, p: &Bound<'t>, io: &Inputs<'t>) -> Result<GaussianPrediction<'t>> {
        let zc = self.embedder.context(p, io)?;
        let zt = self.embedder.targets(p, io)?;
        self.decoder.decode(p, self.encode(p, zc, zt)?)
    }
}

/// Learnable standard-normal initial tokens.
fn learnable_tokens<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> ParamId {
    store.add(name, Tensor::randn([rows, cols], rng))
}

#[derive(Clone, Debug)]
enum PseudoLayers<B> {
    Perceiver { layers: Vec<(B, B)>, readout: B },
    Ist { layers: Vec<(B, B)> },
}

fn pseudo_layers<B, R: Rng + ?Sized>(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    rng: &mut R,
    mut make: impl FnMut(&mut ParamStore, &str, &mut R) -> B,
) -> PseudoLayers<B> {
    let layers = (0..cfg.layers)
        .map(|l| {
            let a = make(store, &format!("layer{l}.to_pseudo"), rng);
            let b = match cfg.pseudo_style {
                PseudoStyle::Perceiver => make(store, &format!("layer{l}.pseudo_self"), rng),
                PseudoStyle::Ist => make(store, &format!("layer{l}.from_pseudo"), rng),
            };
            (a, b)
        })
        .collect();
    match cfg.pseudo_style {
        PseudoStyle::Perceiver => PseudoLayers::Perceiver {
            layers,
            readout: make(store, "readout", rng),
        },
        PseudoStyle::Ist => PseudoLayers::Ist { layers },
    }
}

/// Pseudo-token transformer: the context is summarized by `M` learnable
/// tokens, and targets only ever attend those.
#[derive(Clone, Debug)]
pub struct PtTnp {
    pub embedder: DensityEmbedder,
    pub pseudo: ParamId,
    layers: PseudoLayers<AttentionBlock>,
    pub decoder: Decoder,
}

impl PtTnp {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let embedder = DensityEmbedder::new(store, cfg, rng);
        let pseudo = learnable_tokens(
            store,
            "pseudo.tokens",
            cfg.pseudo_tokens,
            cfg.token_dim,
            rng,
        );
        let dims = cfg.attention_dims();
        let layers = pseudo_layers(store, cfg, rng, |s, name, r| {
            AttentionBlock::new(s, name, dims, r)
        });
        PtTnp {
            embedder,
            pseudo,
            layers,
            decoder: Decoder::new(store, cfg.token_dim, cfg, rng),
        }
    }

    fn forward<'t>(&self, p: &Bound<'t>, io: &Inputs<'t>) -> Result<GaussianPrediction<'t>> {
        let mut zc = self.embedder.context(p, io)?;
        let mut zt = self.embedder.targets(p, io)?;
        let mut u = p.var(self.pseudo);
        match &self.layers {
            PseudoLayers::Perceiver { layers, readout } => {
                for (cross, own) in layers {
                    u = cross.forward_cross(p, u, zc)?;
                    u = own.forward_self(p, u)?;
                }
                zt = readout.forward_cross(p, zt, u)?;
            }
            PseudoLayers::Ist { layers } => {
                let last = layers.len() - 1;
                for (i, (to_pseudo, from_pseudo)) in layers.iter().enumerate() {
                    u = to_pseudo.forward_cross(p, u, zc)?;
                    if i < last {
                        zc = from_pseudo.forward_cross(p, zc, u)?;
                    }
                    zt = from_pseudo.forward_cross(p, zt, u)?;
                }
            }
        }
        self.decoder.decode(p, zt)
    }
}

/// Context tokens from outputs only; every target starts from one learnable
/// token. Inputs enter solely through TE attention.
#[derive(Clone, Debug)]
pub struct TeTnp {
    pub embedder: Mlp,
    pub target_token: ParamId,
    pub blocks: Vec<TeAttentionBlock>,
    pub decoder: Decoder,
    location_updates: bool,
}

fn output_embedder<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Mlp {
    Mlp::with_hidden(
        store,
        "embedder",
        cfg.output_dim,
        cfg.token_dim,
        2,
        cfg.token_dim,
        rng,
    )
}

impl TeTnp {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let embedder = output_embedder(store, cfg, rng);
        let target_token = learnable_tokens(store, "target_token", 1, cfg.token_dim, rng);
        let blocks = (0..cfg.layers)
            .map(|l| {
                TeAttentionBlock::new(
                    store,
                    &format!("layer{l}"),
                    cfg.attention_dims(),
                    cfg.input_dim,
                    rng,
                )
            })
            .collect();
        TeTnp {
            embedder,
            target_token,
            blocks,
            decoder: Decoder::new(store, cfg.token_dim, cfg, rng),
            location_updates: cfg.location_updates,
        }
    }

    fn forward<'t>(&self, p: &Bound<'t>, io: &Inputs<'t>) -> Result<GaussianPrediction<'t>> {
        let mut ctx = Located::new(self.embedder.forward(p, io.yc)?, io.xc)?;
        let mut tgt = Located::new(p.var(self.target_token).repeat_rows(io.xt.rows())?, io.xt)?;
        let last = self.blocks.len() - 1;
        for (i, block) in self.blocks.iter().enumerate() {
            ctx = block.forward_self(p, ctx, self.location_updates)?;
            tgt = block.forward_cross(p, tgt, ctx, self.location_updates && i < last)?;
        }
        self.decoder.decode(p, tgt.tokens)
    }
}

/// Pseudo-token TE transformer. Pseudo-locations are placed relative to the
/// context inputs so the whole map stays translation equivariant.
#[derive(Clone, Debug)]
pub struct TePtTnp {
    pub embedder: Mlp,
    pub target_token: ParamId,
    pub pseudo: ParamId,
    pub pseudo_offsets: ParamId,
    pub psi_query: ParamId,
    pub psi_key: ParamId,
    layers: PseudoLayers<TeAttentionBlock>,
    pub decoder: Decoder,
    location_updates: bool,
    init: PseudoLocationInit,
    scaled: bool,
}

impl TePtTnp {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (dz, m) = (cfg.token_dim, cfg.pseudo_tokens);
        let embedder = output_embedder(store, cfg, rng);
        let target_token = learnable_tokens(store, "target_token", 1, dz, rng);
        let pseudo = learnable_tokens(store, "pseudo.tokens", m, dz, rng);
        let pseudo_offsets = learnable_tokens(store, "pseudo.locations", m, cfg.input_dim, rng);
        let bound = 1.0 / (dz as f64).sqrt();
        let psi_query = store.add(
            "pseudo.psi.w_q",
            Tensor::uniform([dz, cfg.qk_dim], bound, rng),
        );
        let psi_key = store.add(
            "pseudo.psi.w_k",
            Tensor::uniform([dz, cfg.qk_dim], bound, rng),
        );
        let (dims, dx) = (cfg.attention_dims(), cfg.input_dim);
        let layers = pseudo_layers(store, cfg, rng, |s, name, r| {
            TeAttentionBlock::new(s, name, dims, dx, r)
        });
        TePtTnp {
            embedder,
            target_token,
            pseudo,
            pseudo_offsets,
            psi_query,
            psi_key,
            layers,
            decoder: Decoder::new(store, dz, cfg, rng),
            location_updates: cfg.location_updates,
            init: cfg.pseudo_locations,
            scaled: cfg.scaled_logits,
        }
    }

    /// `v_m = v0_m + sum_n psi(u_m, z_n) x_n` with rows of `psi` summing to 1.
    pub fn pseudo_locations<'t>(&self, p: &Bound<'t>, zc: Var<'t>, xc: Var<'t>) -> Result<Var<'t>> {
        let v0 = p.var(self.pseudo_offsets);
        let m = v0.rows();
        match self.init {
            PseudoLocationInit::Attention => {
                let q = p.var(self.pseudo).matmul(&p.var(self.psi_query))?;
                let k = zc.matmul(&p.var(self.psi_key))?;
                let mut logits = q.matmul(&k.transpose()?)?;
                if self.scaled {
                    logits = logits.scale(1.0 / (q.cols() as f64).sqrt());
                }
                v0.add(&logits.softmax(1)?.matmul(&xc)?)
            }
            PseudoLocationInit::Uniform => v0.add(&xc.mean_rows()?.repeat_rows(m)?),
            PseudoLocationInit::Fixed => Ok(v0),
        }
    }

    fn forward<'t>(
        &self,
        p: &Bound<'t>,
        io: &Inputs<'t>,
    ) -> Result<(GaussianPrediction<'t>, Var<'t>)> {
        let zc = self.embedder.forward(p, io.yc)?;
        let v = self.pseudo_locations(p, zc, io.xc)?;
        let mut pseudo = Located::new(p.var(self.pseudo), v)?;
        let mut ctx = Located::new(zc, io.xc)?;
        let mut tgt = Located::new(p.var(self.target_token).repeat_rows(io.xt.rows())?, io.xt)?;
        let upd = self.location_updates;
        match &self.layers {
            PseudoLayers::Perceiver { layers, readout } => {
                for (cross, own) in layers {
                    pseudo = cross.forward_cross(p, pseudo, ctx, upd)?;
                    pseudo = own.forward_self(p, pseudo, upd)?;
                }
                tgt = readout.forward_cross(p, tgt, pseudo, false)?;
            }
            PseudoLayers::Ist { layers } => {
                let last = layers.len() - 1;
                for (i, (to_pseudo, from_pseudo)) in layers.iter().enumerate() {
                    pseudo = to_pseudo.forward_cross(p, pseudo, ctx, upd)?;
                    if i < last {
                        ctx = from_pseudo.forward_cross(p, ctx, pseudo, upd)?;
                    }
                    tgt = from_pseudo.forward_cross(p, tgt, pseudo, upd && i < last)?;
                }
            }
        }
        Ok((self.decoder.decode(p, tgt.tokens)?, v))
    }
}

#[derive(Clone, Debug)]
enum Net {
    Cnp(Cnp),
    Rcnp(Rcnp),
    Tnp(Tnp),
    PtTnp(PtTnp),
    TeTnp(TeTnp),
    TePtTnp(TePtTnp),
}

/// A configured network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    net: Net,
}

impl Model {
    /// Builds the architecture and draws initial parameters from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let net = match config.variant {
            Variant::Cnp => Net::Cnp(Cnp::new(s, &config, &mut rng)),
            Variant::Rcnp => Net::Rcnp(Rcnp::new(s, &config, &mut rng)),
            Variant::Tnp => Net::Tnp(Tnp::new(s, &config, &mut rng)),
            Variant::PtTnp => Net::PtTnp(PtTnp::new(s, &config, &mut rng)),
            Variant::TeTnp => Net::TeTnp(TeTnp::new(s, &config, &mut rng)),
            Variant::TePtTnp => Net::TePtTnp(TePtTnp::new(s, &config, &mut rng)),
        };
        Ok(Model {
            config,
            params: store,
            net,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Predictive marginals for every target, recorded on `p`'s tape.
    pub fn forward<'t>(&self, p: &Bound<'t>, task: &Task) -> Result<GaussianPrediction<'t>> {
        task.validate(self.config.input_dim, self.config.output_dim)?;
        let io = Inputs::new(p, task);
        match &self.net {
            Net::Cnp(m) => m.forward(p, &io),
            Net::Rcnp(m) => m.forward(p, &io),
            Net::Tnp(m) => m.forward(p, &io),
            Net::PtTnp(m) => m.forward(p, &io),
            Net::TeTnp(m) => m.forward(p, &io),
            Net::TePtTnp(m) => Ok(m.forward(p, &io)?.0),
        }
    }

    /// Sum over targets of the log predictive density, as a scalar.
    pub fn log_likelihood<'t>(&self, p: &Bound<'t>, task: &Task) -> Result<Var<'t>> {
        let pred = self.forward(p, task)?;
        Ok(gaussian_log_likelihood(p.constant(task.yt.clone()), &pred)?.sum())
    }

    /// Detached predictions without recording gradients.
    pub fn predict(&self, task: &Task) -> Result<Predictive> {
        let tape = Tape::no_grad();
        Ok(self.forward(&self.params.bind(&tape), task)?.detach())
    }

    /// Per-target log densities `[N_t, 1]`, without recording gradients.
    pub fn target_log_likelihoods(&self, task: &Task) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let p = self.params.bind(&tape);
        let pred = self.forward(&p, task)?;
        Ok(gaussian_log_likelihood(p.constant(task.yt.clone()), &pred)?.value())
    }

    /// Initial pseudo-locations of a TE-PT-TNP for `task`, `[M, D_x]`.
    pub fn pseudo_locations(&self, task: &Task) -> Result<Tensor> {
        let Net::TePtTnp(m) = &self.net else {
            return Err(Error::Invalid(format!(
                "{} has no pseudo-locations",
                self.variant()
            )));
        };
        task.validate(self.config.input_dim, self.config.output_dim)?;
        let tape = Tape::no_grad();
        let p = self.params.bind(&tape);
        let zc = m.embedder.forward(&p, p.constant(task.yc.clone()))?;
        Ok(m.pseudo_locations(&p, zc, p.constant(task.xc.clone()))?
            .value())
    }

    /// The decoder shared by all variants.
    pub fn decoder(&self) -> &Decoder {
        match &self.net {
            Net::Cnp(m) => &m.decoder,
            Net::Rcnp(m) => &m.decoder,
            Net::Tnp(m) => &m.decoder,
            Net::PtTnp(m) => &m.decoder,
            Net::TeTnp(m) => &m.decoder,
            Net::TePtTnp(m) => &m.decoder,
        }
    }

    pub fn as_cnp(&self) -> Option<&Cnp> {
        match &self.net {
            Net::Cnp(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_rcnp(&self) -> Option<&Rcnp> {
        match &self.net {
            Net::Rcnp(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_tnp(&self) -> Option<&Tnp> {
        match &self.net {
            Net::Tnp(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_pt_tnp(&self) -> Option<&PtTnp> {
        match &self.net {
            Net::PtTnp(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_te_tnp(&self) -> Option<&TeTnp> {
        match &self.net {
            Net::TeTnp(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_te_pt_tnp(&self) -> Option<&TePtTnp> {
        match &self.net {
            Net::TePtTnp(m) => Some(m),
            _ => None,
        }
    }
}
