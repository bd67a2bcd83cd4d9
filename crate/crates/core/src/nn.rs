//! Parameter storage and the small network pieces every model shares.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(
            self.values[id.0].shape(),
            value.shape(),
            "parameter shape change"
        );
        self.values[id.0] = value;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
            tape,
        }
    }
}

/// Parameters of a [`ParamStore`] bound to one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
    tape: &'t Tape,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Gradients aligned with the store order (zeros where unused).
    pub fn grads(&self, g: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| g.wrt(*v)).collect()
    }
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights and bias uniform in `[-1/sqrt(in), 1/sqrt(in)]`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weight = store.add(
            format!("{name}.w"),
            Tensor::uniform([in_dim, out_dim], bound, rng),
        );
        let bias = store.add(format!("{name}.b"), Tensor::uniform([out_dim], bound, rng));
        Linear {
            weight,
            bias: Some(bias),
            in_dim,
            out_dim,
        }
    }

    /// Weights only.
    pub fn unbiased<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weight = store.add(
            format!("{name}.w"),
            Tensor::uniform([in_dim, out_dim], bound, rng),
        );
        Linear {
            weight,
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        match self.bias {
            Some(b) => x.affine(&p.var(self.weight), &p.var(b)),
            None => x.matmul(&p.var(self.weight)),
        }
    }
}

/// Multi-layer perceptron with rectifier activations between layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    /// Like [`Mlp::new`] but the output layer has no bias.
    pub fn unbiased_output<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        rng: &mut R,
    ) -> Self {
        let mut mlp = Self::new(store, name, &widths[..widths.len() - 1], rng);
        let i = widths.len() - 2;
        mlp.layers.push(Linear::unbiased(
            store,
            &format!("{name}.{i}"),
            widths[i],
            widths[i + 1],
            rng,
        ));
        mlp
    }

    /// Input, `hidden_layers` hidden layers of width `hidden`, output.
    pub fn with_hidden<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        hidden_layers: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut widths = vec![in_dim];
        widths.extend(std::iter::repeat_n(hidden, hidden_layers));
        widths.push(out_dim);
        Self::new(store, name, &widths, rng)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    /// Applies the network to every row of `x` (`[..., in] -> [..., out]`).
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.last() != Some(&self.in_dim()) {
            return Err(Error::shape("mlp_forward", &shape, &[self.in_dim()]));
        }
        let lead: Vec<usize> = shape[..shape.len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut h = if shape.len() == 2 {
            x
        } else {
            x.reshape([rows, self.in_dim()])?
        };
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(p, h)?;
            if i < last {
                h = h.relu();
            }
        }
        if shape.len() == 2 {
            Ok(h)
        } else {
            let mut out_shape = lead;
            out_shape.push(self.out_dim());
            h.reshape(out_shape)
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row normalization followed by a learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full([dim], 1.0)),
            shift: store.add(format!("{name}.shift"), Tensor::zeros([dim])),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        layer_norm(x, p.var(self.gain), p.var(self.shift))
    }
}

/// `gain * (x - mean) / sqrt(var + 1e-5) + shift` over the trailing axis.
pub fn layer_norm<'t>(x: Var<'t>, gain: Var<'t>, shift: Var<'t>) -> Result<Var<'t>> {
    x.normalize_rows(LAYER_NORM_EPS)?
        .mul_row(&gain)?
        .add_row(&shift)
}

/// Added to every softplus variance.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Heteroscedastic Gaussian marginals over targets.
#[derive(Clone, Copy, Debug)]
pub struct GaussianPrediction<'t> {
    pub mean: Var<'t>,
    pub var: Var<'t>,
}

/// Detached predictive parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictive {
    pub mean: Tensor,
    pub var: Tensor,
}

impl GaussianPrediction<'_> {
    pub fn detach(&self) -> Predictive {
        Predictive {
            mean: self.mean.value(),
            var: self.var.value(),
        }
    }
}

/// Splits a `[N, 2 D_y]` decoder output into mean and softplus variance.
pub fn gaussian_head(raw: Var<'_>) -> Result<GaussianPrediction<'_>> {
    let width = raw.cols();
    if raw.shape().len() != 2 || width % 2 != 0 {
        return Err(Error::Invalid(format!(
            "decoder output width must be even (mean and variance halves), got {width}"
        )));
    }
    let d = width / 2;
    Ok(GaussianPrediction {
        mean: raw.slice_cols(0, d)?,
        var: raw
            .slice_cols(d, width)?
            .softplus()
            .add_scalar(VARIANCE_FLOOR),
    })
}

/// Log density of each row of `y` under independent Gaussians, summed over
/// output dimensions: `[N, D_y] -> [N, 1]`.
pub fn gaussian_log_likelihood<'t>(y: Var<'t>, pred: &GaussianPrediction<'t>) -> Result<Var<'t>> {
    let var = pred.var.value();
    if let Some(bad) = var.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("predictive variance {bad}")));
    }
    if let Some(bad) = var.data().iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Invalid(format!(
            "non-positive predictive variance {bad}"
        )));
    }
    let resid = y.sub(&pred.mean)?;
    let quad = resid.square().div(&pred.var)?.scale(0.5);
    let log_norm = pred.var.scale(2.0 * PI).ln().scale(0.5);
    log_norm.add(&quad)?.neg().sum_cols()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weight_mlp_outputs_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 4, 2], &mut rng);
        for l in &mlp.layers {
            store.set(l.weight, Tensor::zeros([l.in_dim, l.out_dim]));
        }
        store.set(
            mlp.layers[1].bias.unwrap(),
            Tensor::new([2], vec![0.7, -1.3]).unwrap(),
        );
        let tape = Tape::no_grad();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::randn([5, 3], &mut rng));
        let out = mlp.forward(&p, x).unwrap().value();
        for r in 0..5 {
            assert_eq!(out.row(r), &[0.7, -1.3]);
        }
    }

    #[test]
    fn identity_linear_layer_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "id", &[3, 3], &mut rng);
        store.set(mlp.layers[0].weight, Tensor::eye(3));
        store.set(mlp.layers[0].bias.unwrap(), Tensor::zeros([3]));
        let tape = Tape::no_grad();
        let p = store.bind(&tape);
        let x = Tensor::randn([4, 3], &mut rng);
        let out = mlp.forward(&p, tape.constant(x.clone())).unwrap().value();
        assert_eq!(out, x);
    }

    #[test]
    fn mlp_rejects_wrong_width_and_handles_leading_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 5, 2], &mut rng);
        let tape = Tape::no_grad();
        let p = store.bind(&tape);
        assert!(mlp
            .forward(&p, tape.constant(Tensor::zeros([4, 2])))
            .is_err());
        let out = mlp
            .forward(&p, tape.constant(Tensor::zeros([2, 4, 3])))
            .unwrap();
        assert_eq!(out.shape(), vec![2, 4, 2]);
    }

    #[test]
    fn softplus_head_values() {
        let tape = Tape::no_grad();
        let raw = tape.constant(Tensor::from_rows(&[&[0.3, 0.0], &[-1.0, -40.0]]));
        let pred = gaussian_head(raw).unwrap().detach();
        assert_eq!(pred.mean.data(), &[0.3, -1.0]);
        assert!((pred.var.data()[0] - 2f64.ln()).abs() < 1e-7);
        let tiny = pred.var.data()[1] - VARIANCE_FLOOR;
        assert!(tiny > 0.0 && tiny < 1e-15, "{tiny}");
    }

    #[test]
    fn odd_decoder_width_rejected() {
        let tape = Tape::no_grad();
        let raw = tape.constant(Tensor::zeros([2, 3]));
        assert!(gaussian_head(raw).is_err());
    }

    #[test]
    fn variance_strictly_positive_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::no_grad();
        let raw = tape.constant(Tensor::randn([50_000, 2], &mut rng).map(|v| 40.0 * v));
        let pred = gaussian_head(raw).unwrap().detach();
        assert_eq!(pred.var.numel(), 50_000);
        assert!(pred.var.data().iter().all(|&v| v > 0.0));
        let raw = tape.constant(Tensor::randn([50_000, 2], &mut rng));
        assert!(gaussian_head(raw)
            .unwrap()
            .detach()
            .var
            .data()
            .iter()
            .all(|&v| v > 0.0));
    }

    #[test]
    fn log_likelihood_analytic_values() {
        let tape = Tape::no_grad();
        let y = tape.constant(Tensor::column(&[0.0, 1.0]));
        let pred = GaussianPrediction {
            mean: tape.constant(Tensor::column(&[0.0, 0.0])),
            var: tape.constant(Tensor::column(&[1.0, 1.0])),
        };
        let ll = gaussian_log_likelihood(y, &pred).unwrap().value();
        let half_log_2pi = 0.5 * (2.0 * PI).ln();
        assert!((ll.data()[0] + half_log_2pi).abs() < 1e-15);
        assert!((ll.data()[0] + 0.918939).abs() < 1e-6);
        assert!((ll.data()[1] + half_log_2pi + 0.5).abs() < 1e-15);
        assert!((ll.data()[1] + 1.418939).abs() < 1e-6);
    }

    #[test]
    fn log_likelihood_guards_non_positive_variance() {
        let tape = Tape::no_grad();
        let pred = GaussianPrediction {
            mean: tape.constant(Tensor::column(&[0.0])),
            var: tape.constant(Tensor::column(&[0.0])),
        };
        let y = tape.constant(Tensor::column(&[0.0]));
        assert!(gaussian_log_likelihood(y, &pred).is_err());
    }
}
