use crate::data::KernelSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where a task came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskMeta {
    pub kernel: Option<KernelSpec>,
    pub seed: u64,
    pub index: u64,
    /// Total input shift applied since sampling.
    pub shift: f64,
}

/// One regression problem: context pairs to condition on, target pairs to
/// predict. Inputs and outputs are stored one point per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub xc: Tensor,
    pub yc: Tensor,
    pub xt: Tensor,
    pub yt: Tensor,
    pub meta: TaskMeta,
}

impl Task {
    pub fn new(xc: Tensor, yc: Tensor, xt: Tensor, yt: Tensor) -> Result<Self> {
        let t = Task {
            xc,
            yc,
            xt,
            yt,
            meta: TaskMeta::default(),
        };
        t.validate(t.xc.cols(), t.yc.cols())?;
        Ok(t)
    }

    pub fn num_context(&self) -> usize {
        self.xc.rows()
    }

    pub fn num_targets(&self) -> usize {
        self.xt.rows()
    }

    /// Checks counts and widths against a model's input/output dimensions.
    pub fn validate(&self, input_dim: usize, output_dim: usize) -> Result<()> {
        for (name, m) in [
            ("xc", &self.xc),
            ("yc", &self.yc),
            ("xt", &self.xt),
            ("yt", &self.yt),
        ] {
            if m.ndim() != 2 {
                return Err(Error::Invalid(format!(
                    "{name} must be a matrix, got shape {:?}",
                    m.shape()
                )));
            }
        }
        if self.num_context() == 0 {
            return Err(Error::Empty("context set"));
        }
        if self.num_targets() == 0 {
            return Err(Error::Empty("target set"));
        }
        if self.yc.rows() != self.xc.rows() {
            return Err(Error::shape(
                "task context",
                self.xc.shape(),
                self.yc.shape(),
            ));
        }
        if self.yt.rows() != self.xt.rows() {
            return Err(Error::shape(
                "task targets",
                self.xt.shape(),
                self.yt.shape(),
            ));
        }
        if self.xc.cols() != input_dim || self.xt.cols() != input_dim {
            return Err(Error::shape(
                "task inputs",
                self.xt.shape(),
                &[self.xt.rows(), input_dim],
            ));
        }
        if self.yc.cols() != output_dim || self.yt.cols() != output_dim {
            return Err(Error::shape(
                "task outputs",
                self.yt.shape(),
                &[self.yt.rows(), output_dim],
            ));
        }
        Ok(())
    }

    /// Reorders context points.
    pub fn permute_context(&self, perm: &[usize]) -> Task {
        Task {
            xc: self.xc.permute_rows(perm),
            yc: self.yc.permute_rows(perm),
            ..self.clone()
        }
    }

    /// Reorders target points.
    pub fn permute_targets(&self, perm: &[usize]) -> Task {
        Task {
            xt: self.xt.permute_rows(perm),
            yt: self.yt.permute_rows(perm),
            ..self.clone()
        }
    }
}
