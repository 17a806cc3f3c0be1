use super::{
    adapter_forward, projection_forward, Binding, ImageEncoderSpec, ParamSet, TextEncoderSpec,
    ADAPTER_WEIGHT, PROJ_WEIGHT,
};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Image encoder plus, for students, the channel adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTower {
    pub spec: ImageEncoderSpec,
    pub params: ParamSet,
}

/// Text encoder plus, for students, the projection head.
#[derive(Debug, Clone, PartialEq)]
pub struct TextTower {
    pub spec: TextEncoderSpec,
    pub params: ParamSet,
}

fn stack_rows(rows: &[Vec<f64>], width: usize) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("empty image batch".into()));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != width) {
        return Err(Error::shape(
            "image batch",
            format!("image of length {} for input width {width}", r.len()),
        ));
    }
    Tensor::new(&[rows.len(), width], rows.concat())
}

impl ImageTower {
    pub fn has_adapter(&self) -> bool {
        self.params.contains(ADAPTER_WEIGHT)
    }

    /// Channel width of the emitted feature maps.
    pub fn out_width(&self) -> usize {
        match self.params.get(ADAPTER_WEIGHT) {
            Ok(w) => w.cols(),
            Err(_) => self.spec.channels,
        }
    }

    /// (batch · positions) × out_width feature rows.
    pub fn feature_maps(&self, g: &mut Graph, b: &Binding, images: Var) -> Result<Var> {
        let f = self.spec.forward(g, b, images)?;
        if self.has_adapter() {
            adapter_forward(g, b, f)
        } else {
            Ok(f)
        }
    }

    /// batch × out_width, mean over positions.
    pub fn pooled(&self, g: &mut Graph, b: &Binding, images: Var) -> Result<Var> {
        let f = self.feature_maps(g, b, images)?;
        g.mean_row_groups(f, self.spec.positions)
    }

    pub fn batch_tensor(&self, images: &[Vec<f64>]) -> Result<Tensor> {
        stack_rows(images, self.spec.input_dim)
    }

    /// Untraced pooled embeddings, optionally l2-normalized.
    pub fn embed(&self, images: &[Vec<f64>], normalize: bool) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let x = g.constant(self.batch_tensor(images)?);
        let mut out = self.pooled(&mut g, &b, x)?;
        if normalize {
            out = g.l2_normalize_rows(out)?;
        }
        Ok(g.value(out).clone())
    }
}

impl TextTower {
    pub fn has_projection(&self) -> bool {
        self.params.contains(PROJ_WEIGHT)
    }

    pub fn out_width(&self) -> usize {
        match self.params.get(PROJ_WEIGHT) {
            Ok(w) => w.cols(),
            Err(_) => self.spec.output_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, sequences: &[Vec<usize>]) -> Result<Var> {
        let w = self.spec.forward(g, b, sequences)?;
        if self.has_projection() {
            projection_forward(g, b, w)
        } else {
            Ok(w)
        }
    }

    pub fn embed(&self, sequences: &[Vec<usize>], normalize: bool) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let mut out = self.forward(&mut g, &b, sequences)?;
        if normalize {
            out = g.l2_normalize_rows(out)?;
        }
        Ok(g.value(out).clone())
    }
}
