use crate::error::{Error, Result};

/// Run-wide scalar precision. Storage is always `f64`; in `F32` mode every
/// op output (and leaf) is rounded through `f32` so a 32-bit run sees 32-bit
/// values everywhere while 64-bit mode keeps full headroom for gradient
/// checks. Modes are never mixed within one graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Precision {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Precision {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }

    pub fn round_slice(self, data: &mut [f64]) {
        if self == Precision::F32 {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!(
                "unknown precision '{other}' (expected f32 or f64)"
            ))),
        }
    }
}

/// Dense row-major tensor with an optional gradient slot.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument {
                op: "tensor",
                msg: format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data, grad: None, requires_grad })
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], grad: None, requires_grad }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], grad: None, requires_grad: false }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows/cols accessors for the 2-D case most ops work in.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::InvalidArgument {
                op,
                msg: format!("expected 2-D tensor, got shape {:?}", self.shape),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
