use super::ModelError;
use std::fmt::Write as _;

/// Dense activation tensor in height × width × channel order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn new(shape: [usize; 3], data: Vec<f64>) -> Result<Self, ModelError> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(ModelError::Shape(format!(
                "{} values for shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.shape[1] + x) * self.shape[2] + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn argmax(&self) -> usize {
        self.data
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            })
            .0
    }

    /// Parse the fixture format: an optional `#` comment block, a
    /// `shape H W C` line, then H·W·C whitespace-separated reals in HWC order.
    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let mut shape = None;
        let mut data = Vec::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("shape") {
                let dims: Vec<usize> = rest
                    .split_whitespace()
                    .map(|t| t.parse())
                    .collect::<Result<_, _>>()
                    .map_err(|e| ModelError::Malformed(format!("bad shape: {e}")))?;
                let dims: [usize; 3] = dims
                    .try_into()
                    .map_err(|_| ModelError::Malformed("shape needs three dimensions".into()))?;
                shape = Some(dims);
                continue;
            }
            for tok in line.split_whitespace() {
                data.push(
                    tok.parse::<f64>()
                        .map_err(|e| ModelError::Malformed(format!("bad value '{tok}': {e}")))?,
                );
            }
        }
        let shape = shape.ok_or_else(|| ModelError::Malformed("missing shape line".into()))?;
        Tensor::new(shape, data)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "shape {} {} {}\n",
            self.shape[0], self.shape[1], self.shape[2]
        );
        for row in self
            .data
            .chunks(self.shape[2].max(1) * self.shape[1].max(1))
        {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }
}
