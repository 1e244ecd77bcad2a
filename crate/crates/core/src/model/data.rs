use alloc::vec::Vec;

use crate::error::{arg_err, dim_err, Result};
use crate::numerics::Matrix;

/// One training triple: `n x d` context, `d` query, `d_out` label.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub context: Matrix,
    pub query: Vec<f64>,
    pub label: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatasetDims {
    #[cfg_attr(feature = "serde", serde(rename = "T"))]
    pub t: usize,
    pub n: usize,
    pub d: usize,
    pub d_out: usize,
}

/// What the labels mean. Classification labels are stored one-hot, so
/// `d_out` equals the number of classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Task {
    Classification { num_classes: usize },
    Regression,
}

impl Task {
    /// Parses `cls:<k>` or `reg`.
    pub fn parse(s: &str) -> Result<Task> {
        if s == "reg" || s == "regression" {
            return Ok(Task::Regression);
        }
        if let Some(k) = s.strip_prefix("cls:") {
            let num_classes: usize = k.parse().map_err(|_| arg_err!("bad class count in task {s:?}"))?;
            if num_classes < 2 {
                return Err(arg_err!("classification needs at least two classes"));
            }
            return Ok(Task::Classification { num_classes });
        }
        Err(arg_err!("unknown task {s:?}; expected cls:<k> or reg"))
    }

    pub fn label_width(&self) -> Option<usize> {
        match self {
            Task::Classification { num_classes } => Some(*num_classes),
            Task::Regression => None,
        }
    }
}

impl core::fmt::Display for Task {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Task::Classification { num_classes } => write!(f, "cls:{num_classes}"),
            Task::Regression => write!(f, "reg"),
        }
    }
}

/// A non-empty set of examples sharing `n`, `d` and `d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<Example>,
    dims: DatasetDims,
    task: Option<Task>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, task: Option<Task>) -> Result<Self> {
        let first = examples.first().ok_or_else(|| arg_err!("dataset needs at least one example"))?;
        let (n, d) = first.context.shape();
        let d_out = first.label.len();
        if n == 0 || d == 0 {
            return Err(dim_err!("empty context in example 0"));
        }
        for (t, ex) in examples.iter().enumerate() {
            if ex.context.shape() != (n, d) || ex.query.len() != d || ex.label.len() != d_out {
                return Err(dim_err!(
                    "example {t} has context {}x{}, query {}, label {}; expected {n}x{d}, {d}, {d_out}",
                    ex.context.rows(),
                    ex.context.cols(),
                    ex.query.len(),
                    ex.label.len()
                ));
            }
            if !ex.context.is_finite() || !ex.query.iter().chain(&ex.label).all(|x| x.is_finite()) {
                return Err(crate::Error::NonFinite);
            }
        }
        if let Some(w) = task.and_then(|t| t.label_width()) {
            if w != d_out {
                return Err(dim_err!("classification with {w} classes needs one-hot labels of width {w}"));
            }
        }
        Ok(Self {
            dims: DatasetDims {
                t: examples.len(),
                n,
                d,
                d_out,
            },
            examples,
            task,
        })
    }

    pub fn dims(&self) -> DatasetDims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn task(&self) -> Option<Task> {
        self.task
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn example(&self, t: usize) -> &Example {
        &self.examples[t]
    }

    pub fn queries(&self) -> Vec<&[f64]> {
        self.examples.iter().map(|e| e.query.as_slice()).collect()
    }

    /// Queries stacked as a `T x d` matrix.
    pub fn query_matrix(&self) -> Matrix {
        Matrix::from_rows(&self.queries()).expect("queries share d")
    }

    pub fn label_matrix(&self) -> Matrix {
        let labels: Vec<&[f64]> = self.examples.iter().map(|e| e.label.as_slice()).collect();
        Matrix::from_rows(&labels).expect("labels share d_out")
    }

    /// Same inputs, new labels.
    pub fn with_labels(&self, labels: Vec<Vec<f64>>, task: Option<Task>) -> Result<Dataset> {
        if labels.len() != self.len() {
            return Err(dim_err!("expected {} labels, got {}", self.len(), labels.len()));
        }
        let examples = self
            .examples
            .iter()
            .zip(labels)
            .map(|(ex, label)| Example {
                context: ex.context.clone(),
                query: ex.query.clone(),
                label,
            })
            .collect();
        Dataset::new(examples, task)
    }

    /// Examples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        Dataset::new(idx.iter().map(|&i| self.examples[i].clone()).collect(), self.task)
    }

    /// Class index of example `t` (argmax of its label).
    pub fn class_of(&self, t: usize) -> usize {
        argmax(&self.examples[t].label)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}
