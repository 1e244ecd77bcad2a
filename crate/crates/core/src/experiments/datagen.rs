//! Synthetic memorization datasets. Tokens are iid `U(0,1)^d` plus sinusoidal
//! positional encodings: the query carries position 0, context row `i`
//! position `i + 1`.
//!
//! Classification labels are uniform classes stored one-hot; regression
//! labels are a single `U(0,1)` value.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{arg_err, Result};
use crate::model::{sinusoidal_positional_encoding, Dataset, Example, Task};
use crate::numerics::{axpy, Matrix};
use crate::random::{seeded, uniform_matrix, uniform_vec};

fn check(n: usize, d: usize, t: usize) -> Result<()> {
    if t == 0 || n == 0 {
        return Err(arg_err!("need T >= 1 and n >= 1"));
    }
    if n >= d {
        return Err(arg_err!("context length n={n} must be below d={d}"));
    }
    Ok(())
}

fn label<R: Rng + ?Sized>(rng: &mut R, task: Task) -> Vec<f64> {
    match task {
        Task::Classification { num_classes } => {
            let mut y = vec![0.0; num_classes];
            y[rng.random_range(0..num_classes)] = 1.0;
            y
        }
        Task::Regression => vec![rng.random::<f64>()],
    }
}

fn encode(pe: &Matrix, mut context: Matrix, mut query: Vec<f64>) -> (Matrix, Vec<f64>) {
    axpy(1.0, pe.row(0), &mut query);
    for i in 0..context.rows() {
        axpy(1.0, pe.row(i + 1), context.row_mut(i));
    }
    (context, query)
}

/// One context shared by all examples; queries vary.
pub fn gen_shared_context_dataset(t: usize, n: usize, d: usize, task: Task, seed: u64) -> Result<Dataset> {
    check(n, d, t)?;
    let pe = sinusoidal_positional_encoding(n + 1, d)?;
    let mut rng = seeded(seed);
    let shared = uniform_matrix(&mut rng, n, d);
    let examples = (0..t)
        .map(|_| {
            let (context, query) = encode(&pe, shared.clone(), uniform_vec(&mut rng, d));
            Example {
                context,
                query,
                label: label(&mut rng, task),
            }
        })
        .collect();
    Dataset::new(examples, Some(task))
}

/// Independent tokens everywhere.
pub fn gen_general_position_dataset(t: usize, n: usize, d: usize, task: Task, seed: u64) -> Result<Dataset> {
    check(n, d, t)?;
    let pe = sinusoidal_positional_encoding(n + 1, d)?;
    let mut rng = seeded(seed);
    let examples = (0..t)
        .map(|_| {
            let context = uniform_matrix(&mut rng, n, d);
            let (context, query) = encode(&pe, context, uniform_vec(&mut rng, d));
            Example {
                context,
                query,
                label: label(&mut rng, task),
            }
        })
        .collect();
    Dataset::new(examples, Some(task))
}

/// All tokens of a dataset (queries first, then context rows in order).
pub fn all_tokens(data: &Dataset) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = data.examples().iter().map(|e| e.query.clone()).collect();
    for ex in data.examples() {
        out.extend(ex.context.row_iter().map(|r| r.to_vec()));
    }
    out
}
