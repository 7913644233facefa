//! Fixed-window feedforward language model:
//! `logits = concat(E[c_1], ..., E[c_n]) · W + b`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::io::{fmt_f64, header_fields, header_value, read_text, write_text};
use crate::matrix::Matrix;

pub const INIT_SCALE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `|V| × d`
    pub embedding: Matrix,
    /// `(n·d) × |V|`
    pub projection: Matrix,
    pub bias: Vec<f64>,
    pub context_size: usize,
    pub embed_dim: usize,
}

/// Gradients with the same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embedding: Matrix,
    pub projection: Matrix,
    pub bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            embedding: Matrix::zeros(params.embedding.rows(), params.embedding.cols()),
            projection: Matrix::zeros(params.projection.rows(), params.projection.cols()),
            bias: vec![0.0; params.bias.len()],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.embedding.is_finite()
            && self.projection.is_finite()
            && self.bias.iter().all(|x| x.is_finite())
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

impl ModelParams {
    /// Uniform `[-0.05, 0.05]` embedding and projection entries, zero bias.
    pub fn init(
        vocab_size: usize,
        context_size: usize,
        embed_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if context_size < 1 {
            return Err(Error::config("context_size", "must be >= 1"));
        }
        if embed_dim < 1 {
            return Err(Error::config("embed_dim", "must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize, cols: usize| {
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-INIT_SCALE..=INIT_SCALE))
                .collect();
            Matrix::from_vec(rows, cols, data)
        };
        let embedding = draw(vocab_size, embed_dim);
        let projection = draw(context_size * embed_dim, vocab_size);
        Ok(ModelParams {
            embedding,
            projection,
            bias: vec![0.0; vocab_size],
            context_size,
            embed_dim,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.bias.len()
    }

    fn check_contexts(&self, contexts: &[TokenId]) -> Result<usize> {
        let n = self.context_size;
        if !contexts.len().is_multiple_of(n) {
            return Err(Error::Data(format!(
                "context buffer of length {} is not a multiple of context size {n}",
                contexts.len()
            )));
        }
        if let Some((i, &id)) = contexts
            .iter()
            .enumerate()
            .find(|(_, &id)| id >= self.vocab_size())
        {
            return Err(Error::Data(format!(
                "context {} slot {}: id {id} >= vocab size {}",
                i / n,
                i % n,
                self.vocab_size()
            )));
        }
        Ok(contexts.len() / n)
    }

    /// Concatenated context embedding for one row.
    fn hidden(&self, context: &[TokenId], out: &mut [f64]) {
        let d = self.embed_dim;
        for (slot, &id) in context.iter().enumerate() {
            out[slot * d..(slot + 1) * d].copy_from_slice(self.embedding.row(id));
        }
    }

    /// Logits for a batch of contexts laid out row-major, `n` ids per row.
    pub fn forward(&self, contexts: &[TokenId]) -> Result<Matrix> {
        let rows = self.check_contexts(contexts)?;
        let vocab = self.vocab_size();
        let mut logits = Matrix::zeros(rows, vocab);
        let mut h = vec![0.0; self.context_size * self.embed_dim];
        for (r, context) in contexts.chunks_exact(self.context_size).enumerate() {
            self.hidden(context, &mut h);
            let out = logits.row_mut(r);
            out.copy_from_slice(&self.bias);
            for (i, &hi) in h.iter().enumerate() {
                axpy(hi, self.projection.row(i), out);
            }
        }
        Ok(logits)
    }

    /// Chain rule from `dlogits` back to every parameter.
    pub fn backward(&self, contexts: &[TokenId], dlogits: &Matrix) -> Result<Gradients> {
        let rows = self.check_contexts(contexts)?;
        if dlogits.shape() != (rows, self.vocab_size()) {
            return Err(Error::Data(format!(
                "dlogits shape {:?} does not match ({rows}, {})",
                dlogits.shape(),
                self.vocab_size()
            )));
        }
        let d = self.embed_dim;
        let mut grads = Gradients::zeros_like(self);
        let mut h = vec![0.0; self.context_size * d];
        for (r, context) in contexts.chunks_exact(self.context_size).enumerate() {
            let g = dlogits.row(r);
            for (b, gi) in grads.bias.iter_mut().zip(g) {
                *b += gi;
            }
            self.hidden(context, &mut h);
            for (i, &hi) in h.iter().enumerate() {
                axpy(hi, g, grads.projection.row_mut(i));
            }
            for (slot, &id) in context.iter().enumerate() {
                let emb_grad = grads.embedding.row_mut(id);
                for (k, eg) in emb_grad.iter_mut().enumerate() {
                    *eg += dot(self.projection.row(slot * d + k), g);
                }
            }
        }
        Ok(grads)
    }

    /// `params -= learning_rate * grads`.
    pub fn sgd_step(&mut self, grads: &Gradients, learning_rate: f64) -> Result<()> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::config(
                "learning_rate",
                format!("must be finite and >= 0, got {learning_rate}"),
            ));
        }
        if !grads.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient (max |embedding| {}, max |projection| {})",
                grads.embedding.max_abs(),
                grads.projection.max_abs()
            )));
        }
        let update = |p: &mut [f64], g: &[f64]| {
            for (pi, gi) in p.iter_mut().zip(g) {
                *pi -= learning_rate * gi;
            }
        };
        update(self.embedding.as_mut_slice(), grads.embedding.as_slice());
        update(self.projection.as_mut_slice(), grads.projection.as_slice());
        update(&mut self.bias, &grads.bias);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with_provenance(path, "")
    }

    pub fn save_with_provenance(&self, path: &Path, provenance: &str) -> Result<()> {
        let mut out = format!(
            "#model v1 vocab_size={} n={} d={}",
            self.vocab_size(),
            self.context_size,
            self.embed_dim
        );
        if !provenance.is_empty() {
            out.push(' ');
            out.push_str(provenance);
        }
        out.push('\n');
        let mut section = |name: &str, m: &Matrix| {
            out.push_str(name);
            out.push('\n');
            for row in m.iter_rows() {
                let cells: Vec<String> = row.iter().map(|&x| fmt_f64(x)).collect();
                out.push_str(&cells.join(" "));
                out.push('\n');
            }
        };
        section("#embedding", &self.embedding);
        section("#projection", &self.projection);
        section(
            "#bias",
            &Matrix::from_vec(1, self.bias.len(), self.bias.clone()),
        );
        write_text(path, &out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "empty file"))?;
        if !header.starts_with("#model v1") {
            return Err(Error::parse(path, 1, "missing `#model v1` header"));
        }
        let fields = header_fields(header);
        let dim = |key: &str| -> Result<usize> {
            header_value(&fields, key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::parse(path, 1, format!("missing or bad {key}")))
        };
        let (vocab, n, d) = (dim("vocab_size")?, dim("n")?, dim("d")?);

        let mut read_section = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
            let (lineno, line) = lines
                .next()
                .ok_or_else(|| Error::parse(path, 0, format!("missing {name} section")))?;
            if line != name {
                return Err(Error::parse(path, lineno, format!("expected {name}")));
            }
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (lineno, line) = lines
                    .next()
                    .ok_or_else(|| Error::parse(path, 0, format!("truncated {name} section")))?;
                let before = data.len();
                for cell in line.split_whitespace() {
                    let x: f64 = cell
                        .parse()
                        .map_err(|_| Error::parse(path, lineno, format!("bad number {cell:?}")))?;
                    if !x.is_finite() {
                        return Err(Error::parse(path, lineno, "non-finite parameter"));
                    }
                    data.push(x);
                }
                if data.len() - before != cols {
                    return Err(Error::parse(
                        path,
                        lineno,
                        format!("expected {cols} values, found {}", data.len() - before),
                    ));
                }
            }
            Ok(Matrix::from_vec(rows, cols, data))
        };
        let embedding = read_section("#embedding", vocab, d)?;
        let projection = read_section("#projection", n * d, vocab)?;
        let bias = read_section("#bias", 1, vocab)?.as_slice().to_vec();
        Ok(ModelParams {
            embedding,
            projection,
            bias,
            context_size: n,
            embed_dim: d,
        })
    }
}
