//! Collapse diagnostics: the effective rank of pooled hidden states and
//! distinct-n lexical diversity.
//!
//! The effective rank of a batch of row vectors is `exp(H(p))` where `p` is
//! the normalised eigenvalue spectrum of the sample covariance of the rows
//! and `H` the Shannon entropy in nats.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::hash::Hash;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{TinyLM, TokenBatch, TokenId};
use crate::parallel::{map_indexed, Execution};
use crate::tensor::Graph;

/// Added to every clamped eigenvalue before normalisation.
pub const SPECTRUM_FLOOR: f64 = 1e-10;
/// Relative off-diagonal norm at which the Jacobi sweeps stop.
pub const JACOBI_TOL: f64 = 1e-12;
/// Largest tolerated asymmetry, relative to the largest entry.
pub const SYMMETRY_TOL: f64 = 1e-8;
const MAX_SWEEPS: usize = 100;

/// `N × D` matrix of pooled hidden states, one row per sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenBatch {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl HiddenBatch {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if rows < 2 {
            return Err(Error::data(format!("a hidden batch needs at least 2 rows, got {rows}")));
        }
        if dim == 0 || data.len() != rows * dim {
            return Err(Error::InvalidShape(format!(
                "hidden batch {rows}x{dim} cannot hold {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("hidden batch".into()));
        }
        Ok(HiddenBatch { rows, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::data("hidden batch rows must share one length"));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Plain-text matrix: a `N D` header line, then `N` lines of `D`
    /// whitespace-separated decimals. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let (rows, dim, data) = parse_matrix(text)?;
        Self::new(rows, dim, data)
    }

    pub fn to_text(&self) -> String {
        matrix_text(self.rows, self.dim, &self.data)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

pub(crate) fn matrix_text(rows: usize, dim: usize, data: &[f64]) -> String {
    let mut s = format!("{rows} {dim}\n");
    for r in data.chunks(dim) {
        for (j, v) in r.iter().enumerate() {
            if j > 0 {
                s.push(' ');
            }
            write!(s, "{v}").expect("writing to a String");
        }
        s.push('\n');
    }
    s
}

pub(crate) fn parse_matrix(text: &str) -> Result<(usize, usize, Vec<f64>)> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (hl, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "missing `N D` header".into(),
    })?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse {
            line: hl,
            msg: format!("bad header: {e}"),
        })?;
    let [rows, dim] = dims[..] else {
        return Err(Error::Parse {
            line: hl,
            msg: "header must be `N D`".into(),
        });
    };
    let mut data = Vec::with_capacity(rows * dim);
    let mut seen = 0;
    for (ln, line) in lines {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: ln,
                msg: format!("bad number: {e}"),
            })?;
        if vals.len() != dim {
            return Err(Error::Parse {
                line: ln,
                msg: format!("expected {dim} values, found {}", vals.len()),
            });
        }
        data.extend(vals);
        seen += 1;
    }
    if seen != rows {
        return Err(Error::Parse {
            line: hl,
            msg: format!("header promises {rows} rows, found {seen}"),
        });
    }
    Ok((rows, dim, data))
}

/// Sample covariance `[D×D]` of the rows after centring, normalised by `N − 1`.
pub fn covariance(h: &HiddenBatch) -> Vec<f64> {
    let (n, d) = (h.rows, h.dim);
    let mut mean = vec![0.0; d];
    for r in h.data.chunks(d) {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    let mut centred = vec![0.0; d];
    for r in h.data.chunks(d) {
        centred.iter_mut().zip(r.iter().zip(&mean)).for_each(|(c, (v, m))| *c = v - m);
        for i in 0..d {
            let ci = centred[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..d {
                cov[i * d + j] += ci * centred[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    cov
}

/// Eigenvalues of the symmetric `n × n` matrix `a` by cyclic Jacobi
/// rotations, sorted in descending order. No clamping or floor.
pub fn jacobi_eigenvalues(a: &[f64], n: usize) -> Result<Vec<f64>> {
    if a.len() != n * n || n == 0 {
        return Err(Error::InvalidShape(format!("{} values do not form a {n}x{n} matrix", a.len())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("eigenvalue input".into()));
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            worst = worst.max((a[i * n + j] - a[j * n + i]).abs());
        }
    }
    if worst > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric(worst));
    }
    let mut m = a.to_vec();
    for i in 0..n {
        for j in i + 1..n {
            let avg = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = avg;
            m[j * n + i] = avg;
        }
    }
    let total: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    for _ in 0..MAX_SWEEPS {
        if off(&m) <= JACOBI_TOL * total {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                m[p * n + p] = app - t * apq;
                m[q * n + q] = aqq + t * apq;
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = m[r * n + p];
                    let arq = m[r * n + q];
                    let nrp = c * arp - s * arq;
                    let nrq = s * arp + c * arq;
                    m[r * n + p] = nrp;
                    m[p * n + r] = nrp;
                    m[r * n + q] = nrq;
                    m[q * n + r] = nrq;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    Ok(eig)
}

/// Descending eigenvalues of a symmetric PSD matrix, clamped at zero and
/// lifted by [`SPECTRUM_FLOOR`].
pub fn symmetric_eigenvalues(c: &[f64], n: usize) -> Result<Vec<f64>> {
    Ok(jacobi_eigenvalues(c, n)?
        .into_iter()
        .map(|v| v.max(0.0) + SPECTRUM_FLOOR)
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumReport {
    /// Descending, clamped and floored.
    pub eigenvalues: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub effective_rank: f64,
}

impl SpectrumReport {
    /// Entropy-based effective rank of an already floored spectrum.
    pub fn from_spectrum(eigenvalues: Vec<f64>) -> Result<Self> {
        let total: f64 = eigenvalues.iter().sum();
        if eigenvalues.is_empty() || total.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || eigenvalues.iter().any(|v| *v < 0.0) {
            return Err(Error::data("spectrum must be non-empty, nonnegative and not all zero"));
        }
        let probabilities: Vec<f64> = eigenvalues.iter().map(|v| v / total).collect();
        let entropy: f64 = -probabilities
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>();
        Ok(SpectrumReport {
            eigenvalues,
            probabilities,
            effective_rank: entropy.exp(),
        })
    }
}

/// Full spectrum report of the covariance of `h`.
pub fn spectrum(h: &HiddenBatch) -> Result<SpectrumReport> {
    let cov = covariance(h);
    SpectrumReport::from_spectrum(symmetric_eigenvalues(&cov, h.dim)?)
}

/// Effective rank of the covariance of `h`.
///
/// A zero covariance yields the uniform floored spectrum, i.e. `D`.
pub fn effective_rank(h: &HiddenBatch) -> Result<f64> {
    Ok(spectrum(h)?.effective_rank)
}

/// Unique-to-total ratio of `n`-grams pooled over all sequences.
pub fn distinct_n<T, S>(sequences: &[S], n: usize) -> Result<f64>
where
    T: Hash + Eq,
    S: AsRef<[T]>,
{
    if n == 0 {
        return Err(Error::config("n-gram order must be positive"));
    }
    if sequences.is_empty() {
        return Err(Error::data("distinct-n needs at least one sequence"));
    }
    if let Some(s) = sequences.iter().find(|s| s.as_ref().len() < n) {
        return Err(Error::data(format!(
            "sequence of length {} is shorter than n = {n}",
            s.as_ref().len()
        )));
    }
    let mut seen: HashSet<&[T]> = HashSet::new();
    let mut total = 0usize;
    for s in sequences {
        for w in s.as_ref().windows(n) {
            seen.insert(w);
            total += 1;
        }
    }
    Ok(seen.len() as f64 / total as f64)
}

/// Mean-pooled last hidden state of every row, computed in batches of
/// `batch_size`. Positions equal to `pad` are excluded from the mean.
pub fn pooled_last_hidden(
    model: &TinyLM,
    rows: &[Vec<TokenId>],
    pad: Option<TokenId>,
    batch_size: usize,
) -> Result<HiddenBatch> {
    let batch_size = batch_size.max(1);
    let d = model.config().d_model;
    let chunks: Vec<&[Vec<TokenId>]> = rows.chunks(batch_size).collect();
    let pooled = map_indexed(Execution::preferred(), chunks.len(), |i| -> Result<Vec<f64>> {
        let batch = TokenBatch::from_rows(chunks[i], pad)?;
        let mut g = Graph::new();
        let p = model.bind_frozen(&mut g);
        let out = model.forward(&mut g, &p, &batch)?;
        let last = *out.hidden_states.last().expect("at least one hidden state");
        let pooled = g.mean_pool_time(last, Some(batch.mask()))?;
        Ok(g.value(pooled).to_vec())
    });
    let data = pooled.into_iter().collect::<Result<Vec<_>>>()?.concat();
    HiddenBatch::new(rows.len(), d, data)
}
