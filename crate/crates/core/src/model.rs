//! Matrix-factorization relevance model and its binary checkpoint format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::exposure::ExposureParams;
use crate::rng::{self, Stream};
use crate::scalar::{dot, sigmoid, Scalar};

/// User and item embedding tables stored contiguously: all user rows, then all item rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel<T> {
    n_users: usize,
    n_items: usize,
    dim: usize,
    params: Vec<T>,
}

impl<T: Scalar> FactorModel<T> {
    pub fn zeros(n_users: usize, n_items: usize, dim: usize) -> Self {
        FactorModel {
            n_users,
            n_items,
            dim,
            params: vec![T::zero(); (n_users + n_items) * dim],
        }
    }

    /// I.i.d. zero-mean Gaussian entries with standard deviation `scale`.
    pub fn init(n_users: usize, n_items: usize, dim: usize, seed: u64, scale: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be at least 1".into()));
        }
        let mut model = Self::zeros(n_users, n_items, dim);
        if scale > 0.0 {
            let normal = Normal::new(0.0, scale)
                .map_err(|e| Error::InvalidArgument(format!("init scale: {e}")))?;
            let mut rng = rng::stream(seed, Stream::Init);
            for p in &mut model.params {
                *p = T::of(normal.sample(&mut rng));
            }
        }
        Ok(model)
    }

    pub fn from_params(n_users: usize, n_items: usize, dim: usize, params: Vec<T>) -> Result<Self> {
        if params.len() != (n_users + n_items) * dim || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters for {n_users}x{n_items}x{dim}, got {}",
                (n_users + n_items) * dim,
                params.len()
            )));
        }
        Ok(FactorModel {
            n_users,
            n_items,
            dim,
            params,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn user(&self, u: usize) -> &[T] {
        &self.params[u * self.dim..(u + 1) * self.dim]
    }

    #[inline]
    pub fn item(&self, i: usize) -> &[T] {
        let off = (self.n_users + i) * self.dim;
        &self.params[off..off + self.dim]
    }

    #[inline]
    pub fn user_mut(&mut self, u: usize) -> &mut [T] {
        &mut self.params[u * self.dim..(u + 1) * self.dim]
    }

    #[inline]
    pub fn item_mut(&mut self, i: usize) -> &mut [T] {
        let off = (self.n_users + i) * self.dim;
        &mut self.params[off..off + self.dim]
    }

    /// Offset of user `u`'s row in [`FactorModel::params`].
    #[inline]
    pub fn user_offset(&self, u: usize) -> usize {
        u * self.dim
    }

    #[inline]
    pub fn item_offset(&self, i: usize) -> usize {
        (self.n_users + i) * self.dim
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Raw score: the user-item embedding dot product.
    #[inline]
    pub fn relevance_score(&self, u: usize, i: usize) -> T {
        dot(self.user(u), self.item(i))
    }

    /// Predicted relevance probability, the logistic of [`FactorModel::relevance_score`].
    #[inline]
    pub fn predict_relevance(&self, u: usize, i: usize) -> T {
        sigmoid(self.relevance_score(u, i))
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

/// Relevance model plus optional exposure parameters, as written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: FactorModel<T>,
    pub exposure: Option<ExposureParams<T>>,
}

fn put_u64(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    w.write_all(&(v as u64).to_le_bytes())
}

fn put_f64s<T: Scalar>(w: &mut impl Write, vs: &[T]) -> std::io::Result<()> {
    for v in vs {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

impl<T: Scalar> Checkpoint<T> {
    /// Layout, all little-endian: `N M d` as u64, the user table then the item
    /// table row-major as f64; then, if exposure is present, `N d` as u64, the
    /// exposure user table, the gate weight, and the gate bias as f64.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let m = &self.model;
        (|| -> std::io::Result<()> {
            put_u64(&mut w, m.n_users)?;
            put_u64(&mut w, m.n_items)?;
            put_u64(&mut w, m.dim)?;
            put_f64s(&mut w, &m.params)?;
            if let Some(e) = &self.exposure {
                put_u64(&mut w, e.n_users())?;
                put_u64(&mut w, e.dim())?;
                put_f64s(&mut w, e.params())?;
            }
            w.flush()
        })()
        .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        let bad = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let mut cur = ByteCursor { rest: &bytes };
        let (n, m, d) = (cur.u64().ok_or_else(|| bad("truncated header".into()))?,
            cur.u64().ok_or_else(|| bad("truncated header".into()))?,
            cur.u64().ok_or_else(|| bad("truncated header".into()))?);
        let count = n
            .checked_add(m)
            .and_then(|s| s.checked_mul(d))
            .ok_or_else(|| bad("size overflow".into()))?;
        let params = cur.f64s(count).ok_or_else(|| bad("truncated model tables".into()))?;
        let model = FactorModel::from_params(n, m, d, params).map_err(|e| bad(e.to_string()))?;
        let exposure = if cur.rest.is_empty() {
            None
        } else {
            let en = cur.u64().ok_or_else(|| bad("truncated exposure header".into()))?;
            let ed = cur.u64().ok_or_else(|| bad("truncated exposure header".into()))?;
            let p = cur
                .f64s(ExposureParams::<T>::param_count(en, ed))
                .ok_or_else(|| bad("truncated exposure tables".into()))?;
            Some(ExposureParams::from_params(en, ed, p).map_err(|e| bad(e.to_string()))?)
        };
        if !cur.rest.is_empty() {
            return Err(bad("trailing bytes".into()));
        }
        Ok(Checkpoint { model, exposure })
    }
}

struct ByteCursor<'a> {
    rest: &'a [u8],
}

impl ByteCursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        if self.rest.len() < n {
            return None;
        }
        let (head, rest) = self.rest.split_at(n);
        self.rest = rest;
        Some(head)
    }

    fn u64(&mut self) -> Option<usize> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn f64s<T: Scalar>(&mut self, k: usize) -> Option<Vec<T>> {
        let raw = self.take(k.checked_mul(8)?)?;
        Some(
            raw.chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        )
    }
}
