//! Flat parameter storage with named, shaped slices.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::rng::Rng;
use crate::error::{Error, Result};

/// A registered slice of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceInfo {
    pub name: String,
    pub offset: usize,
    pub dims: Vec<usize>,
}

impl SliceInfo {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Matrix shape of the slice; 1-d slices are column vectors.
    pub fn matrix_shape(&self) -> (usize, usize) {
        match self.dims.as_slice() {
            [] => (1, 1),
            [n] => (*n, 1),
            [r, c] => (*r, *c),
            [r, rest @ ..] => (*r, rest.iter().product()),
        }
    }
}

/// Handle to a registered slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Flat vector of parameters plus a same-length gradient buffer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    values: Vec<f64>,
    grads: Vec<f64>,
    slices: Vec<SliceInfo>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a new slice filled with `init`.
    pub fn register(&mut self, name: &str, dims: &[usize], init: Vec<f64>) -> Result<ParamId> {
        if self.slices.iter().any(|s| s.name == name) {
            return Err(Error::invalid(format!("duplicate parameter slice `{name}`")));
        }
        let len: usize = dims.iter().product();
        if init.len() != len {
            return Err(Error::shape(format!(
                "slice `{name}` expects {len} values, got {}",
                init.len()
            )));
        }
        let offset = self.values.len();
        self.values.extend(init);
        self.grads.resize(self.values.len(), 0.0);
        self.slices.push(SliceInfo {
            name: name.to_string(),
            offset,
            dims: dims.to_vec(),
        });
        Ok(ParamId(self.slices.len() - 1))
    }

    pub fn register_zeros(&mut self, name: &str, dims: &[usize]) -> Result<ParamId> {
        let len = dims.iter().product();
        self.register(name, dims, vec![0.0; len])
    }

    /// Gaussian init with the given standard deviation.
    pub fn register_normal(
        &mut self,
        name: &str,
        dims: &[usize],
        std: f64,
        rng: &mut Rng,
    ) -> Result<ParamId> {
        let len: usize = dims.iter().product();
        let init = (0..len).map(|_| std * rng.normal()).collect();
        self.register(name, dims, init)
    }

    /// Rebuild a store from raw parts (checkpoint loading).
    pub fn from_parts(slices: Vec<SliceInfo>, values: Vec<f64>) -> Result<Self> {
        let mut covered = 0usize;
        let mut sorted: Vec<&SliceInfo> = slices.iter().collect();
        sorted.sort_by_key(|s| s.offset);
        for s in &sorted {
            if s.offset != covered {
                return Err(Error::format(format!(
                    "slice `{}` at offset {} leaves a gap or overlap (expected {covered})",
                    s.name, s.offset
                )));
            }
            covered += s.len();
        }
        if covered != values.len() {
            return Err(Error::format(format!(
                "slices cover {covered} values but store holds {}",
                values.len()
            )));
        }
        let grads = vec![0.0; values.len()];
        Ok(Self {
            values,
            grads,
            slices,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [f64] {
        &mut self.grads
    }

    /// Values and grads borrowed together.
    pub fn split_mut(&mut self) -> (&mut [f64], &[f64]) {
        (&mut self.values, &self.grads)
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn slices(&self) -> &[SliceInfo] {
        &self.slices
    }

    pub fn info(&self, id: ParamId) -> &SliceInfo {
        &self.slices[id.0]
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.slices
            .iter()
            .position(|s| s.name == name)
            .map(ParamId)
            .ok_or_else(|| Error::invalid(format!("unknown parameter slice `{name}`")))
    }

    pub fn slice(&self, id: ParamId) -> &[f64] {
        let s = &self.slices[id.0];
        &self.values[s.offset..s.offset + s.len()]
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [f64] {
        let s = &self.slices[id.0];
        let (o, n) = (s.offset, s.len());
        &mut self.values[o..o + n]
    }

    pub fn grad_slice(&self, id: ParamId) -> &[f64] {
        let s = &self.slices[id.0];
        &self.grads[s.offset..s.offset + s.len()]
    }

    pub fn matrix(&self, id: ParamId) -> Matrix {
        let (r, c) = self.slices[id.0].matrix_shape();
        Matrix::from_vec(r, c, self.slice(id).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slices_tile_the_vector() {
        let mut s = ParamStore::new();
        let a = s.register_zeros("a", &[2, 3]).unwrap();
        let b = s.register("b", &[4], vec![1.0; 4]).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(s.grads().len(), s.len());
        assert_eq!(s.info(a).offset, 0);
        assert_eq!(s.info(b).offset, 6);
        assert_eq!(s.slice(b), &[1.0; 4]);
        assert_eq!(s.matrix(a).shape(), (2, 3));
        assert_eq!(s.matrix(b).shape(), (4, 1));
    }

    #[test]
    fn duplicate_and_bad_length_rejected() {
        let mut s = ParamStore::new();
        s.register_zeros("a", &[2]).unwrap();
        assert!(s.register_zeros("a", &[2]).is_err());
        assert!(s.register("b", &[3], vec![0.0; 2]).is_err());
    }

    #[test]
    fn from_parts_checks_coverage() {
        let ok = vec![
            SliceInfo { name: "x".into(), offset: 0, dims: vec![2] },
            SliceInfo { name: "y".into(), offset: 2, dims: vec![1, 3] },
        ];
        assert!(ParamStore::from_parts(ok.clone(), vec![0.0; 5]).is_ok());
        assert!(ParamStore::from_parts(ok.clone(), vec![0.0; 6]).is_err());
        let gap = vec![
            SliceInfo { name: "x".into(), offset: 0, dims: vec![2] },
            SliceInfo { name: "y".into(), offset: 3, dims: vec![2] },
        ];
        assert!(ParamStore::from_parts(gap, vec![0.0; 5]).is_err());
    }
}
