use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Result, Tensor, TensorError};

/// Index of a parameter inside its [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named model parameters in insertion order, plus the RNG used to
/// initialise them.
#[derive(Clone, Debug)]
pub struct ParameterStore {
    params: IndexMap<String, Tensor>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl PartialEq for ParameterStore {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        ParameterStore {
            params: IndexMap::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        let (idx, _) = self.params.insert_full(name, value);
        Ok(ParamId(idx))
    }

    /// Xavier-uniform initialised weight matrix.
    pub fn xavier(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<ParamId> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| self.rng.gen_range(-bound..=bound))
            .collect();
        self.insert(name, Tensor::matrix(rows, cols, data))
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(rows, cols))
    }

    /// Gaussian initialised matrix (used for embedding tables).
    pub fn normal(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
    ) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| TensorError::Invalid {
            op: "normal",
            message: e.to_string(),
        })?;
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        self.insert(name, Tensor::matrix(rows, cols, data))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xavier_respects_bound_and_seed() {
        let mut a = ParameterStore::new(7);
        let mut b = ParameterStore::new(7);
        let ia = a.xavier("w", 10, 20).unwrap();
        let ib = b.xavier("w", 10, 20).unwrap();
        assert_eq!(a.get(ia), b.get(ib));
        let bound = (6.0f64 / 30.0).sqrt();
        assert!(a.get(ia).data().iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParameterStore::new(0);
        s.zeros("b", 1, 3).unwrap();
        assert!(matches!(
            s.zeros("b", 1, 3),
            Err(TensorError::DuplicateParameter(_))
        ));
    }
}
