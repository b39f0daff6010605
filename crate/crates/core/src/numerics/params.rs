use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

pub const PARAMS_FORMAT: &str = "han-params";
pub const PARAMS_VERSION: u32 = 1;

/// A trainable matrix and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
}

/// Named trainable parameters, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "param" });
        }
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.params.insert(name, Param { value, grad });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Matrix) -> Result<()> {
        let p = self.param_mut(name)?;
        p.value.same_shape(&value, "param set")?;
        p.value = value;
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Result<&Matrix> {
        self.param(name).map(|p| &p.grad)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let params: BTreeMap<&str, StoredMatrix> = self
            .params
            .iter()
            .map(|(k, p)| (k.as_str(), StoredMatrix::from(&p.value)))
            .collect();
        serde_json::json!({
            "format": PARAMS_FORMAT,
            "version": PARAMS_VERSION,
            "params": params,
        })
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct File {
            format: String,
            version: u32,
            params: BTreeMap<String, StoredMatrix>,
        }
        let file: File = serde_json::from_value(value)?;
        if file.format != PARAMS_FORMAT {
            return Err(Error::Checkpoint(format!("unexpected format `{}`", file.format)));
        }
        if file.version != PARAMS_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", file.version)));
        }
        let mut store = ParamStore::new();
        for (name, m) in file.params {
            store.insert(name, m.into_matrix()?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_json())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(serde_json::from_str(&text)?)
    }
}

#[derive(Serialize, Deserialize)]
struct StoredMatrix {
    shape: [usize; 2],
    values: Vec<f64>,
}

impl From<&Matrix> for StoredMatrix {
    fn from(m: &Matrix) -> Self {
        Self {
            shape: [m.rows(), m.cols()],
            values: m.data().to_vec(),
        }
    }
}

impl StoredMatrix {
    fn into_matrix(self) -> Result<Matrix> {
        Matrix::new(self.shape[0], self.shape[1], self.values)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// Xavier/Glorot uniform initialization: U(-a, a) with a = sqrt(6 / (rows + cols)).
pub fn xavier_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Matrix::from_raw(rows, cols, data)
}
