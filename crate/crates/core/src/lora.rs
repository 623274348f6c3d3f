//! Low-rank adapters. An adapter on a base weight `W (d_out × d_in)` adds
//! `scale · B·A` with `A (r × d_in)`, `B (d_out × r)`, and `scale = alpha / r`.
//! The factors live in the model's parameter store under `lora/<target>/A|B`.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{kernels, Tensor};
use crate::model::Model;
use crate::rng::SeedStream;
use crate::scalar::Real;

pub const LORA_PREFIX: &str = "lora/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub target: String,
    pub rank: usize,
    pub lora_alpha: f64,
    pub d_in: usize,
    pub d_out: usize,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.lora_alpha / self.rank as f64
    }

    pub fn a_name(&self) -> String {
        format!("{LORA_PREFIX}{}/A", self.target)
    }

    pub fn b_name(&self) -> String {
        format!("{LORA_PREFIX}{}/B", self.target)
    }

    /// Trainable parameters: `r·(d_in + d_out)`.
    pub fn param_count(&self) -> usize {
        self.rank * (self.d_in + self.d_out)
    }
}

/// Adapters keyed by base-weight name, at most one per weight.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet {
    adapters: IndexMap<String, LoraAdapter>,
}

impl AdapterSet {
    pub fn get(&self, target: &str) -> Option<&LoraAdapter> {
        self.adapters.get(target)
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.adapters.values()
    }

    pub fn insert(&mut self, adapter: LoraAdapter) -> Result<()> {
        if self.adapters.contains_key(&adapter.target) {
            return Err(Error::Invalid(format!(
                "weight `{}` already has an adapter",
                adapter.target
            )));
        }
        self.adapters.insert(adapter.target.clone(), adapter);
        Ok(())
    }

    /// `Σ r·(d_in + d_out)` over all adapters.
    pub fn param_count(&self) -> usize {
        self.adapters.values().map(LoraAdapter::param_count).sum()
    }
}

/// Which weights receive adapters, and their rank and alpha.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct LoraSpec {
    /// Weight families (`wq`, `wk`, `wv`, `wo`, `fc1`, `fc2`) or full parameter names.
    pub targets: Vec<String>,
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraSpec {
    fn default() -> Self {
        Self {
            targets: vec!["wq".into(), "wv".into()],
            rank: 4,
            alpha: 8.0,
        }
    }
}

/// Standard deviation of the seeded normal init for `A`.
pub const A_INIT_STD: f64 = 0.02;

/// Attaches fresh adapters: `A ~ N(0, 0.02²)`, `B = 0`. The adapted base weights
/// are frozen and the adapter factors made trainable.
pub fn attach<T: Real>(model: &mut Model<T>, spec: &LoraSpec, stream: &SeedStream) -> Result<AdapterSet> {
    let mut names = Vec::new();
    for t in &spec.targets {
        if model.params.contains(t) {
            names.push(t.clone());
        } else {
            names.extend(model.weight_family(t).map_err(|_| Error::UnknownParam(t.clone()))?);
        }
    }
    let mut created = AdapterSet::default();
    for name in names {
        let w = model.params.get(&name)?;
        let [d_out, d_in] = *w.shape() else {
            return Err(Error::Invalid(format!("adapter target `{name}` is not a 2-D weight")));
        };
        if spec.rank == 0 || spec.rank > d_out.min(d_in) {
            return Err(Error::Invalid(format!(
                "rank {} out of range for `{name}` ({d_out}×{d_in})",
                spec.rank
            )));
        }
        if model.adapters.get(&name).is_some() {
            return Err(Error::Invalid(format!("weight `{name}` already has an adapter")));
        }
        let adapter = LoraAdapter {
            target: name.clone(),
            rank: spec.rank,
            lora_alpha: spec.alpha,
            d_in,
            d_out,
        };
        let mut rng = stream.child(&name).rng();
        let a = Tensor::randn(&[spec.rank, d_in], A_INIT_STD, &mut rng);
        let b = Tensor::zeros(&[d_out, spec.rank]);
        model.params.insert(adapter.a_name(), a, true)?;
        model.params.insert(adapter.b_name(), b, true)?;
        created.insert(adapter)?;
    }
    for adapter in created.iter() {
        model.adapters.insert(adapter.clone())?;
    }
    let adapted: Vec<String> = model.adapters.iter().map(|a| a.target.clone()).collect();
    for (name, p) in model.params.iter_mut() {
        if adapted.iter().any(|t| t == name) {
            p.trainable = false;
        }
    }
    Ok(created)
}

/// `y = W·x + scale · B·(A·x)` for a batch of row vectors `x (n × d_in)`.
pub fn adapted_matvec<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    scale: T,
) -> Result<Tensor<T>> {
    let (n, d_in) = (x.rows(), x.cols());
    let (d_out, r) = (w.rows(), a.rows());
    if w.cols() != d_in || a.cols() != d_in || b.shape() != [d_out, r] {
        return Err(Error::shape(
            "adapted_matvec",
            format!(
                "x {:?}, W {:?}, A {:?}, B {:?}",
                x.shape(),
                w.shape(),
                a.shape(),
                b.shape()
            ),
        ));
    }
    let base = kernels::matmul_bt(x.data(), w.data(), n, d_in, d_out);
    let ax = kernels::matmul_bt(x.data(), a.data(), n, d_in, r);
    let bax = kernels::matmul_bt(&ax, b.data(), n, r, d_out);
    let out = base.iter().zip(&bax).map(|(&y, &u)| y + scale * u).collect();
    Tensor::new(vec![n, d_out], out)
}

/// `scale · B·A` for one adapter.
pub fn delta<T: Real>(model: &Model<T>, adapter: &LoraAdapter) -> Result<Tensor<T>> {
    let a = model.params.get(&adapter.a_name())?;
    let b = model.params.get(&adapter.b_name())?;
    let ba = kernels::matmul(b.data(), a.data(), adapter.d_out, adapter.rank, adapter.d_in);
    let s = T::lit(adapter.scale());
    Tensor::new(
        vec![adapter.d_out, adapter.d_in],
        ba.into_iter().map(|x| x * s).collect(),
    )
}

/// Folds `adapters` into their base weights (`W' = W + scale·B·A`) and detaches
/// them. Fails if any adapter is not currently attached, e.g. on a second merge.
pub fn merge<T: Real>(model: &mut Model<T>, adapters: &AdapterSet) -> Result<()> {
    for adapter in adapters.iter() {
        if model.adapters.get(&adapter.target) != Some(adapter) {
            return Err(Error::Invalid(format!(
                "adapter on `{}` is not attached (already merged?)",
                adapter.target
            )));
        }
    }
    for adapter in adapters.iter() {
        let d = delta(model, adapter)?;
        model.params.get_mut(&adapter.target)?.axpy(T::one(), &d)?;
        model.params.remove(&adapter.a_name());
        model.params.remove(&adapter.b_name());
    }
    let remaining: AdapterSet = AdapterSet {
        adapters: model
            .adapters
            .adapters
            .iter()
            .filter(|(k, _)| adapters.get(k).is_none())
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
    };
    model.adapters = remaining;
    Ok(())
}

/// Merges every attached adapter.
pub fn merge_all<T: Real>(model: &mut Model<T>) -> Result<AdapterSet> {
    let all = model.adapters.clone();
    merge(model, &all)?;
    Ok(all)
}
