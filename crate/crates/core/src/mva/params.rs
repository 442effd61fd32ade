use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, MvaError, Phase};
use crate::embedding::{EmbedWeights, TubeEmbedConfig};
use crate::numerics::{Graph, NodeId, Real, Tensor};

const INIT_STD: f64 = 0.02;

/// Named parameter tensors in a fixed insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }
}

fn trunc_normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, INIT_STD).unwrap();
    (0..n)
        .map(|_| loop {
            let x = normal.sample(rng);
            if x.abs() <= 2.0 * INIT_STD {
                break x;
            }
        })
        .collect()
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replaces an existing tensor of the same name.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = tensor,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(tensor);
            }
        }
    }

    fn remove(&mut self, name: &str) {
        if let Some(i) = self.index.remove(name) {
            self.names.remove(i);
            self.tensors.remove(i);
            for (k, n) in self.names.iter().enumerate().skip(i) {
                self.index.insert(n.clone(), k);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect(), index: self.index.clone() }
    }

    /// Copies every tensor of `other` whose name and shape match here.
    /// Returns the names copied.
    pub fn load_matching(&mut self, other: &ParamStore<T>) -> Vec<String> {
        let mut copied = Vec::new();
        for (name, t) in other.iter() {
            if let Some(&i) = self.index.get(name) {
                if self.tensors[i].shape() == t.shape() {
                    self.tensors[i] = t.clone();
                    copied.push(name.to_string());
                }
            }
        }
        copied
    }

    pub fn embed_weights(&self) -> Result<EmbedWeights<T>, MvaError> {
        Ok(EmbedWeights { weight: self.require("embed.w")?.clone(), bias: self.require("embed.b")?.clone() })
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>, MvaError> {
        self.get(name).ok_or_else(|| MvaError::UnknownParam(name.into()))
    }

    /// Adds every tensor to `g` as a parameter leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound<'_> {
        let ids = self.tensors.iter().map(|t| g.param(t.clone())).collect();
        Bound { index: &self.index, ids }
    }

    /// Parameters for `phase`: encoder plus pixel decoder for pre-training,
    /// encoder plus class head for fine-tuning.
    pub fn init(cfg: &ModelConfig, phase: Phase, seed: u64) -> Result<Self, MvaError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::new();
        let embed_cfg = TubeEmbedConfig { patch: cfg.patch, embed_dim: cfg.enc_dim };
        let embed = EmbedWeights::<T>::init(&embed_cfg, cfg.channels, &mut rng);
        p.insert("embed.w", embed.weight);
        p.insert("embed.b", embed.bias);
        p.stack(&mut rng, "enc", cfg.enc_depth, cfg.enc_dim, cfg.mlp_ratio);
        match phase {
            Phase::Pretrain => {
                p.linear(&mut rng, "dec.embed", cfg.enc_dim, cfg.dec_dim);
                let mask = trunc_normal(&mut rng, cfg.dec_dim);
                p.insert("mask_token", Tensor::from_f64(&[1, cfg.dec_dim], &mask).unwrap());
                p.stack(&mut rng, "dec", cfg.dec_depth, cfg.dec_dim, cfg.mlp_ratio);
                p.linear(&mut rng, "head", cfg.dec_dim, cfg.patch_dim());
            }
            Phase::Finetune => p.linear(&mut rng, "cls", cfg.enc_dim, cfg.num_classes),
        }
        Ok(p)
    }

    fn linear(&mut self, rng: &mut impl Rng, name: &str, din: usize, dout: usize) {
        let w = trunc_normal(rng, din * dout);
        self.insert(format!("{name}.w"), Tensor::from_f64(&[din, dout], &w).unwrap());
        self.insert(format!("{name}.b"), Tensor::zeros(&[dout]));
    }

    fn norm(&mut self, name: &str, dim: usize) {
        self.insert(format!("{name}.g"), Tensor::full(&[dim], T::one()));
        self.insert(format!("{name}.b"), Tensor::zeros(&[dim]));
    }

    fn stack(&mut self, rng: &mut impl Rng, prefix: &str, depth: usize, dim: usize, mlp_ratio: usize) {
        for l in 0..depth {
            let b = format!("{prefix}.{l}");
            self.norm(&format!("{b}.ln1"), dim);
            for proj in ["q", "k", "v", "proj"] {
                self.linear(rng, &format!("{b}.attn.{proj}"), dim, dim);
            }
            // a key bias shifts every score of a query equally and cannot affect the output
            self.remove(&format!("{b}.attn.k.b"));
            self.norm(&format!("{b}.ln2"), dim);
            self.linear(rng, &format!("{b}.fc1"), dim, mlp_ratio * dim);
            self.linear(rng, &format!("{b}.fc2"), mlp_ratio * dim, dim);
        }
        if depth > 0 {
            self.norm(&format!("{prefix}.norm"), dim);
        }
    }
}

/// Graph node ids of a bound [`ParamStore`], looked up by name.
pub struct Bound<'a> {
    index: &'a HashMap<String, usize>,
    ids: Vec<NodeId>,
}

impl<'a> Bound<'a> {
    /// Wraps ids created elsewhere, in the store's order.
    pub fn from_ids<T: Real>(store: &'a ParamStore<T>, ids: &[NodeId]) -> Result<Self, MvaError> {
        if ids.len() != store.len() {
            return Err(MvaError::Slots(format!("{} ids for {} parameters", ids.len(), store.len())));
        }
        Ok(Self { index: &store.index, ids: ids.to_vec() })
    }

    pub fn id(&self, name: &str) -> Result<NodeId, MvaError> {
        self.index.get(name).map(|&i| self.ids[i]).ok_or_else(|| MvaError::UnknownParam(name.into()))
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_conventions() {
        let cfg = ModelConfig::default();
        let p = ParamStore::<f64>::init(&cfg, Phase::Pretrain, 3).unwrap();
        assert!(p.get("enc.0.ln1.g").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(p.get("enc.3.fc2.b").unwrap().data().iter().all(|&v| v == 0.0));
        let w = p.get("dec.1.attn.q.w").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.04));
        let std = (w.data().iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
        assert!((std - 0.0176).abs() < 0.003, "{std}");
        assert_eq!(p.get("head.w").unwrap().shape(), &[48, 96]);
        assert!(p.get("enc.0.attn.k.b").is_none() && p.get("enc.0.attn.q.b").is_some());
        assert!(p.get("cls.w").is_none());
        let f = ParamStore::<f64>::init(&cfg, Phase::Finetune, 3).unwrap();
        assert_eq!(f.get("cls.w").unwrap().shape(), &[96, 4]);
        assert!(f.get("mask_token").is_none());
    }

    #[test]
    fn count_is_pure_function_of_config() {
        let cfg = ModelConfig::default();
        let a = ParamStore::<f32>::init(&cfg, Phase::Pretrain, 1).unwrap();
        let b = ParamStore::<f32>::init(&cfg, Phase::Pretrain, 2).unwrap();
        assert_eq!(a.scalar_count(), b.scalar_count());
        assert_ne!(a, b);
        let (d, dd, pd) = (96, 48, 96);
        let block = |d: usize| 2 * 2 * d + 4 * (d * d + d) - d + (d * 4 * d + 4 * d) + (4 * d * d + d);
        let expected = pd * d + d + 4 * block(d) + 2 * d + d * dd + dd + dd + 2 * block(dd) + 2 * dd + dd * pd + pd;
        assert_eq!(a.scalar_count(), expected);
    }

    #[test]
    fn load_matching_copies_encoder() {
        let cfg = ModelConfig::default();
        let pre = ParamStore::<f32>::init(&cfg, Phase::Pretrain, 1).unwrap();
        let mut ft = ParamStore::<f32>::init(&cfg, Phase::Finetune, 2).unwrap();
        let copied = ft.load_matching(&pre);
        assert!(copied.contains(&"enc.2.attn.v.w".to_string()));
        assert!(!copied.iter().any(|n| n.starts_with("cls")));
        assert_eq!(ft.get("embed.w"), pre.get("embed.w"));
    }
}
