//! Interventions applied during a single target pass: residual replacements,
//! attention-edge blocks and embedding corruption, plus the attention mask.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Vector};

/// Boolean `[query][key]` visibility over a prompt. Never allows `key > query`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionMask {
    allowed: Vec<Vec<bool>>,
}

impl AttentionMask {
    pub fn causal(n: usize) -> Self {
        Self {
            allowed: (0..n).map(|q| (0..n).map(|k| k <= q).collect()).collect(),
        }
    }

    pub fn from_rows(allowed: Vec<Vec<bool>>) -> Result<Self> {
        let n = allowed.len();
        for (q, row) in allowed.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Mask(format!("row {q} has {} entries, expected {n}", row.len())));
            }
            if let Some(k) = row.iter().enumerate().skip(q + 1).find(|(_, &a)| a).map(|(k, _)| k) {
                return Err(Error::Mask(format!("query {q} may not attend to future key {k}")));
            }
        }
        Ok(Self { allowed })
    }

    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query][key]
    }

    pub fn block(&mut self, query: usize, key: usize) {
        self.allowed[query][key] = false;
    }

    /// Causal mask over two concatenated segments where neither segment can
    /// see the other: `[first][second]`, second blind to first.
    pub fn isolated_segments(first: usize, second: usize) -> Self {
        let n = first + second;
        let allowed = (0..n)
            .map(|q| {
                (0..n)
                    .map(|k| k <= q && (q < first || k >= first))
                    .collect()
            })
            .collect();
        Self { allowed }
    }
}

/// `h̄ ← value` at `(layer, position)` right after block `layer` finishes
/// (`layer = 0` replaces the embedding output).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualPatch {
    pub layer: usize,
    pub position: usize,
    pub value: Vector,
}

/// Zero attention weight for every `(layer, query, key)` combination.
/// Layers are block indices in `1..=L`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub layers: Vec<usize>,
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
}

/// Adds `N(0, sigma²)` noise to the embedding rows at `positions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingCorruption {
    pub positions: Vec<usize>,
    pub sigma: f64,
    pub seed: u64,
}

impl EmbeddingCorruption {
    /// Noise rows in ascending position order, `d` draws each.
    pub fn noise(&self, d: usize) -> Result<Vec<(usize, Vec<f64>)>> {
        if !(self.sigma >= 0.0) {
            return Err(Error::Argument(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        let positions: BTreeSet<usize> = self.positions.iter().copied().collect();
        let mut rng = Rng::new(self.seed);
        Ok(positions
            .into_iter()
            .map(|p| (p, (0..d).map(|_| self.sigma * rng.standard_normal()).collect()))
            .collect())
    }
}

/// Complete intervention set for one target pass. All entries apply within
/// a single forward.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PatchPlan {
    #[serde(default)]
    pub residual: Vec<ResidualPatch>,
    #[serde(default)]
    pub attention: Vec<AttentionBlock>,
    #[serde(default)]
    pub corruption: Option<EmbeddingCorruption>,
}

impl PatchPlan {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.residual.is_empty() && self.attention.is_empty() && self.corruption.is_none()
    }

    pub fn patch(mut self, layer: usize, position: usize, value: Vector) -> Self {
        self.residual.push(ResidualPatch {
            layer,
            position,
            value,
        });
        self
    }

    pub fn block(mut self, layers: Vec<usize>, queries: Vec<usize>, keys: Vec<usize>) -> Self {
        self.attention.push(AttentionBlock {
            layers,
            queries,
            keys,
        });
        self
    }

    pub fn corrupt(mut self, positions: Vec<usize>, sigma: f64, seed: u64) -> Self {
        self.corruption = Some(EmbeddingCorruption {
            positions,
            sigma,
            seed,
        });
        self
    }

    /// Checks layer/position references against a model of `n_layers`
    /// blocks, width `d` and a prompt of `n` tokens.
    pub fn validate(&self, n_layers: usize, d: usize, n: usize) -> Result<()> {
        for p in &self.residual {
            if p.layer > n_layers {
                return Err(Error::Plan(format!(
                    "residual patch layer {} exceeds model depth {n_layers}",
                    p.layer
                )));
            }
            if p.position >= n {
                return Err(Error::Plan(format!(
                    "residual patch position {} outside prompt of length {n}",
                    p.position
                )));
            }
            if p.value.dim() != d {
                return Err(Error::Plan(format!(
                    "residual patch value has dim {}, model width is {d}",
                    p.value.dim()
                )));
            }
            if !p.value.is_finite() {
                return Err(Error::Plan("residual patch value is not finite".into()));
            }
        }
        for b in &self.attention {
            if let Some(&l) = b.layers.iter().find(|&&l| l == 0 || l > n_layers) {
                return Err(Error::Plan(format!(
                    "attention block layer {l} outside 1..={n_layers}"
                )));
            }
        }
        if let Some(c) = &self.corruption {
            if let Some(&p) = c.positions.iter().find(|&&p| p >= n) {
                return Err(Error::Plan(format!(
                    "corruption position {p} outside prompt of length {n}"
                )));
            }
            if !(c.sigma >= 0.0) {
                return Err(Error::Argument(format!("sigma must be >= 0, got {}", c.sigma)));
            }
        }
        Ok(())
    }

    /// Blocked `(query, key)` pairs per block index `1..=n_layers`
    /// (index 0 unused).
    pub(crate) fn blocked_edges(&self, n_layers: usize) -> Vec<HashSet<(usize, usize)>> {
        let mut out = vec![HashSet::new(); n_layers + 1];
        for b in &self.attention {
            for &l in &b.layers {
                for &q in &b.queries {
                    for &k in &b.keys {
                        out[l].insert((q, k));
                    }
                }
            }
        }
        out
    }
}
