// SPDX-License-Identifier: MIT OR Apache-2.0

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};

/// A patchable node of the computational graph.
///
/// Ordering follows the forward pass: embedding, then for each layer its
/// heads in index order followed by its MLP, then the unembedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ComponentId {
    Embedding,
    Head { layer: usize, head: usize },
    Mlp { layer: usize },
    Unembedding,
}

impl ComponentId {
    pub fn head(layer: usize, head: usize) -> Self {
        ComponentId::Head { layer, head }
    }

    pub fn mlp(layer: usize) -> Self {
        ComponentId::Mlp { layer }
    }

    fn sort_key(&self) -> (usize, usize, usize) {
        match *self {
            ComponentId::Embedding => (0, 0, 0),
            ComponentId::Head { layer, head } => (1 + layer, 0, head),
            ComponentId::Mlp { layer } => (1 + layer, 1, 0),
            ComponentId::Unembedding => (usize::MAX, 0, 0),
        }
    }

    pub fn layer(&self) -> Option<usize> {
        match *self {
            ComponentId::Head { layer, .. } | ComponentId::Mlp { layer } => Some(layer),
            _ => None,
        }
    }

    pub fn is_head(&self) -> bool {
        matches!(self, ComponentId::Head { .. })
    }

    pub fn is_mlp(&self) -> bool {
        matches!(self, ComponentId::Mlp { .. })
    }

    /// Lower-case kind label used in CSV output.
    pub fn kind_name(&self) -> &'static str {
        match self {
            ComponentId::Embedding => "embedding",
            ComponentId::Head { .. } => "head",
            ComponentId::Mlp { .. } => "mlp",
            ComponentId::Unembedding => "unembedding",
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let ok = match *self {
            ComponentId::Head { layer, head } => layer < config.n_layers && head < config.n_heads,
            ComponentId::Mlp { layer } => layer < config.n_layers,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("component {self} out of range")))
        }
    }

    /// Every attention head, layer-major.
    pub fn all_heads(config: &ModelConfig) -> Vec<ComponentId> {
        (0..config.n_layers)
            .flat_map(|l| (0..config.n_heads).map(move |h| ComponentId::head(l, h)))
            .collect()
    }

    /// Heads and MLPs in forward order.
    pub fn heads_and_mlps(config: &ModelConfig) -> Vec<ComponentId> {
        let mut out = Vec::with_capacity(config.n_layers * (config.n_heads + 1));
        for l in 0..config.n_layers {
            out.extend((0..config.n_heads).map(|h| ComponentId::head(l, h)));
            out.push(ComponentId::mlp(l));
        }
        out
    }
}

impl Ord for ComponentId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl PartialOrd for ComponentId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ComponentId::Embedding => write!(f, "embed"),
            ComponentId::Head { layer, head } => write!(f, "L{layer}H{head}"),
            ComponentId::Mlp { layer } => write!(f, "L{layer}MLP"),
            ComponentId::Unembedding => write!(f, "unembed"),
        }
    }
}

impl FromStr for ComponentId {
    type Err = Error;

    /// Parses the `Display` form: `embed`, `unembed`, `L<l>H<h>`, `L<l>MLP`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("cannot parse component id {s:?}"));
        match s {
            "embed" => return Ok(ComponentId::Embedding),
            "unembed" => return Ok(ComponentId::Unembedding),
            _ => {}
        }
        let rest = s.strip_prefix('L').ok_or_else(bad)?;
        if let Some(layer) = rest.strip_suffix("MLP") {
            return Ok(ComponentId::mlp(layer.parse().map_err(|_| bad())?));
        }
        let (layer, head) = rest.split_once('H').ok_or_else(bad)?;
        Ok(ComponentId::head(
            layer.parse().map_err(|_| bad())?,
            head.parse().map_err(|_| bad())?,
        ))
    }
}

/// A set of weights that trains (or freezes) together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamGroup {
    /// Token and position embeddings.
    Embedding,
    /// The head's Q/K/V column slices and its output-projection row slice.
    Head { layer: usize, head: usize },
    /// Pre-attention norm gain of a layer.
    AttnNorm { layer: usize },
    /// Pre-MLP norm gain and both MLP projections with biases.
    Mlp { layer: usize },
    /// Final norm gain and the unembedding matrix.
    Unembedding,
}

impl ParamGroup {
    pub fn all(config: &ModelConfig) -> Vec<ParamGroup> {
        let mut out = vec![ParamGroup::Embedding];
        for layer in 0..config.n_layers {
            out.push(ParamGroup::AttnNorm { layer });
            out.extend((0..config.n_heads).map(|head| ParamGroup::Head { layer, head }));
            out.push(ParamGroup::Mlp { layer });
        }
        out.push(ParamGroup::Unembedding);
        out
    }
}

impl From<ComponentId> for ParamGroup {
    fn from(c: ComponentId) -> Self {
        match c {
            ComponentId::Embedding => ParamGroup::Embedding,
            ComponentId::Head { layer, head } => ParamGroup::Head { layer, head },
            ComponentId::Mlp { layer } => ParamGroup::Mlp { layer },
            ComponentId::Unembedding => ParamGroup::Unembedding,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_round_trips() {
        for c in [
            ComponentId::Embedding,
            ComponentId::head(3, 1),
            ComponentId::mlp(2),
            ComponentId::Unembedding,
        ] {
            assert_eq!(c.to_string().parse::<ComponentId>().unwrap(), c);
        }
        assert!("L1X2".parse::<ComponentId>().is_err());
    }

    #[test]
    fn forward_order() {
        let mut v = vec![
            ComponentId::Unembedding,
            ComponentId::mlp(0),
            ComponentId::head(1, 0),
            ComponentId::head(0, 3),
            ComponentId::Embedding,
        ];
        v.sort();
        assert_eq!(
            v,
            vec![
                ComponentId::Embedding,
                ComponentId::head(0, 3),
                ComponentId::mlp(0),
                ComponentId::head(1, 0),
                ComponentId::Unembedding
            ]
        );
    }
}
