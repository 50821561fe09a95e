//! FLOPs accounting for retrieval models.
//!
//! A multiply-accumulate counts as two FLOPs; bias, activation and
//! normalization are not counted. Per-pair FLOPs cover one user-ad forward
//! pass. Serving FLOPs cover one request, i.e. `ads_per_request` candidates
//! scored against a single user.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_SPARSE_FIELDS: u64 = 200;
pub const DEFAULT_DENSE_DIM: u64 = 128;
pub const DEFAULT_ADS_PER_REQUEST: u64 = 1500;
/// Widest first layer the ad-side embedding cache can hold.
pub const DEFAULT_CACHE_LIMIT: u64 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    TwinTower,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ServingConfig {
    pub first_layer_opt: bool,
    pub ads_per_request: u64,
}

impl Default for ServingConfig {
    fn default() -> Self {
        Self {
            first_layer_opt: false,
            ads_per_request: DEFAULT_ADS_PER_REQUEST,
        }
    }
}

/// Size parameters of a model: `layers = [a0, a1, ..., an]` for an MLP, or
/// one layer list per tower for a twin-tower model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    #[serde(default)]
    pub layers: Vec<u64>,
    pub user_dim: u64,
    pub ad_dim: u64,
    #[serde(default)]
    pub serving: ServingConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_layers: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ad_layers: Option<Vec<u64>>,
}

impl ModelSpec {
    /// MLP with the input split evenly between user and ad features.
    pub fn mlp(layers: Vec<u64>) -> Self {
        let a0 = layers.first().copied().unwrap_or(0);
        let user_dim = a0 / 2;
        Self {
            kind: ModelKind::Mlp,
            layers,
            user_dim,
            ad_dim: a0 - user_dim,
            serving: ServingConfig::default(),
            user_layers: None,
            ad_layers: None,
        }
    }

    pub fn twin_tower(user_layers: Vec<u64>, ad_layers: Vec<u64>) -> Self {
        Self {
            kind: ModelKind::TwinTower,
            layers: Vec::new(),
            user_dim: user_layers.first().copied().unwrap_or(0),
            ad_dim: ad_layers.first().copied().unwrap_or(0),
            serving: ServingConfig::default(),
            user_layers: Some(user_layers),
            ad_layers: Some(ad_layers),
        }
    }

    pub fn with_serving(mut self, first_layer_opt: bool, ads_per_request: u64) -> Self {
        self.serving = ServingConfig {
            first_layer_opt,
            ads_per_request,
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.serving.ads_per_request == 0 {
            return bad("ads_per_request must be positive".into());
        }
        match self.kind {
            ModelKind::Mlp => {
                if self.layers.len() < 2 {
                    return bad(format!("MLP needs at least 2 sizes, got {:?}", self.layers));
                }
                if self.layers.contains(&0) {
                    return bad(format!("layer sizes must be positive: {:?}", self.layers));
                }
                if self.user_dim == 0 || self.ad_dim == 0 {
                    return bad("user_dim and ad_dim must be positive".into());
                }
                if self.user_dim + self.ad_dim != self.layers[0] {
                    return bad(format!(
                        "user_dim + ad_dim = {} but input dim is {}",
                        self.user_dim + self.ad_dim,
                        self.layers[0]
                    ));
                }
            }
            ModelKind::TwinTower => {
                let (Some(u), Some(a)) = (&self.user_layers, &self.ad_layers) else {
                    return bad("twin tower needs user_layers and ad_layers".into());
                };
                if u.len() < 2 || a.len() < 2 || u.contains(&0) || a.contains(&0) {
                    return bad("tower layer lists need at least 2 positive sizes".into());
                }
                if u.last() != a.last() {
                    return bad(format!(
                        "towers must end in the same embedding dim ({} vs {})",
                        u.last().unwrap(),
                        a.last().unwrap()
                    ));
                }
            }
        }
        Ok(())
    }

    /// Compact label such as `mlp[3328,1024,256,1]`.
    pub fn label(&self) -> String {
        let join = |v: &[u64]| v.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        match self.kind {
            ModelKind::Mlp => format!("mlp[{}]", join(&self.layers)),
            ModelKind::TwinTower => format!(
                "twin[{}|{}]",
                join(self.user_layers.as_deref().unwrap_or(&[])),
                join(self.ad_layers.as_deref().unwrap_or(&[]))
            ),
        }
    }
}

/// Input width of an MLP whose sparse fields share one embedding size.
pub fn input_dim(emb_dim: u64, n_sparse: u64, dense_dim: u64) -> u64 {
    emb_dim * n_sparse + dense_dim
}

pub fn default_input_dim(emb_dim: u64) -> u64 {
    input_dim(emb_dim, DEFAULT_SPARSE_FIELDS, DEFAULT_DENSE_DIM)
}

fn layer_products(layers: &[u64]) -> Vec<u64> {
    layers.windows(2).map(|w| 2 * w[0] * w[1]).collect()
}

/// Per-layer FLOPs of one forward pass through `layers`.
pub fn layer_flops(layers: &[u64]) -> Vec<u64> {
    layer_products(layers)
}

/// Forward FLOPs of one user-ad pair.
///
/// For a twin tower this is both towers plus the inner product, i.e. the
/// cost of scoring a pair with nothing cached.
pub fn flops_per_pair(spec: &ModelSpec) -> Result<u64> {
    spec.validate()?;
    Ok(match spec.kind {
        ModelKind::Mlp => layer_products(&spec.layers).iter().sum(),
        ModelKind::TwinTower => {
            let u = spec.user_layers.as_deref().unwrap();
            let a = spec.ad_layers.as_deref().unwrap();
            layer_products(u).iter().sum::<u64>()
                + layer_products(a).iter().sum::<u64>()
                + 2 * u.last().unwrap()
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServingMode {
    Naive,
    FirstLayerOpt,
    TwinTower,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsComponent {
    pub name: String,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub per_pair: u64,
    pub per_impression_serving: u64,
    pub mode: ServingMode,
    /// Per-layer terms of `per_pair`.
    pub pair_components: Vec<FlopsComponent>,
    /// Terms of `per_impression_serving`.
    pub serving_components: Vec<FlopsComponent>,
    /// Work moved offline to the ad-side cache, per ad. Not part of the
    /// serving total.
    pub cached_per_ad: u64,
}

pub fn serving_flops_per_impression(spec: &ModelSpec) -> Result<FlopsBreakdown> {
    serving_flops_with_limit(spec, DEFAULT_CACHE_LIMIT)
}

pub fn serving_flops_with_limit(spec: &ModelSpec, cache_limit: u64) -> Result<FlopsBreakdown> {
    let per_pair = flops_per_pair(spec)?;
    let ads = spec.serving.ads_per_request;
    let comp = |name: String, flops: u64| FlopsComponent { name, flops };

    let (mode, pair_components, serving_components, cached_per_ad) = match spec.kind {
        ModelKind::Mlp => {
            let pair: Vec<FlopsComponent> = layer_products(&spec.layers)
                .into_iter()
                .enumerate()
                .map(|(i, f)| comp(format!("layer{}", i + 1), f))
                .collect();
            if spec.serving.first_layer_opt {
                let a1 = spec.layers[1];
                if a1 > cache_limit {
                    return Err(Error::InvalidInput(format!(
                        "first layer width {a1} exceeds the ad cache limit {cache_limit}"
                    )));
                }
                let user_first = 2 * spec.user_dim * a1;
                let upper: u64 = layer_products(&spec.layers[1..]).iter().sum();
                let serving = vec![
                    comp("user_first_layer".into(), user_first),
                    comp("broadcast_add".into(), ads * a1),
                    comp("upper_layers".into(), ads * upper),
                ];
                (
                    ServingMode::FirstLayerOpt,
                    pair,
                    serving,
                    2 * spec.ad_dim * a1,
                )
            } else {
                let serving = pair
                    .iter()
                    .map(|c| comp(c.name.clone(), ads * c.flops))
                    .collect();
                (ServingMode::Naive, pair, serving, 0)
            }
        }
        ModelKind::TwinTower => {
            let u = spec.user_layers.as_deref().unwrap();
            let a = spec.ad_layers.as_deref().unwrap();
            let user: u64 = layer_products(u).iter().sum();
            let ad: u64 = layer_products(a).iter().sum();
            let dot = 2 * u.last().unwrap();
            let pair = vec![
                comp("user_tower".into(), user),
                comp("ad_tower".into(), ad),
                comp("inner_product".into(), dot),
            ];
            let serving = vec![
                comp("user_tower".into(), user),
                comp("inner_products".into(), ads * dot),
            ];
            (ServingMode::TwinTower, pair, serving, ad)
        }
    };
    Ok(FlopsBreakdown {
        per_pair,
        per_impression_serving: serving_components.iter().map(|c| c.flops).sum(),
        mode,
        pair_components,
        serving_components,
        cached_per_ad,
    })
}
