//! Per-style low-rank adapters with hard routing by style id.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Double,
    Single,
}

/// Which projection stack inside a block a weight belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Img,
    Txt,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proj {
    Q,
    K,
    V,
    O,
    Ff1,
    Ff2,
}

impl Proj {
    pub const ALL: [Proj; 6] = [Proj::Q, Proj::K, Proj::V, Proj::O, Proj::Ff1, Proj::Ff2];

    pub fn is_attention(self) -> bool {
        matches!(self, Proj::Q | Proj::K | Proj::V | Proj::O)
    }

    fn name(self) -> &'static str {
        match self {
            Proj::Q => "q",
            Proj::K => "k",
            Proj::V => "v",
            Proj::O => "o",
            Proj::Ff1 => "ff1",
            Proj::Ff2 => "ff2",
        }
    }
}

/// A linear layer in the backbone that can carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SiteId {
    pub kind: BlockKind,
    /// Index among blocks of the same kind.
    pub index: usize,
    pub branch: Branch,
    pub proj: Proj,
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            BlockKind::Double => {
                let b = if self.branch == Branch::Img { "img" } else { "txt" };
                write!(f, "double.{}.{}.{}", self.index, b, self.proj.name())
            }
            BlockKind::Single => write!(f, "single.{}.{}", self.index, self.proj.name()),
        }
    }
}

impl SiteId {
    pub fn parse(s: &str) -> Option<SiteId> {
        let parts: Vec<&str> = s.split('.').collect();
        let proj = |p: &str| Proj::ALL.into_iter().find(|x| x.name() == p);
        match parts.as_slice() {
            ["double", i, b, p] => Some(SiteId {
                kind: BlockKind::Double,
                index: i.parse().ok()?,
                branch: match *b {
                    "img" => Branch::Img,
                    "txt" => Branch::Txt,
                    _ => return None,
                },
                proj: proj(p)?,
            }),
            ["single", i, p] => Some(SiteId {
                kind: BlockKind::Single,
                index: i.parse().ok()?,
                branch: Branch::Joint,
                proj: proj(p)?,
            }),
            _ => None,
        }
    }
}

/// Which streams and projections receive adapters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiteSelection {
    pub double_stream: bool,
    pub single_stream: bool,
    pub attention: bool,
    pub feed_forward: bool,
}

impl Default for SiteSelection {
    fn default() -> Self {
        Self {
            double_stream: true,
            single_stream: true,
            attention: true,
            feed_forward: true,
        }
    }
}

/// The set of adapted sites, identical for every expert.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdapterSiteMap {
    sites: BTreeSet<SiteId>,
}

impl AdapterSiteMap {
    pub fn from_selection(config: &ModelConfig, sel: &SiteSelection) -> Self {
        let projs: Vec<Proj> = Proj::ALL
            .into_iter()
            .filter(|p| if p.is_attention() { sel.attention } else { sel.feed_forward })
            .collect();
        let mut sites = BTreeSet::new();
        if sel.double_stream {
            for index in 0..config.double_blocks {
                for branch in [Branch::Img, Branch::Txt] {
                    for &proj in &projs {
                        sites.insert(SiteId {
                            kind: BlockKind::Double,
                            index,
                            branch,
                            proj,
                        });
                    }
                }
            }
        }
        if sel.single_stream {
            for index in 0..config.single_blocks {
                for &proj in &projs {
                    sites.insert(SiteId {
                        kind: BlockKind::Single,
                        index,
                        branch: Branch::Joint,
                        proj,
                    });
                }
            }
        }
        Self { sites }
    }

    pub fn contains(&self, site: &SiteId) -> bool {
        self.sites.contains(site)
    }

    pub fn iter(&self) -> impl Iterator<Item = &SiteId> {
        self.sites.iter()
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn has_kind(&self, kind: BlockKind) -> bool {
        self.sites.iter().any(|s| s.kind == kind)
    }
}

/// Input and output widths of a site's base weight.
pub fn site_dims(config: &ModelConfig, site: &SiteId) -> (usize, usize) {
    let d = config.dim;
    let hidden = config.hidden_dim();
    match site.proj {
        Proj::Q | Proj::K | Proj::V | Proj::O => (d, d),
        Proj::Ff1 => (d, hidden),
        Proj::Ff2 => (hidden, d),
    }
}

/// One low-rank pair: `A: r × d_in`, `B: d_out × r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl LoraPair {
    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraExpert {
    pub style_id: usize,
    pub pairs: BTreeMap<SiteId, LoraPair>,
}

impl LoraExpert {
    pub fn param_count(&self) -> usize {
        self.pairs.values().map(LoraPair::param_count).sum()
    }

    pub fn pair(&self, site: &SiteId) -> Option<&LoraPair> {
        self.pairs.get(site)
    }
}

/// All experts attached to one model.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapters {
    pub rank: usize,
    pub gamma: f64,
    pub selection: SiteSelection,
    pub sites: AdapterSiteMap,
    pub experts: Vec<LoraExpert>,
}

impl LoraAdapters {
    /// `s = γ / r`
    pub fn scale(&self) -> f64 {
        self.gamma / self.rank as f64
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn expert(&self, style_id: usize) -> Result<&LoraExpert> {
        let idx = route_expert(style_id, self.experts.len())?;
        Ok(&self.experts[idx])
    }

    pub fn expert_mut(&mut self, style_id: usize) -> Result<&mut LoraExpert> {
        let idx = route_expert(style_id, self.experts.len())?;
        Ok(&mut self.experts[idx])
    }

    pub fn trainable_param_count(&self) -> usize {
        self.experts.iter().map(LoraExpert::param_count).sum()
    }

    /// Builds `experts` experts over `sites` with Gaussian `A` (variance 1/d_in) and zero `B`.
    pub fn new(
        config: &ModelConfig,
        experts: usize,
        rank: usize,
        gamma: f64,
        selection: SiteSelection,
        seed: u64,
    ) -> Result<Self> {
        if experts == 0 {
            return Err(Error::Config("need at least one expert".into()));
        }
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::Config("LoRA gamma must be finite and positive".into()));
        }
        let sites = AdapterSiteMap::from_selection(config, &selection);
        let experts = (0..experts)
            .map(|style_id| {
                let pairs = sites
                    .iter()
                    .map(|site| {
                        let (d_in, d_out) = site_dims(config, site);
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                            seed,
                            &format!("expert/{style_id}/{site}/A"),
                            0,
                        ));
                        let std = 1.0 / (d_in as f64).sqrt();
                        let a = Array2::from_shape_fn((rank, d_in), |_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            z * std
                        });
                        (
                            *site,
                            LoraPair {
                                a,
                                b: Array2::zeros((d_out, rank)),
                            },
                        )
                    })
                    .collect();
                LoraExpert { style_id, pairs }
            })
            .collect();
        Ok(Self {
            rank,
            gamma,
            selection,
            sites,
            experts,
        })
    }
}

/// Hard identity routing: style `s` activates expert `s`.
pub fn route_expert(style_id: usize, num_experts: usize) -> Result<usize> {
    if style_id < num_experts {
        Ok(style_id)
    } else {
        Err(Error::UnknownStyle {
            id: style_id,
            count: num_experts,
        })
    }
}

/// `y = W·x + b + scale · B·(A·x)` for a single input vector.
pub fn lora_forward(
    x: &Array1<f64>,
    w_base: &Array2<f64>,
    bias: Option<&Array1<f64>>,
    pair: &LoraPair,
    scale: f64,
) -> Result<Array1<f64>> {
    let (d_out, d_in) = w_base.dim();
    if x.len() != d_in {
        return Err(Error::Shape(format!("input has {} values, weight expects {d_in}", x.len())));
    }
    if pair.a.ncols() != d_in || pair.b.nrows() != d_out || pair.a.nrows() != pair.b.ncols() {
        return Err(Error::Shape(format!(
            "rank mismatch: A {:?}, B {:?}, W {:?}",
            pair.a.dim(),
            pair.b.dim(),
            w_base.dim()
        )));
    }
    let mut y = w_base.dot(x);
    if let Some(b) = bias {
        y += b;
    }
    let u = pair.a.dot(x);
    y.scaled_add(scale, &pair.b.dot(&u));
    Ok(y)
}
