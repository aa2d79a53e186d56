use std::collections::BTreeMap;

use candle_core::{DType, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{GroupId, ViTConfig};
use crate::error::{input_err, Error, Result};
use crate::ops::{tensor_from_f64, Precision};

/// Named arrays of one parameter group.
pub type ArrayMap = BTreeMap<String, Tensor>;

/// Initialization scheme for a single array.
#[derive(Clone, Copy, Debug)]
pub(crate) enum InitKind {
    /// Uniform Glorot on an `(in, out)` matrix.
    Xavier,
    Zeros,
    Ones,
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
}

/// Deterministic array initialization. Each array draws from its own stream,
/// keyed by `(seed, key)`, so adding or removing other arrays never shifts it.
pub(crate) fn init_tensor(
    kind: InitKind,
    shape: &[usize],
    seed: u64,
    key: &str,
    precision: Precision,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut rng = keyed_rng(seed, key);
    let data: Vec<f64> = match kind {
        InitKind::Zeros => vec![0.0; n],
        InitKind::Ones => vec![1.0; n],
        InitKind::Xavier => {
            let (fan_in, fan_out) = match shape {
                [a, b] => (*a, *b),
                _ => (n, n),
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-limit..limit)).collect()
        }
        InitKind::TruncNormal(std) => {
            let normal = Normal::new(0.0, std).expect("positive std");
            (0..n)
                .map(|_| loop {
                    let v: f64 = normal.sample(&mut rng);
                    if v.abs() <= 2.0 * std {
                        break v;
                    }
                })
                .collect()
        }
    };
    tensor_from_f64(&data, shape, precision)
}

pub(crate) fn keyed_rng(seed: u64, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(s)
}

/// Shapes and init schemes of one pre-norm transformer block, names relative to the block.
pub(crate) fn block_shapes(dim: usize, hidden: usize) -> Vec<(&'static str, Vec<usize>, InitKind)> {
    vec![
        ("norm1.weight", vec![dim], InitKind::Ones),
        ("norm1.bias", vec![dim], InitKind::Zeros),
        ("attn.qkv.weight", vec![dim, 3 * dim], InitKind::Xavier),
        ("attn.qkv.bias", vec![3 * dim], InitKind::Zeros),
        ("attn.proj.weight", vec![dim, dim], InitKind::Xavier),
        ("attn.proj.bias", vec![dim], InitKind::Zeros),
        ("norm2.weight", vec![dim], InitKind::Ones),
        ("norm2.bias", vec![dim], InitKind::Zeros),
        ("mlp.fc1.weight", vec![dim, hidden], InitKind::Xavier),
        ("mlp.fc1.bias", vec![hidden], InitKind::Zeros),
        ("mlp.fc2.weight", vec![hidden, dim], InitKind::Xavier),
        ("mlp.fc2.bias", vec![dim], InitKind::Zeros),
    ]
}

type ShapeTable = BTreeMap<GroupId, Vec<(String, Vec<usize>, InitKind)>>;

/// Every backbone array, its shape and init scheme, as a function of the config.
fn backbone_layout(config: &ViTConfig) -> ShapeTable {
    let d = config.embed_dim;
    let mut table = ShapeTable::new();
    let mut emb = vec![
        ("patch_embed.weight".to_string(), vec![config.patch_dim(), d], InitKind::Xavier),
        ("patch_embed.bias".to_string(), vec![d], InitKind::Zeros),
        ("pos_embed".to_string(), vec![1, config.num_tokens(), d], InitKind::TruncNormal(0.02)),
    ];
    if config.use_class_token {
        emb.push(("cls_token".to_string(), vec![1, 1, d], InitKind::TruncNormal(0.02)));
    }
    table.insert(GroupId::Embedding, emb);
    for i in 1..=config.depth {
        let block = block_shapes(d, config.mlp_hidden())
            .into_iter()
            .map(|(n, s, k)| (n.to_string(), s, k))
            .collect();
        table.insert(GroupId::Block(i), block);
    }
    table.insert(
        GroupId::FinalNorm,
        vec![
            ("weight".to_string(), vec![d], InitKind::Ones),
            ("bias".to_string(), vec![d], InitKind::Zeros),
        ],
    );
    table
}

/// All network weights, partitioned into parameter groups.
///
/// `Clone` is shallow: clones share storage with the original. Use
/// [`ParamSet::deep_clone`] for an independent snapshot.
#[derive(Clone, Debug)]
pub struct ParamSet {
    config: ViTConfig,
    groups: BTreeMap<GroupId, ArrayMap>,
    pub metadata: BTreeMap<String, String>,
}

impl ParamSet {
    /// Assembles a parameter set and checks it against the config's shape table.
    pub fn from_parts(
        config: ViTConfig,
        groups: BTreeMap<GroupId, ArrayMap>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        config.validate()?;
        let p = Self {
            config,
            groups,
            metadata,
        };
        p.shape_audit()?;
        Ok(p)
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn group_ids(&self) -> impl Iterator<Item = GroupId> + '_ {
        self.groups.keys().copied()
    }

    pub fn group(&self, id: GroupId) -> Option<&ArrayMap> {
        self.groups.get(&id)
    }

    pub fn groups(&self) -> &BTreeMap<GroupId, ArrayMap> {
        &self.groups
    }

    pub fn get(&self, id: GroupId, name: &str) -> Result<&Tensor> {
        self.groups
            .get(&id)
            .and_then(|g| g.get(name))
            .ok_or_else(|| input_err!("parameter `{id}/{name}` is missing"))
    }

    pub fn head(&self) -> Option<&ArrayMap> {
        self.groups.get(&GroupId::Head)
    }

    pub fn has_head(&self) -> bool {
        self.groups.contains_key(&GroupId::Head)
    }

    /// Installs (or replaces) the task/SSL head group.
    pub fn set_head(&mut self, head: ArrayMap) {
        self.groups.insert(GroupId::Head, head);
    }

    pub fn remove_head(&mut self) -> Option<ArrayMap> {
        self.groups.remove(&GroupId::Head)
    }

    /// Encoder-only view: every group except `head`.
    pub fn without_head(&self) -> ParamSet {
        let mut p = self.clone();
        p.groups.remove(&GroupId::Head);
        p
    }

    pub fn precision(&self) -> Precision {
        self.groups
            .values()
            .flat_map(|g| g.values())
            .next()
            .and_then(|t| Precision::from_dtype(t.dtype()))
            .unwrap_or_default()
    }

    pub fn dtype(&self) -> DType {
        self.precision().dtype()
    }

    pub fn to_precision(&self, precision: Precision) -> Result<ParamSet> {
        self.map_arrays(|t| Ok(t.detach().to_dtype(precision.dtype())?.copy()?))
    }

    /// Independent copy; detached from any autograd variables.
    pub fn deep_clone(&self) -> Result<ParamSet> {
        self.map_arrays(|t| Ok(t.detach().copy()?))
    }

    fn map_arrays(&self, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<ParamSet> {
        let mut groups = BTreeMap::new();
        for (id, g) in &self.groups {
            let mut m = ArrayMap::new();
            for (name, t) in g {
                m.insert(name.clone(), f(t)?);
            }
            groups.insert(*id, m);
        }
        Ok(ParamSet {
            config: self.config.clone(),
            groups,
            metadata: self.metadata.clone(),
        })
    }

    pub fn group_param_count(&self, id: GroupId) -> usize {
        self.groups
            .get(&id)
            .map(|g| g.values().map(|t| t.elem_count()).sum())
            .unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.groups.keys().map(|&id| self.group_param_count(id)).sum()
    }

    /// Checks group ids and every backbone array shape against the config.
    /// The head group is task-specific and only checked for existence of arrays.
    pub fn shape_audit(&self) -> Result<()> {
        let layout = backbone_layout(&self.config);
        for (id, arrays) in &layout {
            let group = self
                .groups
                .get(id)
                .ok_or_else(|| Error::Format(format!("group `{id}` is missing")))?;
            if group.len() != arrays.len() {
                return Err(Error::Format(format!(
                    "group `{id}` has {} arrays, expected {}",
                    group.len(),
                    arrays.len()
                )));
            }
            for (name, shape, _) in arrays {
                let t = group
                    .get(name)
                    .ok_or_else(|| Error::Format(format!("array `{id}/{name}` is missing")))?;
                if t.dims() != shape.as_slice() {
                    return Err(Error::Format(format!(
                        "array `{id}/{name}` has shape {:?}, expected {shape:?}",
                        t.dims()
                    )));
                }
            }
        }
        for id in self.groups.keys() {
            if *id != GroupId::Head && !layout.contains_key(id) {
                return Err(Error::Format(format!(
                    "unexpected group `{id}` for depth {}",
                    self.config.depth
                )));
            }
        }
        Ok(())
    }

    /// Converts the arrays of `groups` into autograd variables and returns them.
    /// Variables share storage with the set, so optimizer updates are visible here.
    pub fn make_trainable(
        &mut self,
        groups: impl IntoIterator<Item = GroupId>,
    ) -> Result<Vec<Var>> {
        let mut vars = Vec::new();
        for id in groups {
            let g = self
                .groups
                .get_mut(&id)
                .ok_or_else(|| input_err!("cannot train missing group `{id}`"))?;
            for t in g.values_mut() {
                let v = Var::from_tensor(t)?;
                *t = v.as_tensor().clone();
                vars.push(v);
            }
        }
        Ok(vars)
    }

    /// Turns every variable back into a constant (values are copied).
    pub fn freeze_all(&mut self) -> Result<()> {
        for g in self.groups.values_mut() {
            for t in g.values_mut() {
                if t.is_variable() {
                    *t = t.detach().copy()?;
                }
            }
        }
        Ok(())
    }

    /// Bitwise equality of one group between two sets.
    pub fn group_bit_identical(&self, other: &ParamSet, id: GroupId) -> Result<bool> {
        let (Some(a), Some(b)) = (self.groups.get(&id), other.groups.get(&id)) else {
            return Ok(false);
        };
        if a.len() != b.len() {
            return Ok(false);
        }
        for ((na, ta), (nb, tb)) in a.iter().zip(b) {
            if na != nb || ta.dims() != tb.dims() || tensor_le_bytes(ta)? != tensor_le_bytes(tb)? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// SHA-256 over group ids, array names, shapes and raw little-endian payloads.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (id, g) in &self.groups {
            for (name, t) in g {
                h.update(format!("{id}/{name}:{:?}:{:?};", t.dims(), t.dtype()).as_bytes());
                h.update(tensor_le_bytes(t)?);
            }
        }
        Ok(hex::encode(h.finalize()))
    }


    pub(crate) fn groups_mut(&mut self) -> &mut BTreeMap<GroupId, ArrayMap> {
        &mut self.groups
    }
}

/// Raw little-endian bytes of a contiguous copy of `t` (f32 or f64).
pub(crate) fn tensor_le_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.detach().flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat
            .to_vec1::<f32>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        DType::F64 => flat
            .to_vec1::<f64>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        other => return Err(Error::Format(format!("unsupported dtype {other:?}"))),
    })
}

/// Fresh encoder: every backbone group, deterministically initialized from `seed`.
pub fn init_vit(config: &ViTConfig, seed: u64, precision: Precision) -> Result<ParamSet> {
    config.validate()?;
    let mut groups = BTreeMap::new();
    for (id, arrays) in backbone_layout(config) {
        let mut m = ArrayMap::new();
        for (name, shape, kind) in arrays {
            let key = format!("{id}/{name}");
            m.insert(name, init_tensor(kind, &shape, seed, &key, precision)?);
        }
        groups.insert(id, m);
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("rng_seed".to_string(), seed.to_string());
    metadata.insert("ssl_method".to_string(), "none".to_string());
    Ok(ParamSet {
        config: config.clone(),
        groups,
        metadata,
    })
}

/// Keeps the embedding, blocks `1..=n` and the final norm as an independent `n`-block encoder.
/// The source's final-norm weights are carried over; any head is dropped.
pub fn truncate(params: &ParamSet, n: usize) -> Result<ParamSet> {
    let depth = params.depth();
    if n < 1 || n > depth {
        return Err(input_err!("truncation depth {n} outside [1, {depth}]"));
    }
    let mut config = params.config.clone();
    config.depth = n;
    let mut groups = BTreeMap::new();
    for (id, g) in &params.groups {
        let keep = match id {
            GroupId::Embedding | GroupId::FinalNorm => true,
            GroupId::Block(i) => *i <= n,
            GroupId::Head => false,
        };
        if keep {
            let mut m = ArrayMap::new();
            for (name, t) in g {
                m.insert(name.clone(), t.detach().copy()?);
            }
            groups.insert(*id, m);
        }
    }
    let mut metadata = params.metadata.clone();
    metadata.insert("truncated_from_depth".to_string(), depth.to_string());
    metadata.insert("truncated_to_depth".to_string(), n.to_string());
    metadata.insert("truncation_source_checksum".to_string(), params.without_head().checksum()?);
    let out = ParamSet {
        config,
        groups,
        metadata,
    };
    out.shape_audit()?;
    Ok(out)
}

impl ViTConfig {
    /// Parameter count of a freshly initialized encoder, by group.
    pub fn group_sizes(&self) -> Result<BTreeMap<GroupId, usize>> {
        self.validate()?;
        Ok(backbone_layout(self)
            .into_iter()
            .map(|(id, arrays)| {
                (
                    id,
                    arrays.iter().map(|(_, s, _)| s.iter().product::<usize>()).sum(),
                )
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::Pooling;
    use proptest::prelude::*;

    fn tiny() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            depth: 2,
            embed_dim: 8,
            num_heads: 2,
            mlp_ratio: 2.0,
            in_channels: 1,
            use_class_token: true,
            pooling: Pooling::ClassToken,
        }
    }

    #[test]
    fn tiny_init_has_expected_groups() {
        let p = init_vit(&tiny(), 0, Precision::F32).unwrap();
        let ids: Vec<String> = p.group_ids().map(|g| g.to_string()).collect();
        assert_eq!(ids, ["embedding", "block_1", "block_2", "final_norm"]);
        assert_eq!(p.config().num_patches(), 4);
        assert_eq!(p.get(GroupId::Embedding, "pos_embed").unwrap().dims(), &[1, 5, 8]);
    }

    #[test]
    fn init_is_bit_deterministic() {
        let a = init_vit(&tiny(), 3, Precision::F32).unwrap();
        let b = init_vit(&tiny(), 3, Precision::F32).unwrap();
        assert_eq!(a.checksum().unwrap(), b.checksum().unwrap());
        let c = init_vit(&tiny(), 4, Precision::F32).unwrap();
        assert_ne!(a.checksum().unwrap(), c.checksum().unwrap());
    }

    #[test]
    fn pos_embed_without_class_token() {
        let cfg = ViTConfig {
            use_class_token: false,
            pooling: Pooling::MeanPatch,
            ..tiny()
        };
        let p = init_vit(&cfg, 0, Precision::F32).unwrap();
        assert_eq!(p.get(GroupId::Embedding, "pos_embed").unwrap().dims(), &[1, 4, 8]);
        assert!(p.get(GroupId::Embedding, "cls_token").is_err());
    }

    #[test]
    fn invalid_config_is_rejected_at_init() {
        let cfg = ViTConfig {
            num_heads: 3,
            ..tiny()
        };
        assert!(matches!(init_vit(&cfg, 0, Precision::F32), Err(Error::Config(_))));
    }

    #[test]
    fn truncate_bookkeeping() {
        let cfg = ViTConfig {
            depth: 12,
            ..tiny()
        };
        let p = init_vit(&cfg, 1, Precision::F32).unwrap();
        let t = truncate(&p, 9).unwrap();
        let dropped: usize = (10..=12).map(|i| p.group_param_count(GroupId::Block(i))).sum();
        assert_eq!(t.param_count(), p.param_count() - dropped);
        for id in t.group_ids() {
            assert!(t.group_bit_identical(&p, id).unwrap(), "{id}");
        }
        assert_eq!(t.metadata["truncated_from_depth"], "12");
        assert!(truncate(&p, 0).is_err());
        assert!(truncate(&p, 13).is_err());
    }

    #[test]
    fn deep_clone_is_independent_of_variables() {
        let mut p = init_vit(&tiny(), 0, Precision::F32).unwrap();
        let snap = p.deep_clone().unwrap();
        let vars = p.make_trainable([GroupId::Block(1)]).unwrap();
        for v in &vars {
            v.set(&v.as_tensor().affine(0.0, 1.0).unwrap()).unwrap();
        }
        assert!(!p.group_bit_identical(&snap, GroupId::Block(1)).unwrap());
        assert!(p.group_bit_identical(&snap, GroupId::Block(2)).unwrap());
    }

    fn arb_config() -> impl Strategy<Value = ViTConfig> {
        (1usize..4, 1usize..5, 1usize..4, 1usize..4, 1usize..3, any::<bool>(), 1usize..3).prop_map(
            |(patch, grid, depth, heads, dim_mult, cls, ch)| ViTConfig {
                image_size: patch * grid,
                patch_size: patch,
                depth,
                embed_dim: heads * 2 * dim_mult,
                num_heads: heads,
                mlp_ratio: 1.5,
                in_channels: ch,
                use_class_token: cls,
                pooling: if cls { Pooling::ClassToken } else { Pooling::MeanPatch },
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10))]
        #[test]
        fn shape_audit_holds_for_random_configs(cfg in arb_config(), seed in 0u64..1000) {
            let p = init_vit(&cfg, seed, Precision::F32).unwrap();
            p.shape_audit().unwrap();
            let sizes = cfg.group_sizes().unwrap();
            for (id, n) in sizes {
                prop_assert_eq!(p.group_param_count(id), n);
            }
        }
    }
}
