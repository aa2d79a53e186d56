//! Small multilayer perceptrons stored in a head [`ArrayMap`].

use candle_core::Tensor;

use crate::error::{input_err, Result};
use crate::ops::{gelu, linear, Precision};
use crate::vit::{init_tensor, ArrayMap, InitKind};

/// Adds `{prefix}.{i}.weight/bias` for consecutive `dims` pairs.
pub(crate) fn init_mlp(
    map: &mut ArrayMap,
    prefix: &str,
    dims: &[usize],
    seed: u64,
    precision: Precision,
) -> Result<()> {
    for (i, pair) in dims.windows(2).enumerate() {
        let w = format!("{prefix}.{i}.weight");
        let b = format!("{prefix}.{i}.bias");
        map.insert(w.clone(), init_tensor(InitKind::Xavier, &[pair[0], pair[1]], seed, &format!("head/{w}"), precision)?);
        map.insert(b, init_tensor(InitKind::Zeros, &[pair[1]], seed, "", precision)?);
    }
    Ok(())
}

/// Number of linear layers stored under `prefix`.
pub(crate) fn mlp_layers(map: &ArrayMap, prefix: &str) -> usize {
    (0..).take_while(|i| map.contains_key(&format!("{prefix}.{i}.weight"))).count()
}

/// Linear layers with GELU between them (none after the last).
pub(crate) fn mlp_forward(map: &ArrayMap, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let n = mlp_layers(map, prefix);
    if n == 0 {
        return Err(input_err!("head `{prefix}` is missing"));
    }
    let mut x = x.clone();
    for i in 0..n {
        let w = &map[&format!("{prefix}.{i}.weight")];
        let b = map
            .get(&format!("{prefix}.{i}.bias"))
            .ok_or_else(|| input_err!("`{prefix}.{i}.bias` is missing"))?;
        x = linear(&x, w, Some(b))?;
        if i + 1 < n {
            x = gelu(&x)?;
        }
    }
    Ok(x)
}
