use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Precision};

/// Exponential moving average of online weights into the offline copy:
/// `θ_k ← m·θ_k + (1 − m)·θ_q` for every trainable offline parameter.
///
/// The offline store must mirror the online store by name for every prefix
/// it contains. Buffers (non-trainable entries) are left alone.
pub fn momentum_update(online: &ParamStore, offline: &mut ParamStore, m: f64, precision: Precision) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidArgument(format!("momentum {m} outside [0, 1]")));
    }
    check_isomorphic(online, offline)?;
    let ids: Vec<_> = offline.trainable_ids();
    for id in ids {
        let name = offline.get(id).name.clone();
        let src = online.by_name(&name).expect("checked").value.data().to_vec();
        for (k, q) in offline.value_mut(id).data_mut().iter_mut().zip(src) {
            *k = precision.round(m * *k + (1.0 - m) * q);
        }
    }
    Ok(())
}

fn top_prefix(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Every offline parameter exists online with the same shape and
/// trainability, and every online parameter under an offline top-level
/// prefix exists offline.
pub fn check_isomorphic(online: &ParamStore, offline: &ParamStore) -> Result<()> {
    let mut prefixes = std::collections::BTreeSet::new();
    for (_, p) in offline.iter() {
        prefixes.insert(top_prefix(&p.name).to_string());
        let Some(q) = online.by_name(&p.name) else {
            return Err(Error::StructureMismatch {
                path: p.name.clone(),
                reason: "missing from online network".into(),
            });
        };
        if q.value.shape() != p.value.shape() {
            return Err(Error::StructureMismatch {
                path: p.name.clone(),
                reason: format!("online {:?}, offline {:?}", q.value.shape(), p.value.shape()),
            });
        }
        if q.trainable != p.trainable {
            return Err(Error::StructureMismatch {
                path: p.name.clone(),
                reason: format!("online trainable {}, offline trainable {}", q.trainable, p.trainable),
            });
        }
    }
    for (_, q) in online.iter() {
        if prefixes.contains(top_prefix(&q.name)) && offline.by_name(&q.name).is_none() {
            return Err(Error::StructureMismatch {
                path: q.name.clone(),
                reason: "missing from offline network".into(),
            });
        }
    }
    Ok(())
}

/// Copies the parameters under `prefixes` into a new store (initial offline
/// network).
pub fn offline_copy(online: &ParamStore, prefixes: &[&str]) -> Result<ParamStore> {
    let mut out = ParamStore::new();
    for (_, p) in online.iter() {
        if prefixes.iter().any(|pre| p.name.starts_with(pre)) {
            out.add(p.name.clone(), p.value.clone(), p.trainable)?;
        }
    }
    Ok(out)
}
