//! Greedy width search: walk from the widest to the narrowest structure one
//! decrement at a time, always taking the cheapest loss per saved MAC.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::structure::{EdgeId, StructureSample};

/// The frontier from `G_max` to `G_min` and `levels` structures sampled
/// evenly along it, widest first. `metric` is any loss to minimize and need
/// not be differentiable.
pub fn greedy_width_search<F>(model: &Model, levels: usize, mut metric: F) -> Result<Vec<StructureSample>>
where
    F: FnMut(&StructureSample) -> Result<f64>,
{
    if levels == 0 {
        return Err(Error::Empty("no levels requested".into()));
    }
    let n = model.num_variants();
    let tile = model.topology_tile()?;
    let stages = model.stages();
    let make = |inter: &BTreeMap<EdgeId, usize>| StructureSample::new(inter.clone(), stages, tile.clone());
    let mut current: BTreeMap<EdgeId, usize> = EdgeId::ALL.into_iter().map(|e| (e, n - 1)).collect();
    let mut loss = metric(&make(&current))?;
    let mut cost = model.cost(&current)?;
    let mut frontier = vec![make(&current)];
    loop {
        let mut best: Option<(f64, BTreeMap<EdgeId, usize>, f64, f64)> = None;
        for e in EdgeId::ALL {
            if current[&e] == 0 {
                continue;
            }
            let mut cand = current.clone();
            *cand.get_mut(&e).unwrap() -= 1;
            let c = model.cost(&cand)?;
            let l = metric(&make(&cand))?;
            let saved = (cost - c).max(f64::MIN_POSITIVE);
            let score = (l - loss) / saved;
            if best.as_ref().is_none_or(|b| score < b.0) {
                best = Some((score, cand, l, c));
            }
        }
        match best {
            Some((_, cand, l, c)) => {
                current = cand;
                loss = l;
                cost = c;
                frontier.push(make(&current));
            }
            None => break,
        }
    }
    if frontier.is_empty() {
        return Err(Error::Empty("empty frontier".into()));
    }
    if levels == 1 {
        return Ok(vec![frontier.swap_remove(0)]);
    }
    let last = frontier.len() - 1;
    Ok((0..levels).map(|i| frontier[(i * last + (levels - 1) / 2) / (levels - 1)].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use candle_core::Device;

    #[test]
    fn single_level_is_widest_and_frontier_descends() {
        let model = Model::new(ModelConfig::default(), &Device::Cpu).unwrap();
        let widest = greedy_width_search(&model, 1, |_| Ok(0.0)).unwrap();
        assert_eq!(widest.len(), 1);
        assert!(widest[0].inter.values().all(|&i| i == 4));
        let metric = |s: &StructureSample| Ok(-(s.inter.values().sum::<usize>() as f64));
        let all = greedy_width_search(&model, 21, metric).unwrap();
        let costs: Vec<f64> = all.iter().map(|s| model.cost(&s.inter).unwrap()).collect();
        assert!(costs.windows(2).all(|w| w[0] > w[1]), "{costs:?}");
        assert!(all.last().unwrap().inter.values().all(|&i| i == 0));
    }
}
