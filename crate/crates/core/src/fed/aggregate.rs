use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Error, Result};
use crate::model::ParamSet;

/// Full adapter parameters `W_k` from client `k`, trained on `n_k` examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Update {
    pub client: u32,
    pub n_k: u64,
    pub params: ParamSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    pub params: ParamSet,
    pub round: u32,
}

/// Sample-count weights `n_k / n`, in the order of `updates`.
pub fn weights(updates: &[Update]) -> Vec<f64> {
    let n: u64 = updates.iter().map(|u| u.n_k).sum();
    updates.iter().map(|u| u.n_k as f64 / n as f64).collect()
}

/// `W' = sum_k (n_k / n) W_k` over exactly the clients `0..expected`,
/// accumulated in the order given.
pub fn aggregate(updates: &[Update], expected: usize, round: u32) -> Result<GlobalModel> {
    let got: BTreeSet<u32> = updates.iter().map(|u| u.client).collect();
    if got.len() != updates.len() {
        return Err(Error::Protocol(format!(
            "duplicate update in round {round}"
        )));
    }
    if let Some(k) = (0..expected as u32).find(|k| !got.contains(k)) {
        return Err(Error::Protocol(format!(
            "client {k} missing from round {round}"
        )));
    }
    if got.len() != expected {
        return Err(Error::Protocol(format!(
            "unexpected client in round {round}"
        )));
    }
    if updates.iter().any(|u| u.n_k == 0) {
        return contract_err("update backed by zero examples");
    }
    let w = weights(updates);
    let first = &updates[0].params;
    let mut params = ParamSet::new();
    for (name, t0) in first {
        let mut acc = t0.scale(w[0]);
        for (u, &wk) in updates.iter().zip(&w).skip(1) {
            let Some(t) = u.params.get(name) else {
                return Err(Error::Protocol(format!(
                    "client {} omitted {name}",
                    u.client
                )));
            };
            if t.shape() != t0.shape() {
                return dim_err(format!("{name}: {:?} vs {:?}", t.shape(), t0.shape()));
            }
            acc.add_assign(&t.scale(wk))?;
        }
        params.insert(name.clone(), acc);
    }
    if updates.iter().any(|u| u.params.len() != first.len()) {
        return Err(Error::Protocol(
            "clients sent different parameter sets".into(),
        ));
    }
    Ok(GlobalModel { params, round })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Rng, Tensor};
    use proptest::prelude::*;

    fn upd(client: u32, n_k: u64, v: Vec<f64>) -> Update {
        Update {
            client,
            n_k,
            params: ParamSet::from([("w".to_string(), Tensor::vector(v))]),
        }
    }

    #[test]
    fn weighted_mean_hand_case() {
        let g = aggregate(&[upd(0, 1, vec![2.0]), upd(1, 3, vec![4.0])], 2, 0).unwrap();
        assert_eq!(g.params["w"].data(), &[3.5]);
    }

    #[test]
    fn missing_or_extra_clients_are_protocol_errors() {
        let r = aggregate(&[upd(0, 1, vec![2.0])], 2, 4);
        assert!(matches!(r, Err(Error::Protocol(m)) if m.contains("client 1")));
        let r = aggregate(&[upd(0, 1, vec![2.0]), upd(0, 1, vec![2.0])], 2, 0);
        assert!(matches!(r, Err(Error::Protocol(_))));
        let r = aggregate(&[upd(0, 1, vec![2.0]), upd(5, 1, vec![2.0])], 1, 0);
        assert!(matches!(r, Err(Error::Protocol(_))));
    }

    #[test]
    fn identical_clients_are_a_fixed_point() {
        let mut rng = Rng::new(1, 1);
        let v = rng.normal_tensor(&[6], 1.0).into_data();
        let us: Vec<Update> = (0..3)
            .map(|k| upd(k, 10 + u64::from(k), v.clone()))
            .collect();
        let g = aggregate(&us, 3, 0).unwrap();
        for (a, b) in g.params["w"].data().iter().zip(&v) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    proptest! {
        #[test]
        fn matches_oracle_and_is_linear(
            seed in any::<u64>(),
            ns in prop::collection::vec(1u64..50, 1..5),
            c in -4.0f64..4.0,
        ) {
            let mut rng = Rng::new(seed, 0);
            let us: Vec<Update> = ns
                .iter()
                .enumerate()
                .map(|(k, &n)| upd(k as u32, n, rng.normal_tensor(&[5], 1.0).into_data()))
                .collect();
            let g = aggregate(&us, us.len(), 0).unwrap();
            let total: u64 = ns.iter().sum();
            prop_assert!((weights(&us).iter().sum::<f64>() - 1.0).abs() <= 1e-15);
            for i in 0..5 {
                let oracle: f64 = us
                    .iter()
                    .map(|u| u.params["w"].data()[i] * u.n_k as f64)
                    .sum::<f64>()
                    / total as f64;
                prop_assert!((g.params["w"].data()[i] - oracle).abs() <= 1e-14 * oracle.abs().max(1.0));
            }
            let scaled: Vec<Update> = us
                .iter()
                .map(|u| upd(u.client, u.n_k, u.params["w"].scale(c).into_data()))
                .collect();
            let gs = aggregate(&scaled, us.len(), 0).unwrap();
            let want = g.params["w"].scale(c);
            for (a, b) in gs.params["w"].data().iter().zip(want.data()) {
                prop_assert!((a - b).abs() <= 1e-14 * b.abs().max(1.0));
            }
        }
    }
}
