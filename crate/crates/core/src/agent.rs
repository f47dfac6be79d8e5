//! Trained policy bundled with its observation featurizer.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::env::{Featurizer, Policy, ACTION_DIM, ACTOR_DIM, ACTOR_FEAT_DIM};
use crate::error::{Error, Result};
use crate::learn::{ActorCritic, Checkpoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub featurizer: Featurizer,
    pub ac: ActorCritic,
}

impl Agent {
    pub fn features(&self, actor_obs: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((actor_obs.nrows(), ACTOR_FEAT_DIM));
        for (mut dst, src) in out.rows_mut().into_iter().zip(actor_obs.rows()) {
            let f = self.featurizer.actor(src.as_slice().expect("contiguous rows"));
            dst.assign(&ndarray::ArrayView1::from(&f));
        }
        out
    }

    /// Deterministic action: the policy mean clipped to the unit box and
    /// scaled to metres.
    pub fn act_mean(&self, actor_obs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut a = self.ac.mean(self.features(actor_obs).view())?;
        let d = self.featurizer.d_max;
        a.mapv_inplace(|x| x.clamp(-1.0, 1.0) * d);
        Ok(a)
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(config_hash);
        ck.insert_mlp("actor", &self.ac.actor)?;
        ck.insert_mlp("critic", &self.ac.critic)?;
        ck.insert("actor.log_std", vec![self.ac.log_std.len()], self.ac.log_std.clone())?;
        ck.metadata = serde_json::json!({ "featurizer": self.featurizer });
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Agent> {
        let featurizer: Featurizer = serde_json::from_value(
            ck.metadata
                .get("featurizer")
                .cloned()
                .ok_or_else(|| Error::DataError("checkpoint lacks featurizer metadata".into()))?,
        )?;
        let actor = ck.mlp("actor")?;
        let critic = ck.mlp("critic")?;
        let log_std = ck.get("actor.log_std")?.data.clone();
        if actor.input_dim() != ACTOR_FEAT_DIM || actor.output_dim() != ACTION_DIM || log_std.len() != ACTION_DIM {
            return Err(Error::DataError("checkpoint actor has the wrong shape".into()));
        }
        Ok(Agent {
            featurizer,
            ac: ActorCritic { actor, log_std, critic },
        })
    }
}

impl Policy for Agent {
    fn actor_input_dim(&self) -> usize {
        ACTOR_DIM
    }

    fn act(&mut self, actor_obs: ArrayView2<f64>) -> Array2<f64> {
        self.act_mean(actor_obs).expect("observation width checked by the caller")
    }
}
