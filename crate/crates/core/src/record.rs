//! Per-episode traces, streamable as JSON lines.

use std::io::Write;

use serde::{Deserialize, Serialize};

/// Estimator channels at one control step. Sigmas are standard deviations (m).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateTrace {
    pub theta_prior: f64,
    pub sigma_prior: f64,
    pub theta_rma: f64,
    pub sigma_epi: f64,
    pub sigma_alea: f64,
    pub theta_fused: f64,
    pub sigma_fused: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: u64,
    pub t: f64,
    pub actor_obs: Vec<f64>,
    /// Commanded pusher displacement in the goal frame (m).
    pub action: [f64; 2],
    pub reward: f64,
    pub pos_err: f64,
    pub ang_err: f64,
    pub contact: bool,
    /// Value the policy was conditioned on for this step.
    pub conditioned: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub estimate: Option<EstimateTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub seed: u64,
    pub true_com: f64,
    pub initial_theta: f64,
    pub steps: Vec<StepTrace>,
    pub success: bool,
    /// Time at which the success latch closed (s).
    pub completion_time: Option<f64>,
    pub final_pos_err: f64,
    pub final_ang_err: f64,
    pub episode_return: f64,
}

#[derive(Serialize)]
struct StepLine<'a> {
    episode: u64,
    #[serde(flatten)]
    step: &'a StepTrace,
}

impl EpisodeRecord {
    /// One JSON object per step, tagged with the episode id.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for step in &self.steps {
            let line = serde_json::to_string(&StepLine {
                episode: self.episode,
                step,
            })
            .map_err(std::io::Error::other)?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}
