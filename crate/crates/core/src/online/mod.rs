//! Online stage: TD3 and decomposed-critic agents, a concurrently trained
//! inverse dynamics model, and β-scheduled switching between the online
//! policy and the pretrained state policy.

mod agent;
mod decqn;
mod guided;
mod idm;
mod replay;
mod td3;

pub use agent::{
    load_actor, load_agent, read_actor, read_agent, save_actor, save_agent, write_actor, write_agent,
    AgentKind, GreedyPolicy, OnlineAgent,
};
pub use decqn::{DecqnConfig, DecqnOnlineAgent};
pub use guided::{
    curve_csv, evaluate_policy, idm_trace_csv, guided_train, select_action, train_expert, Branch, CurveRow,
    GuidanceSchedule, GuidedConfig, GuidedRun, IdmTraceRow,
};
pub use idm::{load_idm, read_idm, save_idm, write_idm, IdmInput, IdmLoss, IdmNet};
pub use replay::{Batch, ReplayBuffer};
pub use td3::{actor_loss_and_grad, critic_loss_and_grad, Td3Agent, Td3Config, Td3Losses};

#[cfg(test)]
mod tests;
