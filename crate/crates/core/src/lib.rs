//! Learns query-dependent prompt edits with reinforcement learning.
//!
//! A prompt is an instruction split into phrases, a list of in-context
//! exemplar slots and one verbalizer per slot plus one for the query. An
//! attention policy trained with PPO picks a fixed number of discrete edits
//! (phrase swap/add/delete, exemplar swap, verbalizer change) for each query,
//! rewarded by the change in a frozen scorer's correct-vs-runner-up score.

pub mod checkpoint;
pub mod edit;
pub mod env;
pub mod harness;
pub mod policy;
pub mod ppo;
pub mod prompt;
pub mod scoring;
pub mod seeds;
pub mod train;
