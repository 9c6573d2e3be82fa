//! Co-simulation of federated learning over cell-free massive MIMO uplinks.
//!
//! The crate is organised around one global FL round:
//!
//! * [`ml`] holds the desk-scale models, datasets and partitioning.
//! * [`trainer`] runs AdaDelta (or SGD) local updates with the adaptive
//!   local-iteration stopping rule.
//! * [`emq`] quantizes each client's delta with the exponent-mantissa codec
//!   and accounts for the exact number of uplink bits.
//! * [`channel`] turns geometry and pilots into the large-scale statistics that
//!   define each client's uplink SINR and rate.
//! * [`power`] allocates uplink power with an SQP solver trading straggler
//!   latency against total energy.
//! * [`federation`] drives the rounds, aggregates, and stops when the energy or
//!   latency budget is exhausted.
//! * [`baselines`] provides the comparison arms.

pub mod baselines;
pub mod channel;
pub mod emq;
pub mod federation;
pub mod ml;
pub mod power;
pub mod seed;
pub mod trainer;
