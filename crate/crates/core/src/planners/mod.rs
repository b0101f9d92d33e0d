//! Off-the-shelf motion planners: the MPC tracker that maps any reference to
//! a safe executed trajectory, and RRT for the unlabeled corpus.

mod corpus;
mod mpc;
mod rrt;

pub use corpus::{build_corpus, read_corpus, write_corpus, Corpus, CorpusHeader};
pub use mpc::{mpc_track, MpcConfig};
pub use rrt::{rrt_generate, RrtConfig};
