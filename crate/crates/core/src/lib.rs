pub mod adversary;
pub mod block;
pub mod harness;
pub mod host;
pub mod sed;
pub mod sim;
pub mod tpm;
pub mod tee;
pub mod timeauth;
pub mod updater;
pub mod vaultfs;
