pub mod bench_algos;
pub mod bench_transfer;
pub mod phantom;
pub mod recon;
pub mod report;
