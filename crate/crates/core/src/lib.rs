pub mod assembler;
pub mod cli;
pub mod gradcore;
pub mod voxcore;
pub mod petrosim;
pub mod seqmodel;
pub mod vqvae;
