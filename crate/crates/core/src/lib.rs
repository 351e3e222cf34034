pub mod data;
pub mod eval;
pub mod infer;
pub mod lemma;
pub mod loss;
pub mod model;
pub mod numcore;
pub mod tokenize;
pub mod train;
