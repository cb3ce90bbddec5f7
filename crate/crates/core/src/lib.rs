pub mod cohort;
pub mod evaluate;
pub mod learn;
pub mod linalg;
pub mod prescribe;
pub mod preprocess;
pub mod scalar;
