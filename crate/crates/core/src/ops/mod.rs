pub mod conv;
pub mod dense;
pub mod loss;
pub mod matmul;
pub mod norm;
pub mod pool;
