pub mod grad_suite;
pub mod oracles;
