//! Criterion benchmarks for the imaging, autodiff and diffusion hot paths.
