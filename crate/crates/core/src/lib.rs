pub mod cli;
pub mod error;
pub mod estimators;
pub mod extended;
pub mod functionals;
pub mod generators;
pub mod instances;
pub mod measures;
pub mod optim;
pub mod rng;
pub mod solvers;

pub use error::{Error, Result};
pub use extended::ExtReal;
pub use generators::{make_alpha, make_kl, ConvexGenerator, GeneratorKind};
pub use measures::{joint_support, pushforward, DiscreteMeasure, JointSupport, MetricSpec, StochasticKernel};
pub use functionals::{lambda_f, objective_h, FeatureMap, FunctionClassSpec, PenaltySpec, Sidedness};
pub use solvers::{f_divergence, f_gamma_divergence, gamma_ipm, infimal_convolution, DivergenceSolution};
