//! Population moments, the coupling decomposition behind the implicit
//! multi-attribute lower bound, per-pair preference-error bounds, Fisher
//! ordering and the empirical MSE comparison.

mod compare;
mod coupling;
mod fisher;
mod lemma;
mod moments;

pub use compare::{
    binomial_upper_tail, compare_mse_empirical, sign_test, MseComparisonConfig,
    MseComparisonReport, RegimeResult, SeedResult, SignTest, ALIGNMENT_FLOOR, MIN_SEEDS,
    SIGNAL_LEVEL,
};
pub use coupling::{
    coupling, verify_theorem1, AssumptionCheck, CouplingReport, SlackSummary, Theorem1Report,
    LAMBDA_MIN_FLOOR, THEOREM1_TOL,
};
pub use fisher::{
    fisher_matrices, fisher_subset, head_gradients, predict_mse, FisherReport, MAX_FISHER_PARAMS,
};
pub use lemma::{verify_lemma1, ExpectationForm, LemmaReport, PairBound, LEMMA1_TOL};
pub use moments::{
    estimate_moments, pairwise_only_moments, population_heads, record_moments, MomentReport,
};
