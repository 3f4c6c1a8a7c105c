//! Fixed problem instances for the criterion benchmarks.

use std::sync::Arc;

use pfl_core::datagen::{gen_mixture, SynthConfig, SynthKind};
use pfl_core::objectives::{estimate_mu_prime, BaseLoss, Family, LogisticBase, ObjectiveSpec};
use pfl_core::{smoothness_profile, SmoothnessProfile};

/// MX2 logistic objective on mixture data with `lambda = sigma_h * 1e-2`,
/// and its smoothness profile (`mu'` estimated at the truth).
pub fn mx2_instance(clients: usize, n: usize, d: usize, sigma_h: f64, seed: u64) -> (ObjectiveSpec, SmoothnessProfile) {
    let data = gen_mixture(&SynthConfig {
        kind: SynthKind::Mixture { d },
        n,
        clients,
        sigma_h,
        seed,
    })
    .expect("valid synthetic config");
    let truth = data.truth().cloned().expect("synthetic truth");
    let base = BaseLoss::Logistic(LogisticBase::new(Arc::new(data)).expect("binary labels"));
    let c = base.constants();
    let mu_prime = estimate_mu_prime(&base, &truth).expect("mu' estimate").max(1e-2);
    let spec = ObjectiveSpec::new(Family::Mx2 { lambda: sigma_h * 1e-2 }, base, true).expect("valid spec");
    let profile = smoothness_profile(&spec, mu_prime, c.l_prime, c.ll_prime).expect("profile");
    (spec, profile)
}
