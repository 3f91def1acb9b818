//! Frozen outputs of seeded runs. A change here means the random streams or
//! the estimator arithmetic moved; update only on purpose.

use polymer_core::estimators::{superadditivity_check, EnvRun};
use polymer_core::path_survival::Beta;
use polymer_core::rng::SeedStream;
use polymer_core::smc::SmcConfig;

#[test]
fn superadditivity_slack_anchor() {
    let run = EnvRun { dimension: 1, n_env: 20, config: SmcConfig { n_particles: 1000, ..SmcConfig::default() }, seed: SeedStream::new(17) };
    let r = superadditivity_check(Beta::Finite(1.0), 4.0, 4.0, &run).unwrap();
    assert!((r.slack - -0.773740513961303).abs() < 1e-12, "{}", r.slack);
    assert!((r.stderr - 0.2520536308903332).abs() < 1e-12, "{}", r.stderr);
    assert!((r.a_st.a_hat.value - -4.775306703214879).abs() < 1e-12);
    assert!(r.holds);
}
