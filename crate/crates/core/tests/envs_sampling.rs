use agd_core::envs::{build_motivating_mdp, random_tabular_mdp, TabularMdp};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const DRAWS: usize = 100_000;

/// Pooled Pearson statistic and degrees of freedom over every `(s, a)` row.
fn pooled_chi_square(mdp: &TabularMdp, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut stat, mut dof) = (0.0, 0.0);
    for s in 0..mdp.n_states {
        if mdp.terminal[s] {
            continue;
        }
        for a in 0..mdp.n_actions {
            let mut counts = vec![0usize; mdp.n_states];
            for _ in 0..DRAWS {
                counts[mdp.sample_next(s, a, &mut rng).unwrap()] += 1;
            }
            let row = mdp.row(s, a);
            let mut cells = 0;
            for (next, &c) in counts.iter().enumerate() {
                let expected = row[next] * DRAWS as f64;
                if expected > 0.0 {
                    stat += (c as f64 - expected).powi(2) / expected;
                    cells += 1;
                } else {
                    assert_eq!(c, 0, "impossible successor {next} drawn from ({s}, {a})");
                }
            }
            dof += (cells - 1) as f64;
        }
    }
    (stat, dof)
}

#[test]
fn random_mdp_successors_follow_their_rows() {
    let mdp = random_tabular_mdp(11, 5, 3).unwrap();
    let (stat, dof) = pooled_chi_square(&mdp, 1);
    let p = 1.0 - ChiSquared::new(dof).unwrap().cdf(stat);
    assert!(p > 0.01, "chi2 {stat:.2} on {dof} dof, p = {p:.4}");
}

#[test]
fn motivating_chain_is_deterministic() {
    let mdp = build_motivating_mdp();
    let (stat, dof) = pooled_chi_square(&mdp, 2);
    assert_eq!(dof, 0.0);
    assert_eq!(stat, 0.0);
}
