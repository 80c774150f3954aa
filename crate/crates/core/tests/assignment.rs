use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vtslam::assignment::{k_best, solve};

/// Costs of every permutation, sorted.
fn all_costs(cost: &[Vec<f64>]) -> Vec<f64> {
    fn rec(row: usize, used: &mut [bool], acc: f64, cost: &[Vec<f64>], out: &mut Vec<f64>) {
        if row == cost.len() {
            out.push(acc);
            return;
        }
        for c in 0..used.len() {
            if !used[c] && cost[row][c].is_finite() {
                used[c] = true;
                rec(row + 1, used, acc + cost[row][c], cost, out);
                used[c] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(0, &mut vec![false; cost[0].len()], 0.0, cost, &mut out);
    out.sort_by(f64::total_cmp);
    out
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize, forbid: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..m)
                .map(|_| {
                    if rng.random_bool(forbid) {
                        f64::INFINITY
                    } else {
                        rng.random_range(0.0..10.0)
                    }
                })
                .collect()
        })
        .collect()
}

#[test]
fn ten_by_ten_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cost = random_matrix(&mut rng, 10, 10, 0.0);
    let best = solve(&cost).unwrap();
    let oracle = all_costs(&cost)[0];
    assert!((best.cost - oracle).abs() < 1e-9);
    let recomputed: f64 = best.rows.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    assert!((recomputed - best.cost).abs() < 1e-9);
}

#[test]
fn infeasible_returns_none() {
    let inf = f64::INFINITY;
    assert!(solve(&[vec![inf, 1.0], vec![inf, 2.0]]).is_none());
    assert!(k_best(&[vec![inf]], 3).is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn ranked_assignments_match_enumeration(seed in any::<u64>(), n in 1usize..6, extra in 0usize..3, k in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost = random_matrix(&mut rng, n, n + extra, 0.2);
        let oracle = all_costs(&cost);
        let ranked = k_best(&cost, k);
        prop_assert_eq!(ranked.len(), k.min(oracle.len()));
        for (a, o) in ranked.iter().zip(&oracle) {
            prop_assert!((a.cost - o).abs() < 1e-9, "{} vs {}", a.cost, o);
        }
        let mut seen: Vec<&Vec<usize>> = ranked.iter().map(|a| &a.rows).collect();
        seen.sort();
        seen.dedup();
        prop_assert_eq!(seen.len(), ranked.len());
    }
}
