//! Downlink route ownership under last_pull_wins, computed without the
//! simulator and then compared with it.
//!
//! With both gateways pulling strictly periodically, the attacker owns the
//! route for `1 - 1/(2f)` of the time (victim period V, attacker period V/f,
//! uniform relative phase). With exponential gaps the owner is the last event
//! of a merged Poisson stream, so the share equals the pull-count share
//! `f/(f+1)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use pfsim_core::nodes::server::RoutePolicy;
use pfsim_core::sim::canned;
use pfsim_core::sim::{run_report, Scenario};

fn periodic_share(f: f64) -> f64 {
    1.0 - 1.0 / (2.0 * f)
}

fn count_share(f: f64) -> f64 {
    f / (f + 1.0)
}

/// Grid enumeration over relative phase and query time within one victim period.
fn timeline_share(f: u32, grid: u32) -> f64 {
    let v = (f * grid) as i64;
    let a = grid as i64;
    let mut owned = 0u64;
    let mut total = 0u64;
    for phase in 0..a {
        for t in 0..v {
            let last_victim = 0;
            let last_attacker = phase + ((t - phase).div_euclid(a)) * a;
            // Simultaneous pulls count for the victim.
            owned += (last_attacker > last_victim) as u64;
            total += 1;
        }
    }
    owned as f64 / total as f64
}

fn poisson_share(f: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let victim = Exp::new(1.0).unwrap();
    let attacker = Exp::new(f).unwrap();
    let horizon = 200_000.0;
    let (mut tv, mut ta): (f64, f64) = (victim.sample(&mut rng), attacker.sample(&mut rng));
    let (mut now, mut owner_attacker, mut owned) = (0.0f64, false, 0.0);
    while now < horizon {
        let next = tv.min(ta);
        if owner_attacker {
            owned += next - now;
        }
        now = next;
        if tv <= ta {
            owner_attacker = false;
            tv += victim.sample(&mut rng);
        } else {
            owner_attacker = true;
            ta += attacker.sample(&mut rng);
        }
    }
    owned / now
}

#[test]
fn grid_enumeration_matches_closed_form() {
    for f in 1..=6 {
        let grid = timeline_share(f, 400);
        assert!((grid - periodic_share(f as f64)).abs() < 2e-3, "f={f}: {grid}");
    }
}

#[test]
fn periodic_and_count_shares_differ_beyond_factor_one() {
    assert_eq!(periodic_share(1.0), count_share(1.0));
    assert!((periodic_share(3.0) - 5.0 / 6.0).abs() < 1e-12);
    assert!((count_share(3.0) - 0.75).abs() < 1e-12);
    for f in 2..=8 {
        assert!(periodic_share(f as f64) > count_share(f as f64));
    }
}

#[test]
fn poisson_monte_carlo_matches_count_share() {
    for f in [1.0, 2.0, 3.0, 4.0] {
        let s = poisson_share(f, 11);
        assert!((s - count_share(f)).abs() < 0.01, "f={f}: {s}");
    }
}

fn jam(seed: u64, factor: f64, jitter: bool) -> Scenario {
    let mut sc = canned::canned("jam-impersonation").unwrap();
    sc.seed = seed;
    let a = sc.attacker.as_mut().unwrap();
    a.pull_flood_factor = factor;
    a.pull_jitter = jitter;
    sc.gateways[0].pull_jitter = jitter;
    sc
}

fn pooled(seeds: u64, factor: f64, jitter: bool) -> (f64, u64) {
    let (mut n, mut hit) = (0, 0);
    for seed in 1..=seeds {
        let r = run_report(&jam(seed, factor, jitter));
        assert_eq!(r.route_policy, RoutePolicy::LastPullWins);
        let s = r.attack.unwrap().route_share.unwrap();
        n += s.downlinks;
        hit += s.to_attacker;
    }
    (hit as f64 / n as f64, n)
}

#[test]
fn simulated_periodic_share_follows_interleaving() {
    let seeds = 30;
    for f in [1.0, 2.0, 3.0, 4.0] {
        let (share, n) = pooled(seeds, f, false);
        // Per-run share is roughly uniform over a band of width 1/f.
        let tol = 4.0 / (f * (12.0 * seeds as f64).sqrt()) + 0.02;
        assert!(n >= 1000, "f={f}: only {n} downlinks");
        assert!(
            (share - periodic_share(f)).abs() <= tol,
            "f={f}: {share} vs {} (tol {tol})",
            periodic_share(f)
        );
    }
}

#[test]
fn simulated_exponential_share_follows_pull_counts() {
    let (share, n) = pooled(30, 3.0, true);
    assert!(n >= 1000);
    assert!((share - count_share(3.0)).abs() <= 0.04, "{share}");
}
