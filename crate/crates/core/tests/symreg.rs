use std::time::Instant;

use modeldisc_core::symreg::{evolve_columns, Expr, Node, SymRegConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NAMES: [&str; 3] = ["a", "b", "c"];

fn names() -> Vec<String> {
    NAMES.iter().map(|s| s.to_string()).collect()
}

fn table(rng: &mut ChaCha8Rng, rows: usize) -> Vec<Vec<f64>> {
    (0..3).map(|_| (0..rows).map(|_| rng.random_range(0.5..2.0)).collect()).collect()
}

/// Random rational law over `a, b, c` with complexity 3 to 7 that uses at
/// least one variable.
fn planted_law(rng: &mut ChaCha8Rng) -> Expr {
    fn grow(rng: &mut ChaCha8Rng, depth: usize, out: &mut Vec<Node>) {
        if depth == 0 || rng.random_bool(0.3) {
            if rng.random_bool(0.75) {
                out.push(Node::Var(rng.random_range(0..3)));
            } else {
                out.push(Node::Const((rng.random_range(-20..=20) as f64) / 10.0));
            }
            return;
        }
        let op = [Node::Add, Node::Sub, Node::Mul, Node::Div][rng.random_range(0..4)];
        out.push(op);
        grow(rng, depth - 1, out);
        grow(rng, depth - 1, out);
    }
    loop {
        let mut nodes = Vec::new();
        grow(rng, 2, &mut nodes);
        let uses_var = nodes.iter().any(|n| matches!(n, Node::Var(_)));
        if (3..=7).contains(&nodes.len()) && uses_var {
            return Expr::new(nodes, names()).unwrap();
        }
    }
}

fn best_mse(front: &modeldisc_core::symreg::ParetoFront) -> f64 {
    front.entries.last().map_or(f64::INFINITY, |e| e.mse)
}

#[test]
fn planted_laws_are_recovered() {
    let mut hits = 0;
    let start = Instant::now();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let cols = table(&mut rng, 200);
        let law = planted_law(&mut rng);
        let target = law.evaluate_columns(&names(), &cols).unwrap();
        if target.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let cfg = SymRegConfig {
            seed,
            ..SymRegConfig::default()
        };
        let front = evolve_columns(&names(), &cols, &target, &cfg).unwrap();
        assert!(front.is_valid());
        let mse = best_mse(&front);
        println!("seed {seed}: {} -> mse {mse:.2e}", law.to_infix());
        if mse <= 1e-8 {
            hits += 1;
        }
    }
    println!("{hits}/10 recovered in {:.1}s", start.elapsed().as_secs_f64());
    assert!(hits >= 9, "only {hits}/10 planted laws recovered");
}

#[test]
fn zero_target_gives_the_zero_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cols = table(&mut rng, 50);
    let front = evolve_columns(&names(), &cols, &vec![0.0; 50], &SymRegConfig::default()).unwrap();
    let first = &front.entries[0];
    assert_eq!(first.complexity, 1);
    assert_eq!(first.mse, 0.0);
    assert_eq!(first.expression.to_prefix(), "0");
}

#[test]
fn scaled_column_is_found() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cols = table(&mut rng, 200);
    let target: Vec<f64> = cols[0].iter().map(|a| 3.0 * a).collect();
    let front = evolve_columns(&names(), &cols, &target, &SymRegConfig::default()).unwrap();
    // Equivalence is checked on fresh points, away from the training rows.
    let probe = table(&mut ChaCha8Rng::seed_from_u64(40), 50);
    let expected: Vec<f64> = probe[0].iter().map(|a| 3.0 * a).collect();
    let found = front.entries.iter().any(|e| {
        let pred = e.expression.evaluate_columns(&names(), &probe).unwrap();
        e.mse <= 1e-10 && pred.iter().zip(&expected).all(|(p, q)| (p - q).abs() <= 1e-6)
    });
    assert!(found, "{:?}", front.entries.iter().map(|e| e.expression.to_prefix()).collect::<Vec<_>>());
}

#[test]
fn bilinear_law_is_found_compactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cols = table(&mut rng, 200);
    let target: Vec<f64> = (0..200).map(|r| cols[0][r] * cols[1][r] - cols[2][r]).collect();
    let front = evolve_columns(&names(), &cols, &target, &SymRegConfig::default()).unwrap();
    assert!(
        front.entries.iter().any(|e| e.mse <= 1e-8 && e.complexity <= 5),
        "{:?}",
        front.entries.iter().map(|e| (e.expression.to_prefix(), e.mse)).collect::<Vec<_>>()
    );
}

#[test]
fn search_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cols = table(&mut rng, 100);
    let target: Vec<f64> = (0..100).map(|r| cols[0][r] / (cols[1][r] + 0.7)).collect();
    let cfg = SymRegConfig {
        generations: 30,
        population: 200,
        seed: 11,
        ..SymRegConfig::default()
    };
    let a = evolve_columns(&names(), &cols, &target, &cfg).unwrap();
    let b = evolve_columns(&names(), &cols, &target, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.is_valid());
}

#[test]
fn parameter_linear_law_generalizes_to_an_unseen_configuration() {
    // Three configurations of a parameter k; the law is k * (b - a).
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut rows = |k: f64| -> Vec<Vec<f64>> {
        let ab = table(&mut rng, 60);
        vec![ab[0].clone(), ab[1].clone(), vec![k; 60]]
    };
    let (r1, r2, r3) = (rows(0.3), rows(0.6), rows(0.45));
    let law = |cols: &[Vec<f64>]| -> Vec<f64> { (0..60).map(|r| cols[2][r] * (cols[1][r] - cols[0][r])).collect() };
    let names: Vec<String> = ["a", "b", "k"].iter().map(|s| s.to_string()).collect();
    let train_cols: Vec<Vec<f64>> = (0..3).map(|c| [r1[c].clone(), r2[c].clone()].concat()).collect();
    let train_target = [law(&r1), law(&r2)].concat();
    let front = evolve_columns(&names, &train_cols, &train_target, &SymRegConfig::default()).unwrap();
    let best = front.entries.last().unwrap();
    let test_target = law(&r3);
    let pred = best.expression.evaluate_columns(&names, &r3).unwrap();
    let test_mse = pred.iter().zip(&test_target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / 60.0;
    assert!(test_mse <= 10.0 * best.mse.max(1e-20), "train {:.2e} test {test_mse:.2e}", best.mse);
}
