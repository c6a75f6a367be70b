//! Genetic-programming search for one target column.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::expr::{eval_nodes, fold_constants, subtree_end, Expr, Node};
use super::front::ParetoFront;
use super::SymRegConfig;

#[derive(Clone)]
struct Individual {
    nodes: Vec<Node>,
    mse: f64,
    fitness: f64,
}

/// Immutable view of the search problem.
struct Problem<'a> {
    columns: Vec<&'a [f64]>,
    target: &'a [f64],
    cfg: &'a SymRegConfig,
}

/// Least-squares fits of `target ≈ b·pred` and `target ≈ a + b·pred`.
struct Scaling {
    raw: f64,
    slope: Option<(f64, f64)>,
    affine: Option<(f64, f64, f64)>,
}

fn mean_sq(pred: &[f64], target: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (f(*p) - t).powi(2)).sum();
    let mse = sum / target.len() as f64;
    if mse.is_finite() {
        mse
    } else {
        f64::INFINITY
    }
}

impl Problem<'_> {
    fn scaling(&self, nodes: &[Node]) -> Scaling {
        let pred = eval_nodes(nodes, &self.columns, self.target.len());
        let raw = mean_sq(&pred, self.target, |p| p);
        if pred.iter().any(|p| !p.is_finite()) {
            return Scaling { raw, slope: None, affine: None };
        }
        let n = pred.len() as f64;
        let pp: f64 = pred.iter().map(|p| p * p).sum();
        let pt: f64 = pred.iter().zip(self.target).map(|(p, t)| p * t).sum();
        let slope = (pp > 0.0).then(|| {
            let b = pt / pp;
            (b, mean_sq(&pred, self.target, |p| b * p))
        });
        let mp = pred.iter().sum::<f64>() / n;
        let mt = self.target.iter().sum::<f64>() / n;
        let var: f64 = pred.iter().map(|p| (p - mp).powi(2)).sum();
        let affine = (var > 0.0).then(|| {
            let cov: f64 = pred.iter().zip(self.target).map(|(p, t)| (p - mp) * (t - mt)).sum();
            let b = cov / var;
            let a = mt - b * mp;
            (a, b, mean_sq(&pred, self.target, |p| a + b * p))
        });
        Scaling { raw, slope, affine }
    }

    /// Error of the best affine rescaling of the program's output.
    fn mse(&self, nodes: &[Node]) -> f64 {
        let s = self.scaling(nodes);
        [Some(s.raw), s.slope.map(|x| x.1), s.affine.map(|x| x.2)]
            .into_iter()
            .flatten()
            .fold(f64::INFINITY, f64::min)
    }

    /// The program as is, times its best slope, and with its best affine
    /// rescaling, each with its exact error.
    /// The program plus its scaled forms, each kept only when it lowers the
    /// mse by a relative margin (a rescale by 1 + 1e-16 is not a new model).
    fn variants(&self, nodes: &[Node]) -> Vec<(Vec<Node>, f64)> {
        const GAIN: f64 = 1.0 - 1e-6;
        let s = self.scaling(nodes);
        let mut out = vec![(nodes.to_vec(), s.raw)];
        let mut best = s.raw;
        if let Some((b, mse)) = s.slope.filter(|&(_, m)| m < GAIN * best) {
            let mut v = vec![Node::Mul, Node::Const(b)];
            v.extend_from_slice(nodes);
            out.push((v, mse));
            best = mse;
        }
        if let Some((a, b, mse)) = s.affine.filter(|&(_, _, m)| m < GAIN * best) {
            let mut v = vec![Node::Add, Node::Const(a), Node::Mul, Node::Const(b)];
            v.extend_from_slice(nodes);
            out.push((v, mse));
        }
        out
    }

    fn score(&self, nodes: Vec<Node>) -> Individual {
        let mse = self.mse(&nodes);
        let fitness = mse + self.cfg.parsimony * nodes.len() as f64;
        Individual { nodes, mse, fitness }
    }

    fn score_all(&self, programs: Vec<Vec<Node>>) -> Vec<Individual> {
        programs.into_par_iter().map(|p| self.score(p)).collect()
    }

    /// Half of the constants are integers, the rest uniform in the range.
    fn random_const(&self, rng: &mut ChaCha8Rng) -> Node {
        let r = self.cfg.const_range;
        let c = rng.random_range(-r..=r);
        Node::Const(if rng.random_bool(0.5) && c.round() != 0.0 { c.round() } else { c })
    }

    fn random_terminal(&self, rng: &mut ChaCha8Rng) -> Node {
        if !self.columns.is_empty() && rng.random_bool(0.7) {
            Node::Var(rng.random_range(0..self.columns.len()))
        } else {
            self.random_const(rng)
        }
    }

    fn random_op(rng: &mut ChaCha8Rng) -> Node {
        match rng.random_range(0..9) {
            0 | 1 => Node::Add,
            2 | 3 => Node::Sub,
            4 | 5 => Node::Mul,
            6 | 7 => Node::Div,
            _ => Node::Neg,
        }
    }

    fn random_tree(&self, rng: &mut ChaCha8Rng, depth: usize, full: bool, out: &mut Vec<Node>) {
        let leaf = depth == 0 || (!full && rng.random_bool(0.3));
        if leaf {
            out.push(self.random_terminal(rng));
            return;
        }
        let op = Self::random_op(rng);
        out.push(op);
        for _ in 0..op.arity() {
            self.random_tree(rng, depth - 1, full, out);
        }
    }

    fn fresh(&self, rng: &mut ChaCha8Rng, max_depth: usize) -> Vec<Node> {
        loop {
            let depth = rng.random_range(1..=max_depth);
            let mut nodes = Vec::new();
            let full = rng.random_bool(0.5);
            self.random_tree(rng, depth, full, &mut nodes);
            if nodes.len() <= self.cfg.max_complexity {
                return nodes;
            }
        }
    }

    fn tournament<'p>(&self, rng: &mut ChaCha8Rng, pop: &'p [Individual]) -> &'p Individual {
        let mut best = &pop[rng.random_range(0..pop.len())];
        for _ in 1..self.cfg.tournament {
            let c = &pop[rng.random_range(0..pop.len())];
            if c.fitness < best.fitness {
                best = c;
            }
        }
        best
    }

    fn crossover(&self, rng: &mut ChaCha8Rng, a: &[Node], b: &[Node]) -> Vec<Node> {
        let i = rng.random_range(0..a.len());
        let i_end = subtree_end(a, i);
        let j = rng.random_range(0..b.len());
        let j_end = subtree_end(b, j);
        let mut child = Vec::with_capacity(a.len() - (i_end - i) + (j_end - j));
        child.extend_from_slice(&a[..i]);
        child.extend_from_slice(&b[j..j_end]);
        child.extend_from_slice(&a[i_end..]);
        child
    }

    fn mutate(&self, rng: &mut ChaCha8Rng, a: &[Node]) -> Vec<Node> {
        let i = rng.random_range(0..a.len());
        let end = subtree_end(a, i);
        let mut child = Vec::with_capacity(a.len() + 4);
        match rng.random_range(0..4) {
            // Replace a subtree by a fresh one.
            0 => {
                child.extend_from_slice(&a[..i]);
                let mut sub = Vec::new();
                let depth = rng.random_range(0..=2);
                self.random_tree(rng, depth, false, &mut sub);
                child.extend(sub);
                child.extend_from_slice(&a[end..]);
            }
            // Change one node, keeping its arity.
            1 => {
                child.extend_from_slice(a);
                child[i] = match a[i] {
                    Node::Var(_) | Node::Const(_) => self.random_terminal(rng),
                    Node::Neg => Node::Neg,
                    _ => loop {
                        let op = Self::random_op(rng);
                        if op.arity() == 2 {
                            break op;
                        }
                    },
                };
            }
            // Nudge a constant, or wrap the subtree in a scale factor.
            2 => {
                let consts: Vec<usize> = (0..a.len()).filter(|&k| matches!(a[k], Node::Const(_))).collect();
                if let Some(&k) = consts.get(rng.random_range(0..consts.len().max(1))) {
                    child.extend_from_slice(a);
                    if let Node::Const(c) = a[k] {
                        child[k] = Node::Const(c * (1.0 + rng.random_range(-0.2..0.2)) + rng.random_range(-0.1..0.1));
                    }
                } else {
                    child.extend_from_slice(&a[..i]);
                    child.push(Node::Mul);
                    child.push(self.random_const(rng));
                    child.extend_from_slice(&a[i..end]);
                    child.extend_from_slice(&a[end..]);
                }
            }
            // Hoist a subtree to the root.
            _ => child.extend_from_slice(&a[i..end]),
        }
        child
    }
}

fn nelder_mead<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], steps: usize) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += 0.1 * x0[i].abs().max(0.5);
        let fx = f(&x);
        simplex.push((x, fx));
    }
    let order = |s: &mut Vec<(Vec<f64>, f64)>| s.sort_by(|a, b| a.1.total_cmp(&b.1));
    for _ in 0..steps {
        order(&mut simplex);
        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|p| p.0[j]).sum::<f64>() / n as f64)
            .collect();
        let worst = simplex[n].0.clone();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&worst)
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = f(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let t = if fr < simplex[n].1 { -0.5 } else { 0.5 };
            let xc = along(t);
            let fc = f(&xc);
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for p in simplex.iter_mut().skip(1) {
                    for (x, b) in p.0.iter_mut().zip(&best) {
                        *x = b + 0.5 * (*x - b);
                    }
                    p.1 = f(&p.0);
                }
            }
        }
    }
    order(&mut simplex);
    simplex.swap_remove(0)
}

fn with_constants(nodes: &[Node], values: &[f64]) -> Vec<Node> {
    let mut it = values.iter();
    nodes
        .iter()
        .map(|n| match n {
            Node::Const(_) => Node::Const(*it.next().expect("one value per constant")),
            other => *other,
        })
        .collect()
}

/// Refines the constants of `ind` and snaps them to integers where that
/// costs nothing.
fn refine(problem: &Problem<'_>, ind: &Individual) -> Individual {
    let consts: Vec<f64> = ind
        .nodes
        .iter()
        .filter_map(|n| if let Node::Const(c) = n { Some(*c) } else { None })
        .collect();
    if consts.is_empty() || problem.cfg.nm_steps == 0 {
        return ind.clone();
    }
    let objective = |c: &[f64]| problem.mse(&with_constants(&ind.nodes, c));
    let (mut best, mut best_mse) = nelder_mead(objective, &consts, problem.cfg.nm_steps);
    if !(best_mse < ind.mse) {
        best = consts;
        best_mse = ind.mse;
    }
    for k in 0..best.len() {
        let snapped = best[k].round();
        if snapped != best[k] {
            let mut trial = best.clone();
            trial[k] = snapped;
            let m = objective(&trial);
            if m <= best_mse {
                best = trial;
                best_mse = m;
            }
        }
    }
    let nodes = fold_constants(&with_constants(&ind.nodes, &best));
    problem.score(nodes)
}

/// Refines the best individual of every complexity level, then offers every
/// individual to the front. Refined versions replace their originals in the
/// population.
fn update_front(problem: &Problem<'_>, pop: &mut [Individual], front: &mut ParetoFront, names: &[String]) {
    let mut best_at: Vec<Option<usize>> = vec![None; problem.cfg.max_complexity + 1];
    for (i, ind) in pop.iter().enumerate() {
        let slot = &mut best_at[ind.nodes.len()];
        if ind.mse.is_finite() && slot.is_none_or(|j| ind.mse < pop[j].mse) {
            *slot = Some(i);
        }
    }
    let candidates: Vec<usize> = best_at.into_iter().flatten().collect();
    let refined: Vec<Individual> = candidates
        .par_iter()
        .map(|&i| refine(problem, &pop[i]))
        .collect();
    for (&i, r) in candidates.iter().zip(refined) {
        let better = r.mse < pop[i].mse || (r.mse == pop[i].mse && r.nodes.len() < pop[i].nodes.len());
        if better && r.nodes.len() <= problem.cfg.max_complexity {
            pop[i] = r;
        }
    }
    let mut order: Vec<usize> = (0..pop.len()).collect();
    order.sort_by(|&a, &b| {
        pop[a]
            .nodes
            .len()
            .cmp(&pop[b].nodes.len())
            .then(pop[a].mse.total_cmp(&pop[b].mse))
            .then(a.cmp(&b))
    });
    for i in order {
        // Every variant is at least as complex and at least as wrong as the
        // scaled program, so this rules out most individuals cheaply.
        if !front.admits(pop[i].nodes.len(), pop[i].mse) {
            continue;
        }
        for (nodes, mse) in problem.variants(&pop[i].nodes) {
            if nodes.len() <= problem.cfg.max_complexity && front.admits(nodes.len(), mse) {
                front.insert(
                    Expr {
                        nodes,
                        names: names.to_vec(),
                    },
                    mse,
                );
            }
        }
    }
}

pub(super) fn search(
    columns: &[&[f64]],
    names: &[String],
    target: &[f64],
    cfg: &SymRegConfig,
    stream: u64,
) -> ParetoFront {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let problem = Problem {
        columns: columns.to_vec(),
        target,
        cfg,
    };

    let mut programs: Vec<Vec<Node>> = (0..columns.len()).map(|i| vec![Node::Var(i)]).collect();
    programs.push(vec![Node::Const(0.0)]);
    programs.push(vec![Node::Const(1.0)]);
    while programs.len() < cfg.population {
        programs.push(problem.fresh(&mut rng, 4));
    }
    programs.truncate(cfg.population.max(1));
    let mut pop = problem.score_all(programs);
    let mut front = ParetoFront::new();
    update_front(&problem, &mut pop, &mut front, names);

    let mut unchanged = 0;
    for _ in 0..cfg.generations {
        let solved = front.entries.last().is_some_and(|e| e.mse <= cfg.stop_mse);
        if solved && unchanged >= cfg.stop_patience {
            break;
        }
        let mut next: Vec<Vec<Node>> = front
            .entries
            .iter()
            .take(cfg.population / 10)
            .map(|e| e.expression.nodes.clone())
            .collect();
        while next.len() < cfg.population {
            let r: f64 = rng.random();
            let parent = problem.tournament(&mut rng, &pop).nodes.clone();
            let child = if r < cfg.crossover {
                let other = problem.tournament(&mut rng, &pop);
                problem.crossover(&mut rng, &parent, &other.nodes)
            } else if r < cfg.crossover + cfg.mutation {
                problem.mutate(&mut rng, &parent)
            } else {
                parent.clone()
            };
            let child = fold_constants(&child);
            next.push(if child.len() <= cfg.max_complexity { child } else { parent });
        }
        pop = problem.score_all(next);
        let before = front.clone();
        update_front(&problem, &mut pop, &mut front, names);
        unchanged = if front == before { unchanged + 1 } else { 0 };
    }
    front
}
