use serde::{Deserialize, Serialize};

use super::expr::Expr;
use super::SymRegError;

/// Smallest mse used when taking logarithms.
const LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontEntry {
    pub expression: Expr,
    pub complexity: usize,
    pub mse: f64,
}

/// Non-dominated expressions, by strictly increasing complexity and strictly
/// decreasing mse.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParetoFront {
    pub entries: Vec<FrontEntry>,
}

impl ParetoFront {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Would `(complexity, mse)` be kept?
    pub fn admits(&self, complexity: usize, mse: f64) -> bool {
        mse.is_finite()
            && !self
                .entries
                .iter()
                .any(|e| e.complexity <= complexity && e.mse <= mse)
    }

    /// Inserts the entry if nothing dominates it and drops what it dominates.
    pub fn insert(&mut self, expression: Expr, mse: f64) -> bool {
        let complexity = expression.complexity();
        if !self.admits(complexity, mse) {
            return false;
        }
        self.entries
            .retain(|e| !(complexity <= e.complexity && mse <= e.mse));
        let at = self.entries.partition_point(|e| e.complexity < complexity);
        self.entries.insert(
            at,
            FrontEntry {
                expression,
                complexity,
                mse,
            },
        );
        true
    }

    /// Checks the ordering and non-domination invariants pairwise.
    pub fn is_valid(&self) -> bool {
        let ordered = self
            .entries
            .windows(2)
            .all(|w| w[0].complexity < w[1].complexity && w[0].mse > w[1].mse);
        let undominated = self.entries.iter().enumerate().all(|(i, a)| {
            self.entries.iter().enumerate().all(|(j, b)| {
                i == j
                    || !(b.complexity <= a.complexity
                        && b.mse <= a.mse
                        && (b.complexity < a.complexity || b.mse < a.mse))
            })
        });
        let consistent = self
            .entries
            .iter()
            .all(|e| e.complexity == e.expression.complexity() && e.mse.is_finite());
        ordered && undominated && consistent
    }

    /// Entry with the steepest drop in log-mse per unit of added complexity
    /// relative to its predecessor; the first entry if the front has one.
    pub fn knee(&self) -> Result<&FrontEntry, SymRegError> {
        let first = self.entries.first().ok_or(SymRegError::EmptyFront)?;
        let mut best = (f64::NEG_INFINITY, first);
        for w in self.entries.windows(2) {
            let drop = w[0].mse.max(LOG_FLOOR).log10() - w[1].mse.max(LOG_FLOOR).log10();
            let rate = drop / (w[1].complexity - w[0].complexity) as f64;
            if rate > best.0 {
                best = (rate, &w[1]);
            }
        }
        Ok(best.1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Knee,
    /// The engineer's pick, as an index into the front.
    Engineer(Option<usize>),
}

pub fn select_expression(front: &ParetoFront, strategy: &Strategy) -> Result<Expr, SymRegError> {
    if front.is_empty() {
        return Err(SymRegError::EmptyFront);
    }
    match strategy {
        Strategy::Knee => Ok(front.knee()?.expression.clone()),
        Strategy::Engineer(None) => Err(SymRegError::NoPendingDecision),
        Strategy::Engineer(Some(i)) => front
            .entries
            .get(*i)
            .map(|e| e.expression.clone())
            .ok_or_else(|| SymRegError::Invalid(format!("front has no entry {i}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(c: usize) -> Expr {
        // A chain of negations of the requested size.
        let mut text = "1".to_string();
        for _ in 1..c {
            text = format!("(neg {text})");
        }
        Expr::parse(&text).unwrap()
    }

    #[test]
    fn knee_follows_the_steepest_drop() {
        let mut front = ParetoFront::new();
        for (c, mse) in [(1, 1.0), (5, 1e-9), (20, 1e-10)] {
            assert!(front.insert(entry(c), mse));
        }
        assert_eq!(front.knee().unwrap().complexity, 5);
        assert_eq!(
            select_expression(&front, &Strategy::Knee).unwrap().complexity(),
            5
        );
    }

    #[test]
    fn single_entry_is_selected() {
        let mut front = ParetoFront::new();
        front.insert(entry(3), 0.5);
        assert_eq!(front.knee().unwrap().complexity, 3);
    }

    #[test]
    fn empty_front_and_missing_decision_are_errors() {
        let empty = ParetoFront::new();
        assert_eq!(select_expression(&empty, &Strategy::Knee), Err(SymRegError::EmptyFront));
        let mut front = ParetoFront::new();
        front.insert(entry(1), 1.0);
        assert_eq!(
            select_expression(&front, &Strategy::Engineer(None)),
            Err(SymRegError::NoPendingDecision)
        );
        assert!(select_expression(&front, &Strategy::Engineer(Some(0))).is_ok());
        assert!(select_expression(&front, &Strategy::Engineer(Some(3))).is_err());
    }

    #[test]
    fn insertion_keeps_only_undominated_entries() {
        let mut front = ParetoFront::new();
        assert!(front.insert(entry(5), 0.1));
        assert!(!front.insert(entry(7), 0.2));
        assert!(!front.insert(entry(5), 0.1));
        assert!(front.insert(entry(3), 0.5));
        assert!(front.insert(entry(3), 0.05));
        assert_eq!(front.len(), 1);
        assert!(!front.insert(entry(2), f64::INFINITY));
        assert!(front.is_valid());
    }
}
