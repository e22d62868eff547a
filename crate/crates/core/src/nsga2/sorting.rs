use super::ObjectiveVector;

/// Pareto dominance for two minimized objectives.
pub fn dominates(a: &ObjectiveVector, b: &ObjectiveVector) -> bool {
    a.cost_tmacs <= b.cost_tmacs
        && a.quality_loss <= b.quality_loss
        && (a.cost_tmacs < b.cost_tmacs || a.quality_loss < b.quality_loss)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrontPartition {
    /// `fronts[i]` holds population indices of rank `i`, ascending.
    pub fronts: Vec<Vec<usize>>,
    pub ranks: Vec<usize>,
}

impl FrontPartition {
    pub fn rank(&self, index: usize) -> usize {
        self.ranks[index]
    }
}

/// Fast non-dominated sort; O(n^2) comparisons.
pub fn non_dominated_sort(objectives: &[ObjectiveVector]) -> FrontPartition {
    let n = objectives.len();
    let mut dominated_by_me: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut dom_count = vec![0usize; n];
    for i in 0..n {
        for j in (i + 1)..n {
            if dominates(&objectives[i], &objectives[j]) {
                dominated_by_me[i].push(j);
                dom_count[j] += 1;
            } else if dominates(&objectives[j], &objectives[i]) {
                dominated_by_me[j].push(i);
                dom_count[i] += 1;
            }
        }
    }
    let mut ranks = vec![0usize; n];
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| dom_count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominated_by_me[i] {
                dom_count[j] -= 1;
                if dom_count[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        for &i in &current {
            ranks[i] = fronts.len();
        }
        fronts.push(current);
        current = next;
    }
    FrontPartition { fronts, ranks }
}

/// Standard NSGA-II crowding distance. Boundary members are infinite; an
/// objective with zero range contributes nothing to interior members.
pub fn crowding_distance(front: &[ObjectiveVector]) -> Vec<f64> {
    let n = front.len();
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let mut dist = vec![0.0f64; n];
    for axis in 0..2 {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| front[a].get(axis).total_cmp(&front[b].get(axis)));
        let lo = front[order[0]].get(axis);
        let hi = front[order[n - 1]].get(axis);
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        let range = hi - lo;
        if range <= 0.0 {
            continue;
        }
        for w in 1..n - 1 {
            let i = order[w];
            if dist[i].is_finite() {
                dist[i] += (front[order[w + 1]].get(axis) - front[order[w - 1]].get(axis)) / range;
            }
        }
    }
    dist
}
