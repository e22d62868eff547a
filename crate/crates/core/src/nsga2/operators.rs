use std::sync::Arc;

use rand::seq::index;
use rand::Rng;

use super::sorting::{crowding_distance, non_dominated_sort, FrontPartition};
use super::{objectives_of, Candidate, GaParams, Nsga2Error, ObjectiveVector, Origin};
use crate::schedule::CachingSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TournamentOutcome {
    pub parents: (usize, usize),
    /// Pairs decided by a coin flip after a full rank and crowding tie.
    pub random_ties: usize,
}

fn binary_tournament(
    i: usize,
    j: usize,
    partition: &FrontPartition,
    crowding: &[f64],
    rng: &mut impl Rng,
) -> (usize, bool) {
    let (ri, rj) = (partition.ranks[i], partition.ranks[j]);
    if ri != rj {
        return (if ri < rj { i } else { j }, false);
    }
    let (ci, cj) = (crowding[i], crowding[j]);
    if ci != cj {
        return (if ci > cj { i } else { j }, false);
    }
    (if rng.gen_bool(0.5) { i } else { j }, true)
}

/// Two winners from two pairs sampled uniformly with replacement.
pub fn tournament_select(
    partition: &FrontPartition,
    crowding: &[f64],
    rng: &mut impl Rng,
) -> Result<TournamentOutcome, Nsga2Error> {
    let n = partition.ranks.len();
    if n == 0 {
        return Err(Nsga2Error::EmptyPopulation);
    }
    let mut ties = 0;
    let mut winners = [0usize; 2];
    for w in &mut winners {
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        let (winner, tie) = binary_tournament(i, j, partition, crowding, rng);
        ties += tie as usize;
        *w = winner;
    }
    let [a, b] = winners;
    Ok(TournamentOutcome {
        parents: (a, b),
        random_ties: ties,
    })
}

/// Splices two equal-length bit vectors at the given sorted cut positions.
/// Child A starts from parent A; segments alternate at every cut.
pub fn crossover_at(a: &[bool], b: &[bool], cuts: &[usize]) -> (Vec<bool>, Vec<bool>) {
    debug_assert_eq!(a.len(), b.len());
    let mut child_a = Vec::with_capacity(a.len());
    let mut child_b = Vec::with_capacity(a.len());
    let mut start = 0;
    let mut swapped = false;
    for &end in cuts.iter().chain(std::iter::once(&a.len())) {
        let (sa, sb) = if swapped { (b, a) } else { (a, b) };
        child_a.extend_from_slice(&sa[start..end]);
        child_b.extend_from_slice(&sb[start..end]);
        start = end;
        swapped = !swapped;
    }
    (child_a, child_b)
}

/// k-point crossover with probability `p_c`, otherwise direct copies. Cut
/// positions are distinct interior positions of the flattened vector.
pub fn crossover_k_point(
    parent_a: &CachingSchedule,
    parent_b: &CachingSchedule,
    params: &GaParams,
    rng: &mut impl Rng,
) -> Result<(CachingSchedule, CachingSchedule, Origin), Nsga2Error> {
    let topo = parent_a.topology();
    if !(Arc::ptr_eq(topo, parent_b.topology()) || **topo == **parent_b.topology()) {
        return Err(Nsga2Error::TopologyMismatch);
    }
    let len = parent_a.len();
    if !rng.gen_bool(params.crossover_probability) || len < 2 {
        return Ok((parent_a.clone(), parent_b.clone(), Origin::Copy));
    }
    let k = params.crossover_points.min(len - 1);
    let mut cuts: Vec<usize> = index::sample(rng, len - 1, k)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let (a, b) = crossover_at(parent_a.bits(), parent_b.bits(), &cuts);
    Ok((
        CachingSchedule::repaired(topo.clone(), a),
        CachingSchedule::repaired(topo.clone(), b),
        Origin::Crossover,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MutationOutcome {
    pub schedule: CachingSchedule,
    /// Whether the `p_m` gate fired.
    pub applied: bool,
    /// Bits flipped before step-0 repair.
    pub flipped: usize,
}

/// With probability `p_m`, flips each bit independently with probability
/// `per_bit` (normally `1 / total_cells`), then repairs step 0.
pub fn mutate_bit_flip(
    schedule: &CachingSchedule,
    mutation_probability: f64,
    per_bit: f64,
    rng: &mut impl Rng,
) -> MutationOutcome {
    if !rng.gen_bool(mutation_probability) {
        return MutationOutcome {
            schedule: schedule.clone(),
            applied: false,
            flipped: 0,
        };
    }
    let mut bits = schedule.bits().to_vec();
    let mut flipped = 0;
    for b in bits.iter_mut() {
        if rng.gen_bool(per_bit) {
            *b = !*b;
            flipped += 1;
        }
    }
    MutationOutcome {
        schedule: CachingSchedule::repaired(schedule.topology().clone(), bits),
        applied: true,
        flipped,
    }
}

/// Indices (into `objectives`) of the `n` survivors, in admission order.
pub fn environmental_selection_indices(objectives: &[ObjectiveVector], n: usize) -> Vec<usize> {
    let partition = non_dominated_sort(objectives);
    let mut chosen = Vec::with_capacity(n);
    for front in &partition.fronts {
        let room = n - chosen.len();
        if room == 0 {
            break;
        }
        if front.len() <= room {
            chosen.extend_from_slice(front);
            continue;
        }
        let members: Vec<ObjectiveVector> = front.iter().map(|&i| objectives[i]).collect();
        let crowd = crowding_distance(&members);
        let mut admitted = vec![false; front.len()];
        let mut take = |local: usize, chosen: &mut Vec<usize>| {
            if !admitted[local] && chosen.len() < n {
                admitted[local] = true;
                chosen.push(front[local]);
            }
        };
        for local in extrema(&members) {
            take(local, &mut chosen);
        }
        let mut order: Vec<usize> = (0..front.len()).collect();
        order.sort_by(|&x, &y| crowd[y].total_cmp(&crowd[x]).then(x.cmp(&y)));
        for local in order {
            take(local, &mut chosen);
        }
        break;
    }
    chosen
}

/// Min-cost, min-loss, max-cost, max-loss positions (first occurrence).
fn extrema(front: &[ObjectiveVector]) -> Vec<usize> {
    let arg = |axis: usize, max: bool| {
        let mut best = 0;
        for i in 1..front.len() {
            let (v, b) = (front[i].get(axis), front[best].get(axis));
            if (max && v > b) || (!max && v < b) {
                best = i;
            }
        }
        best
    };
    let mut out = Vec::with_capacity(4);
    for e in [arg(0, false), arg(1, false), arg(0, true), arg(1, true)] {
        if !out.contains(&e) {
            out.push(e);
        }
    }
    out
}

/// Keeps `n` of the `2n` candidates by front rank, then crowding.
pub fn environmental_selection(
    union: Vec<Candidate>,
    n: usize,
) -> Result<Vec<Candidate>, Nsga2Error> {
    if union.len() != 2 * n {
        return Err(Nsga2Error::SizeMismatch {
            expected: 2 * n,
            actual: union.len(),
        });
    }
    let objs = objectives_of(&union)?;
    let keep = environmental_selection_indices(&objs, n);
    let mut slots: Vec<Option<Candidate>> = union.into_iter().map(Some).collect();
    Ok(keep
        .into_iter()
        .map(|i| slots[i].take().expect("each index admitted once"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{BlockGroup, ComponentSpec, ModelTopology};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ov(c: f64, q: f64) -> ObjectiveVector {
        ObjectiveVector::new(c, q)
    }

    fn toy() -> Arc<ModelTopology> {
        Arc::new(ModelTopology::builtin("toy").unwrap())
    }

    fn random_schedule(t: &Arc<ModelTopology>, rng: &mut impl Rng) -> CachingSchedule {
        let bits = (0..t.total_cells()).map(|_| rng.gen_bool(0.5)).collect();
        CachingSchedule::repaired(t.clone(), bits)
    }

    #[test]
    fn tournament_prefers_rank_then_crowding() {
        let part = FrontPartition {
            fronts: vec![vec![0], vec![1]],
            ranks: vec![0, 1],
        };
        let crowd = vec![1.0, 5.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(binary_tournament(0, 1, &part, &crowd, &mut rng), (0, false));
        assert_eq!(binary_tournament(1, 0, &part, &crowd, &mut rng), (0, false));

        let part = FrontPartition {
            fronts: vec![vec![0, 1]],
            ranks: vec![0, 0],
        };
        let crowd = vec![f64::INFINITY, 1.0];
        assert_eq!(binary_tournament(1, 0, &part, &crowd, &mut rng), (0, false));
        let crowd = vec![1.0, 1.0];
        assert!(binary_tournament(1, 0, &part, &crowd, &mut rng).1);
        let empty = FrontPartition {
            fronts: vec![],
            ranks: vec![],
        };
        assert!(matches!(
            tournament_select(&empty, &[], &mut rng),
            Err(Nsga2Error::EmptyPopulation)
        ));
    }

    #[test]
    fn tournament_golden_sequence() {
        let objs = [
            ov(1.0, 8.0),
            ov(2.0, 6.0),
            ov(3.0, 7.0),
            ov(4.0, 3.0),
            ov(5.0, 5.0),
            ov(6.0, 2.0),
            ov(7.0, 4.0),
            ov(8.0, 1.0),
        ];
        let part = non_dominated_sort(&objs);
        let mut crowd = vec![0.0; objs.len()];
        for front in &part.fronts {
            let members: Vec<_> = front.iter().map(|&i| objs[i]).collect();
            for (&i, d) in front.iter().zip(crowding_distance(&members)) {
                crowd[i] = d;
            }
        }
        let sequence = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            (0..8)
                .map(|_| tournament_select(&part, &crowd, &mut rng).unwrap().parents)
                .collect::<Vec<_>>()
        };
        let first = sequence();
        assert_eq!(first, sequence());
        assert_eq!(
            first,
            vec![
                (3, 5),
                (1, 6),
                (7, 1),
                (0, 6),
                (5, 3),
                (7, 0),
                (7, 1),
                (0, 0)
            ]
        );
    }

    #[test]
    fn crossover_hand_traced_splice() {
        let (a, b) = crossover_at(&[true; 8], &[false; 8], &[3]);
        let s = |v: &[bool]| {
            v.iter()
                .map(|b| if *b { '1' } else { '0' })
                .collect::<String>()
        };
        assert_eq!(s(&a), "11100000");
        assert_eq!(s(&b), "00011111");
        let (a, _) = crossover_at(&[true; 8], &[false; 8], &[1, 2, 5, 7]);
        assert_eq!(s(&a), "10111001");
    }

    #[test]
    fn crossover_copies_and_identical_parents() {
        let t = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pa = random_schedule(&t, &mut rng);
        let pb = random_schedule(&t, &mut rng);
        let copy = GaParams {
            crossover_probability: 0.0,
            ..GaParams::default()
        };
        let (ca, cb, origin) = crossover_k_point(&pa, &pb, &copy, &mut rng).unwrap();
        assert_eq!((ca, cb, origin), (pa.clone(), pb.clone(), Origin::Copy));

        let always = GaParams {
            crossover_probability: 1.0,
            ..GaParams::default()
        };
        let (ca, cb, origin) = crossover_k_point(&pa, &pa, &always, &mut rng).unwrap();
        assert_eq!(origin, Origin::Crossover);
        assert_eq!(ca, pa);
        assert_eq!(cb, pa);

        let other = Arc::new(t.with_steps(10).unwrap());
        let pc = CachingSchedule::new_full_recompute(other);
        assert!(matches!(
            crossover_k_point(&pa, &pc, &always, &mut rng),
            Err(Nsga2Error::TopologyMismatch)
        ));
    }

    #[test]
    fn crossover_children_inherit_every_locus() {
        let t = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let params = GaParams {
            crossover_probability: 1.0,
            ..GaParams::default()
        };
        let cps = t.cells_per_step();
        for _ in 0..200 {
            let pa = random_schedule(&t, &mut rng);
            let pb = random_schedule(&t, &mut rng);
            let (ca, cb, _) = crossover_k_point(&pa, &pb, &params, &mut rng).unwrap();
            ca.validate().unwrap();
            cb.validate().unwrap();
            let mut source = Vec::new();
            for i in cps..t.total_cells() {
                assert!(ca.get(i) == pa.get(i) || ca.get(i) == pb.get(i));
                if pa.get(i) != pb.get(i) {
                    assert_ne!(ca.get(i), cb.get(i));
                    source.push(ca.get(i) == pa.get(i));
                }
            }
            let switches = source.windows(2).filter(|w| w[0] != w[1]).count();
            assert!(switches <= params.crossover_points);
        }
    }

    #[test]
    fn mutation_edge_cases() {
        let t = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_schedule(&t, &mut rng);
        let out = mutate_bit_flip(&s, 0.0, 1.0 / 360.0, &mut rng);
        assert_eq!(out.schedule, s);
        assert!(!out.applied);

        let out = mutate_bit_flip(&s, 1.0, 1.0, &mut rng);
        assert_eq!(out.flipped, t.total_cells());
        let cps = t.cells_per_step();
        assert!(out.schedule.step_slice(0).iter().all(|b| *b));
        for i in cps..t.total_cells() {
            assert_eq!(out.schedule.get(i), !s.get(i));
        }
    }

    #[test]
    fn selection_keeps_whole_first_front() {
        let objs: Vec<_> = (0..4)
            .map(|i| ov(i as f64, 3.0 - i as f64))
            .chain((0..4).map(|i| ov(i as f64 + 1.0, 4.0 - i as f64)))
            .collect();
        let mut kept = environmental_selection_indices(&objs, 4);
        kept.sort_unstable();
        assert_eq!(kept, vec![0, 1, 2, 3]);
    }

    #[test]
    fn selection_truncates_split_front_with_extrema_first() {
        // n = 4, F0 has 6 members, the rest dominated
        let front = [
            ov(0.0, 10.0),
            ov(1.0, 9.0),
            ov(1.5, 8.5),
            ov(5.0, 5.0),
            ov(9.0, 1.0),
            ov(10.0, 0.0),
        ];
        let mut objs = front.to_vec();
        objs.extend([ov(20.0, 20.0), ov(21.0, 21.0)]);
        let kept = environmental_selection_indices(&objs, 4);
        // extrema 0 and 5, then crowding: 3 -> 1.5, 4 -> 1.0, 2 -> 0.8, 1 -> 0.3
        assert_eq!(kept, vec![0, 5, 3, 4]);
    }

    #[test]
    fn selection_admits_both_minima_of_non_dominated_union() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 12;
        let mut xs: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        xs.sort_by(f64::total_cmp);
        let objs: Vec<_> = xs.iter().map(|&x| ov(x, 1.0 - x)).collect();
        let kept = environmental_selection_indices(&objs, n);
        assert_eq!(kept.len(), n);
        assert!(kept.contains(&0));
        assert!(kept.contains(&(2 * n - 1)));
    }

    #[test]
    fn selection_rejects_wrong_size() {
        let t = Arc::new(
            ModelTopology::new(
                "one",
                1,
                vec![BlockGroup {
                    name: "g".into(),
                    blocks: 1,
                    components: vec![ComponentSpec {
                        name: "c".into(),
                        mac_weight: 1.0,
                    }],
                }],
                0.0,
            )
            .unwrap(),
        );
        let c = Candidate::seed(CachingSchedule::new_full_recompute(t)).evaluated(ov(1.0, 0.0));
        assert!(matches!(
            environmental_selection(vec![c.clone(); 3], 2),
            Err(Nsga2Error::SizeMismatch {
                expected: 4,
                actual: 3
            })
        ));
        let unevaluated = Candidate {
            objectives: None,
            ..c.clone()
        };
        assert!(matches!(
            environmental_selection(vec![c.clone(), unevaluated], 1),
            Err(Nsga2Error::Unevaluated { .. })
        ));
    }
}
