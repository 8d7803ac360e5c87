use super::case::{BusId, NetworkCase};

/// PMU placement by greedy dominating set: a PMU observes its own bus and
/// every adjacent bus. Repeatedly picks the bus covering the most unobserved
/// buses, lowest id on ties, until every bus is observed.
pub fn greedy_pmu_placement(case: &NetworkCase) -> Vec<BusId> {
    let n = case.num_buses();
    let mut covered = vec![false; n];
    let mut remaining = n;
    let mut chosen = Vec::new();
    while remaining > 0 {
        let gain = |i: usize| {
            case.closed_neighborhood(i)
                .into_iter()
                .filter(|&j| !covered[j])
                .count()
        };
        let best = (0..n)
            .max_by(|&a, &b| gain(a).cmp(&gain(b)).then(b.cmp(&a)))
            .expect("non-empty case");
        for j in case.closed_neighborhood(best) {
            if !covered[j] {
                covered[j] = true;
                remaining -= 1;
            }
        }
        chosen.push(case.bus(best).id);
    }
    chosen.sort();
    chosen
}
