//! Shared fixtures and independent reference implementations.
#![allow(dead_code)]

use diffnet::Scenario;
use rand::seq::SliceRandom;
use rand::Rng;

pub fn fixture(name: &str) -> Scenario {
    let path = format!("{}/scenarios/{name}.toml", env!("CARGO_MANIFEST_DIR"));
    Scenario::load(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

/// Textbook incremental node model on plain floats, iterating until no
/// inlink is active.
pub fn reference_inm(
    demand: &[f64],
    supply: &[f64],
    turns: &[Vec<f64>],
    alpha: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    const TOL: f64 = 1e-13;
    let (ni, nj) = (demand.len(), supply.len());
    let mut qi = vec![0.0; ni];
    let mut qo = vec![0.0; nj];
    loop {
        let open: Vec<bool> = (0..nj).map(|o| qo[o] < supply[o] - TOL).collect();
        let act: Vec<bool> = (0..ni)
            .map(|l| qi[l] < demand[l] - TOL && (0..nj).all(|o| turns[l][o] <= 0.0 || open[o]))
            .collect();
        if !act.iter().any(|a| *a) {
            return (qi, qo);
        }
        let phi: Vec<f64> = (0..ni)
            .map(|l| if act[l] { alpha[l] } else { 0.0 })
            .collect();
        let phio: Vec<f64> = (0..nj)
            .map(|o| (0..ni).map(|l| turns[l][o] * phi[l]).sum())
            .collect();
        let mut theta = f64::INFINITY;
        for l in 0..ni {
            if act[l] {
                theta = theta.min((demand[l] - qi[l]) / phi[l]);
            }
        }
        for o in 0..nj {
            if open[o] && phio[o] > 0.0 {
                theta = theta.min((supply[o] - qo[o]) / phio[o]);
            }
        }
        for l in 0..ni {
            qi[l] += theta * phi[l];
        }
        for o in 0..nj {
            qo[o] += theta * phio[o];
        }
    }
}

/// Cheapest cost from every node to `dest` by enumerating simple paths.
/// Sums are accumulated from the destination end.
pub fn brute_force_costs(n: usize, links: &[(usize, usize)], w: &[f64], dest: usize) -> Vec<f64> {
    fn walk(
        node: usize,
        dest: usize,
        links: &[(usize, usize)],
        w: &[f64],
        seen: &mut Vec<bool>,
        path: &mut Vec<usize>,
        best: &mut f64,
    ) {
        if node == dest {
            let c = path.iter().rev().fold(0.0, |acc, &l| w[l] + acc);
            *best = best.min(c);
            return;
        }
        for (l, &(a, b)) in links.iter().enumerate() {
            if a == node && !seen[b] {
                seen[b] = true;
                path.push(l);
                walk(b, dest, links, w, seen, path, best);
                path.pop();
                seen[b] = false;
            }
        }
    }
    (0..n)
        .map(|s| {
            let mut best = f64::INFINITY;
            let mut seen = vec![false; n];
            seen[s] = true;
            walk(s, dest, links, w, &mut seen, &mut Vec::new(), &mut best);
            best
        })
        .collect()
}

/// Random layered network: origins, two layers of junctions, destinations.
/// At most 12 links and 4 destinations; every origin reaches at least one
/// destination and every demand is routable.
pub fn random_scenario(rng: &mut impl Rng) -> String {
    let n_orig = rng.gen_range(1..=2);
    let n_mid = rng.gen_range(1..=3);
    let n_dest = rng.gen_range(1..=4);
    let t_max = rng.gen_range(80..=200) * 5;
    let mut text =
        format!(
        "[meta]\ndt = 5.0\nt_max = {t_max}\ndt_route = {}\nmu = {}\ntt_method = \"{}\"\nm = {}\n\n",
        5 * rng.gen_range(1..=4),
        if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.01..0.2) },
        if rng.gen_bool(0.5) { "average" } else { "segments" },
        rng.gen_range(1..=3),
    );
    let mut node = |id: String, kind: &str| {
        text.push_str(&format!("[[nodes]]\nid = \"{id}\"\nkind = \"{kind}\"\n\n"));
        id
    };
    let origins: Vec<String> = (0..n_orig)
        .map(|i| node(format!("o{i}"), "origin"))
        .collect();
    let mids: Vec<String> = (0..n_mid)
        .map(|i| node(format!("m{i}"), "intermediate"))
        .collect();
    let dests: Vec<String> = (0..n_dest)
        .map(|i| node(format!("d{i}"), "destination"))
        .collect();

    let mut edges: Vec<(String, String)> = Vec::new();
    for o in &origins {
        edges.push((o.clone(), mids.choose(rng).unwrap().clone()));
    }
    for (i, m) in mids.iter().enumerate() {
        if !edges.iter().any(|(_, b)| b == m) {
            let pool: Vec<&String> = origins.iter().chain(&mids[..i]).collect();
            edges.push(((*pool.choose(rng).unwrap()).clone(), m.clone()));
        }
        // Forward edges between junctions keep the graph acyclic.
        if i + 1 < n_mid && rng.gen_bool(0.5) {
            edges.push((m.clone(), mids[rng.gen_range(i + 1..n_mid)].clone()));
        }
        edges.push((m.clone(), dests.choose(rng).unwrap().clone()));
    }
    for d in &dests {
        if !edges.iter().any(|(_, b)| b == d) && edges.len() < 12 {
            edges.push((mids.choose(rng).unwrap().clone(), d.clone()));
        }
    }
    while edges.len() < 12 && rng.gen_bool(0.4) {
        let a = mids.choose(rng).unwrap().clone();
        let b = dests.choose(rng).unwrap().clone();
        edges.push((a, b));
    }
    for (i, (a, b)) in edges.iter().enumerate() {
        let u = rng.gen_range(10.0..25.0f64);
        let d = (rng.gen_range(1.0..4.0) * 5.0 * u).ceil();
        let q = rng.gen_range(0.3..1.2f64);
        let k = rng.gen_range(0.12..0.25f64).max(q / u * 1.5);
        text.push_str(&format!(
            "[[links]]\nid = \"l{i}\"\nfrom = \"{a}\"\nto = \"{b}\"\nd = {d}\nu = {u}\nqmax = {q}\nkappa = {k}\nalpha = {}\n\n",
            rng.gen_range(0.5..2.0)
        ));
    }
    // Demands only towards destinations reachable from the origin.
    let reach = |from: &str| -> Vec<String> {
        let mut seen = vec![from.to_string()];
        let mut i = 0;
        while i < seen.len() {
            let cur = seen[i].clone();
            for (a, b) in &edges {
                if *a == cur && !seen.contains(b) {
                    seen.push(b.clone());
                }
            }
            i += 1;
        }
        seen.into_iter().filter(|n| n.starts_with('d')).collect()
    };
    for o in &origins {
        for d in reach(o) {
            if rng.gen_bool(0.7) {
                let t0 = 5.0 * rng.gen_range(0..40) as f64;
                let t1 = (t0 + 5.0 * rng.gen_range(10..80) as f64).min(t_max as f64);
                text.push_str(&format!(
                    "[[demands]]\norigin = \"{o}\"\ndestination = \"{d}\"\nrates = [[{t0}, {t1}, {}]]\n\n",
                    rng.gen_range(0.05..0.9)
                ));
            }
        }
    }
    text
}
