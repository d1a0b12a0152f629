//! Shared test support: an exact transportation-problem solver used as the
//! independent oracle for the entropic solver, plus small helpers.

#![allow(dead_code)]

/// Exact solution of min <flow, cost> subject to row sums `a`, column sums
/// `b`, flow >= 0, via network simplex on the transportation polytope with
/// Bland's smallest-index anti-cycling rule. Returns (flow, cost).
///
/// The result is certified before returning: primal feasibility and
/// non-negative reduced costs (within fp tolerance), which by LP duality
/// proves optimality. Panics on any violation, so a buggy oracle fails
/// loudly instead of silently blessing the implementation under test.
pub fn transport_lp(cost: &[f64], a: &[f64], b: &[f64]) -> (Vec<f64>, f64) {
    let (m, n) = (a.len(), b.len());
    assert_eq!(cost.len(), m * n);
    assert!((a.iter().sum::<f64>() - b.iter().sum::<f64>()).abs() < 1e-9);

    // north-west corner initial basic feasible solution; exactly m+n-1
    // basic cells (some possibly zero), forming a spanning tree
    let mut flow = vec![0.0; m * n];
    let mut basic = vec![false; m * n];
    let mut row_rem = a.to_vec();
    let mut col_rem = b.to_vec();
    let (mut i, mut j) = (0, 0);
    loop {
        let f = row_rem[i].min(col_rem[j]);
        flow[i * n + j] = f;
        basic[i * n + j] = true;
        row_rem[i] -= f;
        col_rem[j] -= f;
        if i == m - 1 && j == n - 1 {
            break;
        }
        if row_rem[i] <= col_rem[j] && i < m - 1 {
            i += 1;
        } else if j < n - 1 {
            j += 1;
        } else {
            i += 1;
        }
    }

    let max_pivots = 200 * (m + n) * (m + n) + 1000;
    for _pivot in 0..max_pivots {
        // potentials from the basis tree: u_i + v_j = c_ij on basic cells
        let (u, v) = potentials(cost, &basic, m, n);

        // entering variable: first cell (row-major) with negative reduced cost
        let mut entering = None;
        for ii in 0..m {
            for jj in 0..n {
                if !basic[ii * n + jj] && cost[ii * n + jj] - u[ii] - v[jj] < -1e-12 {
                    entering = Some((ii, jj));
                    break;
                }
            }
            if entering.is_some() {
                break;
            }
        }
        let Some((ei, ej)) = entering else {
            break; // optimal
        };

        // unique cycle: the tree path from row ei to column ej, plus the
        // entering edge; edges alternate +/- starting with + on entering
        let path = tree_path(&basic, m, n, ei, m + ej);
        let mut minus_cells: Vec<(usize, usize)> = Vec::new();
        let mut cells = vec![(ei, ej)];
        for w in path.windows(2) {
            let (x, y) = (w[0], w[1]);
            let (r, c) = if x < m { (x, y - m) } else { (y, x - m) };
            cells.push((r, c));
        }
        for (idx, &(r, c)) in cells.iter().enumerate() {
            if idx % 2 == 1 {
                minus_cells.push((r, c));
            }
        }
        let delta = minus_cells
            .iter()
            .map(|&(r, c)| flow[r * n + c])
            .fold(f64::INFINITY, f64::min);
        // leaving variable: smallest index among the minus cells at delta
        let leaving = *minus_cells
            .iter()
            .filter(|&&(r, c)| flow[r * n + c] <= delta + 1e-15)
            .min()
            .expect("cycle has a minus edge");

        for (idx, &(r, c)) in cells.iter().enumerate() {
            if idx % 2 == 0 {
                flow[r * n + c] += delta;
            } else {
                flow[r * n + c] -= delta;
            }
        }
        flow[leaving.0 * n + leaving.1] = 0.0;
        basic[leaving.0 * n + leaving.1] = false;
        basic[ei * n + ej] = true;
    }

    // certificate: feasibility + dual feasibility = optimality
    let (u, v) = potentials(cost, &basic, m, n);
    for ii in 0..m {
        for jj in 0..n {
            assert!(
                cost[ii * n + jj] - u[ii] - v[jj] >= -1e-8,
                "oracle left a negative reduced cost"
            );
            assert!(flow[ii * n + jj] >= -1e-12, "oracle produced negative flow");
        }
    }
    for (ii, &ai) in a.iter().enumerate() {
        let row: f64 = flow[ii * n..(ii + 1) * n].iter().sum();
        assert!((row - ai).abs() < 1e-9, "oracle row marginal violated");
    }
    for (jj, &bj) in b.iter().enumerate() {
        let col: f64 = (0..m).map(|ii| flow[ii * n + jj]).sum();
        assert!((col - bj).abs() < 1e-9, "oracle column marginal violated");
    }

    let total: f64 = flow.iter().zip(cost).map(|(f, c)| f * c).sum();
    (flow, total)
}

/// Solve u_i + v_j = c_ij over the basis tree (u_0 = 0) by breadth-first
/// propagation.
fn potentials(cost: &[f64], basic: &[bool], m: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut u = vec![f64::NAN; m];
    let mut v = vec![f64::NAN; n];
    u[0] = 0.0;
    let mut queue = vec![0usize]; // node ids: rows 0..m, cols m..m+n
    while let Some(node) = queue.pop() {
        if node < m {
            for jj in 0..n {
                if basic[node * n + jj] && v[jj].is_nan() {
                    v[jj] = cost[node * n + jj] - u[node];
                    queue.push(m + jj);
                }
            }
        } else {
            let jj = node - m;
            for ii in 0..m {
                if basic[ii * n + jj] && u[ii].is_nan() {
                    u[ii] = cost[ii * n + jj] - v[jj];
                    queue.push(ii);
                }
            }
        }
    }
    assert!(
        u.iter().all(|x| !x.is_nan()) && v.iter().all(|x| !x.is_nan()),
        "basis does not span the bipartite graph"
    );
    (u, v)
}

/// Path between two nodes of the basis tree (rows 0..m, columns m..m+n).
fn tree_path(basic: &[bool], m: usize, n: usize, from: usize, to: usize) -> Vec<usize> {
    let total = m + n;
    let mut parent = vec![usize::MAX; total];
    let mut visited = vec![false; total];
    visited[from] = true;
    let mut queue = std::collections::VecDeque::from([from]);
    while let Some(node) = queue.pop_front() {
        if node == to {
            break;
        }
        if node < m {
            for jj in 0..n {
                if basic[node * n + jj] && !visited[m + jj] {
                    visited[m + jj] = true;
                    parent[m + jj] = node;
                    queue.push_back(m + jj);
                }
            }
        } else {
            let jj = node - m;
            for ii in 0..m {
                if basic[ii * n + jj] && !visited[ii] {
                    visited[ii] = true;
                    parent[ii] = m + jj;
                    queue.push_back(ii);
                }
            }
        }
    }
    assert!(visited[to], "basis tree is disconnected");
    let mut path = vec![to];
    let mut cur = to;
    while cur != from {
        cur = parent[cur];
        path.push(cur);
    }
    path.reverse();
    path
}

/// Positive random weights normalised to sum 1.
pub fn random_weights(n: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.05).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}
