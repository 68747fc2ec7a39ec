//! Dense O(n^3) Hungarian algorithm (shortest augmenting paths with potentials).

/// Minimum-cost perfect matching on a square matrix. Returns `assignment[row] = col`.
pub fn min_cost_assignment(costs: &[Vec<i64>]) -> Vec<usize> {
    let n = costs.len();
    if n == 0 {
        return Vec::new();
    }
    assert!(costs.iter().all(|r| r.len() == n), "cost matrix must be square");

    const INF: i64 = i64::MAX / 4;
    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for row in 1..=n {
        row_of[0] = row;
        let mut col = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col] = true;
            let r = row_of[col];
            let mut delta = INF;
            let mut next = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = costs[r - 1][j - 1] - u[r] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = col;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    next = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            col = next;
            if row_of[col] == 0 {
                break;
            }
        }
        // Augment along the alternating path.
        loop {
            let prev = way[col];
            row_of[col] = row_of[prev];
            col = prev;
            if col == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            assignment[row_of[j] - 1] = j - 1;
        }
    }
    assignment
}

pub fn assignment_cost(costs: &[Vec<i64>], assignment: &[usize]) -> i64 {
    assignment.iter().enumerate().map(|(i, &j)| costs[i][j]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_by_three() {
        let costs = vec![vec![4, 1, 3], vec![2, 0, 5], vec![3, 2, 2]];
        let a = min_cost_assignment(&costs);
        assert_eq!(assignment_cost(&costs, &a), 5);
    }

    #[test]
    fn empty_and_single() {
        assert!(min_cost_assignment(&[]).is_empty());
        assert_eq!(min_cost_assignment(&[vec![7]]), vec![0]);
    }
}
