use approx::assert_abs_diff_eq;
use ices_core::envs::{oracle_scaffold, MatrixGameTable};
use serde::Deserialize;

#[derive(Deserialize)]
struct Fixture {
    n_states: usize,
    n_actions: usize,
    entries: Vec<Entry>,
}

#[derive(Deserialize)]
struct Entry {
    state: usize,
    joint: Vec<usize>,
    agent: usize,
    kl: f64,
}

#[test]
fn oracle_matches_independent_table() {
    let text = include_str!("fixtures/matrix_oracle.json");
    let fixture: Fixture = serde_json::from_str(text).unwrap();
    let table = MatrixGameTable::shipped();
    assert_eq!(fixture.n_states, table.n_states);
    assert_eq!(fixture.n_actions, table.n_actions);
    assert_eq!(fixture.entries.len(), table.n_states * table.n_joint() * table.n_agents);
    for e in &fixture.entries {
        let got = oracle_scaffold(&table, e.state, &e.joint, e.agent).unwrap();
        assert_abs_diff_eq!(got, e.kl, epsilon = 1e-12);
    }
}
