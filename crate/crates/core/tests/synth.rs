use d2dlstm::cascade::TerminalTargets;
use d2dlstm::features::NUM_CATEGORIES;
use d2dlstm::synth::{bayes_accuracy, generate, GeneratorConfig, Preset};

/// Explicit table where prototype `p`'s row is `rows[p]` for every category.
fn explicit(rows: Vec<Vec<f64>>, n_trees: usize) -> GeneratorConfig {
    GeneratorConfig {
        preset: Preset::Explicit,
        k: rows.len(),
        n_trees,
        b_max: 50,
        max_depth: 60,
        transitions: Some(vec![rows; NUM_CATEGORIES]),
        seed: 17,
        ..Default::default()
    }
}

/// With a terminal target on every node, a node's targets are exactly its
/// draws, so the oracle scores the largest row entry.
#[test]
fn oracle_scores_the_largest_row_entry() {
    let row = vec![0.1, 0.1, 0.1, 0.7];
    let cfg = explicit(vec![row; 3], 20_000);
    let (trees, _) = generate(&cfg, cfg.n_trees).unwrap();
    let acc = bayes_accuracy(&cfg, &trees, TerminalTargets::AllNodes).unwrap();
    // Roughly 29,000 targets; four standard errors is under 0.011.
    assert!((acc - 0.7).abs() < 0.011, "{acc}");
}

/// Empirical class frequencies per prototype match the table rows.
#[test]
fn child_frequencies_match_the_rows() {
    let rows = vec![
        vec![0.05, 0.15, 0.1, 0.7],
        vec![0.2, 0.0, 0.2, 0.6],
        vec![0.1, 0.3, 0.05, 0.55],
    ];
    let cfg = explicit(rows.clone(), 5000);
    let (trees, _) = generate(&cfg, cfg.n_trees).unwrap();
    let mut counts = vec![vec![0usize; 4]; 3];
    for t in &trees {
        let protos = t.protos().unwrap();
        for (n, targets) in t.node_targets(3, TerminalTargets::AllNodes).unwrap().iter().enumerate() {
            for &c in targets {
                counts[protos[n]][c] += 1;
            }
        }
    }
    for (p, row) in rows.iter().enumerate() {
        let n: usize = counts[p].iter().sum();
        assert!(n > 1000);
        for (c, &q) in row.iter().enumerate() {
            let freq = counts[p][c] as f64 / n as f64;
            let se = (q * (1.0 - q) / n as f64).sqrt().max(1e-9);
            assert!((freq - q).abs() <= 3.0 * se + 1e-12, "p {p} class {c}: {freq} vs {q}");
        }
    }
}
