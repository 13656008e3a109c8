//! Golden-file checks for the text dumps. Set `UPDATE_GOLDEN=1` to rewrite
//! the files after an intended change.

use std::path::PathBuf;

use transzero_core::envs::{Environment, GridSpec, GridWorld, Layout};
use transzero_core::networks::Prediction;
use transzero_core::tree::{backup_depth_parallel, MvcParams, SearchTree, ROOT};

fn check(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected =
        std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(
        actual, expected,
        "{name} changed; rerun with UPDATE_GOLDEN=1 if intended"
    );
}

fn pred(value: f64, reward: f64, prior: &[f64]) -> Prediction {
    Prediction {
        value,
        reward,
        prior: prior.to_vec(),
    }
}

#[test]
fn tree_dump() {
    let params = MvcParams {
        beta: 2.0,
        gamma: 0.9,
        ..MvcParams::default()
    };
    let mut tree = SearchTree::new(2, 16);
    tree.set_outputs(ROOT, pred(0.5, 0.0, &[0.6, 0.4]), None);
    let a = tree.add_child(ROOT, 0).unwrap();
    let b = tree.add_child(ROOT, 1).unwrap();
    let c = tree.add_child(a, 1).unwrap();
    tree.set_outputs(a, pred(1.0, 0.25, &[0.5, 0.5]), None);
    tree.set_outputs(b, pred(-0.5, 1.0, &[0.3, 0.7]), None);
    tree.set_outputs(c, pred(2.0, -1.0, &[0.9, 0.1]), None);
    backup_depth_parallel(&mut tree, ROOT, &params).unwrap();
    check("tree_dump.txt", &tree.dump(&params));
}

#[test]
fn grid_layouts() {
    let mut env = GridWorld::new(GridSpec {
        size: 4,
        lava: 3,
        step_limit: None,
    })
    .unwrap();
    let mut text = String::new();
    for seed in 0..4 {
        env.reset(seed).unwrap();
        let layout = env.layout().to_text();
        assert_eq!(Layout::from_text(&layout).unwrap(), *env.layout());
        text.push_str(&format!("seed {seed}\n{layout}"));
    }
    check("grid_layouts.txt", &text);
}
