use std::time::Instant;

use anonflow::config::Config;
use anonflow::training::{gradcheck_pipeline, GRADCHECK_TOL};

#[test]
fn every_trainable_network_matches_finite_differences() {
    let start = Instant::now();
    let rows = gradcheck_pipeline(&Config::default(), 5, 11).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(rows.len(), 4 + 4 * Config::default().flow.n_blocks);
    for r in &rows {
        println!("{:<14} coords={:<3} max_rel={:.2e}", r.network, r.coords_checked, r.max_rel_error);
    }
    for r in &rows {
        assert!(r.coords_checked >= 5 && r.passed(), "{}", r.network);
        assert!(r.max_rel_error < GRADCHECK_TOL, "{} relative error {:.3e}", r.network, r.max_rel_error);
    }
    println!("gradcheck wall {secs:.1}s");
}
