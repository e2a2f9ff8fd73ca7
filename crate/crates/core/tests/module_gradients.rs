use std::time::Instant;

use trustvl_core::gradcheck::{check_module, ModuleKind};

#[test]
fn every_module_matches_finite_differences() {
    for kind in ModuleKind::ALL {
        let t = Instant::now();
        for seed in 0..3 {
            let r = check_module(kind, seed, 3).unwrap();
            assert!(r.max_rel_error < 1e-4, "{} seed {seed}: {r:?}", kind.as_str());
            println!("{} seed {seed}: {:.2e} over {} params", kind.as_str(), r.max_rel_error, r.params_checked);
        }
        println!("{}: {:?}", kind.as_str(), t.elapsed());
    }
}
