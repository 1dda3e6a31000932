#![no_main]

use libfuzzer_sys::fuzz_target;
use polysweep::io::{parse_trajectory_csv, write_trajectory_csv, Control};
use polysweep::polyhedra::Polyhedron;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_trajectory_csv(text, None);
    // Anything that parses must survive a write/parse round trip.
    if let Ok(traj) = parse_trajectory_csv(text, None) {
        let s = traj.eta.first().map_or(0, |e| e.len());
        let dim = traj.states[0].len();
        let poly = if s == 0 {
            Polyhedron::unconstrained(dim)
        } else {
            let gens = (0..s).map(|_| first_axis(dim)).collect();
            Polyhedron::new(dim, gens, vec![1.0; s]).unwrap()
        };
        if let Ok(out) = write_trajectory_csv(&traj, &poly) {
            assert!(parse_trajectory_csv(&out, None).is_ok());
        }
    }
});

fn first_axis(dim: usize) -> Control {
    let mut v = Control::zeros(dim);
    v[0] = 1.0;
    v
}
