//! The stateless zero-sum game: training the meta-agent's initial parameter
//! with the full meta-gradient improves its post-update value, while ignoring
//! the peer's learning makes it worse.

use metamarl::zero_sum_analytic::{mapg_grad, pg_grad, run_fig3, smooth, Fig3Config, Fig3Method, ScalarPair};

fn main() {
    let p = ScalarPair::new(0.5, -0.5);
    println!("at (0.5, -0.5) with alpha 0.75: full {:.5}, peer-blind {:.5}", mapg_grad(p, 0.75), pg_grad(p, 0.75));

    let r = run_fig3(&Fig3Config::default());
    for m in [Fig3Method::MetaMapg, Fig3Method::MetaPg] {
        let s = smooth(&r.means(m), 10);
        let pick: Vec<String> = [0, 50, 100, 200, 300].iter().map(|&i| format!("{:.4}", s[i])).collect();
        println!("{:>9}: {}", m.as_str(), pick.join("  "));
    }
    if let Some(path) = std::env::args().nth(1) {
        std::fs::write(&path, r.to_csv()).expect("write csv");
        println!("wrote {path}");
    }
}
