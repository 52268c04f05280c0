//! Magic-box surrogates on a two-action bandit: the forward value is 1, and
//! repeated differentiation recovers score-function gradients and Hessians.

use metamarl::learning::TapePolicy;
use metamarl::policies::softmax;
use metamarl::tape::Tape;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let theta = [0.3, -0.4];
    let (action, reward) = (1, 2.0);

    let mut t = Tape::new();
    let p = [t.param(theta[0]), t.param(theta[1])];
    let pol = TapePolicy::build(&mut t, &p, 2)?;
    let boxed = t.magic_box(&[pol.log_prob(0, action)])?;
    let surrogate = t.scale(boxed, reward)?;
    println!("magic box value: {}", t.value(boxed));

    let grad = t.grad_nodes(surrogate, &p)?;
    println!("first derivative: {:?}", t.values(&grad));
    let pi = softmax(&theta);
    let score: Vec<f64> = (0..2).map(|k| f64::from(u8::from(k == action)) - pi[k]).collect();
    println!("r * d log pi(a):  {:?}", score.iter().map(|s| reward * s).collect::<Vec<_>>());

    for (k, g) in grad.iter().enumerate() {
        println!("second derivative row {k}: {:?}", t.grad_values(*g, &p)?);
    }

    // stop-gradient blocks the same flow
    let frozen = t.stop_gradient(surrogate)?;
    println!("through stop_gradient: {:?}", t.grad_values(frozen, &p)?);
    Ok(())
}
