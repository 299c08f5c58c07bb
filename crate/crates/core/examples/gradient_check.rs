//! Compares reverse-mode gradients of a small conv/LSTM stack against central
//! finite differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use wfci_sleep::compute::gradcheck::check_gradients;
use wfci_sleep::compute::{Padding, Tensor};

fn main() -> wfci_sleep::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut randn = |shape: &[usize]| Tensor::<f64>::from_fn(shape, |_| StandardNormal.sample(&mut rng));
    let inputs = vec![randn(&[1, 2, 6, 6]), randn(&[3, 2, 3, 3]), randn(&[3]), randn(&[3, 3])];
    let report = check_gradients(&inputs, 1e-5, |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], Padding::Same)?;
        let y = g.leaky_relu(y, 0.01)?;
        let y = g.max_pool2d(y)?;
        let y = g.global_avg_pool(y)?;
        let y = g.matmul(y, v[3])?;
        let y = g.tanh(y);
        g.dot_const(y, Tensor::new(&[1, 3], vec![1.0, -2.0, 0.5])?)
    })?;
    println!(
        "{} partial derivatives checked, max relative error {:.2e} at {:?}, {} kink retries",
        report.checked, report.max_rel_err, report.worst, report.kink_retries
    );
    Ok(())
}
