// SPDX-License-Identifier: MIT OR Apache-2.0

//! Newton-Schulz orthogonalization, then the same small model trained with
//! Adam and with Muon.
//!
//! ```text
//! cargo run --release --example muon_vs_adam
//! ```

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use talelab::model::Model;
use talelab::taskgen::TaskSpec;
use talelab::trainer::{newton_schulz_orthogonalize, orthogonality_error, train, NewtonSchulz, OptimizerKind};
use rand_distr::{Distribution, StandardNormal};
use talelab_numkernel::Tensor;

fn main() -> talelab::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    println!("orthogonality error |G - I|_F");
    for (r, c) in [(16, 64), (64, 16), (32, 32)] {
        let g = Tensor::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
        let errs: Vec<String> = [1, 3, 5, 10, 20]
            .iter()
            .map(|&n| {
                let o = newton_schulz_orthogonalize(&g, &NewtonSchulz::CONVERGENT.with_iters(n)).unwrap();
                format!("{n}:{:.1e}", orthogonality_error(&o).unwrap())
            })
            .collect();
        println!("  {r}x{c}  {}", errs.join("  "));
    }

    let (model_cfg, base) = common::small_config();
    let task = TaskSpec::linear(1.0)?;
    for kind in [OptimizerKind::Adam, OptimizerKind::Muon] {
        let cfg = base.clone().with_optimizer(kind);
        let out = train(Model::init(model_cfg.clone(), cfg.seed)?, &cfg, &task)?;
        let last = out.curve.last().map(|p| p.loss).unwrap_or(f64::NAN);
        println!("{kind:?}: final loss {last:.3e}, held-out mse {:.3e}", out.validation_mse);
    }
    Ok(())
}
