//! Stage-level timing probe for one training batch. Not a benchmark —
//! coarse numbers for finding the expensive stage quickly.

use std::time::Instant;

use pdetime_core::autodiff::Graph;
use pdetime_core::data::{make_windows, standardize, synthetic_sinusoid};
use pdetime_core::model::{ModelConfig, PdeTime, Variant};

fn main() {
    let cfg = ModelConfig {
        channels: 3,
        lookback: 96,
        horizon: 96,
        latent_dim: 64,
        inr_layers: 5,
        agg_layers: 1,
        n_heads: 1,
        n_scales: 8,
        patch_len: 12,
        lambda: 1.0,
        t_dim: 4,
        smooth_l1_beta: 1.0,
        variant: Variant::Full,
    };
    let model = PdeTime::new(cfg, 2024).unwrap();
    let ds = synthetic_sinusoid(1000, 3, 7).unwrap();
    let ds = standardize(&ds, 0..700).unwrap();
    let windows = make_windows(&ds, 0..500, 96, 96, 1).unwrap();
    let batch: Vec<_> = windows.into_iter().take(32).collect();

    for round in 0..3 {
        let t0 = Instant::now();
        let g = Graph::new();
        let bound = model.bind(&g, true).unwrap();
        let t_bind = t0.elapsed();

        let t1 = Instant::now();
        let fwd = model.forward_batch(&g, &bound, &batch).unwrap();
        let t_fwd = t1.elapsed();

        let t2 = Instant::now();
        fwd.total.backward().unwrap();
        let t_bwd = t2.elapsed();

        let t3 = Instant::now();
        let grads = bound.params.grads();
        let t_grads = t3.elapsed();

        let t4 = Instant::now();
        drop(fwd);
        drop(bound);
        drop(g);
        let t_drop = t4.elapsed();

        println!(
            "round {round}: bind {:.1?}, forward {:.1?}, backward {:.1?}, grads {:.1?} ({} tensors), drop {:.1?}",
            t_bind,
            t_fwd,
            t_bwd,
            t_grads,
            grads.len(),
            t_drop
        );
    }

    // Forward-only split: encoder vs solver vs decode/losses.
    let g = Graph::new();
    let bound = model.bind(&g, true).unwrap();
    let t = Instant::now();
    let fwd = model.forward_batch(&g, &bound, &batch).unwrap();
    println!("forward total {:.1?} ({} graph nodes)", t.elapsed(), g.node_count());
    drop(fwd);
}
