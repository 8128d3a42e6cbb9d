//! Channel relation module: pooled channel descriptors, a softmax-normalised
//! C×C affinity map, and the remixed feature map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rafcn::relation::{channel_mix, channel_relation_map, ChannelRelationParams};
use rafcn::{Graph, Result, Tensor};

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (c, h, w) = (3, 4, 4);
    let x = Tensor::from_fn(&[c, h, w], |i| (i / (h * w)) as f64 + 0.1 * (i % 5) as f64);
    let params = ChannelRelationParams::init(c, 4, true, &mut rng);

    let mut g = Graph::new();
    let xv = g.constant(x);
    let vars = params.bind(&mut g, false);
    let cr = channel_relation_map(&mut g, xv, &vars)?;
    let mixed = channel_mix(&mut g, xv, cr)?;

    let map = g.value(cr);
    println!("channel relation map (rows sum to 1):");
    for p in 0..c {
        let row: Vec<String> = (0..c).map(|q| format!("{:.4}", map.at(&[p, q]))).collect();
        println!("  [{}]", row.join(", "));
    }
    println!("remixed map shape {:?}", g.shape(mixed));
    Ok(())
}
