//! Spatial relation module on a 4-channel 3×3 map: every position gets one
//! extra channel per position it can attend to.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rafcn::relation::{spatial_relation_augment, spatial_relation_feature, SpatialRelationParams};
use rafcn::{Graph, Result, Tensor};

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (c, h, w) = (4, 3, 3);
    let x = Tensor::from_fn(&[c, h, w], |i| ((i * 7) % 11) as f64 / 10.0 - 0.5);
    let params = SpatialRelationParams::init(c, 2, (h, w), true, &mut rng);

    let mut g = Graph::new();
    let xv = g.constant(x);
    let vars = params.bind(&mut g, false);
    let sr = spatial_relation_feature(&mut g, xv, &vars)?;
    let augmented = spatial_relation_augment(&mut g, xv, &vars)?;

    println!("relation volume shape {:?}", g.shape(sr));
    println!("augmented shape       {:?}", g.shape(augmented));
    let sr = g.value(sr);
    println!("affinities of the centre position (row i = 4) to every j:");
    for j in 0..h * w {
        print!("{:7.4}", sr.at(&[j, 1, 1]));
    }
    println!();
    Ok(())
}
