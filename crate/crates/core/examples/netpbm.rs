//! Writes an RGB tile as binary PPM and a label raster as PGM, then reads
//! both back.

use rafcn::data::netpbm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm};
use rafcn::{LabelMap, Result, Tensor};

fn main() -> Result<()> {
    let (h, w) = (4, 6);
    let image = Tensor::from_fn(&[3, h, w], |i| ((i * 37) % 256) as f64 / 255.0);
    let labels = LabelMap::new(h, w, (0..h * w).map(|i| (i % 6) as u8).collect())?;

    let ppm = encode_ppm(&image)?;
    let pgm = encode_pgm(&labels);
    println!("PPM header {:?}, {} bytes", String::from_utf8_lossy(&ppm[..11]), ppm.len());
    println!("PGM {} bytes", pgm.len());

    let image_back = decode_ppm(&ppm)?;
    let labels_back = decode_pgm(&pgm)?;
    println!("image max error {:.1e}", image.max_abs_diff(&image_back));
    println!("labels identical: {}", labels == labels_back);
    Ok(())
}
