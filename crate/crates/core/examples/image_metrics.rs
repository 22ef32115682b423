//! PSNR and SSIM between two images, or between a scene and a brightened
//! copy when no paths are given.

use lowlight::imageio::{self, procedural_scene, Image};
use lowlight::objective::{psnr, ssim_metric};

fn main() -> lowlight::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (pred, gt) = if args.len() == 2 {
        (imageio::load(&args[0])?, imageio::load(&args[1])?)
    } else {
        let gt = procedural_scene(32, 32, 4);
        let shifted: Vec<u8> = gt.pixels().iter().map(|&p| p.saturating_add(1)).collect();
        (Image::new(32, 32, shifted)?, gt)
    };
    let (p, g) = (pred.to_tensor(), gt.to_tensor());
    println!("psnr {:.3} dB  ssim {:.5}", psnr(&p, &g)?, ssim_metric(&p, &g)?);
    Ok(())
}
