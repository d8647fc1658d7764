#![allow(dead_code)]

use dualgen::config::RunConfig;
use dualgen::decoder::DecoderConfig;
use dualgen::encoder::LevelConfig;

/// Smallest configuration that exercises every component.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::toy();
    let m = &mut c.model;
    m.encoder.levels = vec![LevelConfig::new(32, 8, 16), LevelConfig::new(8, 4, 16)];
    m.encoder.latent_dim = 8;
    m.refine.coarse_size = 64;
    m.decoder = DecoderConfig {
        coarse_size: 64,
        fine_size: 128,
        scales: vec![16, 16],
        branches: 2,
    };
    m.gan.fine_size = 128;
    m.gan.channels = 16;
    m.gan.style_dim = 8;
    m.gan.disc_widths = vec![16];
    m.partial_size = 128;
    m.z_dim = 12;
    c.data.synthetic_count = 4;
    c.data.synthetic_resolution = 512;
    c.train.batch_size = 2;
    c.train.lr0 = 1e-3;
    c
}
