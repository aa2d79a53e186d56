use ftlab::augment::AugmentationPolicy;
use ftlab::data::{compute_stats, Dataset, Image};
use ftlab::restorative::{mae_pretrain, MAEConfig};
use ftlab::vit::{ViTConfig, Pooling};

fn pattern(kind: usize) -> Image {
    let s = 16;
    let data = (0..s * s)
        .map(|i| {
            let (y, x) = ((i / s) as f32, (i % s) as f32);
            match kind {
                0 => (x / 15.0).powi(2),
                1 => if ((x / 4.0) as usize + (y / 4.0) as usize) % 2 == 0 { 0.9 } else { 0.1 },
                2 => 0.5 + 0.4 * (y * 0.8).sin(),
                _ => (-((x - 8.0).powi(2) + (y - 6.0).powi(2)) / 18.0).exp(),
            }
        })
        .collect();
    Image::from_vec(1, s, s, data).unwrap()
}

#[test]
fn mae_memorizes_a_tiny_dataset() {
    let images: Vec<Image> = (0..200).flat_map(|_| (0..4).map(pattern)).collect();
    let ds = Dataset::unlabeled(images, "four-patterns");
    let vit = ViTConfig {
        image_size: 16,
        patch_size: 4,
        depth: 2,
        embed_dim: 16,
        num_heads: 2,
        mlp_ratio: 2.0,
        in_channels: 1,
        use_class_token: true,
        pooling: Pooling::ClassToken,
    };
    let cfg = MAEConfig {
        decoder_dim: 16,
        decoder_heads: 2,
        epochs: 200,
        warmup_epochs: 5,
        batch_size: 64,
        lr: 2e-3,
        augmentation: AugmentationPolicy::identity(16),
        ..MAEConfig::default()
    };
    let stats = compute_stats(&ds).unwrap();
    let out = mae_pretrain(&ds, &vit, &cfg, &stats).unwrap();
    let (first, last) = (out.losses[0], *out.losses.last().unwrap());
    println!("mae loss {first:.5} -> {last:.5} ({:.1}%)", 100.0 * last / first);
    assert!(last < 0.1 * first, "loss {first} -> {last}");
    assert!(out.selected_epoch > 190);
}
