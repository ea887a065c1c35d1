//! Built-in architectures.

use crate::layers::ActivationKind;
use crate::layers::{ConvLayerSpec, PoolSpec};
use crate::model::{ActivationDesc, Architecture, LayerDesc, WeightSource};
use crate::tensor::Shape3;

pub const VGG16_SEED: u64 = 16;
pub const VGG_LARGE_SEED: u64 = 450;

fn conv3(c: usize, n: usize) -> LayerDesc {
    LayerDesc::conv(c, n, 3, 1, 1)
}

fn pool(window: usize, stride: usize, padding: usize) -> LayerDesc {
    LayerDesc::Maxpool(PoolSpec::padded(window, stride, padding))
}

fn relu() -> LayerDesc {
    LayerDesc::Activation(ActivationDesc {
        kind: ActivationKind::Relu,
    })
}

/// VGG-16 at 224x224. Layer 19 is the first fully connected layer
/// (4096 x 25088).
pub fn vgg16() -> Architecture {
    let mut layers = Vec::new();
    let mut c = 3;
    for (n, reps) in [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)] {
        for _ in 0..reps {
            layers.push(conv3(c, n));
            c = n;
        }
        layers.push(pool(2, 2, 0));
    }
    layers.extend([
        LayerDesc::fc(512 * 7 * 7, 4096),
        relu(),
        LayerDesc::fc(4096, 4096),
        relu(),
        LayerDesc::fc(4096, 1000),
    ]);
    let mut arch = Architecture::new("vgg16", Shape3::new(3, 224, 224), layers).expect("vgg16 is well formed");
    arch.weights = WeightSource::Random { seed: VGG16_SEED };
    arch
}

/// The enlarged VGG variant with 450x450 input and 64 first-layer kernels,
/// Darknet-numbered: pools are layers 3, 6, 9, 12 and 15, and the last four
/// convolutions widen to 1000 and 2000 filters.
pub fn vgg_large() -> Architecture {
    vgg_large_scaled("vgg-large", 1, 450)
}

/// [`vgg_large`] with channel counts divided by 2 and a 318x318 input, so
/// every tensor is about a quarter of the full size.
pub fn vgg_large_desk() -> Architecture {
    vgg_large_scaled("vgg-large-desk", 2, 318)
}

/// [`vgg_large`] with every channel count divided by `channel_div` and the
/// given square input resolution.
pub fn vgg_large_scaled(name: &str, channel_div: usize, resolution: usize) -> Architecture {
    let ch = |n: usize| (n / channel_div).max(1);
    let mut layers = Vec::new();
    let mut c = 3;
    let mut push_convs = |layers: &mut Vec<LayerDesc>, widths: &[usize]| {
        for &n in widths {
            layers.push(conv3(c, ch(n)));
            c = ch(n);
        }
    };
    push_convs(&mut layers, &[64, 64]);
    layers.push(pool(2, 2, 1));
    push_convs(&mut layers, &[128, 128]);
    layers.push(pool(2, 2, 1));
    push_convs(&mut layers, &[256, 256]);
    layers.push(pool(4, 4, 3));
    push_convs(&mut layers, &[512, 512]);
    layers.push(pool(2, 2, 1));
    push_convs(&mut layers, &[512, 512]);
    layers.push(pool(4, 4, 3));
    push_convs(&mut layers, &[1000, 1000, 2000, 1000]);
    let mut arch =
        Architecture::new(name, Shape3::new(3, resolution, resolution), layers).expect("vgg-large is well formed");
    arch.weights = WeightSource::Random { seed: VGG_LARGE_SEED };
    arch
}

pub const BUILTIN_NAMES: [&str; 3] = ["vgg16", "vgg-large", "vgg-large-desk"];

/// Looks up a built-in architecture by name.
pub fn builtin(name: &str) -> Option<Architecture> {
    match name {
        "vgg16" => Some(vgg16()),
        "vgg-large" => Some(vgg_large()),
        "vgg-large-desk" => Some(vgg_large_desk()),
        _ => None,
    }
}

/// A conv layer whose im2col matrix is exactly 4 MiB: 16 input channels,
/// 4x4 kernel, 67x67 input, 32 filters, 64x64 output.
pub fn thrash_toy() -> (ConvLayerSpec, Shape3) {
    (ConvLayerSpec::new(16, 32, 4, 1, 0), Shape3::new(16, 67, 67))
}
