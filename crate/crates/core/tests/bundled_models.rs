use std::path::{Path, PathBuf};

use tee_cnn::model::{load_architecture, load_model};
use tee_cnn::zoo;
use tee_cnn::{Architecture, LayerDesc, Shape3};

fn models_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("models")
}

fn bundled() -> [(&'static str, Architecture); 3] {
    [
        ("vgg16.json", zoo::vgg16()),
        ("vgg-large.json", zoo::vgg_large()),
        ("vgg-large-desk.json", zoo::vgg_large_desk()),
    ]
}

#[test]
fn bundled_files_match_builders() {
    for (file, arch) in bundled() {
        let loaded = load_architecture(&models_dir().join(file)).unwrap();
        assert_eq!(loaded, arch, "{file}");
    }
}

#[test]
fn vgg16_file_has_sixteen_weighted_layers() {
    let arch = load_architecture(&models_dir().join("vgg16.json")).unwrap();
    assert_eq!(arch.weighted_layers(), 16);
    let LayerDesc::Fc(fc) = arch.layers[18] else {
        panic!("layer 19 should be fc")
    };
    assert_eq!((fc.out_features, fc.in_features), (4096, 25088));
}

#[test]
fn vgg_large_file_input_and_first_layer() {
    let arch = load_architecture(&models_dir().join("vgg-large.json")).unwrap();
    assert_eq!(arch.input, Shape3::new(3, 450, 450));
    let LayerDesc::Conv(c) = arch.layers[0] else {
        panic!("layer 1 should be conv")
    };
    assert_eq!(c.out_channels, 64);
}

#[test]
fn desk_model_materialises() {
    let model = load_model(&models_dir().join("vgg-large-desk.json")).unwrap();
    assert_eq!(model.layers.len(), 19);
}

#[test]
fn malformed_file_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let path = dir.join("bad.json");
    std::fs::write(
        &path,
        r#"{"name":"x","input":{"channels":1,"height":4,"width":4},
            "layers":[{"type":"conv","in_channels":1,"out_channels":1,"kernel":3,"stride":1,"paddin":0}]}"#,
    )
    .unwrap();
    let err = load_architecture(&path).unwrap_err().to_string();
    assert!(err.contains("paddin"), "{err}");
}

#[test]
#[ignore = "rewrites models/ from the builders"]
fn regenerate_bundled_models() {
    for (file, arch) in bundled() {
        std::fs::write(models_dir().join(file), arch.to_json() + "\n").unwrap();
    }
}
