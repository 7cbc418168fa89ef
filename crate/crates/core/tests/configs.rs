//! The experiment files shipped in `configs/` parse and validate.

use std::path::PathBuf;

use ygan::config::ExperimentFile;
use ygan::data::{AnomalyClass, SourceKind};

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentFile {
    ExperimentFile::load(&configs_dir().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn every_shipped_config_validates() {
    let mut seen = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            ExperimentFile::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 6, "found {seen} configs");
}

#[test]
fn full_scale_configs_use_reference_hyperparameters() {
    for name in ["mnist.json", "fmnist.json", "cifar10.json"] {
        let exp = load(name);
        assert_eq!(exp.train.epochs, 100, "{name}");
        assert_eq!(exp.model.latent_dim, 100, "{name}");
        assert_eq!(exp.model.hidden_units, 30, "{name}");
        assert_eq!(exp.model.image_size, 32, "{name}");
        assert_eq!(exp.split.train_fraction, 0.8, "{name}");
        assert_eq!(exp.eval.runs, Some(10), "{name}");
        assert_eq!((exp.train.weights.lambda1, exp.train.weights.lambda5), (50.0, 50.0), "{name}");
    }
    let plants = load("plantvillage.json");
    assert_eq!(plants.train.epochs, 200);
    assert_eq!(plants.split.anomaly_class, AnomalyClass::External);
    assert_eq!(plants.data.dataset.source, SourceKind::ImageFolder);
    assert!(plants.data.augment.is_some());
}

#[test]
fn desk_configs_differ_only_in_budget() {
    let (desk, full) = (load("mnist_desk.json"), load("mnist.json"));
    assert_eq!(desk.train.epochs, 25);
    assert_eq!(desk.split.max_train, Some(10_000));
    assert_eq!(desk.model.latent_dim, full.model.latent_dim);
    let color = load("color_mnist_desk.json");
    assert!(color.data.colorize);
    assert_eq!(color.model.channels, 3);
}
