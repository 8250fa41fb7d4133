import tempfile

from gbm_patch_classifier.cli import main
from gbm_patch_classifier.synthetic import write_synthetic_dataset


# write a small synthetic dataset: 10 patches of 32x32 per class
workdir = tempfile.mkdtemp()
manifest = write_synthetic_dataset(f"{workdir}/data", counts=(10,) * 6, size=32, seed=0)

# toy-sized network so the run finishes in minutes on a CPU
toy = [
    "--set", "input_size=32",
    "--set", "base_channels=8",
    "--set", "include_stem_maxpool=false",
    "--set", "learning_rate=0.001",
    "--set", "batch_size=16",
    "--set", "max_epochs=30",
]

# five-fold cross-validation: fold0.glpc .. fold4.glpc plus per-fold metrics and cv_summary.csv
main(["cross-validate", "--manifest", manifest, "--output-dir", f"{workdir}/cv", "--deterministic", *toy])

# average the five fold models over the whole manifest
checkpoints = [arg for i in range(5) for arg in ("--checkpoint", f"{workdir}/cv/fold{i}.glpc")]
main(["predict", "--manifest", manifest, "--output-dir", f"{workdir}/predict", *checkpoints])

# score the ensemble predictions against the labels
main(["evaluate", "--manifest", manifest, "--output-dir", f"{workdir}/evaluate",
      "--predictions", f"{workdir}/predict/predictions.csv"])
