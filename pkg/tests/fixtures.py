"""Seeded experiment fixtures shared by the acceptance and integration tests."""

import copy

# synthetic gaussian-label regression, N=2000, d=8, MLP 8-32-16-1, label band below 42 (~30%)
SYNTHETIC = {
    "dataset": {"generator": "synthetic", "seed": 0, "N": 2000, "d": 8, "noise_std": 10.0},
    "split": {"rule": {"kind": "label_band", "lo": None, "hi": 42.0}, "test_fraction": 0.2, "seed": 0},
    "model": {"sizes": [8, 32, 16, 1], "activation": "relu"},
    "train": {"epochs": 300, "learning_rate": 0.01, "batch_size": 32, "loss": "mae", "seed": 0},
    "method": "blindspot",
    "method_config": {"blindspot_epochs": 5, "unlearn_epochs": 3, "unlearn_lr": 0.01},
}

# 16x16 pattern images with 100 trigger-patched samples relabelled to 1.0; forget = poisoned
BACKDOOR = {
    "dataset": {"generator": "patterns", "seed": 0, "N": 2000, "side": 16,
                "backdoor": {"poison_count": 100, "patch_size": 4, "patch_value": 1.0, "target_label": 1.0}},
    "split": {"rule": {"kind": "poisoned"}, "test_fraction": 0.2, "seed": 0},
    "model": {"sizes": [256, 64, 32, 1], "activation": "relu"},
    "train": {"epochs": 50, "learning_rate": 0.003, "batch_size": 32, "loss": "mae", "seed": 0},
    "method": "blindspot",
    "method_config": {"blindspot_epochs": 5, "blindspot_lr": 0.001, "unlearn_epochs": 3, "unlearn_lr": 0.01},
    "metrics": {"attack": False},
    "inversion": {"targets": [0, 1], "steps": 300},
}

# small and fast, for integration tests of plumbing rather than quality
TINY = {
    "dataset": {"generator": "synthetic", "seed": 0, "N": 300, "d": 4, "noise_std": 2.0},
    "split": {"rule": {"kind": "label_band", "lo": None, "hi": 42.0}, "test_fraction": 0.2, "seed": 0},
    "model": {"sizes": [4, 8, 4, 1]},
    "train": {"epochs": 5, "learning_rate": 0.01, "seed": 0},
    "method": "blindspot",
    "method_config": {"blindspot_epochs": 1, "unlearn_epochs": 1},
    "metrics": {"attack": True, "attack_max_per_class": 40},
}


def config(base, **overrides):
    d = copy.deepcopy(base)
    for k, v in overrides.items():
        d[k] = v
    return d
