"""Desk-scale end-to-end run: data, base and defended models, attack check, full sweep."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .attacks import AttackConfig
from .data import gen_synthetic_dataset, load_dataset
from .evaluate import Pipeline, evaluate
from .experiment import cache_key, cached_train, clean_accuracy, defended_filename, train_model
from .models import ModelConfig
from .sweep import standard_grid, sweep
from .train import TrainConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class E2EConfig:
    n: int = 600
    size: int = 64
    data_seed: int = 0
    split_seed: int = 0
    model_seed: int = 0
    cnn_train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs_max=80, learning_rate=3e-3, early_stop_patience=15))
    vit_train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs_max=100, learning_rate=1e-3, early_stop_patience=15))
    # defended models start from the base weights and adapt to their pipeline
    cnn_finetune: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs_max=30, learning_rate=2e-3, early_stop_patience=6))
    vit_finetune: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs_max=12, learning_rate=5e-4, early_stop_patience=4))
    probe_epsilon: float = 0.05
    threat_modes: tuple = ("bpda_identity", "transfer")

    def model_configs(self):
        return {"cnn": ModelConfig("simple_cnn", input_size=self.size, seed=self.model_seed),
                "vit": ModelConfig("toy_vit", input_size=self.size, seed=self.model_seed)}

    def base_train(self, tag):
        return self.cnn_train if tag == "cnn" else self.vit_train

    def finetune(self, tag):
        return self.cnn_finetune if tag == "cnn" else self.vit_finetune


def _file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def prepare_data(cfg, root):
    manifest = Path(root) / "data" / "manifest.csv"
    stamp = Path(root) / "data" / "DATA_KEY"
    key = cache_key("data", cfg.n, cfg.size, cfg.data_seed)
    if not (manifest.exists() and stamp.exists() and stamp.read_text() == key):
        gen_synthetic_dataset(cfg.n, cfg.size, cfg.data_seed, manifest.parent)
        stamp.write_text(key)
    return manifest


def train_all(cfg, root, manifest, defended=True, tags=("cnn", "vit")):
    """Base models plus one warm-started defended model per (segmentation, enhancement) cell."""
    root = Path(root)
    train_set, _ = load_dataset(manifest, cfg.split_seed)
    data_key = _file_digest(manifest)
    bases, models = {}, {}
    grid = standard_grid(cfg.threat_modes)
    for tag in tags:
        mcfg, tcfg = cfg.model_configs()[tag], cfg.base_train(tag)
        key = cache_key("base", mcfg.to_dict(), asdict(tcfg), data_key, cfg.split_seed)
        log.info("base %s", tag)
        bases[tag] = cached_train(root / "models" / f"{tag}__base.ckpt", key,
                                  lambda: train_model(train_set, mcfg, tcfg))
        if not defended:
            continue
        for seg in grid.segmentation:
            for enh in grid.enhance:
                pipe = Pipeline(segmentation=seg, enhance=enh)
                ftcfg = cfg.finetune(tag)
                dkey = cache_key("defended", key, pipe.to_dict(), asdict(ftcfg))
                log.info("defended %s %s", tag, pipe.tag)
                models[(tag, pipe.tag)] = cached_train(
                    root / "defended" / defended_filename(mcfg, pipe), dkey,
                    lambda: train_model(train_set, mcfg, ftcfg, pipe, init=bases[tag]))
    return bases, models


def attack_probe(cfg, base, test_set):
    """Drop in mean correct-class confidence under a strong FGSM on the undefended model."""
    atk = AttackConfig("fgsm", epsilon=cfg.probe_epsilon, threat_mode="direct")
    _, rep = evaluate(base, test_set, atk)
    return rep.mean_clean_conf_all - rep.mean_adv_conf_all


def run(cfg=None, root="e2e_out", workers=1, sweep_dir="sweep"):
    """Everything the desk-scale acceptance check needs; returns a summary dict."""
    cfg = cfg or E2EConfig()
    root = Path(root)
    manifest = prepare_data(cfg, root)
    bases, defended = train_all(cfg, root, manifest)
    _, test_set = load_dataset(manifest, cfg.split_seed)
    summary = {"bases": {}}
    for tag, m in bases.items():
        summary["bases"][tag] = {"test_accuracy": clean_accuracy(m, test_set),
                                 "train_cpu_seconds": m.meta.get("train_cpu_seconds"),
                                 "fgsm_confidence_drop": attack_probe(cfg, m, test_set)}
    rows = sweep(bases, defended, test_set, standard_grid(cfg.threat_modes), root / sweep_dir, workers=workers)
    summary["rows"] = rows
    summary["sweep_dir"] = root / sweep_dir
    return summary
