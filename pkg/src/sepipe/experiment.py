"""Glue for training base and defended models and locating their checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError, DataError, ParseError
from .evaluate import Pipeline, stack_samples
from .models import ModelConfig, build_model, load_checkpoint, read_checkpoint_header, save_checkpoint
from .train import TrainConfig, accuracy, train

log = logging.getLogger(__name__)

MODEL_ALIASES = {"cnn": "simple_cnn", "simple_cnn": "simple_cnn", "vit": "toy_vit", "toy_vit": "toy_vit"}
MODEL_TAGS = {"simple_cnn": "cnn", "toy_vit": "vit"}


def split_config(flat):
    """Split a flat JSON config into model, train and pipeline parts; unknown keys are an error."""
    model_keys = set(ModelConfig.__dataclass_fields__)
    train_keys = set(TrainConfig.__dataclass_fields__) - {"seed"}
    pipe_keys = {"segmentation", "segment", "mask_source", "option", "grid_x", "grid_y", "clip", "blur",
                 "radius", "amount", "cutoff", "margin", "data_seed", "train_seed"}
    unknown = set(flat) - model_keys - train_keys - pipe_keys
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    m = {k: v for k, v in flat.items() if k in model_keys}
    if "kind" in m:
        m["kind"] = MODEL_ALIASES.get(m["kind"], m["kind"])
    if "conv_channels" in m:
        m["conv_channels"] = tuple(m["conv_channels"])
    t = {k: v for k, v in flat.items() if k in train_keys}
    if "train_seed" in flat:
        t["seed"] = flat["train_seed"]
    p = {k: v for k, v in flat.items() if k in pipe_keys}
    return ModelConfig(**m), TrainConfig(**t), Pipeline.from_dict(p)


def read_config(path):
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return cfg


def preprocess_samples(samples, pipeline):
    x, y, masks = stack_samples(samples)
    return pipeline.apply_batch(x, masks), y


def train_model(train_samples, model_cfg, train_cfg, pipeline=None, init=None, progress=None):
    """Train ``model_cfg`` on ``pipeline``-processed images.

    ``init`` optionally warm-starts from another model's parameters (same
    config), which is how the sweep's defended models are fine-tuned.
    """
    pipeline = pipeline or Pipeline()
    x, y = preprocess_samples(train_samples, pipeline)
    model = build_model(model_cfg)
    if init is not None:
        if init.config != model_cfg:
            raise ConfigError("warm start needs a model with the same config")
        model = replace(model, params={k: v.copy() for k, v in init.params.items()})
    trained, _ = train(model, (x, y), train_cfg, progress)
    meta = {**trained.meta, "pipeline": pipeline.to_dict(), "pipeline_tag": pipeline.tag,
            "train": {k: getattr(train_cfg, k) for k in TrainConfig.__dataclass_fields__},
            "warm_start": init is not None}
    return replace(trained, meta=meta)


def clean_accuracy(model, samples, pipeline=None):
    x, y = preprocess_samples(samples, pipeline or Pipeline())
    return accuracy(model, x, y)


def defended_filename(model_cfg, pipeline):
    return f"{MODEL_TAGS[model_cfg.kind]}__{pipeline.tag}.ckpt"


def index_defended(directory):
    """``{(model_tag, pipeline_tag): path}`` from the checkpoint headers in ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"defended-model directory not found: {directory}")
    index = {}
    for path in sorted(directory.glob("*.ckpt")):
        try:
            header = read_checkpoint_header(path)
        except (ParseError, OSError) as exc:
            log.warning("skipping %s: %s", path, exc)
            continue
        tag = header.get("meta", {}).get("pipeline_tag")
        kind = header["config"]["kind"]
        if tag is not None:
            index[(MODEL_TAGS.get(kind, kind), tag)] = path
    return index


def load_defended(directory, base_tags):
    return {key: load_checkpoint(path) for key, path in index_defended(directory).items() if key[0] in base_tags}


def model_tag(model):
    return MODEL_TAGS.get(model.config.kind, model.config.kind)


def cache_key(*parts):
    """Stable short hash of JSON-able parts; used to reuse deterministic training runs."""
    blob = json.dumps(parts, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def cached_train(path, key, fit):
    """Load ``path`` if it was produced under ``key``; otherwise call ``fit()`` and save the result."""
    path = Path(path)
    if path.exists():
        try:
            if read_checkpoint_header(path).get("meta", {}).get("cache_key") == key:
                return load_checkpoint(path)
        except (ParseError, OSError):
            pass
    start = time.process_time()
    model = fit()
    model = replace(model, meta={**model.meta, "cache_key": key,
                                 "train_cpu_seconds": time.process_time() - start})
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, model)
    return model
