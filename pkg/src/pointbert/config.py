"""Run configuration: JSON presets, dotted overrides, validation, seeding.

The toy preset doubles as the schema. Every key a config may carry
appears there, and leaf types are checked against it.
"""

import copy
import json
import re
import zlib
from dataclasses import replace

import numpy as np

from .datasets import FAMILIES, CorpusConfig
from .downstream import FinetuneConfig, SegConfig, SegLevels
from .dvae import DvaeConfig, DvaeSchedules, DvaeTrainConfig
from .errors import ConfigError
from .neuralops import TransformerConfig
from .pretrain import PretrainConfig

TOY = {
    "preset": "toy",
    "seed": 0,
    "paths": {"corpus": "", "dvae": "", "pretrain": "", "classifier": ""},
    "corpus": {
        "families": list(FAMILIES),
        "instances_per_class": 40,
        "split_counts": [30, 5, 5],
        "point_count": 256,
        "noise_sigma": 0.005,
    },
    "dvae": {
        "vocab_size": 128,
        "code_dim": 64,
        "embed_dim": 64,
        "group_size": 16,
        "num_groups": 16,
        "k": 4,
        "stem_dim": 32,
        "graph_dims": [32, 64, 64, 128],
        "feat_dim": 128,
        "coarse_points": 8,
        "coarse_hidden": 128,
        "fold_hidden": 128,
        "graph_space": "centers",
        "decoder_offsets": True,
        "codebook_std": 0.1,
    },
    "dvae_train": {
        "steps": 300,
        "batch_size": 8,
        "train_clouds": 8,
        "lr": 1e-3,
        "weight_decay": 5e-4,
        "warmup_steps": 20,
        "kl_source": "probs",
        "kl_max": 0.1,
        "kl_zero_steps": 50,
        "kl_ramp_steps": 150,
        "tau_start": 1.0,
        "tau_end": 0.0625,
        "tau_steps": 200,
    },
    "model": {
        "depth": 4,
        "dim": 48,
        "heads": 4,
        "ffn_dim": 192,
        "drop_path_rate": 0.1,
        "dropout": 0.0,
        "activation": "relu",
    },
    "pretrain": {
        "steps": 200,
        "batch_size": 8,
        "lr": 1e-3,
        "weight_decay": 0.05,
        "warmup_steps": 10,
        "mask_strategy": "block",
        "mask_ratio": [0.25, 0.45],
        "contrastive_weight": 1.0,
        "bank_size": 256,
        "temperature": 0.07,
        "momentum": 0.999,
        "proj_hidden": 128,
        "proj_dim": 128,
        "mix": True,
    },
    "finetune": {
        "epochs": 30,
        "batch_size": 16,
        "lr": 1e-3,
        "weight_decay": 0.05,
        "warmup_epochs": 2,
        "head_hidden": 256,
        "head_dropout": 0.5,
        "augment": False,
    },
    "fewshot": {"way": 5, "shot": 10, "episodes": 10, "epochs": 20, "mode": "full"},
    "segment": {
        "families": ["cylinder"],
        "num_points": 256,
        "num_groups": 32,
        "group_size": 16,
        "layers": [2, 3, 4],
        "resolutions": [128, 64],
        "edge_hidden": 64,
        "k": 4,
        "head_hidden": 64,
        "steps": 150,
        "batch_size": 8,
        "lr": 2e-3,
        "weight_decay": 0.05,
        "warmup_steps": 10,
    },
    "reconstruct": {"split": "test", "index": 0, "mask_ratio": 0.45, "mask_strategy": "block"},
}


def _paper():
    cfg = copy.deepcopy(TOY)
    cfg["preset"] = "paper"
    cfg["corpus"].update(point_count=1024)
    cfg["dvae"].update(
        vocab_size=8192, code_dim=256, embed_dim=256, group_size=32, num_groups=64, stem_dim=128,
        graph_dims=[256, 512, 512, 1024], feat_dim=256, coarse_points=16, coarse_hidden=1024,
        fold_hidden=1024, decoder_offsets=False, codebook_std=1.0,
    )
    cfg["dvae_train"].update(
        steps=150_000, batch_size=64, lr=5e-4, weight_decay=5e-4, warmup_steps=60_000,
        kl_zero_steps=10_000, kl_ramp_steps=100_000, tau_steps=100_000, train_clouds=0,
    )
    cfg["model"].update(depth=12, dim=384, heads=6, ffn_dim=1536, drop_path_rate=0.1)
    cfg["pretrain"].update(
        steps=300 * 400, batch_size=128, lr=5e-4, weight_decay=0.05, warmup_steps=3 * 400,
        bank_size=16384, proj_hidden=384, proj_dim=128,
    )
    cfg["finetune"].update(epochs=300, batch_size=32, lr=5e-4, warmup_epochs=10, augment=True, head_hidden=256)
    cfg["segment"].update(
        num_points=2048, num_groups=128, group_size=32, layers=[4, 8, 12], resolutions=[512, 256],
        edge_hidden=512, head_hidden=256, steps=100_000, batch_size=16,
    )
    return cfg


PAPER = _paper()
PRESETS = {"toy": TOY, "paper": PAPER}

_CHOICES = {
    "dvae.graph_space": ("centers", "features"),
    "dvae_train.kl_source": ("probs", "sample"),
    "model.activation": ("relu", "gelu"),
    "pretrain.mask_strategy": ("block", "random"),
    "fewshot.mode": ("full", "linear"),
    "reconstruct.mask_strategy": ("block", "random"),
    "reconstruct.split": ("train", "val", "test"),
}


def _type_ok(expected, value):
    if isinstance(expected, bool):
        return isinstance(value, bool)
    if isinstance(expected, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(expected, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(expected, str):
        return isinstance(value, str)
    if isinstance(expected, list):
        if not isinstance(value, list):
            return False
        if expected:
            return all(_type_ok(expected[0], v) for v in value)
        return True
    return False


def _merge(base, patch, prefix=""):
    for key, value in patch.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown key {path!r}", path)
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path!r} must be an object", path)
            _merge(base[key], value, path + ".")
        else:
            if not _type_ok(base[key], value):
                raise ConfigError(f"{path!r} expects {type(base[key]).__name__}, got {value!r}", path)
            base[key] = float(value) if isinstance(base[key], float) else value


def _parse_value(text):
    try:
        return json.loads(text)
    except ValueError:
        return text


def apply_override(tree, item):
    """Apply one ``a.b.c=value`` override (value parsed as JSON, else a string)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value", item)
    key, raw = item.split("=", 1)
    key = key.strip()
    patch = value = _parse_value(raw)
    for part in reversed(key.split(".")):
        patch = {part: patch}
    del value
    _merge(tree, patch)


def _check(cond, key, message):
    if not cond:
        raise ConfigError(f"{key}: {message}", key)


def validate(cfg):
    """Range and consistency checks beyond types; raises ConfigError."""
    for key, choices in _CHOICES.items():
        section, name = key.split(".")
        _check(cfg[section][name] in choices, key, f"must be one of {choices}")
    c = cfg["corpus"]
    _check(c["families"] and set(c["families"]) <= set(FAMILIES), "corpus.families", f"subset of {FAMILIES}")
    _check(len(c["split_counts"]) == 3, "corpus.split_counts", "needs three counts")
    _check(sum(c["split_counts"]) == c["instances_per_class"], "corpus.split_counts", "must add up to instances_per_class")
    _check(c["point_count"] >= 8, "corpus.point_count", "at least 8")
    _check(c["noise_sigma"] >= 0, "corpus.noise_sigma", "non-negative")
    d = cfg["dvae"]
    for key in ("vocab_size", "code_dim", "embed_dim", "group_size", "num_groups", "k", "stem_dim", "feat_dim",
                "coarse_points", "coarse_hidden", "fold_hidden"):
        _check(d[key] >= 1, f"dvae.{key}", "must be positive")
    _check(d["k"] <= d["num_groups"], "dvae.k", "cannot exceed num_groups")
    _check(d["num_groups"] * 1 <= c["point_count"], "dvae.num_groups", "more groups than points")
    _check(d["group_size"] <= c["point_count"], "dvae.group_size", "larger than the cloud")
    _check(d["codebook_std"] > 0, "dvae.codebook_std", "must be positive")
    t = cfg["dvae_train"]
    for key in ("steps", "kl_zero_steps", "kl_ramp_steps", "tau_steps", "warmup_steps", "train_clouds"):
        _check(t[key] >= 0, f"dvae_train.{key}", "must be non-negative")
    _check(t["batch_size"] >= 1, "dvae_train.batch_size", "must be positive")
    _check(t["lr"] >= 0, "dvae_train.lr", "must be non-negative")
    _check(t["tau_end"] > 0 and t["tau_start"] >= t["tau_end"], "dvae_train.tau_end", "0 < tau_end <= tau_start")
    m = cfg["model"]
    _check(m["dim"] >= 1 and m["depth"] >= 1 and m["heads"] >= 1, "model.dim", "dims must be positive")
    _check(m["dim"] % m["heads"] == 0, "model.heads", "must divide model.dim")
    _check(0 <= m["drop_path_rate"] < 1, "model.drop_path_rate", "in [0, 1)")
    _check(0 <= m["dropout"] < 1, "model.dropout", "in [0, 1)")
    p = cfg["pretrain"]
    lo_hi = p["mask_ratio"]
    _check(len(lo_hi) == 2 and 0 < lo_hi[0] <= lo_hi[1] < 1, "pretrain.mask_ratio", "[lo, hi] inside (0, 1)")
    _check(int(lo_hi[0] * d["num_groups"]) >= 1, "pretrain.mask_ratio", "masks no patch at this group count")
    _check(p["steps"] >= 0, "pretrain.steps", "must be non-negative")
    _check(p["batch_size"] >= 2 or not p["mix"], "pretrain.batch_size", "mixing needs two samples")
    _check(1 <= p["batch_size"] <= p["bank_size"], "pretrain.bank_size", "must hold at least one batch of keys")
    _check(p["temperature"] > 0, "pretrain.temperature", "must be positive")
    _check(0 <= p["momentum"] <= 1, "pretrain.momentum", "in [0, 1]")
    _check(p["contrastive_weight"] >= 0, "pretrain.contrastive_weight", "non-negative")
    f = cfg["finetune"]
    _check(f["epochs"] >= 0 and f["batch_size"] >= 1, "finetune.epochs", "non-negative epochs, positive batch")
    _check(0 <= f["head_dropout"] < 1, "finetune.head_dropout", "in [0, 1)")
    fs = cfg["fewshot"]
    _check(fs["way"] >= 2 and fs["shot"] >= 1 and fs["episodes"] >= 1, "fewshot.way", "way >= 2, shot >= 1, episodes >= 1")
    s = cfg["segment"]
    _check(set(s["families"]) <= set(FAMILIES) and s["families"], "segment.families", f"subset of {FAMILIES}")
    try:
        SegLevels(tuple(s["layers"]), tuple(s["resolutions"])).validate(m["depth"], s["num_groups"], s["num_points"])
    except ValueError as exc:
        raise ConfigError(f"segment.layers: {exc}", "segment.layers") from None
    r = cfg["reconstruct"]
    _check(0 < r["mask_ratio"] < 1, "reconstruct.mask_ratio", "in (0, 1)")
    _check(r["index"] >= 0, "reconstruct.index", "non-negative")
    return cfg


def _line_of(text, key):
    leaf = key.split(".")[-1]
    for i, line in enumerate(text.splitlines(), 1):
        if re.search(r'"%s"\s*:' % re.escape(leaf), line):
            return i
    return None


def parse_config(path=None, overrides=(), preset=None):
    """Merge a preset, an optional JSON file and ``key=value`` overrides.

    The file may name its base preset with ``"preset"``; ``preset`` wins
    if given. Errors carry the dotted key and, for file problems, a line.
    """
    data, text = {}, ""
    if path:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}", "config") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}", "config") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object", "config")
    name = preset or data.get("preset", "toy")
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}", "preset")
    cfg = copy.deepcopy(PRESETS[name])
    try:
        _merge(cfg, data)
    except ConfigError as exc:
        line = _line_of(text, exc.key) if exc.key else None
        where = f"{path}:{line}: " if line else (f"{path}: " if path else "")
        raise ConfigError(where + str(exc), exc.key) from None
    for item in overrides:
        apply_override(cfg, item)
    return validate(cfg)


def substream(seed, name):
    """Independent generator for a named purpose under the root seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def streams_for(seed, prefix, names):
    return {n: substream(seed, f"{prefix}/{n}") for n in names}


# -- typed views ---------------------------------------------------------------


def corpus_config(cfg):
    c = cfg["corpus"]
    return CorpusConfig(tuple(c["families"]), c["instances_per_class"], tuple(c["split_counts"]),
                        c["point_count"], c["noise_sigma"])


def dvae_config(cfg):
    d = dict(cfg["dvae"])
    d["graph_dims"] = tuple(d["graph_dims"])
    return DvaeConfig(**d)


def dvae_train_config(cfg):
    t = cfg["dvae_train"]
    sched = DvaeSchedules(t["kl_max"], t["kl_zero_steps"], t["kl_ramp_steps"], t["tau_start"], t["tau_end"], t["tau_steps"])
    return DvaeTrainConfig(t["steps"], t["batch_size"], t["lr"], t["weight_decay"], t["warmup_steps"], sched,
                           t["kl_source"])


def transformer_config(cfg):
    m = cfg["model"]
    return TransformerConfig(m["depth"], m["dim"], m["heads"], m["ffn_dim"], m["drop_path_rate"], m["dropout"],
                             m["activation"])


def pretrain_config(cfg):
    p = dict(cfg["pretrain"])
    p["mask_ratio"] = tuple(p["mask_ratio"])
    return PretrainConfig(**p, transformer=transformer_config(cfg))


def finetune_config(cfg, epochs=None):
    f = dict(cfg["finetune"])
    if epochs is not None:
        f["epochs"] = epochs
    d = cfg["dvae"]
    return FinetuneConfig(num_groups=d["num_groups"], group_size=d["group_size"], transformer=transformer_config(cfg), **f)


def seg_config(cfg):
    s = dict(cfg["segment"])
    s.pop("families")
    levels = SegLevels(tuple(s.pop("layers")), tuple(s.pop("resolutions")))
    return SegConfig(levels=levels, transformer=transformer_config(cfg), **s)


def with_transformer(cfg_obj, transformer):
    return replace(cfg_obj, transformer=transformer)
