"""``pointbert`` command line: corpus, tokenizer, pretraining, downstream, diagnostics.

Every command writes into its run directory (``--out``): the effective
config, a version stamp with the seed, CSV logs and a JSON summary, plus
any checkpoints or clouds it produces. Exit codes: 0 success, 2 bad
config, 3 missing or unreadable input (corpus, checkpoint), 4 numerics.
"""

import argparse
import csv
import hashlib
import json
import os
import sys
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import __version__
from . import config as C
from .datasets import PART_TAXONOMY, SPLITS, build_corpus, generate_corpus, load_corpus, stack_split
from .downstream import (
    Classifier,
    accuracy,
    center_clouds,
    fewshot_eval,
    finetune_classification,
    miou,
    predict,
    segment_predict,
    train_segmenter,
)
from .dvae import DiscreteVAE, evaluate_dvae, train_dvae
from .errors import CheckpointError, ConfigError, NumericsError, SpecError
from .geometry import PointCloud, chamfer_l1, group_batch, sample_fps, to_csv, write_cloud
from .numcore import checkpoint, no_grad
from .pretrain import (
    PretrainModel,
    corrupt_embeddings,
    evaluate_mpm,
    init_pretrain,
    make_block_mask,
    make_rand_mask,
    train_pretrain,
)

COMMANDS = ("build-corpus", "train-dvae", "pretrain", "finetune-cls", "finetune-seg", "fewshot", "reconstruct",
            "gradcheck", "eval")
EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERICS = 2, 3, 4
# The config key that ``--steps`` overrides, per command.
STEP_KEYS = {
    "train-dvae": "dvae_train.steps",
    "pretrain": "pretrain.steps",
    "finetune-cls": "finetune.epochs",
    "finetune-seg": "segment.steps",
    "fewshot": "fewshot.epochs",
}


class InputMissing(Exception):
    pass


# -- run directory ------------------------------------------------------------------


def _digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def source_digest():
    """Git-style content id over the package sources (sorted by path)."""
    h = hashlib.sha1()
    root = Path(__file__).resolve().parent
    for path in sorted(root.rglob("*.py")):
        data = path.read_bytes()
        h.update(f"{path.relative_to(root).as_posix()} {len(data)}\0".encode())
        h.update(data)
    return h.hexdigest()


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, rows, fields=None):
    """Rows of dicts to CSV; floats use ``repr`` so values round-trip exactly."""
    fields = list(fields or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([_cell(row.get(f, "")) for f in fields])


class Run:
    def __init__(self, command, cfg, out):
        self.command = command
        self.cfg = cfg
        self.seed = cfg["seed"]
        self.dir = Path(out)
        self.dir.mkdir(parents=True, exist_ok=True)
        _write_json(self.dir / "config.json", cfg)
        _write_json(self.dir / "run.json", {
            "command": command,
            "seed": self.seed,
            "version": f"pointbert {__version__}",
            "source": source_digest(),
            "config_sha256": _digest(cfg),
        })

    def path(self, name):
        return self.dir / name

    def streams(self, prefix, names):
        return C.streams_for(self.seed, prefix, names)

    def summary(self, obj):
        _write_json(self.dir / "summary.json", obj)


# -- inputs ---------------------------------------------------------------------------


def _require(path, what):
    if not path:
        raise InputMissing(f"{what} is required (set paths.{what})")
    if not os.path.exists(path):
        raise InputMissing(f"{what} not found: {path}")
    return path


def corpus_for(run):
    """The corpus named by ``paths.corpus``, or a fresh one from the config and seed."""
    path = run.cfg["paths"]["corpus"]
    if path:
        _require(os.path.join(path, "manifest.json") if os.path.isdir(path) else path, "corpus")
        try:
            data, _ = load_corpus(path)
        except (OSError, ValueError) as exc:
            raise InputMissing(f"cannot read corpus {path}: {exc}") from None
        return data
    corpus = generate_corpus(C.corpus_config(run.cfg), run.seed)
    return {s: [(cloud, cls) for cloud, cls, _ in items] for s, items in corpus.items()}


def class_interleaved(classes, count):
    """Indices cycling through classes in order, ``count`` of them (0 means all)."""
    classes = np.asarray(classes)
    pools = [list(np.flatnonzero(classes == c)) for c in np.unique(classes)]
    order = []
    while any(pools):
        for pool in pools:
            if pool:
                order.append(pool.pop(0))
    return np.array(order[:count] if count else order, dtype=np.int64)


def _rng_meta(streams):
    return {k: g.bit_generator.state for k, g in streams.items()}


def load_dvae(path):
    arrays, meta = checkpoint.load(_require(path, "dvae"))
    if meta.get("kind") != "dvae":
        raise CheckpointError(f"{path} is not a dVAE checkpoint")
    model = DiscreteVAE(C.dvae_config(meta["config"]), np.random.default_rng(0))
    model.load_state_dict(checkpoint.extract("model", arrays))
    model.eval()
    return model


def load_backbone_state(path):
    """Backbone weights from a pretraining or classifier checkpoint."""
    arrays, meta = checkpoint.load(_require(path, "pretrain"))
    prefix = {"pretrain": "model.encoder.backbone", "classifier": "model.backbone"}.get(meta.get("kind"))
    if prefix is None:
        raise CheckpointError(f"{path} holds no backbone")
    return checkpoint.extract(prefix, arrays), meta


# -- commands -----------------------------------------------------------------------------


def cmd_build_corpus(run):
    manifest = build_corpus(C.corpus_config(run.cfg), run.seed, run.path("corpus"))
    counts = {s: len(manifest["splits"][s]) for s in SPLITS}
    run.summary({"corpus": str(run.path("corpus")), "hash": manifest["hash"], "counts": counts})
    return 0


def cmd_train_dvae(run):
    cfg = run.cfg
    data = corpus_for(run)
    pts, _, cls = stack_split(data["train"])
    idx = class_interleaved(cls, cfg["dvae_train"]["train_clouds"])
    streams = run.streams("dvae", ("init", "batch", "gumbel"))
    try:
        model, log = train_dvae(pts[idx], C.dvae_config(cfg), C.dvae_train_config(cfg), streams)
    except NumericsError as exc:
        if getattr(exc, "state", None) is not None:
            checkpoint.save(run.path("dvae_last_good.ckpt"), checkpoint.prefixed("model", exc.state),
                            {"kind": "dvae", "config": cfg, "failed": str(exc)})
        raise
    write_csv(run.path("dvae_log.csv"), log)
    val_pts = stack_split(data["val"])[0]
    parts, tokens = evaluate_dvae(model, val_pts)
    arrays = checkpoint.prefixed("model", model.state_dict())
    checkpoint.save(run.path("dvae.ckpt"), arrays, {"kind": "dvae", "config": cfg, "rng": _rng_meta(streams)})
    first, last = (log[0], log[-1]) if log else ({}, {})
    run.summary({
        "train_clouds": len(idx),
        "steps": len(log),
        "initial_chamfer_fine": first.get("chamfer_fine"),
        "final_chamfer_fine": last.get("chamfer_fine"),
        "final_tokens_used": last.get("tokens_used"),
        "val": parts,
        "val_tokens_used": int(len(np.unique(tokens))),
    })
    return 0


def save_pretrain(path, state, cfg, streams):
    arrays = OrderedDict()
    arrays.update(checkpoint.prefixed("model", state.model.state_dict()))
    arrays.update(checkpoint.prefixed("momentum", state.momentum.module.state_dict()))
    arrays["bank.queue"] = state.bank.queue
    arrays["bank.cursor"] = np.array(state.bank.cursor)
    arrays.update(state.optimizer.state_arrays())
    meta = {"kind": "pretrain", "config": cfg, "step": state.step, "optimizer_step": state.optimizer.step_count,
            "rng": _rng_meta(streams)}
    checkpoint.save(path, arrays, meta)


def cmd_pretrain(run):
    cfg = run.cfg
    tokenizer = load_dvae(cfg["paths"]["dvae"])
    data = corpus_for(run)
    train_pts = stack_split(data["train"])[0]
    pcfg = C.pretrain_config(cfg)
    streams = run.streams("pretrain", ("init", "batch", "mask", "mix", "dropout"))
    state = init_pretrain(pcfg, tokenizer.cfg.vocab_size, streams["init"])
    state, log = train_pretrain(train_pts, tokenizer, pcfg, streams, state=state)
    write_csv(run.path("pretrain_log.csv"), log, ("step", "mpm_loss", "moco_loss", "masked_acc", "lr"))
    save_pretrain(run.path("pretrain.ckpt"), state, cfg, streams)
    val_pts = stack_split(data["val"])[0]
    held_out = evaluate_mpm(state.model, tokenizer, val_pts, pcfg, C.substream(run.seed, "pretrain/eval"))
    run.summary({
        "steps": state.step,
        "final": log[-1] if log else None,
        "val_masked_acc": held_out,
        "chance": 1.0 / tokenizer.cfg.vocab_size,
    })
    return 0


def _init_state(cfg):
    path = cfg["paths"]["pretrain"]
    return load_backbone_state(path)[0] if path else None


def cmd_finetune_cls(run):
    cfg = run.cfg
    fcfg = C.finetune_config(cfg)
    data = corpus_for(run)
    tr, va, te = (stack_split(data[s]) for s in SPLITS)
    streams = run.streams("finetune", ("init", "batch", "dropout", "augment"))
    n_cls = len(cfg["corpus"]["families"])
    model, log = finetune_classification((tr[0], tr[2]), (va[0], va[2]), fcfg, streams, n_cls, _init_state(cfg))
    write_csv(run.path("finetune_log.csv"), log)
    checkpoint.save(run.path("classifier.ckpt"), checkpoint.prefixed("model", model.state_dict()),
                    {"kind": "classifier", "config": cfg, "num_classes": n_cls})
    run.summary({
        "init": "pretrained" if cfg["paths"]["pretrain"] else "scratch",
        "epochs": fcfg.epochs,
        "val_acc": log[-1]["val_acc"] if log else None,
        "test_acc": accuracy(predict(model, te[0]), te[2]),
    })
    return 0


def _seg_subset(items, families, all_families, n_points):
    ids = [all_families.index(f) for f in families]
    chosen = [(c, k) for c, k in items if k in ids]
    pts = np.stack([c.points for c, _ in chosen])
    labels = np.stack([c.labels for c, _ in chosen])
    classes = np.array([k for _, k in chosen])
    if pts.shape[1] != n_points:
        keep = np.stack([sample_fps(p, n_points) for p in pts])
        pts = np.take_along_axis(pts, keep[..., None], axis=1)
        labels = np.take_along_axis(labels, keep, axis=1)
    return pts, labels, classes


def cmd_finetune_seg(run):
    cfg = run.cfg
    scfg = C.seg_config(cfg)
    families = cfg["segment"]["families"]
    all_families = cfg["corpus"]["families"]
    missing = [f for f in families if f not in all_families]
    if missing:
        raise ConfigError(f"segment.families {missing} are not in corpus.families", "segment.families")
    if cfg["corpus"]["point_count"] < scfg.num_points:
        raise ConfigError("segment.num_points exceeds corpus.point_count", "segment.num_points")
    data = corpus_for(run)
    parts = sorted({p for f in families for p in PART_TAXONOMY[f]})
    local = {p: i for i, p in enumerate(parts)}
    to_local = np.vectorize(local.__getitem__)
    tr = _seg_subset(data["train"], families, all_families, scfg.num_points)
    te = _seg_subset(data["test"], families, all_families, scfg.num_points)
    streams = run.streams("segment", ("init", "batch", "dropout"))
    model = None
    init = _init_state(cfg)
    if init is not None:
        from .downstream import Segmenter

        model = Segmenter(scfg, len(parts), streams["init"])
        model.backbone.load_state_dict(init)
    model, log = train_segmenter(tr[0], to_local(tr[1]), len(parts), scfg, streams, model=model)
    write_csv(run.path("segment_log.csv"), log)
    checkpoint.save(run.path("segmenter.ckpt"), checkpoint.prefixed("model", model.state_dict()),
                    {"kind": "segmenter", "config": cfg, "parts": parts})
    taxonomy = {all_families.index(f): [local[p] for p in PART_TAXONOMY[f]] for f in families}
    pred = segment_predict(model, te[0])
    m_c, m_i, per_cat = miou(pred, to_local(te[1]), te[2], taxonomy)
    run.summary({
        "families": families,
        "final_train_point_acc": log[-1]["point_acc"] if log else None,
        "test_point_acc": float((pred == to_local(te[1])).mean()),
        "test_miou_category": m_c,
        "test_miou_instance": m_i,
        "per_category": {all_families[k]: v for k, v in sorted(per_cat.items())},
    })
    return 0


def cmd_fewshot(run):
    cfg = run.cfg
    fs = cfg["fewshot"]
    fcfg = C.finetune_config(cfg, fs["epochs"])
    data = corpus_for(run)
    pts = np.concatenate([stack_split(data[s])[0] for s in SPLITS])
    labels = np.concatenate([stack_split(data[s])[2] for s in SPLITS])
    mean, std, accs = fewshot_eval(pts, labels, fs["way"], fs["shot"], fcfg, C.substream(run.seed, "fewshot"),
                                   init_state=_init_state(cfg), episodes=fs["episodes"], mode=fs["mode"])
    write_csv(run.path("fewshot_log.csv"), [{"episode": i, "accuracy": a} for i, a in enumerate(accs)])
    run.summary({"way": fs["way"], "shot": fs["shot"], "episodes": fs["episodes"], "mode": fs["mode"],
                 "mean": mean, "std": std})
    return 0


def cmd_eval(run):
    path = _require(run.cfg["paths"]["classifier"], "classifier")
    arrays, meta = checkpoint.load(path)
    if meta.get("kind") != "classifier":
        raise CheckpointError(f"{path} is not a classifier checkpoint")
    saved = meta["config"]
    model = Classifier(C.finetune_config(saved), meta["num_classes"], np.random.default_rng(0))
    model.load_state_dict(checkpoint.extract("model", arrays))
    data = corpus_for(run)
    rows, out = [], {}
    for split in SPLITS:
        pts, _, cls = stack_split(data[split])
        pred = np.argmax(predict(model, pts), axis=-1)
        out[split] = float((pred == cls).mean())
        rows.extend({"split": split, "index": i, "label": int(c), "prediction": int(p)}
                    for i, (c, p) in enumerate(zip(cls, pred)))
    write_csv(run.path("predictions.csv"), rows)
    run.summary({"accuracy": out})
    return 0


def cmd_reconstruct(run):
    cfg = run.cfg
    rc = cfg["reconstruct"]
    tokenizer = load_dvae(cfg["paths"]["dvae"])
    arrays, meta = checkpoint.load(_require(cfg["paths"]["pretrain"], "pretrain"))
    if meta.get("kind") != "pretrain":
        raise CheckpointError("paths.pretrain is not a pretraining checkpoint")
    pcfg = C.pretrain_config(C.validate(meta["config"]))
    model = PretrainModel(pcfg.transformer, tokenizer.cfg.vocab_size, np.random.default_rng(0),
                          pcfg.proj_hidden, pcfg.proj_dim)
    model.load_state_dict(checkpoint.extract("model", arrays))
    model.eval()
    items = corpus_for(run)[rc["split"]]
    if rc["index"] >= len(items):
        raise ConfigError(f"reconstruct.index {rc['index']} out of range ({len(items)} clouds)", "reconstruct.index")
    cloud = center_clouds(items[rc["index"]][0].points)
    d = tokenizer.cfg
    centers, patches = group_batch(cloud[None], d.num_groups, d.group_size)
    rng = C.substream(run.seed, "reconstruct/mask")
    if rc["mask_strategy"] == "block":
        spec = make_block_mask(centers[0], rc["mask_ratio"], rng=rng)
    else:
        spec = make_rand_mask(d.num_groups, rc["mask_ratio"], rng)
    mask = spec.as_bool()[None]
    truth = tokenizer.hard_tokens(patches, centers)
    with no_grad():
        backbone = model.encoder.backbone
        h = backbone.encode(corrupt_embeddings(backbone.embed(patches, centers), mask))
        predicted = np.argmax(model.token_logits(h).data, axis=-1)
        tokens = np.where(mask, predicted, truth)
        _, fine = tokenizer.decode(tokenizer.codebook[tokens], centers)
    visible = (patches + centers[:, :, None, :])[0][~mask[0]].reshape(-1, 3)
    decoded = fine.data[0][mask[0]].reshape(-1, 3)
    merged = np.concatenate([visible, decoded])
    labels = np.concatenate([np.zeros(len(visible), np.int64), np.ones(len(decoded), np.int64)])
    out = PointCloud(merged, labels)
    write_cloud(run.path("reconstruction.pcld"), out)
    with open(run.path("reconstruction.csv"), "w") as fh:
        fh.write(to_csv(out))
    masked_input = PointCloud(visible)
    write_cloud(run.path("masked_input.pcld"), masked_input)
    run.summary({
        "points": int(len(merged)),
        "visible_patches": int((~mask[0]).sum()),
        "masked_patches": int(mask[0].sum()),
        "masked_indices": [int(i) for i in spec.indices],
        "masked_token_acc": float((predicted[mask] == truth[mask]).mean()),
        "chamfer_to_input": chamfer_l1(merged, cloud),
    })
    return 0


def cmd_gradcheck(run):
    from .gradsuite import SEEDS, TOLERANCE, run_suite

    report = run_suite(SEEDS)
    rows = [{"op": k, "max_rel_err": v, "ok": v < TOLERANCE} for k, v in report.items()]
    write_csv(run.path("gradcheck.csv"), rows)
    failed = [r["op"] for r in rows if not r["ok"]]
    for r in rows:
        print(f"{r['op']:<20} {r['max_rel_err']:.3e} {'ok' if r['ok'] else 'FAIL'}")
    run.summary({"seeds": list(SEEDS), "tolerance": TOLERANCE, "max_rel_err": report, "failed": failed})
    if failed:
        raise NumericsError(f"gradient check failed for {', '.join(failed)}")
    return 0


HANDLERS = {
    "build-corpus": cmd_build_corpus,
    "train-dvae": cmd_train_dvae,
    "pretrain": cmd_pretrain,
    "finetune-cls": cmd_finetune_cls,
    "finetune-seg": cmd_finetune_seg,
    "fewshot": cmd_fewshot,
    "reconstruct": cmd_reconstruct,
    "gradcheck": cmd_gradcheck,
    "eval": cmd_eval,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config (defaults to the toy preset)")
    common.add_argument("--preset", choices=sorted(C.PRESETS), help="base preset, overriding the file's")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, value parsed as JSON (repeatable)")
    common.add_argument("--seed", type=int, help="root seed (same as --set seed=N)")
    common.add_argument("--out", metavar="DIR", help="run directory (default runs/<command>)")
    common.add_argument("--steps", type=int, help="step/epoch budget for the command's training loop")
    parser = argparse.ArgumentParser(prog="pointbert", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pointbert {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HANDLERS[name].__name__.replace("cmd_", "").replace("_", " "))
    return parser


def run(command, config_path=None, overrides=(), seed=None, out=None, steps=None, preset=None):
    """Execute one command; returns the process exit code."""
    ns = argparse.Namespace(command=command, config=config_path, overrides=list(overrides), seed=seed, out=out,
                            steps=steps, preset=preset)
    return _execute(ns)


def _execute(args):
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.steps is not None and args.steps < 0:
            raise ConfigError("--steps must be non-negative", "steps")
        if args.steps is not None and args.command in STEP_KEYS:
            overrides.append(f"{STEP_KEYS[args.command]}={args.steps}")
        cfg = C.parse_config(args.config, overrides, preset=args.preset)
        out = args.out or os.path.join("runs", args.command)
        return HANDLERS[args.command](Run(args.command, cfg, out))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputMissing, CheckpointError, SpecError, FileNotFoundError) as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericsError, FloatingPointError) as exc:
        print(f"numerics failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICS


def main(argv=None):
    args = build_parser().parse_args(argv)
    return _execute(args)


if __name__ == "__main__":
    sys.exit(main())
