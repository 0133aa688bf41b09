"""Command-line entry point: ``partgait {synth,preprocess,summarize,train,eval,embed}``.

Exit codes: 0 success, 2 data or config error, 3 missing prerequisite
checkpoint, 4 protocol error, 5 checkpoint error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import protocols
from .errors import (CheckpointError, ConfigError, DegenerateBatch, EmptyGalleryView, EmptySilhouette,
                     InvalidBinCount, ManifestError, MissingFrames, ShapeMismatch)
from .evaluation import (embed_sequences, evaluate_cross_view, occlusion_experiment, write_attention_csv,
                         write_embeddings_csv)
from .model import ModelConfig, check_compatible, init_params, load_checkpoint, save_checkpoint, with_classifier
from .silhouette_io import (OcclusionSpec, enumerate_occlusion_specs, format_view, load_sequence, read_manifest,
                            write_manifest)
from .synthetic import TOY_VIEWS, write_toy_dataset
from .training import (STAGE1_LOG_FIELDS, STAGE2_LOG_FIELDS, CsvLog, TrainConfig, class_indices,
                       extract_partial_features, train_stage1, train_stage2)

log = logging.getLogger("partgait")

EXIT_OK, EXIT_DATA, EXIT_PREREQ, EXIT_PROTOCOL, EXIT_CHECKPOINT = 0, 2, 3, 4, 5


class CliExit(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# run configuration (INI)

CONFIG_KEYS = {
    "data": {"manifest", "out_dir"},
    "model": {"preset", "channels", "fc_width", "hidden", "bins", "use_bgru", "use_attention"},
    "train": set(TrainConfig.field_names()),
    "protocol": {"name", "exclude_identical_views", "views"},
}
PATH_KEYS = {("data", "manifest"), ("data", "out_dir")}


def read_run_config(path):
    """Parse an INI run config into ``{section: {key: str}}``; unknown keys raise ConfigError."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    out = {}
    for section in parser.sections():
        if section not in CONFIG_KEYS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, value in parser.items(section):
            if key not in CONFIG_KEYS[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            if (section, key) in PATH_KEYS and not Path(value).is_absolute():
                value = str(path.parent / value)
            out.setdefault(section, {})[key] = value
    return out


def _bool(text, key):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def model_config_from(raw, args):
    m = dict(raw.get("model", {}))
    preset = getattr(args, "preset", None) or m.pop("preset", "toy")
    m.pop("preset", None)
    if preset not in ("toy", "full"):
        raise ConfigError(f"preset must be toy or full, got {preset!r}")
    kw = {}
    try:
        if "channels" in m:
            kw["channels"] = tuple(int(c) for c in m["channels"].split(","))
        for key in ("fc_width", "hidden", "bins"):
            if key in m:
                kw[key] = int(m[key])
    except ValueError as exc:
        raise ConfigError(f"[model]: {exc}") from None
    for key in ("use_bgru", "use_attention"):
        if key in m:
            kw[key] = _bool(m[key], key)
    if getattr(args, "bins", None) is not None:
        kw["bins"] = args.bins
    if getattr(args, "global_rep", False):
        kw["bins"] = 1
    if getattr(args, "no_bgru", False):
        kw["use_bgru"] = False
    if getattr(args, "no_attention", False):
        kw["use_attention"] = False
    try:
        return ModelConfig.toy(**kw) if preset == "toy" else ModelConfig(**kw)
    except (InvalidBinCount, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def train_config_from(raw, args):
    t = raw.get("train", {})
    base = TrainConfig.toy() if (getattr(args, "preset", None) or raw.get("model", {}).get("preset", "toy")) == "toy" \
        else TrainConfig()
    kw = {}
    for f, default in base.to_dict().items():
        if f not in t:
            continue
        text = t[f]
        try:
            if f == "dtype":
                kw[f] = str(np.dtype(text.strip()))
            elif f == "stage2_lr" and text.strip().lower() in ("", "none"):
                kw[f] = None
            elif isinstance(default, int) and not isinstance(default, bool):
                kw[f] = int(text)
            else:
                kw[f] = float(text)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[train] {f}: {exc}") from None
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    try:
        return replace(base, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def protocol_from(raw, args):
    p = raw.get("protocol", {})
    name = getattr(args, "protocol", None) or p.get("name", "custom")
    try:
        spec = protocols.by_name(name)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if "exclude_identical_views" in p:
        spec = replace(spec, exclude_identical_views=_bool(p["exclude_identical_views"], "exclude_identical_views"))
    if "views" in p:
        try:
            spec = replace(spec, views=tuple(float(v) for v in p["views"].split(",")))
        except ValueError as exc:
            raise ConfigError(f"[protocol] views: {exc}") from None
    if getattr(args, "no_exclude", False):
        spec = replace(spec, exclude_identical_views=False)
    return spec


def _setting(args, raw, section, key, attr=None):
    value = getattr(args, attr or key, None)
    if value is None:
        value = raw.get(section, {}).get(key)
    return value


# --------------------------------------------------------------------------
# helpers


def _manifest(path):
    if path is None:
        raise ConfigError("no manifest given (--manifest or [data] manifest)")
    if not Path(path).is_file():
        raise ManifestError([(0, f"manifest not found: {path}")])
    return read_manifest(path)


def _load_entries(manifest, entries):
    return [load_sequence(e, manifest.root) for e in entries]


def _partition(manifest, spec):
    try:
        part = protocols.partition(manifest.entries, spec)
    except ManifestError as exc:
        raise CliExit(EXIT_PROTOCOL, str(exc)) from None
    return part


def _load_ckpt(path, expect=None):
    if path is None or not Path(path).is_file():
        raise CliExit(EXIT_PREREQ, f"checkpoint not found: {path}")
    return load_checkpoint(path, expect)


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# commands


def cmd_synth(args):
    path = write_toy_dataset(args.out, n_ids=args.ids, views=tuple(args.views), seqs=args.seqs,
                             frames=args.frames, seed=args.seed)
    print(f"wrote {args.ids * len(args.views) * args.seqs} sequences; manifest {path}")
    return EXIT_OK


def cmd_preprocess(args):
    manifest = _manifest(args.manifest)
    out = Path(args.out)
    counts = {}
    written = []
    for entry in manifest.entries:
        seq = load_sequence(entry, manifest.root)
        rel = Path(entry.path)
        if rel.is_absolute() or ".." in rel.parts:
            rel = Path(entry.subject) / f"{entry.condition}-{entry.seq_index:02d}" / format_view(entry.view)
        d = out / rel
        d.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(seq.frames, start=1):
            Image.fromarray((frame.pixels * 255).astype(np.uint8), mode="L").save(d / f"{t:03d}.png")
        written.append(replace(entry, path=rel.as_posix()))
        counts[entry.split or "-"] = counts.get(entry.split or "-", 0) + 1
    write_manifest(out / "manifest.csv", written)
    print(f"{len(manifest)} sequences written to {out}")
    for split, n in sorted(counts.items()):
        print(f"  {split}: {n}")
    return EXIT_OK


def cmd_summarize(args):
    manifest = read_manifest(args.manifest, check_paths=False)
    subjects = {e.subject for e in manifest.entries}
    views = {e.view for e in manifest.entries}
    print(f"{len(manifest)} sequences, {len(subjects)} subjects, {len(views)} views")
    return EXIT_OK


def cmd_train(args):
    raw = read_run_config(args.config) if args.config else {}
    cfg = train_config_from(raw, args)
    model_cfg = model_config_from(raw, args)
    spec = protocol_from(raw, args)
    out_dir = Path(_setting(args, raw, "data", "out_dir") or ".")
    manifest = _manifest(_setting(args, raw, "data", "manifest"))
    part = _partition(manifest, spec)
    if not part.training:
        raise ManifestError([(0, "no Training sequences in manifest")])
    sequences = _load_entries(manifest, part.training)
    subjects = [s.subject_id for s in sequences]

    if args.stage == 1:
        if args.resume:
            params, _ = _load_ckpt(args.resume, model_cfg)
            params = params.astype(cfg.np_dtype)
        else:
            params = init_params(model_cfg, seed=cfg.seed, dtype=cfg.np_dtype)
        logger = CsvLog(out_dir / "stage1_log.csv", STAGE1_LOG_FIELDS)
        history = train_stage1(sequences, subjects, params, cfg, logger)
        path = out_dir / "stage1.ckpt"
        save_checkpoint(path, params, {"stage": 1, "train": cfg.to_dict()})
        final = history[-1]["loss"] if history else float("nan")
        print(f"stage 1: {len(history)} steps, final loss {final:.6f}; checkpoint {path}")
        return EXIT_OK

    prereq = args.resume or (out_dir / "stage1.ckpt")
    stage1, _ = _load_ckpt(prereq)
    stage1 = stage1.astype(cfg.np_dtype)
    stage1_cfg = replace(stage1.config, use_bgru=model_cfg.use_bgru, use_attention=model_cfg.use_attention)
    if stage1.config.bins != model_cfg.bins:
        raise CheckpointError(f"stage-1 checkpoint has {stage1.config.bins} bins, config asks for "
                              f"{model_cfg.bins}", "reduce.fc.weight")
    stage1.config = stage1_cfg
    classes, targets = class_indices(subjects)
    params = with_classifier(stage1, classes, seed=cfg.seed + 7)
    pf = extract_partial_features(sequences, params)
    logger = CsvLog(out_dir / "stage2_log.csv", STAGE2_LOG_FIELDS)
    history = train_stage2(pf, targets, params, cfg, logger)
    path = out_dir / "stage2.ckpt"
    save_checkpoint(path, params, {"stage": 2, "train": cfg.to_dict()})
    acc = history[-1]["accuracy"] if history else float("nan")
    print(f"stage 2: {len(history)} epochs, training accuracy {acc:.4f}; checkpoint {path}")
    return EXIT_OK


def _occlusion_list(tokens):
    if not tokens or tokens == ["none"]:
        return []
    if tokens == ["all"]:
        return enumerate_occlusion_specs()
    try:
        return [OcclusionSpec.parse(t) for t in tokens]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_eval(args):
    raw = read_run_config(args.config) if args.config else {}
    spec = protocol_from(raw, args)
    occlusions = _occlusion_list(args.occlusions)
    out = Path(args.out)
    params, _ = _load_ckpt(args.checkpoint)
    manifest = _manifest(_setting(args, raw, "data", "manifest"))
    part = _partition(manifest, spec)
    if not part.gallery or not part.probe:
        raise CliExit(EXIT_PROTOCOL, "test split has no gallery or no probe sequences")
    gallery = _load_entries(manifest, part.gallery)
    probes = _load_entries(manifest, part.probe)
    g = embed_sequences(gallery, params)
    p = embed_sequences(probes, params)
    report = evaluate_cross_view(g, p, spec)
    _write_json(out / "report.json", report.to_dict())
    write_attention_csv(out / "attention_probe.csv", p)
    print(report.summary())
    if occlusions:
        result = occlusion_experiment(params, gallery, probes, spec, occlusions, clean=report)
        for occ, rep in result.reports:
            _write_json(out / f"report_{occ.name}.json", rep.to_dict())
        _write_json(out / "degradation.json", {"clean_mean": report.overall_mean,
                                               "rows": result.degradation_table()})
        print("occlusion            mean     sd   drop")
        for row in result.degradation_table():
            print(f"{row['occlusion']:<18} {100 * row['mean']:6.1f} {100 * row['sd']:6.1f} "
                  f"{100 * row['degradation']:6.1f}")
    return EXIT_OK


def cmd_embed(args):
    raw = read_run_config(args.config) if args.config else {}
    params, _ = _load_ckpt(args.checkpoint)
    if args.config or args.preset or args.bins is not None or args.global_rep:
        check_compatible(params, model_config_from(raw, args))
    manifest = _manifest(_setting(args, raw, "data", "manifest"))
    sequences = _load_entries(manifest, manifest.entries)
    emb = embed_sequences(sequences, params)
    write_embeddings_csv(args.out, emb)
    if args.attention_out:
        write_attention_csv(args.attention_out, emb)
    print(f"{len(emb)} embeddings of width {emb.embeddings.shape[1]} written to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _add_model_flags(p):
    p.add_argument("--preset", choices=("toy", "full"), help="layer widths (default from config, else toy)")
    p.add_argument("--bins", type=int, choices=(1, 2, 4, 8, 16), help="horizontal bins")
    p.add_argument("--global-rep", action="store_true", help="no splitting (same as --bins 1)")
    p.add_argument("--no-bgru", action="store_true", help="attention directly on FC features")
    p.add_argument("--no-attention", action="store_true", help="uniform bin weights")


def build_parser():
    parser = argparse.ArgumentParser(prog="partgait", description="Part-based attentive gait embeddings")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a procedural toy dataset with a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--ids", type=int, default=8)
    p.add_argument("--views", type=float, nargs="+", default=list(TOY_VIEWS))
    p.add_argument("--seqs", type=int, default=4)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="normalize every frame of a manifest to 64x64")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("summarize", help="count sequences, subjects and views in a manifest")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--resume", help="stage 1: continue from checkpoint; stage 2: stage-1 checkpoint")
    p.add_argument("--protocol")
    p.add_argument("--seed", type=int)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="cross-view rank-1 evaluation, optionally under occlusion")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--protocol")
    p.add_argument("--no-exclude", action="store_true", help="keep identical-view gallery matches")
    p.add_argument("--occlusions", nargs="+", default=["none"],
                   help="none, all, or names such as small_horizontal_3 large_vertical_1")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed", help="export attentive embeddings as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--attention-out", dest="attention_out")
    _add_model_flags(p)
    p.set_defaults(func=cmd_embed)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliExit as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ManifestError as exc:
        print("error: invalid manifest", file=sys.stderr)
        for row, reason in exc.rows:
            print(f"  row {row}: {reason}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, EmptySilhouette, MissingFrames, DegenerateBatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EmptyGalleryView as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (CheckpointError, ShapeMismatch) as exc:
        name = getattr(exc, "tensor_name", None)
        print(f"error: {exc}" + (f" [tensor {name}]" if name else ""), file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
