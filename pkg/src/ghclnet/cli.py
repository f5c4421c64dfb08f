"""Command line entry point: synth, train, predict, evaluate, viz, report."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import yaml

from .backbone import BackboneConfig, load_checkpoint, save_checkpoint
from .cascade import CascadeThresholds, cascade_predict
from .datamodel import DatasetManifest, ExpertKind, Split, load_manifest, validate_manifest
from .evaluation import (
    ExpertCache,
    ProtocolError,
    ProtocolKind,
    ProtocolSpec,
    config_hash,
    load_reference,
    load_run_reports,
    render_report,
    report_json,
    run_protocol,
    write_json,
)
from .featviz import DEFAULT_UNITS, visualize
from .featviz import VizRequest
from .ingestion import ImageDecodeError, SynthSpec, prepare_input, synth_generate
from .training import TrainConfig, train_expert

log = logging.getLogger("ghclnet")

COMPLETED = "COMPLETED"
FAILED = "FAILED"

EXPERT_ALIASES = {"textured": ExpertKind.TEXTURED_DETECTOR, "lens": ExpertKind.LENS_DETECTOR}


class UsageError(Exception):
    pass


def load_config(path) -> dict:
    if path is None:
        return {}
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise UsageError(f"{path}: run config must be a mapping")
    return data


def resolve_training(cfg: dict, args) -> tuple[BackboneConfig, TrainConfig]:
    """Merge config file sections with flags (flags win); one seed drives everything."""
    bb = dict(cfg.get("backbone", {}))
    tr = dict(cfg.get("train", {}))
    seed = cfg.get("seed", 0)
    if getattr(args, "seed", None) is not None:
        seed = args.seed
    if getattr(args, "width_scale", None) is not None:
        bb["width_scale"] = args.width_scale
    if getattr(args, "pretrained", None) is not None:
        bb["pretrained"] = args.pretrained
    if getattr(args, "weights", None):
        bb["weights_path"] = args.weights
    if getattr(args, "epochs", None) is not None:
        tr["epochs"] = args.epochs
    if getattr(args, "batch_size", None) is not None:
        tr["batch_size"] = args.batch_size
    if getattr(args, "policy", None):
        tr["freeze_policy"] = args.policy
    bb["seed"] = seed
    tr["seed"] = seed
    try:
        return BackboneConfig.from_dict(bb), TrainConfig.from_dict(tr)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _thresholds(cfg: dict, args) -> CascadeThresholds:
    th = dict(cfg.get("thresholds", {}))
    if getattr(args, "t_textured", None) is not None:
        th["t_textured"] = args.t_textured
    if getattr(args, "t_lens", None) is not None:
        th["t_lens"] = args.t_lens
    try:
        return CascadeThresholds(**th)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _out_dir(cfg: dict, args, key: str = "out") -> Path:
    out = getattr(args, "out", None) or cfg.get(key)
    if not out:
        raise UsageError("an output directory is required (--out or 'out' in the config)")
    return Path(out)


def _mark(out: Path, name: str, text: str = "") -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


# --------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    spec = SynthSpec(n_per_class=args.per_class, image_size=args.image_size, noise_level=args.noise,
                     seed=args.seed, n_sensors=args.sensors)
    out = Path(args.out)
    manifest = synth_generate(spec, out)
    problems = validate_manifest(manifest)
    if problems:
        raise RuntimeError(f"generated manifest is invalid: {problems[:3]}")
    resolved = {"synth": {"n_per_class": spec.n_per_class, "image_size": spec.image_size,
                          "noise_level": spec.noise_level, "seed": spec.seed, "n_sensors": spec.n_sensors}}
    write_json(out / "resolved_config.json", resolved)
    digest = hashlib.sha256((out / "manifest.jsonl").read_bytes()).hexdigest()
    _mark(out, COMPLETED, digest + "\n")
    print(f"wrote {len(manifest)} images to {out} (manifest sha256 {digest[:16]})")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    expert = args.expert or cfg.get("expert")
    if expert not in EXPERT_ALIASES:
        raise UsageError(f"--expert must be one of {sorted(EXPERT_ALIASES)}")
    manifest_path = args.manifest or cfg.get("manifest")
    if not manifest_path:
        raise UsageError("a manifest is required (--manifest or 'manifest' in the config)")
    out = _out_dir(cfg, args)
    backbone_cfg, train_cfg = resolve_training(cfg, args)
    resolved = {"expert": expert, "manifest": str(manifest_path),
                "backbone": backbone_cfg.to_dict(), "train": train_cfg.to_dict()}
    with _failure_marker(out):
        manifest = load_manifest(manifest_path)
        model, history = train_expert(EXPERT_ALIASES[expert], manifest, train_cfg, backbone_cfg)
        save_checkpoint(model, out, extra={"config_hash": config_hash(resolved)})
        write_json(out / "history.json", history.to_dict())
        write_json(out / "resolved_config.json", resolved)
        _mark(out, COMPLETED)
    print(f"checkpoint written to {out}")
    return 0


def cmd_predict(args) -> int:
    cfg = load_config(args.config)
    th = _thresholds(cfg, args)
    expert_t = load_checkpoint(args.textured)
    expert_l = load_checkpoint(args.lens)
    items = []
    if args.manifest:
        m = load_manifest(args.manifest)
        split = None if args.split == "all" else Split(args.split)
        items += [(r.sample_id, r.image_path) for r in m.records if split is None or r.split == split]
    items += [(Path(p).stem, Path(p)) for p in args.images or []]
    sink = open(args.out, "w") if args.out else sys.stdout
    failures = 0
    try:
        for sid, path in items:
            try:
                tensor = prepare_input(path, expert_t.normalization, sid)
            except ImageDecodeError as exc:
                failures += 1
                log.error("%s: %s", sid, exc)
                continue
            (d,) = cascade_predict(expert_t, expert_l, [tensor], th)
            sink.write(json.dumps({"sample_id": sid, **d.to_json()}) + "\n")
    finally:
        if sink is not sys.stdout:
            sink.close()
    return 1 if failures else 0


def _collect_manifests(cfg: dict, args) -> dict[str, DatasetManifest]:
    paths = list(args.manifest or []) or list(cfg.get("manifests", []))
    if not paths:
        raise UsageError("at least one --manifest is required")
    manifests = {}
    for p in paths:
        m = load_manifest(p)
        if m.name in manifests:
            m = DatasetManifest(name=Path(p).parent.name + "/" + m.name, records=m.records)
        manifests[m.name] = m
    if args.by_sensor or cfg.get("by_sensor"):
        records = [r for m in manifests.values() for r in m.records]
        manifests = {
            s: DatasetManifest(name=s, records=tuple(r for r in records if r.sensor_id == s))
            for s in sorted({r.sensor_id for r in records})
        }
    return manifests


def _protocol_spec(cfg: dict, args, manifests) -> ProtocolSpec:
    p = dict(cfg.get("protocol", {}))
    if args.protocol:
        p["kind"] = args.protocol
    for flag, key in (("sensor", "sensor"), ("train_sensor", "train_sensor"), ("test_sensor", "test_sensor"),
                      ("name", "name")):
        if getattr(args, flag, None):
            p[key] = getattr(args, flag)
    if args.sensors:
        p["sensor_set"] = args.sensors
    if args.test_manifest:
        p["test_manifests"] = args.test_manifest
    if "kind" not in p:
        raise UsageError("--protocol is required")
    if p["kind"] == ProtocolKind.COMBINED_SENSOR.value:
        p.setdefault("manifest_set", sorted(manifests))
        p.setdefault("test_manifests", sorted(manifests))
    try:
        return ProtocolSpec.from_dict(p)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(cfg, args)
    manifests = _collect_manifests(cfg, args)
    spec = _protocol_spec(cfg, args, manifests)
    backbone_cfg, train_cfg = resolve_training(cfg, args)
    th = _thresholds(cfg, args)
    with _failure_marker(out):
        reports = run_protocol(spec, manifests, train_cfg, backbone_cfg, out, th, ExpertCache())
        _mark(out, COMPLETED)
    print(render_report(reports))
    return 0


def cmd_viz(args) -> int:
    out = Path(args.out)
    with _failure_marker(out):
        for img in args.image:
            req = VizRequest(Path(args.checkpoint), Path(img), out / f"{Path(img).stem}_features.png",
                             tuple(args.units or DEFAULT_UNITS), args.channels)
            visualize(req)
        _mark(out, COMPLETED)
    return 0


def cmd_report(args) -> int:
    reports = []
    for run in args.runs:
        reports.extend(load_run_reports(run))
    reference = load_reference(args.reference_method, args.reference) if args.reference else None
    if args.format == "json":
        text = json.dumps(report_json(reports, reference), indent=2) + "\n"
    else:
        text = render_report(reports, reference)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


class _failure_marker:
    """Flag partial outputs with a FAILED marker if the wrapped block raises."""

    def __init__(self, out: Path):
        self.out = Path(out)

    def __enter__(self):
        if (self.out / FAILED).exists():
            (self.out / FAILED).unlink()
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, UsageError):
            _mark(self.out, FAILED, f"{exc_type.__name__}: {exc}\n")
        return False


# --------------------------------------------------------------------------
# parser

def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config (YAML or JSON); flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--width-scale", type=float)
    p.add_argument("--pretrained", dest="pretrained", action="store_true", default=None)
    p.add_argument("--no-pretrained", dest="pretrained", action="store_false")
    p.add_argument("--weights", help="local ImageNet ResNet-50 state dict")
    p.add_argument("--policy", nargs="+", help="trainable units, e.g. block3 block5 head")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ghclnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic three-class dataset")
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--sensors", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fine-tune one expert")
    p.add_argument("--expert", choices=sorted(EXPERT_ALIASES))
    p.add_argument("--manifest")
    p.add_argument("--out")
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="run the cascade on images")
    p.add_argument("--textured", required=True, help="textured-detector checkpoint dir")
    p.add_argument("--lens", required=True, help="lens-detector checkpoint dir")
    p.add_argument("--manifest")
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument("--images", nargs="*")
    p.add_argument("--config")
    p.add_argument("--t-textured", type=float)
    p.add_argument("--t-lens", type=float)
    p.add_argument("--out", help="JSON-lines output (default: stdout)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="train both experts and evaluate one protocol")
    p.add_argument("--protocol", choices=[k.value for k in ProtocolKind])
    p.add_argument("--manifest", action="append")
    p.add_argument("--by-sensor", action="store_true", help="treat each sensor as its own database")
    p.add_argument("--sensor")
    p.add_argument("--train-sensor")
    p.add_argument("--test-sensor")
    p.add_argument("--sensors", nargs="+")
    p.add_argument("--test-manifest", action="append")
    p.add_argument("--name", help="row label used in reports")
    p.add_argument("--t-textured", type=float)
    p.add_argument("--t-lens", type=float)
    p.add_argument("--out")
    _add_training_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("viz", help="activation grids for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", nargs="+", required=True)
    p.add_argument("--units", nargs="+")
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("report", help="render CCR tables from run directories")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--reference", help="'paper_tables' for the bundled values, or a JSON path")
    p.add_argument("--reference-method", default="GHCLNet")
    p.add_argument("--format", choices=["text", "json"], default="text")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ProtocolError) as exc:
        print(f"ghclnet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"ghclnet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
