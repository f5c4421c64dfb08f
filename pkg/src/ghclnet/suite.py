"""Desk-scale end-to-end run: synthetic data through all four protocols."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

from .backbone import BackboneConfig
from .datamodel import DatasetManifest
from .evaluation import (
    CCRReport,
    ExpertCache,
    ProtocolKind,
    ProtocolSpec,
    render_report,
    run_protocol,
    write_json,
)
from .ingestion import SynthSpec, synth_generate
from .training import TrainConfig

log = logging.getLogger(__name__)

# files whose bytes must repeat across same-seed reruns
METRIC_FILES = ("report.json", "report.txt", "predictions.jsonl")


@dataclass(frozen=True)
class DeskSuiteConfig:
    n_per_class: int = 100
    n_sensors: int = 2
    seed: int = 0
    epochs: int = 10
    batch_size: int = 64
    width_scale: float = 0.25

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(width_scale=self.width_scale, pretrained=False, seed=self.seed)

    def train(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, seed=self.seed)


def desk_protocols(sensors: list[str]) -> list[tuple[str, ProtocolSpec]]:
    a, b = sensors[:2]
    out = [(f"intra_{s}", ProtocolSpec(ProtocolKind.INTRA_SENSOR, sensor=s)) for s in sensors]
    out += [(f"inter_{a}_{b}", ProtocolSpec(ProtocolKind.INTER_SENSOR, train_sensor=a, test_sensor=b)),
            (f"inter_{b}_{a}", ProtocolSpec(ProtocolKind.INTER_SENSOR, train_sensor=b, test_sensor=a)),
            ("multi", ProtocolSpec(ProtocolKind.MULTI_SENSOR, sensor_set=tuple(sensors)))]
    # each sensor doubles as its own database for the combined protocol
    out.append(("combined", ProtocolSpec(ProtocolKind.COMBINED_SENSOR, manifest_set=tuple(sensors),
                                         test_manifests=tuple(sensors))))
    return out


def run_desk_suite(cfg: DeskSuiteConfig, out_dir) -> dict[str, list[CCRReport]]:
    out_dir = Path(out_dir)
    t0 = time.perf_counter()
    manifest = synth_generate(SynthSpec(n_per_class=cfg.n_per_class, n_sensors=cfg.n_sensors, seed=cfg.seed),
                              out_dir / "data")
    sensors = sorted(manifest.sensor_ids)
    per_sensor = {s: DatasetManifest(s, tuple(r for r in manifest.records if r.sensor_id == s)) for s in sensors}
    cache = ExpertCache()
    results = {}
    for name, spec in desk_protocols(sensors):
        t = time.perf_counter()
        results[name] = run_protocol(spec, per_sensor, cfg.train(), cfg.backbone(), out_dir / "runs" / name,
                                     cache=cache)
        log.info("%s done in %.1fs", name, time.perf_counter() - t)
    write_json(out_dir / "suite_config.json", asdict(cfg))
    (out_dir / "summary.txt").write_text(
        "\n".join(render_report(reps) for reps in results.values()))
    log.info("desk suite finished in %.1fs", time.perf_counter() - t0)
    return results
