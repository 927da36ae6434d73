"""Batch evaluation: attack-success-rate aggregation and robustness sweeps.

Sweeps answer "does the found perturbation survive deployment drift": the
object is moved along the sensor ray (distance), rotated in place about its
own centroid (angle), or the merged adversarial cloud is thinned by random
point removal (srs). Only the perturbation mesh is re-scanned; the target
cloud is transformed analytically. Zero-valued conditions skip the
transform entirely, so those rows see bit-identical input and reproduce the
baseline verdict exactly.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .defense import SrsConfig, adversarial_cloud, srs_filter
from .errors import ConfigError, ProtocolError, TransportError
from .gsa import AttackConfig, Individual, scan_and_classify
from .oracle import attack_success, classify_verdict
from .pointcloud import BoundingBox, Point3, Scene, rotate_z, rotation_z, translate

SWEEP_KINDS = ("distance", "angle", "srs")
CSV_HEADER = "condition,scenes,successes,asr,mean_calls,mean_ms"


@dataclass(frozen=True)
class SweepSpec:
    """What to sweep: kind, the value grid, and trials per grid point.

    Values are meters (distance), degrees (angle), or removal counts (srs).
    """

    kind: str
    values: tuple
    trials_per_value: int = 1

    def __post_init__(self):
        if self.kind not in SWEEP_KINDS:
            raise ConfigError(f"kind must be one of {SWEEP_KINDS}: {self.kind!r}")
        values = tuple(self.values)
        if not values:
            raise ConfigError("values must be non-empty")
        if not all(math.isfinite(v) for v in values):
            raise ConfigError("values must be finite")
        if self.kind == "srs" and any(v < 0 or v != int(v) for v in values):
            raise ConfigError("srs values are non-negative removal counts")
        if self.trials_per_value < 1:
            raise ConfigError(f"trials_per_value must be >= 1: {self.trials_per_value}")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class ReportRow:
    """One aggregated condition: counts, exact success ratio, mean cost."""

    condition: str
    scenes: int
    successes: int
    mean_calls: float
    mean_ms: float
    error: str | None = None

    @property
    def asr(self) -> float:
        return self.successes / self.scenes

    def to_dict(self) -> dict:
        d = {
            "condition": self.condition,
            "scenes": self.scenes,
            "successes": self.successes,
            "asr": self.asr,
            "mean_calls": self.mean_calls,
            "mean_ms": self.mean_ms,
        }
        if self.error is not None:
            d["error"] = self.error
        return d


@dataclass
class Report:
    """Ordered rows plus the x-axis values they were produced from."""

    kind: str
    rows: list[ReportRow] = field(default_factory=list)
    values: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for row in self.rows:
            lines.append(
                f"{row.condition},{row.scenes},{row.successes},"
                f"{row.asr:.4f},{row.mean_calls:.2f},{row.mean_ms:.3f}"
            )
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "rows": [row.to_dict() for row in self.rows]}

    def plot_data(self) -> dict:
        """x/y series (condition value vs asr) for external plotting."""
        return {
            "kind": self.kind,
            "x": list(self.values),
            "y": [row.asr for row in self.rows],
        }

    def write(self, stem: str | Path, plot_data: bool = False) -> list[Path]:
        """Write `<stem>.csv` and `<stem>.json` (and optionally `<stem>_plot.json`)."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        written = [stem.with_suffix(".csv"), stem.with_suffix(".json")]
        written[0].write_text(self.to_csv())
        written[1].write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")
        if plot_data:
            p = stem.parent / (stem.name + "_plot.json")
            p.write_text(json.dumps(self.plot_data(), indent=2) + "\n")
            written.append(p)
        return written


def compute_asr(results: list) -> float:
    """Fraction of attack results that ended in success."""
    if not results:
        raise ValueError("need at least one attack result")
    return sum(1 for r in results if r.success) / len(results)


def summarize_attacks(results: list, condition: str = "attack") -> Report:
    """One-row report over a batch of attack results."""
    if not results:
        raise ValueError("need at least one attack result")
    row = ReportRow(
        condition=condition,
        scenes=len(results),
        successes=sum(1 for r in results if r.success),
        mean_calls=float(np.mean([r.oracle_calls for r in results])),
        mean_ms=float(np.mean([r.wall_time_s for r in results])) * 1000.0,
    )
    return Report(kind="attack", rows=[row], values=[])


def _points_of(best) -> np.ndarray:
    pts = best.points if isinstance(best, Individual) else best
    return np.asarray(pts, dtype=np.float64).reshape(-1, 3)


def _shifted_scene(scene: Scene, delta: np.ndarray) -> Scene:
    box = scene.gt_box
    c = box.center
    return Scene(
        background=scene.background,
        target=translate(scene.target, delta),
        label=scene.label,
        gt_box=BoundingBox(
            center=Point3(c.x + delta[0], c.y + delta[1], c.z + delta[2]),
            half_extents=box.half_extents,
            yaw=box.yaw,
        ),
        name=scene.name,
    )


def _rotated_scene(scene: Scene, psi: float, pivot: np.ndarray) -> Scene:
    box = scene.gt_box
    center = np.array([box.center.x, box.center.y, box.center.z])
    new_center = rotation_z(psi) @ (center - pivot) + pivot
    moved = translate(rotate_z(translate(scene.target, -pivot), psi), pivot)
    return Scene(
        background=scene.background,
        target=moved,
        label=scene.label,
        gt_box=BoundingBox(
            center=Point3(*new_center),
            half_extents=box.half_extents,
            yaw=box.yaw + psi,
        ),
        name=scene.name,
    )


def _sweep_rows(
    kind: str,
    values,
    trials: int,
    run_trial,
) -> Report:
    """Shared driver: run `run_trial(value, trial_index) -> bool` per cell,
    recording oracle errors per-row without aborting the sweep."""
    report = Report(kind=kind)
    for value in values:
        successes = 0
        calls = 0
        error = None
        t0 = time.perf_counter()
        for t in range(trials):
            try:
                calls += 1
                if run_trial(value, t):
                    successes += 1
            except (TransportError, ProtocolError) as exc:
                error = f"{type(exc).__name__}: {exc}"
        elapsed_ms = (time.perf_counter() - t0) * 1000.0
        unit = {"distance": "m", "angle": "deg", "srs": ""}[kind]
        label = f"srs_k={int(value)}" if kind == "srs" else f"{kind}{value:+g}{unit}"
        report.rows.append(
            ReportRow(
                condition=label,
                scenes=trials,
                successes=successes,
                mean_calls=calls / trials,
                mean_ms=elapsed_ms / trials,
                error=error,
            )
        )
        report.values.append(float(value))
    return report


def sweep_distance(
    best,
    scene: Scene,
    oracle,
    offsets,
    config: AttackConfig | None = None,
    trials: int = 1,
) -> Report:
    """Re-evaluate the perturbation with the object moved along the sensor ray.

    Positive offsets move the object away from the sensor. The zero-offset
    row applies no transform and reproduces the baseline verdict exactly.
    """
    spec = SweepSpec("distance", tuple(offsets), trials)
    cfg = config if config is not None else AttackConfig()
    info = oracle.info
    points = _points_of(best)
    origin = cfg.scan_config().origin.as_array()
    centroid = scene.target.xyz.mean(axis=0)
    ray = centroid - origin
    norm = float(np.linalg.norm(ray))
    if norm == 0.0:
        raise ConfigError("target centroid coincides with the scan origin")
    ray = ray / norm

    def run_trial(value: float, _t: int) -> bool:
        if value == 0.0:
            verdict, _ = scan_and_classify(points, scene, oracle, info, cfg)
        else:
            delta = value * ray
            verdict, _ = scan_and_classify(
                points + delta, _shifted_scene(scene, delta), oracle, info, cfg
            )
        return attack_success(verdict)

    return _sweep_rows("distance", spec.values, spec.trials_per_value, run_trial)


def sweep_angle(
    best,
    scene: Scene,
    oracle,
    angles_deg,
    config: AttackConfig | None = None,
    trials: int = 1,
) -> Report:
    """Re-evaluate with the object (and its perturbation) rotated in place
    about the target centroid. Angles are degrees; the zero row applies no
    transform and reproduces the baseline verdict exactly.
    """
    spec = SweepSpec("angle", tuple(angles_deg), trials)
    cfg = config if config is not None else AttackConfig()
    info = oracle.info
    points = _points_of(best)
    pivot = scene.target.xyz.mean(axis=0)

    def run_trial(value: float, _t: int) -> bool:
        if value == 0.0:
            verdict, _ = scan_and_classify(points, scene, oracle, info, cfg)
        else:
            psi = math.radians(value)
            rotated_points = (points - pivot) @ rotation_z(psi).T + pivot
            verdict, _ = scan_and_classify(
                rotated_points, _rotated_scene(scene, psi, pivot), oracle, info, cfg
            )
        return attack_success(verdict)

    return _sweep_rows("angle", spec.values, spec.trials_per_value, run_trial)


def sweep_srs(
    best,
    scene: Scene,
    oracle,
    removal_counts,
    config: AttackConfig | None = None,
    trials: int = 1,
    seed: int = 0,
) -> Report:
    """Re-detect the merged adversarial cloud after random point removal.

    Each (count, trial) cell draws a fresh removal subset from a seed derived
    from `seed`; k=0 leaves the cloud untouched, reproducing the baseline.
    The perturbation is scanned once; the filter acts on the merged cloud.
    """
    spec = SweepSpec("srs", tuple(removal_counts), trials)
    cfg = config if config is not None else AttackConfig()
    info = oracle.info
    points = _points_of(best)
    merged = adversarial_cloud(scene, points, cfg)
    if max(spec.values) >= len(merged):
        raise ConfigError(
            f"removal count {int(max(spec.values))} >= cloud size {len(merged)}"
        )

    def run_trial(value: float, trial: int) -> bool:
        k = int(value)
        sub_seed = int(np.random.SeedSequence([seed, k, trial]).generate_state(1)[0])
        filtered = srs_filter(merged, SrsConfig(remove_count=k, seed=sub_seed))
        verdict = classify_verdict(oracle.detect(filtered), scene, info)
        return attack_success(verdict)

    return _sweep_rows("srs", spec.values, spec.trials_per_value, run_trial)
