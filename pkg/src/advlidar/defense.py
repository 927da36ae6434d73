"""Point-removal defense and adversarial training-set emission.

The defense is simple random sampling: drop a uniformly chosen subset of
points before detection. Removing a small fraction tends to destroy sparse
adversarial structure while leaving dense legitimate returns recognizable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .pointcloud import PointCloud, Scene, merge, save_kitti_bin


@dataclass(frozen=True)
class SrsConfig:
    """Random point removal: drop exactly remove_count points, or
    round(remove_fraction * n). Exactly one of the two must be given.

    `seed` fixes the subset choice; the same (cloud, config) pair always
    removes the same points.
    """

    remove_count: int | None = None
    remove_fraction: float | None = None
    seed: int = 0

    def __post_init__(self):
        if (self.remove_count is None) == (self.remove_fraction is None):
            raise ConfigError("exactly one of remove_count/remove_fraction must be set")
        if self.remove_count is not None and self.remove_count < 0:
            raise ConfigError(f"remove_count must be >= 0: {self.remove_count}")
        if self.remove_fraction is not None and not 0.0 <= self.remove_fraction < 1.0:
            raise ConfigError(f"remove_fraction must be in [0, 1): {self.remove_fraction}")
        if not (0 <= self.seed < 2 ** 64):
            raise ConfigError("seed must fit in 64 bits")

    def removal_count(self, n: int) -> int:
        k = self.remove_count if self.remove_count is not None else int(
            round(self.remove_fraction * n)
        )
        if k >= n:
            raise ConfigError(f"cannot remove {k} of {n} points")
        return k


def srs_filter(cloud: PointCloud, config: SrsConfig) -> PointCloud:
    """Remove a seeded uniform random subset; survivors keep original order."""
    n = len(cloud)
    k = config.removal_count(n)
    if k == 0:
        return PointCloud(cloud.data.copy())
    rng = np.random.default_rng(config.seed)
    keep = np.sort(rng.permutation(n)[: n - k])
    return PointCloud(cloud.data[keep])


def adversarial_cloud(scene: Scene, points, config=None) -> PointCloud:
    """Clean merged scene plus the scanned returns of a perturbation.

    `points` is the (n0, 3) perturbation; scanning uses the attack config's
    mesh radius and scan geometry (defaults when config is None). The clean
    points come first, so the adversarial cloud is a superset by construction.
    """
    from .gsa import AttackConfig, scan_from_points

    cfg = config if config is not None else AttackConfig()
    scanned = scan_from_points(points, cfg)
    return merge(scene.background, scene.target, scanned)


def emit_adv_training_set(
    scenes: list[Scene],
    results: list,
    mix_fraction: float,
    out_dir: str | Path,
    config=None,
) -> dict:
    """Write a mixed clean/adversarial dataset of KITTI-format .bin files.

    Every scene contributes its clean merged cloud (`<name>_clean.bin`); the
    first ceil(mix_fraction * N) scenes also contribute `<name>_adv.bin`,
    built from the best perturbation in the matching attack result. Returns
    the manifest, also written to `manifest.json`.
    """
    if not 0.0 <= mix_fraction <= 1.0:
        raise ConfigError(f"mix_fraction must be in [0, 1]: {mix_fraction}")
    if len(scenes) != len(results):
        raise ConfigError(
            f"scene/result count mismatch: {len(scenes)} vs {len(results)}"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    quota = int(np.ceil(mix_fraction * len(scenes)))
    entries = []
    for i, (scene, result) in enumerate(zip(scenes, results)):
        name = scene.name or f"scene{i:03d}"
        clean = merge(scene.background, scene.target)
        clean_path = out_dir / f"{name}_clean.bin"
        save_kitti_bin(clean, clean_path)
        entries.append(
            {
                "file": clean_path.name,
                "label": scene.label,
                "kind": "clean",
                "points": len(clean),
            }
        )
        if i < quota:
            adv = adversarial_cloud(scene, result.best.points, config)
            adv_path = out_dir / f"{name}_adv.bin"
            save_kitti_bin(adv, adv_path)
            entries.append(
                {
                    "file": adv_path.name,
                    "label": scene.label,
                    "kind": "adversarial",
                    "points": len(adv),
                }
            )

    manifest = {"entries": entries}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
