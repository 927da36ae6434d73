"""Command-line entry points.

Exit codes:
    0   command succeeded (for `attack`: the attack found an adversarial example)
    3   attack completed but never fooled the detector
    10  bad configuration, missing or malformed input file
    11  oracle transport/protocol failure, or conformance-check mismatch
    12  evaluation budget exhausted before any success
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path
from types import SimpleNamespace

from .defense import SrsConfig, adversarial_cloud, emit_adv_training_set, srs_filter
from .errors import (
    BudgetExhaustedError,
    ConfigError,
    MalformedFileError,
    ProtocolError,
    TransportError,
)
from .gsa import AttackConfig, load_result_points, run_attack
from .harness import sweep_angle, sweep_distance, sweep_srs
from .oracle import check_conformance, check_structural, connect_oracle
from .pointcloud import load_kitti_bin, load_scene, save_kitti_bin
from .scanner import (
    build_perturbation_mesh,
    default_scan_config,
    export_stl,
    load_scan_config,
    load_stl,
    simulate_scan,
)

EXIT_OK = 0
EXIT_NO_SUCCESS = 3
EXIT_CONFIG = 10
EXIT_TRANSPORT = 11
EXIT_BUDGET = 12


def _require(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"no such file: {p}")
    return p


def _load_attack_config(args) -> AttackConfig:
    cfg = AttackConfig.from_file(_require(args.config)) if args.config else AttackConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _parse_values(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad --values list {text!r}: {exc}") from exc


def cmd_attack(args) -> int:
    scene = load_scene(_require(args.scene))
    config = _load_attack_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    print(f"seed: {config.seed}")
    print(f"scene: {scene.name or args.scene} label={scene.label}")

    with connect_oracle(args.oracle, timeout=args.timeout) as oracle:
        result = run_attack(scene, oracle, config)
        adv = adversarial_cloud(scene, result.best.points, config)

    (out_dir / "result.json").write_text(
        json.dumps(result.to_json_dict(), indent=2) + "\n"
    )
    save_kitti_bin(adv, out_dir / "adv.bin")
    save_kitti_bin(result.best.as_cloud(), out_dir / "perturbation.bin")
    export_stl(
        build_perturbation_mesh(result.best.points, config.mesh_radius),
        out_dir / "perturbation.stl",
    )

    print(f"verdict: {result.verdict.case.value} (score {result.verdict.score_s:.3f})")
    print(f"oracle calls: {result.oracle_calls}, generations: {result.generations_run}")
    print(f"wall time: {result.wall_time_s:.1f} s", file=sys.stderr)
    if result.success:
        return EXIT_OK
    return EXIT_BUDGET if result.budget_exhausted else EXIT_NO_SUCCESS


def cmd_scan(args) -> int:
    mesh = load_stl(_require(args.mesh))
    config = (
        load_scan_config(_require(args.scan_config))
        if args.scan_config
        else default_scan_config()
    )
    t0 = time.perf_counter()
    cloud = simulate_scan(mesh, config)
    save_kitti_bin(cloud, args.out)
    print(f"{len(cloud)} returns from {mesh.num_faces} faces -> {args.out}")
    print(f"scan time: {time.perf_counter() - t0:.2f} s", file=sys.stderr)
    return EXIT_OK


def cmd_sweep(args) -> int:
    scene = load_scene(_require(args.scene))
    points, _ = load_result_points(_require(args.result))
    config = _load_attack_config(args)
    values = _parse_values(args.values)
    seed = args.seed if args.seed is not None else 0
    print(f"seed: {seed}")

    with connect_oracle(args.oracle, timeout=args.timeout) as oracle:
        if args.kind == "distance":
            report = sweep_distance(points, scene, oracle, values, config, args.trials)
        elif args.kind == "angle":
            report = sweep_angle(points, scene, oracle, values, config, args.trials)
        else:
            report = sweep_srs(
                points, scene, oracle, [int(v) for v in values],
                config, args.trials, seed,
            )

    stem = Path(args.out) if args.out else Path(f"sweep_{args.kind}")
    written = report.write(stem, plot_data=args.plot_data)
    sys.stdout.write(report.to_csv())
    print(f"wrote {', '.join(str(p) for p in written)}", file=sys.stderr)
    return EXIT_OK


def cmd_defend(args) -> int:
    cloud = load_kitti_bin(_require(args.input))
    if (args.remove_count is None) == (args.remove_fraction is None):
        raise ConfigError("give exactly one of --remove-count/--remove-fraction")
    cfg = SrsConfig(
        remove_count=args.remove_count,
        remove_fraction=args.remove_fraction,
        seed=args.seed if args.seed is not None else 0,
    )
    print(f"seed: {cfg.seed}")
    filtered = srs_filter(cloud, cfg)
    save_kitti_bin(filtered, args.out)
    print(f"{len(cloud)} -> {len(filtered)} points ({len(cloud) - len(filtered)} removed)")
    return EXIT_OK


def cmd_emit_dataset(args) -> int:
    scene_paths = [s for s in args.scenes.split(",") if s.strip()]
    result_paths = [s for s in args.results.split(",") if s.strip()]
    scenes = [load_scene(_require(p)) for p in scene_paths]
    results = []
    for p in result_paths:
        pts, _ = load_result_points(_require(p))
        results.append(SimpleNamespace(best=SimpleNamespace(points=pts)))
    config = _load_attack_config(args) if args.config else None
    manifest = emit_adv_training_set(scenes, results, args.mix, args.out, config)
    kinds = [e["kind"] for e in manifest["entries"]]
    print(
        f"wrote {len(kinds)} files ({kinds.count('clean')} clean, "
        f"{kinds.count('adversarial')} adversarial) to {args.out}"
    )
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    if args.structural:
        mismatches = check_structural(args.oracle, timeout=args.timeout)
    else:
        transcript = Path(args.transcript) if args.transcript else None
        mismatches = check_conformance(args.oracle, transcript, timeout=args.timeout)
    if mismatches:
        for line in mismatches:
            print(f"MISMATCH {line}", file=sys.stderr)
        print(f"conformance: FAIL ({len(mismatches)} mismatches)")
        return EXIT_TRANSPORT
    print("conformance: ok")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advlidar",
        description="Black-box adversarial perturbation search for LiDAR object detection.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attack", help="run the full optimizer against one scene")
    p.add_argument("--scene", required=True, help="scene JSON file")
    p.add_argument("--config", help="attack config JSON/TOML (defaults otherwise)")
    p.add_argument("--oracle", default="builtin:voxel0.2",
                   help="builtin:<name> | exec:<command> | tcp:<host>:<port>")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--timeout", type=float, default=5.0)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("scan", help="simulate a LiDAR scan of an STL mesh")
    p.add_argument("--mesh", required=True, help="binary STL file")
    p.add_argument("--scan-config", dest="scan_config", help="scanner geometry JSON")
    p.add_argument("--out", required=True, help="output .bin cloud")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("sweep", help="robustness sweep of a found perturbation")
    p.add_argument("kind", choices=("distance", "angle", "srs"))
    p.add_argument("--scene", required=True)
    p.add_argument("--result", required=True, help="result.json from an attack run")
    p.add_argument("--oracle", default="builtin:voxel0.2")
    p.add_argument("--values", required=True,
                   help="comma-separated grid (meters / degrees / removal counts)")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--config", help="attack config (scan geometry, mesh radius)")
    p.add_argument("--out", help="report stem (default sweep_<kind>)")
    p.add_argument("--plot-data", dest="plot_data", action="store_true",
                   help="also write <stem>_plot.json x/y series")
    p.add_argument("--seed", type=int, help="srs removal seed")
    p.add_argument("--timeout", type=float, default=5.0)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("defend", help="random point-removal filter on a .bin cloud")
    p.add_argument("--input", required=True, help="input .bin cloud")
    p.add_argument("--out", required=True, help="filtered .bin cloud")
    p.add_argument("--remove-count", dest="remove_count", type=int)
    p.add_argument("--remove-fraction", dest="remove_fraction", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("emit-dataset", help="write a mixed clean/adversarial dataset")
    p.add_argument("--scenes", required=True, help="comma-separated scene JSON files")
    p.add_argument("--results", required=True, help="comma-separated result.json files")
    p.add_argument("--mix", type=float, required=True,
                   help="fraction of scenes that also emit an adversarial cloud")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="attack config (scan geometry, mesh radius)")
    p.set_defaults(func=cmd_emit_dataset)

    p = sub.add_parser("oracle-check", help="check an external oracle's protocol conformance")
    p.add_argument("--oracle", required=True, help="exec:<command> | tcp:<host>:<port>")
    p.add_argument("--transcript", help="NDJSON transcript (default: shipped golden)")
    p.add_argument("--structural", action="store_true",
                   help="live handshake/detect probe instead of transcript replay")
    p.add_argument("--timeout", type=float, default=5.0)
    p.set_defaults(func=cmd_oracle_check)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, MalformedFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TransportError, ProtocolError) as exc:
        print(f"oracle error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except BudgetExhaustedError as exc:
        print(f"budget error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
