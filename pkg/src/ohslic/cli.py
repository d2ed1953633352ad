"""Command-line entry point: dataset generation, training, streaming runs,
and benchmarking.

Commands share one JSON config file (flat sections: scene, gen, ohslic,
train, controller, bench); unknown keys are rejected.  Every artifact embeds
the sha256 hash of the merged config that produced it.  Exit codes: 0 ok,
2 config error, 3 data error.  Set OHSLIC_LOG_LEVEL for verbosity.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from copy import deepcopy
from pathlib import Path

import numpy as np

from ohslic import classifier, evaluate, plots
from ohslic.classifier import TrainConfig, build_training_set, load_model, save_model, train
from ohslic.clustering import OhslicConfig, cluster_snapshot, init_clusters, process_line
from ohslic.control import ClusterController, ControllerConfig
from ohslic.hsdata import BandGrid, CubeFormatError, LabeledCube, read_cube, write_cube
from ohslic.synthgen import GENERATOR_VERSION, SceneConfig, SceneError, generate_scene, render_fake_rgb

log = logging.getLogger(__name__)

SEED_STRIDE = 1_000_000  # per-cube seed = base_seed * stride + index


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


DEFAULT_CONFIG: dict = {
    "scene": {
        "width": 256,
        "height": 256,
        "tree_count": [3, 7],
        "tree_diameter_mean": 50.0,
        "soil_archetype": None,
        "noise_sigma": 0.01,
        "grid": {"type": "uniform", "start": 400.0, "stop": 1700.0, "count": 64},
    },
    "gen": {"count": 28, "base_seed": 7, "train_fraction": 0.3},
    "ohslic": {
        "k_init": 40,
        "w_spatial": 40.0,
        "w_spectral": 10.0,
        "confidence_threshold": 0.7,
        "update_stride": 1,
        "centroid_decay": 0.3,
        "window_factor": 2.0,
        "confidence_feedback": True,
        "distance_form": "additive",
        "stale_line_limit": 5,
    },
    "train": {
        "learning_rate": 1e-3,
        "batch_size": 64,
        "epochs": 40,
        "val_fraction": 0.1,
        "rng_seed": 0,
        "conv_channels": [8, 16, 32],
        "kernel_size": 5,
        "seg_hidden": 32,
        "reg_hidden": 16,
        "group_size_range": [5, 50],
        "samples_per_cube": 200,
    },
    "controller": {
        "t_lo": 8.0,
        "t_hi": 12.0,
        "hard_limit": 20.0,
        "k_min": 8,
        "k_max": 200,
        "step": 2.0,
        "ema_beta": 0.2,
        "history_len": 100000,
    },
    "bench": {
        "methods": ["PC", "APC", "OHSLIC-C", "OHSLIC-C-C"],
        "k_sweep": [5, 10, 20, 40, 80, 160],
    },
}

PRESETS: dict[str, dict] = {
    "desk": {},  # the defaults above are the desk-scale setup
    "full-scale": {
        "scene": {
            "width": 1024,
            "height": 1024,
            "tree_count": [8, 15],
            "grid": {"type": "two_camera"},
        },
        "gen": {"count": 180},
    },
}


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = deepcopy(base)
    for key, value in update.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and key != "grid":
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a mapping")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path: str | None = None, preset: str | None = None, seed: int | None = None) -> dict:
    cfg = deepcopy(DEFAULT_CONFIG)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset: {preset!r} (have {sorted(PRESETS)})")
        cfg = _merge(cfg, PRESETS[preset])
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        cfg = _merge(cfg, raw)
    if seed is not None:
        cfg["gen"]["base_seed"] = int(seed)
        cfg["train"]["rng_seed"] = int(seed)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def resolve_grid(spec: dict) -> BandGrid:
    kind = spec.get("type", "uniform")
    if kind == "two_camera":
        return BandGrid.two_camera()
    if kind == "uniform":
        return BandGrid.uniform(spec.get("start", 400.0), spec.get("stop", 1700.0), spec.get("count", 64))
    raise ConfigError(f"unknown grid type: {kind!r}")


def scene_config(cfg: dict, rng_seed: int) -> SceneConfig:
    s = cfg["scene"]
    try:
        return SceneConfig(
            width=s["width"],
            height=s["height"],
            tree_count=tuple(s["tree_count"]),
            tree_diameter_mean=s["tree_diameter_mean"],
            soil_archetype=s["soil_archetype"],
            noise_sigma=s["noise_sigma"],
            rng_seed=rng_seed,
            grid=resolve_grid(s["grid"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def ohslic_config(cfg: dict) -> OhslicConfig:
    try:
        return OhslicConfig(**cfg["ohslic"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def controller_config(cfg: dict) -> ControllerConfig:
    try:
        return ControllerConfig(**cfg["controller"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dataset_hash(cube_hashes: list[str]) -> str:
    return hashlib.sha256(" ".join(sorted(cube_hashes)).encode()).hexdigest()[:16]


def cmd_gen(cfg: dict, out_dir: Path, plan_only: bool = False, force: bool = False) -> Path:
    """Generate the configured cube set; resumable via per-file hashes."""
    out_dir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    count = int(cfg["gen"]["count"])
    base_seed = int(cfg["gen"]["base_seed"])
    train_count = max(1, int(round(count * float(cfg["gen"]["train_fraction"]))))

    manifest_path = out_dir / "manifest.json"
    previous: dict[str, dict] = {}
    if manifest_path.exists():
        try:
            old = json.loads(manifest_path.read_text())
            if old.get("config_hash") == chash:
                previous = {e["file"]: e for e in old.get("cubes", [])}
        except (json.JSONDecodeError, KeyError):
            log.warning("ignoring unreadable manifest at %s", manifest_path)

    entries = []
    for i in range(count):
        name = f"cube_{i:04d}.ohc"
        seed = base_seed * SEED_STRIDE + i
        scfg = scene_config(cfg, seed)
        entry = {
            "file": name,
            "seed": seed,
            "width": scfg.width,
            "height": scfg.height,
            "bands": scfg.grid.count,
            "sha256": None,
        }
        path = out_dir / name
        if not plan_only:
            prior = previous.get(name)
            if (
                not force
                and prior
                and prior.get("sha256")
                and path.exists()
                and _sha256_file(path) == prior["sha256"]
            ):
                entry["sha256"] = prior["sha256"]
                log.info("gen: %s up to date, skipped", name)
            else:
                cube = generate_scene(scfg)
                cube.meta["config_hash"] = chash
                write_cube(cube, path)
                entry["sha256"] = _sha256_file(path)
                log.info("gen: wrote %s", name)
        entries.append(entry)

    manifest = {
        "config_hash": chash,
        "generator_version": GENERATOR_VERSION,
        "train_count": train_count,
        "dataset_hash": None
        if plan_only
        else _dataset_hash([e["sha256"] for e in entries]),
        "cubes": entries,
    }
    new_text = json.dumps(manifest, indent=2)
    if not (manifest_path.exists() and manifest_path.read_text() == new_text):
        manifest_path.write_text(new_text)
    return manifest_path


def _read_manifest(dataset_dir: Path) -> dict:
    manifest_path = dataset_dir / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json in {dataset_dir}")
    try:
        return json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"unreadable manifest: {exc}") from exc


def _load_cubes(dataset_dir: Path, entries: list[dict]) -> list[LabeledCube]:
    cubes = []
    for e in entries:
        path = dataset_dir / e["file"]
        if not path.exists():
            raise DataError(f"dataset cube missing: {path}")
        cubes.append(read_cube(path))
    return cubes


def cmd_train(cfg: dict, dataset_dir: Path, out_dir: Path) -> Path:
    """Train the classifier on the dataset's training split."""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _read_manifest(dataset_dir)
    train_entries = manifest["cubes"][: manifest["train_count"]]
    cubes = _load_cubes(dataset_dir, train_entries)

    t = cfg["train"]
    rng = np.random.default_rng(int(t["rng_seed"]))
    dataset = build_training_set(
        cubes,
        group_size_range=tuple(t["group_size_range"]),
        samples_per_cube=int(t["samples_per_cube"]),
        rng=rng,
    )
    tcfg = TrainConfig(
        learning_rate=t["learning_rate"],
        batch_size=t["batch_size"],
        epochs=t["epochs"],
        val_fraction=t["val_fraction"],
        rng_seed=t["rng_seed"],
        conv_channels=tuple(t["conv_channels"]),
        kernel_size=t["kernel_size"],
        seg_hidden=t["seg_hidden"],
        reg_hidden=t["reg_hidden"],
    )
    model = train(dataset, tcfg)
    model.dataset_hash = manifest.get("dataset_hash")
    model.config_hash = config_hash(cfg)

    bundle = out_dir / "model.ohm"
    save_model(model, bundle)
    with open(out_dir / "training_log.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        fh.write(f"# config_hash={model.config_hash}\n")
        writer.writerow(["epoch", "seg_loss", "reg_loss", "total_loss"])
        for row in model.training_log:
            writer.writerow([row["epoch"], row["seg_loss"], row["reg_loss"], row["total_loss"]])
    log.info("train: wrote %s", bundle)
    return bundle


def cmd_run(
    cfg: dict,
    model_path: Path,
    cube_path: Path,
    out_dir: Path,
    adaptive: bool = False,
    feedback: bool | None = None,
    debug_clusters: bool = False,
) -> Path:
    """Stream one cube through the pipeline; write outputs and figures."""
    out_dir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    try:
        model = load_model(model_path)
    except FileNotFoundError as exc:
        raise DataError(f"model bundle missing: {model_path}") from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if not cube_path.exists():
        raise DataError(f"input cube missing: {cube_path}")
    cube = read_cube(cube_path)
    if cube.bands != model.spec.bands:
        raise DataError(
            f"band mismatch: cube has {cube.bands}, model expects {model.spec.bands}"
        )

    ocfg = ohslic_config(cfg)
    if feedback is not None:
        kwargs = {k: getattr(ocfg, k) for k in vars(ocfg)}
        kwargs["confidence_feedback"] = feedback
        ocfg = OhslicConfig(**kwargs)
    controller = None
    if adaptive:
        controller = ClusterController(controller_config(cfg), k_init=ocfg.k_init)

    state = init_clusters(ocfg, cube.width, cube.line(0))
    outputs = np.zeros((cube.height, cube.width, 3))
    rows = []
    debug_fh = open(out_dir / "clusters.jsonl", "w") if debug_clusters else None
    try:
        for row in range(cube.height):
            res = process_line(
                state,
                cube.line(row),
                ocfg,
                model,
                controller=controller,
                k_target=None if adaptive else ocfg.k_init,
            )
            outputs[row] = res.output
            rows.append((row, res.elapsed_ms, res.k_after))
            if debug_fh:
                debug_fh.write(json.dumps({"line": row, "clusters": cluster_snapshot(state)}) + "\n")
    finally:
        if debug_fh:
            debug_fh.close()

    out_cube = LabeledCube(
        data=outputs.astype(np.float32),
        kind="features",
        meta={"config_hash": chash, "source": str(cube_path)},
    )
    write_cube(out_cube, out_dir / "output.ohc")
    with open(out_dir / "lines.csv", "w", newline="") as fh:
        fh.write(f"# config_hash={chash}\n")
        writer = csv.writer(fh)
        writer.writerow(["line", "ms", "k"])
        writer.writerows(rows)
    if controller is not None:
        controller.export_csv(out_dir / "controller.csv")
        ccfg = controller_config(cfg)
        plots.save_controller_trace(
            list(controller.history), ccfg.t_lo, ccfg.t_hi, out_dir / "controller.png"
        )
    try:
        plots.save_rgb_png(render_fake_rgb(cube), out_dir / "fake_rgb.png")
    except ValueError:
        log.info("run: grid does not cover the visible range, skipping fake RGB")
    plots.save_pigment_heatmaps(outputs, out_dir)
    log.info("run: wrote outputs to %s", out_dir)
    return out_dir / "output.ohc"


def cmd_bench(cfg: dict, model_path: Path, dataset_dir: Path, out_dir: Path, force: bool = False) -> Path:
    """Benchmark all configured methods on the dataset's held-out split."""
    out_dir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    manifest = _read_manifest(dataset_dir)
    try:
        model = load_model(model_path)
    except FileNotFoundError as exc:
        raise DataError(f"model bundle missing: {model_path}") from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc

    if model.dataset_hash and manifest.get("dataset_hash") != model.dataset_hash:
        if not force:
            raise DataError(
                "model was trained on a different dataset "
                f"(bundle {model.dataset_hash}, manifest {manifest.get('dataset_hash')}); "
                "pass --force to benchmark anyway"
            )
        log.warning("bench: dataset hash mismatch overridden by --force")

    holdout = manifest["cubes"][manifest["train_count"] :]
    if not holdout:
        raise DataError("dataset has no held-out cubes beyond the training split")
    cubes = _load_cubes(dataset_dir, holdout)

    report = evaluate.benchmark(
        cubes,
        model,
        ohslic_config(cfg),
        methods=tuple(cfg["bench"]["methods"]),
        k_sweep=tuple(cfg["bench"]["k_sweep"]),
        dataset_hash=manifest.get("dataset_hash"),
        config_snapshot={"config_hash": chash, "config": cfg},
    )
    (out_dir / "report.json").write_text(report.to_json())
    (out_dir / "report.txt").write_text(report.to_text() + "\n")
    with open(out_dir / "time_vs_k.csv", "w", newline="") as fh:
        fh.write(f"# config_hash={chash}\n")
        writer = csv.writer(fh)
        writer.writerow(["k", "mean_ms", "std_ms"])
        for s in report.sweep:
            writer.writerow([s["k"], s["mean_ms"], s["std_ms"]])
    with open(out_dir / "quality_vs_k.csv", "w", newline="") as fh:
        fh.write(f"# config_hash={chash}\n")
        writer = csv.writer(fh)
        writer.writerow(["k", "r2_mean", "r2_ab", "r2_ar", "r2_ant", "dice_background"])
        for s in report.sweep:
            writer.writerow(
                [s["k"], s["r2_mean"], s["r2_ab"], s["r2_ar"], s["r2_ant"], s["dice_background"]]
            )
    if report.sweep:
        plots.save_time_vs_k(report.sweep, out_dir / "time_vs_k.png")
        plots.save_quality_vs_k(report.sweep, out_dir / "quality_vs_k.png")
    log.info("bench:\n%s", report.to_text())
    return out_dir / "report.json"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ohslic", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument("--preset", choices=sorted(PRESETS), default=None)
        p.add_argument("--seed", type=int, default=None, help="override gen/train seeds")
        p.add_argument("--out", type=Path, required=True, help="output directory")

    p_gen = sub.add_parser("gen", help="generate a labeled dataset")
    common(p_gen)
    p_gen.add_argument("--plan-only", action="store_true", help="write the manifest without cubes")
    p_gen.add_argument("--force", action="store_true", help="regenerate existing cubes")

    p_train = sub.add_parser("train", help="train the classifier")
    common(p_train)
    p_train.add_argument("--dataset", type=Path, required=True)

    p_run = sub.add_parser("run", help="stream one cube through the pipeline")
    common(p_run)
    p_run.add_argument("--model", type=Path, required=True)
    p_run.add_argument("--cube", type=Path, required=True)
    p_run.add_argument("--adaptive", action="store_true", help="enable the cluster controller")
    p_run.add_argument("--feedback", choices=["on", "off"], default=None)
    p_run.add_argument("--debug-clusters", action="store_true")

    p_bench = sub.add_parser("bench", help="benchmark methods on the held-out split")
    common(p_bench)
    p_bench.add_argument("--model", type=Path, required=True)
    p_bench.add_argument("--dataset", type=Path, required=True)
    p_bench.add_argument("--force", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("OHSLIC_LOG_LEVEL", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.preset, args.seed)
        if args.command == "gen":
            cmd_gen(cfg, args.out, plan_only=args.plan_only, force=args.force)
        elif args.command == "train":
            cmd_train(cfg, args.dataset, args.out)
        elif args.command == "run":
            feedback = None if args.feedback is None else args.feedback == "on"
            cmd_run(
                cfg,
                args.model,
                args.cube,
                args.out,
                adaptive=args.adaptive,
                feedback=feedback,
                debug_clusters=args.debug_clusters,
            )
        elif args.command == "bench":
            cmd_bench(cfg, args.model, args.dataset, args.out, force=args.force)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CubeFormatError, SceneError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
