"""Command-line pipeline: gen-scene, calibrate, subsample, train, finetune, infer, eval, report.

Every subcommand reads an optional JSON config; command-line flags override
it. Each run writes ``manifest.json`` into its output directory recording the
config hash, the seed and the artifacts produced. On failure any artifact
created by the run is removed.

Exit codes: 0 success, 1 runtime error, 2 usage error or missing input.
"""
from __future__ import annotations

import argparse
import glob
import hashlib
import json
import os
import sys
from typing import List, Optional

import numpy as np

from .errors import HDVError

DATA_ENV = "HDVNET_DATA"


class MissingArtifact(Exception):
    pass


class Run:
    """Effective settings of one invocation plus the files it produced."""

    def __init__(self, args, config: dict):
        self.args = args
        self.config = config
        self.seed = int(_pick(args.seed, config.get("seed"), 0))
        self.threads = int(_pick(args.threads, config.get("threads"), 1))
        self.out = _pick(args.out, config.get("out"), ".")
        effective = dict(config, seed=self.seed, command=args.command)
        self.config_hash = hashlib.sha256(
            json.dumps(effective, sort_keys=True, default=str).encode()).hexdigest()[:16]
        self.created: List[str] = []

    @property
    def stamp(self) -> dict:
        return {"config_hash": self.config_hash, "seed": self.seed}

    def path(self, name: str) -> str:
        os.makedirs(self.out, exist_ok=True)
        p = os.path.join(self.out, name)
        self.created.append(p)
        return p

    def write_text(self, name: str, text: str) -> str:
        p = self.path(name)
        with open(p, "w") as fh:
            fh.write(text)
        return p

    def write_json(self, name: str, obj: dict) -> str:
        return self.write_text(name, json.dumps(dict(obj, **self.stamp), indent=2, sort_keys=True))

    def finish(self):
        manifest = {"command": self.args.command, **self.stamp,
                    "artifacts": [os.path.basename(p) for p in self.created]}
        os.makedirs(self.out, exist_ok=True)
        with open(os.path.join(self.out, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)

    def rollback(self):
        for p in self.created:
            if os.path.exists(p):
                os.remove(p)


def _pick(*values):
    for v in values:
        if v is not None:
            return v
    return None


def _need(path: Optional[str], what: str) -> str:
    if not path:
        raise MissingArtifact(f"missing {what}: none given")
    if not os.path.exists(path):
        raise MissingArtifact(f"missing {what}: {path} does not exist")
    return path


def _inputs(run: Run, key="data") -> List[str]:
    paths = list(run.args.inputs or []) or list(run.config.get(key) or [])
    if not paths and os.environ.get(DATA_ENV):
        root = os.environ[DATA_ENV]
        paths = sorted(glob.glob(os.path.join(root, "*.ply")) + glob.glob(os.path.join(root, "*.csv")))
    if not paths:
        raise MissingArtifact(f"missing input clouds (pass paths, set '{key}' or ${DATA_ENV})")
    return [_need(p, "input cloud") for p in paths]


def _model_config(run: Run):
    from .model import HdvConfig

    return HdvConfig.from_dict(run.config.get("model", {}))


def _train_config(run: Run, section="train"):
    from .train import TrainConfig

    d = dict(run.config.get(section, {}))
    d["seed"] = run.seed
    return TrainConfig(**d)


def _thresholds(run: Run):
    from .density import StateThresholds

    return StateThresholds.load(_need(_pick(run.args.thresholds, run.config.get("thresholds")),
                                      "thresholds file"))


def _scenes(run: Run, thresholds):
    from .pcio import load_cloud
    from .train import Scene

    return [Scene.build(load_cloud(p), thresholds, preprocess=True) for p in _inputs(run)]


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_gen_scene(run: Run):
    from .pcio import save_cloud
    from .scene import SceneSpec, generate_scene, mine_scene_spec

    count = int(_pick(run.args.count, run.config.get("scene_count"), 1))
    spec_path = _pick(run.args.spec, run.config.get("scene_spec"))
    fmt = run.args.format or "ply_binary"
    ext = "csv" if fmt == "csv" else "ply"
    for i in range(count):
        seed = run.seed + i
        spec = SceneSpec.load(_need(spec_path, "scene spec")) if spec_path else mine_scene_spec(seed)
        cloud = generate_scene(spec, seed=seed, source_id=f"scene_{i:03d}")
        cloud.extra["config_hash"] = run.config_hash
        save_cloud(cloud, run.path(f"scene_{i:03d}.{ext}"), format=fmt)
        run.write_text(f"scene_{i:03d}.spec.json", spec.to_json())


def cmd_calibrate(run: Run):
    from .density import calibrate_states, density_profile
    from .pcio import load_cloud

    cfg = _model_config(run)
    profiles = [density_profile(load_cloud(p), k=cfg.k_neighbors, jitter=True) for p in _inputs(run)]
    fractions = np.asarray(cfg.counts, dtype=np.float64) / cfg.counts[0]
    th = calibrate_states(profiles, fractions)
    run.write_json("thresholds.json", json.loads(th.to_json()))


def cmd_subsample(run: Run):
    from .density import density_profile
    from .pcio import load_cloud, save_cloud
    from .subsample import lidar_grid_subsample, random_subsample

    fmt = run.args.format or "ply_binary"
    ext = "csv" if fmt == "csv" else "ply"
    summary = []
    for p in _inputs(run):
        cloud = load_cloud(p)
        target = run.args.target_count
        if cloud.has_metadata:
            prof = density_profile(cloud, jitter=True)
            kw = {"target_count": target} if target is not None else {"target_group": run.args.target_group}
            if not any(v is not None for v in kw.values()):
                raise MissingArtifact("missing --target-count or --target-group")
            keep = lidar_grid_subsample(cloud.rows, cloud.cols, prof.group, rng=run.seed, **kw).indices
        else:
            if target is None:
                raise MissingArtifact("clouds without scan metadata need --target-count")
            keep = random_subsample(cloud.n, target, run.seed)
        stem = os.path.splitext(os.path.basename(p))[0]
        save_cloud(cloud.subset(keep), run.path(f"{stem}_sub.{ext}"), format=fmt)
        run.write_text(f"{stem}_kept.txt", "".join(f"{int(i)}\n" for i in keep))
        summary.append({"input": p, "n_in": cloud.n, "n_kept": int(len(keep)),
                        "lidar_grid": cloud.has_metadata})
    run.write_json("subsample_summary.json", {"clouds": summary})


def cmd_train(run: Run):
    from .model import HDVNet
    from .train import train_backbone

    th = _thresholds(run)
    scenes = _scenes(run, th)
    model = HDVNet(_model_config(run), seed=run.seed)
    train_backbone(model, scenes, _train_config(run), log_path=run.path("train_log.jsonl"))
    digest = model.save(run.path("backbone.ckpt"), {**run.stamp, "thresholds": th.t.tolist()})
    run.write_json("backbone.ckpt.json", {"sha256": digest})


def cmd_finetune(run: Run):
    from .model import HDVNet
    from .train import finetune_final

    th = _thresholds(run)
    scenes = _scenes(run, th)
    if run.args.fco:
        model = HDVNet(_model_config(run), seed=run.seed)
    else:
        model = HDVNet.load(_need(_pick(run.args.checkpoint, run.config.get("checkpoint")),
                                  "backbone checkpoint"))
    finetune_final(model, scenes, _train_config(run, "finetune"),
                   log_path=run.path("finetune_log.jsonl"), fco=run.args.fco)
    digest = model.save(run.path("final.ckpt"), {**run.stamp, "thresholds": th.t.tolist()})
    run.write_json("final.ckpt.json", {"sha256": digest})


def cmd_infer(run: Run):
    from .infer import infer_cloud
    from .model import HDVNet
    from .pcio import export_colored, load_cloud

    model = HDVNet.load(_need(_pick(run.args.checkpoint, run.config.get("checkpoint")), "checkpoint"))
    th = _thresholds(run)
    mode = run.args.mode or ("final" if "finetune" in model.stages or "fco" in model.stages else "tco")
    for p in _inputs(run):
        cloud = load_cloud(p)
        pred, _ = infer_cloud(model, cloud, th, seed=run.seed, mode=mode, threads=run.threads)
        stem = os.path.splitext(os.path.basename(p))[0]
        export_colored(cloud, pred, run.path(f"{stem}_pred.ply"))
        run.write_text(f"{stem}_pred.txt", "".join(f"{int(v)}\n" for v in pred))


def read_labels(path) -> np.ndarray:
    with open(path) as fh:
        return np.array([int(line) for line in fh if line.strip()], dtype=np.int64)


def cmd_eval(run: Run):
    from .density import density_profile
    from .metrics import per_density_report
    from .pcio import load_cloud

    pred_path = _need(run.args.predictions, "predictions file")
    th = _thresholds(run)
    clouds = _inputs(run)
    if len(clouds) != 1:
        raise MissingArtifact("eval takes exactly one labelled cloud")
    cloud = load_cloud(clouds[0])
    if cloud.labels is None:
        raise MissingArtifact(f"missing labels in {clouds[0]}")
    pred = read_labels(pred_path)
    prof = density_profile(cloud, k=th.k_used, jitter=True, delta_max=th.delta_max)
    table = per_density_report(pred, cloud.labels, prof.rho, th, cloud.class_count)
    name = run.args.name or "model"
    run.write_text("metrics.csv", f"# config_hash={run.config_hash},seed={run.seed}\n" + table.to_csv(name))
    run.write_text("metrics.md", table.to_markdown(name))
    run.write_json("metrics.json", {"name": name, "miou": table.miou, "proportion": table.proportion,
                                    "counts": table.counts, "class_count": table.class_count,
                                    "class_iou": {c: {str(k): v for k, v in d.items()}
                                                  for c, d in table.class_iou.items()},
                                    "absent": table.absent})


def cmd_report(run: Run):
    from .density import DEFAULT_DELTA_MAX, density_histogram, density_profile
    from .metrics import MetricsTable, render_markdown
    from .pcio import load_cloud

    tables = {}
    for p in run.args.metrics or []:
        with open(_need(p, "metrics file")) as fh:
            d = json.load(fh)
        tables[d["name"] if d["name"] not in tables else p] = MetricsTable(
            miou=d["miou"], proportion=d["proportion"], counts=d["counts"],
            class_count=d["class_count"], absent=d.get("absent", {}),
            class_iou={c: {int(k): v for k, v in m.items()} for c, m in d["class_iou"].items()})
    try:
        clouds = _inputs(run)
    except MissingArtifact:
        if not tables:
            raise MissingArtifact("missing metrics files (--metrics) or clouds for a histogram")
        clouds = []
    if tables:
        run.write_text("report.md", render_markdown(tables))
    if clouds:
        groups = np.concatenate([density_profile(load_cloud(p), jitter=True).group for p in clouds])
        hist = density_histogram(groups, DEFAULT_DELTA_MAX)
        lines = [f"# config_hash={run.config_hash},seed={run.seed}", "group,percent"]
        lines += [f"{g},{v:.6f}" for g, v in enumerate(hist)]
        run.write_text("density_histogram.csv", "\n".join(lines) + "\n")


COMMANDS = {
    "gen-scene": cmd_gen_scene, "calibrate": cmd_calibrate, "subsample": cmd_subsample,
    "train": cmd_train, "finetune": cmd_finetune, "infer": cmd_infer, "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--checkpoint")
    common.add_argument("--format", choices=("ply_binary", "ply_ascii", "csv"))
    common.add_argument("--thresholds", help="thresholds sidecar from `calibrate`")
    common.add_argument("inputs", nargs="*", help="input clouds")

    parser = argparse.ArgumentParser(prog="hdvnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen-scene", parents=[common])
    p.add_argument("--count", type=int)
    p.add_argument("--spec", help="SceneSpec JSON; default is a random mine-like pit")
    sub.add_parser("calibrate", parents=[common])
    p = sub.add_parser("subsample", parents=[common])
    p.add_argument("--target-count", type=int)
    p.add_argument("--target-group", type=int)
    sub.add_parser("train", parents=[common])
    p = sub.add_parser("finetune", parents=[common])
    p.add_argument("--fco", action="store_true", help="train the final classifier from scratch")
    p = sub.add_parser("infer", parents=[common])
    p.add_argument("--mode", choices=("final", "tco"))
    p = sub.add_parser("eval", parents=[common])
    p.add_argument("--predictions")
    p.add_argument("--name")
    p = sub.add_parser("report", parents=[common])
    p.add_argument("--metrics", nargs="+")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    config = {}
    if args.config:
        try:
            with open(args.config) as fh:
                config = json.load(fh)
        except OSError:
            print(f"error: missing config file: {args.config}", file=sys.stderr)
            return 2
    run = Run(args, config)
    try:
        COMMANDS[args.command](run)
    except MissingArtifact as exc:
        run.rollback()
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (HDVError, ValueError, OSError) as exc:
        run.rollback()
        print(json.dumps({"error": type(exc).__name__, "message": str(exc),
                          "command": args.command}), file=sys.stderr)
        return 1
    run.finish()
    return 0


if __name__ == "__main__":
    sys.exit(main())
