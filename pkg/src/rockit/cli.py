"""Command-line entry point: gen | train | eval-match | eval-pose | ablate | viz | config.

Every command is driven by a JSON config merged over the full defaults
(``rockit config --dump-defaults`` prints the schema).  Each run writes a
resolved-config snapshot next to its outputs, and all outputs are pure
functions of (config, seed): rerunning reproduces them byte for byte.

Exit codes: 0 success, 1 internal error, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluate, simscene, viz
from .losses import LossConfig
from .model import KeypointNet, ModelConfig
from .train import AugmentConfig, OptimizerConfig, train


class ConfigError(ValueError):
    """Bad user configuration (exit code 2)."""


def default_config():
    return {
        "seed": 0,
        "out": "runs/default",
        "dataset": {**dataclasses.asdict(simscene.DatasetConfig()), "seed": None,
                    "canvas": [64, 64]},
        "model": dataclasses.asdict(ModelConfig()),
        "loss": dataclasses.asdict(LossConfig()),
        "optimizer": dataclasses.asdict(OptimizerConfig()),
        "augment": dataclasses.asdict(AugmentConfig()),
        "train": {"dataset": None, "resume": None},
        "eval": {**dataclasses.asdict(evaluate.EvalConfig()), "dataset": None,
                 "checkpoint": None,
                 "mma_thresholds": list(evaluate.DEFAULT_MMA_THRESHOLDS),
                 "tasks": ["syn_real", "real_real"]},
        "pose": {**dataclasses.asdict(evaluate.PoseEvalConfig()), "dataset": None,
                 "checkpoint": None},
        "ablation": {
            "suite": "rthr",
            "rthr_values": [0.0, 1.5, 3.0, 4.5],
            "tau_values": [[0.07, 0.07], [0.07, 0.2], [0.2, 0.07], [0.2, 0.2]],
            "dim_values": [[32, 32], [64, 32], [32, 64], [64, 64]],
            "template_values": [12, 24, 48],
            "include_pose": False,
        },
        "viz": {"dataset": None, "checkpoint": None, "scene": 0, "pair": 0,
                "object_id": 1, "correct_px": 5.0},
    }


def _merge(base, override, path=""):
    out = dict(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, path + key + ".")
        else:
            out[key] = val
    return out


def load_config(path, seed=None, out=None):
    cfg = default_config()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            user = json.load(fh)
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, user)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    if cfg["dataset"].get("seed") is None:
        cfg["dataset"]["seed"] = cfg["seed"]
    return cfg


def write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def snapshot_config(cfg, out_dir):
    write_json(Path(out_dir) / "config.resolved.json", cfg)


def _dataset_cfg(cfg):
    d = dict(cfg["dataset"])
    d["canvas"] = tuple(d["canvas"])
    return simscene.DatasetConfig(**d)


def _load_checkpoint(path):
    if path is None:
        raise ConfigError("a checkpoint is required (config key or --checkpoint)")
    if not Path(path).exists():
        raise ConfigError(f"checkpoint not found: {path}")
    net, _, meta = KeypointNet.load(path)
    return net, meta


def _require_dataset(path, what):
    if path is None:
        raise ConfigError(f"{what} requires a dataset manifest path in the config")
    if not Path(path).exists():
        raise ConfigError(f"dataset manifest not found: {path}")
    return simscene.load_dataset(path)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg):
    out = Path(cfg["out"])
    snapshot_config(cfg, out)
    manifest = simscene.generate_dataset(_dataset_cfg(cfg), out)
    print(f"dataset written: {manifest}")
    print(f"manifest sha256: {simscene.manifest_hash(manifest)}")
    return 0


def cmd_train(cfg):
    out = Path(cfg["out"])
    snapshot_config(cfg, out)
    dataset = _require_dataset(cfg["train"]["dataset"], "train")
    result = train(
        dataset,
        ModelConfig.from_dict(cfg["model"]),
        LossConfig.from_dict(cfg["loss"]),
        OptimizerConfig.from_dict(cfg["optimizer"]),
        AugmentConfig.from_dict(cfg["augment"]),
        seed=cfg["seed"],
        out_dir=out,
        resume=cfg["train"]["resume"],
    )
    last = result.metrics[-1] if result.metrics else {}
    print(f"trained {result.steps} steps; checkpoint: {result.checkpoint_path}")
    if last:
        print(f"final loss_total: {last['loss_total']:.4f}")
    return 0


def _eval_config(cfg):
    section = {k: v for k, v in cfg["eval"].items() if k not in ("dataset", "checkpoint")}
    return evaluate.EvalConfig.from_dict(section)


def _format_match_table(report):
    lines = []
    for task, block in sorted(report["tasks"].items()):
        lines.append(f"[{task}]  ({report['n_pairs']} pairs)")
        header = f"{'object':>8} {'kpts':>8} " + " ".join(
            f"MMA{int(t) if float(t).is_integer() else t:>4}" for t in sorted(block["overall"]["mma"])
        )
        lines.append(header)
        for oid, row in sorted(block["per_object"].items()):
            vals = " ".join(f"{row['mma'][t]:7.3f}" for t in sorted(row["mma"]))
            lines.append(f"{oid:>8} {row['kpts']:8.1f} {vals}")
        vals = " ".join(f"{block['overall']['mma'][t]:7.3f}" for t in sorted(block["overall"]["mma"]))
        lines.append(f"{'ALL':>8} {block['overall']['kpts']:8.1f} {vals}")
        lines.append("")
    return "\n".join(lines)


def cmd_eval_match(cfg, checkpoint=None):
    out = Path(cfg["out"])
    snapshot_config(cfg, out)
    net, _ = _load_checkpoint(checkpoint or cfg["eval"]["checkpoint"])
    dataset = _require_dataset(cfg["eval"]["dataset"], "eval-match")
    report = evaluate.eval_match(net, dataset, _eval_config(cfg))
    write_json(out / "match_report.json", report)
    table = _format_match_table(report)
    (out / "match_report.txt").write_text(table, encoding="utf-8")
    print(table)
    return 0


def _pose_config(cfg):
    section = {k: v for k, v in cfg["pose"].items() if k not in ("dataset", "checkpoint")}
    return evaluate.PoseEvalConfig.from_dict(section)


def _format_pose_table(report):
    lines = [f"templates={report['config']['n_templates']} matcher={report['config']['matcher']}"]
    lines.append(f"{'object':>8} {'ADD':>7} {'ADD-S':>7} {'found':>7} {'n':>4}")
    for oid, row in sorted(report["per_object"].items()):
        lines.append(
            f"{oid:>8} {row['add_recall']:7.3f} {row['adds_recall']:7.3f} "
            f"{row['detection_rate']:7.3f} {row['n']:4d}"
        )
    o = report["overall"]
    lines.append(f"{'ALL':>8} {o['add_recall']:7.3f} {o['adds_recall']:7.3f} "
                 f"{o['detection_rate']:7.3f} {o['n']:4d}")
    a = report["absent"]
    lines.append(f"absent queries: {a['n']}, reported absent: {a['reported_absent_rate']:.3f}")
    return "\n".join(lines)


def cmd_eval_pose(cfg, checkpoint=None):
    out = Path(cfg["out"])
    snapshot_config(cfg, out)
    net, _ = _load_checkpoint(checkpoint or cfg["pose"]["checkpoint"])
    dataset = _require_dataset(cfg["pose"]["dataset"], "eval-pose")
    report = evaluate.eval_pose(net, dataset, _pose_config(cfg))
    write_json(out / "pose_report.json", report)
    table = _format_pose_table(report)
    (out / "pose_report.txt").write_text(table, encoding="utf-8")
    print(table)
    return 0


# ---------------------------------------------------------------------------
# ablation harness


def _train_variant(cfg, dataset, name, loss_overrides=None, model_overrides=None):
    loss_cfg = LossConfig.from_dict({**cfg["loss"], **(loss_overrides or {})})
    model_cfg = ModelConfig.from_dict({**cfg["model"], **(model_overrides or {})})
    out = Path(cfg["out"]) / "variants" / name
    result = train(
        dataset, model_cfg, loss_cfg,
        OptimizerConfig.from_dict(cfg["optimizer"]),
        AugmentConfig.from_dict(cfg["augment"]),
        seed=cfg["seed"], out_dir=out,
    )
    return result.net


def _eval_mma5(net, dataset, base_eval, **overrides):
    ecfg = dataclasses.replace(base_eval, **overrides)
    report = evaluate.eval_match(net, dataset, ecfg)
    row = {}
    for task, block in report["tasks"].items():
        row[f"{task}_kpts"] = round(block["overall"]["kpts"], 2)
        row[f"{task}_mma5"] = round(block["overall"]["mma"][5.0], 4)
    return row


def cmd_ablate(cfg, checkpoint=None):
    out = Path(cfg["out"])
    snapshot_config(cfg, out)
    suite = cfg["ablation"]["suite"]
    base_eval = _eval_config(cfg)
    rows = []

    if suite in ("rthr", "matching", "templates"):
        net, _ = _load_checkpoint(checkpoint or cfg["eval"]["checkpoint"])
    if suite in ("rthr", "matching"):
        dataset = _require_dataset(cfg["eval"]["dataset"], "ablate")

    if suite == "rthr":
        for r_thr in cfg["ablation"]["rthr_values"]:
            row = {"r_thr": r_thr}
            row.update(_eval_mma5(net, dataset, base_eval, r_thr=float(r_thr)))
            rows.append(row)
    elif suite == "matching":
        for method in ("direct", "objectness_filtered"):
            row = {"method": method}
            row.update(_eval_mma5(net, dataset, base_eval, method=method))
            rows.append(row)
    elif suite == "templates":
        dataset = _require_dataset(cfg["pose"]["dataset"], "ablate")
        for n in cfg["ablation"]["template_values"]:
            pcfg = dataclasses.replace(_pose_config(cfg), n_templates=int(n))
            report = evaluate.eval_pose(net, dataset, pcfg)
            rows.append({"n_templates": int(n),
                         "add_recall": round(report["overall"]["add_recall"], 4),
                         "adds_recall": round(report["overall"]["adds_recall"], 4)})
    elif suite == "tau":
        dataset = _require_dataset(cfg["train"]["dataset"], "ablate(train)")
        eval_ds = _require_dataset(cfg["eval"]["dataset"], "ablate(eval)")
        for tau_i, tau_c in cfg["ablation"]["tau_values"]:
            name = f"tau_{tau_i}_{tau_c}"
            net = _train_variant(cfg, dataset, name,
                                 loss_overrides={"tau_intra": tau_i, "tau_inter": tau_c})
            row = {"tau_intra": tau_i, "tau_inter": tau_c}
            row.update(_eval_mma5(net, eval_ds, base_eval))
            rows.append(row)
    elif suite == "dims":
        dataset = _require_dataset(cfg["train"]["dataset"], "ablate(train)")
        eval_ds = _require_dataset(cfg["eval"]["dataset"], "ablate(eval)")
        for c1, c2 in cfg["ablation"]["dim_values"]:
            name = f"dims_{c1}_{c2}"
            net = _train_variant(
                cfg, dataset, name,
                model_overrides={"c1_intra": int(c1), "c2_inter": int(c2),
                                 "feat_dim": int(c1) + int(c2)},
            )
            row = {"c1_intra": int(c1), "c2_inter": int(c2)}
            row.update(_eval_mma5(net, eval_ds, base_eval))
            rows.append(row)
    elif suite == "strategy":
        dataset = _require_dataset(cfg["train"]["dataset"], "ablate(train)")
        eval_ds = _require_dataset(cfg["eval"]["dataset"], "ablate(eval)")
        variants = [
            ("r2d2_like", {"neg_strategy": "random_all_pixels", "use_repeatability": False,
                           "use_decoupled": False, "use_semantic": False}),
            ("obj", {"use_repeatability": False, "use_decoupled": False,
                     "use_semantic": False}),
            ("obj_rep", {"use_decoupled": False, "use_semantic": False}),
            ("obj_rep_dec", {"use_semantic": False}),
            ("obj_rep_sem", {"use_decoupled": False}),
            ("full", {}),
        ]
        for name, overrides in variants:
            net = _train_variant(cfg, dataset, name, loss_overrides=overrides)
            loss_cfg = LossConfig.from_dict({**cfg["loss"], **overrides})
            row = {
                "variant": name,
                "neg": loss_cfg.neg_strategy,
                "rep": loss_cfg.use_repeatability,
                "dec": loss_cfg.use_decoupled,
                "sem": loss_cfg.use_semantic,
            }
            row.update(_eval_mma5(net, eval_ds, base_eval))
            rows.append(row)
    else:
        raise ConfigError(f"unknown ablation suite {suite!r}")

    table = {"suite": suite, "rows": rows}
    write_json(out / f"ablation_{suite}.json", table)
    text = _format_ablation_table(table)
    (out / f"ablation_{suite}.txt").write_text(text, encoding="utf-8")
    print(text)
    return 0


def _format_ablation_table(table):
    rows = table["rows"]
    if not rows:
        return f"suite {table['suite']}: no rows"
    cols = list(rows[0].keys())
    widths = {c: max(len(str(c)), max(len(str(r[c])) for r in rows)) for c in cols}
    lines = [f"== ablation: {table['suite']} =="]
    lines.append("  ".join(str(c).rjust(widths[c]) for c in cols))
    for r in rows:
        lines.append("  ".join(str(r[c]).rjust(widths[c]) for c in cols))
    return "\n".join(lines)


def cmd_viz(cfg, checkpoint=None):
    from .match import coords_array, extract_keypoints

    out = Path(cfg["out"])
    snapshot_config(cfg, out)
    net, _ = _load_checkpoint(checkpoint or cfg["viz"]["checkpoint"])
    dataset = _require_dataset(cfg["viz"]["dataset"], "viz")
    section = cfg["viz"]
    scene = dataset.scenes[section["scene"]]
    pair = scene.pairs[section["pair"]]
    oid = section["object_id"]
    ecfg = _eval_config(cfg)

    out1 = net.forward(pair.frame1.image, norm_mode=ecfg.norm_mode)
    out2 = net.forward(pair.frame2.image, norm_mode=ecfg.norm_mode)
    viz.save_confidence_overlay(out / "confidence_frame1.png",
                                pair.frame1.image, out1.confidence.value)
    viz.save_confidence_overlay(out / "confidence_frame2.png",
                                pair.frame2.image, out2.confidence.value)

    q_kps = extract_keypoints(out1, ecfg.r_thr, ecfg.topk, ecfg.nms_radius,
                              mask=pair.frame1.label_map == oid)
    s_kps = extract_keypoints(out2, ecfg.r_thr, ecfg.topk, ecfg.nms_radius)
    matches = evaluate._match_one(q_kps, s_kps, ecfg)
    viz.save_match_lines(
        out / f"matches_object{oid}.png",
        pair.frame1.image, pair.frame2.image,
        coords_array(q_kps), coords_array(s_kps),
        matches, warp=pair.homography12, correct_px=section["correct_px"],
    )
    print(f"wrote {out / 'confidence_frame1.png'}")
    print(f"wrote {out / f'matches_object{oid}.png'} ({len(matches)} matches)")
    return 0


def cmd_config(args):
    if args.dump_defaults:
        json.dump(default_config(), sys.stdout, sort_keys=True, indent=1)
        sys.stdout.write("\n")
        return 0
    raise ConfigError("config: nothing to do (did you mean --dump-defaults?)")


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="rockit",
                                     description="object-centric keypoint toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, checkpoint=False):
        p.add_argument("--config", type=str, default=None, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="override global seed")
        p.add_argument("--out", type=str, default=None, help="override output dir")
        if checkpoint:
            p.add_argument("--checkpoint", type=str, default=None)

    add_common(sub.add_parser("gen", help="generate a synthetic dataset"))
    add_common(sub.add_parser("train", help="train a model"))
    add_common(sub.add_parser("eval-match", help="matching metrics"), checkpoint=True)
    add_common(sub.add_parser("eval-pose", help="pose metrics"), checkpoint=True)
    add_common(sub.add_parser("ablate", help="run an ablation suite"), checkpoint=True)
    add_common(sub.add_parser("viz", help="diagnostic images"), checkpoint=True)
    pc = sub.add_parser("config", help="configuration utilities")
    pc.add_argument("--dump-defaults", action="store_true")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "config":
            return cmd_config(args)
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval-match":
            return cmd_eval_match(cfg, checkpoint=args.checkpoint)
        if args.command == "eval-pose":
            return cmd_eval_pose(cfg, checkpoint=args.checkpoint)
        if args.command == "ablate":
            return cmd_ablate(cfg, checkpoint=args.checkpoint)
        if args.command == "viz":
            return cmd_viz(cfg, checkpoint=args.checkpoint)
        parser.error(f"unknown command {args.command}")
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # internal failure
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
