"""Command-line pipeline: synth -> flow -> train -> explain -> eval.

Each command is a pure function of its inputs, flags, and seed, writing
artifacts atomically, so re-running a command reproduces its outputs
byte for byte.

Layout conventions: synth writes one directory per episode
({label}-{seed:04d}/ holding meta.json, events.jsonl, and the
frame_%06d.pgm files the sampling schedule needs); flow writes
{sample_id}-a.flo / -b.flo plus manifest.csv; train writes model.ckpt
and loss.csv; explain writes map-{sample_id}.flo and
overlay-{sample_id}.ppm; eval writes eval.json.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import flow, gradcam, traineval
from .config import Config, load_config
from .errors import (FormatError, SwarmLensError, TrainingError,
                     UnsupportedFormatError, ValidationError)
from .io_formats import (read_flo, read_pgm, write_bytes_atomic, write_flo,
                         write_map, write_pgm, write_ppm)
from .model import ModelSpec, build_model, forward_with_cache, load_model, save_model
from .simulate import (STABLE, UNSTABLE, SimConfig, events_jsonl,
                       generate_episode)

LABEL_NAMES = {"stable": STABLE, "unstable": UNSTABLE}

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_VALIDATION = 4
EXIT_TRAINING = 5


def _sim_config(cfg: Config, seed: int) -> SimConfig:
    s = cfg.section("sim")
    return SimConfig(n_ants=int(s["n_ants"]), arena=int(s["arena"]), seed=seed,
                     duel_rate=float(s["duel_rate"]),
                     duel_min_s=float(s["duel_min_s"]),
                     duel_max_s=float(s["duel_max_s"]),
                     frame_dt=float(s["frame_dt"]),
                     episode_len=float(s["episode_len"]),
                     cricket_count=int(s["cricket_count"]),
                     duel_rate_decay=float(s["duel_rate_decay"]),
                     exit_prob=float(s["exit_prob"]))


def _flow_params(cfg: Config) -> dict:
    f = cfg.section("flow")
    return {"alpha": float(f["alpha"]), "iters": int(f["iters"]),
            "frame_gap": float(f["frame_gap"]), "pair_gap": float(f["pair_gap"]),
            "period": float(f["sample_period"]), "size": int(f["size"])}


def _schedule_frame_indices(episode_len: float, frame_dt: float, fp: dict) -> list[int]:
    """Frame indices covering every flow pair of the sampling schedule."""
    indices = set()
    for t in traineval.sample_times(episode_len, fp["period"],
                                    fp["frame_gap"], fp["pair_gap"]):
        for u in flow.pair_frame_times(t, fp["frame_gap"], fp["pair_gap"]):
            indices.add(int(round(u / frame_dt)))
    return sorted(indices)


def cmd_synth(args, cfg: Config) -> int:
    label = LABEL_NAMES[args.label]
    fp = _flow_params(cfg)
    out = Path(args.out)
    for k in range(args.episodes):
        seed = args.seed + k
        sim_cfg = _sim_config(cfg, seed)
        ep = generate_episode(sim_cfg, label)
        episode_id = f"{args.label}-{seed:04d}"
        ep_dir = out / episode_id
        ep_dir.mkdir(parents=True, exist_ok=True)
        indices = _schedule_frame_indices(sim_cfg.episode_len, sim_cfg.frame_dt, fp)
        for idx in indices:
            write_pgm(ep.frame(idx), ep_dir / f"frame_{idx:06d}.pgm")
        write_bytes_atomic(ep_dir / "events.jsonl", events_jsonl(ep.events).encode())
        meta = {"episode_id": episode_id, "label": label, "seed": seed,
                "arena": sim_cfg.arena, "frame_dt": sim_cfg.frame_dt,
                "episode_len": sim_cfg.episode_len, "frame_indices": indices}
        write_bytes_atomic(ep_dir / "meta.json",
                           (json.dumps(meta, sort_keys=True, indent=2) + "\n").encode())
        print(f"synth: wrote {episode_id} ({len(indices)} frames, "
              f"{len(ep.events)} events)")
    return EXIT_OK


def _episode_dirs(frames_root: Path) -> list[Path]:
    dirs = sorted(p for p in frames_root.iterdir()
                  if p.is_dir() and (p / "meta.json").exists())
    if not dirs:
        raise ValidationError(f"no episode directories under {frames_root}")
    return dirs


def _read_meta(ep_dir: Path) -> dict:
    try:
        return json.loads((ep_dir / "meta.json").read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{ep_dir}/meta.json: {exc}") from exc


def cmd_flow(args, cfg: Config) -> int:
    fp = _flow_params(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for ep_dir in _episode_dirs(Path(args.frames)):
        meta = _read_meta(ep_dir)
        frame_dt = float(meta["frame_dt"])
        for t in traineval.sample_times(float(meta["episode_len"]), fp["period"],
                                        fp["frame_gap"], fp["pair_gap"]):
            a1, b1, a2, b2 = flow.pair_frame_times(t, fp["frame_gap"], fp["pair_gap"])
            frames = {}
            for u in {a1, b1, a2, b2}:
                idx = int(round(u / frame_dt))
                frames[u] = read_pgm(ep_dir / f"frame_{idx:06d}.pgm")
            f1 = flow.downsample(flow.horn_schunck(frames[a1], frames[b1],
                                                   fp["alpha"], fp["iters"]), fp["size"])
            f2 = flow.downsample(flow.horn_schunck(frames[a2], frames[b2],
                                                   fp["alpha"], fp["iters"]), fp["size"])
            sample_id = f"{meta['episode_id']}-t{int(round(t)):06d}"
            flo_a = f"{sample_id}-a.flo"
            flo_b = f"{sample_id}-b.flo"
            write_flo(f1, out / flo_a)
            write_flo(f2, out / flo_b)
            rows.append([sample_id, flo_a, flo_b, str(meta["label"]),
                         repr(float(t)), meta["episode_id"]])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample_id", "flo_a", "flo_b", "label", "t_seconds", "episode_id"])
    writer.writerows(rows)
    write_bytes_atomic(out / "manifest.csv", buf.getvalue().encode())
    print(f"flow: wrote {len(rows)} samples to {out}")
    return EXIT_OK


def _read_manifest(flows_dir: Path) -> list[dict]:
    path = flows_dir / "manifest.csv"
    if not path.exists():
        raise ValidationError(f"{path} not found (run the flow command first)")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    want = {"sample_id", "flo_a", "flo_b", "label", "t_seconds", "episode_id"}
    if not rows or set(rows[0]) != want:
        raise FormatError(f"{path}: expected columns {sorted(want)}")
    return rows


def _load_groups(flows_dir: Path) -> list[traineval.EpisodeSamples]:
    groups: dict[str, traineval.EpisodeSamples] = {}
    for row in _read_manifest(flows_dir):
        f1 = read_flo(flows_dir / row["flo_a"])
        f2 = read_flo(flows_dir / row["flo_b"])
        label = int(row["label"])
        sample = flow.make_sample(f1, f2, label, float(row["t_seconds"]))
        group = groups.setdefault(
            row["episode_id"],
            traineval.EpisodeSamples(row["episode_id"], label, []))
        if group.label != label:
            raise FormatError(f"episode {row['episode_id']} carries two labels")
        group.samples.append(sample)
    return [groups[k] for k in sorted(groups)]


def _split_fracs(cfg: Config) -> tuple[float, float, float]:
    t = cfg.section("train")
    train_frac = float(t["train_frac"])
    val_frac = float(t["val_frac"])
    return (train_frac, val_frac, 1.0 - train_frac - val_frac)


def cmd_train(args, cfg: Config) -> int:
    groups = _load_groups(Path(args.flows))
    dataset = traineval.split_dataset(groups, _split_fracs(cfg), args.seed)
    spec = ModelSpec.from_config(cfg)
    model = build_model(spec, args.seed)
    hp = traineval.Hyperparams.from_config(cfg, args.seed)
    result = traineval.train(model, dataset, hp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(result.model, out / "model.ckpt")
    write_bytes_atomic(out / "loss.csv",
                       traineval.loss_curve_csv(result.curve).encode())
    final = result.curve[-1]
    print(f"train: {len(result.curve)} epochs, best epoch {result.best_epoch}, "
          f"final val loss {final[2]:.4f} -> {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_explain(args, cfg: Config) -> int:
    ex = cfg.section("explain")
    top_frac = args.top_frac if args.top_frac is not None else float(ex["top_frac"])
    target = args.target_class or str(ex["target_class"])
    upsample = int(ex["upsample"])
    alpha = float(ex["overlay_alpha"])
    model = load_model(args.checkpoint)
    flows_dir = Path(args.flows)
    frames_root = Path(args.frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for row in _read_manifest(flows_dir):
        f1 = read_flo(flows_dir / row["flo_a"])
        f2 = read_flo(flows_dir / row["flo_b"])
        sample = flow.make_sample(f1, f2, int(row["label"]), float(row["t_seconds"]))
        fp = forward_with_cache(model, sample.tensor)
        m = gradcam.importance_from_forward(fp, target)
        gated = gradcam.gate_top_fraction(m, top_frac)
        up = gradcam.upsample_bicubic(gated, upsample, upsample)
        write_map(up.values, out / f"map-{row['sample_id']}.flo")

        ep_dir = frames_root / row["episode_id"]
        meta = _read_meta(ep_dir)
        idx = int(round(float(row["t_seconds"]) / float(meta["frame_dt"])))
        frame = read_pgm(ep_dir / f"frame_{idx:06d}.pgm")
        rgb = gradcam.overlay(frame, up, alpha)
        write_ppm(rgb, out / f"overlay-{row['sample_id']}.ppm")
        count += 1
    print(f"explain: wrote {count} maps and overlays to {out}")
    return EXIT_OK


def _read_events(ep_dir: Path) -> list[dict]:
    path = ep_dir / "events.jsonl"
    if not path.exists():
        return []
    try:
        return [json.loads(line) for line in path.read_text().splitlines() if line]
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def cmd_eval(args, cfg: Config) -> int:
    model = load_model(args.checkpoint)
    flows_dir = Path(args.flows)
    groups = _load_groups(flows_dir)
    dataset = traineval.split_dataset(groups, _split_fracs(cfg), args.seed)
    report = traineval.evaluate(model, dataset, "test")

    if args.frames:
        fp = _flow_params(cfg)
        frames_root = Path(args.frames)
        pointing = []
        for i in dataset.indices("test"):
            sample = dataset.samples[i]
            if sample.label != UNSTABLE:
                continue
            ep_dir = frames_root / dataset.episode_ids[i]
            meta = _read_meta(ep_dir)
            boxes = traineval.boxes_in_window(
                _read_events(ep_dir), sample.timestamp, float(meta["frame_dt"]),
                fp["frame_gap"], fp["pair_gap"])
            if boxes:
                pointing.append(traineval.PointingSample(
                    sample.tensor, boxes, int(meta["arena"])))
        if pointing:
            acc, baseline = traineval.pointing_game(model, pointing)
            report.pointing_accuracy = acc
            report.random_baseline = baseline

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(report.to_json_obj(), sort_keys=True, indent=2) + "\n"
    write_bytes_atomic(out / "eval.json", payload.encode())
    summary = f"eval: auc {report.auc:.4f} accuracy {report.accuracy:.4f}"
    if report.pointing_accuracy is not None:
        summary += (f" pointing {report.pointing_accuracy:.4f}"
                    f" baseline {report.random_baseline:.4f}")
    print(summary + f" -> {out / 'eval.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swarmlens",
        description="Swarm-state classification and duel localization pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI config path (defaults built in)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth", help="generate labeled episodes (frames + events)")
    common(p)
    p.add_argument("--label", choices=sorted(LABEL_NAMES), required=True)
    p.add_argument("--episodes", type=int, default=1)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("flow", help="estimate flow samples from a frames directory")
    common(p)
    p.add_argument("frames", help="directory written by synth")
    p.set_defaults(fn=cmd_flow)

    p = sub.add_parser("train", help="train the classifier on a flow directory")
    common(p)
    p.add_argument("flows", help="directory written by flow")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("explain", help="write importance maps and overlays")
    common(p)
    p.add_argument("flows", help="directory written by flow")
    p.add_argument("frames", help="directory written by synth")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--top-frac", type=float, default=None)
    p.add_argument("--class", dest="target_class", choices=sorted(LABEL_NAMES),
                   default=None)
    p.set_defaults(fn=cmd_explain)

    p = sub.add_parser("eval", help="score the held-out split")
    common(p)
    p.add_argument("flows", help="directory written by flow")
    p.add_argument("frames", nargs="?", default=None,
                   help="synth directory; enables the pointing game")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else Config()
        return args.fn(args, cfg)
    except (FormatError, UnsupportedFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (ValidationError, SwarmLensError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
