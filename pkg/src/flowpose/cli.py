"""Command-line surface: file-based pipeline stages.

Each subcommand is a pure function of (inputs, config, seed); re-running a
command writes byte-identical outputs except for the timestamp inside the
run manifest. Stages communicate only through files, so any stage can be
swapped for an external tool that speaks the same formats (tensor files,
.flo flow fields, pose CSVs).

    gen-data    synthesize a puppet dataset (frames, poses, true flows)
    train       train the heatmap network or the coordinate baseline
    infer       per-frame heatmaps and decoded poses from a checkpoint
    warp        align temporal neighborhoods of heatmaps along flow
    pool        collapse warped stacks into composite heatmaps and poses
    learn-pool  fit parametric pooling weights from warped stacks
    eval        PCK curves (CSV + SVG) from predicted vs labeled poses

The env var FLOWPOSE_THREADS caps per-frame parallelism (default 1);
output ordering does not depend on it.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import ConfigError, FlowposeError
from .evaluation import average_joints, emit_curves, pck
from .flow import FlowField, downsample_flow, read_flo, warp_heatmap
from .heatmap import Pose, decode_argmax_batch, synthesize_target
from .network import (
    NetworkConfig,
    build_network,
    decode_coordinate_output,
    default_coordinate_config,
    default_heatmap_config,
    load_checkpoint,
    rectify_heatmap,
    save_checkpoint,
)
from .synth import (
    add_label_noise,
    default_puppet,
    generate_dataset,
    load_dataset,
    load_poses_csv,
    save_dataset,
    spec_from_json,
)
from .temporal import (
    learn_pooling_weights,
    load_weights_csv,
    pool_max,
    pool_parametric,
    pool_sum,
    save_weights_csv,
)
from .tensor import Tensor, load_tensor, save_tensor
from .train import Dataset, parse_train_config, train, write_loss_curve

POSE_HEADER = ["frame", "joint", "x", "y", "visible"]

_HEATMAP_RE = re.compile(r"heatmap_(\d{5})\.tns$")
_WARPED_RE = re.compile(r"warped_(\d{5})\.tns$")
_FLOW_RE = re.compile(r"flow_(\d{5})_([+-]\d+)\.flo$")


def _thread_count() -> int:
    raw = os.environ.get("FLOWPOSE_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"FLOWPOSE_THREADS must be a positive integer, got {raw!r}")
    if n < 1:
        raise ConfigError(f"FLOWPOSE_THREADS must be a positive integer, got {raw!r}")
    return n


def _parallel_map(fn, items):
    """Order-preserving map over items, threaded per FLOWPOSE_THREADS."""
    items = list(items)
    threads = _thread_count()
    if threads == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _git_blob_hash(path) -> str:
    content = Path(path).read_bytes()
    h = hashlib.sha1()
    h.update(b"blob %d\x00" % len(content))
    h.update(content)
    return h.hexdigest()


def _write_manifest(out_dir, command: str, args: dict, inputs, outputs, checkpoint_hash=None):
    manifest = {
        "command": command,
        "args": args,
        "inputs": sorted(str(p) for p in inputs),
        "outputs": sorted(str(p) for p in outputs),
        "checkpoint_hash": checkpoint_hash,
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    path = Path(out_dir) / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _write_pose_csv(path, rows):
    """rows: iterable of (frame_index, Pose)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(POSE_HEADER)
        for t, pose in rows:
            for j in range(pose.k):
                writer.writerow(
                    [
                        t,
                        j,
                        f"{pose.coords[j, 0]:.17g}",
                        f"{pose.coords[j, 1]:.17g}",
                        int(pose.visible[j]),
                    ]
                )


def _read_pose_csv_sparse(path) -> dict[int, Pose]:
    """Pose CSV as {frame: Pose}; tolerates missing frames (not joints)."""
    per_frame: dict[int, dict[int, tuple[float, float, bool]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != POSE_HEADER:
            raise ConfigError(f"{path}: expected pose CSV header {POSE_HEADER}, got {header}")
        for row in reader:
            t, j = int(row[0]), int(row[1])
            per_frame.setdefault(t, {})[j] = (float(row[2]), float(row[3]), bool(int(row[4])))
    out = {}
    for t, joints in per_frame.items():
        k = max(joints) + 1
        if sorted(joints) != list(range(k)):
            raise ConfigError(f"{path}: frame {t} is missing joint rows")
        coords = np.array([[joints[j][0], joints[j][1]] for j in range(k)])
        visible = np.array([joints[j][2] for j in range(k)], dtype=bool)
        out[t] = Pose(coords, visible)
    if not out:
        raise ConfigError(f"{path}: no pose rows")
    return out


def _indexed_files(directory, pattern: re.Pattern, what: str) -> dict[int, Path]:
    d = Path(directory)
    found = {}
    for p in sorted(d.glob("*")):
        m = pattern.match(p.name)
        if m:
            found[int(m.group(1))] = p
    if not found:
        raise ConfigError(f"{d}: no {what} files found")
    return found


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    if args.spec_file:
        spec = spec_from_json(Path(args.spec_file).read_text())
    else:
        spec = default_puppet()
    frames, poses, flows = generate_dataset(spec, args.frames, args.seed, args.flow_window)
    out = Path(args.out_dir)
    labels = poses
    if args.label_jitter > 0 or args.label_outliers > 0:
        labels = add_label_noise(
            poses,
            args.label_jitter,
            args.label_outliers,
            args.seed + 1,
            frame_size=(spec.frame_h, spec.frame_w),
        )
    save_dataset(out, frames, labels, flows)
    outputs = [out / f"frame_{t:05d}.tns" for t in range(len(frames))]
    outputs.append(out / "poses.csv")
    if labels is not poses:
        _write_pose_csv(out / "poses_clean.csv", enumerate(poses))
        outputs.append(out / "poses_clean.csv")
    outputs += [out / f"flow_{t:05d}_{d:+03d}.flo" for (t, d) in flows]
    _write_manifest(
        out,
        "gen-data",
        {
            "spec_file": args.spec_file,
            "seed": args.seed,
            "frames": args.frames,
            "flow_window": args.flow_window,
            "label_jitter": args.label_jitter,
            "label_outliers": args.label_outliers,
        },
        inputs=[args.spec_file] if args.spec_file else [],
        outputs=outputs,
    )
    print(f"wrote {len(frames)} frames, {len(flows)} flow fields to {out}")
    return 0


def _load_split(data_dir) -> Dataset:
    """train/ and val/ subdirectories when present, else a 5:1 tail split."""
    d = Path(data_dir)
    if (d / "train").is_dir() and (d / "val").is_dir():
        tr_frames, tr_poses, _ = load_dataset(d / "train")
        va_frames, va_poses, _ = load_dataset(d / "val")
        return Dataset(tr_frames, tr_poses, va_frames, va_poses)
    frames, poses, _ = load_dataset(d)
    n = len(frames)
    n_val = min(max(n // 6, 1), n - 1) if n > 1 else 0
    cut = n - n_val
    return Dataset(frames[:cut], poses[:cut], frames[cut:], poses[cut:])


def cmd_train(args) -> int:
    cfg = parse_train_config(Path(args.config).read_text())
    dataset = _load_split(args.data_dir)
    joint_count = dataset.train_poses[0].k
    _, in_channels, h, w = dataset.train_frames[0].shape
    if cfg.network == "coordinate":
        net_cfg = default_coordinate_config(joint_count, (h, w))
    else:
        net_cfg = default_heatmap_config(joint_count, (h, w), fusion=cfg.fusion)
    if in_channels != net_cfg.in_channels:
        net_cfg = NetworkConfig.from_dict({**net_cfg.to_dict(), "in_channels": in_channels})
    net = build_network(net_cfg, seed=cfg.seed)
    result = train(net, dataset, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.fpnet"
    save_checkpoint(result.network, ckpt)
    write_loss_curve(result.curve, out / "loss_curve.csv")
    _write_manifest(
        out,
        "train",
        {"config": str(args.config), "seed": cfg.seed, "iters": cfg.iters},
        inputs=[args.config, args.data_dir],
        outputs=[ckpt, out / "loss_curve.csv"],
        checkpoint_hash=_git_blob_hash(ckpt),
    )
    print(
        f"trained {cfg.network} network for {cfg.iters} iterations; "
        f"best val PCK {result.best_val_pck:.4f} at iteration {result.best_iteration}"
    )
    return 0


def _expand_frame_args(sources) -> list[Path]:
    paths: list[Path] = []
    for src in sources:
        p = Path(src)
        if p.is_dir():
            found = sorted(p.glob("frame_*.tns"))
            if not found:
                raise ConfigError(f"{p}: no frame_*.tns files")
            paths.extend(found)
        else:
            paths.append(p)
    return paths


def cmd_infer(args) -> int:
    net = load_checkpoint(args.checkpoint)
    frame_paths = _expand_frame_args(args.frames)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def run(path):
        frame = load_tensor(path)
        trunk, fused, _ = net.forward(frame)
        if net.config.is_coordinate:
            coords = decode_coordinate_output(trunk, net.config.input_size)[0]
            return None, Pose(coords)
        heat = rectify_heatmap(fused if fused is not None else trunk)
        coords = decode_argmax_batch(heat, net.scale)[0][0]
        return heat, Pose(coords)

    results = _parallel_map(run, frame_paths)
    outputs = [out / "poses_pred.csv"]
    rows = []
    for t, (heat, pose) in enumerate(results):
        if heat is not None:
            hp = out / f"heatmap_{t:05d}.tns"
            save_tensor(heat, hp)
            outputs.append(hp)
        rows.append((t, pose))
    _write_pose_csv(out / "poses_pred.csv", rows)
    _write_manifest(
        out,
        "infer",
        {"checkpoint": str(args.checkpoint)},
        inputs=[args.checkpoint] + [str(p) for p in frame_paths],
        outputs=outputs,
        checkpoint_hash=_git_blob_hash(args.checkpoint),
    )
    print(f"inferred {len(results)} frames to {out}")
    return 0


def _flow_for_grid(flow: FlowField, hm_shape: tuple[int, int], path) -> FlowField:
    """Downsample a stored flow to the heatmap grid when resolutions differ."""
    fh, fw = flow.shape
    h, w = hm_shape
    if (fh, fw) == (h, w):
        return flow
    if fh % h == 0 and fw % w == 0 and fh // h == fw // w:
        return downsample_flow(flow, fh // h)
    raise ConfigError(f"{path}: flow size {fh}x{fw} does not map onto heatmaps of {h}x{w}")


def cmd_warp(args) -> int:
    if args.n < 0:
        raise ConfigError("--n must be >= 0")
    heatmaps = _indexed_files(args.heatmap_dir, _HEATMAP_RE, "heatmap_*.tns")
    flow_paths: dict[tuple[int, int], Path] = {}
    for p in sorted(Path(args.flow_dir).glob("*.flo")):
        m = _FLOW_RE.match(p.name)
        if m:
            flow_paths[(int(m.group(1)), int(m.group(2)))] = p
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = args.n

    def complete(t: int) -> bool:
        for delta in range(-n, n + 1):
            if t + delta not in heatmaps:
                return False
            if delta != 0 and (t, delta) not in flow_paths:
                return False
        return True

    centers = [t for t in sorted(heatmaps) if complete(t)]
    if not centers:
        raise ConfigError(
            f"no frame has a complete +-{n} neighborhood of heatmaps and flow fields"
        )

    def build(t: int) -> np.ndarray:
        layers = []
        hm_shape = None
        for delta in range(-n, n + 1):
            hm = load_tensor(heatmaps[t + delta])
            if hm.shape[0] != 1:
                raise ConfigError(f"{heatmaps[t + delta]}: expected batch size 1")
            hm_shape = hm.shape[2:]
            if delta == 0:
                layers.append(hm.data[0])
                continue
            path = flow_paths[(t, delta)]
            flow = _flow_for_grid(read_flo(path, t, t + delta), hm_shape, path)
            layers.append(warp_heatmap(hm, flow).data[0])
        return np.stack(layers)

    stacks = _parallel_map(build, centers)
    outputs = []
    for t, stack in zip(centers, stacks):
        p = out / f"warped_{t:05d}.tns"
        save_tensor(Tensor(stack), p)
        outputs.append(p)
    skipped = len(heatmaps) - len(centers)
    _write_manifest(
        out,
        "warp",
        {"n": n, "heatmap_dir": str(args.heatmap_dir), "flow_dir": str(args.flow_dir)},
        inputs=[args.heatmap_dir, args.flow_dir],
        outputs=outputs,
    )
    note = f" (skipped {skipped} boundary frames)" if skipped else ""
    print(f"warped {len(centers)} neighborhoods of width {2 * n + 1} to {out}{note}")
    return 0


def cmd_pool(args) -> int:
    warped = _indexed_files(args.warped_dir, _WARPED_RE, "warped_*.tns")
    if args.mode == "parametric":
        if not args.weights:
            raise ConfigError("--mode parametric requires --weights")
        weights = load_weights_csv(args.weights)
    else:
        weights = None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def run(t: int):
        stack = load_tensor(warped[t])
        if weights is not None:
            if stack.shape[0] != weights.t or stack.shape[1] != weights.k:
                raise ConfigError(
                    f"{warped[t]}: stack shape {stack.shape[:2]} does not match "
                    f"weights ({weights.t}, {weights.k})"
                )
            composite = pool_parametric(stack, weights)
        elif args.mode == "sum":
            composite = pool_sum(stack)
        else:
            composite = pool_max(stack)
        coords = decode_argmax_batch(composite, args.scale)[0][0]
        return composite, Pose(coords)

    order = sorted(warped)
    results = _parallel_map(run, order)
    outputs = [out / "poses_pred.csv"]
    rows = []
    for t, (composite, pose) in zip(order, results):
        p = out / f"pooled_{t:05d}.tns"
        save_tensor(composite, p)
        outputs.append(p)
        rows.append((t, pose))
    _write_pose_csv(out / "poses_pred.csv", rows)
    _write_manifest(
        out,
        "pool",
        {"mode": args.mode, "weights": args.weights, "scale": args.scale},
        inputs=[args.warped_dir] + ([args.weights] if args.weights else []),
        outputs=outputs,
    )
    print(f"pooled {len(order)} stacks ({args.mode}) to {out}")
    return 0


def cmd_learn_pool(args) -> int:
    warped = _indexed_files(args.warped_dir, _WARPED_RE, "warped_*.tns")
    poses = load_poses_csv(args.targets)
    samples = []
    for t in sorted(warped):
        if t >= len(poses):
            raise ConfigError(f"{warped[t]}: no pose row for frame {t} in {args.targets}")
        stack = load_tensor(warped[t])
        hm_size = stack.shape[2:]
        target, mask = synthesize_target(poses[t], hm_size, args.scale, args.sigma)
        if mask.sum() == 0:
            continue
        samples.append((stack, target))
    if not samples:
        raise ConfigError("no training sample kept any joint visible")
    weights = learn_pooling_weights(samples)
    out_path = Path(args.out_weights)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_weights_csv(weights, out_path)
    _write_manifest(
        out_path.parent,
        "learn-pool",
        {"targets": str(args.targets), "scale": args.scale, "sigma": args.sigma},
        inputs=[args.warped_dir, args.targets],
        outputs=[out_path],
    )
    print(f"learned ({weights.t}, {weights.k}) pooling weights from {len(samples)} stacks")
    return 0


def cmd_eval(args) -> int:
    pred = _read_pose_csv_sparse(args.pred_poses)
    gt = _read_pose_csv_sparse(args.gt_poses)
    common = sorted(set(pred) & set(gt))
    if not common:
        raise ConfigError("predictions and labels share no frame indices")
    if args.d_max <= 0:
        raise ConfigError("--d-max must be positive")
    d_values = np.arange(0.0, float(args.d_max) + 1.0)
    curve = pck([pred[t] for t in common], [gt[t] for t in common], d_values)
    evaluated = [i for i in range(len(curve.joint_names)) if not np.isnan(curve.accuracy[i]).all()]
    mean = average_joints(curve, evaluated, name="average")
    out = Path(args.out_dir)
    csv_path, svg_path = emit_curves(
        [(args.method_name, curve), (f"{args.method_name} average", mean)], out
    )
    _write_manifest(
        out,
        "eval",
        {"d_max": args.d_max, "method_name": args.method_name},
        inputs=[args.pred_poses, args.gt_poses],
        outputs=[csv_path, svg_path],
    )
    overall = float(mean.accuracy[0, -1])
    print(
        f"evaluated {len(common)} frames; mean PCK at d={d_values[-1]:g}: {overall:.4f}; "
        f"wrote {csv_path} and {svg_path}"
    )
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowpose",
        description="Video pose estimation pipeline: synthetic data, training, "
        "flow-warped temporal pooling, and PCK evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize a puppet video dataset")
    p.add_argument("out_dir")
    p.add_argument("--spec-file", help="JSON overrides for the default puppet")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--flow-window", type=int, default=1, help="emit true flow for |delta| <= this")
    p.add_argument("--label-jitter", type=float, default=0.0, help="label noise sigma in pixels")
    p.add_argument("--label-outliers", type=float, default=0.0, help="fraction of joints relocated")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a network on a dataset directory")
    p.add_argument("config", help="key = value training config file")
    p.add_argument("data_dir", help="dataset directory (or one with train/ and val/)")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run a checkpoint over frames")
    p.add_argument("checkpoint")
    p.add_argument("out_dir")
    p.add_argument("frames", nargs="+", help="frame .tns files and/or dataset directories")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("warp", help="warp heatmap neighborhoods along flow")
    p.add_argument("heatmap_dir", help="directory of heatmap_*.tns from infer")
    p.add_argument("flow_dir", help="directory of flow_%%05d_%%+03d.flo files")
    p.add_argument("out_dir")
    p.add_argument("--n", type=int, default=1, help="temporal neighborhood half-width")
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("pool", help="pool warped stacks into composite heatmaps")
    p.add_argument("warped_dir", help="directory of warped_*.tns from warp")
    p.add_argument("out_dir")
    p.add_argument("--mode", choices=("parametric", "sum", "max"), default="parametric")
    p.add_argument("--weights", help="pooling weights CSV (required for parametric)")
    p.add_argument("--scale", type=int, default=4, help="input pixels per heatmap pixel")
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("learn-pool", help="fit parametric pooling weights")
    p.add_argument("warped_dir", help="directory of warped_*.tns from warp")
    p.add_argument("targets", help="ground-truth poses.csv")
    p.add_argument("out_weights", help="output weights CSV path")
    p.add_argument("--scale", type=int, default=4, help="input pixels per heatmap pixel")
    p.add_argument("--sigma", type=float, default=1.5, help="target Gaussian sigma")
    p.set_defaults(func=cmd_learn_pool)

    p = sub.add_parser("eval", help="PCK curves from predicted vs labeled poses")
    p.add_argument("pred_poses", help="predictions CSV (frame, joint, x, y, visible)")
    p.add_argument("gt_poses", help="ground-truth CSV in the same format")
    p.add_argument("out_dir")
    p.add_argument("--d-max", type=float, default=16.0, help="largest distance threshold (pixels)")
    p.add_argument("--method-name", default="method", help="curve label in outputs")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FlowposeError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
