"""Command-line entry point: ``nestcut segment|evaluate|phantom|render``.

Exit codes: 0 success, 1 internal error, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from .phantom import PhantomSpec, PhantomSpecError, generate
from .pipeline import ConfigError, PipelineConfig, StageError, segment, with_seed
from .volume import (
    VolumeFormatError,
    read_labels,
    read_volume,
    render_slice,
    seg_report,
    write_labels,
    write_map,
    write_mask,
    write_volume,
)

SEED_ENV = "NESTCUT_SEED"
EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("nestcut")


class UsageError(Exception):
    pass


def _read_json(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from exc


def _load_config(path: str | None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path:
        try:
            cfg = PipelineConfig.from_dict(_read_json(path))
        except ConfigError as exc:
            raise UsageError(f"{path}: {exc}") from exc
    seed = os.environ.get(SEED_ENV)
    if seed:
        try:
            cfg = with_seed(cfg, int(seed))
        except ValueError as exc:
            raise UsageError(f"{SEED_ENV} must be an integer, got {seed!r}") from exc
    return cfg


def _input_path(path: str) -> str:
    if not Path(path).is_file():
        raise UsageError(f"no such file: {path}")
    return path


def write_trace(trace, directory: str, spacing, depth_axis: int) -> list[str]:
    """One file per stage of the run, plus ``trace.json`` with the scalar results."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, writer, arr):
        if arr is None:
            return
        path = out / name
        writer(path, arr, spacing, depth_axis)
        written.append(str(path))

    put("01_ngc_initial.ncvol", _write_label_array, trace.ngc_initial)
    put("02_ln_mask.ncvol", write_mask, trace.ln_mask)
    if trace.round1_masks:
        stack = sum(m.astype(np.uint8) for m in trace.round1_masks.values())
        put("03_round1_fat_counts.ncvol", write_map, stack)
    if trace.round1_fusion is not None:
        put("04_round1_confident.ncvol", _write_label_array, _confident_labels(trace.round1_fusion))
    if trace.round2_fusion is not None:
        put("05_round2_confident.ncvol", _write_label_array, _confident_labels(trace.round2_fusion))
        put("06_vote_map.ncvol", write_map, trace.round2_fusion.votes)
    if trace.seeds is not None:
        seeds = np.zeros(trace.seeds.lnp_seeds.shape, dtype=np.uint8)
        seeds[trace.seeds.fat_seeds] = 1
        seeds[trace.seeds.lnp_seeds] = 2
        put("07_seeds.ncvol", _write_label_array, seeds)
    put("08_refined.ncvol", _write_label_array, trace.refined)
    summary = {
        "downsample_factor": trace.downsample_factor,
        "pbs": None if trace.pbs is None else {"mu": trace.pbs.mu, "sigma": trace.pbs.sigma},
        "fat_ratios": None if trace.fat_ratios is None else {str(k): v for k, v in trace.fat_ratios.items()},
        "selected_k": trace.selected_k,
        "seed_fallback": trace.seed_fallback,
        "timings": trace.timings,
    }
    path = out / "trace.json"
    path.write_text(json.dumps(summary, indent=2))
    written.append(str(path))
    return written


def _write_label_array(path, arr, spacing, depth_axis):
    from .volume import LabelVolume

    write_labels(path, LabelVolume(np.asarray(arr, dtype=np.uint8), spacing, depth_axis))


def _confident_labels(fusion) -> np.ndarray:
    out = np.zeros(fusion.votes.shape, dtype=np.uint8)
    out[fusion.confident_fat] = 1
    out[fusion.confident_lnp] = 2
    return out


def cmd_segment(args) -> int:
    cfg = _load_config(args.config)
    vol = read_volume(_input_path(args.input))
    start = time.perf_counter()
    try:
        labels, trace = segment(vol, cfg)
    except StageError as exc:
        print(f"stage {exc.stage} failed: {exc.cause}", file=sys.stderr)
        return EXIT_INTERNAL
    runtime = time.perf_counter() - start
    write_labels(args.output, labels)
    if args.dump_profiles and trace.round2_profile is not None:
        Path(args.dump_profiles).write_text(trace.round2_profile.export_text())
    if args.trace_dir:
        write_trace(trace, args.trace_dir, vol.spacing, vol.depth_axis)
    report = {
        "selected_k": trace.selected_k,
        "fat_ratios": {str(k): v for k, v in trace.fat_ratios.items()},
        "runtime_seconds": runtime,
        "downsample_factor": trace.downsample_factor,
        "stage_seconds": trace.timings,
    }
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    a = read_labels(_input_path(args.labels_a))
    b = read_labels(_input_path(args.labels_b))
    if a.dims != b.dims:
        raise UsageError(f"label volumes differ in size: {a.dims} vs {b.dims}")
    print(json.dumps(seg_report(a, b).to_dict(), indent=2))
    return EXIT_OK


def cmd_phantom(args) -> int:
    doc = _read_json(_input_path(args.spec)) if args.spec else {}
    try:
        spec = PhantomSpec.from_dict(doc)
        seed = os.environ.get(SEED_ENV)
        if seed and "rng_seed" not in doc:
            spec = PhantomSpec.from_dict({**spec.to_dict(), "rng_seed": int(seed)})
        vol, truth = generate(spec)
    except (PhantomSpecError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid phantom spec: {exc}") from exc
    write_volume(args.out_volume, vol)
    write_labels(args.out_truth, truth)
    return EXIT_OK


def cmd_render(args) -> int:
    path = _input_path(args.input)
    try:
        lab = read_labels(path)
        array, is_labels = lab.labels, True
    except VolumeFormatError:
        array, is_labels = read_volume(path).data, False
    try:
        rgb = render_slice(array, args.axis, args.index, is_labels)
    except (IndexError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    Image.fromarray(rgb, mode="RGB").save(args.output, format="PNG")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nestcut", description="Nested three-region graph-cut segmentation.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="log stage progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="segment an intensity volume")
    p.add_argument("input", help="intensity volume (.ncvol)")
    p.add_argument("output", help="output label volume (.ncvol)")
    p.add_argument("--config", help="JSON pipeline configuration")
    p.add_argument("--dump-profiles", metavar="PATH", help="write the final depth profiles as text")
    p.add_argument("--trace-dir", metavar="DIR", help="write one file per pipeline stage")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="per-class Dice between two label volumes")
    p.add_argument("labels_a")
    p.add_argument("labels_b")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("phantom", help="generate a synthetic phantom and its ground truth")
    p.add_argument("spec", nargs="?", help="JSON phantom spec (defaults if omitted)")
    p.add_argument("out_volume")
    p.add_argument("out_truth")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("render", help="render one slice to PNG")
    p.add_argument("input", help="intensity or label volume")
    p.add_argument("axis", type=int, choices=(0, 1, 2))
    p.add_argument("index", type=int)
    p.add_argument("output", help="PNG path")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (VolumeFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - last-resort reporting
        print(f"internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
