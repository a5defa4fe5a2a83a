"""Command-line entry point.

Verbs:

    baseline   error-free generation: per-prompt scores + images
    campaign   full injection campaign from a config file
    bit-sweep  repeat the first target over all 16 bit positions
    bit-stats  per-bit averages over a checkpoint's binary16 tensors
    corrupt    standalone single-bit checkpoint mutation (any scheme)
    report     tables + figures from an emitted results.json

Exit codes: 0 success, 2 configuration error, 3 runtime error.

Bit positions use LSB = 0 register notation throughout: 15 is the sign,
14..10 the exponent (MSB first), 9..0 the mantissa.  The exponent MSB,
position 14, is the bit whose 0->1 upset multiplies a sub-unit weight by
2**16.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .campaign import CampaignRunner
from .checkpoint import (
    Block,
    CheckpointError,
    Layer,
    Matrix,
    TensorSelector,
    bit_statistics,
    parse_checkpoint,
    resolve_selector,
    sd2_unet_naming_scheme,
)
from .config import ParseError, ValidationError, load_config
from .injector import ElementPolicy, InjectionSpec, inject
from .model import DiffuserConfig, build_weights
from .reports import (
    baseline_table,
    bit_stats_csv,
    default_metric,
    emit_results,
    export_images,
    figure_bit_averages,
    load_results,
    render_report,
    summary_table,
    write_ppm,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _write_manifest(out_dir: Path, args: argparse.Namespace, cfg_seed: int,
                    outputs: list[Path], started: str) -> None:
    config_path = getattr(args, "config", None)
    checksum = None
    if config_path:
        checksum = hashlib.sha256(Path(config_path).read_bytes()).hexdigest()
    manifest = {
        "tool": f"seulab {__version__}",
        "command": args.command,
        "config": str(config_path) if config_path else None,
        "config_sha256": checksum,
        "seed": cfg_seed,
        "threads": getattr(args, "threads", 1),
        "started": started,
        "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "outputs": sorted(str(p) for p in outputs),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _load_campaign_config(args: argparse.Namespace):
    return load_config(args.config, seed_override=args.seed)


def _formats(args: argparse.Namespace) -> tuple[str, ...]:
    return tuple(f.strip() for f in args.format.split(",") if f.strip())


def cmd_baseline(args: argparse.Namespace) -> int:
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    cfg = _load_campaign_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runner = CampaignRunner(cfg)
    baseline = runner.run_baseline()
    scores = [p.get("clip_like", float("nan")) for p in baseline.per_prompt]
    table = baseline_table(list(cfg.prompts), scores)
    outputs = [out / "baseline_scores.txt", out / "baseline.json"]
    outputs[0].write_text(table, encoding="utf-8")
    outputs[1].write_text(
        json.dumps(
            {"kind": "baseline", "prompts": list(cfg.prompts), "per_prompt": baseline.per_prompt},
            indent=2, sort_keys=True,
        ) + "\n",
        encoding="utf-8",
    )
    for i, image in enumerate(baseline.images):
        path = out / f"baseline_prompt{i}.ppm"
        write_ppm(image, path)
        outputs.append(path)
    _write_manifest(out, args, cfg.seed, outputs, started)
    sys.stdout.write(table)
    return EXIT_OK


def cmd_campaign(args: argparse.Namespace) -> int:
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    cfg = _load_campaign_config(args)
    out = Path(args.out)
    runner = CampaignRunner(cfg)
    result = runner.run_campaign(threads=args.threads)
    outputs = emit_results(result, out, _formats(args))
    outputs += export_images(result, out, which="both")
    _write_manifest(out, args, cfg.seed, outputs, started)
    sys.stdout.write(summary_table(result, "by-layer", default_metric(result)))
    return EXIT_OK


def cmd_bit_sweep(args: argparse.Namespace) -> int:
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    cfg = _load_campaign_config(args)
    out = Path(args.out)
    runner = CampaignRunner(cfg)
    sweep = runner.bit_sweep(threads=args.threads)
    outputs = emit_results(sweep, out, _formats(args))
    _write_manifest(out, args, cfg.seed, outputs, started)
    sys.stdout.write(summary_table(sweep, "by-bit", default_metric(sweep)))
    return EXIT_OK


def cmd_bit_stats(args: argparse.Namespace) -> int:
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        store = parse_checkpoint(Path(args.checkpoint).read_bytes())
        names = [n for n in store.names() if store.entry(n).dtype == "F16"]
        title = Path(args.checkpoint).name
    else:
        model_cfg = DiffuserConfig(seed=args.seed or 0)
        store = build_weights(model_cfg)
        names = model_cfg.transformer_tensor_names()
        title = "toy transformer weights"
    if args.tensors:
        names = [n for n in names if n.startswith(args.tensors)]
    averages = bit_statistics(store, names)
    csv_path = out / "bit_stats.csv"
    csv_path.write_text(bit_stats_csv(averages), encoding="utf-8")
    fig_path = out / "bit_averages.png"
    figure_bit_averages(averages, fig_path, title=f"bit averages: {title}")
    _write_manifest(out, args, args.seed or 0, [csv_path, fig_path], started)
    for position in range(15, -1, -1):
        sys.stdout.write(f"bit {position:2d}: {averages[position]:.4f}\n")
    return EXIT_OK


def cmd_corrupt(args: argparse.Namespace) -> int:
    data = Path(args.checkpoint).read_bytes()
    store = parse_checkpoint(data)
    if args.scheme == "sd2-unet":
        scheme = sd2_unet_naming_scheme()
    else:
        scheme = DiffuserConfig(seed=args.seed or 0).naming_scheme()
    selector = TensorSelector(
        block=Block(args.block),
        level=args.level,
        transformer_index=args.transformer,
        layer=Layer(args.layer),
        matrix=Matrix(args.matrix),
    )
    policy = (
        ElementPolicy.explicit(args.element)
        if args.element is not None
        else ElementPolicy.uniform()
    )
    spec = InjectionSpec(selector, bit=args.bit, element_policy=policy)
    view, record = inject(store, spec, args.seed or 0, scheme)
    Path(args.out).write_bytes(view.to_bytes())
    record_path = args.record or (str(args.out) + ".record.json")
    Path(record_path).write_text(
        json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    name = resolve_selector(selector, scheme)
    sys.stdout.write(
        f"flipped bit {record.bit} of {name}[{record.flat_index}]: "
        f"0x{record.original:04X} -> 0x{record.flipped:04X}\n"
    )
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    result = load_results(args.results)
    out = Path(args.out)
    written = render_report(result, out, metric=args.metric or None, grouping=args.grouping or None)
    for path in written:
        sys.stdout.write(f"wrote {path}\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seulab",
        description="Single-event-upset injection campaigns on a toy diffusion UNet.",
    )
    parser.add_argument("--version", action="version", version=f"seulab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="campaign config JSON")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--format", default="json,csv", help="comma list: json,csv")
        p.add_argument("--threads", type=int, default=1, help="parallel trial workers")

    p = sub.add_parser("baseline", help="error-free per-prompt scores and images")
    common(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("campaign", help="run the configured injection campaign")
    common(p)
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("bit-sweep", help="sweep all 16 bit positions on the first target")
    common(p)
    p.set_defaults(func=cmd_bit_sweep)

    p = sub.add_parser("bit-stats", help="per-bit averages over checkpoint tensors")
    p.add_argument("--checkpoint", default=None, help="container file (default: toy weights)")
    p.add_argument("--tensors", default=None, help="restrict to names with this prefix")
    p.add_argument("--seed", type=int, default=None, help="toy weight seed")
    p.add_argument("--out", default="out", help="output directory")
    p.set_defaults(func=cmd_bit_stats)

    p = sub.add_parser("corrupt", help="flip one bit of one element in a checkpoint file")
    p.add_argument("--checkpoint", required=True, help="input container file")
    p.add_argument("--out", required=True, help="corrupted container output path")
    p.add_argument("--scheme", choices=["toy", "sd2-unet"], default="toy")
    p.add_argument("--block", choices=["down", "mid", "up"], required=True)
    p.add_argument("--level", type=int, default=0)
    p.add_argument("--transformer", type=int, default=0)
    p.add_argument("--layer", choices=["sa", "ca", "ffn"], required=True)
    p.add_argument("--matrix", choices=["wq", "wk", "wv", "wo", "wf1", "wf2"], required=True)
    p.add_argument("--bit", type=int, default=14, help="bit position, LSB = 0 (default 14)")
    p.add_argument("--element", type=int, default=None, help="explicit flat index")
    p.add_argument("--seed", type=int, default=None, help="seed for the uniform element draw")
    p.add_argument("--record", default=None, help="injection record path")
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("report", help="render tables and figures from results.json")
    p.add_argument("--results", required=True, help="emitted results.json")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--metric", default=None, help="metric to tabulate/plot")
    p.add_argument("--grouping", default=None, choices=["by-layer", "by-block", "by-bit"])
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, ValidationError, FileNotFoundError, ValueError) as exc:
        sys.stderr.write(f"configuration error: {exc}\n")
        return EXIT_CONFIG
    except (CheckpointError, RuntimeError, OSError, np.linalg.LinAlgError) as exc:
        sys.stderr.write(f"runtime error: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
