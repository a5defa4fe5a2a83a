"""Persist campaign output: delimited files, text tables, images, figures.

Emission is deterministic: fixed field order, repr-precision floats and
sorted JSON keys, so re-emitting the same result is byte-identical and a
re-parsed JSON result reproduces the in-memory aggregates exactly.

CSV schemas (stable, versioned with the package):

    aggregates.csv  target_id,metric,mean,std,count
    trials.csv      target_id,trial,prompt_index,tensor,flat_index,bit,
                    original,flipped,non_finite,<one column per metric>
    bits.csv        bit,metric,mean,std,count            (bit sweeps)
    bit_stats.csv   position,field,average                (checkpoint stats)
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .campaign import BitSweepResult, CampaignResult  # noqa: E402
from .half16 import bit_field_of  # noqa: E402


class MissingCacheError(Exception):
    """Images were requested from a result that no longer carries them."""


def default_metric(result: "CampaignResult | BitSweepResult") -> str:
    """Preferred metric for tables and plots, falling back to the first configured."""
    metrics = result.config["metrics"]
    preferred = "clip_like" if isinstance(result, CampaignResult) else "rel_deviation"
    return preferred if preferred in metrics else metrics[0]


class UnknownGroupingError(ValueError):
    """The requested table grouping does not apply to this result."""


# -- delimited + JSON ---------------------------------------------------------


def load_results(path: str | Path) -> CampaignResult | BitSweepResult:
    """Re-load an emitted JSON result (images are not persisted)."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    kind = data.get("kind")
    if kind == "campaign":
        return CampaignResult.from_dict(data)
    if kind == "bit_sweep":
        return BitSweepResult.from_dict(data)
    raise ValueError(f"unrecognized result kind: {kind!r}")


def _csv_text(rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def aggregates_csv(result: CampaignResult) -> str:
    rows = [["target_id", "metric", "mean", "std", "count"]]
    metrics = result.config["metrics"]
    for tid in result.target_ids:
        for metric in metrics:
            agg = result.aggregates[tid][metric]
            rows.append([tid, metric, repr(agg["mean"]), repr(agg["std"]), agg["count"]])
    return _csv_text(rows)


def trials_csv(result: CampaignResult | BitSweepResult) -> str:
    metrics = result.config["metrics"]
    header = [
        "target_id", "trial", "prompt_index", "tensor", "flat_index",
        "bit", "original", "flipped", "non_finite",
    ] + list(metrics)
    rows = [header]
    for outcome in result.outcomes:
        rec = outcome.injection
        for i, scores in enumerate(outcome.per_prompt):
            rows.append(
                [
                    outcome.target_id, outcome.trial, i, rec.tensor, rec.flat_index,
                    rec.bit, f"0x{rec.original:04X}", f"0x{rec.flipped:04X}",
                    int(outcome.non_finite),
                ]
                + [repr(scores[m]) for m in metrics]
            )
    return _csv_text(rows)


def bits_csv(sweep: BitSweepResult) -> str:
    rows = [["bit", "metric", "mean", "std", "count"]]
    metrics = sweep.config["metrics"]
    for bit in range(16):
        for metric in metrics:
            agg = sweep.per_bit[str(bit)][metric]
            rows.append([bit, metric, repr(agg["mean"]), repr(agg["std"]), agg["count"]])
    return _csv_text(rows)


def bit_stats_csv(averages: np.ndarray) -> str:
    rows = [["position", "field", "average"]]
    for position in range(15, -1, -1):
        rows.append([position, bit_field_of(position).value, repr(float(averages[position]))])
    return _csv_text(rows)


def emit_results(
    result: CampaignResult | BitSweepResult,
    out_dir: str | Path,
    formats: tuple[str, ...] = ("json", "csv"),
) -> list[Path]:
    """Write the result files; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        path = out / "results.json"
        path.write_text(result.to_json(), encoding="utf-8")
        written.append(path)
    if "csv" in formats:
        if isinstance(result, CampaignResult):
            path = out / "aggregates.csv"
            path.write_text(aggregates_csv(result), encoding="utf-8")
            written.append(path)
        else:
            path = out / "bits.csv"
            path.write_text(bits_csv(result), encoding="utf-8")
            written.append(path)
        path = out / "trials.csv"
        path.write_text(trials_csv(result), encoding="utf-8")
        written.append(path)
    return written


# -- text tables --------------------------------------------------------------

_LAYER_COLUMNS = ("SA", "CA", "FC1", "FC2")
_BLOCK_ORDER = {"down": 0, "mid": 1, "up": 2}


def _format_grid(header: list[str], rows: list[list[str]]) -> str:
    widths = [len(h) for h in header]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    lines = []
    for row in [header] + rows:
        lines.append("  ".join(cell.rjust(widths[i]) for i, cell in enumerate(row)))
    return "\n".join(lines) + "\n"


def _block_rows(result: CampaignResult) -> list[tuple[str, list[dict]]]:
    by_label: dict[str, list[dict]] = {}
    order: dict[str, tuple] = {}
    for info in result.target_info:
        label = info["block_label"]
        by_label.setdefault(label, []).append(info)
        order[label] = (_BLOCK_ORDER[info["block"]], info["level"])
    labels = sorted(by_label, key=lambda lbl: order[lbl])
    return [(lbl, by_label[lbl]) for lbl in labels]


def summary_table(
    result: CampaignResult | BitSweepResult,
    grouping: str = "by-layer",
    metric: str = "clip_like",
) -> str:
    """Render aggregates as an aligned text table.

    ``by-layer``: one row per block (DB1.., MB, UB1..), columns SA / CA /
    FC1 / FC2, cells are the metric mean over matching targets ("-" when
    the campaign had none).  ``by-block``: one row per block with a single
    mean column.  ``by-bit``: 16 columns, only for bit-sweep results.
    Cells are formatted with two decimals; layout is byte-stable.
    """
    if grouping == "by-bit":
        if not isinstance(result, BitSweepResult):
            raise UnknownGroupingError("by-bit grouping needs a bit-sweep result")
        header = ["bit"] + [str(b) for b in range(16)]
        row = [metric] + [f"{v:.2f}" for v in result.metric_by_bit(metric)]
        return _format_grid(header, [row])
    if isinstance(result, BitSweepResult):
        raise UnknownGroupingError(f"bit-sweep results only support by-bit, not {grouping!r}")
    if grouping not in ("by-layer", "by-block"):
        raise UnknownGroupingError(f"unknown grouping {grouping!r}")
    if metric not in result.config["metrics"]:
        raise UnknownGroupingError(f"metric {metric!r} not present in result")

    if grouping == "by-block":
        header = ["block", metric]
        rows = []
        for label, infos in _block_rows(result):
            values = [result.aggregates[i["id"]][metric]["mean"] for i in infos]
            rows.append([label, f"{float(np.mean(values)):.2f}"])
        return _format_grid(header, rows)

    header = ["block"] + list(_LAYER_COLUMNS)
    rows = []
    for label, infos in _block_rows(result):
        row = [label]
        for column in _LAYER_COLUMNS:
            values = [
                result.aggregates[i["id"]][metric]["mean"]
                for i in infos
                if i["layer_label"] == column
            ]
            row.append(f"{float(np.mean(values)):.2f}" if values else "-")
        rows.append(row)
    return _format_grid(header, rows)


def baseline_table(prompts: list[str], scores: list[float]) -> str:
    """Error-free score listing: index, prompt, score (two decimals)."""
    header = ["index", "prompt", "score"]
    rows = [
        [str(i + 1), prompt, f"{score:.2f}"]
        for i, (prompt, score) in enumerate(zip(prompts, scores))
    ]
    widths = [len(h) for h in header]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    lines = ["  ".join(c.ljust(widths[i]) for i, c in enumerate(row)) for row in [header] + rows]
    return "\n".join(line.rstrip() for line in lines) + "\n"


# -- images -------------------------------------------------------------------


def write_ppm(image: np.ndarray, path: str | Path) -> None:
    """Write a (3, H, W) image in [0, 1] as a plain (ASCII P3) pixel map."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {arr.shape}")
    quantized = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint16)
    _, h, w = quantized.shape
    lines = [f"P3\n{w} {h}\n255\n"]
    flat = quantized.transpose(1, 2, 0).reshape(-1, 3)
    for r, g, b in flat:
        lines.append(f"{r} {g} {b}\n")
    Path(path).write_text("".join(lines), encoding="ascii")


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a plain P3 file back into a (3, H, W) uint8 array."""
    tokens = Path(path).read_text(encoding="ascii").split()
    if tokens[0] != "P3":
        raise ValueError("not a plain P3 pixel map")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError("expected 8-bit pixel map")
    values = np.array(tokens[4:], dtype=np.uint8)
    return values.reshape(h, w, 3).transpose(2, 0, 1)


def export_images(
    result: CampaignResult, out_dir: str | Path, which: str = "both"
) -> list[Path]:
    """Write cached baseline images and/or per-target exemplar images as PPM.

    ``which`` is "baseline", "exemplars" or "both".  Raises
    MissingCacheError when the result was re-loaded from JSON and no
    longer carries pixel data.
    """
    if which not in ("baseline", "exemplars", "both"):
        raise ValueError(f"unknown image selection {which!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if which in ("baseline", "both"):
        if not result.baseline_images:
            raise MissingCacheError("result carries no cached baseline images")
        for i, image in enumerate(result.baseline_images):
            path = out / f"baseline_prompt{i}.ppm"
            write_ppm(image, path)
            written.append(path)
    if which in ("exemplars", "both"):
        if not result.exemplar_images:
            raise MissingCacheError("result carries no cached exemplar images")
        for tid in result.target_ids:
            path = out / f"exemplar_{tid}.ppm"
            write_ppm(result.exemplar_images[tid], path)
            written.append(path)
    return written


# -- figures ------------------------------------------------------------------


def figure_scores_by_layer(
    result: CampaignResult, path: str | Path, metric: str = "clip_like"
) -> None:
    """Grouped bar chart: metric mean per block, one bar group per layer type."""
    blocks = _block_rows(result)
    labels = [label for label, _ in blocks]
    columns = [
        c for c in _LAYER_COLUMNS
        if any(i["layer_label"] == c for _, infos in blocks for i in infos)
    ]
    x = np.arange(len(labels))
    width = 0.8 / max(1, len(columns))
    fig, ax = plt.subplots(figsize=(7, 4))
    for k, column in enumerate(columns):
        values = []
        for _, infos in blocks:
            cell = [
                result.aggregates[i["id"]][metric]["mean"]
                for i in infos if i["layer_label"] == column
            ]
            values.append(float(np.mean(cell)) if cell else np.nan)
        ax.bar(x + (k - (len(columns) - 1) / 2) * width, values, width, label=column)
    ax.set_xticks(x, labels)
    ax.set_ylabel(metric)
    ax.set_title(f"{metric} per block and layer type")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def figure_bit_sweep(
    sweep: BitSweepResult, path: str | Path, metric: str = "rel_deviation"
) -> None:
    """Metric mean per flipped bit position, colored by bit field."""
    values = sweep.metric_by_bit(metric)
    colors = {
        "sign": "tab:green", "exponent": "tab:red", "mantissa": "tab:blue",
    }
    fig, ax = plt.subplots(figsize=(7, 4))
    positions = np.arange(16)
    ax.bar(
        positions, values,
        color=[colors[bit_field_of(p).value] for p in range(16)],
    )
    ax.set_xticks(positions)
    ax.set_xlabel("flipped bit position (15 = sign, 14..10 = exponent, 9..0 = mantissa)")
    ax.set_ylabel(metric)
    if all(v > 0 for v in values):
        ax.set_yscale("log")
    ax.set_title(f"{metric} per flipped bit ({sweep.tensor})")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def figure_bit_averages(averages: np.ndarray, path: str | Path, title: str = "") -> None:
    """Average set-bit fraction per position over a checkpoint."""
    fig, ax = plt.subplots(figsize=(7, 4))
    positions = np.arange(15, -1, -1)
    ax.bar(np.arange(16), [averages[p] for p in positions], color="tab:blue")
    ax.set_xticks(np.arange(16), [str(p) for p in positions])
    ax.set_xlabel("bit position (sign first)")
    ax.set_ylabel("average bit value")
    ax.set_ylim(0, 1)
    ax.set_title(title or "average value per bit position")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_report(
    result: CampaignResult | BitSweepResult,
    out_dir: str | Path,
    metric: str | None = None,
    grouping: str | None = None,
) -> list[Path]:
    """Tables plus figures for an in-memory or re-loaded result."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if isinstance(result, BitSweepResult):
        metric = metric or default_metric(result)
        table_path = out / "bit_table.txt"
        table_path.write_text(summary_table(result, "by-bit", metric), encoding="utf-8")
        written.append(table_path)
        csv_path = out / "bits.csv"
        csv_path.write_text(bits_csv(result), encoding="utf-8")
        written.append(csv_path)
        fig_path = out / "bit_sweep.png"
        figure_bit_sweep(result, fig_path, metric)
        written.append(fig_path)
        return written

    metric = metric or default_metric(result)
    groupings = [grouping] if grouping else ["by-layer", "by-block"]
    for g in groupings:
        table_path = out / f"table_{g.replace('-', '_')}.txt"
        table_path.write_text(summary_table(result, g, metric), encoding="utf-8")
        written.append(table_path)
    csv_path = out / "aggregates.csv"
    csv_path.write_text(aggregates_csv(result), encoding="utf-8")
    written.append(csv_path)
    baseline_path = out / "baseline_scores.txt"
    baseline_path.write_text(
        baseline_table(
            list(result.config["prompts"]),
            [p.get("clip_like", float("nan")) for p in result.baseline],
        ),
        encoding="utf-8",
    )
    written.append(baseline_path)
    fig_path = out / "scores_by_layer.png"
    figure_scores_by_layer(result, fig_path, metric)
    written.append(fig_path)
    return written
