"""Command-line surface: trace generation, selection, evaluation, reports.

Every command writes its primary artifacts plus a ``run_manifest.json``
recording the resolved arguments, a config hash, and wall time, so a run can
be reproduced from its output directory alone. Reports are RFC-4180 CSV with
a header row.

Exit codes: 0 success, 2 usage, 3 I/O failure, 4 data mismatch.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from fourier_kv.attention import (
    attend_compressed_fused,
    attend_compressed_materialized,
    attend_full,
    decompose_scores,
    output_divergence,
    perturb_dims,
)
from fourier_kv.cache import PartitionParams, append_token, memory_report, prefill_trace
from fourier_kv.dimselect import (
    CompressionSchema,
    build_selection_report,
    read_selection_manifest,
    schema_variants,
    selection_histogram,
    temporal_std,
    write_selection_manifest,
)
from fourier_kv.legt import compare_bases
from fourier_kv.spectral import ReconMode, build_basis
from fourier_kv.traceio import (
    TinyModelConfig,
    TraceFormatError,
    gen_synthetic,
    read_trace,
    tiny_forward,
    write_trace,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DATA = 4

THREADS_ENV = "FOURIER_KV_THREADS"

_RECON_MODES = {"paper": ReconMode.TRANSPOSE, "normalized": ReconMode.NORMALIZED}
_SCHEMA_NAMES = ("inverted", "uniform", "kv-inv", "layer-inv")


class DataMismatchError(ValueError):
    """Inputs are readable but inconsistent with each other or the flags."""


class UsageError(Exception):
    """Flag values that no input data could make valid."""


def _fmt(x) -> str:
    return f"{x:.10g}" if isinstance(x, float) else str(x)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(x) for x in row])


def _thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _map_slices(fn, items):
    threads = _thread_count()
    if threads == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _write_run_manifest(primary_output, command: str, args: dict, inputs, outputs, started: float):
    out_dir = Path(primary_output).resolve().parent
    canonical = json.dumps({"command": command, "args": args}, sort_keys=True)
    doc = {
        "command": command,
        "args": args,
        "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
        "seed": args.get("seed"),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "wall_time_s": round(time.monotonic() - started, 6),
    }
    with open(out_dir / "run_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _parse_dims(text: str):
    """Dimension list flag: '0-69' or '0,3,17' or a mix."""
    dims = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            dims.extend(range(int(lo), int(hi) + 1))
        else:
            dims.append(int(part))
    if not dims:
        raise argparse.ArgumentTypeError(f"no dimensions in {text!r}")
    return sorted(set(dims))


def _resolve_partition(args) -> PartitionParams:
    """Flag precedence: explicit value, then desk preset, then stock defaults."""
    desk = args.preset == "desk"
    init_len = args.init if args.init is not None else 4
    local_len = args.local if args.local is not None else (64 if desk else 1024)
    orders = args.k if args.k is not None else (16 if desk else 512)
    period = args.T if args.T is not None else (4096 if desk else 32768)
    return PartitionParams(init_len=init_len, local_len=local_len, period=period, orders=orders)


def _build_schema(name: str, layers: int) -> CompressionSchema:
    base = CompressionSchema.inverted_pyramid(layers)
    if name == "inverted":
        return base
    variants = schema_variants(base)
    return variants[{"uniform": "uniform", "kv-inv": "kv_inverted", "layer-inv": "layer_inverted"}[name]]


def cmd_gen_trace(args) -> int:
    started = time.monotonic()
    try:
        if args.kind == "tiny":
            config = TinyModelConfig(
                layers=args.layers,
                heads=args.q_heads or args.heads,
                kv_heads=args.heads,
                head_dim=args.dim,
                vocab=args.vocab,
                seed=args.seed,
            )
            tokens = np.random.default_rng(args.seed).integers(0, args.vocab, size=args.len)
            trace = tiny_forward(config, tokens)
        else:
            trace = gen_synthetic(
                args.kind,
                layers=args.layers,
                kv_heads=args.heads,
                head_dim=args.dim,
                seq_len=args.len,
                seed=args.seed,
                period=args.period,
                tone_order=args.tone_order,
                band_orders=args.band_orders,
                sigma=args.sigma,
                value=args.value,
            )
    except ValueError as exc:
        # generator complaints are always flag-derived here
        raise UsageError(str(exc)) from exc
    write_trace(args.out, trace)
    _write_run_manifest(
        args.out, "gen-trace", _public_args(args), inputs=[], outputs=[args.out], started=started
    )
    print(f"wrote {args.out}: {trace.layers}x{trace.kv_heads}x{trace.seq_len}x{trace.head_dim}")
    return EXIT_OK


def cmd_select(args) -> int:
    started = time.monotonic()
    trace = read_trace(args.trace)
    partition = _resolve_partition(args)
    basis = build_basis(partition.orders, partition.period)
    schema = _build_schema(args.schema, trace.layers)
    report = build_selection_report(trace, schema, partition, basis)
    write_selection_manifest(report, args.out_manifest)

    hist_path = args.hist_csv or str(Path(args.out_manifest).with_name("histogram.csv"))
    hist = selection_histogram(report)
    rows = []
    for layer in range(hist.shape[0]):
        for kv_idx, kv in enumerate(("K", "V")):
            for grp in range(hist.shape[2]):
                rows.append((layer, kv, grp * 16, hist[layer, kv_idx, grp]))
    _write_csv(hist_path, ("layer", "kv", "group_start", "mean_compressed"), rows)
    _write_run_manifest(
        args.out_manifest, "select", _public_args(args),
        inputs=[args.trace], outputs=[args.out_manifest, hist_path], started=started,
    )
    frac = schema.aggregate_fraction()
    print(f"selection written: schema={schema.preset} aggregate_fraction={frac:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.monotonic()
    trace = read_trace(args.trace)
    layout, schema = read_selection_manifest(args.manifest)
    if (trace.layers, trace.kv_heads, trace.head_dim) != (
        layout.layers, layout.kv_heads, layout.head_dim,
    ):
        raise DataMismatchError(
            f"trace geometry ({trace.layers}, {trace.kv_heads}, {trace.head_dim}) does not "
            f"match manifest ({layout.layers}, {layout.kv_heads}, {layout.head_dim})"
        )
    mode = _RECON_MODES[args.mode]
    basis = build_basis(layout.partition.orders, layout.partition.period)
    cache = prefill_trace(trace, layout, basis)

    # originals grow alongside the compressed cache so the dense oracle stays honest
    keys = [[trace.keys[l, h].astype(np.float64) for h in range(trace.kv_heads)]
            for l in range(trace.layers)]
    values = [[trace.values[l, h].astype(np.float64) for h in range(trace.kv_heads)]
              for l in range(trace.layers)]

    rng = np.random.default_rng(args.seed)
    rows = []
    pairs = [(l, h) for l in range(trace.layers) for h in range(trace.kv_heads)]
    for step in range(args.decode_steps):
        for layer, head in pairs:
            k_vec = rng.standard_normal(trace.head_dim).astype(np.float32)
            v_vec = rng.standard_normal(trace.head_dim).astype(np.float32)
            cache.append(layer, head, k_vec, v_vec)
            keys[layer][head] = np.vstack([keys[layer][head], k_vec])
            values[layer][head] = np.vstack([values[layer][head], v_vec])
        queries = {pair: rng.standard_normal(trace.head_dim) for pair in pairs}

        def compare(pair):
            layer, head = pair
            q = queries[pair]
            ref = attend_full(q, keys[layer][head], values[layer][head])
            sl = cache.slice(layer, head)
            mat = attend_compressed_materialized(q, sl, basis, mode)
            fus = attend_compressed_fused(q, sl, basis, mode, tile=args.tile)
            out = []
            for path, cand in (("materialized", mat), ("fused", fus)):
                metrics = output_divergence(ref, cand)
                out.append((layer, head, step, path,
                            metrics["max_abs"], metrics["rmse"], metrics["cosine"]))
            return out

        for chunk in _map_slices(compare, pairs):
            rows.extend(chunk)

    _write_csv(
        args.report,
        ("layer", "head", "step", "path", "max_abs", "rmse", "cosine"),
        rows,
    )
    final_len = trace.seq_len + args.decode_steps
    mem = memory_report(layout, final_len)
    mem_path = str(Path(args.report).with_name("memory.csv"))
    _write_csv(
        mem_path,
        ("seq_len", "exact_floats", "spectral_floats", "full_cache_floats",
         "compressed_fraction", "ratio_vs_full"),
        [(final_len, mem["exact_floats"], mem["spectral_floats"], mem["full_cache_floats"],
          mem["compressed_fraction"], mem["ratio_vs_full"])],
    )
    _write_run_manifest(
        args.report, "eval", _public_args(args),
        inputs=[args.trace, args.manifest], outputs=[args.report, mem_path], started=started,
    )
    worst = max((r[4] for r in rows), default=0.0)
    print(f"eval: {len(rows)} comparisons, worst max_abs={worst:.3e}, "
          f"compressed_fraction={mem['compressed_fraction']:.4f}")
    return EXIT_OK


def cmd_compare_bases(args) -> int:
    started = time.monotonic()
    trace = read_trace(args.trace)
    report = compare_bases(trace, args.k, tensor=args.tensor)
    _write_csv(
        args.out,
        ("layer", "head", "dim", "mse_fourier", "mse_legt"),
        report.rows,
    )
    _write_run_manifest(
        args.out, "compare-bases", _public_args(args),
        inputs=[args.trace], outputs=[args.out], started=started,
    )
    print(f"win_rate={report.win_rate:.4f} over {len(report.rows)} dimensions "
          f"(fourier_orders={report.fourier_orders}, legt_order={report.legt_order})")
    return EXIT_OK


def cmd_analyze(args) -> int:
    started = time.monotonic()
    trace = read_trace(args.trace)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    std_path = out_dir / "temporal_std.csv"
    curves = temporal_std(trace)
    rows = []
    for layer in range(curves.shape[0]):
        for kv_idx, kv in enumerate(("K", "V")):
            for rank in range(curves.shape[2]):
                rows.append((layer, kv, rank, curves[layer, kv_idx, rank]))
    _write_csv(std_path, ("layer", "kv", "sorted_dim", "std"), rows)

    # score decomposition heatmap for one head, keys doubling as queries
    layer, head = args.layer, args.head
    if not (0 <= layer < trace.layers and 0 <= head < trace.kv_heads):
        raise DataMismatchError(f"layer/head ({layer}, {head}) out of trace range")
    split_dim = args.split_dim
    if split_dim is None:
        # the canonical 70-of-128 split, scaled to this trace's head width
        split_dim = max(1, round(trace.head_dim * 70 / 128))
    block = trace.keys[layer, head].astype(np.float64)
    low, high = decompose_scores(block, block, split_dim=split_dim)
    heat_path = out_dir / "score_decomposition.csv"
    heat_rows = []
    for qi in range(block.shape[0]):
        for kj in range(qi + 1):  # causal triangle
            heat_rows.append((qi, kj, low[qi, kj], high[qi, kj], low[qi, kj] + high[qi, kj]))
    _write_csv(heat_path, ("query_pos", "key_pos", "low", "high", "full"), heat_rows)

    perturbed = perturb_dims(trace, dims=args.dims, sigma=args.sigma, seed=args.seed)
    pert_path = out_dir / "perturbation.csv"
    pert_rows = []
    for l in range(trace.layers):
        for h in range(trace.kv_heads):
            q = trace.keys[l, h, -1].astype(np.float64)
            ref = attend_full(q, trace.keys[l, h], trace.values[l, h])
            cand = attend_full(q, perturbed.keys[l, h], perturbed.values[l, h])
            metrics = output_divergence(ref, cand)
            pert_rows.append((l, h, metrics["max_abs"], metrics["rmse"], metrics["cosine"]))
    _write_csv(pert_path, ("layer", "head", "max_abs", "rmse", "cosine"), pert_rows)

    _write_run_manifest(
        std_path, "analyze", _public_args(args),
        inputs=[args.trace], outputs=[std_path, heat_path, pert_path], started=started,
    )
    print(f"analyze: wrote {std_path.name}, {heat_path.name}, {pert_path.name} to {out_dir}")
    return EXIT_OK


def _public_args(args) -> dict:
    skip = {"func"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fourier-kv",
        description="Spectral KV-cache compression: traces, selection, evaluation, reports.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-trace", help="generate a synthetic or tiny-transformer trace")
    gen.add_argument("--kind", required=True,
                     choices=["constant", "tone", "bandlimited", "noise", "mix", "tiny"])
    gen.add_argument("--layers", type=int, default=2)
    gen.add_argument("--heads", type=int, default=2, help="KV heads")
    gen.add_argument("--q-heads", type=int, default=None, help="query heads (tiny; default = --heads)")
    gen.add_argument("--dim", type=int, default=16)
    gen.add_argument("--len", type=int, default=256)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--period", type=int, default=None, help="signal period for tone/bandlimited/mix")
    gen.add_argument("--tone-order", type=int, default=1)
    gen.add_argument("--band-orders", type=int, default=4)
    gen.add_argument("--sigma", type=float, default=1.0)
    gen.add_argument("--value", type=float, default=1.0)
    gen.add_argument("--vocab", type=int, default=128)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen_trace)

    sel = sub.add_parser("select", help="rank dimensions and write a selection manifest")
    sel.add_argument("--trace", required=True)
    sel.add_argument("--schema", default="inverted", choices=_SCHEMA_NAMES)
    sel.add_argument("--k", type=int, default=None, help="spectral state count")
    sel.add_argument("--T", type=int, default=None, help="spectral window length")
    sel.add_argument("--init", type=int, default=None)
    sel.add_argument("--local", type=int, default=None)
    sel.add_argument("--preset", choices=["desk"], default=None,
                     help="desk-scale defaults: local=64, k=16, T=4096")
    sel.add_argument("--hist-csv", default=None)
    sel.add_argument("--out-manifest", required=True)
    sel.set_defaults(func=cmd_select)

    ev = sub.add_parser("eval", help="prefill, decode, and compare attention paths")
    ev.add_argument("--trace", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--mode", default="normalized", choices=sorted(_RECON_MODES))
    ev.add_argument("--decode-steps", type=int, default=8)
    ev.add_argument("--tile", type=int, default=64)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--report", required=True)
    ev.set_defaults(func=cmd_eval)

    cmp_ = sub.add_parser("compare-bases", help="Fourier vs Legendre reconstruction MSE")
    cmp_.add_argument("--trace", required=True)
    cmp_.add_argument("--k", type=int, required=True, help="Fourier state count (Legendre gets 2k)")
    cmp_.add_argument("--tensor", default="keys", choices=["keys", "values"])
    cmp_.add_argument("--out", required=True)
    cmp_.set_defaults(func=cmd_compare_bases)

    an = sub.add_parser("analyze", help="std curves, score decomposition, perturbation report")
    an.add_argument("--trace", required=True)
    an.add_argument("--split-dim", type=int, default=None,
                    help="low/high boundary (default: 70/128 of head_dim)")
    an.add_argument("--sigma", type=float, default=1.0)
    an.add_argument("--dims", type=_parse_dims, default=[0],
                    help="dimensions to perturb, e.g. '0-69' or '0,3,17'")
    an.add_argument("--layer", type=int, default=0)
    an.add_argument("--head", type=int, default=0)
    an.add_argument("--seed", type=int, default=0)
    an.add_argument("--out", required=True, help="output directory")
    an.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TraceFormatError, DataMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
