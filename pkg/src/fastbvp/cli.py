"""``fastbvp`` command line: synth, train, infer, eval, budget, decompose.

Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.
Every command that writes outputs also writes one run manifest next to them.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DivergenceError, FastBvpError, TooShortError
from .physio import BASELINES, baseline_extract, hr_from_bvp, metrics, physio_report
from .spectral import DEFAULT_BANDS, bands_to_dict, decompose, load_bands
from .srrn import SrrnConfig, SrrnModel, budget, default_config_path, load_config, load_model, save_model
from .stmap import load_stmap, preprocess
from .synth import SynthSpec, build_corpus, load_corpus
from .train import TrainConfig, fit, pad_to_valid, predict, normalized_yuv, assemble_input

log = logging.getLogger("fastbvp")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
MIN_INFER_SECONDS = 15.0
DEFAULT_SAMPLE_RATE = 30.0
#: Fields that legitimately differ between otherwise identical runs.
WALL_CLOCK_FIELDS = ("started_at", "duration_s")


class UsageError(FastBvpError):
    """Bad arguments or inputs detected by a command (exit 2)."""


@dataclass
class RunManifest:
    command: str
    argv: list
    config_paths: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    tool_version: str = __version__
    threads: int = 1
    started_at: float = 0.0
    duration_s: float = 0.0
    notes: dict = field(default_factory=dict)

    def write(self, path) -> Path:
        path = Path(path)
        self.outputs.setdefault("manifest", str(path))
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True), encoding="utf-8")
        return path


def _manifest_path(out: Path) -> Path:
    """``<dir>/run_manifest.json`` for directory outputs, ``<file>.run.json`` otherwise."""
    if out.suffix == "" or out.is_dir():
        return out / "run_manifest.json"
    return out.with_name(out.name + ".run.json")


def _read_json(path, what: str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return doc


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc}") from None
    if not os.access(path, os.W_OK):
        raise UsageError(f"output directory {path} is not writable")
    return path


def _model_config(args) -> tuple[SrrnConfig, str]:
    path = args.model_config or args.config or default_config_path()
    if not Path(path).is_file():
        raise UsageError(f"model config not found: {path}")
    return load_config(path), str(path)


def _bands(args) -> tuple[tuple, str | None]:
    if getattr(args, "bands", None):
        if not Path(args.bands).is_file():
            raise UsageError(f"band config not found: {args.bands}")
        return load_bands(args.bands), str(args.bands)
    return DEFAULT_BANDS, None


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(v) -> str:
    return repr(float(v)) if v is not None and np.isfinite(v) else "nan"


# --- plots -------------------------------------------------------------------


def _plot_waveform(path: Path, bvp, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    t = np.arange(len(bvp.samples)) / bvp.sample_rate
    fig, ax = plt.subplots(figsize=(10, 3))
    ax.plot(t, bvp.samples, lw=0.8)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("BVP (a.u.)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _plot_gains(path: Path, gains: dict) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = sorted(gains)
    fig, axes = plt.subplots(1, len(names), figsize=(4 * len(names), 3), squeeze=False)
    for ax, name in zip(axes[0], names):
        g = gains[name][0].mean(axis=1)  # (regions, segments), averaged over channels
        im = ax.imshow(g, aspect="auto", vmin=0.0, vmax=2.0, cmap="viridis")
        ax.set_title(name)
        ax.set_xlabel("segment")
        ax.set_ylabel("region")
        fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# --- commands ----------------------------------------------------------------


def cmd_synth(args, run: RunManifest) -> Path:
    doc = _read_json(args.spec, "synth spec") if args.spec else {}
    if args.count is not None:
        doc["count"] = args.count
    if args.seed is not None:
        doc["seed"] = args.seed
    spec = SynthSpec.from_dict(doc)
    out = _ensure_dir(Path(args.out))
    build_corpus(spec, out)
    run.config_paths["spec"] = args.spec
    run.seeds["corpus"] = spec.seed
    run.outputs["corpus"] = str(out)
    run.notes["count"] = spec.count
    log.info("wrote %d samples to %s", spec.count, out)
    return _manifest_path(out)


def _load_corpus(path) -> list:
    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise UsageError(f"no corpus manifest in {path}")
    corpus = load_corpus(path)
    if not corpus:
        raise UsageError(f"corpus {path} is empty")
    return corpus


def cmd_train(args, run: RunManifest) -> Path:
    config, config_path = _model_config(args)
    bands, bands_path = _bands(args)
    if len(bands) != config.n_bands:
        raise UsageError(f"model config expects {config.n_bands} bands, band config has {len(bands)}")
    doc = _read_json(args.train_config, "train config") if args.train_config else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.epochs is not None:
        doc["phase1_epochs"], doc["phase2_epochs"] = args.epochs
    tcfg = TrainConfig.from_dict(doc)
    out = _ensure_dir(Path(args.out))
    corpus = _load_corpus(args.corpus)
    model = SrrnModel(config, seed=tcfg.seed)
    trained, history = fit(corpus, model, tcfg, bands=bands)
    fs = corpus[0].map.sample_rate
    hrs = [s.reference_hr for s in corpus]
    save_model(out / "checkpoint", trained, bands, {
        "train_config": tcfg.to_dict(),
        "sample_rate": fs,
        "hr_fallback": float(np.mean(hrs)),
    })
    history.to_csv(out / "history.csv")
    run.config_paths.update(model=config_path, train=args.train_config, bands=bands_path)
    run.seeds.update(train=tcfg.seed, init=tcfg.seed)
    run.inputs["corpus"] = str(args.corpus)
    run.outputs.update(checkpoint=str(out / "checkpoint"), history=str(out / "history.csv"))
    best = history.best
    run.notes["best_epoch"] = None if best is None else best["epoch"]
    return _manifest_path(out)


def _load_checkpoint(path):
    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise UsageError(f"no checkpoint manifest in {path}")
    return load_model(path)


def cmd_infer(args, run: RunManifest) -> Path:
    model, bands, manifest = _load_checkpoint(args.checkpoint)
    fs = args.sample_rate or manifest.get("sample_rate", DEFAULT_SAMPLE_RATE)
    stmap = load_stmap(args.input, fs)
    if stmap.duration < MIN_INFER_SECONDS:
        raise TooShortError(f"{args.input}: clip is {stmap.duration:.1f} s, inference needs >= {MIN_INFER_SECONDS:.0f} s")
    if stmap.regions != model.config.regions:
        raise UsageError(f"{args.input}: {stmap.regions} regions, checkpoint expects {model.config.regions}")
    bvp = predict(model, [stmap], bands)[0]
    report = physio_report(bvp)
    out = Path(args.out)
    _ensure_dir(out.parent if str(out.parent) else Path("."))
    _write_csv(out, ["frame", "time_s", "bvp"],
               [[i, repr(i / fs), repr(float(v))] for i, v in enumerate(bvp.samples)])
    report_path = Path(args.report) if args.report else out.with_name(out.stem + ".report.json")
    report.update(input=str(args.input), frames=stmap.frames)
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    run.inputs.update(checkpoint=str(args.checkpoint), stmap=str(args.input))
    run.outputs.update(bvp=str(out), report=str(report_path))
    if args.plot_dir:
        plot_dir = _ensure_dir(Path(args.plot_dir))
        _plot_waveform(plot_dir / "bvp.png", bvp, f"{Path(args.input).name}: HR {report['hr_bpm'] or float('nan'):.1f} bpm")
        if model.config.use_ssa:
            x = normalized_yuv(stmap)[None]
            gains = model.ssa_gains(assemble_input(pad_to_valid(x, model.config), fs, bands))
            _plot_gains(plot_dir / "ssa_gains.png", gains)
            run.outputs["ssa_plot"] = str(plot_dir / "ssa_gains.png")
        run.outputs["waveform_plot"] = str(plot_dir / "bvp.png")
    return _manifest_path(out)


def _hr_or(bvp, fallback: float) -> tuple[float, bool]:
    try:
        return hr_from_bvp(bvp), False
    except FastBvpError:
        return fallback, True


def evaluate(model, bands, corpus, fallback: float) -> tuple[list, dict]:
    """Rows ``(method, MetricReport)`` for FastBVP and every baseline, plus failure counts."""
    truth = np.array([s.reference_hr for s in corpus])
    preds = {"FastBVP": predict(model, [s.map for s in corpus], bands)}
    for method in BASELINES:
        preds[method] = [baseline_extract(s.map, method) for s in corpus]
    rows, failures = [], {}
    for method, bvps in preds.items():
        hrs, failed = zip(*(_hr_or(b, fallback) for b in bvps))
        failures[method] = int(sum(failed))
        rows.append((method, metrics(np.array(hrs), truth, allow_undefined_r=True)))
    return rows, failures


def cmd_eval(args, run: RunManifest) -> Path:
    model, bands, manifest = _load_checkpoint(args.checkpoint)
    corpus = _load_corpus(args.corpus)
    fallback = float(manifest.get("hr_fallback", 90.0))
    rows, failures = evaluate(model, bands, corpus, fallback)
    out = Path(args.out)
    _ensure_dir(out.parent if str(out.parent) else Path("."))
    _write_csv(out, ["method", "mae", "rmse", "std", "r"],
               [[m, _fmt(r.mae), _fmt(r.rmse), _fmt(r.std), _fmt(r.r)] for m, r in rows])
    for method, rep in rows:
        print(f"{method:8s} MAE {rep.mae:7.3f}  RMSE {rep.rmse:7.3f}  Std {rep.std:7.3f}  r {rep.r:6.3f}")
    run.inputs.update(checkpoint=str(args.checkpoint), corpus=str(args.corpus))
    run.outputs["metrics"] = str(out)
    run.notes.update(peak_failures=failures, hr_fallback=fallback, clips=len(corpus))
    return _manifest_path(out)


def cmd_budget(args, run: RunManifest) -> Path | None:
    config, config_path = _model_config(args)
    lines = []
    totals = {}
    for frames in args.frames:
        b = budget(config, frames)
        totals[frames] = b
    first = totals[args.frames[0]]
    lines.append(f"total parameters: {first.total_params}")
    for frames, b in totals.items():
        lines.append(f"total FLOPs (T={frames}): {b.total_flops:.4g}")
    lines.append("")
    header = f"{'layer':16s} {'params':>8s}" + "".join(f" {'FLOPs@' + str(f):>14s}" for f in totals)
    lines.append(header)
    for i, layer in enumerate(first.layers):
        cells = "".join(f" {totals[f].layers[i].flops:14.4g}" for f in totals)
        lines.append(f"{layer.name:16s} {layer.params:8d}{cells}")
    print("\n".join(lines))
    run.config_paths["model"] = config_path
    run.notes.update(total_params=first.total_params, total_flops={str(f): b.total_flops for f, b in totals.items()})
    if not args.out:
        return None
    out = Path(args.out)
    _ensure_dir(out.parent if str(out.parent) else Path("."))
    _write_csv(out, ["layer", "params"] + [f"flops_T{f}" for f in totals],
               [[l.name, l.params] + [repr(totals[f].layers[i].flops) for f in totals] for i, l in enumerate(first.layers)])
    run.outputs["table"] = str(out)
    return _manifest_path(out)


def cmd_decompose(args, run: RunManifest) -> Path:
    bands, bands_path = _bands(args)
    stmap = load_stmap(args.input, args.sample_rate or DEFAULT_SAMPLE_RATE)
    multi = decompose(preprocess(stmap), bands)
    out = _ensure_dir(Path(args.out))
    header = ["frame"] + [f"r{i}_{c}" for i in range(1, stmap.regions + 1) for c in "YUV"]
    written = []
    for k, band in enumerate(bands):
        flat = multi[k].reshape(stmap.regions * 3, stmap.frames).T
        path = out / f"band{k}_{band.lo:g}-{band.hi:g}Hz.csv"
        _write_csv(path, header, [[n] + [repr(float(v)) for v in row] for n, row in enumerate(flat)])
        written.append(str(path))
    (out / "bands.json").write_text(json.dumps(bands_to_dict(bands), indent=2), encoding="utf-8")
    run.config_paths["bands"] = bands_path
    run.inputs["stmap"] = str(args.input)
    run.outputs["bands"] = written
    return _manifest_path(out)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "budget": cmd_budget,
    "decompose": cmd_decompose,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fastbvp", description="Lightweight rPPG BVP extraction from spatial-temporal maps.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides config seeds)")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (results do not depend on it)")
    p.add_argument("--config", default=None, help="model config JSON (default: shipped config)")
    # the global flags are also accepted after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    s.add_argument("--spec", help="SynthSpec JSON (defaults apply when omitted)")
    s.add_argument("--count", type=int, default=None)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", parents=[common], help="two-phase training on a corpus")
    s.add_argument("--corpus", required=True)
    s.add_argument("--model-config", default=None)
    s.add_argument("--train-config", default=None)
    s.add_argument("--bands", default=None)
    s.add_argument("--epochs", type=int, nargs=2, metavar=("PHASE1", "PHASE2"), default=None)
    s.add_argument("--out", required=True)

    s = sub.add_parser("infer", parents=[common], help="BVP waveform + HR/HRV report for one clip")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help="stmap CSV")
    s.add_argument("--sample-rate", type=float, default=None)
    s.add_argument("--out", required=True, help="BVP CSV path")
    s.add_argument("--report", default=None, help="report JSON path (default: <out>.report.json)")
    s.add_argument("--plot-dir", default=None)

    s = sub.add_parser("eval", parents=[common], help="metrics table for FastBVP and the baselines")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("budget", parents=[common], help="parameter and FLOP accounting")
    s.add_argument("--model-config", default=None)
    s.add_argument("--frames", type=int, nargs="+", default=[450, 900])
    s.add_argument("--out", default=None, help="optional per-layer CSV")

    s = sub.add_parser("decompose", parents=[common], help="dump the multi-band signals of a clip")
    s.add_argument("--input", required=True)
    s.add_argument("--sample-rate", type=float, default=None)
    s.add_argument("--bands", default=None)
    s.add_argument("--out", required=True)
    return p


def _setup_logging() -> None:
    level = os.environ.get("FASTBVP_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    if args.threads < 1:
        print("fastbvp: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    run = RunManifest(command=args.command, argv=argv, threads=args.threads, started_at=time.time())
    t0 = time.perf_counter()
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            manifest_path = COMMANDS[args.command](args, run)
        run.duration_s = time.perf_counter() - t0
        if manifest_path is not None:
            run.write(manifest_path)
    except DivergenceError as exc:
        print(f"fastbvp {args.command}: training diverged; last finite loss {exc.last_finite_loss}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FastBvpError, ValueError, FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"fastbvp {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"fastbvp {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        log.exception("unexpected failure")
        print(f"fastbvp {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
