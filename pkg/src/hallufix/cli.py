"""Command-line entry point: ``hallufix <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path


from hallufix import gradcheck, jsonio, metrics, optim, orm, plotting, render
from hallufix.errors import ConfigError, DataError, HallufixError, IoError, NonFiniteLoss, NumericalError
from hallufix.mesh import corrupt, load_mesh, save_mesh

log = logging.getLogger("hallufix")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
SECTIONS = ("optim", "orm", "eval", "gradcheck")


def _load_config(path) -> dict:
    """Read a JSON config with optional sections ``optim``/``orm``/``eval``/``gradcheck``."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"malformed JSON config {p}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {p} must be a JSON object")
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s) in {p}: {', '.join(unknown)}")
    for key, val in data.items():
        if not isinstance(val, dict):
            raise ConfigError(f"config section {key!r} must be an object")
    return data


def _section(data: dict, name: str, cls, seed):
    raw = dict(data.get(name, {}))
    if seed is not None and "seed" in {f.name for f in dataclasses.fields(cls)}:
        raw["seed"] = seed
    if hasattr(cls, "from_dict"):
        return cls.from_dict(raw)
    unknown = sorted(set(raw) - {f.name for f in dataclasses.fields(cls)})
    if unknown:
        raise ConfigError(f"unknown {name} config key(s): {', '.join(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise IoError(f"no such file: {p}")
    return p


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write_risks_csv(path, dist) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "risk"])
        for i, r in enumerate(dist.risks):
            w.writerow([i, "%.17g" % r])


def _orm_block(mesh, cfg) -> tuple[dict, orm.OrmResult]:
    res = orm.orm(mesh, cfg)
    return res.to_record(), res


# --------------------------------------------------------------------------
# commands

def cmd_refine(args, config) -> int:
    src = load_mesh(_require_file(args.mesh))
    gt = load_mesh(_require_file(args.reference))
    ocfg = _section(config, "optim", optim.OptimConfig, args.seed)
    rcfg = _section(config, "orm", orm.OrmConfig, args.seed)
    ecfg = _section(config, "eval", metrics.EvalConfig, args.seed)
    out = _out_dir(args)

    refs = optim.make_references(gt, ocfg.resolution, ocfg)
    trace_path = out / "trace.jsonl"
    with open(trace_path, "w") as fh:
        count = 0

        def on_iteration(stage, it, rep):
            nonlocal count
            fh.write(rep.to_json(count) + "\n")
            count += 1
            if args.verbose and it % 25 == 0:
                log.info("%s %4d  total %.6g", stage, it, rep.total)

        dump_dir = out if ocfg.dump_every else None
        try:
            refined, trace = optim.refine(src, refs, ocfg, dump_dir=dump_dir, on_iteration=on_iteration)
        except NonFiniteLoss as exc:
            fh.flush()
            jsonio.dump({"error": str(exc), "iteration": exc.iteration, "terms": exc.terms},
                        out / "failure.json")
            raise
    save_mesh(refined, out / "refined.obj")

    before = metrics.eval_pair(gt, src, ecfg, with_appearance=False).to_record()
    after = metrics.eval_pair(gt, refined, ecfg, with_appearance=False).to_record()
    orm_before, _ = _orm_block(src, rcfg)
    orm_after, res_after = _orm_block(refined, rcfg)
    report = {
        "input": str(args.mesh),
        "reference": str(args.reference),
        "config": {"optim": dataclasses.asdict(ocfg), "orm": dataclasses.asdict(rcfg),
                   "eval": dataclasses.asdict(ecfg)},
        "before": {"geometry": before, "orm": orm_before},
        "after": {"geometry": after, "orm": orm_after},
        "iterations": len(trace),
        "final_loss": trace[-1].to_record(len(trace) - 1) if trace else None,
    }
    jsonio.dump(report, out / "report.json")
    if trace:
        plotting.loss_trace(trace, out / "loss_trace.png")
    plotting.risk_histogram(res_after.distribution.risks, res_after.var, out / "risk_histogram.png",
                            res_after.orm)
    print(jsonio.dumps({"chamfer_before": before["chamfer"], "chamfer_after": after["chamfer"],
                        "orm_before": orm_before["orm"], "orm_after": orm_after["orm"]}))
    return EXIT_OK


def cmd_orm(args, config) -> int:
    mesh = load_mesh(_require_file(args.mesh))
    cfg = _section(config, "orm", orm.OrmConfig, args.seed)
    out = _out_dir(args)
    res = orm.orm(mesh, cfg)
    rec = res.to_record()
    jsonio.dump(rec, out / "orm.json")
    if args.risks_csv:
        _write_risks_csv(out / "risks.csv", res.distribution)
    plotting.risk_histogram(res.distribution.risks, res.var, out / "risk_histogram.png", res.orm)
    print(jsonio.dumps(rec))
    return EXIT_OK


def cmd_eval(args, config) -> int:
    gt = load_mesh(_require_file(args.reference))
    test = load_mesh(_require_file(args.mesh))
    cfg = _section(config, "eval", metrics.EvalConfig, args.seed)
    out = _out_dir(args)
    rep = metrics.eval_pair(gt, test, cfg).to_record()
    rows = rep.pop("per_view")
    jsonio.dump(rep, out / "eval.json")
    with open(out / "eval_views.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["azimuth", "elevation", "psnr", "ssim"])
        for r in rows:
            w.writerow([("%.17g" % r[k]) if r[k] is not None else "" for k in ("azimuth", "elevation", "psnr", "ssim")])
    print(jsonio.dumps(rep))
    return EXIT_OK


def cmd_render(args, config) -> int:
    mesh = load_mesh(_require_file(args.mesh))
    out = _out_dir(args)
    try:
        view = render.ViewSpec(azimuth=args.azimuth, elevation=args.elevation,
                               ortho_half_extent=args.half_extent,
                               resolution=(args.resolution, args.resolution))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    buf = render.rasterize(mesh, view)
    paths = render.dump_buffers(buf, out, args.stem)
    shaded = out / f"{args.stem}_shaded.png"
    render.write_png(shaded, render.shaded_image(buf, mesh.faces))
    paths["shaded"] = str(shaded)
    print(jsonio.dumps(paths))
    return EXIT_OK


def cmd_corrupt(args, config) -> int:
    mesh = load_mesh(_require_file(args.mesh))
    out = _out_dir(args)
    seed = 0 if args.seed is None else args.seed
    try:
        bad, idx = corrupt(mesh, args.fraction, args.magnitude, args.mode, seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    save_mesh(bad, out / "corrupted.obj")
    rec = {"fraction": args.fraction, "magnitude": args.magnitude, "mode": args.mode,
           "seed": seed, "indices": [int(i) for i in idx]}
    jsonio.dump(rec, out / "corrupted_indices.json")
    print(jsonio.dumps({"count": len(idx), "path": str(out / "corrupted.obj")}))
    return EXIT_OK


def cmd_gradcheck(args, config) -> int:
    cfg = _section(config, "gradcheck", gradcheck.GradcheckConfig, args.seed)
    t0 = time.perf_counter()
    results = gradcheck.run(cfg)
    rows = []
    for name in gradcheck.LOSS_NAMES:
        mine = [r for r in results if r.loss == name]
        worst = max(r.rel_error for r in mine)
        ok = all(r.passed for r in mine)
        rows.append({"loss": name, "instances": len(mine), "max_rel_error": worst, "passed": ok})
        print(f"{name:<8} {len(mine):>3} instances  max rel err {worst:.3e}  {'PASS' if ok else 'FAIL'}")
    if args.out:
        out = _out_dir(args)
        jsonio.dump({"tolerance": cfg.tolerance, "step": cfg.step, "results": rows}, out / "gradcheck.json")
    log.info("gradcheck finished in %.1f s", time.perf_counter() - t0)
    return EXIT_OK if all(r["passed"] for r in rows) else EXIT_NUMERICAL


# --------------------------------------------------------------------------

def _common(top: bool) -> argparse.ArgumentParser:
    # Global flags are accepted before or after the command; the copies on
    # the subcommands must not reset values given before it.
    def d(value):
        return value if top else argparse.SUPPRESS

    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=d(None), help="JSON config with optim/orm/eval/gradcheck sections")
    p.add_argument("--out", default=d("out"), help="output directory (default: ./out)")
    p.add_argument("--seed", type=int, default=d(None), help="overrides every seed in the config")
    p.add_argument("--threads", type=int, default=d(None),
                   help="worker cap for multi-view rendering (env HALLUFIX_THREADS)")
    p.add_argument("--verbose", "-v", action="store_true", default=d(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common(False)
    parser = argparse.ArgumentParser(prog="hallufix", description=__doc__.splitlines()[0],
                                     parents=[_common(True)])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("refine", parents=[common], help="two-stage refinement against reference renders")
    p.add_argument("mesh", help="mesh to refine (OBJ/PLY)")
    p.add_argument("reference", help="ground-truth mesh the references are rendered from")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("orm", parents=[common], help="outlier risk measure of a mesh")
    p.add_argument("mesh")
    p.add_argument("--risks-csv", action="store_true", help="also dump per-point risks as CSV")
    p.set_defaults(func=cmd_orm)

    p = sub.add_parser("eval", parents=[common], help="geometry and appearance metrics")
    p.add_argument("reference")
    p.add_argument("mesh")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", parents=[common], help="dump depth/normal/mask buffers of one view")
    p.add_argument("mesh")
    p.add_argument("--azimuth", type=float, default=0.0)
    p.add_argument("--elevation", type=float, default=0.0)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--half-extent", type=float, default=0.5)
    p.add_argument("--stem", default="view")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("corrupt", parents=[common], help="add spikes or dents to a mesh")
    p.add_argument("mesh")
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--magnitude", type=float, required=True)
    p.add_argument("--mode", choices=("spike", "dent"), default="spike")
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("gradcheck", parents=[common], help="analytic vs finite-difference gradients")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors exit with 2 already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
        render.set_threads(args.threads)
    try:
        config = _load_config(args.config)
        return args.func(args, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except HallufixError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
