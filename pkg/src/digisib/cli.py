"""Command-line entry point: ``digisib <command> [flags]``.

Every command writes one results directory under ``--out`` named
``<command>-seed<seed>-<config digest>``. Rerunning with the same flags into a
fresh ``--out`` reproduces every file except ``run.json``'s timestamp. Errors are
reported on stderr as a single line ``digisib-error: {"type": ..., "message": ...}``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io, pipelines as pl
from .cohort_analytics import heatmap_diff, occupancy_heatmap
from .core import Cohort, Provenance, TissueId, parse_tissue
from .editing import EditMaskSpec, build_mask, start_index
from .phantom import generate_cohort

log = logging.getLogger("digisib")


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind, self.code = kind, code


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would print usage and exit(2)
        raise CliError("usage", message, 2)


# --------------------------------------------------------------------------- config


def load_config(args) -> pl.ExperimentConfig:
    d: dict = dict(pl.PRESETS[args.preset])
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CliError("config", f"{path}: no such file")
        text = path.read_text()
        if path.suffix in (".yaml", ".yml"):
            import yaml

            loaded = yaml.safe_load(text) or {}
        else:
            loaded = json.loads(text)
        if not isinstance(loaded, dict):
            raise CliError("config", f"{path}: top level must be a mapping")
        d.update(loaded)
    d["master_seed"] = args.seed
    for flag, key in (("steps", "steps"), ("threshold_ml", "threshold_ml"), ("workers", "workers")):
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    try:
        return pl.ExperimentConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CliError("config", str(exc)) from None


def run_dir(args, cfg: pl.ExperimentConfig) -> Path:
    extra = json.dumps({k: v for k, v in sorted(vars(args).items())
                        if k not in ("out", "workers", "func", "verbose")}, default=str, sort_keys=True)
    tag = hashlib.sha256((cfg.digest() + extra).encode()).hexdigest()[:10]
    d = Path(args.out) / f"{args.command}-seed{args.seed}-{tag}"
    if d.exists():
        raise CliError("exists", f"{d}: results directory already exists (append-only)")
    d.mkdir(parents=True)
    return d


def _finish(d: Path, args, cfg, summary: dict) -> None:
    (d / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    (d / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True, default=float))
    lines = [f"{args.command} (seed {args.seed}, config {cfg.digest()[:12]})"]
    lines += [f"  {k}: {v}" for k, v in summary.items()]
    (d / "summary.txt").write_text("\n".join(lines) + "\n")
    (d / "run.json").write_text(json.dumps({"argv": sys.argv[1:], "created": time.time(),
                                            "config_digest": cfg.digest()}, indent=1))
    print(d)


def _report_files(d: Path, stem: str, rep: pl.CohortReport) -> None:
    io.write_report(d, stem, rep)
    io.write_table(d / f"{stem}_summary.csv", [rep.summary()])


def _seed(model: pl.Model, args):
    """Seed label map plus its reference index (``None`` when read from a file)."""
    if args.seed_map:
        try:
            return io.read_labelmap(args.seed_map), None
        except (OSError, io.FormatError) as exc:
            raise CliError("input", str(exc)) from None
    idx = pl.select_seed(model.ref_features, args.archetype)
    return model.reference[idx], idx


# --------------------------------------------------------------------------- commands


def cmd_phantom_gen(args, cfg):
    spec = cfg.population_spec()
    cohort, params, modes = generate_cohort(spec, args.count, cfg.master_seed)
    d = run_dir(args, cfg)
    io.write_cohort(d / "cohort", cohort, cfg.digest())
    feats = np.array([pl.morph_features(m) for m in cohort])
    rep = pl.evaluate_cohort(list(cohort), feats, features=feats)
    _report_files(d, "report", rep)
    io.write_table(d / "params.csv", [{"member": k, "rare_mode": int(r), **_flat(p.to_dict())}
                                      for k, (p, r) in enumerate(zip(params, modes))])
    io.write_heatmap(d / "occupancy.dhm", occupancy_heatmap(cohort))
    from .plotting import heatmap_figure

    heatmap_figure(occupancy_heatmap(cohort).foreground, d / "occupancy.png", title="foreground occupancy",
                   signed=False)
    _finish(d, args, cfg, {"count": args.count, "rare_fraction": float(np.mean(modes)),
                           "violation_rate": rep.violation_rate})


def _flat(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, list):
            out.update({f"{k}_{i}": x for i, x in enumerate(v)})
        else:
            out[k] = v
    return out


def cmd_sample(args, cfg):
    model = pl.build_model(cfg)
    res = pl.run_unconditional(cfg, model, n=args.count)
    d = run_dir(args, cfg)
    io.write_cohort(d / "cohort", res.cohort, cfg.digest())
    _report_files(d, "report", res.report)
    io.write_heatmap(d / "heatmap_reference.dhm", res.heatmap_ref)
    io.write_heatmap(d / "heatmap_synthetic.dhm", res.heatmap_synth)
    from .plotting import heatmap_figure, volume_scatter

    heatmap_figure(res.diff, d / "heatmap_diff.png", res.diff_mask, "reference - synthetic")
    volume_scatter(model.ref_features, {"synthetic": res.report.features}, d / "volumes.png")
    thr = model.threshold()
    hits = int(np.sum(res.report.features[:, pl.RV_VOLUME] >= thr))
    w = float(np.mean(model.ref_features[:, pl.RV_VOLUME] >= thr))
    _finish(d, args, cfg, {**res.report.summary(), "rare_threshold_ml": thr, "rare_hits": hits,
                           "rare_reference_fraction": w,
                           "underrep_pvalue": pl.binomial_underrep_pvalue(hits, args.count, w)})


def cmd_perturb_edit(args, cfg):
    model = pl.build_model(cfg)
    seed_map, idx = _seed(model, args)
    start_index(args.psi, len(model.schedule))  # validates psi
    n = args.count
    z = np.ascontiguousarray(np.broadcast_to(model.encode(seed_map), (n,) + model.latent_shape))
    rs = pl._run_seed(cfg, pl._STREAM_PSI, 10_000)
    ids = None if idx is None else np.full(n, idx)
    maps = pl.decode_all(model, pl.generate_perturbed(model, z, args.psi, rs, ids))
    sid = args.seed_map or f"ref-{idx:04d}"
    prov = [Provenance(str(sid), "perturb", {"psi": args.psi}, (rs, k)) for k in range(n)]
    _edit_outputs(args, cfg, model, seed_map, maps, prov, f"psi={args.psi:g}")


def cmd_local_edit(args, cfg):
    model = pl.build_model(cfg)
    seed_map, idx = _seed(model, args)
    try:
        if args.preserve is not None:
            spec = EditMaskSpec(frozenset(parse_tissue(t) for t in args.preserve), cfg.dilation_rounds)
        else:
            spec = EditMaskSpec.editing(args.edit or ["LV"], cfg.dilation_rounds)
    except ValueError as exc:
        raise CliError("input", str(exc)) from None
    mask = build_mask(seed_map, spec, model.codec).values
    n = args.count
    z = np.ascontiguousarray(np.broadcast_to(model.encode(seed_map), (n,) + model.latent_shape))
    rs = pl._run_seed(cfg, pl._STREAM_MASK, 10_000)
    ids = None if idx is None else np.full(n, idx)
    lat = pl.generate_local(model, z, np.broadcast_to(mask, (n,) + mask.shape), rs, ids)
    maps = pl.decode_all(model, lat)
    sid = args.seed_map or f"ref-{idx:04d}"
    keep = sorted(TissueId(t).name for t in spec.preserve_tissues)
    prov = [Provenance(str(sid), "local", {"preserve": keep}, (rs, k)) for k in range(n)]
    _edit_outputs(args, cfg, model, seed_map, maps, prov, f"preserve={'+'.join(keep) or 'none'}")


def _edit_outputs(args, cfg, model, seed_map, maps, prov, setting):
    d = run_dir(args, cfg)
    io.write_labelmap(d / "seed.dlm", seed_map)
    io.write_cohort(d / "cohort", Cohort(maps, prov), cfg.digest())
    rep = pl.evaluate_cohort(maps, model.ref_features, k=cfg.k, ridge=cfg.ridge)
    _report_files(d, "report", rep)
    diff, mask = heatmap_diff(occupancy_heatmap([seed_map]), occupancy_heatmap(maps))
    from .plotting import heatmap_figure, volume_scatter

    heatmap_figure(diff, d / "heatmap_diff.png", mask, f"seed - edits ({setting})")
    volume_scatter(model.ref_features, {setting: rep.features}, d / "volumes.png",
                   seed=pl.morph_features(seed_map))
    _finish(d, args, cfg, {"setting": setting, **rep.summary()})


def cmd_evaluate(args, cfg):
    try:
        cohort = io.read_cohort(args.cohort)
        ref_feats = (np.array([pl.morph_features(m) for m in io.read_cohort(args.reference)])
                     if args.reference else pl.build_model(cfg).ref_features)
    except (OSError, io.FormatError) as exc:
        raise CliError("input", str(exc)) from None
    rep = pl.evaluate_cohort(list(cohort), ref_feats, k=cfg.k, ridge=cfg.ridge)
    d = run_dir(args, cfg)
    _report_files(d, "report", rep)
    from .plotting import volume_scatter

    volume_scatter(ref_feats, {"cohort": rep.features}, d / "volumes.png")
    _finish(d, args, cfg, rep.summary())


def cmd_augment(args, cfg):
    model = pl.build_model(cfg)
    try:
        res = pl.run_augmentation(cfg, model)
    except RuntimeError as exc:
        raise CliError("budget", str(exc)) from None
    d = run_dir(args, cfg)
    table = []
    for name, rep in res.reports.items():
        io.write_cohort(d / name, res.cohorts[name], cfg.digest())
        _report_files(d, f"report_{name}", rep)
        table.append({"strategy": name, "generated": res.generated[name], **rep.summary()})
    io.write_table(d / "strategies.csv", table)
    from .plotting import volume_scatter

    volume_scatter(model.ref_features[res.target], {k: r.features for k, r in res.reports.items()},
                   d / "volumes.png", title=f"RV >= {res.threshold:.2f} ml")
    _finish(d, args, cfg, {"threshold_ml": res.threshold, "target_size": len(res.target),
                           **{f"recall_{r['strategy']}": r["recall"] for r in table}})


def cmd_sweep(args, cfg):
    model = pl.build_model(cfg)
    from .plotting import heatmap_figure, sensitivity_figure, volume_scatter

    if args.kind == "sensitivity":
        rows = pl.run_sensitivity(cfg, model)
        d = run_dir(args, cfg)
        io.write_table(d / "sensitivity.csv", rows)
        sensitivity_figure(rows, d / "sensitivity.png")
        _finish(d, args, cfg, {"rows": len(rows)})
        return
    runner = pl.run_psi_sweep if args.kind == "psi" else pl.run_mask_sweep
    cohorts = runner(cfg, model=model)
    d = run_dir(args, cfg)
    table = []
    for ec in cohorts:
        stem = f"{ec.seed_name}_{ec.setting.replace('=', '-')}"
        io.write_cohort(d / stem, ec.cohort, cfg.digest())
        _report_files(d, f"report_{stem}", ec.report)
        heatmap_figure(ec.diff, d / f"{stem}_diff.png", ec.diff_mask, f"{ec.seed_name} {ec.setting}")
        table.append({"seed": ec.seed_name, "seed_index": ec.seed_index, "setting": ec.setting,
                      **ec.report.summary()})
    io.write_table(d / "sweep.csv", table)
    for name in dict.fromkeys(ec.seed_name for ec in cohorts):
        sub = [ec for ec in cohorts if ec.seed_name == name]
        volume_scatter(model.ref_features, {ec.setting: ec.report.features for ec in sub},
                       d / f"{name}_volumes.png", seed=model.ref_features[sub[0].seed_index])
    _finish(d, args, cfg, {"cohorts": len(table)})


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--config", help="JSON or YAML file with ExperimentConfig keys")
    common.add_argument("--preset", choices=sorted(pl.PRESETS), default="desk")
    common.add_argument("--out", default="results", help="parent directory for results")
    common.add_argument("--workers", type=int, help="worker threads (default: $DIGISIB_WORKERS or 1)")
    common.add_argument("--steps", type=int, help="sampling steps N")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="digisib", description="Phantom-scale digital-sibling cohorts.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom-gen", parents=[common], help="generate a phantom cohort")
    s.add_argument("--count", type=int, default=20)
    s.set_defaults(func=cmd_phantom_gen)

    s = sub.add_parser("sample", parents=[common], help="unconditional sampling")
    s.add_argument("--count", type=int, default=100)
    s.set_defaults(func=cmd_sample)

    def seed_flags(s):
        s.add_argument("--seed-map", help="seed label map file (.dlm); default picks an archetype")
        s.add_argument("--archetype", choices=sorted(pl.ARCHETYPES), default="LupRup")
        s.add_argument("--count", type=int, default=50)

    s = sub.add_parser("perturb-edit", parents=[common], help="perturbational editing of one seed")
    s.add_argument("--psi", type=float, required=True, help="sampling ratio in (0, 1]")
    seed_flags(s)
    s.set_defaults(func=cmd_perturb_edit)

    s = sub.add_parser("local-edit", parents=[common], help="localized editing of one seed")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--edit", action="append", help="tissue to regenerate (repeatable)")
    g.add_argument("--preserve", nargs="*", help="explicit preserve set")
    seed_flags(s)
    s.set_defaults(func=cmd_local_edit)

    s = sub.add_parser("evaluate", parents=[common], help="report on a cohort directory")
    s.add_argument("--cohort", required=True, help="directory holding manifest.json")
    s.add_argument("--reference", help="reference cohort directory (default: the model reference)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("augment", parents=[common], help="three augmentation strategies")
    s.add_argument("--threshold-ml", type=float, dest="threshold_ml")
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("sweep", parents=[common], help="psi, mask or sensitivity sweep")
    s.add_argument("--kind", choices=("psi", "mask", "sensitivity"), default="psi")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.code)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        if getattr(args, "count", 1) is not None and getattr(args, "count", 1) < 1:
            raise CliError("usage", "--count must be >= 1", 2)
        cfg = load_config(args)
        args.func(args, cfg)
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.code)
    except (ValueError, RuntimeError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    return 0


def _fail(kind: str, message: str, code: int) -> int:
    print("digisib-error: " + json.dumps({"type": kind, "message": message}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
