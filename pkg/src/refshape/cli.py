"""Command-line driver: synth, preprocess, train, infer, evaluate.

Exit status is 0 on success, 1 when the work itself fails and 2 for usage
errors (bad flags, missing inputs, invalid values). Settings resolve as
built-in defaults, then the ``--config`` JSON file, then explicit flags.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path


log = logging.getLogger("refshape")


class UsageError(Exception):
    pass


# -------------------------------------------------------------------- helpers


def _settings(args, section: str) -> dict:
    """Config-file values for ``section`` overlaid by explicitly given flags."""
    merged = dict(args.config_data.get(section, {}))
    for key, value in vars(args).items():
        if value is not None and key not in ("command", "config", "config_data", "func"):
            merged[key] = value
    return merged


def _seed(args) -> int:
    v = args.seed if args.seed is not None else args.config_data.get("seed", 0)
    return int(v)


def _jobs(args) -> int:
    v = args.jobs if args.jobs is not None else args.config_data.get("jobs", 1)
    if int(v) < 1:
        raise UsageError("--jobs must be >= 1")
    return int(v)


def _existing(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _emit(rows: list[tuple]) -> None:
    """Tab-delimited key/value lines on stdout."""
    for row in rows:
        print("\t".join(str(x) for x in row))


# ------------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    from .synth import AnatomyParams, generate_dataset

    s = _settings(args, "synth")
    if "out" not in s:
        raise UsageError("--out is required")
    try:
        params = AnatomyParams(
            seed=_seed(args),
            n_vertices=int(s.get("vertices", 1024)),
            n_landmarks=int(s.get("landmarks", 12)),
            family=str(s.get("family", "PROTRUSION")),
            magnitude=float(s.get("magnitude", 0.08)),
            normal_amplitude=float(s.get("normal_amplitude", 0.03)),
        )
        n_normals, n_patients = int(s.get("normals", 5)), int(s.get("patients", 4))
        if n_normals < 1 or n_patients < 1:
            raise ValueError("--normals and --patients must be >= 1")
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    generate_dataset(params, n_normals, n_patients, s["out"], patient_offset=int(s.get("patient_offset", 0)))
    manifest = Path(s["out"]) / "manifest.json"
    _emit([("manifest", manifest), ("normals", n_normals), ("patients", n_patients)])
    return 0


def cmd_preprocess(args) -> int:
    from .registration import CpdConfig, manifest_surfaces, register_manifest

    s = _settings(args, "preprocess")
    manifest = _existing(s.get("manifest"), "--manifest")
    try:
        paths = manifest_surfaces(manifest)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"unreadable manifest: {exc}") from exc
    if not paths:
        raise UsageError(f"manifest {manifest} lists no surfaces")
    try:
        cpd = CpdConfig(**s.get("cpd", {}))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad CPD settings: {exc}") from exc
    simplify = s.get("simplify_to")
    result = register_manifest(manifest, cpd, None if simplify is None else int(simplify), jobs=_jobs(args))
    data = json.loads(manifest.read_text())
    renamed = {str(p): o for p, o in zip(paths, result.outputs)}
    for key in ("surfaces", "normals", "patients"):
        entries = data.get(key, [])
        for i, entry in enumerate(entries):
            name = entry["file"] if isinstance(entry, dict) else entry
            out = renamed.get(str(manifest.parent / name))
            if out is None:
                continue
            rel = Path(out).relative_to(manifest.parent).as_posix()
            if isinstance(entry, dict):
                entry["file"] = rel
            else:
                entries[i] = rel
    data["template_index"] = result.template_index
    out_manifest = manifest.with_name(manifest.stem + ".corr.json")
    out_manifest.write_text(json.dumps(data, indent=2) + "\n")
    rows = [("manifest", out_manifest), ("template", result.template_index)]
    rows += [("unconverged", p) for p in result.unconverged]
    rows += [("failed", p, msg) for p, msg in result.failures.items()]
    _emit(rows)
    return 1 if result.failures else 0


def _train_config(args, s: dict, data):
    from .losses import LossWeights
    from .nets import NetworkConfig
    from .trainer import TrainConfig

    n = data.normals[0].n_vertices
    k = len(data.normals[0].landmarks)
    preset = s.get("network_preset", "desk")
    if preset not in ("desk", "full"):
        raise UsageError("--network must be 'desk' or 'full'")
    net = NetworkConfig.desk(n, k) if preset == "desk" else NetworkConfig(n_points=n, n_landmarks=k)
    if "network" in s:
        net = dataclasses.replace(net, **s["network"])
    weights = LossWeights(**{**s.get("weights", {}), **{k2: s[k2] for k2 in ("alpha", "beta", "lam") if k2 in s}})
    return TrainConfig(
        epochs=int(s.get("epochs", 400)),
        lr=float(s.get("lr", 1e-4)),
        batch_size=int(s.get("batch_size", 4)),
        weights=weights,
        network=net,
        seed=_seed(args),
        checkpoint_interval=int(s.get("checkpoint_interval", 0)),
        freeze_midface=bool(s.get("freeze_midface", True)),
    )


def cmd_train(args) -> int:
    from .plotting import plot_loss_curves
    from .trainer import TrainingSet, epoch_means, load_checkpoint, train, write_history_csv

    s = _settings(args, "train")
    manifest = _existing(s.get("manifest"), "--manifest")
    if "out" not in s:
        raise UsageError("--out is required")
    if "epochs" in s and int(s["epochs"]) < 1:
        raise UsageError("--epochs must be >= 1")
    resume = load_checkpoint(_existing(s["resume"], "--resume")) if s.get("resume") else None
    data = TrainingSet.from_manifest(manifest)
    try:
        cfg = _train_config(args, s, data)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    out = Path(s["out"])
    ckpt = train(data, cfg, resume=resume, checkpoint_dir=out / "checkpoints")
    final = out / "checkpoint.rshf"
    (out / "checkpoints" / "final.rshf").replace(final)
    write_history_csv(ckpt.history, out / "loss_history.csv")
    plot_loss_curves(ckpt.history, out / "loss_curves.png")
    last = {net: epoch_means(ckpt.history, net)[cfg.epochs] for net in ("simulator", "corrector")}
    _emit(
        [
            ("checkpoint", final),
            ("history", out / "loss_history.csv"),
            ("figure", out / "loss_curves.png"),
            ("final_simulator_loss", repr(last["simulator"])),
            ("final_corrector_loss", repr(last["corrector"])),
        ]
    )
    return 0


def cmd_infer(args) -> int:
    from .surface import load_surface, save_surface
    from .trainer import load_checkpoint

    s = _settings(args, "infer")
    ckpt_path = _existing(s.get("checkpoint"), "--checkpoint")
    surface = load_surface(_existing(s.get("input"), "--input"))
    if "out" not in s:
        raise UsageError("--out is required")
    from .trainer import infer

    ckpt = load_checkpoint(ckpt_path)
    ref, field = infer(ckpt, surface)
    out = Path(s["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_surface(ref, out)
    field_path = Path(s.get("field") or out.with_suffix(".field.csv"))
    with field_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["vertex", "dx", "dy", "dz"])
        for i, row in enumerate(field.vectors):
            w.writerow([i] + [repr(float(x)) for x in row])
    _emit([("reference", out), ("field", field_path)])
    return 0


def _eval_cases(manifest: Path, remesh_all: bool):
    from .registration import correspondence_remesh
    from .surface import load_surface
    from .synth import load_truth

    m = json.loads(manifest.read_text())
    cases = m.get("cases")
    if not isinstance(cases, list) or not cases:
        raise UsageError(f"evaluation manifest {manifest} lists no cases")
    out = []
    for i, c in enumerate(cases):
        est = load_surface(manifest.parent / c["estimated"])
        truth_path = manifest.parent / c["truth"]
        truth = load_truth(est, truth_path) if truth_path.suffix == ".npz" else load_surface(truth_path)
        if c.get("remesh", remesh_all):
            # the truth is re-expressed on the estimated surface's vertices
            truth = correspondence_remesh(est, truth)
        out.append((c.get("name", f"case_{i:03d}"), est, truth))
    return out


def cmd_evaluate(args) -> int:
    from .metrics import CorrespondenceError, dump_vertex_errors, evaluate_cohort
    from .plotting import plot_report

    s = _settings(args, "evaluate")
    manifest = _existing(s.get("manifest"), "--manifest")
    if "out" not in s:
        raise UsageError("--out is required")
    tau = s.get("tau")
    if tau is not None and not float(tau) > 0:
        raise UsageError("--tau must be positive")
    cases = _eval_cases(manifest, bool(s.get("remesh", False)))
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        report = evaluate_cohort([(e, t) for _, e, t in cases], None if tau is None else float(tau), names=[n for n, _, _ in cases])
    except CorrespondenceError as exc:
        log.error("mismatched pair: %s", exc)
        return 1
    report.write_json(out / "report.json")
    report.write_csv(out / "report.csv")
    plot_report(report, out / "report.png")
    if s.get("dump_vertices"):
        for name, est, truth in cases:
            dump_vertex_errors(est, truth, out / f"{name}.vertex_distance.csv")
    rows = [("report", out / "report.json"), ("table", out / "report.csv"), ("figure", out / "report.png")]
    for region, metrics in report.summary.items():
        for metric, stat in metrics.items():
            rows.append((f"{region}_{metric}", repr(stat["mean"]), repr(stat["std"])))
    _emit(rows)
    return 0


# --------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="run seed (default 0)")
    common.add_argument("--jobs", type=int, default=None, help="worker processes for preprocess (default 1)")
    common.add_argument("--config", default=None, help="JSON settings file; flags override it")
    common.add_argument("-v", "--verbose", action="store_true", default=None)

    p = argparse.ArgumentParser(prog="refshape", description="Reference bony shape estimation pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic labeled dataset")
    s.add_argument("--out", help="output directory")
    s.add_argument("--normals", type=int)
    s.add_argument("--patients", type=int)
    s.add_argument("--vertices", type=int)
    s.add_argument("--landmarks", type=int)
    s.add_argument("--family", choices=("PROTRUSION", "RETRUSION", "ASYMMETRY"))
    s.add_argument("--magnitude", type=float, help="deformity size as a fraction of the diameter")
    s.add_argument("--patient-offset", dest="patient_offset", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", parents=[common], help="align, choose a template and warp it onto every surface")
    s.add_argument("--manifest")
    s.add_argument("--simplify-to", dest="simplify_to", type=int, help="simplify the template to this many vertices")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", parents=[common], help="train the simulator and corrector")
    s.add_argument("--manifest")
    s.add_argument("--out", help="output directory")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--alpha", type=float)
    s.add_argument("--beta", type=float)
    s.add_argument("--lam", type=float)
    s.add_argument("--network", dest="network_preset", help="'desk' (default) or 'full' layer widths")
    s.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int)
    s.add_argument("--resume", help="continue from this checkpoint")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="estimate the reference shape of one surface")
    s.add_argument("--checkpoint")
    s.add_argument("--input")
    s.add_argument("--out", help="output PLY path")
    s.add_argument("--field", help="correction field CSV (default: next to --out)")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("evaluate", parents=[common], help="score estimates against ground truth")
    s.add_argument("--manifest")
    s.add_argument("--out", help="report directory")
    s.add_argument("--tau", type=float, help="coverage tolerance (default 0.02 x truth diameter)")
    s.add_argument("--remesh", action="store_true", default=None, help="remesh every truth onto its estimate")
    s.add_argument("--dump-vertices", dest="dump_vertices", action="store_true", default=None)
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.config_data = {}
        if args.config is not None:
            cfg_path = _existing(args.config, "--config")
            try:
                args.config_data = json.loads(cfg_path.read_text())
            except json.JSONDecodeError as exc:
                raise UsageError(f"config file is not valid JSON: {exc}") from exc
            if not isinstance(args.config_data, dict):
                raise UsageError("config file must hold a JSON object")
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"refshape {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # work failed: report and exit 1
        log.debug("failure", exc_info=True)
        print(f"refshape {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
