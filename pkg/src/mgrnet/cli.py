"""Command-line entry point.

Every command reads an experiment config (``--config``, default: the toy
preset), writes its artifacts under the output directory together with a
``manifest_<command>.json`` and prints a one-line JSON summary. Failures
print a one-line JSON error on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import platform
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import __version__, _kernels
from .core import MGRNetError, ModelParams, Scenario, init_params, load_params, save_params
from .experiment import ExperimentConfig, preset
from .model import encode
from .retrieval import CMC_RANKS, evaluate, reconstruction_mse
from .synth import FeatureBank, gen_bank, read_bank, split_bank, write_bank
from .training import finite_difference_check, train

BANK_FILE = "bank.mgfb"
BANK_SPEC_FILE = "bank.json"
PARAMS_FILE = "params.mgrp"

# Module toggles of the seven comparison rows: (row, lgr, sgns stage 1, sgns stage 2, grmm)
ABLATION_ROWS = (
    ("a", False, False, False, False),
    ("b", True, False, False, False),
    ("c", True, True, False, False),
    ("d", True, True, True, False),
    ("e", True, False, False, True),
    ("f", True, True, False, True),
    ("g", True, True, True, True),
)
RECON_METHODS = ("zero", "random", "feature", "grmm")


# ---------------------------------------------------------------------------
# artifact helpers
# ---------------------------------------------------------------------------


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict:
    def dist(name):
        try:
            return metadata.version(name)
        except metadata.PackageNotFoundError:
            return None

    return {"mgrnet": __version__, "python": platform.python_version(), "numpy": np.__version__, "numba": dist("numba")}


def _write_manifest(out: Path, command: str, cfg: ExperimentConfig, artifacts: list[Path]) -> None:
    manifest = {
        "command": command,
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "seed": cfg.train.seed,
        "versions": _versions(),
        "kernel_backend": _kernels.backend(),
        "artifacts": {p.name: _sha256(p) for p in sorted(artifacts)},
    }
    (out / f"manifest_{command}.json").write_text(_dumps(manifest))


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    path.write_text(buf.getvalue())


def _scenario_tag(s: Scenario) -> str:
    return "ALL" if not s.missing else "M-" + "".join(m for m in "RNT" if m in s.missing)


def _load_bank(cfg: ExperimentConfig, out: Path) -> FeatureBank:
    """The bank written by ``gen``, or a fresh one when none exists yet."""
    path = out / BANK_FILE
    if not path.exists():
        return gen_bank(cfg.data)
    spec_path = out / BANK_SPEC_FILE
    if spec_path.exists() and json.loads(spec_path.read_text()) != cfg.data.to_dict():
        raise MGRNetError(f"{path} was generated from a different data section; rerun gen")
    return read_bank(path)


def _load_params(cfg: ExperimentConfig, out: Path) -> ModelParams:
    path = out / PARAMS_FILE
    if not path.exists():
        raise MGRNetError(f"{path} not found; run train first")
    return load_params(path, cfg.model)


def _fit(cfg: ExperimentConfig, bank: FeatureBank, **train_overrides):
    tr, _ = split_bank(bank, cfg.holdout_per_identity)
    tcfg = dataclasses.replace(cfg.train, **train_overrides)
    return train(tr, tcfg, cfg.model, cfg.pipeline)


def _metrics_row(m) -> list:
    return [m.mAP] + [m.cmc[k] for k in CMC_RANKS]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(cfg: ExperimentConfig, out: Path) -> dict:
    bank = gen_bank(cfg.data)
    write_bank(bank, out / BANK_FILE)
    (out / BANK_SPEC_FILE).write_text(_dumps(cfg.data.to_dict()))
    _write_manifest(out, "gen", cfg, [out / BANK_FILE, out / BANK_SPEC_FILE])
    return {"bank": str(out / BANK_FILE), "samples": len(bank)}


def cmd_train(cfg: ExperimentConfig, out: Path) -> dict:
    bank = _load_bank(cfg, out)
    params, records = _fit(cfg, bank)
    save_params(params, out / PARAMS_FILE)
    log_path = out / "train_log.jsonl"
    log_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    _write_manifest(out, "train", cfg, [out / PARAMS_FILE, log_path])
    last = [r for r in records if r["kind"] == "epoch"]
    return {"params": str(out / PARAMS_FILE), "final_loss": last[-1]["total"] if last else None}


def cmd_eval(cfg: ExperimentConfig, out: Path, scenarios: list[Scenario]) -> dict:
    bank = _load_bank(cfg, out)
    params = _load_params(cfg, out)
    _, test = split_bank(bank, cfg.holdout_per_identity)
    summary, written = {}, []
    for s in scenarios:
        m = evaluate(test, params, s, cfg.pipeline, seed=cfg.train.seed)
        path = out / f"metrics_{_scenario_tag(s)}.json"
        path.write_text(_dumps({"scenario": s.label, "recovery": cfg.pipeline.recovery, **m.to_dict()}))
        written.append(path)
        summary[s.label] = m.mAP
    _write_manifest(out, "eval", cfg, written)
    return {"mAP": summary}


def cmd_ablate(cfg: ExperimentConfig, out: Path, scenarios: list[Scenario]) -> dict:
    bank = _load_bank(cfg, out)
    _, test = split_bank(bank, cfg.holdout_per_identity)
    header = ["row", "mgl_lgr", "sgns_1st", "sgns_2nd", "grmm"]
    for s in scenarios:
        tag = _scenario_tag(s)
        header += [f"{tag}_mAP"] + [f"{tag}_rank{k}" for k in CMC_RANKS]
    rows = []
    for name, lgr, s1, s2, grmm in ABLATION_ROWS:
        options = dataclasses.replace(
            cfg.pipeline,
            enable_lgr=lgr,
            enable_sgns=s1,
            widen=cfg.pipeline.widen if s2 else 1,
            recovery=cfg.pipeline.recovery if grmm else "zero",
        )
        run = dataclasses.replace(cfg, pipeline=options)
        params, _ = _fit(run, bank, enable_sgns=s1, enable_grmm=grmm)
        row = [name, int(lgr), int(s1), int(s2), int(grmm)]
        for s in scenarios:
            row += _metrics_row(evaluate(test, params, s, options, seed=cfg.train.seed))
        rows.append(row)
    path = out / "ablation.csv"
    _write_csv(path, header, rows)
    _write_manifest(out, "ablate", cfg, [path])
    return {"csv": str(path), "rows": len(rows)}


def cmd_sweep_k(cfg: ExperimentConfig, out: Path, scenarios: list[Scenario], ks) -> dict:
    bank = _load_bank(cfg, out)
    _, test = split_bank(bank, cfg.holdout_per_identity)
    header = ["k"]
    for s in scenarios:
        tag = _scenario_tag(s)
        header += [f"{tag}_mAP"] + [f"{tag}_rank{k}" for k in CMC_RANKS]
    rows = []
    for k in ks:
        run = cfg.with_overrides(k=k)
        params, _ = _fit(run, bank)
        row = [k]
        for s in scenarios:
            row += _metrics_row(evaluate(test, params, s, run.pipeline, seed=cfg.train.seed))
        rows.append(row)
    path = out / "sweep_k.csv"
    _write_csv(path, header, rows)
    _write_manifest(out, "sweep-k", cfg, [path])
    return {"csv": str(path), "rows": len(rows)}


def cmd_gradcheck(cfg: ExperimentConfig, out: Path, ids: int = 3, per_id: int = 2) -> dict:
    """Finite-difference check on a small batch drawn from the training split."""
    bank = _load_bank(cfg, out)
    tr, _ = split_bank(bank, cfg.holdout_per_identity)
    rows = np.concatenate([np.nonzero(tr.identities == i)[0][:per_id] for i in np.unique(tr.identities)[:ids]])
    params = init_params(cfg.model, cfg.train.seed)
    res = finite_difference_check(params, tr.tokens[rows], tr.identities[rows], cfg.train, cfg.pipeline)
    path = out / "gradcheck.json"
    path.write_text(_dumps({**res.to_dict(), "tolerance": 1e-4, "passed": res.max_rel_error <= 1e-4}))
    _write_manifest(out, "gradcheck", cfg, [path])
    return {"max_rel_error": res.max_rel_error, "worst_param": res.worst_param, "checked": res.num_checked}


def cmd_recon_baselines(cfg: ExperimentConfig, out: Path, scenarios: list[Scenario]) -> dict:
    """Missing-modality filling strategies on the same held-out split."""
    bank = _load_bank(cfg, out)
    _, test = split_bank(bank, cfg.holdout_per_identity)
    scenarios = [s for s in scenarios if s.missing] or [Scenario.parse("N"), Scenario.parse("RT")]
    full, _ = _fit(cfg, bank)
    feature_only, _ = _fit(cfg, bank, structure_loss_weight=0.0)
    rows, summary = [], {}
    for method in RECON_METHODS:
        params = feature_only if method == "feature" else full
        recovery = "grmm" if method == "feature" else method
        options = dataclasses.replace(cfg.pipeline, recovery=recovery)
        for s in scenarios:
            m = evaluate(test, params, s, options, seed=cfg.train.seed)
            mse = reconstruction_mse(test, params, s, recovery, seed=cfg.train.seed)
            rows.append([method, s.label] + _metrics_row(m) + [mse])
            summary[f"{method}/{s.label}"] = m.mAP
    path = out / "recon_baselines.csv"
    _write_csv(path, ["method", "scenario", "mAP"] + [f"rank{k}" for k in CMC_RANKS] + ["recon_mse"], rows)
    _write_manifest(out, "recon-baselines", cfg, [path])
    return {"csv": str(path), "mAP": summary}


def cmd_swap_report(cfg: ExperimentConfig, out: Path, sample: int) -> dict:
    bank = _load_bank(cfg, out)
    if not 0 <= sample < len(bank):
        raise MGRNetError(f"--sample {sample} outside [0, {len(bank)})")
    path_params = out / PARAMS_FILE
    params = _load_params(cfg, out) if path_params.exists() else init_params(cfg.model, cfg.train.seed)
    enc = encode(params, bank.tokens[sample : sample + 1], dataclasses.replace(cfg.pipeline, enable_sgns=True))
    corrupted = {m: [int(i) for i in bank.corrupted[sample][j]] for j, m in enumerate("RNT")}
    report = {"sample": sample, "identity": int(bank.identities[sample]), "corrupted_patches": corrupted}
    report["swap"] = enc.swap_reports[0].to_dict() if enc.swap_reports else None
    path = out / f"swap_report_{sample}.json"
    path.write_text(_dumps(report))
    _write_manifest(out, "swap-report", cfg, [path])
    return report


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mgrnet", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON (default: toy preset)")
    common.add_argument("--seed", type=int, help="overrides the data and training seeds")
    common.add_argument("--missing", help="scenario: R|N|T|RN|RT|NT (or ALL)")
    common.add_argument("--no-sgns", action="store_true", help="disable node swapping")
    common.add_argument("--no-grmm", action="store_true", help="disable reconstruction heads (zero padding)")
    common.add_argument("--k", type=int, help="swap-node count")
    common.add_argument("--out", help="output directory")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (
        ("gen", "write the synthetic feature bank"),
        ("train", "train and write parameters plus log"),
        ("eval", "evaluate held-out retrieval"),
        ("ablate", "module comparison table (7 rows)"),
        ("sweep-k", "retrain over swap-node counts"),
        ("gradcheck", "finite-difference gradient check"),
        ("recon-baselines", "compare missing-modality filling strategies"),
        ("swap-report", "show the swap decisions for one sample"),
    ):
        sp = sub.add_parser(name, parents=[common], help=text)
        if name == "swap-report":
            sp.add_argument("--sample", type=int, default=0, help="bank row index")
    return p


def _resolve(args) -> tuple[ExperimentConfig, Path]:
    cfg = ExperimentConfig.load(args.config) if args.config else preset("toy")
    cfg = cfg.with_overrides(
        seed=args.seed,
        k=args.k,
        enable_sgns=False if args.no_sgns else None,
        enable_grmm=False if args.no_grmm else None,
        output_dir=args.out,
    )
    if args.seed is not None and args.seed < 0:
        raise MGRNetError("--seed must be a nonnegative integer")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _scenarios(args, cfg: ExperimentConfig) -> list[Scenario]:
    if args.missing is not None:
        return [Scenario.parse(args.missing)]
    return [Scenario.parse(s) for s in cfg.scenarios]


def run(argv=None) -> dict:
    """Parse ``argv`` and execute; returns the summary (raises on failure)."""
    args = _parser().parse_args(argv)
    cfg, out = _resolve(args)
    c = args.command
    if c == "gen":
        return cmd_gen(cfg, out)
    if c == "train":
        return cmd_train(cfg, out)
    if c == "eval":
        return cmd_eval(cfg, out, _scenarios(args, cfg))
    if c == "ablate":
        return cmd_ablate(cfg, out, _scenarios(args, cfg))
    if c == "sweep-k":
        ks = [args.k] if args.k is not None else list(cfg.sweep_k)
        return cmd_sweep_k(cfg, out, _scenarios(args, cfg), ks)
    if c == "gradcheck":
        return cmd_gradcheck(cfg, out)
    if c == "recon-baselines":
        return cmd_recon_baselines(cfg, out, _scenarios(args, cfg))
    return cmd_swap_report(cfg, out, args.sample)


def main(argv=None) -> int:
    try:
        summary = run(argv)
    except (MGRNetError, ValueError, OSError) as exc:
        kind = type(exc).__name__
        print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
        return 2 if isinstance(exc, (MGRNetError, ValueError)) else 1
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
