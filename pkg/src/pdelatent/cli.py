"""Command-line harness.

Every command works inside one run directory (``--out``, default
``$PDELATENT_OUT`` or ``./runs/default``) laid out as::

    config.resolved.json
    data/{train,val,test}.pdl
    latents/{map,encoder}_{split}.pdl
    checkpoints/encoder.ckpt, checkpoints/diffusion_{branch}.ckpt
    results/{split}_{branch}_{latentpde,baselines}.csv
    decision/branch.json
    manifests/<command>.json
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

from . import __version__
from . import pipeline as P
from .datagen import load_dataset
from .latent import LatentStats
from .nets import Denoiser, LatentEncoder, load_checkpoint, save_checkpoint
from .storage import read_container, write_records

log = logging.getLogger("pdelatent")

OUT_ENV = "PDELATENT_OUT"
LATENT_FORMAT = "pdelatent-latents/1"
DECISION_FORMAT = "pdelatent-branch-decision/1"
SPLITS = ("train", "val", "test")


class CliError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# run-directory helpers
# --------------------------------------------------------------------------

class Run:
    def __init__(self, root, cfg: P.ExperimentConfig):
        self.root = Path(root)
        self.cfg = cfg

    def data(self, split):
        return self.root / "data" / f"{split}.pdl"

    def latents(self, branch, split):
        return self.root / "latents" / f"{branch}_{split}.pdl"

    def encoder_ckpt(self):
        return self.root / "checkpoints" / "encoder.ckpt"

    def diffusion_ckpt(self, branch):
        return self.root / "checkpoints" / f"diffusion_{branch}.ckpt"

    def results(self, split, branch, what):
        return self.root / "results" / f"{split}_{branch}_{what}.csv"

    def ensembles(self, split, branch):
        return self.root / "ensembles" / f"{split}_{branch}.pdl"

    def decision(self):
        return self.root / "decision" / "branch.json"

    def manifest(self, command, inputs=(), outputs=(), extra=None):
        path = P.write_manifest(self.root, command, self.cfg, inputs, outputs, extra)
        log.info("wrote manifest %s", path)


def require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise CliError(f"missing input {path}; {hint}")
    return path


def check_lineage(run: Run, path: Path):
    """Compare an input file's hash with the one its producing command recorded."""
    for mf in sorted((run.root / "manifests").glob("*.json")):
        outputs = json.loads(mf.read_text()).get("outputs", {})
        key = P._rel(path, run.root)
        if key in outputs:
            if outputs[key] != P.file_digest(path):
                raise CliError(f"hash mismatch for {path}: it changed after it was written "
                               f"(see manifests/{mf.name}); rerun the producing command")
            return
    log.warning("no manifest records %s; lineage unchecked", path)


def load_data(run: Run, split: str):
    path = require(run.data(split), "run `pdelatent gen-data` first")
    check_lineage(run, path)
    return load_dataset(path)


def save_latents(path, z, residual, branch, split, source):
    write_records(path, {"format": LATENT_FORMAT, "branch": branch, "split": split,
                         "dataset_hash": P.file_digest(source)},
                  {"z": z, "residual": residual})


def load_latents(run: Run, branch, split):
    hint = ("run `pdelatent fit-map`" if branch == "map" else "run `pdelatent train-encoder`")
    path = require(run.latents(branch, split), hint)
    check_lineage(run, path)
    header, arrays = read_container(path)
    if header.get("format") != LATENT_FORMAT:
        raise CliError(f"{path}: not a latent file")
    if header["dataset_hash"] != P.file_digest(run.data(split)):
        raise CliError(f"{path} was computed from a different {split} dataset; regenerate it")
    return arrays["z"], arrays["residual"]


def load_diffusion(run: Run, branch):
    path = require(run.diffusion_ckpt(branch), f"run `pdelatent train-diffusion --branch {branch}`")
    check_lineage(run, path)
    model, header = load_checkpoint(path)
    return model, LatentStats.from_dict(header["latent_stats"])


def init_latents(run: Run, branch, split):
    return load_latents(run, branch, split)[0]


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(run: Run, args):
    outs = []
    for split in args.splits:
        t0 = time.time()
        ds = P.generate_split(run.cfg, split)
        ds.save(run.data(split))
        outs.append(run.data(split))
        print(f"{split}: {len(ds)} samples -> {run.data(split)} ({time.time() - t0:.1f}s)")
    run.manifest("gen-data-" + "-".join(args.splits), outputs=outs)


def cmd_fit_map(run: Run, args):
    ins, outs = [], []
    for split in args.splits:
        ds = load_data(run, split)
        t0 = time.time()
        z, res = P.fit_map(ds, run.cfg.map, seed=run.cfg.seed)
        save_latents(run.latents("map", split), z, res, "map", split, run.data(split))
        ins.append(run.data(split))
        outs.append(run.latents("map", split))
        print(f"{split}: MAP mean residual {res.mean():.4g} ({time.time() - t0:.1f}s)")
    run.manifest("fit-map-" + "-".join(args.splits), ins, outs)


def cmd_train_encoder(run: Run, args):
    ds = load_data(run, "train")
    model = LatentEncoder(run.cfg.encoder_config())
    hist = P.train_encoder(ds, model, run.cfg.encoder_train,
                           callback=lambda h: print(f"epoch {h['epoch']:3d} loss {h['loss']:.5f}"))
    save_checkpoint(run.encoder_ckpt(), model,
                    {"seed": run.cfg.encoder_train.seed, "epochs": len(hist),
                     "step": len(hist) * -(-len(ds) // run.cfg.encoder_train.batch_size),
                     "latent_stats": LatentStats.prior(ds.regime, ds.forcing_modes).to_dict(),
                     "history": hist})
    ins, outs = [run.data("train")], [run.encoder_ckpt()]
    for split in SPLITS:
        if not run.data(split).exists():
            continue
        sds = load_data(run, split)
        z = P.encoder_predict(model, sds)
        res = P.residual_problem(sds).value(z)
        save_latents(run.latents("encoder", split), z, res, "encoder", split, run.data(split))
        ins.append(run.data(split))
        outs.append(run.latents("encoder", split))
    run.manifest("train-encoder", ins, outs)


def cmd_train_diffusion(run: Run, args):
    ds = load_data(run, "train")
    z, _ = load_latents(run, args.branch, "train")
    model = Denoiser(run.cfg.denoiser_config())
    stats, hist = P.train_diffusion(
        ds, z, args.branch, model, run.cfg.diffusion_train,
        callback=lambda h: print(f"epoch {h['epoch']:3d} loss {h['loss']:.5f}"))
    out = run.diffusion_ckpt(args.branch)
    save_checkpoint(out, model,
                    {"seed": run.cfg.diffusion_train.seed, "branch": args.branch,
                     "epochs": len(hist),
                     "step": len(hist) * -(-len(ds) // run.cfg.diffusion_train.batch_size),
                     "latent_stats": stats.to_dict(), "history": hist})
    run.manifest(f"train-diffusion-{args.branch}",
                 [run.data("train"), run.latents(args.branch, "train")], [out])


def resolve_branch(run: Run, split, requested):
    if split == "test":
        path = run.decision()
        if not path.exists():
            raise CliError("refusing to evaluate on the test split without a branch decision; "
                           "run `pdelatent select-branch` on validation results first")
        check_lineage(run, path)
        decided = json.loads(path.read_text())["branch"]
        if requested and requested != decided:
            raise CliError(f"test evaluation must use the selected branch {decided!r}, "
                           f"not {requested!r}")
        return decided
    if not requested:
        raise CliError("--branch is required outside the test split")
    return requested


def cmd_evaluate(run: Run, args):
    branch = resolve_branch(run, args.split, args.branch)
    ds = load_data(run, args.split)
    model, stats = load_diffusion(run, branch)
    z_init = init_latents(run, branch, args.split)
    t0 = time.time()
    ens = P.latentpde_reconstruct(ds, model, stats, z_init, run.cfg.sampler, seed=run.cfg.seed)
    means = np.array([e.mean for e in ens])
    rows = P.metric_rows(ds, "latentpde", means, run.cfg.seed, ens)
    rows += P.metric_rows(ds, "init", P.hr_decoder(ds)(z_init[:, None])[:, 0], run.cfg.seed)
    out = run.results(args.split, branch, "latentpde")
    P.write_results(out, rows + P.aggregate_rows(rows))
    k = run.cfg.sampler.members
    member_fields = np.array([np.pad(e.members, ((0, k - len(e.members)), (0, 0), (0, 0)),
                                     constant_values=np.nan) for e in ens])
    write_records(run.ensembles(args.split, branch),
                  {"format": "pdelatent-ensembles/1", "branch": branch, "split": args.split},
                  {"mean": means, "members": member_fields})
    print_summary(rows, f"{args.split} / {branch} ({time.time() - t0:.1f}s)")
    ins = [run.data(args.split), run.latents(branch, args.split), run.diffusion_ckpt(branch)]
    if args.split == "test":
        ins.append(run.decision())
    run.manifest(f"evaluate-{args.split}-{branch}", ins, [out, run.ensembles(args.split, branch)])


def cmd_baselines(run: Run, args):
    branch = resolve_branch(run, args.split, args.branch)
    ds = load_data(run, args.split)
    z_init = init_latents(run, branch, args.split)
    xv, xe, xb = P.run_baselines(ds, z_init, run.cfg.var, run.cfg.enkf, seed=run.cfg.seed)
    rows = (P.metric_rows(ds, "3dvar", xv, run.cfg.seed) + P.metric_rows(ds, "enkf", xe, run.cfg.seed)
            + P.metric_rows(ds, "background", xb, run.cfg.seed))
    out = run.results(args.split, branch, "baselines")
    P.write_results(out, rows + P.aggregate_rows(rows))
    print_summary(rows, f"{args.split} / {branch} baselines")
    if args.plots:
        write_plots(run, args.split, branch, ds, {"3D-Var": xv, "EnKF": xe})
    ins = [run.data(args.split), run.latents(branch, args.split)]
    if args.split == "test":
        ins.append(run.decision())
    run.manifest(f"baselines-{args.split}-{branch}", ins, [out])


def write_plots(run: Run, split, branch, ds, estimates):
    from . import plots
    ens_path = run.ensembles(split, branch)
    if ens_path.exists():
        estimates = {"LatentPDE": read_container(ens_path)[1]["mean"], **estimates}
    fig_dir = run.root / "figures"
    plots.plot_radial_psd(ds.u_out_hr, estimates, fig_dir / f"{split}_{branch}_psd.png")
    plots.plot_error_maps(ds.u_out_hr, estimates, fig_dir / f"{split}_{branch}_errors.png")
    print(f"figures written to {fig_dir}")


def select_branch(val_results: dict, metric: str = "rmse") -> dict:
    """Pick the branch with the lower mean validation ``metric`` (ties go to ``map``)."""
    scores = {}
    for branch, rows in val_results.items():
        vals = [float(r["value"]) for r in rows
                if r["method"] == "latentpde" and r["metric"] == metric and r["instance"] != "mean"]
        if not vals:
            raise CliError(f"validation results for {branch!r} contain no latentpde {metric} rows")
        scores[branch] = float(np.mean(vals))
    best = min(P.BRANCHES, key=lambda b: (scores.get(b, np.inf), P.BRANCHES.index(b)))
    return {"format": DECISION_FORMAT, "branch": best, "metric": metric, "scores": scores}


def cmd_select_branch(run: Run, args):
    paths = {b: run.results("val", b, "latentpde") for b in P.BRANCHES}
    present = {b: p for b, p in paths.items() if p.exists()}
    if not present:
        raise CliError("no validation results found; run `pdelatent evaluate --split val --branch ...`")
    for p in present.values():
        check_lineage(run, p)
    decision = select_branch({b: P.read_results(p) for b, p in present.items()})
    out = run.decision()
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(decision, indent=2, sort_keys=True) + "\n")
    print(f"selected branch: {decision['branch']}  scores: {decision['scores']}")
    run.manifest("select-branch", list(present.values()), [out])


def print_summary(rows, title):
    print(title)
    for method, metrics in P.summary(rows).items():
        print(f"  {method:12s} " + "  ".join(f"{k}={v:.4f}" for k, v in sorted(metrics.items())))


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser():
    parser = argparse.ArgumentParser(prog="pdelatent", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=os.environ.get(OUT_ENV, "runs/default"),
                        help=f"run directory (default ${OUT_ENV} or runs/default)")
    common.add_argument("--config", help="JSON config file; defaults to the run's resolved config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. --set map.steps=100 (repeatable)")
    common.add_argument("--regime")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate train/val/test datasets")
    p.add_argument("--splits", nargs="+", choices=SPLITS, default=list(SPLITS))
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("fit-map", parents=[common], help="per-sample MAP latents")
    p.add_argument("--splits", nargs="+", choices=SPLITS, default=list(SPLITS))
    p.set_defaults(func=cmd_fit_map)

    p = sub.add_parser("train-encoder", parents=[common], help="train the amortized encoder")
    p.set_defaults(func=cmd_train_encoder)

    p = sub.add_parser("train-diffusion", parents=[common], help="train a latent denoiser")
    p.add_argument("--branch", choices=P.BRANCHES, required=True)
    p.set_defaults(func=cmd_train_diffusion)

    for name, func, helptext in (("evaluate", cmd_evaluate, "posterior ensembles and metrics"),
                                 ("baselines", cmd_baselines, "3D-Var and EnKF metrics")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--split", choices=("val", "test"), required=True)
        p.add_argument("--branch", choices=P.BRANCHES,
                       help="initialization branch (test split: taken from the decision file)")
        p.set_defaults(func=func)
        if name == "baselines":
            p.add_argument("--plots", action="store_true",
                           help="also write PSD and error-map figures (needs matplotlib)")

    p = sub.add_parser("select-branch", parents=[common],
                       help="freeze the initialization branch from validation RMSE")
    p.set_defaults(func=cmd_select_branch)
    return parser


def resolve_config(args) -> P.ExperimentConfig:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise CliError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = parse_value(value)
    for key in ("regime", "seed", "workers"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    path = args.config
    resolved = Path(args.out) / "config.resolved.json"
    if path is None and resolved.exists() and args.command != "gen-data":
        path = resolved
    try:
        return P.load_config(path, overrides)
    except (TypeError, ValueError, json.JSONDecodeError) as exc:
        raise CliError(f"bad configuration: {exc}") from exc


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        print(json.dumps(cfg.to_dict(), sort_keys=True))
        args.func(Run(args.out, cfg), args)
    except (CliError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
