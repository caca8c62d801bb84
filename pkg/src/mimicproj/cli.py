"""Command-line front end.

Verbs: train-gan, train-classifier, project, robustness, obs-study, anomaly,
adapt, defend, plot. Experiment verbs take a JSON config (strict: unknown keys
rejected), echo the fully resolved config next to their outputs, and write
results as CSV plus PNG plots. The dataset root defaults to $MIMICPROJ_DATA.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .apps import ExperimentConfig, run_experiment, get_dataset
from .corruption_zoo import CorruptionSpec, apply_corruption, parse_corruption_flag
from .data_io import SplitSpec, make_split
from .generator_zoo import GanConfig, ClassifierConfig, train_gan, train_classifier, \
    save_gan_checkpoint, save_classifier_checkpoint, load_gan_checkpoint
from .projector import ProjectorConfig, project, mimicgan_project
from .results import ResultRow, write_results, read_results
from .metrics import reprojection_error


class ConfigError(ValueError):
    pass


def _coerce_dataclass(cls, data: dict, path: str):
    """Build a dataclass from a dict, rejecting unknown keys recursively."""
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(unknown)} under '{path}'")
    kwargs = {}
    for name, value in data.items():
        if name == "corruptions":
            kwargs[name] = [_coerce_corruption(v, f"{path}.corruptions") for v in value]
        elif name == "projector":
            kwargs[name] = _coerce_dataclass(ProjectorConfig, value, f"{path}.projector")
        elif name == "gan":
            kwargs[name] = _coerce_dataclass(GanConfig, value, f"{path}.gan")
        elif name == "classifier":
            kwargs[name] = _coerce_dataclass(ClassifierConfig, value, f"{path}.classifier")
        elif name == "resolution" and value is not None:
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _coerce_corruption(value, path: str) -> CorruptionSpec:
    if isinstance(value, str):
        return parse_corruption_flag(value)
    if isinstance(value, dict):
        known = {f.name for f in dataclasses.fields(CorruptionSpec)}
        unknown = set(value) - known
        if unknown:
            raise ConfigError(f"unknown corruption key(s) {sorted(unknown)} under '{path}'")
        return CorruptionSpec(**value)
    raise ConfigError(f"corruption entries must be dicts or flag strings, got {value!r}")


def parse_config(path: str | Path, experiment: str | None = None) -> ExperimentConfig:
    """Load an ExperimentConfig from JSON, filling defaults for absent keys."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON at line {e.lineno}, "
                          f"column {e.colno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    if experiment is not None:
        data.setdefault("experiment", experiment)
        if data["experiment"] != experiment:
            raise ConfigError(f"config names experiment {data['experiment']!r} but "
                              f"the {experiment!r} verb was invoked")
    base = default_experiment_config(data.get("experiment", "robustness"))
    merged = asdict(base)
    merged.update(data)
    # asdict flattened nested dataclasses; overlay partial nested dicts on defaults
    for key, sub in (("projector", ProjectorConfig), ("gan", GanConfig),
                     ("classifier", ClassifierConfig)):
        if key in data:
            full = asdict(getattr(base, key))
            full.update(data[key])
            merged[key] = full
    if "corruptions" not in data:
        merged["corruptions"] = list(base.corruptions)
    return _coerce_dataclass(ExperimentConfig, merged, "$")


def default_experiment_config(experiment: str) -> ExperimentConfig:
    """Per-experiment defaults; projector settings follow the reference values
    for each application (alignment and defense use their own schedules)."""
    if experiment == "robustness":
        return ExperimentConfig(experiment="robustness")
    if experiment == "obs_study":
        return ExperimentConfig(
            experiment="obs_study",
            corruptions=[CorruptionSpec("rotate", {"angle": 30.0})],
            methods=["mimicgan"], seeds=[0, 1, 2, 3, 4])
    if experiment == "anomaly":
        return ExperimentConfig(
            experiment="anomaly", methods=["mimicgan", "pgd"],
            corruptions=[CorruptionSpec("identity")],
            projector=ProjectorConfig(surrogate_iters=15, latent_iters=15,
                                      surrogate_lr=1e-2, latent_lr=9e-3))
    if experiment == "adapt":
        return ExperimentConfig(
            experiment="adapt", methods=["mimicgan", "pgd"],
            corruptions=[CorruptionSpec("dataset_shift")],
            resolution=(16, 16), batch=100,
            projector=ProjectorConfig(surrogate_iters=15, latent_iters=15,
                                      surrogate_lr=1e-2, latent_lr=9e-3))
    if experiment == "defend":
        return ExperimentConfig(
            experiment="defend", methods=["mimicgan", "pgd"],
            corruptions=[CorruptionSpec("fgsm_adv", {"eps": 0.15})],
            batch=100,
            projector=ProjectorConfig(surrogate_iters=10, latent_iters=10,
                                      surrogate_lr=1e-2, latent_lr=8e-2))
    raise ConfigError(f"unknown experiment {experiment!r}")


def _config_to_json(cfg: ExperimentConfig) -> str:
    return json.dumps(asdict(cfg), indent=2, sort_keys=True, default=list)


# ---------------------------------------------------------------------------
# Plot / grid emission
# ---------------------------------------------------------------------------


def _metric_column(rows: list[ResultRow]) -> str:
    if any(r.d_proj_mean is not None for r in rows):
        return "d_proj_mean"
    if any(r.auroc is not None for r in rows):
        return "auroc"
    return "accuracy"


def emit_plots(rows: list[ResultRow], out_dir: str | Path) -> list[Path]:
    """One line plot per (experiment, corruption_kind): metric mean across
    seeds vs corruption parameter, one series per method, std band when more
    than one seed. The plotted aggregates are also written as CSV."""
    if not rows:
        raise ValueError("no result rows to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    groups: dict[tuple[str, str], list[ResultRow]] = {}
    for r in rows:
        groups.setdefault((r.experiment, r.corruption_kind), []).append(r)

    for (exp, kind), grp in sorted(groups.items()):
        metric = _metric_column(grp)
        methods = sorted({r.method for r in grp})
        fig, ax = plt.subplots(figsize=(5.5, 4))
        agg_rows = []
        for method in methods:
            pts: dict[float, list[float]] = {}
            for r in grp:
                if r.method != method or getattr(r, metric) is None:
                    continue
                x = r.corruption_param if r.corruption_param is not None else 0.0
                pts.setdefault(x, []).append(getattr(r, metric))
            if not pts:
                continue
            xs = sorted(pts)
            means = np.array([np.mean(pts[x]) for x in xs])
            stds = np.array([np.std(pts[x]) for x in xs])
            ax.plot(xs, means, marker="o", label=method)
            if any(len(pts[x]) > 1 for x in xs):
                ax.fill_between(xs, means - stds, means + stds, alpha=0.2)
            for x, m, s in zip(xs, means, stds):
                agg_rows.append((method, x, m, s, len(pts[x])))
        ax.set_xlabel(f"{kind} parameter")
        ax.set_ylabel(metric)
        ax.set_title(f"{exp}: {kind}")
        ax.legend()
        fig.tight_layout()
        png = out_dir / f"{exp}_{kind}.png"
        fig.savefig(png, dpi=120)
        plt.close(fig)
        agg = out_dir / f"{exp}_{kind}_aggregate.csv"
        with open(agg, "w") as f:
            f.write(f"method,corruption_param,{metric}_mean,{metric}_std,n_seeds\n")
            for method, x, m, s, n in sorted(agg_rows):
                f.write(f"{method},{format(x, '.12g')},{format(m, '.12g')},"
                        f"{format(s, '.12g')},{n}\n")
        written.extend([png, agg])
    return written


def save_image_grid(images: np.ndarray, path: str | Path, ncol: int = 8,
                    title: str | None = None) -> Path:
    n = len(images)
    ncol = min(ncol, n)
    nrow = (n + ncol - 1) // ncol
    fig, axes = plt.subplots(nrow, ncol, figsize=(1.1 * ncol, 1.1 * nrow + 0.4),
                             squeeze=False)
    for i in range(nrow * ncol):
        ax = axes[i // ncol][i % ncol]
        ax.axis("off")
        if i < n:
            ax.imshow(images[i, 0], cmap="gray", vmin=-1, vmax=1)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------


def _data_root(args) -> str:
    return args.data_root or os.environ.get("MIMICPROJ_DATA", "data")


def _cmd_train_gan(args) -> int:
    cfg = ExperimentConfig(experiment="robustness", dataset=args.dataset,
                           data_root=_data_root(args),
                           synthetic_n_per_class=args.n_per_class,
                           resolution=tuple(args.resolution) if args.resolution else None)
    ds = get_dataset(args.dataset, cfg)
    if args.holdout_class is not None:
        split = SplitSpec(0.8, holdout_class=args.holdout_class, seed=args.seed)
        name = f"gan_{args.dataset}_hold{args.holdout_class}.ckpt"
    else:
        split = SplitSpec(0.9, seed=args.seed)
        name = f"gan_{args.dataset}.ckpt"
    train, _ = make_split(ds, split)
    gcfg = GanConfig(latent_dim=args.latent_dim, epochs=args.epochs, seed=args.seed)
    ckpt = train_gan(train, gcfg)
    ckpt.manifest["holdout_class"] = args.holdout_class
    path = save_gan_checkpoint(ckpt, Path(args.out) / name)
    print(f"wrote {path}")
    return 0


def _cmd_train_classifier(args) -> int:
    cfg = ExperimentConfig(experiment="defend", dataset=args.dataset,
                           data_root=_data_root(args),
                           synthetic_n_per_class=args.n_per_class)
    ds = get_dataset(args.dataset, cfg)
    train, test = make_split(ds, SplitSpec(0.9, seed=args.seed))
    clf = train_classifier(train, ClassifierConfig(epochs=args.epochs, seed=args.seed),
                           test=test)
    path = save_classifier_checkpoint(clf, Path(args.out) / f"cnn_{args.dataset}.ckpt")
    print(f"wrote {path} (test accuracy {clf.test_accuracy:.4f})")
    return 0


def _load_observations(spec: str, data_root: str):
    """Either a .npy file of images or '<dataset>:<n>[:<seed>]' test images."""
    if spec.endswith(".npy"):
        return np.load(spec).astype(np.float32), None
    parts = spec.split(":")
    name, n = parts[0], int(parts[1]) if len(parts) > 1 else 16
    seed = int(parts[2]) if len(parts) > 2 else 0
    cfg = ExperimentConfig(dataset=name, data_root=data_root)
    ds = get_dataset(name, cfg)
    _, test = make_split(ds, SplitSpec(0.9, seed=seed))
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(test), min(n, len(test)), replace=False)
    return test.images[idx], test.images[idx].copy()


def _cmd_project(args) -> int:
    ckpt = load_gan_checkpoint(args.ckpt)
    y, x_gt = _load_observations(args.obs, _data_root(args))
    if args.corruption:
        spec = parse_corruption_flag(args.corruption)
        y = apply_corruption(replace(spec, seed=args.seed), y).images
    pcfg = ProjectorConfig(outer_iters=args.outer, surrogate_iters=args.t1,
                           latent_iters=args.t2, surrogate_lr=args.gs,
                           latent_lr=args.gg, adv_weight=args.lambda_adv,
                           seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    surrogate = None
    if args.method == "mimicgan":
        res, surrogate = mimicgan_project(ckpt, y, pcfg, x_gt=x_gt)
    else:
        res = project(ckpt, y, pcfg, args.method, x_gt=x_gt)

    save_image_grid(y, out / "observations.png", title="Y_obs")
    save_image_grid(res.x_hat, out / "projection.png", title="X_hat")
    if surrogate is not None:
        import torch
        with torch.no_grad():
            mimicked = surrogate(torch.from_numpy(res.x_hat)).numpy()
        save_image_grid(np.clip(mimicked, -1, 1), out / "mimicked.png",
                        title="f_hat(X_hat)")
    payload = {
        "method": res.method,
        "mimic_error": res.mimic_error,
        "wall_time_s": res.wall_time_s,
        "d_proj": None if res.d_proj is None else res.d_proj.tolist(),
        "meta": res.meta,
        "z_star": res.z_star.tolist(),
    }
    (out / "result.json").write_text(json.dumps(payload, indent=2))
    print(f"wrote {out}/result.json (final objective "
          f"{res.mimic_error[-1] if res.mimic_error else float('nan'):.4f})")
    return 0


def _cmd_experiment(experiment: str, args) -> int:
    if args.config:
        cfg = parse_config(args.config, experiment)
    else:
        cfg = default_experiment_config(experiment)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    if args.data_root:
        cfg = replace(cfg, data_root=args.data_root)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(_config_to_json(cfg))
    try:
        rows = run_experiment(cfg)
    except Exception as e:  # noqa: BLE001 - failure manifest contract
        (out / "failures.json").write_text(json.dumps(
            {"experiment": experiment, "error": f"{type(e).__name__}: {e}"}, indent=2))
        print(f"experiment failed: {e}", file=sys.stderr)
        return 1
    write_results(rows, out / "results.csv")
    emit_plots(rows, out)
    print(f"wrote {out}/results.csv ({len(rows)} rows)")
    return 0


def _cmd_plot(args) -> int:
    rows = read_results(args.results)
    written = emit_plots(rows, args.out)
    print(f"wrote {len(written)} files under {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mimicproj",
                                description="Robust projection onto GAN image manifolds")
    sub = p.add_subparsers(dest="verb", required=True)

    tg = sub.add_parser("train-gan", help="train and save a generator checkpoint")
    tg.add_argument("--dataset", default="synthetic")
    tg.add_argument("--holdout-class", type=int, default=None)
    tg.add_argument("--epochs", type=int, default=20)
    tg.add_argument("--latent-dim", type=int, default=64)
    tg.add_argument("--seed", type=int, default=0)
    tg.add_argument("--out", default="runs/ckpts")
    tg.add_argument("--data-root", default=None)
    tg.add_argument("--n-per-class", type=int, default=200)
    tg.add_argument("--resolution", type=int, nargs=2, default=None)

    tc = sub.add_parser("train-classifier", help="train and save a CNN classifier")
    tc.add_argument("--dataset", default="synthetic")
    tc.add_argument("--epochs", type=int, default=3)
    tc.add_argument("--seed", type=int, default=0)
    tc.add_argument("--out", default="runs/ckpts")
    tc.add_argument("--data-root", default=None)
    tc.add_argument("--n-per-class", type=int, default=200)

    pr = sub.add_parser("project", help="project observations onto a checkpoint")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--method", default="mimicgan",
                    choices=["mimicgan", "pgd", "encoder"])
    pr.add_argument("--obs", required=True,
                    help=".npy file or '<dataset>:<n>[:<seed>]'")
    pr.add_argument("--corruption", default=None,
                    help="e.g. 'rotate:angle=30' applied to the observations")
    pr.add_argument("--t1", type=int, default=25)
    pr.add_argument("--t2", type=int, default=25)
    pr.add_argument("--outer", type=int, default=20)
    pr.add_argument("--gs", type=float, default=1e-2)
    pr.add_argument("--gg", type=float, default=1e-2)
    pr.add_argument("--lambda-adv", type=float, default=1e-4)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", default="runs/project")
    pr.add_argument("--data-root", default=None)

    for verb in ("robustness", "obs-study", "anomaly", "adapt", "defend"):
        ep = sub.add_parser(verb, help=f"run the {verb} experiment")
        ep.add_argument("--config", default=None, help="JSON config overriding defaults")
        ep.add_argument("--out", default=None)
        ep.add_argument("--data-root", default=None)

    pl = sub.add_parser("plot", help="re-plot an existing results.csv")
    pl.add_argument("--results", required=True)
    pl.add_argument("--out", default="runs/plots")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verb == "train-gan":
        return _cmd_train_gan(args)
    if args.verb == "train-classifier":
        return _cmd_train_classifier(args)
    if args.verb == "project":
        return _cmd_project(args)
    if args.verb == "plot":
        return _cmd_plot(args)
    return _cmd_experiment(args.verb.replace("-", "_"), args)


if __name__ == "__main__":
    sys.exit(main())
