"""Experiment pipelines: robustness sweeps, observation-count study, anomaly
detection, domain adaptation, and adversarial defense.

Every pipeline consumes an ExperimentConfig, projects observations through the
projector module only (generator weights are never touched), and emits one
ResultRow per (grid point, method, seed) job. Jobs derive their seeds from the
root seed by label hashing, so enlarging a grid never reshuffles existing
points.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from .corruption_zoo import CorruptionSpec, apply_corruption, fgsm_attack, \
    build_universal_perturbation, apply_universal
from .data_io import Dataset, SplitSpec, generate_synthetic, load_dataset, \
    make_split, resize_images
from .generator_zoo import GanConfig, ClassifierConfig, GeneratorCheckpoint, \
    train_gan, train_classifier, save_gan_checkpoint, load_gan_checkpoint, \
    save_classifier_checkpoint, load_classifier_checkpoint, classify, \
    classifier_accuracy, CheckpointError
from .metrics import auroc, nn_classify_accuracy, reprojection_error
from .projector import ProjectorConfig, project, mimicgan_project
from .results import ResultRow
from .seeding import derive_seed

EXPERIMENTS = ("robustness", "obs_study", "anomaly", "adapt", "defend")

# Checkpoint naming convention for per-holdout-class generators.
GAN_CKPT_TEMPLATE = "gan_{dataset}_hold{k}.ckpt"


class MissingCheckpointError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    """One experiment run: grid x methods x seeds, all derived from root_seed."""

    experiment: str = "robustness"
    dataset: str = "synthetic"
    target_dataset: str = "synthetic_shifted"  # adapt only
    data_root: str = "data"
    out_dir: str = "runs/out"
    corruptions: list[CorruptionSpec] = field(default_factory=lambda: [
        CorruptionSpec("rotate", {"angle": a}) for a in (-30.0, -15.0, 0.0, 15.0, 30.0)
    ])
    methods: list[str] = field(default_factory=lambda: ["mimicgan", "pgd"])
    n_obs: int = 32
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    root_seed: int = 0
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)
    n_workers: int = 1

    # checkpoints (trained on demand when train_if_missing)
    gan_ckpt: str | None = None
    classifier_ckpt: str | None = None
    ckpt_dir: str = "runs/ckpts"
    train_if_missing: bool = True
    gan: GanConfig = field(default_factory=GanConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)

    # dataset shaping
    resolution: tuple[int, int] | None = None
    synthetic_n_per_class: int = 200
    synthetic_seed: int = 1
    split_fraction: float = 0.9
    split_seed: int = 0

    # obs_study
    obs_sizes: list[int] = field(default_factory=lambda: [1, 2, 4, 8, 16, 32])

    # anomaly
    holdout_classes: list[int] = field(default_factory=lambda: [0, 1, 2])
    anomaly_train_fraction: float = 0.8
    n_normal_eval: int = 80
    n_anomaly_eval: int = 80
    batch: int = 40

    # adapt
    n_source: int = 2000
    n_target: int = 200

    # defend
    n_eval: int = 150
    universal_build_n: int = 15

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; "
                             f"expected one of {EXPERIMENTS}")
        bad = [m for m in self.methods if m not in ("mimicgan", "pgd", "known_f", "encoder")]
        if bad:
            raise ValueError(f"unknown methods {bad}")


def get_dataset(name: str, cfg: ExperimentConfig) -> Dataset:
    """Resolve a dataset name; synthetic variants are generated in memory."""
    res = tuple(cfg.resolution) if cfg.resolution else (28, 28)
    if name == "synthetic":
        return generate_synthetic(cfg.synthetic_n_per_class, res, seed=cfg.synthetic_seed)
    if name == "synthetic_shifted":
        return generate_synthetic(cfg.synthetic_n_per_class, res,
                                  seed=cfg.synthetic_seed + 1, style="shifted")
    ds = load_dataset(name, cfg.data_root)
    if cfg.resolution and tuple(ds.resolution) != tuple(cfg.resolution):
        images = resize_images(ds.images, tuple(cfg.resolution))
        ds = Dataset(name=ds.name, images=images, labels=ds.labels,
                     resolution=tuple(cfg.resolution), channels=ds.channels)
    return ds


def ensure_gan(cfg: ExperimentConfig, train: Dataset, path: Path) -> GeneratorCheckpoint:
    if path.exists():
        return load_gan_checkpoint(path)
    if not cfg.train_if_missing:
        raise MissingCheckpointError(f"no GAN checkpoint at {path} and training disabled")
    ckpt = train_gan(train, cfg.gan)
    save_gan_checkpoint(ckpt, path)
    return ckpt


def primary_param(spec: CorruptionSpec) -> float | None:
    """The single scalar a sweep varies (None for parameterless kinds)."""
    if not spec.params:
        return None
    name = sorted(spec.params)[0]
    return float(spec.params[name])


def _sample_test_images(test: Dataset, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(test), size=min(n, len(test)), replace=False)
    return test.images[idx]


def _project_job(ckpt_path: str, y: np.ndarray, x_gt: np.ndarray | None,
                 method: str, cfg: ProjectorConfig) -> dict:
    """Worker-safe projection job (checkpoint passed by path)."""
    ckpt = load_gan_checkpoint(ckpt_path)
    res = project(ckpt, y, cfg, method, x_gt=x_gt)
    return {
        "d_proj": res.d_proj,
        "mimic_err_final": res.mimic_error[-1] if res.mimic_error else None,
        "wall_time_s": res.wall_time_s,
    }


def _run_jobs(jobs: list[tuple], n_workers: int) -> list:
    """jobs: (key, args-tuple) pairs for _project_job; returns [(key, out)]."""
    if n_workers <= 1:
        return [(key, _project_job(*args)) for key, args in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        futures = [(key, pool.submit(_project_job, *args)) for key, args in jobs]
        return [(key, f.result()) for key, f in futures]


def run_robustness_sweep(cfg: ExperimentConfig) -> list[ResultRow]:
    """Corrupt held-out images over a parameter grid, project with each
    method, and score reprojection error against the uncorrupted originals."""
    ds = get_dataset(cfg.dataset, cfg)
    train, test = make_split(ds, SplitSpec(cfg.split_fraction, seed=cfg.split_seed))
    ckpt_path = Path(cfg.gan_ckpt or Path(cfg.ckpt_dir) / f"gan_{cfg.dataset}.ckpt")
    ensure_gan(cfg, train, ckpt_path)

    jobs = []
    for spec in cfg.corruptions:
        for seed in cfg.seeds:
            job_seed = derive_seed(cfg.root_seed, "robustness", spec.kind,
                                   primary_param(spec), seed)
            x_gt = _sample_test_images(test, cfg.n_obs, job_seed)
            y = apply_corruption(replace(spec, seed=job_seed), x_gt).images
            for method in cfg.methods:
                pcfg = replace(cfg.projector, seed=job_seed)
                key = (spec, seed, method, len(y))
                jobs.append((key, (str(ckpt_path), y, x_gt, method, pcfg)))

    rows = []
    for (spec, seed, method, n), out in _run_jobs(jobs, cfg.n_workers):
        rows.append(ResultRow(
            run_id=f"rob-{spec.kind}-{primary_param(spec)}-{method}-s{seed}",
            experiment="robustness", method=method, corruption_kind=spec.kind,
            corruption_param=primary_param(spec), n_obs=n, seed=seed,
            d_proj_mean=float(out["d_proj"].mean()), d_proj_std=float(out["d_proj"].std()),
            mimic_err_final=out["mimic_err_final"], auroc=None, accuracy=None,
            wall_time_s=out["wall_time_s"]))
    return rows


def run_observation_count_study(cfg: ExperimentConfig) -> list[ResultRow]:
    """Projection quality and mimic error as the observation batch grows."""
    ds = get_dataset(cfg.dataset, cfg)
    train, test = make_split(ds, SplitSpec(cfg.split_fraction, seed=cfg.split_seed))
    ckpt_path = Path(cfg.gan_ckpt or Path(cfg.ckpt_dir) / f"gan_{cfg.dataset}.ckpt")
    ensure_gan(cfg, train, ckpt_path)
    spec = cfg.corruptions[0]

    jobs = []
    for size in cfg.obs_sizes:
        for seed in cfg.seeds:
            job_seed = derive_seed(cfg.root_seed, "obs_study", size, seed)
            x_gt = _sample_test_images(test, size, job_seed)
            y = apply_corruption(replace(spec, seed=job_seed), x_gt).images
            for method in cfg.methods:
                pcfg = replace(cfg.projector, seed=job_seed)
                jobs.append(((size, seed, method), (str(ckpt_path), y, x_gt, method, pcfg)))

    rows = []
    for (size, seed, method), out in _run_jobs(jobs, cfg.n_workers):
        rows.append(ResultRow(
            run_id=f"obs-{size}-{method}-s{seed}",
            experiment="obs_study", method=method, corruption_kind=spec.kind,
            corruption_param=float(size), n_obs=size, seed=seed,
            d_proj_mean=float(out["d_proj"].mean()), d_proj_std=float(out["d_proj"].std()),
            mimic_err_final=out["mimic_err_final"], auroc=None, accuracy=None,
            wall_time_s=out["wall_time_s"]))
    return rows


def _batched_scores(ckpt, images: np.ndarray, method: str, pcfg: ProjectorConfig,
                    batch: int) -> tuple[np.ndarray, float, float | None]:
    """Project in batches; anomaly score = L2 distance of each observation to
    its projection (no clean ground truth exists at deployment)."""
    scores = []
    wall = 0.0
    mimic_final = None
    for i in range(0, len(images), batch):
        y = images[i:i + batch]
        res = project(ckpt, y, replace(pcfg, seed=derive_seed(pcfg.seed, "batch", i)),
                      method)
        scores.append(reprojection_error(y, res.x_hat).per_sample)
        wall += res.wall_time_s
        if res.mimic_error:
            mimic_final = res.mimic_error[-1]
    return np.concatenate(scores), wall, mimic_final


def run_anomaly_detection(cfg: ExperimentConfig) -> list[ResultRow]:
    """Leave-one-class-out detection: train a GAN per held-out class, score
    test samples by projection error, report AUROC per class and method."""
    ds = get_dataset(cfg.dataset, cfg)
    rows = []
    for k in cfg.holdout_classes:
        split = SplitSpec(cfg.anomaly_train_fraction, holdout_class=k,
                          seed=cfg.split_seed)
        train, test = make_split(ds, split)
        ckpt_path = Path(cfg.ckpt_dir) / GAN_CKPT_TEMPLATE.format(dataset=cfg.dataset, k=k)
        gan_cfg = replace(cfg.gan, seed=derive_seed(cfg.gan.seed, "anomaly-gan", k))
        ckpt = ensure_gan(replace(cfg, gan=gan_cfg), train, ckpt_path)

        normal = test.images[test.labels != k]
        anom = test.images[test.labels == k]
        rng = np.random.default_rng(derive_seed(cfg.root_seed, "anomaly-eval", k))
        normal = normal[rng.choice(len(normal), min(cfg.n_normal_eval, len(normal)),
                                   replace=False)]
        anom = anom[rng.choice(len(anom), min(cfg.n_anomaly_eval, len(anom)),
                               replace=False)]
        for method in cfg.methods:
            pcfg = replace(cfg.projector,
                           seed=derive_seed(cfg.root_seed, "anomaly", k, method))
            ns, wall_n, mim = _batched_scores(ckpt, normal, method, pcfg, cfg.batch)
            as_, wall_a, _ = _batched_scores(ckpt, anom, method, pcfg, cfg.batch)
            rows.append(ResultRow(
                run_id=f"anom-hold{k}-{method}",
                experiment="anomaly", method=method, corruption_kind="holdout_class",
                corruption_param=float(k), n_obs=len(normal) + len(anom),
                seed=cfg.root_seed, d_proj_mean=float(ns.mean()),
                d_proj_std=float(ns.std()), mimic_err_final=mim,
                auroc=auroc(ns, as_), accuracy=None, wall_time_s=wall_n + wall_a))
    return rows


def _batched_projection(ckpt, images: np.ndarray, method: str,
                        pcfg: ProjectorConfig, batch: int) -> tuple[np.ndarray, float, float | None]:
    outs, wall, mimic_final = [], 0.0, None
    for i in range(0, len(images), batch):
        res = project(ckpt, images[i:i + batch],
                      replace(pcfg, seed=derive_seed(pcfg.seed, "batch", i)), method)
        outs.append(res.x_hat)
        wall += res.wall_time_s
        if res.mimic_error:
            mimic_final = res.mimic_error[-1]
    return np.concatenate(outs), wall, mimic_final


def run_domain_adaptation(cfg: ExperimentConfig) -> list[ResultRow]:
    """Project target-domain images onto the source GAN, then measure 1-NN
    label transfer from the source corpus. Includes a no-adaptation row."""
    source = get_dataset(cfg.dataset, cfg)
    target = get_dataset(cfg.target_dataset, cfg)
    src_train, _ = make_split(source, SplitSpec(cfg.split_fraction, seed=cfg.split_seed))
    ckpt_path = Path(cfg.gan_ckpt or Path(cfg.ckpt_dir) / f"gan_{cfg.dataset}.ckpt")
    ckpt = ensure_gan(cfg, src_train, ckpt_path)

    rng = np.random.default_rng(derive_seed(cfg.root_seed, "adapt-sample"))
    src_idx = rng.choice(len(source), min(cfg.n_source, len(source)), replace=False)
    bank = source.subset(src_idx)
    tgt_idx = rng.choice(len(target), min(cfg.n_target, len(target)), replace=False)
    tgt_images, tgt_labels = target.images[tgt_idx], target.labels[tgt_idx]

    direction = f"{cfg.target_dataset}->{cfg.dataset}"
    rows = [ResultRow(
        run_id=f"adapt-{direction}-none", experiment="adapt", method="none",
        corruption_kind="dataset_shift", corruption_param=None,
        n_obs=len(tgt_images), seed=cfg.root_seed, d_proj_mean=None,
        d_proj_std=None, mimic_err_final=None, auroc=None,
        accuracy=nn_classify_accuracy(bank, tgt_images, tgt_labels),
        wall_time_s=0.0)]
    for method in cfg.methods:
        pcfg = replace(cfg.projector, seed=derive_seed(cfg.root_seed, "adapt", method))
        proj, wall, mim = _batched_projection(ckpt, tgt_images, method, pcfg, cfg.batch)
        d = reprojection_error(tgt_images, proj)
        rows.append(ResultRow(
            run_id=f"adapt-{direction}-{method}", experiment="adapt", method=method,
            corruption_kind="dataset_shift", corruption_param=None,
            n_obs=len(tgt_images), seed=cfg.root_seed, d_proj_mean=d.mean,
            d_proj_std=d.std, mimic_err_final=mim, auroc=None,
            accuracy=nn_classify_accuracy(bank, proj, tgt_labels), wall_time_s=wall))
    return rows


def run_defense(cfg: ExperimentConfig) -> list[ResultRow]:
    """Attack a test subset, clean through each projection method, classify.

    Grid points come from cfg.corruptions (fgsm_adv / universal_adv / identity);
    a no-defense row accompanies every attack point.
    """
    ds = get_dataset(cfg.dataset, cfg)
    train, test = make_split(ds, SplitSpec(cfg.split_fraction, seed=cfg.split_seed))
    gan_path = Path(cfg.gan_ckpt or Path(cfg.ckpt_dir) / f"gan_{cfg.dataset}.ckpt")
    ckpt = ensure_gan(cfg, train, gan_path)
    clf_path = Path(cfg.classifier_ckpt or Path(cfg.ckpt_dir) / f"cnn_{cfg.dataset}.ckpt")
    if clf_path.exists():
        clf = load_classifier_checkpoint(clf_path)
    elif cfg.train_if_missing:
        clf = train_classifier(train, cfg.classifier, test=test)
        save_classifier_checkpoint(clf, clf_path)
    else:
        raise MissingCheckpointError(f"no classifier checkpoint at {clf_path}")

    rng = np.random.default_rng(derive_seed(cfg.root_seed, "defend-sample"))
    idx = rng.choice(len(test), min(cfg.n_eval, len(test)), replace=False)
    x, labels = test.images[idx], test.labels[idx]

    # Universal perturbation built from held-out images attacked one by one.
    build = test.images[:cfg.universal_build_n]
    build_labels = test.labels[:cfg.universal_build_n]
    base_eps = next((s.params["eps"] for s in cfg.corruptions if s.kind == "fgsm_adv"), 0.15)
    pert = build_universal_perturbation(
        build, fgsm_attack(clf, build, build_labels, base_eps))

    rows = []
    for spec in cfg.corruptions:
        param = primary_param(spec)
        if spec.kind == "fgsm_adv":
            y = fgsm_attack(clf, x, labels, param)
        elif spec.kind == "universal_adv":
            y = apply_universal(pert, x, alpha=param)
        elif spec.kind == "identity":
            y = x.copy()
        else:
            raise ValueError(f"defense does not support corruption {spec.kind!r}")
        rows.append(ResultRow(
            run_id=f"def-{spec.kind}-{param}-none", experiment="defend",
            method="none", corruption_kind=spec.kind, corruption_param=param,
            n_obs=len(y), seed=cfg.root_seed, d_proj_mean=None, d_proj_std=None,
            mimic_err_final=None, auroc=None,
            accuracy=float((classify(clf, y) == labels).mean()), wall_time_s=0.0))
        for method in cfg.methods:
            pcfg = replace(cfg.projector,
                           seed=derive_seed(cfg.root_seed, "defend", spec.kind, param, method))
            cleaned, wall, mim = _batched_projection(ckpt, y, method, pcfg, cfg.batch)
            acc = float((classify(clf, cleaned) == labels).mean())
            d = reprojection_error(x, cleaned)
            rows.append(ResultRow(
                run_id=f"def-{spec.kind}-{param}-{method}", experiment="defend",
                method=method, corruption_kind=spec.kind, corruption_param=param,
                n_obs=len(y), seed=cfg.root_seed, d_proj_mean=d.mean, d_proj_std=d.std,
                mimic_err_final=mim, auroc=None, accuracy=acc, wall_time_s=wall))
    return rows


def run_experiment(cfg: ExperimentConfig) -> list[ResultRow]:
    runner = {
        "robustness": run_robustness_sweep,
        "obs_study": run_observation_count_study,
        "anomaly": run_anomaly_detection,
        "adapt": run_domain_adaptation,
        "defend": run_defense,
    }[cfg.experiment]
    return runner(cfg)
