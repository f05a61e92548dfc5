"""Pipeline service: one method per CLI subcommand, each reading and writing the run directory."""

import logging
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from ..config import save_run_config
from ..core import checkpoint, io_utils, metrics
from ..core.diffusion import (
    CLASS_NAMES,
    NoiseSchedule,
    ProxyClassifier,
    denoiser_loss,
    gen_dataset,
    train_classifier,
    train_denoiser,
)
from ..core.rl import (
    GuidanceEnv,
    TargetGuidanceEnv,
    build_controller,
    evaluate_episodic_reward,
    run_inference,
    run_training,
)
from ..models import (
    AblationRow,
    ActorKind,
    BenchmarkRow,
    EvalRow,
    IterationLog,
    RunConfig,
    SampleManifest,
    SampleRecord,
)
from ..utils.helpers import derive_seed, format_duration

logger = logging.getLogger(__name__)

# Metric directions used when marking the best row of a report.
HIGHER_IS_BETTER = {"psnr_mean": True, "ssim_mean": True, "lpips_mean": False, "params": False, "accuracy": True}
SEED_MASK = 0xFFFFFFFF


def progress_enabled() -> bool:
    return logging.getLogger().isEnabledFor(logging.INFO)


def nearest_reference(image: np.ndarray, references: np.ndarray) -> np.ndarray:
    """Reference image with the smallest mean squared error to ``image``."""
    errors = np.mean((references - image[None]) ** 2, axis=(1, 2))
    return references[int(np.argmin(errors))]


def score_samples(
    model: str,
    images: Sequence[np.ndarray],
    labels: Sequence[int],
    ref_images: np.ndarray,
    ref_labels: np.ndarray,
    clf: ProxyClassifier,
    params: int,
) -> EvalRow:
    """PSNR / SSIM / LPIPS-proxy against class-matched nearest references, plus classifier accuracy."""
    if len(images) == 0:
        raise ValueError("no samples to evaluate")
    psnrs, ssims, lpips, hits = [], [], [], []
    for image, label in zip(images, labels):
        pool = ref_images[ref_labels == label]
        if len(pool) == 0:
            raise ValueError(f"no reference images for class {label}")
        ref = nearest_reference(image, pool)
        psnrs.append(metrics.psnr(ref, image))
        ssims.append(metrics.ssim(ref, image))
        lpips.append(metrics.lpips_proxy(ref, image, clf))
        hits.append(int(np.argmax(clf.probabilities(image))) == label)

    psnr_mean, psnr_std = metrics.mean_std(psnrs)
    ssim_mean, ssim_std = metrics.mean_std(ssims)
    lpips_mean, lpips_std = metrics.mean_std(lpips)
    return EvalRow(
        model=model,
        psnr_mean=psnr_mean,
        psnr_std=psnr_std,
        ssim_mean=ssim_mean,
        ssim_std=ssim_std,
        lpips_mean=lpips_mean,
        lpips_std=lpips_std,
        params=params,
        accuracy=float(np.mean(hits)),
    )


def mark_best(rows: Sequence[EvalRow]) -> List[List[str]]:
    """For every row, the metrics on which it is best (ties mark every tied row)."""
    marks: List[List[str]] = [[] for _ in rows]
    for column, higher in HIGHER_IS_BETTER.items():
        values = np.array([float(getattr(r, column)) for r in rows])
        finite = values[np.isfinite(values)]
        if finite.size == 0:
            continue
        target = finite.max() if higher else finite.min()
        for i, value in enumerate(values):
            if value == target:
                marks[i].append(column)
    return marks


class PipelineService:
    """Runs each experiment stage against a RunConfig and its output directory."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.root = Path(config.out_dir or ".")
        self.schedule = NoiseSchedule.from_config(config.schedule)
        self.progress = progress_enabled()

    # -- paths ---------------------------------------------------------------

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def models_dir(self) -> Path:
        return self.root / "models"

    def controller_dir(self, kind: ActorKind) -> Path:
        return self.root / "controller" / kind.value

    def samples_dir(self, kind: ActorKind) -> Path:
        return self.root / "samples" / kind.value

    def seed_for(self, name: str) -> int:
        return derive_seed(self.config.seed, name)

    # -- loading -------------------------------------------------------------

    def _load_dataset(self):
        return io_utils.load_dataset(self.data_dir)

    def _require(self, *paths: Path):
        for path in paths:
            if not path.exists():
                raise FileNotFoundError(f"required file not found: {path}")

    def _load_denoiser(self):
        return checkpoint.load_model(self.models_dir / "denoiser.ckpt", checkpoint.KIND_DENOISER)

    def _load_classifier(self):
        return checkpoint.load_model(self.models_dir / "classifier.ckpt", checkpoint.KIND_CLASSIFIER)

    def _load_actor(self, kind: ActorKind, path: Optional[Path] = None):
        path = Path(path) if path else self.controller_dir(kind) / "actor.ckpt"
        return checkpoint.load_model(path, (checkpoint.KIND_HYBRID_ACTOR, checkpoint.KIND_CLASSICAL_ACTOR))

    def _controller(self, kind: ActorKind, actor_path: Optional[Path] = None):
        actor = self._load_actor(kind, actor_path) if kind.is_learned else None
        return build_controller(kind, self.config, actor)

    def _env(self, denoiser, classifier, seed: int) -> GuidanceEnv:
        return GuidanceEnv(denoiser, classifier, self.schedule, self.config.reward, self.config.cfg0, np.random.default_rng(seed))

    # -- stages --------------------------------------------------------------

    def cmd_gen_data(self) -> Path:
        """Write the procedural dataset and its JSON sidecar."""
        data = self.config.data
        seed = data.seed if data.seed is not None else self.seed_for("data") & SEED_MASK
        dataset = gen_dataset(seed, data.n_per_class, data.image_size)
        io_utils.save_dataset(dataset, self.data_dir)
        save_run_config(self.config, self.root / "config.json")
        logger.info("Dataset: %d images, per class %s", len(dataset.labels), dataset.class_counts())
        return self.data_dir

    def cmd_train_denoiser(self) -> Path:
        dataset = self._load_dataset()
        started = time.time()
        rng = np.random.default_rng(self.seed_for("denoiser"))
        denoiser, history = train_denoiser(dataset, self.schedule, self.config.denoiser, rng, self.progress)

        path = checkpoint.save_model(self.models_dir / "denoiser.ckpt", denoiser)
        io_utils.write_csv(self.models_dir / "denoiser_loss.csv", ["epoch", "loss"], enumerate(history.losses))
        val = denoiser_loss(denoiser, self.schedule, dataset.test_images, dataset.test_labels, self.seed_for("denoiser-val"))
        logger.info("Denoiser done in %s, validation loss %.5f", format_duration(time.time() - started), val)
        return path

    def cmd_train_classifier(self) -> Path:
        dataset = self._load_dataset()
        rng = np.random.default_rng(self.seed_for("classifier"))
        clf, history, accuracy = train_classifier(dataset, self.config.classifier, rng, self.progress)

        path = checkpoint.save_model(self.models_dir / "classifier.ckpt", clf)
        io_utils.write_csv(self.models_dir / "classifier_loss.csv", ["epoch", "loss"], enumerate(history.losses))
        logger.info("Classifier saved to %s, test accuracy %.4f", path, accuracy)
        return path

    def cmd_train_controller(self, diagnostic: Optional[float] = None) -> Path:
        """Train the configured actor with PPO; ``diagnostic`` swaps in the hidden-target environment."""
        kind = self.config.actor
        if not kind.is_learned:
            raise ValueError(f"--actor {kind.value} has no trainable controller")
        target = diagnostic if diagnostic is not None else self.config.controller.diagnostic_target

        if target is None:
            self._require(self.models_dir / "denoiser.ckpt", self.models_dir / "classifier.ckpt")
            denoiser, classifier = self._load_denoiser(), self._load_classifier()

            def env_factory(i, rng):
                return GuidanceEnv(denoiser, classifier, self.schedule, self.config.reward, self.config.cfg0, rng)
        else:
            def env_factory(i, rng):
                return TargetGuidanceEnv(target, self.config.cfg0, self.config.schedule.t_sample, rng)

        started = time.time()
        result = run_training(self.config, env_factory, seed=self.seed_for("controller"), progress=self.progress)

        out = io_utils.ensure_dir(self.controller_dir(kind))
        checkpoint.save_model(out / "actor.ckpt", result.best_actor or result.actor)
        checkpoint.save_model(out / "critic.ckpt", result.best_critic or result.critic)
        io_utils.write_models_csv(out / "training_log.csv", result.log, IterationLog)
        save_run_config(self.config, out / "config.json")
        logger.info(
            "Controller %s trained in %s, best mean reward %.4f",
            kind.value, format_duration(time.time() - started), result.best_reward,
        )
        return out

    def cmd_sample(
        self,
        n: int,
        labels: Optional[Sequence[int]] = None,
        actor_path: Optional[Path] = None,
        png: bool = False,
    ) -> Path:
        """Generate ``n`` images with the configured controller, plus per-image guidance traces."""
        if n < 1:
            raise ValueError(f"n must be >= 1, got {n}")
        kind = self.config.actor
        self._require(self.models_dir / "denoiser.ckpt", self.models_dir / "classifier.ckpt")
        controller = self._controller(kind, actor_path)
        env = self._env(self._load_denoiser(), self._load_classifier(), self.seed_for("sample-env"))

        labels = list(labels) if labels else list(range(len(CLASS_NAMES)))
        for label in labels:
            if not 0 <= label < len(CLASS_NAMES):
                raise ValueError(f"label {label} outside [0, {len(CLASS_NAMES) - 1}]")

        out = io_utils.ensure_dir(self.samples_dir(kind))
        manifest = SampleManifest(actor=kind, cfg0=self.config.cfg0, params=controller.param_count())
        seed = self.config.seed
        for index in tqdm(range(n), desc=f"sample[{kind.value}]", disable=not self.progress):
            label = labels[index % len(labels)]
            result = run_inference(controller, env, label, self.seed_for(f"sample:{index}") & SEED_MASK)
            stem = f"{label}_{seed}_{index}"
            io_utils.write_image(out / f"{stem}.pgm", result.image)
            if png:
                io_utils.write_image(out / f"{stem}.png", result.image)
            io_utils.write_csv(
                out / f"{stem}.csv",
                ["step", "t", "guidance", "action"],
                ([row["step"], row["t"], row["guidance"], row["action"]] for row in result.trace),
            )
            manifest.samples.append(SampleRecord(
                file=f"{stem}.pgm", trace=f"{stem}.csv", label=label, class_name=CLASS_NAMES[label],
                seed=seed, index=index, episode_reward=result.episode_reward,
            ))
        io_utils.write_json(out / "samples.json", manifest)
        logger.info("Wrote %d samples to %s", n, out)
        return out

    def cmd_evaluate(self, sample_dir: Optional[Path] = None) -> Path:
        sample_dir = Path(sample_dir) if sample_dir else self.samples_dir(self.config.actor)
        manifest_path = sample_dir / "samples.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no samples manifest in {sample_dir}")
        manifest = SampleManifest.model_validate_json(manifest_path.read_text())
        if not manifest.samples:
            raise ValueError(f"sample directory {sample_dir} is empty")

        dataset = self._load_dataset()
        clf = self._load_classifier()
        images = [io_utils.read_image(sample_dir / s.file) for s in manifest.samples]
        labels = [s.label for s in manifest.samples]
        row = score_samples(
            manifest.actor.value, images, labels, dataset.test_images, dataset.test_labels, clf, manifest.params
        )

        path = io_utils.write_models_csv(self.root / "eval" / f"{manifest.actor.value}.csv", [row], EvalRow)
        logger.info(
            "%s: PSNR %.3f, SSIM %.4f, LPIPS-proxy %.4f, accuracy %.3f",
            row.model, row.psnr_mean, row.ssim_mean, row.lpips_mean, row.accuracy,
        )
        return path

    def cmd_report(self, eval_csvs: Sequence[Path]) -> Path:
        """Merge evaluation CSVs into one comparison table with best-per-metric markers."""
        if not eval_csvs:
            raise ValueError("report needs at least one evaluation CSV")
        rows: List[EvalRow] = []
        for path in eval_csvs:
            rows.extend(io_utils.read_models_csv(path, EvalRow))
        marks = mark_best(rows)

        out = io_utils.ensure_dir(self.root / "report")
        header = list(EvalRow.model_fields) + ["best"]
        io_utils.write_csv(
            out / "report.csv",
            header,
            ([getattr(r, f) for f in EvalRow.model_fields] + [";".join(m)] for r, m in zip(rows, marks)),
        )
        text = format_report(rows, marks)
        (out / "report.txt").write_text(text)
        print(text)
        logger.info("Report with %d rows written to %s", len(rows), out)
        return out

    def cmd_benchmark(
        self,
        seeds: Sequence[int],
        episodes: int,
        kinds: Optional[Sequence[ActorKind]] = None,
        actor_paths: Optional[Dict[ActorKind, Path]] = None,
    ) -> Path:
        """Episodic reward of each controller over several seeds under deterministic actions."""
        if not seeds:
            raise ValueError("benchmark needs at least one seed")
        actor_paths = actor_paths or {}
        if kinds is None:
            kinds = [ActorKind.FIXED, ActorKind.LINEAR, ActorKind.COSINE]
            kinds += [k for k in (ActorKind.QUANTUM, ActorKind.CLASSICAL)
                      if (self.controller_dir(k) / "actor.ckpt").exists() or k in actor_paths]

        self._require(self.models_dir / "denoiser.ckpt", self.models_dir / "classifier.ckpt")
        denoiser, classifier = self._load_denoiser(), self._load_classifier()
        rows: List[BenchmarkRow] = []
        for kind in kinds:
            controller = self._controller(kind, actor_paths.get(kind))
            means = []
            for seed in seeds:
                env = self._env(denoiser, classifier, seed)
                mean, std = evaluate_episodic_reward(controller, env, episodes, seed)
                means.append(mean)
                rows.append(BenchmarkRow(
                    model=kind.value, seed=str(seed), episodes=episodes,
                    reward_mean=mean, reward_std=std, params=controller.param_count(),
                ))
            overall, spread = metrics.mean_std(means)
            rows.append(BenchmarkRow(
                model=kind.value, seed="all", episodes=episodes * len(seeds),
                reward_mean=overall, reward_std=spread, params=controller.param_count(),
            ))
            logger.info("%s: episodic reward %.4f +/- %.4f over %d seeds", kind.value, overall, spread, len(seeds))

        return io_utils.write_models_csv(self.root / "benchmark" / "benchmark.csv", rows, BenchmarkRow)

    def _variant(self, **sections) -> RunConfig:
        """Copy of the run config with some sections partially replaced, validated again."""
        data = self.config.model_dump()
        for section, values in sections.items():
            if isinstance(values, dict):
                data[section].update(values)
            else:
                data[section] = values
        return RunConfig.model_validate(data)

    def cmd_ablation(
        self,
        qubits: Sequence[int],
        depths: Sequence[int],
        t_samples: Optional[Sequence[int]] = None,
        episodes: int = 4,
        diagnostic: Optional[float] = None,
    ) -> Path:
        """Train a hybrid actor for every (qubits, depth, T_sample) and score it next to fixed guidance.

        All variants share the evaluation seed, so rows at one T_sample see the same initial latents.
        """
        if not qubits or not depths:
            raise ValueError("ablation needs at least one qubit count and one depth")
        if episodes < 1:
            raise ValueError(f"episodes must be >= 1, got {episodes}")
        t_samples = list(t_samples) if t_samples else [self.config.schedule.t_sample]
        target = diagnostic if diagnostic is not None else self.config.controller.diagnostic_target
        if target is None:
            self._require(self.models_dir / "denoiser.ckpt", self.models_dir / "classifier.ckpt")
            denoiser, classifier = self._load_denoiser(), self._load_classifier()

        def make_env(variant: RunConfig, rng: np.random.Generator):
            if target is not None:
                return TargetGuidanceEnv(target, variant.cfg0, variant.schedule.t_sample, rng)
            schedule = NoiseSchedule.from_config(variant.schedule)
            return GuidanceEnv(denoiser, classifier, schedule, variant.reward, variant.cfg0, rng)

        eval_seed = self.seed_for("ablation-eval") & SEED_MASK
        rows: List[AblationRow] = []
        for t_sample in t_samples:
            baseline = self._variant(schedule={"t_sample": t_sample})
            mean, std = evaluate_episodic_reward(
                build_controller(ActorKind.FIXED, baseline), make_env(baseline, np.random.default_rng(eval_seed)),
                episodes, eval_seed,
            )
            rows.append(AblationRow(
                model=ActorKind.FIXED.value, n_qubits=0, depth=0, t_sample=t_sample, params=0,
                reward_mean=mean, reward_std=std,
            ))

            for n_qubits in qubits:
                for depth in depths:
                    variant = self._variant(
                        actor=ActorKind.QUANTUM.value,
                        vqc={"n_qubits": n_qubits, "depth": depth},
                        schedule={"t_sample": t_sample},
                    )
                    result = run_training(
                        variant,
                        lambda i, rng, variant=variant: make_env(variant, rng),
                        seed=self.seed_for(f"ablation:{n_qubits}:{depth}:{t_sample}"),
                        progress=self.progress,
                    )
                    controller = build_controller(ActorKind.QUANTUM, variant, result.best_actor or result.actor)
                    env = make_env(variant, np.random.default_rng(eval_seed))
                    mean, std = evaluate_episodic_reward(controller, env, episodes, eval_seed)
                    rows.append(AblationRow(
                        model=ActorKind.QUANTUM.value, n_qubits=n_qubits, depth=depth, t_sample=t_sample,
                        params=controller.param_count(), reward_mean=mean, reward_std=std,
                    ))
                    logger.info(
                        "Ablation n_q=%d L=%d T_sample=%d: %d params, episodic reward %.4f +/- %.4f",
                        n_qubits, depth, t_sample, controller.param_count(), mean, std,
                    )

        return io_utils.write_models_csv(self.root / "ablation" / "ablation.csv", rows, AblationRow)

    def cmd_grid(self, sample_dirs: Sequence[Path]) -> Path:
        """One mosaic: first row test references, then one row per sample directory, one column per class."""
        dataset = self._load_dataset()
        blank = np.full((dataset.image_size, dataset.image_size), -1.0)
        rows = [[dataset.test_images[dataset.test_labels == c][0] if np.any(dataset.test_labels == c) else blank
                 for c in range(len(CLASS_NAMES))]]
        for sample_dir in sample_dirs:
            sample_dir = Path(sample_dir)
            manifest_path = sample_dir / "samples.json"
            if not manifest_path.exists():
                raise FileNotFoundError(f"no samples manifest in {sample_dir}")
            manifest = SampleManifest.model_validate_json(manifest_path.read_text())
            first = {}
            for record in manifest.samples:
                first.setdefault(record.label, record.file)
            rows.append([io_utils.read_image(sample_dir / first[c]) if c in first else blank
                         for c in range(len(CLASS_NAMES))])

        out = io_utils.ensure_dir(self.root / "grid")
        path = io_utils.write_image(out / "grid.pgm", io_utils.mosaic(rows))
        logger.info("Grid with %d rows written to %s", len(rows), path)
        return path


def format_report(rows: Sequence[EvalRow], marks: Sequence[Sequence[str]]) -> str:
    """Side-by-side text table; '*' marks the best value of each metric."""
    lines = [
        "References: class-matched nearest test image (MSE). LPIPS uses proxy-classifier features.",
        f"{'model':<12} {'PSNR':>18} {'SSIM':>18} {'LPIPS-proxy':>18} {'params':>8} {'accuracy':>9}",
    ]
    for row, best in zip(rows, marks):
        def cell(mean, std, key):
            star = "*" if key in best else " "
            return f"{mean:8.4f} +/- {std:6.4f}{star}"

        lines.append(
            f"{row.model:<12} {cell(row.psnr_mean, row.psnr_std, 'psnr_mean'):>18} "
            f"{cell(row.ssim_mean, row.ssim_std, 'ssim_mean'):>18} "
            f"{cell(row.lpips_mean, row.lpips_std, 'lpips_mean'):>18} "
            f"{row.params:>7}{'*' if 'params' in best else ' '} "
            f"{row.accuracy:>8.3f}{'*' if 'accuracy' in best else ' '}"
        )
    return "\n".join(lines) + "\n"
