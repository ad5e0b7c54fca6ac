"""
Config-driven pipelines behind every CLI command.

Each pipeline loads what it needs, runs, writes its artifacts and a `report.json`
into the output directory, and returns the `RunReport`.
"""
import copy
import math
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

from rich.console import Console
from rich.progress import Progress
from rich.table import Table

from core.arch.model import build_model, count_parameters
from core.arch.spec import ArchSpec
from core.config.config import ExperimentConfig
from core.config.config_load import LoadedConfig, resolve_data_path
from core.data.loaders import ImageDataset, load_cifar10_bin, load_mnist_idx
from core.data.synthetic import synth_splits
from core.data.transforms import NoiseSpec
from core.energy import render_ledger
from core.ensemble.model import ActivationPolicy, EnsembleModel, PolicyVariant, build_ensemble
from core.ensemble.trainer import EpochMetrics, EvalResult, evaluate, finetune_teacher, train_ensemble, train_teacher
from core.errors import ShapeError
from core.losses import DistillConfig
from core.partition.clustering import build_partition, extract_feature_matrix
from core.partition.plan import PartitionPlan, PartitionScheme, contiguous_partition, read_plan, validate_partition, \
    write_plan
from core.reports.report_generator import RunReport, make_run_id, save_report
from core.utils.checkpoint import load_checkpoint, load_ensemble, load_teacher, save_ensemble, save_teacher
from core.utils.logging import info, is_quiet, metric, neutral, section, success, warning
from core.utils.seeding import CLUSTER, DATA, DROPOUT, INIT, NOISE, derive_seed

console = Console()

TEACHER_CKPT = "teacher.npz"
FINETUNED_CKPT = "teacher_finetuned.npz"
ENSEMBLE_CKPT = "ensemble.npz"
PLAN_FILE = "plan.yaml"

Cell = Tuple[tuple, Callable[[], EvalResult]]


def load_datasets(config: ExperimentConfig) -> Tuple[ImageDataset, ImageDataset]:
    dataset = config.dataset
    if dataset.name == "synth":
        shape = (dataset.channels, dataset.image_size, dataset.image_size)
        train, test = synth_splits(dataset.classes, dataset.per_class, dataset.test_per_class, shape,
                                   dataset.separation, derive_seed(config.seed, DATA))
    else:
        path = resolve_data_path(config)
        loader = load_mnist_idx if dataset.name == "mnist" else load_cifar10_bin
        train, test = loader(path)
    return train.take(dataset.train_limit), test.take(dataset.test_limit)


def student_specs(config: ExperimentConfig, plan: PartitionPlan, image_shape) -> List[ArchSpec]:
    """One spiking student per plan subset, projected to |S_i| features when its native width differs."""
    specs = []
    for size in plan.sizes:
        spec = config.student_spec(image_shape)
        if spec.feature_dim != size:
            spec = config.student_spec(image_shape, feature_width=size)
        specs.append(spec)
    return specs


def simplex_separation(n_clusters: int) -> float:
    """Distance between unit vectors placed at the vertices of a regular simplex."""
    return math.sqrt(2 * n_clusters / (n_clusters - 1)) if n_clusters > 1 else 0.0


def result_row(split: str, result: EvalResult, **extra) -> dict:
    totals = result.ledger.totals()
    return {
        "split": split,
        "accuracy": result.accuracy,
        "sem": result.sem,
        "ce_loss": result.ce_loss,
        "repeats": result.repeats,
        "sigma": result.sigma,
        "k_active": result.k_active,
        **totals,
        **extra,
    }


def _last_losses(history: Sequence[EpochMetrics]) -> dict:
    if not history:
        return {}
    return {"kd_loss": history[-1].kd_loss, "sim_loss": history[-1].sim_loss}


class ExperimentRunner:
    def __init__(self, loaded: LoadedConfig, out_dir: Path):
        self.loaded = loaded
        self.config = loaded.config
        self.seed = loaded.config.seed
        self.out_dir = Path(out_dir)
        self._datasets: Optional[Tuple[ImageDataset, ImageDataset]] = None
        self._started = time.perf_counter()

    @property
    def datasets(self) -> Tuple[ImageDataset, ImageDataset]:
        if self._datasets is None:
            self._datasets = load_datasets(self.config)
            train, test = self._datasets
            info(f"Dataset {self.config.dataset.name}: {len(train)} train / {len(test)} test, "
                 f"images {'×'.join(map(str, train.image_shape))}, {train.classes} classes")
        return self._datasets

    def _report(self, command: str, **fields) -> RunReport:
        self._started = time.perf_counter()
        return RunReport(run_id=make_run_id(command, self.seed, self.loaded.raw_text), command=command,
                         seed=self.seed, config_text=self.loaded.raw_text, **fields)

    def _finish(self, report: RunReport) -> RunReport:
        report.wall_clock_seconds = round(time.perf_counter() - self._started, 3)
        path = save_report(report, self.out_dir)
        success(f"Report saved to {path}")
        return report

    def _print(self, renderable):
        if not is_quiet():
            console.print(renderable)

    def _print_results(self, title: str, rows: List[dict], label: str = "split"):
        table = Table(title=title)
        table.add_column(label.capitalize(), style="cyan")
        table.add_column("Accuracy", justify="right")
        table.add_column("SEM", justify="right")
        table.add_column("MACs", justify="right")
        table.add_column("ACs", justify="right")
        for row in rows:
            table.add_row(str(row[label]), f"{row['accuracy']:.4f}", f"{row['sem']:.4f}",
                          f"{int(row['mac_ops']):,}", f"{int(row['ac_ops']):,}")
        self._print(table)

    def _run_cells(self, cells: List[Cell], label: str) -> List[Tuple[tuple, EvalResult]]:
        """Evaluate sweep cells on a thread pool; results come back sorted by cell key."""
        results = {}
        with ThreadPoolExecutor(max_workers=self.config.eval.workers) as executor:
            with Progress(disable=is_quiet(), transient=True) as progress:
                task = progress.add_task(f"{label}...", total=len(cells))
                futures = {executor.submit(fn): key for key, fn in cells}
                for future in as_completed(futures):
                    results[futures[future]] = future.result()
                    progress.update(task, advance=1)
        return sorted(results.items(), key=lambda item: item[0])

    def train_teacher(self) -> RunReport:
        section("TEACHER TRAINING")
        cfg = self.config.teacher
        train, test = self.datasets
        spec = self.config.teacher_spec(train.classes, train.image_shape)
        teacher = build_model(spec, derive_seed(self.seed, INIT))
        params = count_parameters(teacher)
        info(f"{spec.name}: {params:,} parameters, {spec.feature_dim} features")

        report = self._report("train-teacher", arch=spec.name, partition_scheme="none", param_count=params)
        history = train_teacher(teacher, train, cfg.epochs, cfg.batch_size, cfg.optimizer, self.seed,
                                self.config.dataset.augment)
        batch = self.config.eval.batch_size
        test_result = evaluate(teacher, test, batch_size=batch, seed=self.seed)
        rows = [result_row("train", evaluate(teacher, train, batch_size=batch, seed=self.seed)),
                result_row("test", test_result)]
        ckpt = save_teacher(teacher, self.out_dir / TEACHER_CKPT,
                            {"finetuned": False, "dataset": self.config.dataset.name, "classes": train.classes})

        self._print_results("Teacher accuracy", rows)
        report.epochs = [m.to_dict() for m in history]
        report.results = rows
        report.ledger_rows = test_result.ledger.to_rows()
        report.artifacts = {"checkpoint": str(ckpt)}
        success(f"Teacher checkpoint saved to {ckpt}")
        return self._finish(report)

    def finetune_teacher(self, teacher_ckpt: Path) -> RunReport:
        section("TEACHER DISENTANGLEMENT")
        dis = self.config.disentangle
        n = self.config.ensemble.n_students
        teacher, meta = load_teacher(teacher_ckpt)
        train, test = self.datasets
        batch = self.config.eval.batch_size
        if dis.mode != "finetune":
            warning(f"disentangle.mode is '{dis.mode}'; fine-tuning anyway as requested")
        optimum = simplex_separation(n)
        info(f"{teacher.spec.name}: {teacher.feature_dim} features into {n} clusters, lambda={dis.lambda_}, "
             f"separation optimum {optimum:.4f}")

        report = self._report("finetune-teacher", arch=teacher.spec.name, n_students=n, k_active=n,
                              partition_scheme=PartitionScheme.CONTIGUOUS.value, lambda_=dis.lambda_,
                              param_count=count_parameters(teacher))
        baseline = evaluate(teacher, test, batch_size=batch, seed=self.seed)
        history = finetune_teacher(teacher, train, n, dis.lambda_, dis.epochs, self.config.teacher.batch_size,
                                   dis.optimizer, self.seed, eval_set=test, augment=self.config.dataset.augment)
        final = evaluate(teacher, test, batch_size=batch, seed=self.seed)
        finetuned = dis.lambda_ < 0
        ckpt = save_teacher(teacher, self.out_dir / FINETUNED_CKPT,
                            {"finetuned": finetuned, "n_clusters": n, "lambda": dis.lambda_,
                             "dataset": meta.get("dataset"), "classes": meta.get("classes")})

        last = _last_losses(history)
        rows = [result_row("test_baseline", baseline), result_row("test", final, **last)]
        self._print_results("Teacher accuracy before and after fine-tuning", rows)
        metric("separation", history[-1].separation if history else 0.0)
        metric("optimum", optimum)
        report.epochs = [m.to_dict() for m in history]
        report.results = rows
        report.ledger_rows = final.ledger.to_rows()
        report.artifacts = {"checkpoint": str(ckpt), "source": str(teacher_ckpt)}
        success(f"Disentangled teacher saved to {ckpt}")
        return self._finish(report)

    def _resolve_scheme(self, finetuned: bool) -> PartitionScheme:
        dis = self.config.disentangle
        scheme = PartitionScheme(dis.scheme)
        if finetuned:
            if scheme != PartitionScheme.CONTIGUOUS:
                warning(f"Teacher was fine-tuned into contiguous clusters; overriding scheme "
                        f"'{scheme.value}' with 'contiguous'")
            return PartitionScheme.CONTIGUOUS
        if dis.mode == "none" and scheme not in (PartitionScheme.FIXED, PartitionScheme.CONTIGUOUS):
            warning(f"disentangle.mode is 'none'; using the fixed scheme instead of '{scheme.value}'")
            return PartitionScheme.FIXED
        if dis.mode == "finetune":
            warning("disentangle.mode is 'finetune' but the teacher checkpoint was not fine-tuned")
        return scheme

    def partition(self, teacher_ckpt: Path, plan_out: Optional[Path] = None) -> RunReport:
        section("FEATURE PARTITIONING")
        dis = self.config.disentangle
        n = self.config.ensemble.n_students
        teacher, meta = load_teacher(teacher_ckpt)
        dim = teacher.feature_dim
        report = self._report("partition", arch=teacher.spec.name, n_students=n, k_active=n,
                              param_count=count_parameters(teacher))

        scheme = self._resolve_scheme(bool(meta.get("finetuned")))
        cluster_seed = derive_seed(self.seed, CLUSTER)
        if meta.get("finetuned"):
            plan = contiguous_partition(dim, n)
        elif scheme in (PartitionScheme.FIXED, PartitionScheme.CONTIGUOUS):
            plan = build_partition(scheme, n, dim, seed=cluster_seed)
        else:
            train, _ = self.datasets
            matrix = extract_feature_matrix(teacher, train, self.config.eval.batch_size,
                                            row_cap=dis.feature_row_cap, seed=cluster_seed)
            info(f"Clustering {matrix.shape[1]} columns over {matrix.shape[0]} samples with {scheme.value}")
            plan = build_partition(scheme, n, dim, matrix, seed=cluster_seed)

        check = validate_partition(plan, dim)
        path = write_plan(plan, plan_out or self.out_dir / PLAN_FILE)
        table = Table(title=f"{plan.scheme.value} plan over {dim} features")
        table.add_column("Student", style="cyan")
        table.add_column("Size", justify="right")
        table.add_column("Columns")
        for i, subset in enumerate(plan.subsets):
            preview = ", ".join(map(str, subset[:8])) + (" ..." if len(subset) > 8 else "")
            table.add_row(str(i), str(len(subset)), preview)
        self._print(table)
        neutral(f"Validation: {check.describe()}")

        report.partition_scheme = plan.scheme.value
        report.plan = plan.to_dict()
        report.artifacts = {"plan": str(path), "teacher": str(teacher_ckpt)}
        success(f"Plan saved to {path}")
        return self._finish(report)

    def train_ensemble(self, teacher_ckpt: Path, plan_path: Path) -> RunReport:
        section("ENSEMBLE DISTILLATION")
        ens = self.config.ensemble
        teacher, meta = load_teacher(teacher_ckpt)
        plan = read_plan(plan_path)
        if plan.feature_dim != teacher.feature_dim:
            raise ShapeError(f"plan covers {plan.feature_dim} features, teacher produces {teacher.feature_dim}")
        if plan.n_students != ens.n_students:
            warning(f"Plan has {plan.n_students} subsets, config asks for {ens.n_students} students; "
                    f"following the plan")
        train, test = self.datasets
        if train.classes != teacher.spec.classes:
            raise ShapeError(f"teacher predicts {teacher.spec.classes} classes, dataset has {train.classes}")

        specs = student_specs(self.config, plan, train.image_shape)
        lambda_ = float(meta.get("lambda") or 0.0)
        distill = DistillConfig(alpha=ens.alpha, lambda_=lambda_, n_students=plan.n_students,
                                feature_dim=plan.feature_dim, batch_size=ens.batch_size)
        policy = ens.activation_policy()
        model = build_ensemble(specs, plan, train.classes, self.seed, distill, policy, ens.lif, ens.timesteps)
        params = sum(p.size for p in model.parameters())
        k = policy.active_count(plan.n_students)
        arch = f"{plan.n_students}x{specs[0].name}"
        info(f"{arch}: {params:,} parameters, T={ens.timesteps}, alpha={ens.alpha}, policy {policy.label(plan.n_students)}")

        report = self._report("train-ensemble", arch=arch, n_students=plan.n_students, k_active=k,
                              partition_scheme=plan.scheme.value, alpha=ens.alpha, lambda_=lambda_,
                              timesteps=ens.timesteps, param_count=params, plan=plan.to_dict())
        history = train_ensemble(model, teacher, train, ens.epochs, ens.batch_size, ens.optimizer, self.seed,
                                 policy, self.config.dataset.augment, ens.log_grad_norms)

        eval_policy = policy if policy.variant == PolicyVariant.STOCHASTIC_EVAL else ActivationPolicy()
        repeats = self.config.eval.repeats if eval_policy.variant != PolicyVariant.ALL else 1
        batch = self.config.eval.batch_size
        last = _last_losses(history)
        train_result = evaluate(model, train, eval_policy, repeats, batch, self.seed)
        test_result = evaluate(model, test, eval_policy, repeats, batch, self.seed)
        rows = [result_row("train", train_result, **last), result_row("test", test_result, **last)]
        ckpt = save_ensemble(model, self.out_dir / ENSEMBLE_CKPT,
                             {"dataset": self.config.dataset.name, "teacher": str(teacher_ckpt)})

        self._print_results("Ensemble accuracy", rows)
        if not is_quiet():
            render_ledger(test_result.ledger, console=console)
        report.epochs = [m.to_dict() for m in history]
        report.results = rows
        report.ledger_rows = test_result.ledger.to_rows()
        report.artifacts = {"checkpoint": str(ckpt), "teacher": str(teacher_ckpt), "plan": str(plan_path)}
        success(f"Ensemble checkpoint saved to {ckpt}")
        return self._finish(report)

    def sweep_dropout(self, ensemble_ckpt: Path) -> RunReport:
        section("DROPOUT SWEEP")
        model, _ = load_ensemble(ensemble_ckpt)
        _, test = self.datasets
        n = model.n_students
        ev = self.config.eval
        arch = f"{n}x{model.students[0].spec.name}"
        report = self._report("sweep-dropout", arch=arch, n_students=n, k_active=n,
                              partition_scheme=model.plan.scheme.value, alpha=model.distill.alpha,
                              lambda_=model.distill.lambda_, timesteps=model.timesteps,
                              param_count=sum(p.size for p in model.parameters()), plan=model.plan.to_dict())

        def cell(k: int) -> Callable[[], EvalResult]:
            policy = ActivationPolicy(variant=PolicyVariant.STOCHASTIC_EVAL, k=k)
            return lambda: evaluate(copy.deepcopy(model), test, policy, ev.repeats, ev.batch_size,
                                    derive_seed(self.seed, DROPOUT, k))

        results = self._run_cells([((n - k,), cell(k)) for k in range(n, 0, -1)], "Sweeping active students")
        rows = [result_row(f"test_k{r.k_active}", r) for _, r in results]
        self._print_results(f"Stochastic evaluation, {ev.repeats} repeats per K", rows, "k_active")
        report.results = rows
        report.ledger_rows = results[0][1].ledger.to_rows()
        report.artifacts = {"checkpoint": str(ensemble_ckpt)}
        return self._finish(report)

    def sweep_noise(self, checkpoints: Sequence[Path]) -> RunReport:
        section("NOISE SWEEP")
        _, test = self.datasets
        ev = self.config.eval
        models = []
        for path in checkpoints:
            model, _ = load_checkpoint(path)
            models.append((Path(path), model))
        report = self._report("sweep-noise", arch="+".join(_model_name(m) for _, m in models),
                              partition_scheme="none")

        def cell(model, sigma: float, seed: int) -> Callable[[], EvalResult]:
            policy = ActivationPolicy() if isinstance(model, EnsembleModel) else None
            return lambda: evaluate(copy.deepcopy(model), test, policy, ev.repeats, ev.batch_size, seed,
                                    NoiseSpec(sigma, seed), ev.clamp_noise)

        cells = [((m, s), cell(model, sigma, derive_seed(self.seed, NOISE, m, s)))
                 for m, (_, model) in enumerate(models) for s, sigma in enumerate(ev.noise_sigmas)]
        rows = []
        for (m, _), result in self._run_cells(cells, "Sweeping noise levels"):
            rows.append(result_row(f"test_sigma{result.sigma:g}", result, **_model_fields(models[m][1])))
        self._print_results(f"Gaussian noise, {ev.repeats} repeats per cell", rows, "split")
        report.results = rows
        report.artifacts = {f"model{m}": str(path) for m, (path, _) in enumerate(models)}
        return self._finish(report)


def _model_name(model) -> str:
    if isinstance(model, EnsembleModel):
        return f"{model.n_students}x{model.students[0].spec.name}"
    return model.spec.name


def _model_fields(model) -> dict:
    fields = {"arch": _model_name(model), "param_count": sum(p.size for p in model.parameters())}
    if isinstance(model, EnsembleModel):
        fields.update(n_students=model.n_students, k_active=model.n_students, T=model.timesteps,
                      alpha=model.distill.alpha, partition_scheme=model.plan.scheme.value,
                      **{"lambda": model.distill.lambda_})
    else:
        fields.update(n_students=1, k_active=1, T=model.timesteps if model.spiking else 1)
    return fields
