"""Benchmarks, metrics, and ablation harnesses.

Benchmark specs are templated and seeded, so every table regenerates
identically. Baseline and corrected runs of one prompt always share a
seed (paired design); accuracy is the all-classes-exact rule and MAE is
the per-image sum of absolute per-class count errors, averaged over
images.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .counting import CountReport, count_objects
from .encoder import encode_prompt
from .latents import decode_latent
from .pipeline import RunConfig, generate, load_model
from .sampler import initial_noise, predict_noise
from .schedule import ddim_step, make_schedule, predict_x0
from .scenes import ClassVocabulary, PromptSpec
from .util import derive_seed, to_uint8_image

__all__ = [
    "BenchmarkSpec",
    "BenchResult",
    "BenchComparison",
    "build_single_benchmark",
    "build_multi_benchmark",
    "accuracy",
    "mae",
    "run_benchmark",
    "ablate_loss_strategy",
    "ablate_guidance_window",
    "probe_tmid_sufficiency",
]


@dataclass
class BenchmarkSpec:
    kind: str  # "single-class" | "multi-class"
    prompts: list[PromptSpec]
    seeds: list[int]  # one per prompt, shared by paired runs
    provenance: dict

    def __post_init__(self):
        if len(self.prompts) != len(self.seeds):
            raise ValueError("prompts and seeds must align")
        for p in self.prompts:
            if self.kind == "single-class" and len(p.targets) != 1:
                raise ValueError("single-class spec contains a multi-class prompt")
            if self.kind == "multi-class" and not 2 <= len(p.targets) <= 3:
                raise ValueError("multi-class prompts must have 2-3 classes")

    def subset(self, n: int) -> "BenchmarkSpec":
        return BenchmarkSpec(
            kind=self.kind,
            prompts=self.prompts[:n],
            seeds=self.seeds[:n],
            provenance={**self.provenance, "subset": n},
        )

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "prompts": [p.to_dict() for p in self.prompts],
            "seeds": self.seeds,
            "provenance": self.provenance,
        }


def build_single_benchmark(
    vocab: ClassVocabulary,
    counts: list[int] = (2, 3, 5, 7),
    per_count: int = 50,
    seed: int = 0,
) -> BenchmarkSpec:
    """Balanced single-class prompts: ``per_count`` prompts per count,
    classes cycled uniformly (within +-1)."""
    rng = np.random.default_rng(seed)
    prompts: list[PromptSpec] = []
    class_ids = vocab.class_ids
    i = 0
    for count in counts:
        for _ in range(per_count):
            cls = class_ids[i % len(class_ids)]
            prompts.append(PromptSpec(targets={cls: int(count)}, background_id=int(rng.integers(0, 2))))
            i += 1
    seeds = [derive_seed(seed, "single", j) % (2**31) for j in range(len(prompts))]
    return BenchmarkSpec(
        kind="single-class",
        prompts=prompts,
        seeds=seeds,
        provenance={"builder": "single", "counts": list(counts), "per_count": per_count, "seed": seed},
    )


def build_multi_benchmark(vocab: ClassVocabulary, size: int = 100, seed: int = 0) -> BenchmarkSpec:
    """Multi-class prompts: 2-3 distinct classes, counts drawn from 1-3."""
    rng = np.random.default_rng(seed)
    prompts: list[PromptSpec] = []
    for _ in range(size):
        k = int(rng.integers(2, 4))
        classes = rng.choice(vocab.class_ids, size=k, replace=False)
        targets = {int(c): int(rng.integers(1, 4)) for c in classes}
        prompts.append(PromptSpec(targets=targets, background_id=int(rng.integers(0, 2))))
    seeds = [derive_seed(seed, "multi", j) % (2**31) for j in range(size)]
    return BenchmarkSpec(
        kind="multi-class",
        prompts=prompts,
        seeds=seeds,
        provenance={"builder": "multi", "size": size, "seed": seed},
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def accuracy(results: list[tuple[CountReport, dict[int, int]]]) -> float:
    """Percent of results where every class count matches exactly."""
    if not results:
        raise ValueError("accuracy of an empty result set is undefined")
    correct = sum(
        all(report.count(c) == n for c, n in targets.items()) for report, targets in results
    )
    return 100.0 * correct / len(results)


def mae(results: list[tuple[CountReport, dict[int, int]]]) -> float:
    """Mean over images of the summed absolute per-class count error."""
    if not results:
        raise ValueError("mae of an empty result set is undefined")
    total = sum(
        sum(abs(report.count(c) - n) for c, n in targets.items()) for report, targets in results
    )
    return total / len(results)


# ---------------------------------------------------------------------------
# Benchmark runner
# ---------------------------------------------------------------------------


@dataclass
class PromptOutcome:
    index: int
    seed: int
    targets: dict[int, int]
    counts: dict[int, int]
    verdict: bool
    route: str
    error: str | None = None

    @property
    def abs_err(self) -> int:
        return sum(abs(self.counts.get(c, 0) - n) for c, n in self.targets.items())


@dataclass
class BenchResult:
    label: str
    outcomes: list[PromptOutcome]

    @property
    def ok(self) -> list[PromptOutcome]:
        return [o for o in self.outcomes if o.error is None]

    @property
    def acc(self) -> float:
        ok = self.ok
        return 100.0 * sum(o.verdict for o in ok) / len(ok) if ok else float("nan")

    @property
    def mae(self) -> float:
        ok = self.ok
        return sum(o.abs_err for o in ok) / len(ok) if ok else float("nan")

    def bucket_acc(self) -> dict[int, float]:
        """Accuracy per total target count."""
        buckets: dict[int, list[bool]] = {}
        for o in self.ok:
            buckets.setdefault(sum(o.targets.values()), []).append(o.verdict)
        return {k: 100.0 * sum(v) / len(v) for k, v in sorted(buckets.items())}

    def route_fraction(self, route: str) -> float:
        ok = self.ok
        return sum(o.route == route for o in ok) / len(ok) if ok else 0.0


@dataclass
class BenchComparison:
    spec: BenchmarkSpec
    baseline: BenchResult
    corrected: BenchResult

    def table(self) -> str:
        rows = [("variant", "acc_percent", "mae", "n")]
        for res in (self.baseline, self.corrected):
            rows.append((res.label, f"{res.acc:.1f}", f"{res.mae:.3f}", str(len(res.ok))))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)) for row in rows]
        buckets = sorted(set(self.baseline.bucket_acc()) | set(self.corrected.bucket_acc()))
        if buckets:
            lines.append("")
            lines.append("per-total-count accuracy (baseline -> corrected):")
            base_b, corr_b = self.baseline.bucket_acc(), self.corrected.bucket_acc()
            for b in buckets:
                lines.append(
                    f"  total={b}: {base_b.get(b, float('nan')):.1f} -> {corr_b.get(b, float('nan')):.1f}"
                )
        lines.append("")
        lines.append("mae = mean over images of sum_c |generated_c - target_c|")
        return "\n".join(lines)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "comparison.txt", "w") as fh:
            fh.write(self.table() + "\n")
        with open(out / "results.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "index", "seed", "targets", "counts", "verdict", "abs_err", "route", "error"])
            for res in (self.baseline, self.corrected):
                for o in res.outcomes:
                    writer.writerow(
                        [res.label, o.index, o.seed, json.dumps(o.targets), json.dumps(o.counts),
                         int(o.verdict), o.abs_err, o.route, o.error or ""]
                    )
        with open(out / "spec.json", "w") as fh:
            json.dump(self.spec.to_dict(), fh)


def _run_prompt(args: tuple[dict, int, dict, int]) -> PromptOutcome:
    cfg_dict, index, prompt_dict, seed = args
    cfg = RunConfig.from_dict({**cfg_dict, "prompt": prompt_dict, "seed": seed})
    try:
        record = generate(cfg)
        return PromptOutcome(
            index=index,
            seed=seed,
            targets=dict(cfg.prompt.targets),
            counts={c: record.report_after.count(c) for c in cfg.prompt.targets},
            verdict=record.verdict,
            route=record.dispatch.route,
        )
    except Exception as exc:
        return PromptOutcome(
            index=index, seed=seed, targets=dict(PromptSpec.from_dict(prompt_dict).targets),
            counts={}, verdict=False, route="error", error=f"{type(exc).__name__}: {exc}",
        )


def _pool_init(threads: int) -> None:
    torch.set_num_threads(threads)


def _run_variant(spec: BenchmarkSpec, cfg: RunConfig, label: str, workers: int = 1) -> BenchResult:
    base = cfg.to_dict()
    base.pop("out_dir", None)
    jobs = [
        (base, i, prompt.to_dict(), seed)
        for i, (prompt, seed) in enumerate(zip(spec.prompts, spec.seeds))
    ]
    if workers <= 1:
        outcomes = [_run_prompt(job) for job in jobs]
    else:
        threads = max(1, torch.get_num_threads() // workers)
        with ProcessPoolExecutor(max_workers=workers, initializer=_pool_init, initargs=(threads,)) as pool:
            outcomes = list(pool.map(_run_prompt, jobs))
    return BenchResult(label=label, outcomes=outcomes)


def run_benchmark(
    spec: BenchmarkSpec,
    baseline_cfg: RunConfig,
    corrected_cfg: RunConfig,
    out_dir=None,
    workers: int = 1,
) -> BenchComparison:
    """Paired baseline/corrected sweep over a benchmark spec."""
    baseline = _run_variant(spec, replace(baseline_cfg, correction_enabled=False), "baseline", workers)
    corrected = _run_variant(spec, replace(corrected_cfg, correction_enabled=True), "corrected", workers)
    comparison = BenchComparison(spec=spec, baseline=baseline, corrected=corrected)
    if out_dir:
        comparison.write(out_dir)
    return comparison


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------


def ablate_loss_strategy(
    spec: BenchmarkSpec,
    strategies: list[str],
    cfg: RunConfig,
    out_dir=None,
    workers: int = 1,
) -> dict[str, BenchResult]:
    """One corrected sweep per loss-selection strategy, shared seeds."""
    results: dict[str, BenchResult] = {}
    for strategy in strategies:
        variant = replace(cfg, guidance=replace(cfg.guidance, strategy=strategy), correction_enabled=True)
        results[strategy] = _run_variant(spec, variant, strategy, workers)
    if out_dir:
        _write_rows(
            Path(out_dir), "loss_strategy",
            [("strategy", "acc_percent", "mae")]
            + [(s, f"{r.acc:.1f}", f"{r.mae:.3f}") for s, r in results.items()],
        )
    return results


def ablate_guidance_window(
    spec: BenchmarkSpec,
    pairs: list[tuple[int, int]],
    cfg: RunConfig,
    out_dir=None,
    workers: int = 1,
) -> dict[tuple[int, int], BenchResult]:
    """Vary (guidance_steps, total_steps); zero guidance steps = baseline."""
    results: dict[tuple[int, int], BenchResult] = {}
    for gsteps, total in pairs:
        if not 0 <= gsteps < total:
            raise ValueError(f"invalid pair ({gsteps}, {total})")
        if gsteps == 0:
            variant = replace(
                cfg, num_steps=total, correction_enabled=False,
                guidance=replace(cfg.guidance, t_mid=max(1, total - 1)),
            )
        else:
            variant = replace(
                cfg, num_steps=total, correction_enabled=True,
                guidance=replace(cfg.guidance, t_mid=total - gsteps),
            )
        results[(gsteps, total)] = _run_variant(spec, variant, f"g{gsteps}_T{total}", workers)
    if out_dir:
        _write_rows(
            Path(out_dir), "guidance_window",
            [("guidance_steps", "total_steps", "acc_percent", "mae")]
            + [(str(g), str(t), f"{r.acc:.1f}", f"{r.mae:.3f}") for (g, t), r in results.items()],
        )
    return results


def _write_rows(out_dir: Path, name: str, rows: list[tuple]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{name}.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    with open(out_dir / f"{name}.txt", "w") as fh:
        for row in rows:
            fh.write("  ".join(str(c).ljust(widths[i]) for i, c in enumerate(row)) + "\n")


# ---------------------------------------------------------------------------
# One-step-prediction sufficiency probe
# ---------------------------------------------------------------------------


def probe_tmid_sufficiency(
    spec: BenchmarkSpec,
    t_values: list[int],
    cfg: RunConfig,
    out_path=None,
) -> list[tuple[int, float]]:
    """Fraction of prompts whose one-step prediction at t already counts
    like the final image, for each probe step."""
    ckpt = load_model(cfg.checkpoint)
    model = ckpt.model
    schedule = (
        ckpt.schedule()
        if cfg.num_steps is None and cfg.profile is None
        else make_schedule(cfg.num_steps or ckpt.num_steps, cfg.profile or ckpt.profile)
    )
    T = schedule.num_steps
    if any(not 1 <= t <= T for t in t_values):
        raise ValueError(f"t_values must lie in [1, {T}]")
    wanted = sorted(set(t_values), reverse=True)
    agree = {t: 0 for t in wanted}
    shape = (model.config.in_channels, model.config.image_size, model.config.image_size)

    for prompt, seed in zip(spec.prompts, spec.seeds):
        tags = sorted(prompt.targets)
        cond = encode_prompt(prompt, model.prompt_encoder)
        z = initial_noise(seed, shape, step=T)
        snapshots: dict[int, np.ndarray] = {}
        for t in range(T, 0, -1):
            eps = predict_noise(z, cond, t, model)
            if t in agree:
                x0_hat = predict_x0(z, eps, t, schedule)
                snapshots[t] = to_uint8_image(decode_latent(x0_hat))
            z = ddim_step(z, eps, t, schedule)
        final = to_uint8_image(decode_latent(z))
        final_counts = count_objects(final, tags, cfg.counter, model.vocab).counts()
        for t, snap in snapshots.items():
            counts = count_objects(snap, tags, cfg.counter, model.vocab).counts()
            agree[t] += int(counts == final_counts)

    n = len(spec.prompts)
    curve = [(t, agree[t] / n) for t in sorted(agree)]
    if out_path:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "agreement"])
            writer.writerows(curve)
    return curve
