"""Fault-injection campaigns: sweep targets, repeat trials, aggregate scores.

A campaign measures each target by repeating single-upset trials: derive
the trial seed, flip one element, generate an image per prompt, score
every configured metric, then aggregate as the arithmetic mean over all
trials x prompts (standard deviation is recorded alongside since single
numbers hide dispersion).

Trials are embarrassingly parallel over (target, trial): every trial
works on its own copy-on-write view of the shared base weights and all
seeds are derived from (master seed, target index, trial index), so the
result is byte-identical for any thread count or execution order.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import Block, CheckpointStore, Layer, Matrix, TensorSelector
from .injector import ElementPolicy, InjectionRecord, InjectionSpec, inject
from .metrics import clip_like_score, corruption_stats, pool_text_embedding, toy_image_embed
from .model import DiffuserConfig, ToyDiffuser, build_weights, seeded_rng

METRIC_NAMES = (
    "clip_like",
    "rel_deviation",
    "corrupted_fraction",
    "component_count",
    "mean_component_area",
)

DEFAULT_TRIALS = 50


@dataclass(frozen=True)
class CampaignTarget:
    """One weight matrix to bombard, with the bit position to flip."""

    selector: TensorSelector
    bit: int = 14

    def __post_init__(self):
        if not 0 <= self.bit <= 15:
            raise ValueError(f"bit position out of range: {self.bit}")

    def identifier(self, tensor_name: str) -> str:
        return f"{tensor_name}.b{self.bit}"


@dataclass(frozen=True)
class CampaignConfig:
    """Everything a campaign needs; identical configs replay identically."""

    model: DiffuserConfig
    targets: tuple[CampaignTarget, ...]
    prompts: tuple[str, ...]
    trials: int = DEFAULT_TRIALS
    seed: int = 0
    metrics: tuple[str, ...] = METRIC_NAMES

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.prompts:
            raise ValueError("prompts must be non-empty")
        if not self.targets:
            raise ValueError("targets must be non-empty")
        unknown = set(self.metrics) - set(METRIC_NAMES)
        if unknown:
            raise ValueError(f"unknown metrics: {sorted(unknown)}")


@dataclass
class TrialOutcome:
    """Scores of one injected trial across all prompts."""

    target_id: str
    trial: int
    injection: InjectionRecord
    per_prompt: list[dict[str, float]]
    non_finite: bool

    def to_dict(self) -> dict:
        return {
            "target_id": self.target_id,
            "trial": self.trial,
            "injection": self.injection.to_dict(),
            "per_prompt": self.per_prompt,
            "non_finite": self.non_finite,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrialOutcome":
        return cls(
            target_id=d["target_id"],
            trial=int(d["trial"]),
            injection=InjectionRecord.from_dict(d["injection"]),
            per_prompt=[{k: float(v) for k, v in p.items()} for p in d["per_prompt"]],
            non_finite=bool(d["non_finite"]),
        )


@dataclass
class BaselineResult:
    """Error-free per-prompt scores plus the cached images they came from."""

    per_prompt: list[dict[str, float]]
    images: list[np.ndarray] = field(default_factory=list, repr=False)


@dataclass
class CampaignResult:
    """Everything a campaign produced; aggregates are re-derivable from outcomes."""

    config: dict
    target_ids: list[str]
    target_info: list[dict]
    baseline: list[dict[str, float]]
    outcomes: list[TrialOutcome]
    aggregates: dict[str, dict[str, dict[str, float]]]
    baseline_images: list[np.ndarray] = field(default_factory=list, repr=False)
    exemplar_images: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def has_images(self) -> bool:
        return bool(self.baseline_images)

    def to_dict(self) -> dict:
        return {
            "kind": "campaign",
            "schema_version": 1,
            "config": self.config,
            "target_ids": self.target_ids,
            "targets": self.target_info,
            "baseline": self.baseline,
            "aggregates": self.aggregates,
            "outcomes": [o.to_dict() for o in self.outcomes],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignResult":
        if d.get("kind") != "campaign":
            raise ValueError(f"not a campaign result: kind={d.get('kind')!r}")
        return cls(
            config=d["config"],
            target_ids=list(d["target_ids"]),
            target_info=list(d["targets"]),
            baseline=list(d["baseline"]),
            outcomes=[TrialOutcome.from_dict(o) for o in d["outcomes"]],
            aggregates=d["aggregates"],
        )


def aggregate_values(values: Sequence[float]) -> dict[str, float]:
    """Mean / population std / count of a value sequence, order-sensitive."""
    arr = np.asarray(values, dtype=np.float64)
    return {
        "mean": float(arr.mean()),
        "std": float(arr.std()),
        "count": int(arr.size),
    }


def derive_aggregates(
    target_ids: Sequence[str],
    outcomes: Sequence[TrialOutcome],
    metrics: Sequence[str],
) -> dict[str, dict[str, dict[str, float]]]:
    """Recompute per-target aggregates from outcomes in (trial, prompt) order."""
    by_target: dict[str, list[TrialOutcome]] = {tid: [] for tid in target_ids}
    for outcome in outcomes:
        by_target[outcome.target_id].append(outcome)
    result = {}
    for tid in target_ids:
        rows = sorted(by_target[tid], key=lambda o: o.trial)
        result[tid] = {
            metric: aggregate_values(
                [p[metric] for outcome in rows for p in outcome.per_prompt]
            )
            for metric in metrics
        }
    return result


def config_to_dict(cfg: CampaignConfig) -> dict:
    # Targets are emitted in a canonical order so that permuting the
    # config's target list cannot change the serialized result.
    targets = sorted(
        (
            {
                "block": t.selector.block.value,
                "level": t.selector.level,
                "transformer": t.selector.transformer_index,
                "layer": t.selector.layer.value,
                "matrix": t.selector.matrix.value,
                "bit": t.bit,
            }
            for t in cfg.targets
        ),
        key=lambda d: (d["block"], d["level"], d["transformer"],
                       d["layer"], d["matrix"], d["bit"]),
    )
    return {
        "model": asdict(cfg.model) | {"channels": list(cfg.model.channels)},
        "targets": targets,
        "prompts": list(cfg.prompts),
        "trials": cfg.trials,
        "seed": cfg.seed,
        "metrics": list(cfg.metrics),
    }


def config_from_dict(d: Mapping) -> CampaignConfig:
    model_part = dict(d.get("model", {}))
    if "channels" in model_part:
        model_part["channels"] = tuple(model_part["channels"])
    model = DiffuserConfig(**model_part)
    targets = tuple(
        CampaignTarget(
            selector=TensorSelector(
                block=Block(t["block"]),
                level=int(t.get("level", 0)),
                transformer_index=int(t.get("transformer", 0)),
                layer=Layer(t["layer"]),
                matrix=Matrix(t["matrix"]),
            ),
            bit=int(t.get("bit", 14)),
        )
        for t in d["targets"]
    )
    return CampaignConfig(
        model=model,
        targets=targets,
        prompts=tuple(d["prompts"]),
        trials=int(d.get("trials", DEFAULT_TRIALS)),
        seed=int(d.get("seed", 0)),
        metrics=tuple(d.get("metrics", METRIC_NAMES)),
    )


class CampaignRunner:
    """Binds a model, base weights and naming scheme for repeated runs."""

    def __init__(self, cfg: CampaignConfig, store: CheckpointStore | None = None):
        self.cfg = cfg
        self.model = ToyDiffuser(cfg.model)
        self.store = store if store is not None else build_weights(cfg.model)
        self.scheme = cfg.model.naming_scheme()

    # -- scoring --------------------------------------------------------

    def _pooled_text(self, prompt: str) -> np.ndarray:
        return pool_text_embedding(self.model.embed_prompt(prompt))

    def _score(
        self, image: np.ndarray, pooled_text: np.ndarray, baseline_image: np.ndarray
    ) -> dict[str, float]:
        stats = corruption_stats(image, baseline_image)
        all_values = {
            "clip_like": clip_like_score(
                toy_image_embed(image, self.cfg.model.embed_width), pooled_text
            ),
            "rel_deviation": stats.rel_deviation,
            "corrupted_fraction": stats.corrupted_fraction,
            "component_count": float(stats.component_count),
            "mean_component_area": stats.mean_component_area,
        }
        return {m: all_values[m] for m in self.cfg.metrics}

    def run_baseline(self) -> BaselineResult:
        """Error-free per-prompt metrics and cached images for deviation scoring."""
        images = [self.model.generate(p, self.store) for p in self.cfg.prompts]
        per_prompt = [
            self._score(img, self._pooled_text(p), img)
            for p, img in zip(self.cfg.prompts, images)
        ]
        return BaselineResult(per_prompt=per_prompt, images=images)

    # -- campaign -------------------------------------------------------

    def _trial_seed(self, tensor: str, bit: int, trial: int) -> int:
        # Keyed on the target's identity, not its position in the config,
        # so permuting the target list cannot change any trial.
        rng = seeded_rng(self.cfg.seed, "trial", tensor, bit, trial)
        return int(rng.integers(0, 2**63))

    def _run_trial(
        self,
        target: CampaignTarget,
        trial: int,
        baseline: BaselineResult,
        pooled: list[np.ndarray],
        bit: int | None = None,
    ) -> tuple[TrialOutcome, np.ndarray]:
        use_bit = target.bit if bit is None else bit
        spec = InjectionSpec(target.selector, bit=use_bit, element_policy=ElementPolicy.uniform())
        tensor = self.scheme.resolve(target.selector)
        trial_seed = self._trial_seed(tensor, use_bit, trial)
        view, record = inject(self.store, spec, trial_seed, self.scheme)
        per_prompt = []
        non_finite = False
        first_image = None
        for i, prompt in enumerate(self.cfg.prompts):
            result = self.model.run(prompt, view)
            non_finite = non_finite or result.non_finite
            per_prompt.append(self._score(result.image, pooled[i], baseline.images[i]))
            if first_image is None:
                first_image = result.image
        outcome = TrialOutcome(
            target_id=f"{tensor}.b{use_bit}",
            trial=trial,
            injection=record,
            per_prompt=per_prompt,
            non_finite=non_finite,
        )
        return outcome, first_image

    def run_campaign(self, threads: int = 1) -> CampaignResult:
        """Full target x trial sweep.

        Deterministic for any thread count, and independent of the order
        targets appear in the config: trial seeds key on target identity
        and the result lists targets in sorted-id order.
        """
        cfg = self.cfg
        digest_before = self.store.digest()
        baseline = self.run_baseline()
        pooled = [self._pooled_text(p) for p in cfg.prompts]

        by_id: dict[str, CampaignTarget] = {}
        info_by_id: dict[str, dict] = {}
        for target in cfg.targets:
            tensor = self.scheme.resolve(target.selector)
            tid = target.identifier(tensor)
            if tid in by_id:
                raise ValueError(f"duplicate campaign target {tid}")
            by_id[tid] = target
            info_by_id[tid] = {
                "id": tid,
                "tensor": tensor,
                "block": target.selector.block.value,
                "level": target.selector.level,
                "transformer": target.selector.transformer_index,
                "layer": target.selector.layer.value,
                "matrix": target.selector.matrix.value,
                "bit": target.bit,
                "block_label": target.selector.block_label(),
                "layer_label": target.selector.layer_label(),
            }
        target_ids = sorted(by_id)
        target_info = [info_by_id[tid] for tid in target_ids]

        jobs = [(tid, trial) for tid in target_ids for trial in range(cfg.trials)]

        def run_job(job: tuple[str, int]) -> tuple[tuple[str, int], TrialOutcome, np.ndarray]:
            tid, trial = job
            outcome, image = self._run_trial(by_id[tid], trial, baseline, pooled)
            return job, outcome, image

        results: dict[tuple[str, int], tuple[TrialOutcome, np.ndarray]] = {}
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                for job, outcome, image in pool.map(run_job, jobs):
                    results[job] = (outcome, image)
        else:
            for job in jobs:
                _, outcome, image = run_job(job)
                results[job] = (outcome, image)

        outcomes = [results[job][0] for job in jobs]
        exemplars = {tid: results[(tid, 0)][1] for tid in target_ids}
        aggregates = derive_aggregates(target_ids, outcomes, cfg.metrics)

        if self.store.digest() != digest_before:
            raise RuntimeError("base checkpoint mutated during campaign")

        return CampaignResult(
            config=config_to_dict(cfg),
            target_ids=target_ids,
            target_info=target_info,
            baseline=baseline.per_prompt,
            outcomes=outcomes,
            aggregates=aggregates,
            baseline_images=baseline.images,
            exemplar_images=exemplars,
        )

    # -- bit sweep --------------------------------------------------------

    def bit_sweep(
        self,
        target: CampaignTarget | None = None,
        prompt: str | None = None,
        trials: int | None = None,
        threads: int = 1,
    ) -> "BitSweepResult":
        """Same trial protocol repeated for every one of the 16 bit positions.

        Defaults to the campaign's first target and first prompt.
        """
        cfg = self.cfg
        target = target if target is not None else cfg.targets[0]
        prompt = prompt if prompt is not None else cfg.prompts[0]
        trials = trials if trials is not None else cfg.trials
        digest_before = self.store.digest()

        baseline_image = self.model.generate(prompt, self.store)
        pooled = self._pooled_text(prompt)
        tensor = self.scheme.resolve(target.selector)
        sub = BaselineResult(
            per_prompt=[self._score(baseline_image, pooled, baseline_image)],
            images=[baseline_image],
        )

        one_prompt = CampaignConfig(
            model=cfg.model,
            targets=(target,),
            prompts=(prompt,),
            trials=trials,
            seed=cfg.seed,
            metrics=cfg.metrics,
        )
        runner = CampaignRunner(one_prompt, store=self.store)

        jobs = [(bit, trial) for bit in range(16) for trial in range(trials)]

        def run_job(job: tuple[int, int]) -> tuple[tuple[int, int], TrialOutcome]:
            bit, trial = job
            outcome, _ = runner._run_trial(target, trial, sub, [pooled], bit=bit)
            return job, outcome

        results: dict[tuple[int, int], TrialOutcome] = {}
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                for job, outcome in pool.map(run_job, jobs):
                    results[job] = outcome
        else:
            for job in jobs:
                _, outcome = run_job(job)
                results[job] = outcome

        per_bit = {}
        outcomes = []
        for bit in range(16):
            bit_outcomes = [results[(bit, trial)] for trial in range(trials)]
            outcomes.extend(bit_outcomes)
            per_bit[str(bit)] = {
                metric: aggregate_values(
                    [p[metric] for o in bit_outcomes for p in o.per_prompt]
                )
                for metric in cfg.metrics
            }

        if self.store.digest() != digest_before:
            raise RuntimeError("base checkpoint mutated during bit sweep")

        return BitSweepResult(
            config=config_to_dict(one_prompt),
            tensor=tensor,
            prompt=prompt,
            trials=trials,
            baseline=sub.per_prompt[0],
            per_bit=per_bit,
            outcomes=outcomes,
        )


@dataclass
class BitSweepResult:
    """Aggregates per bit position for one target and one prompt."""

    config: dict
    tensor: str
    prompt: str
    trials: int
    baseline: dict[str, float]
    per_bit: dict[str, dict[str, dict[str, float]]]
    outcomes: list[TrialOutcome]

    def metric_by_bit(self, metric: str) -> list[float]:
        return [self.per_bit[str(bit)][metric]["mean"] for bit in range(16)]

    def to_dict(self) -> dict:
        return {
            "kind": "bit_sweep",
            "schema_version": 1,
            "config": self.config,
            "tensor": self.tensor,
            "prompt": self.prompt,
            "trials": self.trials,
            "baseline": self.baseline,
            "per_bit": self.per_bit,
            "outcomes": [o.to_dict() for o in self.outcomes],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "BitSweepResult":
        if d.get("kind") != "bit_sweep":
            raise ValueError(f"not a bit sweep result: kind={d.get('kind')!r}")
        return cls(
            config=d["config"],
            tensor=d["tensor"],
            prompt=d["prompt"],
            trials=int(d["trials"]),
            baseline=d["baseline"],
            per_bit=d["per_bit"],
            outcomes=[TrialOutcome.from_dict(o) for o in d["outcomes"]],
        )
