"""Turn an abstract injection request into one concrete flipped element.

One injection flips exactly one bit of one stored weight and returns an
audit record sufficient to reproduce or reverse it.  Element choice is
either explicit or a uniform draw from a PRNG seeded by the trial seed,
so campaigns replay identically under any execution schedule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import CheckpointStore, NamingScheme, TensorSelector, resolve_selector
from .half16 import EXPONENT_MSB, flip_bit
from .model import seeded_rng


class RecordMismatchError(Exception):
    """The store does not hold the pattern the record says it should."""


@dataclass(frozen=True)
class ElementPolicy:
    """How the flat element index is chosen within the target tensor.

    ``kind`` is "uniform" (seeded uniform draw over the flat range,
    mixed with the per-trial seed via ``salt``) or "explicit" with a
    fixed ``index``.
    """

    kind: str = "uniform"
    index: int | None = None
    salt: int = 0

    def __post_init__(self):
        if self.kind not in ("uniform", "explicit"):
            raise ValueError(f"unknown element policy {self.kind!r}")
        if self.kind == "explicit" and (self.index is None or self.index < 0):
            raise ValueError("explicit policy needs a flat index >= 0")

    @classmethod
    def uniform(cls, salt: int = 0) -> "ElementPolicy":
        return cls("uniform", None, salt)

    @classmethod
    def explicit(cls, index: int) -> "ElementPolicy":
        return cls("explicit", index)


@dataclass(frozen=True)
class InjectionSpec:
    """What to flip: a structural target, a bit position, an element policy."""

    target: TensorSelector
    bit: int = EXPONENT_MSB
    element_policy: ElementPolicy = ElementPolicy.uniform()

    def __post_init__(self):
        if not 0 <= self.bit <= 15:
            raise ValueError(f"bit position out of range: {self.bit}")


@dataclass(frozen=True)
class InjectionRecord:
    """Complete audit trail of one applied injection."""

    tensor: str
    flat_index: int
    bit: int
    original: int
    flipped: int

    def __post_init__(self):
        if self.flipped != flip_bit(self.original, self.bit):
            raise ValueError("record is inconsistent: flipped != flip_bit(original, bit)")

    def to_dict(self) -> dict:
        return {
            "tensor": self.tensor,
            "flat_index": self.flat_index,
            "bit": self.bit,
            "original": f"0x{self.original:04X}",
            "flipped": f"0x{self.flipped:04X}",
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InjectionRecord":
        return cls(
            tensor=d["tensor"],
            flat_index=int(d["flat_index"]),
            bit=int(d["bit"]),
            original=int(str(d["original"]), 16),
            flipped=int(str(d["flipped"]), 16),
        )


def choose_element(
    store: CheckpointStore, tensor: str, policy: ElementPolicy, trial_seed: int
) -> int:
    count = store.element_count(tensor)
    if policy.kind == "explicit":
        if policy.index >= count:
            raise IndexError(
                f"explicit index {policy.index} out of range for {tensor!r} "
                f"with {count} elements"
            )
        return policy.index
    rng = seeded_rng(trial_seed, "element-draw", policy.salt, tensor)
    return int(rng.integers(0, count))


def inject(
    store: CheckpointStore,
    spec: InjectionSpec,
    trial_seed: int,
    scheme: NamingScheme,
) -> tuple[CheckpointStore, InjectionRecord]:
    """Apply one single-bit upset; returns the corrupted view and its record.

    The base store is unchanged.  The same (spec, trial_seed) always
    selects the same element.
    """
    tensor = resolve_selector(spec.target, scheme)
    flat_index = choose_element(store, tensor, spec.element_policy, trial_seed)
    original = store.read_element(tensor, flat_index)
    view = store.flip(tensor, flat_index, spec.bit)
    record = InjectionRecord(
        tensor=tensor,
        flat_index=flat_index,
        bit=spec.bit,
        original=original,
        flipped=view.read_element(tensor, flat_index),
    )
    return view, record


def revert(view: CheckpointStore, record: InjectionRecord) -> CheckpointStore:
    """Undo a recorded injection; the result reads bit-identical to the base.

    Raises RecordMismatchError when the view does not hold the record's
    flipped pattern at the recorded location (tampered record, already
    reverted, or wrong lineage).
    """
    current = view.read_element(record.tensor, record.flat_index)
    if current != record.flipped:
        raise RecordMismatchError(
            f"{record.tensor}[{record.flat_index}] holds 0x{current:04X}, "
            f"expected flipped pattern 0x{record.flipped:04X}"
        )
    return view.flip(record.tensor, record.flat_index, record.bit)


def diff_elements(
    base: CheckpointStore, view: CheckpointStore
) -> list[tuple[str, int, int, int]]:
    """All (tensor, flat_index, base_pattern, view_pattern) differences.

    Exhaustive scan over every element of every binary16 tensor; intended
    for verifying the single-fault guarantee at desk scale.
    """
    out = []
    for name in base.names():
        if base.entry(name).dtype != "F16":
            continue
        a = base.uint16(name)
        b = view.uint16(name)
        for idx in np.nonzero(a != b)[0]:
            out.append((name, int(idx), int(a[idx]), int(b[idx])))
    return out
