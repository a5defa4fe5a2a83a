import json

import numpy as np
import pytest

from seulab.campaign import (
    CampaignConfig,
    CampaignResult,
    CampaignRunner,
    CampaignTarget,
    aggregate_values,
    config_from_dict,
    config_to_dict,
    derive_aggregates,
)
from seulab.checkpoint import Block, Layer, Matrix, TensorSelector

from conftest import TINY, make_tiny_campaign


def test_degenerate_campaign_single_outcome(tiny_store):
    cfg = make_tiny_campaign(trials=1, prompts=("one prompt",))
    result = CampaignRunner(cfg, store=tiny_store).run_campaign()
    assert len(result.outcomes) == 1
    tid = result.target_ids[0]
    outcome = result.outcomes[0]
    for metric in cfg.metrics:
        agg = result.aggregates[tid][metric]
        assert agg["count"] == 1
        assert agg["mean"] == outcome.per_prompt[0][metric]
        assert agg["std"] == 0.0


def test_aggregate_is_mean_over_trials_times_prompts(tiny_store):
    cfg = make_tiny_campaign(trials=3, prompts=("p one", "p two"))
    result = CampaignRunner(cfg, store=tiny_store).run_campaign()
    tid = result.target_ids[0]
    values = [
        p["rel_deviation"]
        for outcome in sorted(result.outcomes, key=lambda o: o.trial)
        for p in outcome.per_prompt
    ]
    assert len(values) == 6
    assert result.aggregates[tid]["rel_deviation"]["mean"] == float(np.mean(values))
    rederived = derive_aggregates(result.target_ids, result.outcomes, cfg.metrics)
    assert rederived == result.aggregates


def test_campaign_deterministic_across_thread_counts(tiny_store):
    cfg = make_tiny_campaign(trials=3)
    serial = CampaignRunner(cfg, store=tiny_store).run_campaign(threads=1)
    threaded = CampaignRunner(cfg, store=tiny_store).run_campaign(threads=3)
    assert serial.to_json() == threaded.to_json()


def two_target_list():
    return (
        CampaignTarget(TensorSelector(Block.DOWN, 0, 0, Layer.SA, Matrix.WV), bit=14),
        CampaignTarget(TensorSelector(Block.MID, 0, 0, Layer.FFN, Matrix.WF1), bit=14),
    )


def test_campaign_independent_of_target_order(tiny_store):
    targets = two_target_list()
    forward = make_tiny_campaign(trials=2, targets=targets)
    backward = make_tiny_campaign(trials=2, targets=targets[::-1])
    a = CampaignRunner(forward, store=tiny_store).run_campaign()
    b = CampaignRunner(backward, store=tiny_store).run_campaign(threads=2)
    assert a.to_json() == b.to_json()


def test_campaign_rejects_duplicate_targets(tiny_store):
    targets = two_target_list()
    cfg = make_tiny_campaign(trials=1, targets=(targets[0], targets[0]))
    with pytest.raises(ValueError, match="duplicate"):
        CampaignRunner(cfg, store=tiny_store).run_campaign()


def test_campaign_preserves_base_store(tiny_store):
    digest = tiny_store.digest()
    CampaignRunner(make_tiny_campaign(), store=tiny_store).run_campaign(threads=2)
    assert tiny_store.digest() == digest


def test_campaign_baseline_metrics_are_self_referential(tiny_campaign_result):
    for per_prompt in tiny_campaign_result.baseline:
        assert per_prompt["rel_deviation"] == 0.0
        assert per_prompt["corrupted_fraction"] == 0.0
        assert per_prompt["component_count"] == 0.0
        assert per_prompt["clip_like"] >= 0.0


def test_campaign_caches_images(tiny_campaign_result):
    result = tiny_campaign_result
    assert result.has_images
    assert len(result.baseline_images) == 2
    tid = result.target_ids[0]
    assert tid in result.exemplar_images
    # The bit-14 exemplar visibly differs from the baseline image.
    assert not np.array_equal(result.exemplar_images[tid], result.baseline_images[0])


def test_campaign_outcomes_carry_injection_audit(tiny_campaign_result, tiny_store):
    for outcome in tiny_campaign_result.outcomes:
        record = outcome.injection
        assert record.tensor == "down.0.t0.sa.wv"
        assert record.bit == 14
        base_pattern = tiny_store.read_element(record.tensor, record.flat_index)
        assert record.original == base_pattern
        assert record.flipped == base_pattern ^ (1 << 14)
        assert not outcome.non_finite


def test_campaign_json_round_trip(tiny_campaign_result):
    result = tiny_campaign_result
    reloaded = CampaignResult.from_dict(json.loads(result.to_json()))
    assert reloaded.aggregates == result.aggregates
    assert reloaded.target_ids == result.target_ids
    assert [o.to_dict() for o in reloaded.outcomes] == [o.to_dict() for o in result.outcomes]
    assert not reloaded.has_images
    rederived = derive_aggregates(
        reloaded.target_ids, reloaded.outcomes, reloaded.config["metrics"]
    )
    assert rederived == result.aggregates


def test_bit_sweep_structure_and_determinism(tiny_store):
    cfg = make_tiny_campaign(trials=2, prompts=("sweep prompt",))
    a = CampaignRunner(cfg, store=tiny_store).bit_sweep(trials=2)
    b = CampaignRunner(cfg, store=tiny_store).bit_sweep(trials=2, threads=2)
    assert a.to_json() == b.to_json()
    assert set(a.per_bit) == {str(bit) for bit in range(16)}
    assert len(a.outcomes) == 32
    series = a.metric_by_bit("rel_deviation")
    assert len(series) == 16
    # The exponent-MSB flip dominates even at this tiny scale.
    assert series[14] == max(series)


def test_bit_sweep_seeds_differ_per_bit(tiny_store):
    cfg = make_tiny_campaign(trials=1, prompts=("sweep prompt",))
    sweep = CampaignRunner(cfg, store=tiny_store).bit_sweep(trials=1)
    by_bit = {o.injection.bit for o in sweep.outcomes}
    assert by_bit == set(range(16))


def test_campaign_config_validation():
    target = CampaignTarget(TensorSelector(Block.DOWN, 0, 0, Layer.SA, Matrix.WV))
    with pytest.raises(ValueError):
        CampaignConfig(model=TINY, targets=(), prompts=("p",))
    with pytest.raises(ValueError):
        CampaignConfig(model=TINY, targets=(target,), prompts=())
    with pytest.raises(ValueError):
        CampaignConfig(model=TINY, targets=(target,), prompts=("p",), trials=0)
    with pytest.raises(ValueError):
        CampaignConfig(model=TINY, targets=(target,), prompts=("p",), metrics=("nope",))
    with pytest.raises(ValueError):
        CampaignTarget(TensorSelector(Block.DOWN, 0, 0, Layer.SA, Matrix.WV), bit=16)


def test_config_dict_round_trip():
    cfg = make_tiny_campaign(trials=4, seed=17)
    again = config_from_dict(config_to_dict(cfg))
    assert again == cfg


def test_aggregate_values_shape():
    agg = aggregate_values([1.0, 2.0, 3.0, 4.0])
    assert agg == {"mean": 2.5, "std": float(np.std([1.0, 2.0, 3.0, 4.0])), "count": 4}
