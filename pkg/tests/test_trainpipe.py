import json
import math

import numpy as np
import pytest

from raypath.gfn import GfnParams
from raypath.neural import AdamState
from raypath.trainpipe.canyon import CanyonParams, PlacementError, box_facets, sample_canyon
from raypath.trainpipe.loop import (
    DESK_SCENE,
    PRESETS,
    ArchitectureMismatchError,
    ConfigError,
    MetricsRow,
    TrainConfig,
    TrainingAborted,
    checkpoint_params,
    curriculum_init,
    eval_scene_set,
    format_metrics_csv,
    load_checkpoint,
    make_checkpoint,
    read_metrics_csv,
    save_checkpoint,
    train,
)
from raypath.trainpipe.metrics import (
    EvalMetrics,
    aggregate,
    evaluate,
    evaluate_random,
    evaluate_sampler,
    oracle_sets,
    scene_metrics,
)
from raypath.tracer import PathCandidate

TINY = TrainConfig(
    k=1, d=8, flow_hidden=16, steps=12, batch=8, eval_every=6, eval_scenes=3, eval_samples=4, scene=DESK_SCENE
)


def C(*ids):
    return PathCandidate(ids)


# -------------------------------------------------------------------- canyon


def test_canyon_layout_properties():
    params = CanyonParams()
    lo, hi = params.full_facet_range
    for seed in range(40):
        s = sample_canyon(seed, params)
        assert lo <= s.n_full <= hi
        assert 0 <= s.removed <= params.r_max
        assert len(s.scene) == s.n_full - s.removed
        for p in (s.scene.tx, s.scene.rx):
            assert p[2] > 0
        assert np.linalg.norm(s.scene.tx - s.scene.rx) >= params.min_separation


def test_canyon_is_seed_deterministic():
    a, b = sample_canyon(3).scene, sample_canyon(3).scene
    assert a.triangles.tobytes() == b.triangles.tobytes() and a.tx.tobytes() == b.tx.tobytes()
    assert sample_canyon(4).scene.tx.tobytes() != a.tx.tobytes()


def test_box_facets_face_outward():
    tris = box_facets(0, 2, 0, 3, 5)
    assert len(tris) == 10
    centre = np.array([1.0, 1.5, 2.5])
    for t in tris:
        n = np.cross(t[1] - t[0], t[2] - t[0])
        assert n @ (t.mean(axis=0) - centre) > 0


def test_canyon_params_validation():
    with pytest.raises(ValueError):
        CanyonParams(street_width=(5, 1))
    with pytest.raises(ValueError):
        CanyonParams.from_dict({"colour": 1})
    assert CanyonParams.from_dict(DESK_SCENE.to_dict()) == DESK_SCENE
    with pytest.raises(PlacementError):
        sample_canyon(0, CanyonParams(street_width=(1.0, 1.0)))


# ------------------------------------------------------------------- metrics


def test_accuracy_four_of_ten():
    oracle = {C(1), C(2)}
    draws = [C(1)] * 3 + [C(2)] + [C(5)] * 6
    m = scene_metrics(draws, oracle)
    assert m.accuracy == 0.4
    assert m.hit_rate == 1.0


def test_hit_rate_one_of_five():
    oracle = {C(i) for i in range(5)}
    m = scene_metrics([C(3), C(3), C(9)], oracle)
    assert m.hit_rate == 0.2
    assert m.accuracy == 2 / 3


def test_aggregate_skips_empty_oracles_for_hit_rate():
    a = scene_metrics([C(0), C(1)], {C(0)})
    b = scene_metrics([C(0), C(1)], set())
    agg = aggregate([a, b])
    assert agg.accuracy == 0.25
    assert agg.hit_rate == 1.0
    assert aggregate([b]).hit_rate == 0.0
    assert b.hit_rate is None


def test_random_baseline_matches_expected_accuracy():
    scenes = [sample_canyon(np.random.SeedSequence((8, i)), DESK_SCENE).scene for i in range(3)]
    m = evaluate_random(scenes, 1, 4000, 0)
    expected = np.mean([len(o) / len(s) for o, s in zip(oracle_sets(scenes, 1), scenes)])
    assert abs(m.accuracy - expected) < 0.02


# -------------------------------------------------------------------- config


def test_config_round_trip_and_errors(tmp_path):
    assert TrainConfig.from_dict(TINY.to_dict()) == TINY
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"k": 1, "bogus": 2})
    with pytest.raises(ConfigError):
        TrainConfig(k=4)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(loss="huber")
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"preset": "desk-k2", "steps": 7}))
    cfg = TrainConfig.load(f)
    assert cfg.k == 2 and cfg.steps == 7 and cfg.d == 32
    f.write_text("{oops")
    with pytest.raises(ConfigError):
        TrainConfig.load(f)


def test_presets_match_documented_hyperparameters():
    paper = PRESETS["paper"]
    assert (paper.d, paper.batch, paper.lr, paper.steps, paper.flow_hidden) == (100, 50, 3e-5, 500_000, 500)
    desk = PRESETS["desk-k1"]
    assert (desk.d, desk.batch, desk.lr, desk.eval_scenes, desk.eval_samples) == (32, 50, 3e-5, 30, 10)
    assert desk.steps <= 20_000 and PRESETS["desk-k2"].steps <= 10_000


# --------------------------------------------------------------------- loop


def test_metrics_csv_round_trip(tmp_path):
    rows = [MetricsRow(0, math.nan, 0.1, 0.2), MetricsRow(5, 0.25, 0.3, 1.0)]
    f = tmp_path / "m.csv"
    f.write_text(format_metrics_csv(rows))
    back = read_metrics_csv(f)
    assert back[1] == rows[1] and back[0].step == 0 and math.isnan(back[0].loss)
    assert f.read_text().splitlines()[0] == "step,loss,accuracy,hit_rate"


def test_train_writes_outputs_and_is_deterministic(tmp_path):
    r1 = train(TINY, out_dir=tmp_path / "a")
    train(TINY, out_dir=tmp_path / "b")
    csv_a = (tmp_path / "a" / "metrics.csv").read_text()
    assert csv_a == (tmp_path / "b" / "metrics.csv").read_text()
    assert [r.step for r in r1.metrics] == [0, 6, 12]
    ckpt = load_checkpoint(tmp_path / "a" / "checkpoint.json")
    assert ckpt["step"] == 12
    p = checkpoint_params(ckpt)
    assert all(np.array_equal(p.arrays[k], r1.params.arrays[k]) for k in p.arrays)
    assert json.loads((tmp_path / "a" / "config.json").read_text()) == TINY.to_dict()


def test_training_changes_parameters_and_resume(tmp_path):
    r = train(TINY, out_dir=tmp_path / "a")
    init = train(TrainConfig.from_dict({**TINY.to_dict(), "steps": 0}), out_dir=tmp_path / "z").params
    assert any(not np.array_equal(init.arrays[k], r.params.arrays[k]) for k in init.arrays)
    # curriculum: K=2 from the K=1 checkpoint, same architecture
    cfg2 = TrainConfig.from_dict({**TINY.to_dict(), "k": 2, "steps": 3, "eval_every": 3})
    p2 = curriculum_init(tmp_path / "a" / "checkpoint.json", cfg2)
    assert all(np.array_equal(p2.arrays[k], r.params.arrays[k]) for k in p2.arrays)
    out = train(cfg2, init=p2)
    assert len(out.metrics) == 2
    wrong = TrainConfig.from_dict({**TINY.to_dict(), "d": 4})
    with pytest.raises(ArchitectureMismatchError):
        curriculum_init(tmp_path / "a" / "checkpoint.json", wrong)


def test_non_finite_loss_aborts_with_checkpoint(tmp_path):
    with pytest.raises(TrainingAborted) as info:
        train(TINY, out_dir=tmp_path, reward_fn=lambda scene, cand: math.inf)
    assert info.value.checkpoint_path == tmp_path / "checkpoint_abort.json"
    assert load_checkpoint(info.value.checkpoint_path)["step"] == 0


def test_eval_metrics_fields():
    assert EvalMetrics(0.5, 0.25).hit_rate == 0.25


def test_no_removal_gives_full_scene():
    params = CanyonParams(r_max=0)
    a, b = sample_canyon(9, params), sample_canyon(9, params)
    assert a.removed == 0 and len(a.scene) == a.n_full
    assert a.scene.triangles.tobytes() == b.scene.triangles.tobytes()


def test_default_generator_mean_facet_count():
    sizes = [len(sample_canyon(np.random.SeedSequence((1000, i))).scene) for i in range(1000)]
    assert 60 <= np.mean(sizes) <= 90


def test_fixed_candidate_sampler():
    scene = sample_canyon(np.random.SeedSequence((8, 0)), DESK_SCENE).scene
    oracle = frozenset({C(i) for i in range(5)})
    m = scene_metrics([C(2)] * 10, oracle)
    assert (m.accuracy, m.hit_rate) == (1.0, 0.2)
    assert evaluate_sampler(lambda i, s: [C(2)] * 10, [scene], 1, [oracle]).accuracy == 1.0


def test_uniform_flow_model_matches_oracle_fraction():
    scenes = [sample_canyon(np.random.SeedSequence((31, i)), DESK_SCENE).scene for i in range(4)]
    oracles = oracle_sets(scenes, 1)
    p = GfnParams.init(TINY.model_config(), 0)
    p.arrays["flow_head.2.weight"][...] = 0.0
    m_per_scene = 2000
    m = evaluate(p, scenes, 1, m_per_scene, 0, oracles)
    fracs = np.array([len(o) / len(s) for o, s in zip(oracles, scenes)])
    expected = fracs.mean()
    sigma = np.sqrt(np.sum(fracs * (1 - fracs) * m_per_scene)) / (m_per_scene * len(scenes))
    assert abs(m.accuracy - expected) <= 3 * sigma


def test_zero_steps_logs_initial_eval_only(tmp_path):
    init = GfnParams.init(TINY.model_config(), 5)
    cfg = TrainConfig.from_dict({**TINY.to_dict(), "steps": 0})
    res = train(cfg, init=init, out_dir=tmp_path)
    assert [r.step for r in read_metrics_csv(tmp_path / "metrics.csv")] == [0]
    ckpt = checkpoint_params(load_checkpoint(tmp_path / "checkpoint.json"))
    assert all(np.array_equal(ckpt.arrays[k], init.arrays[k]) for k in init.arrays)
    assert math.isnan(res.metrics[0].loss)


def test_curriculum_copy_reproduces_metrics_and_bytes(tmp_path):
    train(TINY, out_dir=tmp_path / "a")
    src = load_checkpoint(tmp_path / "a" / "checkpoint.json")
    copy = curriculum_init(src, TINY)
    scenes = eval_scene_set(TINY)
    a = evaluate(checkpoint_params(src), scenes, 1, 6, 3)
    b = evaluate(copy, scenes, 1, 6, 3)
    assert (a.accuracy, a.hit_rate) == (b.accuracy, b.hit_rate)
    again = make_checkpoint(TINY, copy, AdamState.from_dict(src["adam"]), src["step"])
    save_checkpoint(again, tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == (tmp_path / "a" / "checkpoint.json").read_bytes()
