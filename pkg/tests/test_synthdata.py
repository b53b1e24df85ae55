import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rotfuse import geometry as geo
from rotfuse.synthdata import (
    SPLIT_CODE,
    Benchmark,
    CameraRig,
    InfeasibleSplit,
    SameCamera,
    SynthConfig,
    UnknownCamera,
    WorldSample,
    apply_probe,
    build_rig,
    fit_linear_probe,
    generate_dataset,
    make_pair,
    perturb_rotation,
    read_dataset,
    render_view,
    write_dataset,
)

SMALL = SynthConfig(n_subjects=3, samples_per_subject=20)


@pytest.fixture(scope="module")
def small_ds():
    return generate_dataset(SMALL, 1)


# -- rig ------------------------------------------------------------------------------------


def test_default_rig_counts_and_determinism():
    rig = build_rig(SynthConfig(), 0)
    assert len(rig.ids) == 18
    assert [rig.splits.count(s) for s in ("train", "test_interpolation", "test_extrapolation")] == [12, 3, 3]
    again = build_rig(SynthConfig(), 0)
    assert rig.to_dict() == again.to_dict()


@given(st.integers(min_value=0, max_value=10_000))
def test_rig_split_geometry(seed):
    rig = build_rig(SynthConfig(), seed)
    train = [p for p, s in zip(rig.polar, rig.splits) if s == "train"]
    for p, s in zip(rig.polar, rig.splits):
        if s == "test_extrapolation":
            assert p > max(train)
        if s == "test_interpolation":
            assert min(train) < p < max(train)


def test_infeasible_split():
    with pytest.raises(InfeasibleSplit):
        build_rig(SynthConfig(train_polar_deg=(8.0, 50.0), extrap_polar_deg=(40.0, 60.0)), 0)


# -- rendering ------------------------------------------------------------------------------


def _world_samples(bench, n, rng):
    identity = rng.uniform(-1, 1, bench.config.identity_dim)
    return [bench.sample_world(0, identity, rng) for _ in range(n)]


def test_clean_frontal_view_is_linearly_decodable():
    cfg = SynthConfig(noise_sigma=0.0, view_roll_deg=0.0)
    bench = Benchmark(cfg, 0)
    frontal = bench.rig.ids[int(np.argmin(bench.rig.polar))]
    rng = np.random.default_rng(1)
    views = [render_view(bench, frontal, s, k) for k, s in enumerate(_world_samples(bench, 400, rng))]
    clear = [v for v in views if not v.occluded]
    assert len(clear) > 200
    X = np.array([v.features for v in clear])
    G = np.array([v.gaze for v in clear])
    P = fit_linear_probe(X[:200], G[:200])
    pred = apply_probe(P, X[200:])
    pred /= np.linalg.norm(pred, axis=1, keepdims=True)
    assert geo.angular_error(pred, G[200:]).max() < 1.0


def test_occlusion_degrades_probe_on_matched_samples():
    cfg = SynthConfig(view_roll_deg=0.0)
    undegraded = replace(cfg, occlusion_attenuation=1.0, occlusion_noise_mult=1.0)
    bench, clean_bench = Benchmark(cfg, 0), Benchmark(undegraded, 0)
    rng = np.random.default_rng(2)
    samples = _world_samples(bench, 1500, rng)
    cams = bench.rig.cameras("train")
    fit = [render_view(clean_bench, cams[k % len(cams)], s, k) for k, s in enumerate(samples)]
    P = fit_linear_probe(np.array([v.features for v in fit]), np.array([v.gaze for v in fit]))
    occ = [(k, s) for k, s in enumerate(samples) if render_view(bench, cams[k % len(cams)], s, k).occluded]
    assert len(occ) > 30

    def err(b):
        views = [render_view(b, cams[k % len(cams)], s, 10_000 + k) for k, s in occ]
        pred = apply_probe(P, np.array([v.features for v in views]))
        pred /= np.linalg.norm(pred, axis=1, keepdims=True)
        return geo.angular_error(pred, np.array([v.gaze for v in views])).mean()

    assert err(bench) > err(clean_bench)


def test_occlusion_follows_downward_camera_pitch():
    bench = Benchmark(SynthConfig(), 3)
    rng = np.random.default_rng(3)
    for k, s in enumerate(_world_samples(bench, 200, rng)):
        v = render_view(bench, bench.rig.ids[k % 18], s, k)
        assert v.occluded == (geo.pitch_of(v.gaze) < -math.radians(20.0))


def test_render_same_seed_identical_and_unknown_camera():
    bench = Benchmark(SynthConfig(), 0)
    s = _world_samples(bench, 1, np.random.default_rng(4))[0]
    a, b = render_view(bench, 2, s, 99), render_view(bench, 2, s, 99)
    assert np.array_equal(a.features, b.features)
    with pytest.raises(UnknownCamera):
        render_view(bench, 1000, s, 0)


# -- pairs ----------------------------------------------------------------------------------------


def test_pair_consistency_many_samples():
    bench = Benchmark(SynthConfig(), 5)
    rng = np.random.default_rng(5)
    identity = rng.uniform(-1, 1, 4)
    worst = 0.0
    for k in range(10_000):
        s = bench.sample_world(0, identity, rng)
        ct, cr = (int(c) for c in rng.choice(18, 2, replace=False))
        p = make_pair(bench, ct, cr, s, k)
        worst = max(worst, float(np.abs(p.g_tgt - p.R @ p.g_ref).max()))
    assert worst < 1e-9


def test_same_camera_forbidden():
    bench = Benchmark(SynthConfig(), 0)
    s = _world_samples(bench, 1, np.random.default_rng(6))[0]
    with pytest.raises(SameCamera):
        make_pair(bench, 3, 3, s, 0)


def test_identity_rotation_pair():
    bench = Benchmark(SynthConfig(view_roll_deg=0.0), 0)
    rig = bench.rig
    bench.rig = CameraRig([0, 1], np.array([rig.polar[0]] * 2), np.array([rig.azimuth[0]] * 2), ["train", "train"], rig.d)
    s = _world_samples(bench, 1, np.random.default_rng(7))[0]
    p = make_pair(bench, 0, 1, s, 0)
    assert np.allclose(p.R, np.eye(3), atol=1e-12)
    assert np.allclose(p.g_tgt, p.g_ref, atol=1e-12)


def test_world_sample_invariants():
    bench = Benchmark(SynthConfig(), 0)
    for s in _world_samples(bench, 50, np.random.default_rng(8)):
        assert isinstance(s, WorldSample)
        assert abs(np.linalg.norm(s.gaze_world) - 1) < 1e-9
        assert np.all(np.abs(s.identity) <= 1)


# -- datasets ---------------------------------------------------------------------------------------


def test_dataset_determinism_and_counts(small_ds):
    again = generate_dataset(SMALL, 1)
    assert again.records.tobytes() == small_ds.records.tobytes()
    r = small_ds.records
    per_subject = SMALL.samples_per_subject * 2 * SMALL.pairs_per_sample
    assert np.bincount(r["subject"]).tolist() == [per_subject] * SMALL.n_subjects
    assert np.all(r["cam_tgt"] != r["cam_ref"])


def test_split_hygiene(small_ds):
    r = small_ds.records
    train = SPLIT_CODE["train"]
    tr = small_ds.select("train")
    assert np.all(r["split_tgt"][tr] == train) and np.all(r["split_ref"][tr] == train)
    # pairs never mix training and test cameras
    assert np.all((r["split_tgt"] == train) == (r["split_ref"] == train))
    test_ids = set(small_ds.rig.cameras("test_interpolation", "test_extrapolation"))
    assert not test_ids & (set(r["cam_tgt"][tr].tolist()) | set(r["cam_ref"][tr].tolist()))
    # folds partition subjects
    fold_of = {}
    for s, f in zip(r["subject"], r["fold"]):
        assert fold_of.setdefault(int(s), int(f)) == int(f)
    for sel in ("seen", "unseen"):
        assert not set(r["subject"][small_ds.select(sel)]) & set(r["subject"][tr])


def test_dataset_pair_consistency(small_ds):
    a = small_ds.arrays()
    assert np.abs(a["g_tgt"] - np.einsum("nij,nj->ni", a["R"], a["g_ref"])).max() < 1e-9


def test_dataset_is_discriminative(small_ds):
    probe = small_ds.header["probe"]
    assert probe["n_occluded"] > 0
    assert probe["two_view_deg"] < probe["single_view_deg"]


@pytest.mark.parametrize("fmt", ["binary", "text"])
def test_dataset_round_trip(small_ds, tmp_path, fmt):
    write_dataset(small_ds, tmp_path / "d", fmt)
    back = read_dataset(tmp_path / "d")
    assert back.records.tobytes() == small_ds.records.tobytes()
    assert back.header == json.loads(json.dumps(small_ds.header))
    with pytest.raises(ValueError):
        write_dataset(small_ds, tmp_path / "x", "yaml")


# -- rotation noise ----------------------------------------------------------------------------------


def test_perturb_zero_noise_is_identity():
    R = geo.random_rotation(np.random.default_rng(0))
    assert np.array_equal(perturb_rotation(R, 0.0, np.random.default_rng(1)), R)
    with pytest.raises(ValueError):
        perturb_rotation(R, -0.1, np.random.default_rng(1))


def test_perturb_noise_calibration():
    rng = np.random.default_rng(2)
    R = geo.random_rotation(rng)
    d = [geo.geodesic_distance(R, perturb_rotation(R, 0.05, rng)) for _ in range(10_000)]
    assert 0.03 <= np.mean(d) <= 0.07


@settings(max_examples=50)
@given(st.integers(min_value=0, max_value=2**32 - 1), st.floats(min_value=0.0, max_value=3.0))
def test_perturb_output_is_rotation(seed, noise):
    rng = np.random.default_rng(seed)
    assert geo.is_rotation(perturb_rotation(geo.random_rotation(rng), noise, rng), 1e-12)
