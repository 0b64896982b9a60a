import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shapeservo import deformernet as dn
from shapeservo.harness import cli, datasets as D, experiments as X
from shapeservo.harness.config import (ConfigError, ExperimentConfig, derive_seed, format_config, parse_config,
                                       splitmix64)

SMALL = """\
# two short pulls, one held-out goal per split
n_trajectories = 1
goals_per_trajectory = 2
n_pairs = 6
epochs = 2
batch = 4
n_test_id = 1
n_test_ood = 1
servo_max_iters = 2
moves_min = 3
moves_max = 4
rrt_goals = 1
rrt_max_nodes = 5
retract_planes = 2
max_shifts = 1
keypoints = 20
top_m = 5
"""


# -- config ------------------------------------------------------------------

def test_parse_config_values():
    cfg = parse_config("seed = 4\ndims = 0.1, 0.2, 0.3  # m\nstiffness_mean = 1000\nmp_mode = random\n")
    assert cfg.seed == 4 and cfg.dims == (0.1, 0.2, 0.3)
    assert cfg.stiffness_mean == 1000.0 and cfg.mp_mode == "random"
    assert parse_config(format_config(cfg)) == cfg


@pytest.mark.parametrize("text", ["nonsense = 1", "seed 4", "seed = x", "stiffness_sigma = 0",
                                  "n_pairs = 0", "tolerances = 1e-4, 1e-3", "tolerances = 1e-3, -1",
                                  "moves_min = 5\nmoves_max = 4", "rrt_goal_bias = 2", "mp_mode = anywhere"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_camera_normalized():
    c = ExperimentConfig(camera_dir=(0.0, 0.0, -2.0)).camera
    assert c == (0.0, 0.0, -1.0)


def test_splitmix_reference_values():
    # first outputs of the reference splitmix64 generator seeded with 0
    state = 0
    outs = []
    for _ in range(3):
        state = (state + 0x9E3779B97F4A7C15) & (2**64 - 1)
        outs.append(splitmix64(state - 0x9E3779B97F4A7C15 & (2**64 - 1)))
    assert outs == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_derive_seed_streams_differ():
    seeds = {derive_seed(0, a, b) for a in range(5) for b in range(5)}
    assert len(seeds) == 25
    assert derive_seed(3, 1, 2) == derive_seed(3, 1, 2)
    assert derive_seed(3, 1, 2) != derive_seed(4, 1, 2)


# -- data ---------------------------------------------------------------------

def test_counting_rule():
    cps = [D.Checkpoint(np.full((4, 3), float(i)), np.array([0.01 * i, 0.0, 0.0])) for i in range(5)]
    pairs = D.pairs_from_checkpoints(cps)
    assert len(pairs) == 5
    zero = [p for p in pairs if not np.any(p.action)]
    assert len(zero) == 1 and zero[0] is pairs[-1]
    assert np.allclose(pairs[0].action, [0.04, 0.0, 0.0])
    assert all(np.array_equal(p.goal, cps[-1].cloud) for p in pairs)


def test_stiffness_sample_mean():
    cfg = ExperimentConfig(stiffness_mean=1000.0, stiffness_sigma=200.0)
    rng = np.random.default_rng(0)
    N = 2000
    e = np.array([D._stiffness(cfg, rng) for _ in range(N)])
    assert abs(e.mean() - 1000.0) <= 3 * 200.0 / math.sqrt(N)
    assert e.min() > 0


def test_ood_objects_outside_training_range():
    cfg = ExperimentConfig()
    for i in range(20):
        obj = D.sample_ood_object(cfg, np.random.default_rng(i))
        z = abs(obj.young_modulus - cfg.stiffness_mean) / cfg.stiffness_sigma
        assert 2.0 - 1e-9 <= z <= 4.0 + 1e-9
        assert all(d > t for d, t in zip(obj.spec.dimensions, cfg.dims))


def _records(seed=0, n=3):
    rng = np.random.default_rng(seed)
    q = D.cloudops.quantize
    return [D.PairRecord(q(rng.normal(size=(int(rng.integers(1, 30)), 3))), q(rng.normal(size=(7, 3))),
                         rng.normal(size=3)) for _ in range(n)]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 5))
def test_dataset_round_trip(seed, n):
    recs = _records(seed, n)
    back = D.decode_dataset(D.encode_dataset(recs))
    assert len(back) == n
    for a, b in zip(recs, back):
        assert np.array_equal(a.current, b.current) and np.array_equal(a.goal, b.goal)
        assert np.array_equal(a.action, b.action)


def test_dataset_errors():
    buf = D.encode_dataset(_records())
    for bad in (b"XXXX" + buf[4:], buf[:4] + (9).to_bytes(4, "little") + buf[8:], buf[:-3], buf + b"\0", buf[:6]):
        with pytest.raises(ValueError):
            D.decode_dataset(bad)


# -- statistics ----------------------------------------------------------------

@pytest.mark.parametrize("k,n", [(16, 20), (3, 10), (1, 7), (50, 100)])
def test_wilson_interval_solves_score_equation(k, n):
    # endpoints are the roots of (p - k/n)^2 = z^2 p (1 - p) / n
    z = 1.959963984540054
    ph = k / n
    roots = np.sort(np.roots([1 + z * z / n, -(2 * ph + z * z / n), ph * ph]).real)
    assert np.allclose(X.wilson_interval(k, n), roots, rtol=0, atol=1e-12)


def test_wilson_interval_edges():
    assert X.wilson_interval(0, 0) == (0.0, 1.0)
    assert X.wilson_interval(20, 20)[1] == 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(1e-8, 1.0), min_size=1, max_size=8), min_size=1, max_size=10))
def test_success_rates_monotone(traces):
    ladder = X.tolerance_ladder(ExperimentConfig(), [t[0] for t in traces])
    rates = X.success_rates(traces, ladder)
    assert all(b <= a for a, b in zip(rates, rates[1:]))


def test_calibrated_ladder():
    ladder = X.tolerance_ladder(ExperimentConfig(), [1.0, 2.0, 3.0, 4.0, 5.0])
    assert ladder[0] == pytest.approx(0.4)
    assert ladder == tuple(0.4 * f for f in (1.0, 0.5, 0.25, 0.125, 0.0625))
    assert X.tolerance_ladder(ExperimentConfig(tolerances=(1e-3, 1e-4)), [1.0]) == (1e-3, 1e-4)


def test_goals_round_trip(tmp_path):
    cfg = ExperimentConfig(n_test_id=2, n_test_ood=2)
    cases = X.make_cases(cfg)
    X.write_goals(tmp_path / "g.csv", cases)
    back = X.read_goals(tmp_path / "g.csv")
    assert [(c.index, c.split, c.obj, c.path_seed, c.n_moves) for c in back] == \
           [(c.index, c.split, c.obj, c.path_seed, c.n_moves) for c in cases]
    assert all(np.array_equal(a.mp, b.mp) for a, b in zip(cases, back))


def test_retraction_planes_are_feasible():
    cfg = ExperimentConfig()
    body = D.build(D.TrialObject(D.simkit.PrimitiveSpec("box", cfg.dims, cfg.resolution), 5000.0))
    planes = X.sample_planes(cfg, body, 20)
    assert len(planes) == 20
    for p in planes:
        assert p.normal[2] >= 0
        assert p.signed_distance(body.positions[body.fixed]).min() >= 0


# -- CLI -------------------------------------------------------------------------

def test_cli_usage_codes(capsys):
    assert cli.main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err
    assert cli.main(["--help"]) == 0
    assert cli.main([]) == 1


def test_cli_missing_inputs(tmp_path):
    assert cli.main(["eval-servo", "--out", str(tmp_path)]) == 1
    assert cli.main(["train", "--out", str(tmp_path)]) == 1
    assert cli.main(["eval-rrt", "--out", str(tmp_path), "--model", str(tmp_path / "nope.dnet")]) == 1
    (tmp_path / "bad.cfg").write_text("bogus = 1\n")
    assert cli.main(["gen-data", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path)]) == 1
    assert cli.main(["predict-mp", "--out", str(tmp_path), "--goals", str(tmp_path / "none.csv")]) == 1


def test_cli_missing_goals_for_rrt(tmp_path):
    dn.save(dn.DeformerNetModel.create(), tmp_path / "model.dnet")
    assert cli.main(["eval-rrt", "--out", str(tmp_path), "--goals", str(tmp_path / "none.csv")]) == 1


def test_zero_episode_config(tmp_path):
    (tmp_path / "zero.cfg").write_text("n_test_id = 0\nn_test_ood = 0\n")
    dn.save(dn.DeformerNetModel.create(), tmp_path / "model.dnet")
    assert cli.main(["eval-servo", "--config", str(tmp_path / "zero.cfg"), "--out", str(tmp_path)]) == 0
    rows = list(csv.reader(open(tmp_path / "episodes.csv")))
    assert len(rows) == 1 and rows[0][0] == "goal"


def test_cli_gen_data_header_and_reproducible(tmp_path):
    (tmp_path / "small.cfg").write_text(SMALL)
    out = tmp_path / "a"
    args = ["gen-data", "--config", str(tmp_path / "small.cfg"), "--out", str(out)]
    names = ("dataset.dset", "trajectories.csv", "gen-data.config.txt")
    assert cli.main(args) == 0
    first = {n: (out / n).read_bytes() for n in names}
    assert cli.main(args) == 0
    buf = first["dataset.dset"]
    assert buf[:4] == b"DSET"
    assert int.from_bytes(buf[4:8], "little") == 1
    assert int.from_bytes(buf[8:12], "little") == 6
    for name in names:
        assert (out / name).read_bytes() == first[name]
    assert cli.main(["gen-data", "--config", str(tmp_path / "small.cfg"), "--out", str(tmp_path / "c"),
                     "--seed", "5"]) == 0
    assert (tmp_path / "c" / "dataset.dset").read_bytes() != buf


def test_csv_headers_name_units(tmp_path):
    (tmp_path / "small.cfg").write_text(SMALL)
    out = tmp_path / "run"
    base = ["--config", str(tmp_path / "small.cfg"), "--out", str(out)]
    assert cli.main(["gen-data"] + base) == 0
    assert cli.main(["train"] + base) == 0
    assert cli.main(["eval-servo"] + base) == 0
    assert cli.main(["predict-mp"] + base + ["--goals", str(out / "goals.csv")]) == 0
    header = next(csv.reader(open(out / "episodes.csv")))
    assert "initial_chamfer_m2" in header and "final_chamfer_m2" in header
    assert next(csv.reader(open(out / "servo_timing.csv")))[1] == "wall_time_s"
    assert next(csv.reader(open(out / "loss.csv"))) == ["epoch", "learning_rate", "train_mse_m2"]
    assert len(list(csv.reader(open(out / "manipulation_points.csv")))) == 3
