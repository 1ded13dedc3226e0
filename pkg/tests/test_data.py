import math

import numpy as np
import pytest

from ntk_lab import data
from ntk_lab.errors import MissingColumn, ParseError


def test_synthetic_target_values():
    assert data.synthetic_target(np.array([[0.0]]))[0] == 1.0
    assert abs(data.synthetic_target(np.array([[math.pi / 2]]))[0]) <= 1e-15


def test_noiseless_synthetic_labels_are_the_target():
    ds = data.gen_synthetic(50, noise_sigma=0.0, seed=2)
    assert np.array_equal(ds.y, data.synthetic_target(ds.x))
    assert np.array_equal(ds.y_val, data.synthetic_target(ds.x_val))


def test_multidimensional_target_scaling():
    x = np.array([[0.0, 0.0, 0.0, 0.0]])
    assert data.synthetic_target(x)[0] == pytest.approx(2.0)


def test_noise_variance_is_recovered():
    ds = data.gen_synthetic(10_000, noise_sigma=0.3, seed=7, val_fraction=0.0)
    resid = ds.y - data.synthetic_target(ds.x)
    assert 0.08 <= np.var(resid, ddof=1) <= 0.10


def test_split_and_range():
    ds = data.gen_synthetic(160, seed=1)
    assert (ds.n_train, ds.n_val) == (128, 32)
    both = np.concatenate([ds.x, ds.x_val])
    assert both.min() >= -6.0 and both.max() <= 6.0


def test_synthetic_is_deterministic():
    a = data.gen_synthetic(40, dim=2, seed=5)
    b = data.gen_synthetic(40, dim=2, seed=5)
    c = data.gen_synthetic(40, dim=2, seed=6)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    assert not np.array_equal(a.x, c.x)


def test_synthetic_rejects_bad_arguments():
    for kwargs in (dict(n_points=0), dict(n_points=5, dim=0), dict(n_points=5, noise_sigma=-0.1)):
        with pytest.raises(ValueError):
            data.gen_synthetic(**kwargs)


def test_transfer_targets_at_special_points():
    assert data.transfer_target_1(0.0) == 0.0
    assert data.transfer_target_2(0.0) == pytest.approx(0.3, abs=1e-15)
    assert abs(data.transfer_target_1(math.pi)) <= 1e-14


def test_transfer_basis_recovery():
    x = np.linspace(-6, 6, 1000)
    basis1 = np.column_stack([np.sin(x), np.sin(5 * x), np.sin(20 * x)])
    basis2 = np.column_stack([np.sin(x), np.cos(7 * x), np.sin(15 * x)])
    c1, *_ = np.linalg.lstsq(basis1, data.transfer_target_1(x), rcond=None)
    c2, *_ = np.linalg.lstsq(basis2, data.transfer_target_2(x), rcond=None)
    assert np.max(np.abs(c1 - [1.0, 0.5, 0.2])) <= 1e-10
    assert np.max(np.abs(c2 - [1.0, 0.3, -0.2])) <= 1e-10


def test_transfer_tasks_layout():
    t1, t2 = data.gen_transfer_tasks(30, 10, seed=3, n_test=50)
    assert (t1.n_train, t1.n_val, t2.n_train, t2.n_val) == (30, 0, 10, 50)
    for x in (t1.x, t2.x, t2.x_val):
        assert x.min() >= -6.0 and x.max() <= 6.0
    clean1, clean2 = data.gen_transfer_tasks(30, 10, noise_sigma=0.0, seed=3, n_test=50)
    assert np.array_equal(clean1.y, data.transfer_target_1(clean1.x[:, 0]))
    assert np.array_equal(clean2.y_val, data.transfer_target_2(clean2.x_val[:, 0]))


def test_transfer_prefix_and_test_set_do_not_depend_on_n2():
    _, small = data.gen_transfer_tasks(20, 5, seed=4)
    _, big = data.gen_transfer_tasks(20, 40, seed=4)
    assert np.array_equal(small.x, big.x[:5]) and np.array_equal(small.y, big.y[:5])
    assert np.array_equal(small.x_val, big.x_val) and np.array_equal(small.y_val, big.y_val)


def test_transfer_allows_empty_task():
    _, t2 = data.gen_transfer_tasks(10, 0, seed=0)
    assert t2.n_train == 0


# -- csv -------------------------------------------------------------------------

def _write(path, text):
    path.write_text(text)
    return path


def test_csv_round_trip(tmp_path):
    p = _write(tmp_path / "d.csv", "a,target,b\n1.5,2,-3\n0,0.25,1e-3\n-7,8,9\n")
    ds = data.load_csv(p, "target")
    assert np.array_equal(ds.x, [[1.5, -3.0], [0.0, 1e-3], [-7.0, 9.0]])
    assert np.array_equal(ds.y, [2.0, 0.25, 8.0])
    assert ds.transform["columns"] == ["a", "b"]


def test_written_dataset_reads_back_exactly(tmp_path):
    ds = data.gen_synthetic(25, dim=2, seed=9)
    ds.write_csv(tmp_path / "s.csv")
    back = data.load_csv(tmp_path / "s.csv", "y")
    assert np.array_equal(back.x, ds.x) and np.array_equal(back.y, ds.y)


def test_csv_normalization(tmp_path):
    rng = np.random.default_rng(0)
    rows = rng.normal(5.0, 3.0, (200, 4))
    lines = ["f1,f2,f3,y"] + [",".join(f"{v:.17g}" for v in r) for r in rows]
    p = _write(tmp_path / "n.csv", "\n".join(lines) + "\n")
    ds = data.load_csv(p, "y", normalize=True)
    assert np.max(np.linalg.norm(ds.x, axis=1)) <= 1 + 1e-12
    assert abs(ds.y.mean()) <= 1e-12
    assert abs(ds.y.var() - 1.0) <= 1e-9
    assert np.allclose(data.invert_targets(ds, ds.y), rows[:, 3], atol=1e-12)


def test_csv_errors_carry_location(tmp_path):
    p = _write(tmp_path / "bad.csv", "x,y\n1,2\n3,oops\n")
    with pytest.raises(ParseError) as info:
        data.load_csv(p, "y")
    assert info.value.row == 3 and info.value.column == "y"
    p = _write(tmp_path / "short.csv", "x,y\n1,2\n3\n")
    with pytest.raises(ParseError) as info:
        data.load_csv(p, "y")
    assert info.value.row == 3
    with pytest.raises(MissingColumn):
        data.load_csv(_write(tmp_path / "m.csv", "x,z\n1,2\n"), "y")
    with pytest.raises(ParseError):
        data.load_csv(_write(tmp_path / "e.csv", ""), "y")


def test_csv_subsample_and_split(tmp_path):
    lines = ["x,y"] + [f"{i},{2 * i}" for i in range(100)]
    p = _write(tmp_path / "big.csv", "\n".join(lines) + "\n")
    ds = data.load_csv(p, "y", max_rows=40, val_fraction=0.25, seed=1)
    assert (ds.n_train, ds.n_val) == (30, 10)
    assert np.array_equal(np.concatenate([ds.y, ds.y_val]), 2 * np.concatenate([ds.x, ds.x_val])[:, 0])
