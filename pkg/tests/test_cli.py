import json

import numpy as np
import pytest

from helpers import full_qp_oracle
from rwseg import cli
from rwseg.lattice import build_default_bank
from rwseg.rw_solver import PriorTerm, RWProblem, WeightVector
from rwseg.volume import (
    PriorWeighting,
    SeedMap,
    Volume,
    load_soft_segmentation,
    make_soft,
    normalize_intensities,
    save_seed_map,
    save_soft_segmentation,
    save_volume,
)


@pytest.fixture
def seeded_case(tmp_path):
    rng = np.random.default_rng(0)
    dims = (4, 3, 2)
    data = rng.normal(0.0, 0.1, size=24) + (np.arange(24) % 4 >= 2)
    vol = Volume(dims, (1, 1, 1), data)
    vol_path = tmp_path / "vol.rvol"
    save_volume(vol, vol_path)
    seeds_path = tmp_path / "seeds.json"
    save_seed_map(SeedMap(2, [0, 23], [0, 1]), seeds_path)
    return tmp_path, vol_path, seeds_path


def test_segment_writes_rseg_and_exits_zero(seeded_case, capsys):
    tmp, vol_path, seeds_path = seeded_case
    out = tmp / "seg.rseg"
    rc = cli.main(
        ["segment", "--volume", str(vol_path), "--seeds", str(seeds_path),
         "--out", str(out)]
    )
    assert rc == 0
    seg = load_soft_segmentation(out)
    assert seg.dims == (4, 3, 2)
    assert np.abs(seg.probs.sum(axis=1) - 1.0).max() <= 1e-9
    assert "cg iterations" in capsys.readouterr().out


def test_segment_reruns_byte_identical(seeded_case):
    tmp, vol_path, seeds_path = seeded_case
    out1, out2 = tmp / "a.rseg", tmp / "b.rseg"
    for out in (out1, out2):
        assert cli.main(
            ["segment", "--volume", str(vol_path), "--seeds", str(seeds_path),
             "--out", str(out)]
        ) == 0
    assert out1.read_bytes() == out2.read_bytes()


def test_segment_without_seeds_or_prior_exits_2(seeded_case, capsys):
    tmp, vol_path, _ = seeded_case
    rc = cli.main(["segment", "--volume", str(vol_path), "--out", str(tmp / "x.rseg")])
    assert rc == 2
    assert "error" in capsys.readouterr().err


def test_segment_beta_override(seeded_case):
    tmp, vol_path, seeds_path = seeded_case
    out = tmp / "seg.rseg"
    rc = cli.main(
        ["segment", "--volume", str(vol_path), "--seeds", str(seeds_path),
         "--beta", "75", "--out", str(out)]
    )
    assert rc == 0


def test_segment_missing_file_exits_2(tmp_path, capsys):
    rc = cli.main(
        ["segment", "--volume", str(tmp_path / "missing.rvol"),
         "--seeds", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o.rseg")]
    )
    assert rc == 2


def test_learn_toy_manifest(tmp_path, capsys):
    rng = np.random.default_rng(1)
    dims = (3, 2, 1)
    n = 6
    z = np.array([0, 0, 0, 1, 1, 1])
    data = z * 1.0 + rng.normal(0.0, 0.05, size=n)
    save_volume(Volume(dims, (1, 1, 1), data), tmp_path / "x.rvol")
    save_volume(Volume(dims, (1, 1, 1), z.astype(float)), tmp_path / "z.rvol")
    save_seed_map(SeedMap(2, [0, 5], [0, 1]), tmp_path / "seeds.json")
    manifest = [{"volume": "x.rvol", "labels": "z.rvol", "seeds": "seeds.json"}]
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))

    out = tmp_path / "weights.json"
    trace = tmp_path / "trace.csv"
    rc = cli.main(
        ["learn", "--manifest", str(tmp_path / "manifest.json"), "--lambda", "1e-3",
         "--iters", "5", "--eta0", "0.02", "--out", str(out), "--trace", str(trace)]
    )
    assert rc == 0
    weights = json.loads(out.read_text())
    assert len(weights["laplacian_weights"]) == 4
    lines = trace.read_text().strip().splitlines()
    assert len(lines) == 6  # header + one row per iteration
    for row in lines[1:]:
        _, _, bound, risk = row.split(",")
        assert float(bound) >= float(risk) - 1e-9


def test_aci_matches_oracle_fixture(tmp_path):
    dims = (2, 1, 1)
    vol = Volume(dims, (1, 1, 1), [0.0, 1.0])
    save_volume(vol, tmp_path / "v.rvol")
    target = make_soft(dims, [[0.8, 0.2], [0.3, 0.7]])
    save_soft_segmentation(target, tmp_path / "prior.rseg")

    out = tmp_path / "aci.rseg"
    rc = cli.main(
        ["aci", "--volume", str(tmp_path / "v.rvol"), "--prior",
         str(tmp_path / "prior.rseg"), "--prior-weight", "0.9",
         "--partition", "edge", "--eta0", "0.5", "--schedule", "adaptive",
         "--out", str(out)]
    )
    assert rc == 0
    got = load_soft_segmentation(out)

    nv = normalize_intensities(vol)
    bank = build_default_bank(nv)
    problem = RWProblem(
        bank,
        WeightVector(np.ones(4), [0.9]),
        (PriorTerm(target, PriorWeighting.uniform(2)),),
        None,
        2,
    )
    expected = full_qp_oracle(problem)
    assert np.abs(got.probs - expected).max() < 1e-4
    diag = (tmp_path / "aci.rseg.diag.csv").read_text().splitlines()
    assert diag[0] == "iteration,dual_value,primal_energy,max_disagreement"


def test_aci_without_seeds_or_prior_exits_2(seeded_case):
    tmp, vol_path, _ = seeded_case
    rc = cli.main(
        ["aci", "--volume", str(vol_path), "--partition", "edge",
         "--out", str(tmp / "x.rseg")]
    )
    assert rc == 2


def test_bad_subcommand_flag_exits_2():
    with pytest.raises(SystemExit) as err:
        cli.main(["segment", "--nope"])
    assert err.value.code == 2
