import json

import pytest

from whmc.cli import chain_seed, main
from whmc.samplers import Trace


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture
def instances(tmp_path):
    spec = write(tmp_path / "spec.json", {"targets": [
        {"type": "gmm", "name": "gmm", "K": 3, "D": 2, "seed": 5},
        {"type": "four_mode", "name": "four"},
        {"type": "welling", "name": "welling", "seed": 1, "n": 200},
        {"type": "sensor", "name": "sensor", "seed": 2},
    ]})
    assert main(["generate", spec, "--out", str(tmp_path / "data")]) == 0
    return tmp_path


def test_generate_writes_and_is_deterministic(instances, tmp_path):
    data = instances / "data"
    names = sorted(p.name for p in data.iterdir())
    assert names == ["four.json", "four.library.json", "gmm.json", "gmm.library.json", "sensor.json", "welling.json"]
    first = (data / "gmm.json").read_bytes()
    spec = str(instances / "spec.json")
    assert main(["generate", spec, "--out", str(data)]) == 2
    assert main(["generate", spec, "--out", str(data), "--force"]) == 0
    assert (data / "gmm.json").read_bytes() == first
    assert main(["generate", spec, "--out", str(tmp_path / "other")]) == 0
    assert (tmp_path / "other" / "sensor.json").read_bytes() == (data / "sensor.json").read_bytes()


def test_generate_unknown_type(tmp_path):
    spec = write(tmp_path / "s.json", {"targets": [{"type": "banana", "name": "b"}]})
    assert main(["generate", spec, "--out", str(tmp_path)]) == 2


def test_run_chains_and_outputs(instances, capsys):
    d = instances / "data"
    cfg = write(instances / "run.json", {
        "target": str(d / "gmm.json"), "library": str(d / "gmm.library.json"),
        "sampler": {"step_size": 0.3, "n_leapfrog": 8, "variant": "whmc_aug"},
        "n_chains": 4, "seed": 11, "n_iter": 60, "out_dir": str(instances / "out"), "reference": "true_mean",
    })
    assert main(["run", cfg]) == 0
    out = instances / "out"
    for c in range(4):
        tr = Trace.read_csv(out / f"chain{c}.csv")
        assert len(tr) == 60
        assert (out / f"rem_chain{c}.csv").exists()
        man = json.loads((out / f"manifest_chain{c}.json").read_text())
        assert man["seed"] == chain_seed(11, c) and len(man["initial"]) == 2
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 4 and "final_rem" in json.loads(lines[0])
    first = (out / "chain1.csv").read_text().splitlines()
    # chain 1 is unaffected by the number of chains
    cfg2 = write(instances / "run2.json", {**json.loads((instances / "run.json").read_text()),
                                           "n_chains": 2, "out_dir": str(instances / "out2")})
    assert main(["run", cfg2]) == 0
    second = (instances / "out2" / "chain1.csv").read_text().splitlines()
    assert [l.split(",")[2:] for l in first] == [l.split(",")[2:] for l in second]


def test_run_hybrid(instances):
    d = instances / "data"
    cfg = write(instances / "h.json", {
        "target": str(d / "four.json"), "library": str(d / "four.library.json"), "mode": "hybrid",
        "sampler": {"step_size": 0.25, "n_leapfrog": 10, "variant": "whmc_aug"},
        "hybrid": {"n_starts": 5}, "n_iter": 50, "seed": 2, "out_dir": str(instances / "hy"),
    })
    assert main(["run", cfg]) == 0
    assert (instances / "hy" / "events_chain0.jsonl").exists()
    assert (instances / "hy" / "library_chain0.json").exists()


@pytest.mark.parametrize("patch", [
    {"target": None},
    {"n_iter": None},
    {"sampler": {"step_size": -1.0}},
    {"mode": "tempering"},
    {"sampler": {"variant": "whmc_aug"}, "library": None, "initial": [0.0, 0.0]},
])
def test_run_config_errors(instances, patch):
    d = instances / "data"
    base = {"target": str(d / "gmm.json"), "library": str(d / "gmm.library.json"), "n_iter": 5,
            "out_dir": str(instances / "bad")}
    base.update(patch)
    base = {k: v for k, v in base.items() if v is not None}
    assert main(["run", write(instances / "bad.json", base)]) == 2


def test_missing_config_file(tmp_path):
    assert main(["run", str(tmp_path / "nope.json")]) == 2
    (tmp_path / "broken.json").write_text("{")
    assert main(["run", str(tmp_path / "broken.json")]) == 2


def test_numeric_failure_exit_code(instances, monkeypatch):
    import whmc.cli as cli

    def boom(*a, **k):
        raise cli.NumericalError("non-finite gradient")

    monkeypatch.setattr(cli, "run_chain", boom)
    d = instances / "data"
    cfg = write(instances / "n.json", {"target": str(d / "gmm.json"), "library": str(d / "gmm.library.json"),
                                       "n_iter": 5, "out_dir": str(instances / "n")})
    assert main(["run", cfg]) == 3


def test_rem_command(instances, capsys):
    d = instances / "data"
    cfg = write(instances / "run.json", {
        "target": str(d / "gmm.json"), "library": str(d / "gmm.library.json"),
        "sampler": {"step_size": 0.3, "n_leapfrog": 8}, "n_chains": 2, "n_iter": 40, "out_dir": str(instances / "o"),
    })
    assert main(["run", cfg]) == 0
    capsys.readouterr()
    traces = [str(instances / "o" / f"chain{c}.csv") for c in range(2)]
    out = str(instances / "rem.csv")
    assert main(["rem", *traces, "--target", str(d / "gmm.json"), "--out", out, "--threshold", "-1"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert all(c["time_to_threshold"] is None for c in summary["chains"])
    header = open(out).readline().strip().split(",")
    assert header == ["time", "chain0", "chain1", "mean", "lower", "upper"]
    ref = write(instances / "ref.json", {"mean": [1.0, 1.0]})
    assert main(["rem", *traces, "--reference", ref, "--out", out]) == 0
    assert main(["rem", *traces, "--out", out]) == 2
    assert main(["rem", *traces, "--target", str(d / "welling.json"), "--out", out]) == 2


def test_modesearch_command(instances, capsys):
    d = instances / "data"
    cfg = write(instances / "ms.json", {
        "target": str(d / "four.json"), "library": str(d / "four.library.json"), "n_starts": 20, "seed": 0,
        "out": str(instances / "lib.json"),
    })
    assert main(["modesearch", cfg]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["n_before"] == 2 and res["n_after"] == 4
    report = json.loads((instances / "lib.report.json").read_text())
    assert len(report["starts"]) == 20

    cfg = write(instances / "ms2.json", {
        "target": str(d / "four.json"), "n_starts": 30, "start_box": [-10, 10], "min_weight": 1e-3,
        "out": str(instances / "lib2.json"),
    })
    assert main(["modesearch", cfg]) == 0
    assert json.loads(capsys.readouterr().out)["n_after"] == 4
