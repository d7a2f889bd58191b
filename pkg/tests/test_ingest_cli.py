import json
import shutil
from pathlib import Path

import numpy as np
import pytest

import secure_mle
from secure_mle.cli import main
from secure_mle.errors import AlignmentError, ConfigError, MissingDataError
from secure_mle.ingest import impute_marginal, ingest, ingest_node, read_table, write_table
from secure_mle.partition import PartitionLayout

SAMPLE = Path(secure_mle.__file__).parent / "data" / "sample"


@pytest.fixture
def sample(tmp_path):
    for f in SAMPLE.iterdir():
        shutil.copy(f, tmp_path / f.name)
    return tmp_path


def _layout(n=4):
    return PartitionLayout.vertical([[0], [1, 2]], n, names=["a", "b"], var_names=("x", "y", "z"))


def _write_pair(tmp_path, rng, n=4, ids=None):
    ids = ids or [str(10 + i) for i in range(n)]
    data = rng.normal(size=(n, 3))
    write_table(tmp_path / "a.csv", ids, ["x"], data[:, :1])
    perm = rng.permutation(n)
    write_table(tmp_path / "b.csv", [ids[i] for i in perm], ["z", "y"], data[perm][:, [2, 1]])
    return data, {"a": tmp_path / "a.csv", "b": tmp_path / "b.csv"}


def test_round_trip_alignment(tmp_path, rng):
    data, paths = _write_pair(tmp_path, rng)
    result = ingest(paths, _layout())
    assert result.ids == ["10", "11", "12", "13"]
    assert np.array_equal(result.partitions["a"].rows, data[:, :1])
    assert np.array_equal(result.partitions["b"].rows, data[:, 1:])
    assert "4 aligned rows" in result.summary()


def test_numeric_id_order(tmp_path, rng):
    ids = ["9", "10", "100", "11"]
    data, paths = _write_pair(tmp_path, rng, ids=ids)
    result = ingest(paths, _layout())
    assert result.ids == ["9", "10", "11", "100"]
    assert np.array_equal(result.partitions["a"].rows[:, 0], data[[0, 1, 3, 2], 0])


def test_single_node_ingest(tmp_path, rng):
    data, paths = _write_pair(tmp_path, rng)
    part, counts = ingest_node(read_table(paths["b"]), _layout(), "b")
    assert np.array_equal(part.rows, data[:, 1:]) and counts == {}


def test_imputation(tmp_path, rng):
    data, paths = _write_pair(tmp_path, rng)
    text = paths["a"].read_text().splitlines()
    text[2] = text[2].split(",")[0] + ",NA"
    paths["a"].write_text("\n".join(text) + "\n")
    with pytest.raises(MissingDataError):
        ingest(paths, _layout())
    result = ingest(paths, _layout(), impute=True)
    observed = np.delete(data[:, 0], 1)
    assert result.partitions["a"].rows[1, 0] == pytest.approx(observed.mean())
    assert result.imputed == {"a": {"x": 1}}


def test_impute_all_missing():
    with pytest.raises(MissingDataError):
        impute_marginal(np.full((3, 1), np.nan), ["x"])


def test_misalignment(tmp_path, rng):
    data, paths = _write_pair(tmp_path, rng)
    lines = paths["b"].read_text().splitlines()
    lines[1] = "99" + lines[1][lines[1].index(","):]
    paths["b"].write_text("\n".join(lines) + "\n")
    with pytest.raises(AlignmentError):
        ingest(paths, _layout())


def test_bad_tables(tmp_path):
    bad = tmp_path / "t.csv"
    for text, err in (("", ConfigError), ("key,x\n1,2\n", AlignmentError), ("id,x\n1,2\n1,3\n", AlignmentError),
                      ("id,x\n1,2,3\n", ConfigError), ("id,x\n1,abc\n", ConfigError), ("id,x\n,1\n", AlignmentError)):
        bad.write_text(text)
        with pytest.raises(err):
            read_table(bad)
    with pytest.raises(ConfigError):
        read_table(tmp_path / "missing.csv")


def test_wrong_columns(tmp_path, rng):
    data, paths = _write_pair(tmp_path, rng)
    with pytest.raises(AlignmentError):
        ingest_node(read_table(paths["a"]), _layout(), "b")
    with pytest.raises(ConfigError):
        ingest({"a": paths["a"]}, _layout())


# -- command line ---------------------------------------------------------------


def test_sample_estimate(sample, capsys):
    assert main(["estimate", str(sample / "config.toml")]) == 0
    out = json.loads((sample / "result.json").read_text())
    expected = json.loads((sample / "expected.json").read_text())
    assert out["converged"] and out["variables"] == expected["variables"]
    assert np.abs(np.array(out["mean"]) - expected["mean"]).max() < 0.01
    assert np.abs(np.array(out["cov"]) - expected["cov"]).max() < 0.01
    assert out["loglik"] == pytest.approx(expected["loglik"], abs=1e-6)
    assert "log-likelihood" in capsys.readouterr().out
    assert (sample / "result.txt").read_text().startswith("parameter")


def _short_config(sample, **extra):
    cfg = (sample / "config.toml").read_text().replace("max_evals = 20000", "max_evals = 60")
    for key, value in extra.items():
        cfg = cfg.replace("[data]", f"{key} = {value}\n\n[data]")
    path = sample / "short.toml"
    path.write_text(cfg)
    return path


def test_estimate_is_reproducible(sample):
    path = _short_config(sample)
    outs = []
    for _ in range(2):
        assert main(["estimate", str(path)]) == 1        # budget too small to converge
        outs.append((sample / "result.json").read_bytes())
    assert outs[0] == outs[1]
    assert main(["estimate", str(path), "--seed", "8"]) == 1
    assert (sample / "result.json").read_bytes() != outs[0]


def test_zero_noise_flag(sample):
    path = _short_config(sample)
    main(["estimate", str(path)])
    noisy = json.loads((sample / "result.json").read_text())
    main(["estimate", str(path), "--zero-noise"])
    clean = json.loads((sample / "result.json").read_text())
    assert clean["loglik"] == pytest.approx(noisy["loglik"], rel=1e-9)


def test_transcript_output_and_audit(sample, capsys):
    path = _short_config(sample)
    text = path.read_text().replace('table = "result.txt"', 'table = "result.txt"\ntranscript = "run.jsonl"')
    path.write_text(text)
    main(["estimate", str(path)])
    assert (sample / "run.jsonl").is_file()
    first = (sample / "run.jsonl").read_text().splitlines()[0]
    assert json.loads(first)["eval_id"] == "e000001"
    capsys.readouterr()
    assert main(["audit", str(sample / "config.toml"), "--json", str(sample / "audit.json")]) == 0
    assert "violations: 0" in capsys.readouterr().out
    assert json.loads((sample / "audit.json").read_text())["ok"]
    assert main(["audit", str(sample / "config.toml"), "--zero-noise"]) == 1


def test_audit_with_params_file(sample):
    expected = sample / "expected.json"
    assert main(["audit", str(sample / "config.toml"), "--params", str(expected)]) == 0
    bad = sample / "bad.json"
    bad.write_text(json.dumps({"mean": [0.0], "cov": [[1.0]]}))
    assert main(["audit", str(sample / "config.toml"), "--params", str(bad)]) == 2


def test_ingest_check(sample, capsys):
    assert main(["ingest-check", str(sample / "config.toml")]) == 0
    out = capsys.readouterr().out
    assert "120 aligned rows" in out and "vertical" in out


def test_usage_and_input_errors(sample, tmp_path, capsys):
    assert main([]) == 2
    assert main(["estimate", str(tmp_path / "nope.toml")]) == 2
    (sample / "clinic.csv").unlink()
    assert main(["estimate", str(sample / "config.toml")]) == 2
    assert "clinic" in capsys.readouterr().err
    bad = sample / "bad.toml"
    for text in ("layout = \"layout.json\"\ncolour = 1\n", "[data]\n", "layout = \"layout.json\"\n[model]\nkind = \"probit\"\n",
                 "layout = \"layout.json\"\n[optimizer]\nspeed = 1\n", "layout = [\n"):
        bad.write_text(text)
        assert main(["ingest-check", str(bad)]) == 2


def test_bench_smoke(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--n", "50,100", "--p", "4", "--K", "2", "--reps", "1", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("n,p,K") and len(lines) == 3
    assert "log-log slope" in capsys.readouterr().out
    assert main(["bench", "--n", "1000", "--p", "10", "--K", "5", "--cap", "100"]) == 2
    assert main(["bench", "--n", "x"]) == 2


def test_module_entry_point(sample):
    import subprocess
    import sys
    proc = subprocess.run([sys.executable, "-m", "secure_mle", "ingest-check", str(sample / "config.toml")],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "aligned rows" in proc.stdout
