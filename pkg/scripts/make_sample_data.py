"""Regenerate the bundled two-node sample data and its expected estimate.

The expected output is the pooled closed-form MLE, so ``secure-mle estimate``
on the sample config should reproduce it to optimizer tolerance.
"""

import json
from pathlib import Path

import numpy as np

from secure_mle.ingest import write_table
from secure_mle.oracle import closed_form_mle
from secure_mle.mvn import log_likelihood
from secure_mle.partition import PartitionLayout

OUT = Path(__file__).resolve().parents[1] / "src" / "secure_mle" / "data" / "sample"

CONFIG = """\
layout = "layout.json"
seed = 7
transport = "in_process"

[data]
clinic = "clinic.csv"
registry = "registry.csv"

[model]
kind = "saturated"

[optimizer]
max_evals = 20000

[output]
result = "result.json"
table = "result.txt"
"""


def main() -> None:
    rng = np.random.default_rng(20240611)
    n, names = 120, ["age", "bmi", "sbp"]
    mean = np.array([50.0, 27.0, 130.0])
    sd = np.array([10.0, 4.0, 15.0])
    corr = np.array([[1.0, 0.3, 0.5], [0.3, 1.0, 0.4], [0.5, 0.4, 1.0]])
    data = rng.multivariate_normal(mean, corr * np.outer(sd, sd), size=n).round(2)
    ids = [str(1001 + i) for i in range(n)]
    layout = PartitionLayout.vertical([[0], [1, 2]], n, ["clinic", "registry"], tuple(names))
    OUT.mkdir(parents=True, exist_ok=True)
    layout.save(OUT / "layout.json")
    write_table(OUT / "clinic.csv", ids, names[:1], data[:, :1])
    # the second file is in a different row order; ids align it
    perm = rng.permutation(n)
    write_table(OUT / "registry.csv", [ids[i] for i in perm], names[1:], data[perm, 1:])
    (OUT / "config.toml").write_text(CONFIG)
    mle = closed_form_mle(data)
    expected = {"variables": names, "mean": mle.mean.tolist(), "cov": mle.cov.tolist(),
                "loglik": log_likelihood(mle, data)}
    (OUT / "expected.json").write_text(json.dumps(expected, indent=2) + "\n")
    print(f"wrote sample data to {OUT}")


if __name__ == "__main__":
    main()
