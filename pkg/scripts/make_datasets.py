"""Export the small benchmark tables bundled with scikit-learn to data/*.csv.

Class labels are dropped so only the input features remain.

    python scripts/make_datasets.py [outdir]
"""

import sys
from pathlib import Path

import numpy as np
from sklearn import datasets

LOADERS = {
    "iris": datasets.load_iris,
    "wine": datasets.load_wine,
    "breast_cancer": datasets.load_breast_cancer,
    "diabetes": datasets.load_diabetes,
}


def main(outdir="data"):
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    for name, loader in LOADERS.items():
        bunch = loader()
        header = ",".join(str(f).replace(" ", "_") for f in bunch.feature_names)
        path = out / f"{name}.csv"
        np.savetxt(path, bunch.data, delimiter=",", header=header, comments="", fmt="%.10g")
        print(f"{path}: {bunch.data.shape[0]}x{bunch.data.shape[1]}")


if __name__ == "__main__":
    main(*sys.argv[1:])
