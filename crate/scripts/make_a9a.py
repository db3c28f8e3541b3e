#!/usr/bin/env python3
"""Binarize the raw UCI Adult files into the 123-feature LIBSVM layout used by a9a.

Continuous attributes are cut into quantile bins fitted on the training file
(capital-gain / capital-loss use a zero / non-zero split), categorical
attributes are one-hot encoded in the order listed in adult.names. Missing
values ("?") leave their whole group at zero.

usage: make_a9a.py adult.data adult.test out_dir
"""
import sys
from pathlib import Path

CATEGORIES = {
    "workclass": "Private, Self-emp-not-inc, Self-emp-inc, Federal-gov, Local-gov, State-gov, Without-pay, Never-worked",
    "education": "Bachelors, Some-college, 11th, HS-grad, Prof-school, Assoc-acdm, Assoc-voc, 9th, 7th-8th, 12th, Masters, 1st-4th, 10th, Doctorate, 5th-6th, Preschool",
    "marital-status": "Married-civ-spouse, Divorced, Never-married, Separated, Widowed, Married-spouse-absent, Married-AF-spouse",
    "occupation": "Tech-support, Craft-repair, Other-service, Sales, Exec-managerial, Prof-specialty, Handlers-cleaners, Machine-op-inspct, Adm-clerical, Farming-fishing, Transport-moving, Priv-house-serv, Protective-serv, Armed-Forces",
    "relationship": "Wife, Own-child, Husband, Not-in-family, Other-relative, Unmarried",
    "race": "White, Asian-Pac-Islander, Amer-Indian-Eskimo, Other, Black",
    "sex": "Female, Male",
    "native-country": "United-States, Cambodia, England, Puerto-Rico, Canada, Germany, Outlying-US(Guam-USVI-etc), India, Japan, Greece, South, China, Cuba, Iran, Honduras, Philippines, Italy, Poland, Jamaica, Vietnam, Mexico, Portugal, Ireland, France, Dominican-Republic, Laos, Ecuador, Taiwan, Haiti, Columbia, Hungary, Guatemala, Nicaragua, Scotland, Thailand, Yugoslavia, El-Salvador, Trinadad&Tobago, Peru, Hong, Holand-Netherlands",
}
CATEGORIES = {k: [c.strip() for c in v.split(",")] for k, v in CATEGORIES.items()}

# (column name, kind, bins)
LAYOUT = [
    ("age", "quantile", 5),
    ("workclass", "category", None),
    ("fnlwgt", "quantile", 5),
    ("education", "category", None),
    ("education-num", "quantile", 5),
    ("marital-status", "category", None),
    ("occupation", "category", None),
    ("relationship", "category", None),
    ("race", "category", None),
    ("sex", "category", None),
    ("capital-gain", "nonzero", 2),
    ("capital-loss", "nonzero", 2),
    ("hours-per-week", "quantile", 5),
    ("native-country", "category", None),
]


def read_rows(path):
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("|"):
            continue
        fields = [f.strip() for f in line.split(",")]
        if len(fields) != 15:
            continue
        rows.append(fields)
    return rows


def quantile_edges(values, bins):
    values = sorted(values)
    edges = []
    for i in range(1, bins):
        edges.append(values[(len(values) * i) // bins])
    return edges


def main():
    train_path, test_path, out_dir = sys.argv[1:4]
    train = read_rows(train_path)
    test = read_rows(test_path)

    edges = {}
    for col, (name, kind, bins) in enumerate(LAYOUT):
        if kind == "quantile":
            edges[col] = quantile_edges([float(r[col]) for r in train], bins)

    widths = []
    for name, kind, bins in LAYOUT:
        widths.append(len(CATEGORIES[name]) if kind == "category" else bins)
    offsets = [sum(widths[:i]) for i in range(len(widths))]
    assert sum(widths) == 123, sum(widths)

    def encode(row):
        active = []
        for col, (name, kind, bins) in enumerate(LAYOUT):
            raw = row[col]
            if raw == "?":
                continue
            if kind == "category":
                slot = CATEGORIES[name].index(raw)
            elif kind == "nonzero":
                slot = 0 if float(raw) == 0 else 1
            else:
                v = float(raw)
                slot = sum(1 for e in edges[col] if v >= e)
            active.append(offsets[col] + slot + 1)
        label = "+1" if row[14].rstrip(".") == ">50K" else "-1"
        return label + "".join(f" {i}:1" for i in active)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "a9a").write_text("\n".join(encode(r) for r in train) + "\n")
    (out / "a9a.t").write_text("\n".join(encode(r) for r in test) + "\n")


if __name__ == "__main__":
    main()
