"""Regenerate the bundled mini-dataset under data/mini."""

from pathlib import Path

from harc import synthetic

OUT = Path(__file__).resolve().parent.parent / "data" / "mini"

if __name__ == "__main__":
    data = synthetic.generate(n_users=150, n_items=120, per_user=15, noise=0.5, doc_words=24, dim=300, seed=7)
    for name, path in synthetic.write_dataset(data, OUT).items():
        print(name, path.relative_to(OUT.parent.parent), path.stat().st_size)
